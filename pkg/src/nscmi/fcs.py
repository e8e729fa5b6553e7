"""Multiple imputation of non-monotone missing binary outcomes by fully
conditional specification.

Each of T imputation replicates starts from a marginal fill of the missing
cells and then performs R sweeps.  A sweep visits the outcomes in fixed
ascending order; for outcome k it fits a logistic model of Y_k on the rows
where Y_k was observed and redraws the missing Y_k cells from the fitted
probabilities.  The conditioning set is what distinguishes the mechanisms:

* ``nsc``  — main effects of the other outcomes AND the other missingness
  indicators (valid when missingness is conditionally independent of the
  outcome's own value given the rest);
* ``mar``  — main effects of the other outcomes only (classical chained
  equations under missing-at-random).

Sensitivity to self-censoring enters as a fixed logit offset added when
predicting the missing cells (never when fitting, since fits use observed
rows only).  Offsets may vary by the level of one categorical covariate.

The engine refits by maximum penalized likelihood on every sweep and draws
only the Bernoulli outcomes; no posterior draw of the coefficients is
taken.  Between-imputation variability comes from the random initial fills
and re-fitting across the T replicates.  This understates Rubin
between-variance slightly relative to fully Bayesian imputation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import NumericalError, ValidationError
from .glm import PROB_FLOOR, DesignMatrix, _logistic, fit_core
from .rng import IMPUTATION, derive_rng

MISSING_TOKEN = "NA"
_OUTCOME_RE = re.compile(r"^y(\d+)$")

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

MECHANISMS = ("nsc", "mar")
COVARIATE_DESIGNS = ("none", "main", "interactions", "stratify")


@dataclass(frozen=True)
class Dataset:
    """N rows of K tri-state outcomes (0/1/missing) plus complete covariates.

    ``y`` holds the observed values (entries under ``mask`` are arbitrary and
    must never be read); ``mask`` is True where the outcome is missing.
    """

    y: np.ndarray
    mask: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    kinds: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.uint8)
        mask = np.asarray(self.mask, dtype=bool)
        if y.ndim != 2 or y.shape != mask.shape:
            raise ValidationError(f"y {y.shape} and mask {mask.shape} must match, 2-D")
        if y.shape[0] < 1:
            raise ValidationError("dataset needs at least one row")
        if y.shape[1] < 2:
            raise ValidationError("FCS needs at least two outcome columns")
        if np.any(y[~mask] > 1):
            raise ValidationError("observed outcome values must be 0/1")
        y = y.copy()
        y[mask] = 0
        y.setflags(write=False)
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "mask", mask)
        covs = {}
        kinds = dict(self.kinds)
        for name, col in self.covariates.items():
            col = np.asarray(col)
            if col.shape != (y.shape[0],):
                raise ValidationError(f"covariate {name!r} has shape {col.shape}")
            kind = kinds.get(name)
            if kind not in (CONTINUOUS, CATEGORICAL):
                raise ValidationError(f"covariate {name!r} needs a declared kind")
            if kind == CONTINUOUS:
                col = col.astype(np.float64)
                if not np.all(np.isfinite(col)):
                    raise ValidationError(f"covariate {name!r} has non-finite values")
            else:
                col = col.astype(str)
            col.setflags(write=False)
            covs[name] = col
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "kinds", kinds)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.y.shape[1]

    def categorical_levels(self, name: str) -> tuple:
        if self.kinds.get(name) != CATEGORICAL:
            raise ValidationError(f"covariate {name!r} is not categorical")
        return tuple(sorted(set(self.covariates[name].tolist())))


@dataclass(frozen=True)
class Provenance:
    imputation_index: int
    config_hash: str
    seed: int


@dataclass(frozen=True)
class CompletedDataset:
    """A Dataset with every cell filled; observed cells match the source."""

    y: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    kinds: Mapping[str, str] = field(default_factory=dict)
    provenance: Provenance | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.uint8)
        if y.ndim != 2 or np.any(y > 1):
            raise ValidationError("completed outcomes must be an n x K 0/1 matrix")
        y = y.copy()
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.y.shape[1]


@dataclass(frozen=True)
class SensitivitySpec:
    """Per-outcome logit offsets, optionally varying by one categorical covariate.

    ``offsets`` is the global per-outcome vector (empty = all zero).  When
    ``group`` is set, rows whose level appears in ``group_offsets`` use that
    level's vector instead; unlisted levels fall back to the global vector.
    """

    offsets: tuple = ()
    group: str | None = None
    group_offsets: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        offs = tuple(float(x) for x in self.offsets)
        if any(not np.isfinite(x) for x in offs):
            raise ValidationError("sensitivity offsets must be finite")
        object.__setattr__(self, "offsets", offs)
        go = {}
        for level, vec in self.group_offsets.items():
            vec = tuple(float(x) for x in vec)
            if any(not np.isfinite(x) for x in vec):
                raise ValidationError(f"offsets for level {level!r} must be finite")
            go[str(level)] = vec
        object.__setattr__(self, "group_offsets", go)
        if go and self.group is None:
            raise ValidationError("group_offsets given without a group covariate")

    def _entry(self, vec: tuple, k: int) -> float:
        return vec[k - 1] if k - 1 < len(vec) else 0.0

    def offset_for_rows(self, dataset_covs, k: int, rows: np.ndarray) -> np.ndarray:
        """Offset for outcome k on the given row indices."""
        base = self._entry(self.offsets, k)
        out = np.full(rows.shape[0], base)
        if self.group is not None and self.group_offsets:
            levels = dataset_covs[self.group][rows]
            for level, vec in self.group_offsets.items():
                out[levels == level] = self._entry(vec, k)
        return out

    def is_zero(self) -> bool:
        return not any(self.offsets) and not any(
            any(vec) for vec in self.group_offsets.values()
        )

    def as_dict(self) -> dict:
        return {
            "offsets": list(self.offsets),
            "group": self.group,
            "group_offsets": {lv: list(v) for lv, v in sorted(self.group_offsets.items())},
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "SensitivitySpec":
        return cls(
            tuple(payload.get("offsets", ())),
            payload.get("group"),
            {lv: tuple(v) for lv, v in payload.get("group_offsets", {}).items()},
        )


@dataclass(frozen=True)
class FcsConfig:
    """Everything the imputation engine needs besides the data.

    ``posterior_draw`` perturbs each sweep's fitted coefficients with one
    draw from their large-sample normal approximation before predicting,
    propagating estimation uncertainty into the imputations the way
    standard chained-equations software does.  Turning it off refits by
    maximum penalized likelihood only.
    """

    mechanism: str = "nsc"
    t_imputations: int = 20
    r_iterations: int = 10
    sensitivity: SensitivitySpec = field(default_factory=SensitivitySpec)
    covariate_design: str = "none"
    interaction_group: str | None = None
    stratify_by: str | None = None
    ym_products: bool = False
    ridge: float = 1e-4
    posterior_draw: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValidationError(f"mechanism must be one of {MECHANISMS}")
        if self.covariate_design not in COVARIATE_DESIGNS:
            raise ValidationError(f"covariate_design must be one of {COVARIATE_DESIGNS}")
        if self.t_imputations < 1 or self.r_iterations < 1:
            raise ValidationError("t_imputations and r_iterations must be >= 1")
        if self.ridge < 0 or not np.isfinite(self.ridge):
            raise ValidationError("ridge must be finite and >= 0")
        if self.covariate_design == "interactions" and not self.interaction_group:
            raise ValidationError("interactions design needs interaction_group")
        if self.covariate_design == "stratify" and not self.stratify_by:
            raise ValidationError("stratify design needs stratify_by")

    def validate_against(self, dataset: Dataset) -> None:
        for name, role in (
            (self.interaction_group, "interaction_group"),
            (self.stratify_by, "stratify_by"),
            (self.sensitivity.group, "sensitivity group"),
        ):
            if name is None:
                continue
            if name not in dataset.covariates:
                raise ValidationError(f"{role} covariate {name!r} not in dataset")
            if dataset.kinds[name] != CATEGORICAL:
                raise ValidationError(f"{role} covariate {name!r} must be categorical")

    def as_dict(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "t_imputations": self.t_imputations,
            "r_iterations": self.r_iterations,
            "sensitivity": self.sensitivity.as_dict(),
            "covariate_design": self.covariate_design,
            "interaction_group": self.interaction_group,
            "stratify_by": self.stratify_by,
            "ym_products": self.ym_products,
            "ridge": self.ridge,
            "posterior_draw": self.posterior_draw,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "FcsConfig":
        payload = dict(payload)
        sens = payload.get("sensitivity", {})
        if not isinstance(sens, SensitivitySpec):
            sens = SensitivitySpec.from_dict(sens)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        payload["sensitivity"] = sens
        return cls(**payload)


def config_hash(config: FcsConfig) -> str:
    blob = json.dumps(config.as_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _covariate_blocks(dataset_covs, kinds, names: Sequence[str]) -> list:
    """Encode covariates as (label, float column) pairs; categoricals become
    reference-coded indicators against their first (sorted) level."""
    blocks = []
    for name in names:
        col = dataset_covs[name]
        if kinds[name] == CONTINUOUS:
            blocks.append((name, col.astype(np.float64)))
        else:
            levels = sorted(set(col.tolist()))
            for level in levels[1:]:
                blocks.append((f"{name}={level}", (col == level).astype(np.float64)))
    return blocks


def fcs_design(
    completed: CompletedDataset,
    mask: np.ndarray,
    k: int,
    config: FcsConfig,
) -> DesignMatrix:
    """Design matrix of the conditional model for outcome ``k`` (1-based).

    NSC: intercept + other outcomes + other indicators (+ covariate terms;
    under the interactions design each non-reference level indicator of the
    designated group multiplies every outcome/indicator column).  MAR:
    intercept + other outcomes + covariate main effects only.  Stratified
    runs exclude covariate columns (stratification happens in the sweep).
    Optional ``ym_products`` adds the pairwise products Y_j·M_l (j ≠ l,
    both ≠ k) to the NSC design.
    """
    y = completed.y
    n, kk = y.shape
    if not 1 <= k <= kk:
        raise ValidationError(f"outcome index {k} outside 1..{kk}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != y.shape:
        raise ValidationError("mask shape must match the outcome matrix")
    others = [j for j in range(kk) if j != k - 1]
    cols = [np.ones(n)]
    labels = ["intercept"]
    base_cols = []
    for j in others:
        col = y[:, j].astype(np.float64)
        cols.append(col)
        labels.append(f"y{j + 1}")
        base_cols.append((f"y{j + 1}", col))
    if config.mechanism == "nsc":
        for j in others:
            col = mask[:, j].astype(np.float64)
            cols.append(col)
            labels.append(f"m{j + 1}")
            base_cols.append((f"m{j + 1}", col))
        if config.ym_products:
            for j in others:
                for l in others:
                    if j != l:
                        cols.append(y[:, j] * mask[:, l].astype(np.float64))
                        labels.append(f"y{j + 1}*m{l + 1}")
    if config.covariate_design in ("main", "interactions"):
        cov_blocks = _covariate_blocks(
            completed.covariates, completed.kinds, sorted(completed.covariates)
        )
        for label, col in cov_blocks:
            cols.append(col)
            labels.append(label)
        if config.covariate_design == "interactions" and config.mechanism == "nsc":
            group_blocks = _covariate_blocks(
                completed.covariates, completed.kinds, [config.interaction_group]
            )
            for glabel, gcol in group_blocks:
                for blabel, bcol in base_cols:
                    cols.append(gcol * bcol)
                    labels.append(f"{glabel}*{blabel}")
    return DesignMatrix(np.column_stack(cols), tuple(labels))


def initial_fill(dataset: Dataset, rng: np.random.Generator,
                 stratify_by: str | None = None) -> CompletedDataset:
    """Fill each missing cell from the empirical margin of its outcome among
    observed rows (per stratum when stratifying)."""
    y = dataset.y.copy()
    strata = _strata(dataset.covariates, stratify_by, dataset.n)
    for k in range(dataset.k):
        miss = dataset.mask[:, k]
        for label, rows in strata:
            sub_miss = rows[miss[rows]]
            sub_obs = rows[~miss[rows]]
            if sub_obs.size == 0:
                where = f" in stratum {label!r}" if label is not None else ""
                raise ValidationError(f"outcome y{k + 1} has no observed values{where}")
            if sub_miss.size == 0:
                continue
            p = dataset.y[sub_obs, k].mean()
            y[sub_miss, k] = rng.random(sub_miss.size) < p
    return CompletedDataset(y, dataset.covariates, dataset.kinds, None)


def _strata(covs, stratify_by: str | None, n: int) -> list:
    if stratify_by is None:
        return [(None, np.arange(n))]
    col = covs[stratify_by]
    return [(level, np.flatnonzero(col == level)) for level in sorted(set(col.tolist()))]


def sweep(
    state: CompletedDataset,
    mask: np.ndarray,
    config: FcsConfig,
    rng: np.random.Generator,
    warm_starts: dict | None = None,
) -> CompletedDataset:
    """One full pass over the outcomes in ascending order.

    For each outcome: fit its conditional logistic model on rows where it was
    observed (unit weights, configured ridge) and redraw every missing cell
    from the fitted probability plus that row's sensitivity offset.  Under
    stratification the fit/draw cycle runs independently within each stratum.

    ``warm_starts`` (a mutable dict) carries coefficient vectors between
    consecutive sweeps of one imputation to start the solver near its
    optimum; it never changes what the fit converges to.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return state
    y = state.y.copy()
    stratify = config.stratify_by if config.covariate_design == "stratify" else None
    strata = _strata(state.covariates, stratify, state.n)
    for k in range(1, state.k + 1):
        miss_col = mask[:, k - 1]
        if not miss_col.any():
            continue
        working = CompletedDataset(y, state.covariates, state.kinds, None)
        design = fcs_design(working, mask, k, config)
        for label, rows in strata:
            obs_rows = rows[~miss_col[rows]]
            miss_rows = rows[miss_col[rows]]
            if miss_rows.size == 0:
                continue
            if obs_rows.size == 0:
                where = f"stratum {label!r}" if label is not None else "dataset"
                raise NumericalError(f"no observed y{k} values in {where}")
            warm = None if warm_starts is None else warm_starts.get((k, label))
            beta, _, _, _ = fit_core(
                design.rows[obs_rows],
                y[obs_rows, k - 1].astype(np.float64),
                None,
                config.ridge,
                warm,
            )
            if warm_starts is not None:
                warm_starts[(k, label)] = beta
            offsets = config.sensitivity.offset_for_rows(state.covariates, k, miss_rows)
            p = np.clip(
                _logistic(design.rows[miss_rows] @ beta + offsets),
                PROB_FLOOR,
                1.0 - PROB_FLOOR,
            )
            y[miss_rows, k - 1] = rng.random(miss_rows.size) < p
    return CompletedDataset(y, state.covariates, state.kinds, state.provenance)


def impute(dataset: Dataset, config: FcsConfig) -> list:
    """Run the full multiple-imputation algorithm: T independent replicates,
    each an initial fill followed by R sweeps.  Deterministic given
    (dataset, config); replicate t's stream depends only on (seed, t)."""
    config.validate_against(dataset)
    chash = config_hash(config)
    stratify = config.stratify_by if config.covariate_design == "stratify" else None
    results = []
    for t in range(1, config.t_imputations + 1):
        rng = derive_rng(config.seed, IMPUTATION, t)
        state = initial_fill(dataset, rng, stratify)
        warm_starts: dict = {}
        for _ in range(config.r_iterations):
            state = sweep(state, dataset.mask, config, rng, warm_starts)
        results.append(
            CompletedDataset(
                state.y,
                dataset.covariates,
                dataset.kinds,
                Provenance(t, chash, config.seed),
            )
        )
    return results


# ---------------------------------------------------------------------------
# CSV interchange: outcome columns y1..yK with 0/1/NA, covariates complete.
# ---------------------------------------------------------------------------


def read_dataset_csv(path) -> Dataset:
    """Parse a dataset file, rejecting malformed outcome cells and any missing
    covariate value with the offending row and column named."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise ValidationError(f"{path}: duplicate column names in header")
    outcome_cols = {}
    for pos, name in enumerate(header):
        m = _OUTCOME_RE.match(name)
        if m:
            outcome_cols[int(m.group(1))] = pos
    k = len(outcome_cols)
    if k < 2:
        raise ValidationError(f"{path}: need at least columns y1, y2")
    if sorted(outcome_cols) != list(range(1, k + 1)):
        raise ValidationError(
            f"{path}: outcome columns must be contiguous y1..y{k}, got {sorted(outcome_cols)}"
        )
    cov_positions = [
        (name, pos) for pos, name in enumerate(header) if not _OUTCOME_RE.match(name)
    ]
    n = len(rows)
    y = np.zeros((n, k), dtype=np.uint8)
    mask = np.zeros((n, k), dtype=bool)
    raw_covs = {name: [] for name, _ in cov_positions}
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValidationError(f"{path}: row {i + 2} has {len(row)} fields")
        for kk in range(1, k + 1):
            cell = row[outcome_cols[kk]].strip()
            if cell == MISSING_TOKEN:
                mask[i, kk - 1] = True
            elif cell in ("0", "1"):
                y[i, kk - 1] = int(cell)
            else:
                raise ValidationError(
                    f"{path}: row {i + 2}, column y{kk}: expected 0/1/NA, got {cell!r}"
                )
        for name, pos in cov_positions:
            cell = row[pos].strip()
            if cell == MISSING_TOKEN or cell == "":
                raise ValidationError(
                    f"{path}: row {i + 2}, column {name!r}: covariates must be complete"
                )
            raw_covs[name].append(cell)
    covariates, kinds = {}, {}
    for name, values in raw_covs.items():
        try:
            covariates[name] = np.array([float(v) for v in values])
            kinds[name] = CONTINUOUS
        except ValueError:
            covariates[name] = np.array(values)
            kinds[name] = CATEGORICAL
    return Dataset(y, mask, covariates, kinds)


def _format_outcomes(y: np.ndarray, mask: np.ndarray | None):
    for i in range(y.shape[0]):
        row = []
        for k in range(y.shape[1]):
            if mask is not None and mask[i, k]:
                row.append(MISSING_TOKEN)
            else:
                row.append(str(int(y[i, k])))
        yield row


def _write_rows(path, header, outcome_rows, covariates, cov_names):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, outcome_row in enumerate(outcome_rows):
            writer.writerow(outcome_row + [str(covariates[c][i]) for c in cov_names])


def write_dataset_csv(dataset: Dataset, path) -> None:
    cov_names = sorted(dataset.covariates)
    header = [f"y{k}" for k in range(1, dataset.k + 1)] + cov_names
    _write_rows(
        path,
        header,
        list(_format_outcomes(dataset.y, dataset.mask)),
        dataset.covariates,
        cov_names,
    )


def write_completed_csv(completed: CompletedDataset, path) -> None:
    cov_names = sorted(completed.covariates)
    header = [f"y{k}" for k in range(1, completed.k + 1)] + cov_names
    _write_rows(
        path,
        header,
        list(_format_outcomes(completed.y, None)),
        completed.covariates,
        cov_names,
    )


def read_completed_csv(path, provenance: Provenance | None = None) -> CompletedDataset:
    ds_like = read_dataset_csv(path)
    if ds_like.mask.any():
        raise ValidationError(f"{path}: completed dataset contains NA cells")
    return CompletedDataset(ds_like.y, ds_like.covariates, ds_like.kinds, provenance)
