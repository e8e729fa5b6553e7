"""Exact loglinear joint distributions over K binary outcomes and their
missingness indicators.

A model over ``(M, Y) = (M_1..M_K, Y_1..Y_K)`` is parameterized by
coefficients on products of variables:

    p(m, y) ∝ exp( Σ_terms  λ · Π_{i∈I} y_i · Π_{j∈J} m_j )

with each term identified by a pair of index subsets ``(I, J)`` stored as
bitmasks (:class:`TermKey`).  A model is *no-self-censoring* (NSC) valid
when no term mixes an outcome with its own indicator (``I ∩ J = ∅`` for
every stored term); this is exactly the restriction that makes
``M_k ⫫ Y_k | M_{-k}, Y_{-k}`` hold for every k.

Tables are enumerated exactly (all ``2^(2K)`` cells), which caps K at 12.
Cell indexing is bit-packed little-endian with the M bits low and the Y
bits high:

    cell = Σ_j m_j · 2^(j-1)  +  Σ_j y_j · 2^(K+j-1)

so ``m_bits = cell & (2^K - 1)`` and ``y_bits = cell >> K``.  This is also
the on-disk convention of :func:`dump_table_csv`.

Everything here is immutable after construction and free of hidden state;
:func:`sample` takes an explicit seed.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import CalibrationError, ValidationError, ZeroMassError

MAX_K = 12  # 2^(2*12) = 16.7M cells; the exact-enumeration ceiling

# A variable is an outcome ("y", k) or an indicator ("m", k), k 1-based.
Variable = Union[str, tuple]

_VAR_RE = re.compile(r"^([ymYM])(\d+)$")
_TOKEN_RE = re.compile(r"^([YMym])(\d+)$")


def parse_variable(var: Variable) -> tuple:
    """Normalize ``"Y3"`` / ``("m", 1)`` style references to ``(kind, k)``."""
    if isinstance(var, tuple):
        kind, k = var
        kind = str(kind).lower()
    else:
        m = _VAR_RE.match(str(var).strip())
        if not m:
            raise ValidationError(f"cannot parse variable reference {var!r}")
        kind, k = m.group(1).lower(), int(m.group(2))
    if kind not in ("y", "m"):
        raise ValidationError(f"variable kind must be 'y' or 'm', got {kind!r}")
    k = int(k)
    if k < 1:
        raise ValidationError(f"variable index must be >= 1, got {k}")
    return kind, k


def _mask_from_indices(indices: Iterable[int], k: int, what: str) -> int:
    mask = 0
    for i in indices:
        i = int(i)
        if not 1 <= i <= k:
            raise ValidationError(f"{what} index {i} outside 1..{k}")
        mask |= 1 << (i - 1)
    return mask


def _indices_from_mask(mask: int) -> tuple:
    out = []
    i = 1
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return tuple(out)


@dataclass(frozen=True, order=True)
class TermKey:
    """One loglinear term: the product of outcomes Y_i (i in ``y_set``) and
    indicators M_j (j in ``m_set``), both stored as bitmasks.

    The empty pair is rejected: a global intercept is absorbed by
    normalization and carries no information.
    """

    y_set: int
    m_set: int

    def __post_init__(self):
        if self.y_set < 0 or self.m_set < 0:
            raise ValidationError("term bitmasks must be non-negative")
        if self.y_set == 0 and self.m_set == 0:
            raise ValidationError("term must involve at least one variable")

    @classmethod
    def of(cls, ys: Iterable[int] = (), ms: Iterable[int] = ()) -> "TermKey":
        """Build from 1-based index collections, e.g. ``TermKey.of((1, 2), (3,))``."""
        ymask = _mask_from_indices(ys, MAX_K, "outcome")
        mmask = _mask_from_indices(ms, MAX_K, "indicator")
        return cls(ymask, mmask)

    @property
    def y_indices(self) -> tuple:
        return _indices_from_mask(self.y_set)

    @property
    def m_indices(self) -> tuple:
        return _indices_from_mask(self.m_set)

    @property
    def is_nsc(self) -> bool:
        """True when the term does not pair an outcome with its own indicator."""
        return (self.y_set & self.m_set) == 0

    def name(self) -> str:
        """Canonical text form: ``"Y1.Y2"``, ``"M3"``, ``"Y1.Y2:M3"``."""
        ypart = ".".join(f"Y{i}" for i in self.y_indices)
        mpart = ".".join(f"M{j}" for j in self.m_indices)
        if ypart and mpart:
            return f"{ypart}:{mpart}"
        return ypart or mpart

    @classmethod
    def parse(cls, name: str) -> "TermKey":
        """Inverse of :meth:`name`.  The ``":"`` separates Y factors from M factors."""
        name = name.strip()
        if ":" in name:
            ypart, mpart = name.split(":", 1)
            ys = _parse_tokens(ypart, "Y", name)
            ms = _parse_tokens(mpart, "M", name)
        else:
            tokens = [t for t in name.split(".") if t]
            if not tokens:
                raise ValidationError(f"empty term name {name!r}")
            kind = tokens[0][:1].upper()
            if kind == "Y":
                ys, ms = _parse_tokens(name, "Y", name), ()
            else:
                ys, ms = (), _parse_tokens(name, "M", name)
        return cls.of(ys, ms)


def _parse_tokens(part: str, expect: str, full: str) -> tuple:
    indices = []
    for token in part.split("."):
        m = _TOKEN_RE.match(token.strip())
        if not m or m.group(1).upper() != expect:
            raise ValidationError(
                f"bad term name {full!r}: expected {expect}-factor, got {token!r}"
            )
        indices.append(int(m.group(2)))
    return tuple(indices)


@dataclass(frozen=True)
class LoglinearSpec:
    """Dimension K plus a finite coefficient map; absent terms mean zero."""

    k: int
    terms: Mapping[TermKey, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.k <= MAX_K:
            raise ValidationError(f"k must be in 1..{MAX_K}, got {self.k}")
        full = (1 << self.k) - 1
        clean = {}
        for key, coef in self.terms.items():
            if not isinstance(key, TermKey):
                raise ValidationError(f"term key {key!r} is not a TermKey")
            if key.y_set & ~full or key.m_set & ~full:
                raise ValidationError(f"term {key.name()} references index > K={self.k}")
            coef = float(coef)
            if not math.isfinite(coef):
                raise ValidationError(f"non-finite coefficient for term {key.name()}")
            clean[key] = coef
        object.__setattr__(self, "terms", clean)

    def coefficient(self, key: TermKey) -> float:
        return self.terms.get(key, 0.0)

    def with_terms(self, updates: Mapping[TermKey, float]) -> "LoglinearSpec":
        merged = dict(self.terms)
        merged.update(updates)
        return LoglinearSpec(self.k, merged)

    def to_json(self) -> str:
        payload = {
            "k": self.k,
            "terms": {key.name(): coef for key, coef in sorted(self.terms.items())},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LoglinearSpec":
        payload = json.loads(text)
        terms = {TermKey.parse(name): float(c) for name, c in payload["terms"].items()}
        return cls(int(payload["k"]), terms)


def nsc_holds(spec: LoglinearSpec) -> bool:
    """True iff every stored term keeps outcome and own-indicator sets disjoint."""
    return all(key.is_nsc for key in spec.terms)


@dataclass(frozen=True)
class JointTable:
    """Exact probability table over all ``2^(2K)`` cells of (M, Y)."""

    k: int
    probs: np.ndarray

    def __post_init__(self):
        if not 1 <= self.k <= MAX_K:
            raise ValidationError(f"k must be in 1..{MAX_K}, got {self.k}")
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (1 << (2 * self.k),):
            raise ValidationError(
                f"probs must have length {1 << (2 * self.k)}, got {probs.shape}"
            )
        if not np.all(np.isfinite(probs)):
            raise ValidationError("probs contain non-finite entries")
        if probs.min() < 0:
            raise ValidationError("probs contain negative entries")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValidationError(f"probs sum to {probs.sum():.17g}, not 1")
        probs = probs.copy()
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def n_cells(self) -> int:
        return 1 << (2 * self.k)

    def m_bits(self, cell: int) -> int:
        return cell & ((1 << self.k) - 1)

    def y_bits(self, cell: int) -> int:
        return cell >> self.k

    def as_matrix(self) -> np.ndarray:
        """View shaped (2^K, 2^K): row = y_bits, column = m_bits."""
        return self.probs.reshape(1 << self.k, 1 << self.k)


def cell_index(m_bits: int, y_bits: int, k: int) -> int:
    """Pack (m_bits, y_bits) into the cell index (M low, Y high)."""
    if m_bits < 0 or m_bits >= (1 << k) or y_bits < 0 or y_bits >= (1 << k):
        raise ValidationError("m_bits/y_bits outside 0..2^K-1")
    return m_bits | (y_bits << k)


@dataclass(frozen=True)
class DeviationReport:
    """Result of a conditional-independence probe.

    ``max_abs_deviation`` is the largest absolute difference between the two
    compared conditional probabilities; ``argmax_cells`` holds the pair of
    table cells attaining it (None when every context was degenerate);
    ``skipped_contexts`` counts conditioning contexts dropped because one
    side had zero mass.
    """

    max_abs_deviation: float
    argmax_cells: tuple | None
    skipped_contexts: int = 0

    def __post_init__(self):
        if not 0.0 <= self.max_abs_deviation <= 1.0 + 1e-12:
            raise ValidationError(
                f"deviation {self.max_abs_deviation} outside [0, 1]"
            )


def _cell_arrays(k: int):
    cells = np.arange(1 << (2 * k), dtype=np.int64)
    m = cells & ((1 << k) - 1)
    y = cells >> k
    return cells, m, y


def build_table(spec: LoglinearSpec) -> JointTable:
    """Enumerate the normalized joint table of a loglinear model.

    probs[cell] ∝ exp(Σ_terms λ · [all Y_I bits set] · [all M_J bits set]).
    """
    k = spec.k
    _, m, y = _cell_arrays(k)
    logw = np.zeros(1 << (2 * k))
    for key, coef in spec.terms.items():
        active = ((y & key.y_set) == key.y_set) & ((m & key.m_set) == key.m_set)
        logw[active] += coef
    logw -= logw.max()
    w = np.exp(logw)
    return JointTable(k, w / w.sum())


def _variable_bitmask(table_k: int, var: Variable) -> int:
    kind, idx = parse_variable(var)
    if not 1 <= idx <= table_k:
        raise ValidationError(f"variable index {idx} outside 1..{table_k}")
    if kind == "m":
        return 1 << (idx - 1)
    return 1 << (table_k + idx - 1)


def marginal(table: JointTable, var: Variable) -> float:
    """P(variable = 1), by exact summation."""
    bit = _variable_bitmask(table.k, var)
    cells = np.arange(table.n_cells, dtype=np.int64)
    return float(table.probs[(cells & bit) != 0].sum())


def conditional(table: JointTable, target: Variable, given: Mapping[Variable, int]) -> float:
    """P(target = 1 | given), with a distinct error on zero-mass conditioning."""
    target_bit = _variable_bitmask(table.k, target)
    cells = np.arange(table.n_cells, dtype=np.int64)
    keep = np.ones(table.n_cells, dtype=bool)
    for var, value in given.items():
        bit = _variable_bitmask(table.k, var)
        if value not in (0, 1):
            raise ValidationError(f"conditioning value must be 0/1, got {value!r}")
        keep &= ((cells & bit) != 0) == bool(value)
    denom = float(table.probs[keep].sum())
    if denom <= 0.0:
        raise ZeroMassError(f"conditioning event {dict(given)!r} has zero mass")
    num = float(table.probs[keep & ((cells & target_bit) != 0)].sum())
    return num / denom


def self_censoring_deviation(table: JointTable, k_index: int) -> DeviationReport:
    """Largest gap between P(Y_k=1 | rest, M_k=1) and P(Y_k=1 | rest, M_k=0).

    The maximum runs over all contexts (y_{-k}, m_{-k}) where both arms have
    positive mass; degenerate contexts are skipped and counted.  Zero (up to
    rounding) exactly when outcome k is not self-censored.
    """
    k = table.k
    if not 1 <= k_index <= k:
        raise ValidationError(f"outcome index {k_index} outside 1..{k}")
    m_bit = 1 << (k_index - 1)
    y_bit = 1 << (k + k_index - 1)
    cells = np.arange(table.n_cells, dtype=np.int64)
    base = cells[((cells & m_bit) == 0) & ((cells & y_bit) == 0)]
    p = table.probs
    p00, p01 = p[base], p[base | y_bit]          # m_k = 0, y_k = 0/1
    p10, p11 = p[base | m_bit], p[base | m_bit | y_bit]  # m_k = 1
    mass0, mass1 = p00 + p01, p10 + p11
    valid = (mass0 > 0) & (mass1 > 0)
    skipped = int((~valid).sum())
    if not valid.any():
        return DeviationReport(0.0, None, skipped)
    with np.errstate(invalid="ignore", divide="ignore"):
        gap = np.abs(p11 / mass1 - p01 / mass0)
    gap[~valid] = -1.0
    best = int(np.argmax(gap))
    return DeviationReport(
        float(gap[best]),
        (int(base[best] | y_bit), int(base[best] | m_bit | y_bit)),
        skipped,
    )


def _pattern_conditionals(table: JointTable):
    """cond[y, m] = P(M=m | Y=y) plus the Y-marginal vector."""
    mat = table.as_matrix()  # rows y, cols m
    p_y = mat.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = mat / p_y[:, None]
    return cond, p_y


def _pattern_deviation(table: JointTable, group_by_observed: bool) -> DeviationReport:
    k = table.k
    n = 1 << k
    cond, p_y = _pattern_conditionals(table)
    ys = np.arange(n, dtype=np.int64)
    supported = p_y > 0
    skipped = int((~supported).sum())
    best_dev, best_cells = -1.0, None
    for m in range(n):
        c = cond[:, m]
        if group_by_observed:
            keys = ys & (~m & (n - 1))
        else:
            keys = np.zeros(n, dtype=np.int64)
        gmax = np.full(n, -np.inf)
        gmin = np.full(n, np.inf)
        np.maximum.at(gmax, keys[supported], c[supported])
        np.minimum.at(gmin, keys[supported], c[supported])
        dev = gmax - gmin
        dev[~np.isfinite(dev)] = -1.0
        g = int(np.argmax(dev))
        if dev[g] > best_dev:
            best_dev = float(dev[g])
            in_group = supported & (keys == g)
            members = ys[in_group]
            y_hi = int(members[np.argmax(c[in_group])])
            y_lo = int(members[np.argmin(c[in_group])])
            best_cells = (cell_index(m, y_hi, k), cell_index(m, y_lo, k))
    if best_cells is None:
        return DeviationReport(0.0, None, skipped)
    return DeviationReport(max(best_dev, 0.0), best_cells, skipped)


def mar_deviation(table: JointTable) -> DeviationReport:
    """Max over patterns m and value pairs agreeing on the observed coordinates
    of |P(M=m | Y=y) − P(M=m | Y=y′)|.  Zero iff the table is missing at random.
    """
    return _pattern_deviation(table, group_by_observed=True)


def mcar_deviation(table: JointTable) -> DeviationReport:
    """Max over patterns m and all value pairs of |P(M=m|Y=y) − P(M=m|Y=y′)|.
    Zero iff missingness is completely independent of the outcomes.
    """
    return _pattern_deviation(table, group_by_observed=False)


def calibrate(
    template: LoglinearSpec,
    free_terms: Sequence[TermKey],
    targets: Sequence[tuple],
    tol: float = 1e-10,
    max_iter: int = 200,
    fd_step: float = 1e-6,
) -> LoglinearSpec:
    """Solve for ``free_terms`` coefficients so stated marginals hit targets.

    ``targets`` pairs a single-variable moment ("Y2" or "M5") with its wanted
    marginal probability.  Damped Newton on the moment map with a
    forward-difference Jacobian; raises :class:`CalibrationError` on
    non-convergence (with the final residual) or a singular Jacobian.
    """
    if len(free_terms) != len(targets):
        raise ValidationError(
            f"{len(free_terms)} free terms vs {len(targets)} targets"
        )
    variables = []
    wanted = np.empty(len(targets))
    for i, (var, value) in enumerate(targets):
        variables.append(parse_variable(var))
        value = float(value)
        if not 0.0 < value < 1.0:
            raise ValidationError(f"target probability {value} outside (0, 1)")
        wanted[i] = value

    def moments(theta: np.ndarray) -> np.ndarray:
        spec = template.with_terms(dict(zip(free_terms, theta)))
        table = build_table(spec)
        return np.array([marginal(table, v) for v in variables])

    theta = np.array([template.coefficient(key) for key in free_terms], dtype=float)
    resid = moments(theta) - wanted
    singular_at_solution = False
    for _ in range(max_iter):
        if np.max(np.abs(resid)) <= tol:
            return template.with_terms(dict(zip(free_terms, theta)))
        jac = np.empty((len(targets), len(free_terms)))
        for j in range(len(free_terms)):
            bumped = theta.copy()
            bumped[j] += fd_step
            jac[:, j] = (moments(bumped) - wanted - resid) / fd_step
        try:
            step = np.linalg.solve(jac, -resid)
            singular_at_solution = False
        except np.linalg.LinAlgError:
            # Ill-conditioned away from the solution is survivable (take the
            # least-squares direction); singular at a converged point is not.
            step = np.linalg.lstsq(jac, -resid, rcond=None)[0]
            singular_at_solution = True
        if not np.all(np.isfinite(step)):
            raise CalibrationError("non-finite Newton step during calibration")
        # Cap the step so a flat moment map cannot fling the iterate into the
        # fully saturated region, then halve until the residual stops growing.
        cap = np.max(np.abs(step))
        if cap > 2.0:
            step *= 2.0 / cap
        scale = 1.0
        base_norm = np.linalg.norm(resid)
        for _ in range(40):
            trial = theta + scale * step
            trial_resid = moments(trial) - wanted
            if np.linalg.norm(trial_resid) < base_norm:
                break
            scale *= 0.5
        theta = theta + scale * step
        resid = moments(theta) - wanted
    if np.max(np.abs(resid)) <= tol:
        return template.with_terms(dict(zip(free_terms, theta)))
    if singular_at_solution:
        raise CalibrationError(
            f"singular Jacobian during calibration; "
            f"final max residual {np.max(np.abs(resid)):.3e}"
        )
    raise CalibrationError(
        f"calibration did not converge in {max_iter} iterations; "
        f"final max residual {np.max(np.abs(resid)):.3e}"
    )


def sample(table: JointTable, n: int, seed: int) -> tuple:
    """Draw ``n`` i.i.d. complete rows by inverse CDF over the cells.

    Returns ``(m, y)`` uint8 arrays of shape (n, K); the same
    ``(table, n, seed)`` always reproduces the same output bit for bit.
    """
    if n < 1:
        raise ValidationError(f"sample size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(table.probs)
    cdf[-1] = 1.0
    u = rng.random(n)
    cells = np.searchsorted(cdf, u, side="right")
    k = table.k
    m_bits = cells & ((1 << k) - 1)
    y_bits = cells >> k
    shifts = np.arange(k)
    m = ((m_bits[:, None] >> shifts) & 1).astype(np.uint8)
    y = ((y_bits[:, None] >> shifts) & 1).astype(np.uint8)
    return m, y


def dump_table_csv(table: JointTable, path) -> None:
    """Write the table as CSV with columns cell_index, m_bits, y_bits, prob."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_index", "m_bits", "y_bits", "prob"])
        for cell in range(table.n_cells):
            writer.writerow(
                [cell, table.m_bits(cell), table.y_bits(cell), repr(table.probs[cell])]
            )


def load_table_csv(path) -> JointTable:
    """Inverse of :func:`dump_table_csv`."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty table file")
    n_cells = len(rows)
    k2 = n_cells.bit_length() - 1
    if (1 << k2) != n_cells or k2 % 2 != 0:
        raise ValidationError(f"{path}: {n_cells} rows is not 2^(2K) for integer K")
    probs = np.zeros(n_cells)
    for row in rows:
        cell = int(row["cell_index"])
        expected = cell_index(int(row["m_bits"]), int(row["y_bits"]), k2 // 2)
        if expected != cell:
            raise ValidationError(f"{path}: cell {cell} disagrees with its bit fields")
        probs[cell] = float(row["prob"])
    return JointTable(k2 // 2, probs)
