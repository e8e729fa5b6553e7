"""Estimators on completed or incomplete datasets, derived endpoints, and
combination of per-imputation estimates into a single inference.

Pooling follows the classical rules: the point estimate is the mean of the
per-imputation estimates, the total variance adds the within-imputation
mean variance and the between-imputation sample variance inflated by
(1 + 1/T), and the reference distribution is Student t with

    ν = (T − 1) · (1 + W̄ / ((1 + 1/T)·B))²

(normal when the between-variance vanishes).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ValidationError
from .fcs import CATEGORICAL, CompletedDataset, Dataset, _covariate_blocks
from .glm import DesignMatrix, GlmFit, fit_logistic

ANALYSIS_RIDGE = 0.0  # endpoint models are unpenalized; separation escalates


@dataclass(frozen=True)
class EstimateWithVariance:
    value: float
    variance: float
    label: str = ""

    def __post_init__(self):
        if not math.isfinite(self.variance) or self.variance < 0:
            raise ValidationError(f"variance must be finite and >= 0, got {self.variance}")


@dataclass(frozen=True)
class PooledResult:
    """Rubin's-rules combination across T imputations."""

    estimate: float
    within_variance: float
    between_variance: float
    total_variance: float
    df: float
    p_value: float
    t_imputations: int
    label: str = ""

    @property
    def se(self) -> float:
        return math.sqrt(self.total_variance)


def marginal_estimates(completed: CompletedDataset) -> list:
    """Per-outcome sample proportion with binomial variance p(1-p)/n."""
    n = completed.n
    out = []
    for k in range(completed.k):
        p = float(completed.y[:, k].mean())
        out.append(EstimateWithVariance(p, p * (1.0 - p) / n, f"y{k + 1}"))
    return out


def available_case(dataset: Dataset) -> list:
    """Per-outcome proportion among rows where that outcome was observed."""
    out = []
    for k in range(dataset.k):
        obs = ~dataset.mask[:, k]
        n_obs = int(obs.sum())
        if n_obs == 0:
            raise ValidationError(f"outcome y{k + 1} has no observed values")
        p = float(dataset.y[obs, k].mean())
        out.append(EstimateWithVariance(p, p * (1.0 - p) / n_obs, f"y{k + 1}"))
    return out


def consecutive_abstinence(row, run_length: int = 3) -> int:
    """1 iff the row contains a run of ``run_length`` consecutive ones."""
    row = np.asarray(row)
    if row.ndim != 1:
        raise ValidationError("row must be one-dimensional")
    if run_length < 1 or run_length > row.shape[0]:
        raise ValidationError(
            f"run length {run_length} outside 1..{row.shape[0]}"
        )
    vals = row.astype(np.float64)
    if np.any(~np.isfinite(vals)) or np.any((vals != 0) & (vals != 1)):
        raise ValidationError("row must be complete 0/1 values")
    run = 0
    for v in vals:
        run = run + 1 if v == 1 else 0
        if run >= run_length:
            return 1
    return 0


def endpoint_column(completed: CompletedDataset, endpoint: str) -> np.ndarray:
    """Materialize an endpoint: ``"yk"`` picks a raw outcome column,
    ``"consecN"`` the consecutive-ones indicator with run length N."""
    endpoint = endpoint.strip().lower()
    if endpoint.startswith("consec"):
        run_length = int(endpoint[len("consec"):] or 3)
        return np.array(
            [consecutive_abstinence(completed.y[i], run_length) for i in range(completed.n)],
            dtype=np.uint8,
        )
    if endpoint.startswith("y"):
        k = int(endpoint[1:])
        if not 1 <= k <= completed.k:
            raise ValidationError(f"endpoint column y{k} outside 1..{completed.k}")
        return completed.y[:, k - 1]
    raise ValidationError(f"cannot parse endpoint {endpoint!r} (want 'yk' or 'consecN')")


def analysis_model(
    completed: CompletedDataset,
    endpoint,
    covariate_columns,
) -> GlmFit:
    """Logistic regression of a binary endpoint on indicator-coded covariates.

    ``endpoint`` is either an endpoint name (see :func:`endpoint_column`) or
    a ready 0/1 vector.  Raises on a rank-deficient design, naming the
    offending columns.
    """
    if isinstance(endpoint, str):
        response = endpoint_column(completed, endpoint)
    else:
        response = np.asarray(endpoint)
    for name in covariate_columns:
        if name not in completed.covariates:
            raise ValidationError(f"covariate {name!r} not in dataset")
    blocks = _covariate_blocks(completed.covariates, completed.kinds, list(covariate_columns))
    cols = [np.ones(completed.n)] + [col for _, col in blocks]
    labels = ["intercept"] + [label for label, _ in blocks]
    design = DesignMatrix(np.column_stack(cols), tuple(labels))
    rank = np.linalg.matrix_rank(design.rows)
    if rank < design.p:
        # Pivoted QR exposes which trailing columns fail to add rank.
        from scipy.linalg import qr

        _, _, piv = qr(design.rows, mode="economic", pivoting=True)
        offending = [labels[j] for j in piv[rank:]]
        raise ValidationError(f"rank-deficient analysis design; offending columns: {offending}")
    return fit_logistic(design, response, ridge=ANALYSIS_RIDGE)


def group_contrast(fit: GlmFit, covariate: str, level_a: str, level_b: str) -> EstimateWithVariance:
    """Log-odds difference between two levels of an indicator-coded covariate.

    The reference level has coefficient 0 by construction; a contrast between
    two non-reference levels uses the coefficient covariance.
    """
    labels = list(fit.labels)

    def index_of(level):
        name = f"{covariate}={level}"
        if name in labels:
            return labels.index(name)
        return None  # reference level

    ia, ib = index_of(level_a), index_of(level_b)
    if ia is None and ib is None:
        raise ValidationError(
            f"neither {level_a!r} nor {level_b!r} is a non-reference level of {covariate!r}"
        )
    est = 0.0
    var = 0.0
    if ia is not None:
        est += fit.coefficients[ia]
        var += fit.covariance[ia, ia]
    if ib is not None:
        est -= fit.coefficients[ib]
        var += fit.covariance[ib, ib]
    if ia is not None and ib is not None:
        var -= 2.0 * fit.covariance[ia, ib]
    return EstimateWithVariance(float(est), max(float(var), 0.0), f"{covariate}:{level_a}-{level_b}")


def rubin_pool(per_imputation, label: str = "") -> PooledResult:
    """Combine per-imputation (estimate, variance) pairs.

    Accepts ``EstimateWithVariance`` items or plain pairs.  T = 1 yields the
    within-variance only, infinite df, and a warning.  The p-value is
    two-sided for the null that the pooled quantity is zero.
    """
    pairs = []
    for item in per_imputation:
        if isinstance(item, EstimateWithVariance):
            pairs.append((item.value, item.variance))
        else:
            est, var = item
            pairs.append((float(est), float(var)))
    t_count = len(pairs)
    if t_count == 0:
        raise ValidationError("rubin_pool needs at least one estimate")
    estimates = np.array([p[0] for p in pairs])
    variances = np.array([p[1] for p in pairs])
    q_bar = float(estimates.mean())
    w_bar = float(variances.mean())
    if t_count == 1:
        warnings.warn("pooling a single imputation: between-variance unavailable")
        b_var = 0.0
    else:
        b_var = float(estimates.var(ddof=1))
    total = w_bar + (1.0 + 1.0 / t_count) * b_var
    if b_var > 0.0 and t_count > 1:
        df = (t_count - 1) * (1.0 + w_bar / ((1.0 + 1.0 / t_count) * b_var)) ** 2
    else:
        df = math.inf
    if total > 0.0:
        z = q_bar / math.sqrt(total)
        if math.isinf(df):
            p_value = 2.0 * stats.norm.sf(abs(z))
        else:
            p_value = 2.0 * stats.t.sf(abs(z), df)
    else:
        p_value = 0.0 if q_bar != 0.0 else 1.0
    return PooledResult(q_bar, w_bar, b_var, total, df, float(p_value), t_count, label)


def percent_bias(estimate: float, truth: float) -> float:
    """100 · (estimate − truth) / truth."""
    if truth == 0.0:
        raise ValidationError("percent bias undefined for zero truth")
    return 100.0 * (estimate - truth) / truth
