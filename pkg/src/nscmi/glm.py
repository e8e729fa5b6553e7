"""Weighted binary logistic regression by iteratively reweighted least squares.

This is the single model-fitting primitive of the package: the imputation
engine, the population oracle, and the endpoint analysis all call
:func:`fit_logistic`.  Stabilization against separation (a covariate
pattern perfectly predicting the response, common in small strata packed
with indicator columns) is a weak ridge penalty on the non-intercept
coefficients, escalated and refit when estimates blow up.

Objective, maximized over β:

    Σ_i w_i [ y_i log p_i + (1 − y_i) log(1 − p_i) ]  −  ridge · Σ_{j≥2} β_j²

with p_i = logistic(x_i · β).  Scaling all weights by c > 0 together with
the ridge leaves the optimum unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

CONVERGENCE_TOL = 1e-8
MAX_ITERATIONS = 100
STEP_CAP = 4.0  # largest per-iteration coefficient move
DIAGONAL_JITTER = 1e-10  # added to the normal equations for collinear columns
ESCALATION_BOUND = 15.0  # |slope| beyond this triggers a stronger ridge refit
ESCALATION_FACTOR = 100.0
ESCALATION_BASE = 1e-4  # starting ridge when escalating from an unpenalized fit
MAX_ESCALATIONS = 3

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DesignMatrix:
    """n × p design with an all-ones first column and per-column labels."""

    rows: np.ndarray
    labels: tuple

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValidationError(f"design must be a non-empty 2-D matrix, got {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValidationError("design contains non-finite entries")
        if not np.all(rows[:, 0] == 1.0):
            raise ValidationError("first design column must be an all-ones intercept")
        if len(self.labels) != rows.shape[1]:
            raise ValidationError(
                f"{len(self.labels)} labels for {rows.shape[1]} columns"
            )
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def p(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class GlmFit:
    """Fitted coefficients plus the inverse penalized Fisher information."""

    coefficients: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    labels: tuple = ()
    ridge_used: float = 0.0


_ETA_CLIP = 35.0  # |logit| beyond this is numerically saturated anyway


def _logistic(eta: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(eta, -_ETA_CLIP, _ETA_CLIP)))


def _weighted_loglik(p: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    p = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return float(np.sum(w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def _constant_response_beta(p_dim: int, mean_y: float) -> np.ndarray:
    """Exact degenerate-margin limit: slopes 0, intercept at the clamped
    logit of the constant response."""
    p = min(max(mean_y, PROB_FLOOR), 1.0 - PROB_FLOOR)
    beta = np.zeros(p_dim)
    beta[0] = np.log(p / (1.0 - p))
    return beta


def fit_core(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray | None,
    ridge: float,
    beta0: np.ndarray | None = None,
):
    """Tight IRLS loop with separation escalation; no input validation.

    Returns (beta, converged, iterations, ridge_used).  ``beta0`` warm-starts
    the iteration (the converged optimum does not depend on it beyond the
    1e-8 tolerance); escalation multiplies the ridge ×100 and refits while
    any non-intercept coefficient exceeds the bound.
    """
    n, p_dim = X.shape
    if w is None:
        w = np.ones(n)
    wsum = w.sum()
    mean_y = float((w @ y) / wsum)
    if mean_y <= 0.0 or mean_y >= 1.0:
        return _constant_response_beta(p_dim, mean_y), True, 0, float(ridge)
    diag = np.arange(p_dim)
    ridge_eff = float(ridge)
    for _ in range(MAX_ESCALATIONS + 1):
        penalty = np.full(p_dim, 2.0 * ridge_eff)
        penalty[0] = 0.0
        beta = np.zeros(p_dim) if beta0 is None else beta0.astype(np.float64).copy()
        converged = False
        iterations = 0
        for iterations in range(1, MAX_ITERATIONS + 1):
            prob = _logistic(X @ beta)
            grad = X.T @ (w * (y - prob)) - penalty * beta
            wirls = w * (prob * (1.0 - prob))
            info = (X * wirls[:, None]).T @ X
            info[diag, diag] += penalty + DIAGONAL_JITTER
            step = np.linalg.solve(info, grad)
            # Cap the move: in the saturated regime the working weights
            # collapse and raw Newton overshoots into oscillation.  Near the
            # optimum steps are tiny, so the cap never binds there.
            worst = np.max(np.abs(step))
            if worst > STEP_CAP:
                step *= STEP_CAP / worst
            beta += step
            if np.max(np.abs(step)) < CONVERGENCE_TOL:
                converged = True
                break
        if p_dim == 1 or np.max(np.abs(beta[1:])) <= ESCALATION_BOUND:
            break
        ridge_eff = (ridge_eff if ridge_eff > 0 else ESCALATION_BASE) * ESCALATION_FACTOR
    return beta, converged, iterations, ridge_eff


def fit_logistic(
    design: DesignMatrix,
    response: np.ndarray,
    weights: np.ndarray | None = None,
    ridge: float = 0.0,
    warm_start: np.ndarray | None = None,
) -> GlmFit:
    """Fit the penalized weighted logistic model on the given design.

    Non-convergence is reported through the ``converged`` flag rather than
    raised: callers in the imputation loop proceed with the last iterate.
    When any non-intercept coefficient exceeds ``ESCALATION_BOUND`` in
    magnitude (separation), the ridge is escalated ×100 (from 1e-4 when the
    requested ridge was 0) and the model refit.
    """
    X = design.rows
    y = np.asarray(response, dtype=np.float64).ravel()
    if weights is None:
        w = np.ones(X.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64).ravel()
    if y.shape[0] != X.shape[0] or w.shape[0] != X.shape[0]:
        raise ValidationError(
            f"design has {X.shape[0]} rows, response {y.shape[0]}, weights {w.shape[0]}"
        )
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(w)):
        raise ValidationError("response/weights contain non-finite values")
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValidationError("response must be 0/1")
    if np.any(w < 0):
        raise ValidationError("weights must be non-negative")
    if w.sum() <= 0:
        raise ValidationError("total weight must be positive")
    if ridge < 0 or not np.isfinite(ridge):
        raise ValidationError(f"ridge must be finite and >= 0, got {ridge}")

    beta, converged, iters, ridge_eff = fit_core(X, y, w, ridge, warm_start)
    prob = _logistic(X @ beta)
    penalty = np.full(X.shape[1], 2.0 * ridge_eff)
    penalty[0] = 0.0
    info = (X * (w * prob * (1.0 - prob))[:, None]).T @ X
    info[np.arange(X.shape[1]), np.arange(X.shape[1])] += penalty + DIAGONAL_JITTER
    covariance = np.linalg.inv(info)
    covariance = 0.5 * (covariance + covariance.T)
    loglik = _weighted_loglik(prob, y, w)
    return GlmFit(beta, covariance, converged, iters, loglik, design.labels, ridge_eff)


def predict(fit: GlmFit, row: np.ndarray, offset: float = 0.0) -> float:
    """logistic(β · row + offset), clamped away from exact 0/1."""
    row = np.asarray(row, dtype=np.float64).ravel()
    if row.shape[0] != fit.coefficients.shape[0]:
        raise ValidationError(
            f"row has {row.shape[0]} entries for {fit.coefficients.shape[0]} coefficients"
        )
    eta = float(row @ fit.coefficients) + float(offset)
    p = 1.0 / (1.0 + np.exp(-eta)) if eta >= 0 else np.exp(eta) / (1.0 + np.exp(eta))
    return float(np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR))


def predict_many(fit: GlmFit, rows: np.ndarray, offsets) -> np.ndarray:
    """Vectorized :func:`predict` over a matrix of rows."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != fit.coefficients.shape[0]:
        raise ValidationError(
            f"rows shape {rows.shape} incompatible with {fit.coefficients.shape[0]} coefficients"
        )
    eta = rows @ fit.coefficients + np.asarray(offsets, dtype=np.float64)
    return np.clip(_logistic(eta), PROB_FLOOR, 1.0 - PROB_FLOOR)
