"""The three benchmark data-generating mechanisms (K = 6).

Two are no-self-censoring loglinear models with calibrated marginals; the
third is a block-structured missing-at-random mechanism built directly as a
joint table.  All three share the same marginal targets: outcomes 1-3 have
P(Y=1) = 0.4, outcomes 4-6 have P(Y=1) = 0.6, and every missingness
indicator hits a common marginal rate.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import FeasibilityError, ValidationError
from .loglinear import (
    JointTable,
    LoglinearSpec,
    TermKey,
    build_table,
    calibrate,
    marginal,
)

K = 6
TRUTH = (0.4, 0.4, 0.4, 0.6, 0.6, 0.6)
PAIRWISE_YY = 0.5
OUTCOME_ON_MISSINGNESS = 2.0  # sign flips for indicators 4-6
DEFAULT_RATIO_W = 0.5  # early-outcome missingness halves when the partner is 1
DEFAULT_RATIO_V = 2.0  # late-outcome missingness doubles when the partner is 1
BLOCK_RESIDUAL_MARGIN = 0.05  # smallest both-observed probability kept when
                              # the default ratios are infeasible at high rates


@dataclass(frozen=True)
class ScenarioOutput:
    """A constructed mechanism: optional loglinear spec, exact joint table,
    true outcome marginals, and a human-readable label."""

    spec: LoglinearSpec | None
    table: JointTable
    truth: np.ndarray
    label: str

    def __post_init__(self):
        truth = np.asarray(self.truth, dtype=np.float64)
        truth.setflags(write=False)
        object.__setattr__(self, "truth", truth)
        for k in range(1, self.table.k + 1):
            got = marginal(self.table, f"Y{k}")
            if abs(got - truth[k - 1]) > 1e-8:
                raise ValidationError(
                    f"{self.label}: Y{k} marginal {got:.10f} != truth {truth[k - 1]}"
                )


def _main_effect_terms() -> list:
    return [TermKey.of(ys=(k,)) for k in range(1, K + 1)] + [
        TermKey.of(ms=(k,)) for k in range(1, K + 1)
    ]


def _marginal_targets(missing_rate: float) -> list:
    targets = [(f"Y{k}", TRUTH[k - 1]) for k in range(1, K + 1)]
    targets += [(f"M{k}", missing_rate) for k in range(1, K + 1)]
    return targets


def _base_nsc_template() -> dict:
    terms = {}
    for a, b in combinations(range(1, K + 1), 2):
        terms[TermKey.of(ys=(a, b))] = PAIRWISE_YY
    for m_idx in range(1, K + 1):
        sign = 1.0 if m_idx <= 3 else -1.0
        for y_idx in range(1, K + 1):
            if y_idx != m_idx:
                terms[TermKey.of(ys=(y_idx,), ms=(m_idx,))] = sign * OUTCOME_ON_MISSINGNESS
    return terms


def _mean_field_start(terms: dict, missing_rate: float) -> dict:
    """Rough main-effect starting values for the calibration.

    Treats all variables as independent at their target means, so each main
    effect starts at the target logit minus the mean field contributed by
    the fixed interaction terms.  Keeps the Newton iteration away from the
    saturated region where the moment map goes flat.
    """
    mean = {("y", k): TRUTH[k - 1] for k in range(1, K + 1)}
    mean.update({("m", k): missing_rate for k in range(1, K + 1)})
    start = {}
    for kind, k in mean:
        field = 0.0
        for key, coef in terms.items():
            involved = (kind == "y" and key.y_set & (1 << (k - 1))) or (
                kind == "m" and key.m_set & (1 << (k - 1))
            )
            if not involved:
                continue
            contrib = coef
            for i in key.y_indices:
                if not (kind == "y" and i == k):
                    contrib *= mean[("y", i)]
            for j in key.m_indices:
                if not (kind == "m" and j == k):
                    contrib *= mean[("m", j)]
            field += contrib
        target = mean[(kind, k)]
        key = TermKey.of(ys=(k,)) if kind == "y" else TermKey.of(ms=(k,))
        start[key] = float(np.log(target / (1.0 - target)) - field)
    return start


def main_effect_nsc(missing_rate: float) -> ScenarioOutput:
    """No-self-censoring mechanism whose conditionals contain main effects only.

    Fixed structure: λ = 0.5 on every outcome pair; λ = ±2 linking each
    outcome to every *other* outcome's indicator (+2 for indicators 1-3,
    −2 for 4-6).  The 12 main effects are then solved so the outcome and
    missingness marginals hit their targets.
    """
    if not 0.0 < missing_rate < 1.0:
        raise ValidationError(f"missing rate must be in (0, 1), got {missing_rate}")
    terms = _base_nsc_template()
    terms.update(_mean_field_start(terms, missing_rate))
    template = LoglinearSpec(K, terms)
    spec = calibrate(template, _main_effect_terms(), _marginal_targets(missing_rate))
    table = build_table(spec)
    return ScenarioOutput(
        spec, table, np.array(TRUTH), f"nsc-main(rate={missing_rate:g})"
    )


def ym_interaction_nsc(lambda3: float, missing_rate: float = 0.3) -> ScenarioOutput:
    """Main-effect mechanism plus three-way outcome-pair × indicator terms.

    Every term Y_a·Y_b·M_c with {a, b} and c disjoint receives ``lambda3``;
    the main effects are recalibrated to the same marginal targets.  The
    conditional of each outcome then contains products Y·M that a
    main-effects-only imputation model cannot represent.
    """
    if not np.isfinite(lambda3):
        raise ValidationError(f"lambda3 must be finite, got {lambda3}")
    terms = _base_nsc_template()
    if lambda3 != 0.0:
        for a, b in combinations(range(1, K + 1), 2):
            for c in range(1, K + 1):
                if c != a and c != b:
                    terms[TermKey.of(ys=(a, b), ms=(c,))] = lambda3
    terms.update(_mean_field_start(terms, missing_rate))
    template = LoglinearSpec(K, terms)
    spec = calibrate(template, _main_effect_terms(), _marginal_targets(missing_rate))
    table = build_table(spec)
    return ScenarioOutput(
        spec,
        table,
        np.array(TRUTH),
        f"nsc-ym(lambda3={lambda3:g}, rate={missing_rate:g})",
    )


def _outcome_law(lambda_yy: float) -> np.ndarray:
    """Marginal law of (Y_1..Y_6): pairwise interactions ``lambda_yy``, main
    effects calibrated to the shared truth vector.  Returned over 2^K cells
    indexed by y_bits."""
    terms = {
        TermKey.of(ys=(a, b)): lambda_yy for a, b in combinations(range(1, K + 1), 2)
    }
    template = LoglinearSpec(K, terms)
    spec = calibrate(
        template,
        [TermKey.of(ys=(k,)) for k in range(1, K + 1)],
        [(f"Y{k}", TRUTH[k - 1]) for k in range(1, K + 1)],
    )
    # With no M terms the joint is uniform over m, so the Y-law is the
    # m-marginalized table.
    return build_table(spec).as_matrix().sum(axis=1)


def _bisect_increasing(fn, lo: float, hi: float, target: float, tol: float = 1e-12) -> float:
    flo, fhi = fn(lo) - target, fn(hi) - target
    if flo > 0 or fhi < 0:
        raise FeasibilityError(
            f"no root in [{lo}, {hi}]: f(lo)-t={flo:.3e}, f(hi)-t={fhi:.3e}"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if fn(mid) - target <= 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class BlockParams:
    """Pattern probabilities for one (k, k+3) indicator block given (Y_k, Y_{k+3}):

    P(M_k=1, M_{k+3}=0 | Y) = w1·Y_{k+3} + w2·(1−Y_{k+3})
    P(M_k=0, M_{k+3}=1 | Y) = v1·Y_k    + v2·(1−Y_k)
    P(M_k=1, M_{k+3}=1 | Y) = 0
    P(M_k=0, M_{k+3}=0 | Y) = the residual.

    Because each single-missing probability depends only on the coordinate
    that stays observed under that pattern, and the residual pattern
    observes everything, the block is missing-at-random by construction.
    """

    w1: float
    w2: float
    v1: float
    v2: float

    def validate(self) -> None:
        for ya in (0, 1):
            for yb in (0, 1):
                pm = self.w1 * yb + self.w2 * (1 - yb)
                pv = self.v1 * ya + self.v2 * (1 - ya)
                resid = 1.0 - pm - pv
                if min(pm, pv, resid) < -1e-12 or max(pm, pv) > 1 + 1e-12:
                    raise FeasibilityError(
                        f"block probabilities leave [0,1] at (Y_k={ya}, Y_k+3={yb}): "
                        f"single-missing {pm:.4f}/{pv:.4f}, both-observed {resid:.4f}"
                    )

    def pattern_prob(self, mk: int, mk3: int, ya: int, yb: int) -> float:
        pm = self.w1 * yb + self.w2 * (1 - yb)
        pv = self.v1 * ya + self.v2 * (1 - ya)
        if (mk, mk3) == (1, 0):
            return pm
        if (mk, mk3) == (0, 1):
            return pv
        if (mk, mk3) == (1, 1):
            return 0.0
        return 1.0 - pm - pv


def solve_block(
    missing_rate: float,
    p_first: float,
    p_second: float,
    ratio_w: float,
    ratio_v: float,
) -> BlockParams:
    """Find block parameters with w1/w2 = ratio_w, v1/v2 = ratio_v matching the
    marginal missingness rate on both indicators.

    ``p_first``/``p_second`` are the outcome marginals of the block pair.
    The rate of the first indicator is w2·(1 + (ratio_w−1)·p_second),
    monotone in w2, solved by bisection (and likewise for v2).
    """
    if ratio_w <= 0 or ratio_v <= 0:
        raise ValidationError(f"ratios must be positive, got {ratio_w}, {ratio_v}")

    def rate_first(w2: float) -> float:
        return ratio_w * w2 * p_second + w2 * (1.0 - p_second)

    def rate_second(v2: float) -> float:
        return ratio_v * v2 * p_first + v2 * (1.0 - p_first)

    w2 = _bisect_increasing(rate_first, 0.0, 1.0, missing_rate)
    v2 = _bisect_increasing(rate_second, 0.0, 1.0, missing_rate)
    params = BlockParams(ratio_w * w2, w2, ratio_v * v2, v2)
    params.validate()
    return params


def feasible_ratio_power(
    missing_rate: float,
    p_first: float,
    p_second: float,
    ratio_w: float,
    ratio_v: float,
    margin: float = BLOCK_RESIDUAL_MARGIN,
) -> float:
    """Largest s in (0, 1] such that the ratios (ratio_w**s, ratio_v**s) keep
    the worst-corner both-observed probability at least ``margin``.

    Shrinking both log-ratios by the same factor preserves the direction of
    the outcome dependence while restoring feasibility at high rates.
    """

    def worst_corner(s: float) -> float:
        rw, rv = ratio_w**s, ratio_v**s
        w2 = missing_rate / (1.0 + (rw - 1.0) * p_second)
        v2 = missing_rate / (1.0 + (rv - 1.0) * p_first)
        return w2 * max(rw, 1.0) + v2 * max(rv, 1.0)

    if worst_corner(0.0) > 1.0 - margin:
        raise FeasibilityError(
            f"missing rate {missing_rate} infeasible even without outcome dependence"
        )
    if worst_corner(1.0) <= 1.0 - margin:
        return 1.0
    return _bisect_increasing(worst_corner, 0.0, 1.0, 1.0 - margin)


def mar_blocks(
    lambda_yy: float,
    missing_rate: float,
    ratio_w: float | None = None,
    ratio_v: float | None = None,
) -> ScenarioOutput:
    """Missing-at-random mechanism from three independent indicator blocks.

    The outcome law is the calibrated pairwise loglinear model; conditional
    on Y, the indicator pairs (M_k, M_{k+3}), k = 1..3, are independent
    blocks following :class:`BlockParams`.  The ratios control how strongly
    each single-missing probability depends on the observed partner outcome
    (1 = completely random).  ``None`` selects the defaults (0.5 for the
    early indicator, 2 for the late one), shrunk toward 1 just enough to
    stay feasible at high missingness rates.
    """
    if not 0.0 < missing_rate < 0.5:
        raise ValidationError(f"missing rate must be in (0, 0.5), got {missing_rate}")
    p_y = _outcome_law(lambda_yy)
    if ratio_w is None and ratio_v is None:
        s = feasible_ratio_power(
            missing_rate, TRUTH[0], TRUTH[3], DEFAULT_RATIO_W, DEFAULT_RATIO_V
        )
        ratio_w, ratio_v = DEFAULT_RATIO_W**s, DEFAULT_RATIO_V**s
    elif ratio_w is None or ratio_v is None:
        raise ValidationError("give both ratios or neither")
    blocks = [
        solve_block(missing_rate, TRUTH[k - 1], TRUTH[k + 2], ratio_w, ratio_v)
        for k in (1, 2, 3)
    ]
    table = assemble_mar_table(p_y, blocks)
    return ScenarioOutput(
        None,
        table,
        np.array(TRUTH),
        f"mar-blocks(lambda_yy={lambda_yy:g}, rate={missing_rate:g}, "
        f"ratio_w={ratio_w:.6g}, ratio_v={ratio_v:.6g})",
    )


def assemble_mar_table(p_y: np.ndarray, blocks: list) -> JointTable:
    """Joint (M, Y) table from an outcome law over 2^K y-cells and per-pair
    block parameters for (M_k, M_{k+3}), k = 1..len(blocks)."""
    p_y = np.asarray(p_y, dtype=np.float64)
    n_y = p_y.shape[0]
    k = n_y.bit_length() - 1
    if (1 << k) != n_y or k != 2 * len(blocks):
        raise ValidationError(
            f"outcome law has {n_y} cells but {len(blocks)} blocks given"
        )
    n_m = 1 << k
    probs = np.zeros(n_y * n_m)
    for y in range(n_y):
        if p_y[y] == 0.0:
            continue
        for m in range(n_m):
            cond = 1.0
            for b, block in enumerate(blocks):
                first, second = b, b + len(blocks)  # 0-based bit positions
                cond *= block.pattern_prob(
                    (m >> first) & 1,
                    (m >> second) & 1,
                    (y >> first) & 1,
                    (y >> second) & 1,
                )
                if cond == 0.0:
                    break
            if cond > 0.0:
                probs[m | (y << k)] = p_y[y] * cond
    return JointTable(k, probs)


def by_name(name: str, **params) -> ScenarioOutput:
    """Scenario factory keyed by the CLI-facing names."""
    if name == "nsc-main":
        return main_effect_nsc(params.get("missing_rate", 0.3))
    if name == "nsc-ym":
        return ym_interaction_nsc(
            params.get("lambda3", -1.0), params.get("missing_rate", 0.3)
        )
    if name == "mar-blocks":
        return mar_blocks(
            params.get("lambda_yy", 0.5),
            params.get("missing_rate", 0.3),
            params.get("ratio_w"),
            params.get("ratio_v"),
        )
    raise ValidationError(
        f"unknown scenario {name!r}; expected nsc-main, nsc-ym, or mar-blocks"
    )
