"""Command-line front end.

Subcommands
    gen          sample a scenario into a dataset CSV (+ truth/spec/table sidecars)
    impute       run multiple imputation on a dataset CSV
    analyze      pool endpoint analyses across completed CSVs
    simulate     Monte-Carlo bias study over replicates
    asymptotic   exact population-level bias tables
    sensitivity  self-censoring offset grid (imputed + pooled per point)
    reproduce    the benchmark bias tables (1 | 2 | 3), finite + asymptotic
    config       print all defaults as JSON

Every command accepts ``--config FILE`` (JSON) plus flag overrides, and
writes a resolved copy of its effective configuration next to its outputs,
so a run is reproducible from its artifacts alone.  Exit codes: 0 success,
1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import analysis, fcs, loglinear, population, scenarios
from .errors import NscmiError, NumericalError, ValidationError
from .fcs import Dataset, FcsConfig, SensitivitySpec
from .rng import DATA, METHOD_MAR, METHOD_NSC, REPLICATE, derive_int_seed

ALL_METHODS = ("nsc", "mar", "available")
SCENARIO_NAMES = ("nsc-main", "nsc-ym", "mar-blocks")

DEFAULTS = {
    "scenario": "nsc-main",
    "missing_rate": 0.3,
    "lambda3": -1.0,
    "lambda_yy": 0.5,
    "n": 200,
    "replicates": 1000,
    "methods": list(ALL_METHODS),
    "seed": 0,
    "out": ".",
    "prefix": "",
    "workers": None,
    "mechanism": "nsc",
    "t_imputations": 20,
    "r_iterations": 10,
    "ridge": 1e-4,
    "covariate_design": "none",
    "interaction_group": None,
    "stratify_by": None,
    "ym_products": False,
    "endpoint": "consec3",
    "covariates": [],
    "contrast_covariate": None,
    "contrast_a": None,
    "contrast_b": None,
    "grid_start": 0.0,
    "grid_stop": 2.0,
    "grid_step": 0.1,
    "threshold": None,
    "table": 1,
}

GRID_BOUND = 4.0


# ---------------------------------------------------------------------------
# Small infrastructure
# ---------------------------------------------------------------------------


def _atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_csv(path: str, header, rows) -> None:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    _atomic_write_text(path, buf.getvalue())


def _write_resolved_config(out_dir: str, prefix: str, command: str, resolved: dict) -> str:
    path = os.path.join(out_dir, f"{prefix}config.json")
    payload = {"command": command, **resolved}
    _atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, float):
        if math.isnan(x):
            return "NA"
        return f"{x:.10g}"
    return str(x)


def _scenario_params(resolved: dict) -> dict:
    name = resolved["scenario"]
    if name == "nsc-main":
        return {"missing_rate": resolved["missing_rate"]}
    if name == "nsc-ym":
        return {"lambda3": resolved["lambda3"], "missing_rate": resolved["missing_rate"]}
    if name == "mar-blocks":
        return {"lambda_yy": resolved["lambda_yy"], "missing_rate": resolved["missing_rate"]}
    raise ValidationError(f"unknown scenario {name!r}; expected one of {SCENARIO_NAMES}")


def _fcs_config(resolved: dict, mechanism: str | None = None, seed: int | None = None,
                sensitivity: SensitivitySpec | None = None) -> FcsConfig:
    return FcsConfig(
        mechanism=mechanism or resolved["mechanism"],
        t_imputations=int(resolved["t_imputations"]),
        r_iterations=int(resolved["r_iterations"]),
        sensitivity=sensitivity or SensitivitySpec(),
        covariate_design=resolved["covariate_design"],
        interaction_group=resolved["interaction_group"],
        stratify_by=resolved["stratify_by"],
        ym_products=bool(resolved["ym_products"]),
        ridge=float(resolved["ridge"]),
        seed=int(seed if seed is not None else resolved["seed"]),
    )


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def cmd_gen(resolved: dict) -> dict:
    n = int(resolved["n"])
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    scenario = scenarios.by_name(resolved["scenario"], **_scenario_params(resolved))
    m, y = loglinear.sample(scenario.table, n, int(resolved["seed"]))
    dataset = Dataset(y, m.astype(bool))
    out_dir, prefix = resolved["out"], resolved["prefix"]
    os.makedirs(out_dir, exist_ok=True)
    data_path = os.path.join(out_dir, f"{prefix}dataset.csv")
    fcs.write_dataset_csv(dataset, data_path)
    truth_path = os.path.join(out_dir, f"{prefix}truth.json")
    _atomic_write_text(
        truth_path,
        json.dumps(
            {"label": scenario.label, "truth": [float(t) for t in scenario.truth]},
            indent=2,
        )
        + "\n",
    )
    table_path = os.path.join(out_dir, f"{prefix}table.csv")
    loglinear.dump_table_csv(scenario.table, table_path)
    outputs = {"dataset": data_path, "truth": truth_path, "table": table_path}
    if scenario.spec is not None:
        spec_path = os.path.join(out_dir, f"{prefix}spec.json")
        _atomic_write_text(spec_path, scenario.spec.to_json() + "\n")
        outputs["spec"] = spec_path
    _write_resolved_config(out_dir, prefix, "gen", resolved)
    return outputs


# ---------------------------------------------------------------------------
# impute
# ---------------------------------------------------------------------------


def cmd_impute(resolved: dict, dataset_path: str,
               sensitivity: SensitivitySpec | None = None) -> dict:
    dataset = fcs.read_dataset_csv(dataset_path)
    config = _fcs_config(resolved, sensitivity=sensitivity)
    completed = fcs.impute(dataset, config)
    out_dir, prefix = resolved["out"], resolved["prefix"]
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for comp in completed:
        path = os.path.join(out_dir, f"{prefix}imp_{comp.provenance.imputation_index:03d}.csv")
        fcs.write_completed_csv(comp, path)
        paths.append(path)
    meta = {
        "dataset": os.path.abspath(dataset_path),
        "config_hash": fcs.config_hash(config),
        "seed": config.seed,
        "t_imputations": config.t_imputations,
        "files": [os.path.basename(p) for p in paths],
    }
    meta_path = os.path.join(out_dir, f"{prefix}imputation_meta.json")
    _atomic_write_text(meta_path, json.dumps(meta, indent=2) + "\n")
    _write_resolved_config(out_dir, prefix, "impute", {**resolved, "dataset": dataset_path})
    return {"completed": paths, "meta": meta_path}


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def _pool_analyses(completed_list, endpoint: str, covariates, contrast):
    """Fit the endpoint model per imputation and pool, either every
    coefficient or a single group contrast."""
    fits = [analysis.analysis_model(c, endpoint, covariates) for c in completed_list]
    pooled_rows = []
    if contrast is not None:
        cov, level_a, level_b = contrast
        per_imp = [analysis.group_contrast(f, cov, level_a, level_b) for f in fits]
        pooled = analysis.rubin_pool(per_imp, label=f"{cov}:{level_a}-{level_b}")
        pooled_rows.append(pooled)
    else:
        labels = fits[0].labels
        for j, label in enumerate(labels):
            per_imp = [
                analysis.EstimateWithVariance(
                    float(f.coefficients[j]), float(f.covariance[j, j]), label
                )
                for f in fits
            ]
            pooled_rows.append(analysis.rubin_pool(per_imp, label=label))
    return pooled_rows


def cmd_analyze(resolved: dict, completed_paths) -> dict:
    if not completed_paths:
        raise ValidationError("analyze needs at least one completed CSV")
    completed_list = [fcs.read_completed_csv(p) for p in completed_paths]
    contrast = None
    if resolved["contrast_covariate"]:
        if not (resolved["contrast_a"] and resolved["contrast_b"]):
            raise ValidationError("contrast needs --contrast-a and --contrast-b levels")
        contrast = (resolved["contrast_covariate"], resolved["contrast_a"], resolved["contrast_b"])
    pooled_rows = _pool_analyses(
        completed_list, resolved["endpoint"], list(resolved["covariates"]), contrast
    )
    out_dir, prefix = resolved["out"], resolved["prefix"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{prefix}pooled.csv")
    _atomic_write_csv(
        path,
        ["parameter", "estimate", "se", "df", "p_value", "t_imputations"],
        [
            [p.label, _fmt(p.estimate), _fmt(p.se), _fmt(p.df), _fmt(p.p_value), p.t_imputations]
            for p in pooled_rows
        ],
    )
    _write_resolved_config(
        out_dir, prefix, "analyze", {**resolved, "completed": list(completed_paths)}
    )
    return {"pooled": path, "rows": pooled_rows}


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

_SIM_STATE: dict = {}


def _simulate_init(state):
    _SIM_STATE.update(state)


def _simulate_replicate(r: int):
    try:
        table = loglinear.JointTable(_SIM_STATE["k"], _SIM_STATE["probs"])
        truth = _SIM_STATE["truth"]
        n = _SIM_STATE["n"]
        master = _SIM_STATE["seed"]
        m, y = loglinear.sample(table, n, derive_int_seed(master, REPLICATE, r, DATA))
        dataset = Dataset(y, m.astype(bool))
        out = {}
        for method in _SIM_STATE["methods"]:
            if method == "available":
                estimates = [e.value for e in analysis.available_case(dataset)]
            else:
                tag = METHOD_NSC if method == "nsc" else METHOD_MAR
                config = FcsConfig(
                    mechanism=method,
                    t_imputations=_SIM_STATE["t_imputations"],
                    r_iterations=_SIM_STATE["r_iterations"],
                    ridge=_SIM_STATE["ridge"],
                    seed=derive_int_seed(master, REPLICATE, r, tag),
                )
                completed = fcs.impute(dataset, config)
                stacked = np.stack([c.y.mean(axis=0) for c in completed])
                estimates = stacked.mean(axis=0)
            out[method] = [
                analysis.percent_bias(float(est), float(t))
                for est, t in zip(estimates, truth)
            ]
        return r, out, None
    except Exception as exc:  # isolated per replicate, counted by the caller
        return r, None, f"{type(exc).__name__}: {exc}"


def simulate_bias(resolved: dict) -> dict:
    """Monte-Carlo percent-bias study; returns per-method mean bias and
    Monte-Carlo standard errors over the replicates."""
    replicates = int(resolved["replicates"])
    if replicates < 1:
        raise ValidationError(f"replicates must be >= 1, got {replicates}")
    methods = list(resolved["methods"])
    for method in methods:
        if method not in ALL_METHODS:
            raise ValidationError(f"unknown method {method!r}")
    scenario = scenarios.by_name(resolved["scenario"], **_scenario_params(resolved))
    state = {
        "k": scenario.table.k,
        "probs": np.asarray(scenario.table.probs),
        "truth": np.asarray(scenario.truth),
        "n": int(resolved["n"]),
        "seed": int(resolved["seed"]),
        "methods": methods,
        "t_imputations": int(resolved["t_imputations"]),
        "r_iterations": int(resolved["r_iterations"]),
        "ridge": float(resolved["ridge"]),
    }
    workers = resolved.get("workers") or os.cpu_count() or 1
    workers = max(1, min(int(workers), replicates))
    results = {}
    if workers == 1:
        _simulate_init(state)
        outcomes = map(_simulate_replicate, range(1, replicates + 1))
        for r, out, err in outcomes:
            results[r] = (out, err)
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_simulate_init, initargs=(state,)
        ) as pool:
            for r, out, err in pool.map(
                _simulate_replicate, range(1, replicates + 1), chunksize=8
            ):
                results[r] = (out, err)
    k = scenario.table.k
    failures = [(r, err) for r, (out, err) in results.items() if err is not None]
    if failures:
        for r, err in failures[:10]:
            print(f"replicate {r} failed: {err}", file=sys.stderr)
    if len(failures) > 0.01 * replicates:
        raise NumericalError(
            f"{len(failures)} of {replicates} replicates failed (> 1%)"
        )
    bias = {
        method: np.full((replicates, k), np.nan) for method in methods
    }
    for r, (out, err) in results.items():
        if err is None:
            for method in methods:
                bias[method][r - 1] = out[method]
    summary = {}
    for method in methods:
        vals = bias[method]
        good = ~np.isnan(vals[:, 0])
        mean = vals[good].mean(axis=0)
        mc_se = vals[good].std(axis=0, ddof=1) / math.sqrt(max(good.sum(), 1))
        summary[method] = (mean, mc_se, int(good.sum()))
    return {"scenario": scenario, "summary": summary, "failures": len(failures)}


def cmd_simulate(resolved: dict) -> dict:
    result = simulate_bias(resolved)
    out_dir, prefix = resolved["out"], resolved["prefix"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{prefix}bias_table.csv")
    rows = []
    for method, (mean, mc_se, used) in result["summary"].items():
        for k, (b, se) in enumerate(zip(mean, mc_se), start=1):
            rows.append(
                [result["scenario"].label, resolved["n"], method, f"y{k}",
                 _fmt(float(b)), _fmt(float(se)), used]
            )
    _atomic_write_csv(
        path,
        ["scenario", "n", "method", "outcome", "mean_percent_bias", "mc_se", "replicates_used"],
        rows,
    )
    _write_resolved_config(out_dir, prefix, "simulate", resolved)
    return {"bias_table": path, **result}


# ---------------------------------------------------------------------------
# asymptotic
# ---------------------------------------------------------------------------

PAPER_GRID = {
    "nsc-main": [{"missing_rate": r} for r in (0.2, 0.3, 0.4)],
    "nsc-ym": [{"lambda3": l, "missing_rate": 0.3} for l in (-0.5, -1.0, -2.0)],
    "mar-blocks": [
        {"lambda_yy": yy, "missing_rate": r} for yy in (0.5, 2.0) for r in (0.2, 0.3, 0.4)
    ],
}


def cmd_asymptotic(resolved: dict) -> dict:
    which = resolved["scenario"]
    if which == "all":
        grid = [(name, params) for name in SCENARIO_NAMES for params in PAPER_GRID[name]]
    elif which in SCENARIO_NAMES:
        grid = [(which, params) for params in PAPER_GRID[which]]
    else:
        raise ValidationError(f"scenario must be one of {SCENARIO_NAMES} or 'all'")
    methods = [m for m in resolved["methods"] if m in ALL_METHODS]
    rows = []
    for name, params in grid:
        scenario = scenarios.by_name(name, **params)
        for method in methods:
            biases = population.asymptotic_bias(scenario, method)
            for k, b in enumerate(biases, start=1):
                rows.append([name, json.dumps(params, sort_keys=True), method, f"y{k}", _fmt(float(b))])
    out_dir, prefix = resolved["out"], resolved["prefix"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{prefix}asymptotic.csv")
    _atomic_write_csv(
        path, ["scenario", "params", "method", "outcome", "percent_bias"], rows
    )
    _write_resolved_config(out_dir, prefix, "asymptotic", resolved)
    return {"asymptotic": path, "rows": rows}


# ---------------------------------------------------------------------------
# sensitivity
# ---------------------------------------------------------------------------

_GRID_STATE: dict = {}


def _grid_init(state):
    _GRID_STATE.update(state)


def _grid_point(point):
    ia, ib, lam_a, lam_b = point
    try:
        st = _GRID_STATE
        dataset = st["dataset"]
        k = dataset.k
        sens = SensitivitySpec(
            offsets=(),
            group=st["contrast"][0],
            group_offsets={
                st["contrast"][1]: (lam_a,) * k,
                st["contrast"][2]: (lam_b,) * k,
            },
        )
        config = st["base_config"]
        config = FcsConfig(
            mechanism=config.mechanism,
            t_imputations=config.t_imputations,
            r_iterations=config.r_iterations,
            sensitivity=sens,
            covariate_design=config.covariate_design,
            interaction_group=config.interaction_group,
            stratify_by=config.stratify_by,
            ym_products=config.ym_products,
            ridge=config.ridge,
            seed=config.seed,
        )
        completed = fcs.impute(dataset, config)
        pooled = _pool_analyses(
            completed, st["endpoint"], st["covariates"], st["contrast"]
        )[0]
        return ia, ib, lam_a, lam_b, pooled.estimate, pooled.se, pooled.p_value, None
    except Exception as exc:
        return ia, ib, lam_a, lam_b, math.nan, math.nan, math.nan, f"{type(exc).__name__}: {exc}"


def sensitivity_grid(resolved: dict, dataset_path: str) -> dict:
    """Impute + analyze + pool at every offset grid point for one contrast.

    The two grid axes are the self-censoring offsets of the two contrast
    levels (all outcomes share the level's offset); all other levels stay at
    zero.  Imputation streams depend only on (seed, t), so the (0, 0) corner
    reproduces a plain impute-and-analyze run exactly.
    """
    start, stop, step = (
        float(resolved["grid_start"]),
        float(resolved["grid_stop"]),
        float(resolved["grid_step"]),
    )
    if not (0.0 <= start <= stop <= GRID_BOUND):
        raise ValidationError(f"grid bounds must sit inside [0, {GRID_BOUND}]")
    if step <= 0:
        raise ValidationError("grid step must be positive")
    if not resolved["contrast_covariate"]:
        raise ValidationError("sensitivity needs a contrast (--contrast-covariate/-a/-b)")
    contrast = (
        resolved["contrast_covariate"],
        str(resolved["contrast_a"]),
        str(resolved["contrast_b"]),
    )
    dataset = fcs.read_dataset_csv(dataset_path)
    if contrast[0] not in dataset.covariates:
        raise ValidationError(f"contrast covariate {contrast[0]!r} not in dataset")
    levels = dataset.categorical_levels(contrast[0])
    for level in contrast[1:]:
        if level not in levels:
            raise ValidationError(f"level {level!r} not found in {contrast[0]!r}")
    n_steps = int(round((stop - start) / step)) + 1
    axis = [round(start + i * step, 10) for i in range(n_steps)]
    base_config = _fcs_config(resolved)
    points = [
        (ia, ib, lam_a, lam_b)
        for ia, lam_a in enumerate(axis)
        for ib, lam_b in enumerate(axis)
    ]
    state = {
        "dataset": dataset,
        "base_config": base_config,
        "endpoint": resolved["endpoint"],
        "covariates": list(resolved["covariates"]),
        "contrast": contrast,
    }
    workers = resolved.get("workers") or os.cpu_count() or 1
    workers = max(1, min(int(workers), len(points)))
    if workers == 1:
        _grid_init(state)
        raw = [_grid_point(p) for p in points]
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_grid_init, initargs=(state,)
        ) as pool:
            raw = list(pool.map(_grid_point, points, chunksize=1))
    failures = [r for r in raw if r[7] is not None]
    for r in failures[:10]:
        print(f"grid point ({r[2]}, {r[3]}) failed: {r[7]}", file=sys.stderr)
    return {
        "axis": axis,
        "points": raw,
        "contrast": contrast,
        "failures": len(failures),
        "odds_ratio_range": [math.exp(axis[0]), math.exp(axis[-1])],
    }


def cmd_sensitivity(resolved: dict, dataset_path: str) -> dict:
    result = sensitivity_grid(resolved, dataset_path)
    out_dir, prefix = resolved["out"], resolved["prefix"]
    os.makedirs(out_dir, exist_ok=True)
    threshold = resolved.get("threshold")
    header = [
        "lambda_a", "lambda_b", "odds_ratio_a", "odds_ratio_b",
        "contrast", "log_or", "se", "p_value",
    ]
    if threshold is not None:
        header.append("significant")
    contrast_label = "{}:{}-{}".format(*result["contrast"])
    rows = []
    for ia, ib, lam_a, lam_b, est, se, p, err in result["points"]:
        row = [
            _fmt(lam_a), _fmt(lam_b),
            _fmt(math.exp(lam_a)), _fmt(math.exp(lam_b)),
            contrast_label, _fmt(est), _fmt(se), _fmt(p),
        ]
        if threshold is not None:
            row.append("NA" if math.isnan(p) else str(int(p < float(threshold))))
        rows.append(row)
    path = os.path.join(out_dir, f"{prefix}sensitivity_grid.csv")
    _atomic_write_csv(path, header, rows)
    meta = {
        "contrast": contrast_label,
        "grid_axis": result["axis"],
        "odds_ratio_range": result["odds_ratio_range"],
        "failures": result["failures"],
        "threshold": threshold,
    }
    meta_path = os.path.join(out_dir, f"{prefix}sensitivity_meta.json")
    _atomic_write_text(meta_path, json.dumps(meta, indent=2) + "\n")
    _write_resolved_config(
        out_dir, prefix, "sensitivity", {**resolved, "dataset": dataset_path}
    )
    return {"grid": path, "meta": meta_path, **result}


# ---------------------------------------------------------------------------
# reproduce
# ---------------------------------------------------------------------------


def cmd_reproduce(resolved: dict) -> dict:
    table_no = int(resolved["table"])
    if table_no not in (1, 2, 3):
        raise ValidationError("table must be 1, 2 or 3")
    name = {1: "nsc-main", 2: "nsc-ym", 3: "mar-blocks"}[table_no]
    rows = []
    for params in PAPER_GRID[name]:
        scenario = scenarios.by_name(name, **params)
        for method in ALL_METHODS:
            biases = population.asymptotic_bias(scenario, method)
            for k, b in enumerate(biases, start=1):
                rows.append(
                    [name, json.dumps(params, sort_keys=True), "asymptotic",
                     method, f"y{k}", _fmt(float(b)), "NA"]
                )
        finite = simulate_bias({**resolved, "scenario": name, **params})
        for method, (mean, mc_se, used) in finite["summary"].items():
            for k, (b, se) in enumerate(zip(mean, mc_se), start=1):
                rows.append(
                    [name, json.dumps(params, sort_keys=True), f"n{resolved['n']}",
                     method, f"y{k}", _fmt(float(b)), _fmt(float(se))]
                )
    out_dir, prefix = resolved["out"], resolved["prefix"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{prefix}table{table_no}.csv")
    _atomic_write_csv(
        path,
        ["scenario", "params", "sample", "method", "outcome", "percent_bias", "mc_se"],
        rows,
    )
    _write_resolved_config(out_dir, prefix, "reproduce", resolved)
    return {"table": path, "rows": rows}


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors (exit 1)
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _add_common(sub):
    sub.add_argument("--config", help="JSON file with defaults for any option")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--prefix", help="output filename prefix")
    sub.add_argument("--seed", type=int, help="master seed")
    sub.add_argument("--workers", type=int, help="process pool size")


def _add_scenario(sub):
    sub.add_argument("--scenario", help="nsc-main | nsc-ym | mar-blocks")
    sub.add_argument("--missing-rate", type=float, dest="missing_rate")
    sub.add_argument("--lambda3", type=float)
    sub.add_argument("--lambda-yy", type=float, dest="lambda_yy")


def _add_fcs(sub):
    sub.add_argument("--mechanism", choices=["nsc", "mar"])
    sub.add_argument("--t-imputations", type=int, dest="t_imputations")
    sub.add_argument("--r-iterations", type=int, dest="r_iterations")
    sub.add_argument("--ridge", type=float)
    sub.add_argument(
        "--covariate-design", dest="covariate_design",
        choices=["none", "main", "interactions", "stratify"],
    )
    sub.add_argument("--interaction-group", dest="interaction_group")
    sub.add_argument("--stratify-by", dest="stratify_by")
    sub.add_argument("--ym-products", dest="ym_products", action="store_true", default=None)


def _add_analysis(sub):
    sub.add_argument("--endpoint", help="'yk' or 'consecN' (default consec3)")
    sub.add_argument("--covariates", nargs="*", help="covariate columns for the endpoint model")
    sub.add_argument("--contrast-covariate", dest="contrast_covariate")
    sub.add_argument("--contrast-a", dest="contrast_a")
    sub.add_argument("--contrast-b", dest="contrast_b")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nscmi", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen", help="sample a scenario dataset")
    _add_common(p); _add_scenario(p)
    p.add_argument("--n", type=int, help="rows to sample")

    p = subs.add_parser("impute", help="multiply impute a dataset CSV")
    _add_common(p); _add_fcs(p)
    p.add_argument("dataset", help="dataset CSV (y1..yK with 0/1/NA + covariates)")

    p = subs.add_parser("analyze", help="pool endpoint analyses over completed CSVs")
    _add_common(p); _add_analysis(p)
    p.add_argument("completed", nargs="+", help="completed dataset CSVs")

    p = subs.add_parser("simulate", help="Monte-Carlo bias study")
    _add_common(p); _add_scenario(p); _add_fcs(p)
    p.add_argument("--n", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--methods", nargs="+", choices=list(ALL_METHODS))

    p = subs.add_parser("asymptotic", help="population-level bias tables")
    _add_common(p)
    p.add_argument("--scenario", help="nsc-main | nsc-ym | mar-blocks | all")
    p.add_argument("--methods", nargs="+", choices=list(ALL_METHODS))

    p = subs.add_parser("sensitivity", help="offset grid for one group contrast")
    _add_common(p); _add_fcs(p); _add_analysis(p)
    p.add_argument("dataset")
    p.add_argument("--grid-start", type=float, dest="grid_start")
    p.add_argument("--grid-stop", type=float, dest="grid_stop")
    p.add_argument("--grid-step", type=float, dest="grid_step")
    p.add_argument("--threshold", type=float, help="p-value cutoff column")

    p = subs.add_parser("reproduce", help="benchmark tables 1|2|3")
    _add_common(p); _add_fcs(p)
    p.add_argument("--table", type=int, choices=[1, 2, 3])
    p.add_argument("--n", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--methods", nargs="+", choices=list(ALL_METHODS))

    p = subs.add_parser("config", help="print defaults")
    p.add_argument("--defaults", action="store_true")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Defaults < config file < command-line flags."""
    resolved = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                file_conf = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {config_path}: {exc}") from exc
        unknown = set(file_conf) - set(DEFAULTS)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_conf)
    for key, value in vars(args).items():
        if key in ("command", "config", "dataset", "completed", "defaults"):
            continue
        if value is not None:
            resolved[key] = value
    return resolved


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "config":
            print(json.dumps(DEFAULTS, indent=2, sort_keys=True, default=str))
            return 0
        resolved = resolve(args)
        if args.command == "gen":
            out = cmd_gen(resolved)
            print(json.dumps({k: v for k, v in out.items()}, indent=2))
        elif args.command == "impute":
            out = cmd_impute(resolved, args.dataset)
            print(json.dumps({"completed": out["completed"], "meta": out["meta"]}, indent=2))
        elif args.command == "analyze":
            out = cmd_analyze(resolved, args.completed)
            print(f"wrote {out['pooled']}")
        elif args.command == "simulate":
            out = cmd_simulate(resolved)
            print(f"wrote {out['bias_table']} ({out['failures']} failed replicates)")
        elif args.command == "asymptotic":
            out = cmd_asymptotic(resolved)
            print(f"wrote {out['asymptotic']}")
        elif args.command == "sensitivity":
            out = cmd_sensitivity(resolved, args.dataset)
            print(f"wrote {out['grid']} ({out['failures']} failed grid points)")
        elif args.command == "reproduce":
            out = cmd_reproduce(resolved)
            print(f"wrote {out['table']}")
        else:  # pragma: no cover - argparse enforces the choices
            raise ValidationError(f"unknown command {args.command!r}")
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, NscmiError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
