import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from com.mhire.app.config.config import Config
from com.mhire.app.config.experiment_config import BenchmarkSection, ExperimentConfig, load_experiment_config
from com.mhire.app.services.density_space.density_schema import ConstraintSet, LambdaGrid, OperatorMatrix
from com.mhire.app.services.density_space.density_space import (
    assemble_operator,
    discretize_density,
    membership_radius,
    mu_distance,
    mu_norm,
)
from com.mhire.app.services.errors import CBIError, ConfigError, FlowDomainError, QuadratureError
from com.mhire.app.services.estimator.estimator import (
    RANK_TOL,
    empirical_g1,
    empirical_g2,
    fit,
    projection_inequality,
    risk_bound_constant,
    risk_statistic,
)
from com.mhire.app.services.estimator.estimator_schema import EstimateReport, FitOptions, ObservationSeries
from com.mhire.app.services.harness.harness_schema import BenchmarkRow, ValidationReport
from com.mhire.app.services.harness.validation import run_validation
from com.mhire.app.services.mechanism_core.mechanism_schema import BranchingMechanism
from com.mhire.app.services.simulator.simulator import simulate_path

logger = logging.getLogger(__name__)

ConfigSource = Union[str, Path, ExperimentConfig, None]

# Medians need at least this many replicates before acceptance is judged
MIN_ACCEPTANCE_REPLICATES = 10
# Asymptotic standard error of a sample median relative to that of the mean
MEDIAN_SE_FACTOR = math.sqrt(math.pi / 2.0)


def _resolve_config(config: ConfigSource) -> ExperimentConfig:
    if isinstance(config, ExperimentConfig):
        return config
    return load_experiment_config(config)


def _output_dir(out: Union[str, Path, None], config: ExperimentConfig) -> Path:
    target = Path(out or config.output_dir or Config().output_root)
    target.mkdir(parents=True, exist_ok=True)
    return target


def _write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def build_operators(
    mech: BranchingMechanism,
    beta: float,
    breakpoints: np.ndarray,
    lgrid: LambdaGrid,
    delta: float,
    routes: Sequence[str],
) -> Dict[str, OperatorMatrix]:
    """The stationary-route operator (T = inf) and the one-step operator (T = delta)."""
    horizons = {"g1": math.inf, "g2": delta}
    return {route: assemble_operator(mech, beta, breakpoints, lgrid, horizons[route]) for route in routes}


def estimate_routes(
    series: ObservationSeries,
    mech: BranchingMechanism,
    operators: Dict[str, OperatorMatrix],
    cs: ConstraintSet,
    lgrid: LambdaGrid,
    opts: Optional[FitOptions] = None,
) -> Dict[str, Tuple[EstimateReport, np.ndarray]]:
    """Fit every route in ``operators``; returns (report, empirical curve) per route."""
    results = {}
    for route, op in operators.items():
        gn = empirical_g1(series, lgrid) if route == "g1" else empirical_g2(series, lgrid, mech)
        report = fit(gn, op, cs, lgrid, opts, route=route)
        if series.is_constant:
            logger.warning(f"Constant series of length {series.n + 1}; the {route} fit is degenerate")
            for flag in ("degenerate_data", "boundary_solution"):
                if flag not in report.flags:
                    report.flags.append(flag)
        report.norms = {
            "k_mu": mu_norm(report.density),
            "residual_w": math.sqrt(max(report.objective, 0.0)),
        }
        results[route] = (report, gn)
    return results


def cmd_simulate(config: ConfigSource, out: Union[str, Path, None] = None) -> Path:
    """Simulate the configured path and write ``series.csv`` with its metadata sidecar."""
    experiment = _resolve_config(config)
    sim = experiment.sim_config()
    sample = simulate_path(sim, experiment.simulation.n)
    target = _output_dir(out, experiment)

    path = sample.series.write_csv(target / "series.csv")
    meta = {
        "config_hash": experiment.config_hash(),
        "seed": sim.seed,
        "scheme": sample.scheme_used,
        "jumps_emitted": sample.jumps_emitted,
        "n": sample.series.n,
        "delta": sim.delta,
        "burn_in": sim.effective_burn_in,
        "timestamp": datetime.now().isoformat(),
    }
    _write_json(ObservationSeries.meta_path(path), meta)
    logger.info(f"Wrote {path} ({sample.series.n + 1} observations)")
    return path


def cmd_estimate(series_path: Union[str, Path], config: ConfigSource, out: Union[str, Path, None] = None) -> Path:
    """Estimate the jump density from a series file and write ``estimate.json``."""
    experiment = _resolve_config(config)
    try:
        series = ObservationSeries.read_csv(series_path)
    except FileNotFoundError:
        raise ConfigError(f"Series file not found: {series_path}")

    mech = experiment.mechanism_spec()
    lgrid = experiment.lambda_grid()
    cs = experiment.constraint_set()
    operators = build_operators(mech, experiment.immigration.beta, experiment.breakpoints(),
                                lgrid, series.delta, experiment.estimator.routes)
    results = estimate_routes(series, mech, operators, cs, lgrid, experiment.fit_options())

    config_hash = experiment.config_hash()
    reports = {}
    for route, (report, _) in results.items():
        report.config_hash = config_hash
        reports[route] = report.model_dump()
    payload = {
        "config_hash": config_hash,
        "seed": series.meta.get("seed", experiment.simulation.seed),
        "n": series.n,
        "delta": series.delta,
        "reports": reports,
    }
    path = _write_json(_output_dir(out, experiment) / "estimate.json", payload)
    logger.info(f"Wrote {path} for routes {sorted(reports)}")
    return path


def cmd_validate(quick: bool = False, fault: Optional[str] = None) -> ValidationReport:
    report = run_validation(quick=quick, fault=fault)
    logger.info(f"Validation ({report.mode}) {'passed' if report.passed else 'failed'}")
    return report


# Benchmark workers. State is built once per process and never mutated afterwards.
_WORKER_STATE: Dict[str, object] = {}


def benchmark_state(experiment: ExperimentConfig) -> Dict[str, object]:
    """Operators, constraint set and truth shared by every benchmark replicate."""
    mech = experiment.mechanism_spec()
    imm = experiment.benchmark_truth()
    lgrid = experiment.lambda_grid()
    breakpoints = experiment.benchmark_breakpoints()
    operators = build_operators(mech, imm.beta, breakpoints, lgrid, experiment.simulation.delta, ("g1", "g2"))
    truth = discretize_density(imm.density, breakpoints)
    return {
        "experiment": experiment,
        "sim": experiment.sim_config().model_copy(update={"imm": imm}),
        "mech": mech,
        "imm": imm,
        "lgrid": lgrid,
        "cs": experiment.benchmark_constraint_set(),
        "opts": experiment.fit_options(),
        "operators": operators,
        "truth": truth,
        "truth_g": {route: op.apply(truth.values) for route, op in operators.items()},
    }


def setup_flags(state: Dict[str, object]) -> List[str]:
    """Conditions under which the acceptance verdicts do not measure the estimator."""
    flags = []
    cs, truth = state["cs"], state["truth"]
    radius = membership_radius(truth, cs.mode)
    if not cs.contains(truth) or radius > cs.R:
        logger.warning(f"Truth lies outside the constraint set (violation {cs.violation(truth.values):.3g}, "
                       f"membership radius {radius:.3g}, R={cs.R:g})")
        flags.append("truth_outside_constraint_set")
    sigma = min(op.sigma_min for op in state["operators"].values())
    if sigma < RANK_TOL:
        logger.warning(f"Benchmark operator sigma_min={sigma:.3e}; k-hat is not identifiable on this grid")
        flags.append("non_identifiable")
    return flags


def _init_worker(experiment: ExperimentConfig) -> None:
    logging.basicConfig(level=Config().log_level)
    _WORKER_STATE.update(benchmark_state(experiment))


def _failed_row(n: int, replicate: int, runtime: float) -> BenchmarkRow:
    return BenchmarkRow(
        n=n, replicate=replicate, g1_err_w=math.nan, k1_err_mu=math.nan, g2_err_w_scaled=math.nan,
        k2_err_mu=math.nan, iterations_g1=0, iterations_g2=0, inequality_ok=False, failed=True,
        runtime_s=runtime,
    )


def _run_replicate(task: Tuple[int, int]) -> BenchmarkRow:
    n, replicate = task
    state = _WORKER_STATE
    start = time.perf_counter()
    try:
        series = simulate_path(state["sim"], n, substream=(n, replicate)).series
        results = estimate_routes(series, state["mech"], state["operators"], state["cs"],
                                  state["lgrid"], state["opts"])
    except (CBIError, ValueError) as e:
        logger.warning(f"Benchmark row n={n} replicate={replicate} failed: {e}")
        return _failed_row(n, replicate, time.perf_counter() - start)

    lgrid, truth, truth_g = state["lgrid"], state["truth"], state["truth_g"]
    report1, gn1 = results["g1"]
    report2, gn2 = results["g2"]
    holds = all(
        projection_inequality(report, gn, truth_g[route], lgrid)[2]
        for route, (report, gn) in results.items()
    )
    row = BenchmarkRow(
        n=n,
        replicate=replicate,
        g1_err_w=lgrid.norm_sq(np.asarray(report1.g_hat) - truth_g["g1"]),
        k1_err_mu=mu_distance(report1.density, truth),
        g2_err_w_scaled=risk_statistic(report2, truth_g["g2"], lgrid, n, gn=gn2),
        k2_err_mu=mu_distance(report2.density, truth),
        iterations_g1=report1.iterations,
        iterations_g2=report2.iterations,
        inequality_ok=holds,
        runtime_s=time.perf_counter() - start,
    )
    logger.info(f"Benchmark row n={n} replicate={replicate}: k1 error {row.k1_err_mu:.4g}")
    return row


def _median_and_se(values: np.ndarray) -> Tuple[Optional[float], Optional[float]]:
    values = values[np.isfinite(values)]
    if values.size == 0:
        return None, None
    if values.size == 1:
        return float(values[0]), None
    se = MEDIAN_SE_FACTOR * float(np.std(values, ddof=1)) / math.sqrt(values.size)
    return float(np.median(values)), se


def _nonincreasing(medians: List[float]) -> bool:
    return all(b <= a for a, b in zip(medians, medians[1:]))


def summarize_rows(
    rows: Sequence[BenchmarkRow],
    settings: BenchmarkSection,
    risk_bound: Optional[float],
    se_multiple: float,
    config_hash: str,
) -> dict:
    """Per-n medians and acceptance verdicts; depends only on the rows and the settings."""
    ladder = sorted({row.n for row in rows})
    per_n = {}
    for n in ladder:
        group = [row for row in rows if row.n == n]
        ok = [row for row in group if not row.failed]
        entry = {"replicates": len(group), "failures": len(group) - len(ok)}
        for column in ("g1_err_w", "k1_err_mu", "g2_err_w_scaled", "k2_err_mu"):
            median, se = _median_and_se(np.array([getattr(row, column) for row in ok], dtype=float))
            entry[f"median_{column}"] = median
            entry[f"se_{column}"] = se
        per_n[str(n)] = entry

    summary = {"config_hash": config_hash, "per_n": per_n, "risk_bound": risk_bound, "acceptance": {}}
    if len(ladder) < 2 or settings.replicates < MIN_ACCEPTANCE_REPLICATES:
        summary["acceptance"] = {"evaluated": False}
        return summary
    short = [n for n in ladder if per_n[str(n)]["replicates"] - per_n[str(n)]["failures"] < MIN_ACCEPTANCE_REPLICATES]
    if short:
        summary["acceptance"] = {
            "evaluated": True,
            "passed": False,
            "reason": f"fewer than {MIN_ACCEPTANCE_REPLICATES} successful replicates at n={short}",
        }
        return summary

    first, last = per_n[str(ladder[0])], per_n[str(ladder[-1])]
    k_medians = [per_n[str(n)]["median_k1_err_mu"] for n in ladder]
    g_medians = [per_n[str(n)]["median_g1_err_w"] for n in ladder]
    consistency = (
        _nonincreasing(k_medians)
        and _nonincreasing(g_medians)
        and last["median_k1_err_mu"] <= settings.consistency_ratio * first["median_k1_err_mu"]
    )

    tail = [per_n[str(n)] for n in ladder[-2:]]
    scaled = [entry["median_g2_err_w_scaled"] for entry in tail]
    risk = max(scaled) <= settings.risk_factor * min(scaled)
    if risk_bound is not None:
        risk = risk and all(
            entry["median_g2_err_w_scaled"] <= risk_bound + se_multiple * entry["se_g2_err_w_scaled"]
            for entry in tail
        )
    inequality = all(row.inequality_ok for row in rows if not row.failed)
    summary["acceptance"] = {
        "evaluated": True,
        "consistency": bool(consistency),
        "risk_bound": bool(risk),
        "projection_inequality": bool(inequality),
        "passed": bool(consistency and risk and inequality),
    }
    return summary


def write_benchmark_csv(rows: Sequence[BenchmarkRow], path: Path) -> Path:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(BenchmarkRow.CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_fields())
    return path


def read_benchmark_csv(path: Union[str, Path]) -> List[BenchmarkRow]:
    """Rows of a written benchmark CSV, for recomputing summaries offline."""
    with Path(path).open(newline="") as handle:
        records = list(csv.DictReader(handle))
    rows = []
    for record in records:
        for flag in ("inequality_ok", "failed"):
            record[flag] = record[flag] == "1"
        rows.append(BenchmarkRow(**record))
    return rows


def _risk_bound(state: Dict[str, object]) -> Optional[float]:
    experiment = state["experiment"]
    try:
        constant = risk_bound_constant(state["mech"], state["imm"], state["lgrid"], experiment.simulation.delta)
    except (FlowDomainError, QuadratureError) as e:
        logger.warning(f"Integrated variance is not finite on this lambda grid ({e}); risk bound skipped")
        return None
    return 4.0 * constant


def cmd_benchmark(
    config: ConfigSource, out: Union[str, Path, None] = None, workers: Optional[int] = None
) -> Tuple[Path, dict]:
    """Simulate, fit and score every (n, replicate) of the ladder; writes CSV, summary and metadata."""
    experiment = _resolve_config(config)
    settings = experiment.benchmark
    workers = max(1, workers or Config().workers)
    target = _output_dir(out, experiment)
    tasks = [(n, replicate) for n in settings.ladder for replicate in range(settings.replicates)]
    logger.info(f"Benchmark: {len(tasks)} fits on ladder {settings.ladder} with {workers} worker(s)")

    started = time.perf_counter()
    state = benchmark_state(experiment)
    flags = setup_flags(state)
    if workers == 1:
        _WORKER_STATE.update(state)
        rows = [_run_replicate(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(experiment,)) as pool:
            rows = list(pool.map(_run_replicate, tasks))
    rows.sort(key=lambda row: (row.n, row.replicate))

    csv_path = write_benchmark_csv(rows, target / "benchmark.csv")
    se_multiple = settings.se_multiple or Config().se_multiple
    summary = summarize_rows(rows, settings, _risk_bound(state), se_multiple, experiment.config_hash())
    summary["seed"] = experiment.simulation.seed
    summary["setup_flags"] = flags
    _write_json(target / "benchmark_summary.json", summary)
    _write_json(target / "benchmark.meta.json", {
        "config_hash": experiment.config_hash(),
        "seed": experiment.simulation.seed,
        "workers": workers,
        "elapsed_s": time.perf_counter() - started,
        "runtimes": [{"n": row.n, "replicate": row.replicate, "runtime_s": row.runtime_s} for row in rows],
        "timestamp": datetime.now().isoformat(),
    })
    failures = sum(row.failed for row in rows)
    logger.info(f"Wrote {csv_path}: {len(rows)} rows, {failures} failed")
    return csv_path, summary
