import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

import numpy as np
import pandas as pd
from pydantic import ValidationError

from src.errors import ConfigError, HDQKDError, InfeasibleStatisticsError, PreconditionError
from src.keyrate import asymptotic_rate, evaluate, optimize_m
from src.mub_bell import oracle_outcome_sets
from src.protocol_sim import depolarizing_channel, run_protocol
from src.sampling_bounds import verify_consistency
from src.sampling_montecarlo import WORD_FAMILIES, estimate_failure_grid, make_word
from src.schema_models import (ChannelModel, LeakageModel, NoiseThresholds, NonMonotonicityReport,
                               SamplingGeometry, ScenarioConfig, SecurityTargets, SweepRow)
from src.utils import (format_labels, load_structured, parallel_map, render_record, render_table, setup_logger,
                       write_output)

logger = setup_logger("cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3

SWEEP_COLUMNS = ["axis", "rate", "ell", "m_opt", "delta", "flags"]
REPORT_COLUMNS = ["start", "end", "flagged", "note"]


class StrictModeFailure(HDQKDError):
    pass


def _rows_from_document(data: dict, key: str, expected: int, path: Path) -> List[List[float]]:
    rows = data.get(key)
    if rows is None:
        raise ConfigError(f"{path}: missing '{key}'")
    if isinstance(rows, dict):
        try:
            rows = [rows[j] if j in rows else rows[str(j)] for j in range(expected)]
        except KeyError as e:
            raise ConfigError(f"{path}: '{key}' has no entry for index {e}") from e
    if len(rows) != expected:
        raise ConfigError(f"{path}: '{key}' needs {expected} rows, got {len(rows)}")
    return rows


def load_thresholds(path: Path, d: Optional[int] = None) -> NoiseThresholds:
    """Thresholds file: {d: <prime>, rows: {j: [Q_1^j, ..., Q_{d-1}^j]}} (a list of rows also works)."""
    data = load_structured(path)
    file_d = data.get("d", d)
    if file_d is None:
        raise ConfigError(f"{path}: missing 'd'")
    if d is not None and file_d != d:
        raise ConfigError(f"{path}: file is for d={file_d} but --d {d} was given")
    try:
        return NoiseThresholds(d=file_d, qhat=_rows_from_document(data, "rows", int(file_d) + 1, path))
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e


def load_channel(path: Path, d: int) -> ChannelModel:
    """Channel file: {d: <prime>, lambda: [[...]]}; weights are normalised to a distribution."""
    data = load_structured(path)
    if data.get("d", d) != d:
        raise ConfigError(f"{path}: file is for d={data.get('d')} but --d {d} was given")
    lam = np.asarray(_rows_from_document(data, "lambda", d, path), dtype=float)
    if lam.sum() <= 0:
        raise ConfigError(f"{path}: lambda must have a positive total")
    return ChannelModel(d=d, p=(lam / lam.sum()).tolist())


def parse_noise(spec: str, d: int) -> NoiseThresholds:
    """'symmetric:<Q>' or 'matrix:<path>'; a bare path is read as a thresholds file."""
    kind, sep, arg = spec.partition(":")
    if sep and kind == "symmetric":
        return NoiseThresholds.symmetric(d, float(arg))
    if sep and kind == "matrix":
        return load_thresholds(Path(arg), d)
    if not sep or Path(spec).exists():
        return load_thresholds(Path(spec), d)
    raise ConfigError(f"unknown noise spec '{spec}' (use symmetric:<Q> or matrix:<path>)")


def parse_channel(spec: str, d: int) -> ChannelModel:
    kind, _, arg = spec.partition(":")
    if kind == "depolarizing":
        return depolarizing_channel(d, float(arg))
    if kind == "lambda":
        return load_channel(Path(arg), d)
    raise ConfigError(f"unknown channel spec '{spec}' (use depolarizing:<Q> or lambda:<path>)")


def load_scenario(path: Path) -> ScenarioConfig:
    data = load_structured(path)
    try:
        return ScenarioConfig(**data)
    except ValidationError as e:
        details = "; ".join(f"{'.'.join(map(str, err['loc'])) or '<root>'}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{path}: {details}") from e


def _sweep_point(args) -> SweepRow:
    config, value = args
    if config.sweep.axis == "N":
        N, qhat = int(value), config.thresholds()
    else:
        N, qhat = config.N, config.thresholds(value)
    try:
        if config.m_policy.mode == "optimize":
            result = optimize_m(qhat, N, config.targets, config.leak, c=config.c, beta=config.beta,
                                negativity_threshold=config.negativity_threshold)
        else:
            result = evaluate(qhat, N, config.m_policy.m_for(N), config.targets, config.leak, c=config.c,
                              beta=config.beta, negativity_threshold=config.negativity_threshold)
    except InfeasibleStatisticsError as e:
        logger.warning(f"axis={value}: {e}")
        return SweepRow(axis=value, rate=0.0, ell=0, m_opt=None, delta=None, flags="infeasible_statistics")
    return SweepRow(axis=value, rate=result.rate, ell=result.ell, m_opt=result.m_opt or result.m,
                    delta=result.delta_used, flags=";".join(result.flags))


def detect_nonmonotonicity(rows: Union[pd.DataFrame, Sequence[SweepRow]],
                           expect_increase: bool = False) -> NonMonotonicityReport:
    """Axis intervals on which the rate strictly increases; adjacent increasing steps are merged."""
    if isinstance(rows, pd.DataFrame):
        points = list(zip(rows["axis"].astype(float), rows["rate"].astype(float)))
    else:
        points = [(float(r.axis), float(r.rate)) for r in rows]
    if len(points) < 3:
        raise PreconditionError(f"non-monotonicity detection needs at least 3 rows, got {len(points)}")
    points.sort()
    intervals: List[Tuple[float, float]] = []
    for (a0, r0), (a1, r1) in zip(points, points[1:]):
        if r1 > r0:
            if intervals and intervals[-1][1] == a0:
                intervals[-1] = (intervals[-1][0], a1)
            else:
                intervals.append((a0, a1))
    flagged = expect_increase and not intervals
    note = ""
    if flagged:
        note = "expected an increasing interval for this asymmetric sweep but found none"
        logger.warning(note)
    elif intervals:
        note = f"rate increases with noise on {len(intervals)} interval(s)"
    return NonMonotonicityReport(intervals=intervals, flagged=flagged, note=note)


def render_report(report: NonMonotonicityReport, fmt: str) -> str:
    """Trailing block of '# ' lines; CSV readers skip it with comment='#'."""
    intervals = report.intervals or [(None, None)]
    df = pd.DataFrame([{"start": a, "end": b, "flagged": report.flagged, "note": report.note} for a, b in intervals],
                      columns=REPORT_COLUMNS)
    return "# nonmonotonicity\n" + "".join(f"# {line}\n" for line in render_table(df, fmt).splitlines())


def run_sweep(config: ScenarioConfig, threads: int = 1) -> Tuple[pd.DataFrame, Optional[NonMonotonicityReport]]:
    """One optimize_m (or evaluate) call per axis point, rows in axis order."""
    points = config.sweep.points()
    logger.info(f"Sweeping {config.sweep.axis} over {len(points)} points for d={config.d}")
    rows = parallel_map(_sweep_point, [(config, v) for v in points], threads)
    df = pd.DataFrame([r.model_dump() for r in rows], columns=SWEEP_COLUMNS)
    df["m_opt"] = df["m_opt"].astype("Int64")
    report = None
    if config.sweep.axis == "Q" and len(rows) >= 3:
        expect = config.noise.kind == "asymmetric" and config.noise.basis == 1
        report = detect_nonmonotonicity(rows, expect_increase=expect)
    return df, report


def _targets(args) -> SecurityTargets:
    return SecurityTargets(eps=args.eps, eps_sec=args.eps_sec)


def _check_strict(args, flags: Sequence[str]):
    if args.strict and any(f.startswith("infeasible") for f in flags):
        raise StrictModeFailure(f"infeasibility flags raised in strict mode: {list(flags)}")


def cmd_keyrate(args) -> str:
    qhat = parse_noise(args.noise, args.d)
    leak = LeakageModel.parse(args.leak, args.eps_cor)
    targets = _targets(args)
    m = args.m if args.m is not None else args.N // 2
    try:
        if not args.optimize_m:
            record = evaluate(qhat, args.N, m, targets, leak, c=args.c, beta=args.beta).model_dump()
        else:
            record = optimize_m(qhat, args.N, targets, leak, c=args.c, beta=args.beta,
                                threads=args.threads).model_dump()
    except InfeasibleStatisticsError as e:
        if args.strict:
            raise
        logger.warning(str(e))
        record = {"d": args.d, "N": args.N, "m": None if args.optimize_m else m, "ell": 0, "rate": 0.0,
                  "flags": ["infeasible_statistics"]}
    _check_strict(args, record["flags"])
    try:
        record["asymptotic_rate"] = asymptotic_rate(qhat, leak)
    except InfeasibleStatisticsError:
        record["asymptotic_rate"] = None
    return render_record(record, args.format or "csv")


def cmd_bounds(args) -> str:
    geom = SamplingGeometry(N=args.N, m=args.m if args.m is not None else args.N // 2, d=args.d)
    report = verify_consistency(_targets(args), geom, c=args.c, beta=args.beta)
    return render_record(report.model_dump(), args.format or "csv")


def cmd_sweep(args) -> str:
    config = load_scenario(args.config)
    df, report = run_sweep(config, threads=args.threads)
    _check_strict(args, [f for flags in df["flags"] for f in flags.split(";") if f])
    fmt = args.format or "csv"
    if fmt == "json":
        payload = {"rows": df.astype(object).where(df.notna(), None).to_dict(orient="records"),
                   "nonmonotonicity": report.model_dump() if report else None}
        return json.dumps(payload, indent=2) + "\n"
    text = render_table(df, fmt)
    if report is not None:
        text += render_report(report, fmt)
    return text


def cmd_simulate(args) -> str:
    channel = parse_channel(args.channel, args.d)
    qhat = parse_noise(args.thresholds, args.d)
    targets = _targets(args)
    leak = LeakageModel.parse(args.leak, args.eps_cor)
    m = args.m if args.m is not None else args.N // 2
    seed = args.seed if args.seed is not None else 0
    records = []
    for r in range(args.repeats):
        run_seed = seed + r
        try:
            run = run_protocol(channel, args.N, m, qhat, targets, leak, run_seed, threads=args.threads)
        except InfeasibleStatisticsError as e:
            if args.strict:
                raise
            logger.warning(f"seed={run_seed}: {e}")
            records.append({"seed": run_seed, "aborted": False, "reasons": "infeasible_statistics",
                            "ell": 0, "rate": 0.0})
            continue
        record = {"seed": run.seed, "aborted": run.aborted, "reasons": ";".join(run.reasons)}
        for j, row in enumerate(run.observed):
            for c in range(1, args.d):
                record[f"q_{j}_{c}"] = row[c]
        record["ell"] = run.result.ell if run.result else 0
        record["rate"] = run.result.rate if run.result else 0.0
        records.append(record)
    aborts = sum(r["aborted"] for r in records)
    logger.info(f"Simulated {args.repeats} runs: {aborts} aborted")
    return render_table(pd.DataFrame(records), args.format or "csv")


def _parse_grid(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad delta grid '{text}': {e}") from e


def cmd_verify_sampling(args) -> str:
    if (args.j is None) != (args.c is None):
        raise ConfigError("--j and --c must be given together")
    m = args.m if args.m is not None else args.N // 2
    seed = args.seed if args.seed is not None else 0
    q = make_word(args.word_family, args.N, args.d, seed)
    deltas = _parse_grid(args.delta_grid)
    if args.j is not None:
        reports = estimate_failure_grid(q, m, args.d, deltas, [(args.j, args.c)], args.trials, seed,
                                        threads=args.threads)
    else:
        pairs = [(j, c) for j in range(args.d + 1) for c in range(1, args.d)]
        reports = estimate_failure_grid(q, m, args.d, deltas, pairs, args.trials, seed, threads=args.threads)
        reports += estimate_failure_grid(q, m, args.d, deltas, None, args.trials, seed, threads=args.threads)
    rows = [{
        "delta": r.delta, "j": "all" if r.j is None else r.j, "c": "all" if r.c is None else r.c,
        "trials": r.trials, "failures": r.failures, "upper99": r.upper_limit,
        "analytic_bound_log": r.analytic_bound_log, "dominated": r.dominated,
    } for r in reports]
    return render_table(pd.DataFrame(rows), args.format or "csv")


def cmd_mub_table(args) -> str:
    rows = [{
        "j": r["j"], "c": r["c"], "labels": format_labels(r["closed_form"]),
        "matches_oracle": r["oracle"] == r["closed_form"],
        "determinism_residual": r["determinism_residual"],
        "completeness_residual": r["completeness_residual"],
    } for r in oracle_outcome_sets(args.d)]
    return render_table(pd.DataFrame(rows), args.format or "text")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=["csv", "json", "text"], default=None)
    common.add_argument("--out", type=Path, default=None)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--strict", action="store_true",
                        help="exit with code 3 when statistics are infeasible")

    security = argparse.ArgumentParser(add_help=False)
    security.add_argument("--eps", type=float, default=1e-14)
    security.add_argument("--eps-sec", type=float, default=1e-12)

    leakage = argparse.ArgumentParser(add_help=False)
    leakage.add_argument("--leak", type=str, default="shannon", help="shannon[:f] or fixed:<bits>")
    leakage.add_argument("--eps-cor", type=float, default=None)

    confidence = argparse.ArgumentParser(add_help=False)
    confidence.add_argument("--c", type=float, default=None)
    confidence.add_argument("--beta", type=float, default=None)

    parser = argparse.ArgumentParser(prog="hdqkd", description="Finite-key analysis for high-dimensional BB84")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keyrate", parents=[common, security, leakage, confidence], help="key length for one scenario")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--noise", type=str, required=True, help="symmetric:<Q> or matrix:<path>")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--m", type=int, default=None, help="test rounds (default N//2)")
    group.add_argument("--optimize-m", action="store_true", help="search m for the highest rate")
    p.set_defaults(func=cmd_keyrate)

    p = sub.add_parser("bounds", parents=[common, security, confidence], help="delta_min and achieved security")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--m", type=int, default=None)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("sweep", parents=[common], help="rate over an N or Q axis from a scenario file")
    p.add_argument("--config", type=Path, required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", parents=[common, security, leakage], help="seeded protocol runs")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--channel", type=str, required=True, help="depolarizing:<Q> or lambda:<path>")
    p.add_argument("--thresholds", type=str, required=True, help="thresholds file, or symmetric:<Q>")
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify-sampling", parents=[common], help="Monte Carlo check of the sampling bounds")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--delta-grid", type=str, default="0.05,0.1,0.2,0.3")
    p.add_argument("--trials", type=int, default=100000)
    p.add_argument("--word-family", choices=WORD_FAMILIES, default="alternating")
    p.add_argument("--j", type=int, default=None)
    p.add_argument("--c", type=int, default=None)
    p.set_defaults(func=cmd_verify_sampling)

    p = sub.add_parser("mub-table", parents=[common], help="outcome sets P_c^j with oracle residuals")
    p.add_argument("--d", type=int, required=True)
    p.set_defaults(func=cmd_mub_table)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        text = args.func(args)
    except (ConfigError, ValidationError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (StrictModeFailure, InfeasibleStatisticsError) as e:
        logger.error(f"Infeasible statistics: {e}")
        return EXIT_INFEASIBLE
    except ValueError as e:
        # domain, dimension and precondition errors are bad inputs
        logger.error(f"Invalid input: {e}")
        return EXIT_CONFIG
    write_output(text, args.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
