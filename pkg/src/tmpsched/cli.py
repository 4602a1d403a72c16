"""Command-line driver.

Exit codes: 0 success, 1 configuration error, 2 infeasible speedup target,
3 enumeration cap exceeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import experiments
from .config import ExperimentConfig, load_config
from .exceptions import CapacityError, InfeasibleTargetError, ParameterError, TmpSchedError
from .stats import correlate, summaries_to_csv

log = logging.getLogger("tmpsched")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_CAPACITY = 0, 1, 2, 3


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _write_rows(path: Path, rows: list[dict], fieldnames: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _resolve(args) -> ExperimentConfig:
    overrides = {"seed": args.seed}
    if args.config:
        return load_config(args.config, **overrides)
    cfg = ExperimentConfig()
    return cfg.replace(**{k: v for k, v in overrides.items() if v is not None})


def cmd_validate_additivity(cfg: ExperimentConfig, out: Path, args) -> None:
    report = experiments.validate_additivity(cfg)
    rows = [{"t": t, "upcast": u, "downcast": d} for t, (u, d) in
            enumerate(zip(report.upcast.values.tolist(), report.downcast.values.tolist()), start=1)]
    _write_rows(out / "gain_curves.csv", rows, ["t", "upcast", "downcast"])
    _write_rows(out / "schedule_errors.csv", report.pairs, ["K", "schedule", "s_up", "s_down", "E", "variance"])
    (out / "correlations.csv").write_text(summaries_to_csv(report.correlation_rows(), ["K", "predictor"]))
    _write_json(out / "additivity.json", report.to_dict())
    pooled = report.pooled["s_up"]
    if pooled is not None:
        log.info("S_up vs E: spearman=%.4f kendall=%.4f", pooled.spearman_rho, pooled.kendall_tau)


def cmd_calibrate(cfg: ExperimentConfig, out: Path, args) -> None:
    report = experiments.calibrate(cfg, full_measure=args.full_measure)
    report.gains.to_csv(out / "gain_profile.csv")
    (out / "schedule.txt").write_text(report.schedule.to_string() + "\n")
    _write_json(out / "calibration.json", report.to_dict())
    for message in report.warnings:
        log.warning(message)
    print(report.schedule.to_string())


def cmd_pareto(cfg: ExperimentConfig, out: Path, args) -> None:
    report = experiments.pareto(cfg, Ks=args.ks, full_measure=args.full_measure)
    _write_rows(out / "pareto.csv", report.rows, ["K", "speedup", "E", "schedule"])
    _write_json(
        out / "pareto.json",
        {"rows": report.rows, "monotone": report.monotone,
         "strictly_decreasing_where_positive": report.strictly_decreasing_where_positive},
    )
    if not report.monotone:
        log.warning("measured error is not monotone in K")


def cmd_mix_models(cfg: ExperimentConfig, out: Path, args) -> None:
    report = experiments.mix_models(cfg)
    _write_json(out / "mix_models.json", report.to_dict())
    print(f"ours {report.ours.to_string()} E={report.error_ours:.6g}")
    print(f"heuristic {report.heuristic.to_string()} E={report.error_heuristic:.6g}")


def cmd_brute_force(cfg: ExperimentConfig, out: Path, args) -> None:
    report = experiments.brute_force(cfg)
    _write_json(out / "brute_force.json", report.to_dict())
    print(f"greedy {report.greedy.to_string()} optimum {report.optimum.to_string()} gap={report.gap:.3g}")


def cmd_stats(args) -> None:
    with open(args.input, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        xs = [float(r[args.x]) for r in rows]
        ys = [float(r[args.y]) for r in rows]
    except KeyError as exc:
        raise ParameterError(f"column {exc} not found in {args.input}") from exc
    summary = correlate(xs, ys)
    text = summary.to_json()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(text + "\n")
    print(text)


COMMANDS = {
    "validate-additivity": cmd_validate_additivity,
    "calibrate": cmd_calibrate,
    "pareto": cmd_pareto,
    "mix-models": cmd_mix_models,
    "brute-force": cmd_brute_force,
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tmpsched", description="Temporal mixed-precision scheduling experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--config", type=Path, help="flat YAML configuration file")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("--full-measure", action="store_true",
                        help="also measure every timestep as a rank-deviation reference")

    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "pareto":
            p.add_argument("--ks", type=_int_list, help="comma-separated K values (default: config or 0..T)")

    p = sub.add_parser("stats", help="correlation summary of two CSV columns")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--out", type=Path)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "stats":
            cmd_stats(args)
            return EXIT_OK
        cfg = _resolve(args).replace(experiment=args.command)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args.out, args)
        cfg.dump(args.out / "resolved_config.yaml")
    except InfeasibleTargetError as exc:
        log.error("%s", exc)
        return EXIT_INFEASIBLE
    except CapacityError as exc:
        log.error("%s", exc)
        return EXIT_CAPACITY
    except (TmpSchedError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
