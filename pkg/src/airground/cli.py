"""Command line entry point: ``airground run|batch|ablate``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError
from .sim import ScenarioConfig, ablate, ablation_csv, run_batch, run_scenario

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="airground", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and dump its logs")
    run.add_argument("--config", type=Path)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", type=Path, default=Path("run_out"))

    batch = sub.add_parser("batch", help="run seeded trials and write CSV results")
    batch.add_argument("--config", type=Path)
    batch.add_argument("--trials", type=int, required=True)
    batch.add_argument("--seed-base", type=int, default=0)
    batch.add_argument("--workers", type=int, default=1)
    batch.add_argument("--out", type=Path, default=None)

    abl = sub.add_parser("ablate", help="cross-product of settings, one batch per cell")
    abl.add_argument("--config", type=Path)
    abl.add_argument("--axes", required=True,
                     help='e.g. "completion=identity,oracle;energy_weight=0,1"')
    abl.add_argument("--trials", type=int, default=10)
    abl.add_argument("--seed-base", type=int, default=0)
    abl.add_argument("--workers", type=int, default=1)
    abl.add_argument("--out", type=Path, default=None)
    return p


def _load(path: Optional[Path]) -> ScenarioConfig:
    if path is None:
        return ScenarioConfig()
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return ScenarioConfig.from_json(path)


def _emit(text: str, out: Optional[Path], name: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def cmd_run(args) -> int:
    config = _load(args.config)
    result = run_scenario(config, args.seed)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(json.dumps(result.to_dict(), indent=2))
    with open(out / "replans.jsonl", "w") as fh:
        for entry in result.replan_log:
            fh.write(json.dumps(entry) + "\n")
    with open(out / "path.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "z", "mode"])
        w.writerows(result.trajectory_log)
    if result.final_trajectory is not None:
        (out / "trajectory.json").write_text(result.final_trajectory.to_json())
    if result.final_map is not None:
        result.final_map.dump(out / "map")
    print(json.dumps({"seed": result.seed, "success": result.success,
                      "moving_time": round(result.moving_time, 3),
                      "collisions": len(result.collisions), "out": str(out)}))
    return EXIT_OK


def cmd_batch(args) -> int:
    config = _load(args.config)
    report = run_batch(config, args.trials, args.seed_base, workers=args.workers)
    _emit(report.results_csv(), args.out, "results.csv")
    if args.out is not None:
        _emit(report.timings_csv(), args.out, "timings.csv")
        _emit(json.dumps(report.summary(), indent=2), args.out, "summary.json")
    print(json.dumps(report.summary()), file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load(args.config)
    if args.trials < 1:
        raise ConfigError("trials must be positive")
    cells = ablate(config, args.axes, args.trials, args.seed_base, workers=args.workers)
    _emit(ablation_csv(cells), args.out, "ablation.csv")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    handler = {"run": cmd_run, "batch": cmd_batch, "ablate": cmd_ablate}[args.command]
    try:
        return handler(args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
