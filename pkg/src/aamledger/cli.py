"""Command line: ``aamledger run|validate|replay``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .grid import GridViolation
from .sim.metrics import emit_metrics
from .sim.replay import replay_files
from .sim.runner import EXIT_SCENARIO, run
from .sim.scenario import ScenarioError, load_scenario


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aamledger", description="Distributed airspace ledger simulator")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario and write its outputs")
    r.add_argument("scenario", type=Path)
    r.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    r.add_argument("--out", type=Path, default=None, help="output directory (default runs/<scenario>)")
    v = sub.add_parser("validate", help="parse and check a scenario without running it")
    v.add_argument("scenario", type=Path)
    x = sub.add_parser("replay", help="re-verify a chain export offline")
    x.add_argument("chain", type=Path)
    x.add_argument("--journal", type=Path, default=None,
                   help="token journal to replay (default: journal.ndjson next to the export)")
    return p


def _load(path: Path):
    try:
        return load_scenario(path)
    except (ScenarioError, GridViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None


def cmd_run(args) -> int:
    cfg = _load(args.scenario)
    if cfg is None:
        return EXIT_SCENARIO
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    report = run(cfg)
    out = args.out or Path("runs") / args.scenario.stem
    emit_metrics(report, out)
    for oid, status in report.ovc_outcomes.items():
        print(f"ovc {oid}: {status}")
    for rid, info in report.reports.items():
        print(f"report {rid}: {info['status']} rebate={info['rebate']}")
    for name, ok in report.checks.items():
        print(f"check {name}: {'ok' if ok else 'FAILED'}")
    print(f"outputs written to {out}")
    return report.exit_code


def cmd_validate(args) -> int:
    cfg = _load(args.scenario)
    if cfg is None:
        return EXIT_SCENARIO
    print(f"ok: {len(cfg.nodes)} nodes, {len(cfg.operators)} operators, {len(cfg.stations)} stations, "
          f"{len(cfg.vehicles)} vehicles, mode {cfg.consensus.mode}")
    return 0


def cmd_replay(args) -> int:
    try:
        res = replay_files(args.chain, args.journal)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    print(f"blocks: {res.blocks}")
    for thread, height in res.finalized.items():
        print(f"finalized {thread}: height {height}")
    print(f"endorsed: {len(res.endorsed)}, demonstrated: {len(res.demonstrated)}")
    for cat, detail in res.problems:
        print(f"{cat}: {detail}", file=sys.stderr)
    print("replay ok" if res.ok else "replay FAILED")
    return res.exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    return {"run": cmd_run, "validate": cmd_validate, "replay": cmd_replay}[args.command](args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
