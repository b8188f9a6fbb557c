"""Run outputs: metrics summary, event log, token journal, chain export.

Event log lines are ``{"seq", "t", "kind", "data"}`` with ``data`` keys
sorted, so equal runs give byte-equal files.
"""

from __future__ import annotations

import json
from pathlib import Path

from .runner import RunReport

FILES = ("metrics.json", "events.ndjson", "journal.ndjson", "chain.bin")


def _ndjson(rows) -> str:
    return "".join(r + "\n" for r in rows)


def emit_metrics(report: RunReport, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in FILES}
    paths["metrics.json"].write_text(json.dumps(report.summary(), indent=2) + "\n")
    paths["events.ndjson"].write_text(
        _ndjson(json.dumps(e, separators=(",", ":")) for e in report.events))
    paths["journal.ndjson"].write_text(_ndjson(report.journal))
    paths["chain.bin"].write_bytes(report.chain_export)
    return paths
