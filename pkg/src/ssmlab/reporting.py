"""Experiment reports: deterministic payloads, CSV tables, text rendering.

A report's payload (config, rows, notes) serializes byte-identically for
identical configs and seed sets; wall-clock timestamps and code version live
in a separate provenance block.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

__all__ = ["ExperimentReport", "render_text", "rows_to_csv", "load_report"]


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    derived: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def payload(self) -> dict:
        return {"experiment": self.experiment, "config": _jsonable(self.config),
                "rows": _jsonable(self.rows), "notes": list(self.notes),
                "derived": _jsonable(self.derived)}

    def payload_json(self) -> str:
        return json.dumps(self.payload(), sort_keys=True)

    def finalize_provenance(self, started: float | None = None) -> None:
        from . import __version__
        self.provenance = {
            "code_version": __version__,
            "config_hash": hashlib.sha256(
                json.dumps(_jsonable(self.config), sort_keys=True).encode()).hexdigest(),
            "started": started,
            "finished": time.time(),
        }

    def save(self, path) -> None:
        doc = {"payload": self.payload(), "provenance": self.provenance}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)
            fh.write("\n")


def load_report(path) -> ExperimentReport:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    payload = doc["payload"]
    return ExperimentReport(experiment=payload["experiment"], config=payload["config"],
                            rows=payload["rows"], notes=payload["notes"],
                            derived=payload.get("derived", {}),
                            provenance=doc.get("provenance", {}))


def rows_to_csv(rows, path) -> None:
    """One CSV per table; columns follow first-row order plus sorted extras."""
    if not rows:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("")
        return
    cols = list(rows[0].keys())
    extra = sorted({k for r in rows for k in r} - set(cols))
    cols += extra
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([_fmt(r.get(c, "")) for c in cols])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _cell(v):
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (np.floating,)):
        return f"{float(v):.6g}"
    return str(v)


def render_text(report: ExperimentReport) -> str:
    """Aligned text table for eyeball comparison against the source tables."""
    lines = [f"experiment: {report.experiment}"]
    for note in report.notes:
        lines.append(f"note: {note}")
    rows = report.rows
    if rows:
        cols = list(rows[0].keys())
        extra = sorted({k for r in rows for k in r} - set(cols))
        cols += extra
        table = [[_cell(r.get(c, "")) for c in cols] for r in rows]
        widths = [max(len(c), *(len(t[i]) for t in table)) for i, c in enumerate(cols)]
        header = "  ".join(c.ljust(w) for c, w in zip(cols, widths))
        lines.append(header)
        lines.append("-" * len(header))
        for t in table:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(t, widths)))
    return "\n".join(lines) + "\n"
