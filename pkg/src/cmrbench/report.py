"""Benchmark result container and its on-disk forms.

A MetricReport is an append-only list of rows, each keyed by evaluation
axis, generator, setup and metric name, plus the provenance needed to trace
every number back to a config hash and checkpoint hashes. Emission always
writes CSV and JSON; the CSV holds rows only, so two runs with equal
config and seed produce byte-identical CSVs (timestamps live in the JSON
provenance block). An emission manifest lists every file written.
"""

import csv
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import ConfigError

AXES = ("fidelity", "shape", "utility", "privacy")
CSV_COLUMNS = ("axis", "generator", "setup", "metric", "value", "uncertainty")


@dataclass(frozen=True)
class MetricRow:
    axis: str
    generator: str
    setup: str
    metric: str
    value: float
    uncertainty: Optional[float] = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {AXES}, got {self.axis!r}")
        if not self.metric:
            raise ConfigError("metric name must be non-empty")
        object.__setattr__(self, "value", float(self.value))
        if self.uncertainty is not None:
            object.__setattr__(self, "uncertainty", float(self.uncertainty))


class MetricReport:
    """Append-only metric rows plus run provenance."""

    def __init__(self, provenance: Optional[dict] = None):
        self.provenance = dict(provenance or {})
        self.provenance.setdefault("created_at", time.strftime("%Y-%m-%dT%H:%M:%S"))
        self._rows: list[MetricRow] = []

    @property
    def rows(self) -> tuple:
        return tuple(self._rows)

    def add(self, axis, generator, setup, metric, value, uncertainty=None) -> MetricRow:
        row = MetricRow(axis, generator, setup, metric, value, uncertainty)
        self._rows.append(row)
        return row

    def filter(self, axis=None, generator=None, setup=None, metric=None) -> list:
        out = []
        for row in self._rows:
            if axis is not None and row.axis != axis:
                continue
            if generator is not None and row.generator != generator:
                continue
            if setup is not None and row.setup != setup:
                continue
            if metric is not None and row.metric != metric:
                continue
            out.append(row)
        return out

    def value(self, axis, generator, setup, metric) -> float:
        hits = self.filter(axis, generator, setup, metric)
        if len(hits) != 1:
            raise KeyError(
                f"{len(hits)} rows match ({axis}, {generator}, {setup}, {metric})"
            )
        return hits[0].value

    def __eq__(self, other) -> bool:
        """Equality of results: rows and hash provenance; timestamps excluded."""
        if not isinstance(other, MetricReport):
            return NotImplemented

        def key(report):
            prov = {k: v for k, v in report.provenance.items() if k != "created_at"}
            return (report.rows, json.dumps(prov, sort_keys=True, default=str))

        a, b = key(self), key(other)
        if len(self.rows) != len(other.rows) or a[1] != b[1]:
            return False
        for ra, rb in zip(self.rows, other.rows):
            same_value = ra.value == rb.value or (
                math.isnan(ra.value) and math.isnan(rb.value)
            )
            if not same_value or (ra.axis, ra.generator, ra.setup, ra.metric, ra.uncertainty) != (
                rb.axis, rb.generator, rb.setup, rb.metric, rb.uncertainty
            ):
                return False
        return True

    # --- persistence ------------------------------------------------------

    def save_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in self._rows:
                writer.writerow(
                    [
                        row.axis,
                        row.generator,
                        row.setup,
                        row.metric,
                        repr(row.value),
                        "" if row.uncertainty is None else repr(row.uncertainty),
                    ]
                )
        return path

    def to_json_dict(self) -> dict:
        return {
            "provenance": json.loads(json.dumps(self.provenance, default=str)),
            "rows": [
                {
                    "axis": row.axis,
                    "generator": row.generator,
                    "setup": row.setup,
                    "metric": row.metric,
                    "value": row.value,
                    "uncertainty": row.uncertainty,
                }
                for row in self._rows
            ],
        }

    def save_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(self.to_json_dict(), sort_keys=True, indent=1) + "\n",
            encoding="utf-8",
        )
        return path

    @classmethod
    def load_json(cls, path) -> "MetricReport":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        report = cls(payload["provenance"])
        for row in payload["rows"]:
            report.add(
                row["axis"],
                row["generator"],
                row["setup"],
                row["metric"],
                row["value"],
                row["uncertainty"],
            )
        return report


def emit_report(report: MetricReport, out_dir, figures_payload: Optional[dict] = None) -> dict:
    """Write CSV + JSON (+ figures when a payload is given); return the manifest.

    ``figures_payload`` is the optional dict produced during the pipeline run
    (sample grids, denoising snapshots, shape summaries) that the figure
    renderers consume; rows alone cannot regenerate images.
    """
    if not report.rows:
        raise ConfigError("cannot emit an empty report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = [
        report.save_csv(out_dir / "metrics.csv"),
        report.save_json(out_dir / "metrics.json"),
    ]
    if figures_payload:
        from .figures import render_figures

        files += render_figures(report, figures_payload, out_dir)
    manifest = {
        "config_hash": report.provenance.get("config_hash"),
        "files": sorted(p.name for p in files),
        "row_count": len(report.rows),
    }
    (out_dir / "report_manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    return manifest
