"""Run metrics: one CSV row per node per metric, plus a JSON summary."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

METRICS_SCHEMA = "poi-metrics/1"
NETWORK = "network"


@dataclass
class Metrics:
    nodes: dict[int, dict[str, Any]] = field(default_factory=dict)
    network: dict[str, Any] = field(default_factory=dict)

    def node_total(self, metric: str, honest_only: bool = False) -> int:
        return sum(m.get(metric, 0) for m in self.nodes.values() if m["honest"] or not honest_only)

    def rows(self) -> list[tuple[str, str, str, str]]:
        out = [(METRICS_SCHEMA, NETWORK, k, _fmt(v)) for k, v in self.network.items()]
        for node_id, values in self.nodes.items():
            out += [(METRICS_SCHEMA, str(node_id), k, _fmt(v)) for k, v in values.items()]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["schema", "node", "metric", "value"])
        w.writerows(self.rows())
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"schema": METRICS_SCHEMA, "network": self.network,
               "nodes": {str(k): v for k, v in self.nodes.items()}}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, csv_path, json_path=None) -> None:
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv())
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        json_path.write_text(self.to_json())


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)
