"""Run reports: per-query results plus aggregate metrics.

Aggregates are rates in [0, 1] reported as percentages with two
decimals. The JSON document is deterministic except for the wall-clock
field, which is excluded from byte-identity comparisons.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from .datasets import TripletRecord
from .metrics import MAP_KS, RECALL_KS, RECALL_SUBSET_KS, map_at_k, mean, recall_at_k, recall_subset_at_k
from .pipeline import QueryOutcome


def _pct(rate: float) -> float:
    return round(100.0 * rate, 2)


@dataclass
class RunReport:
    config: dict[str, Any]
    queries: list[dict[str, Any]]
    aggregates: dict[str, Any]
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        doc = {
            "config": self.config,
            "queries": self.queries,
            "aggregates": dict(self.aggregates),
        }
        doc["aggregates"]["wall_clock_seconds"] = round(self.wall_clock_seconds, 3)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def to_text_table(self) -> str:
        agg = self.aggregates
        lines = ["metric                value", "-" * 28]
        for key in sorted(agg):
            if key in ("n_queries", "n_failed"):
                continue
            value = agg[key]
            if isinstance(value, float):
                lines.append(f"{key:<20} {value:>8.2f}")
            else:
                lines.append(f"{key:<20} {value!s:>8}")
        lines.append(f"{'n_queries':<20} {agg.get('n_queries', 0):>8}")
        lines.append(f"{'n_failed':<20} {agg.get('n_failed', 0):>8}")
        return "\n".join(lines)


def build_report(
    outcomes: Sequence[QueryOutcome],
    records: Sequence[TripletRecord],
    config_summary: dict[str, Any],
    *,
    wall_clock_seconds: float = 0.0,
) -> RunReport:
    """Score outcomes against their records and assemble the report."""
    by_id: Mapping[str, TripletRecord] = {r.query_id: r for r in records}
    queries: list[dict[str, Any]] = []
    recall: dict[int, list[float]] = {k: [] for k in RECALL_KS}
    recall_subset: dict[int, list[float]] = {k: [] for k in RECALL_SUBSET_KS}
    ap: dict[int, list[float]] = {k: [] for k in MAP_KS}
    fused_ap: dict[int, list[float]] = {k: [] for k in MAP_KS}
    tokens: list[int] = []
    n_failed = 0

    for outcome in outcomes:
        record = by_id.get(outcome.query_id)
        entry: dict[str, Any] = {
            "query_id": outcome.query_id,
            "final_ranking": list(outcome.final_ids),
            "selected": list(outcome.selected),
            "strategy": outcome.strategy,
            "stages_used": outcome.stages_used,
            "tokens_out": outcome.tokens_out,
            "weights": [round(w, 6) for w in outcome.weights],
            "error": outcome.error,
        }
        if outcome.error:
            n_failed += 1
            queries.append(entry)
            continue
        tokens.append(outcome.tokens_out)
        if record is not None and record.targets:
            targets = record.targets
            entry["metrics"] = {}
            for k in RECALL_KS:
                value = recall_at_k(outcome.final_ids, targets, k)
                recall[k].append(value)
                entry["metrics"][f"recall_at_{k}"] = value
            for k in MAP_KS:
                value = map_at_k(outcome.final_ids, targets, k)
                ap[k].append(value)
                entry["metrics"][f"ap_at_{k}"] = value
                fused_ap[k].append(map_at_k(outcome.buffer_ids, targets, k))
            if record.subset:
                for k in RECALL_SUBSET_KS:
                    value = recall_subset_at_k(outcome.final_ids, targets, record.subset, k)
                    recall_subset[k].append(value)
                    entry["metrics"][f"recall_subset_at_{k}"] = value
        queries.append(entry)

    aggregates: dict[str, Any] = {
        "n_queries": len(outcomes),
        "n_failed": n_failed,
        "mean_tokens_out": round(mean([float(t) for t in tokens]), 2),
    }
    for k in RECALL_KS:
        if recall[k]:
            aggregates[f"recall_at_{k}"] = _pct(mean(recall[k]))
    for k in RECALL_SUBSET_KS:
        if recall_subset[k]:
            aggregates[f"recall_subset_at_{k}"] = _pct(mean(recall_subset[k]))
    for k in MAP_KS:
        if ap[k]:
            aggregates[f"map_at_{k}"] = _pct(mean(ap[k]))
            aggregates[f"fused_map_at_{k}"] = _pct(mean(fused_ap[k]))
    return RunReport(
        config=config_summary,
        queries=queries,
        aggregates=aggregates,
        wall_clock_seconds=wall_clock_seconds,
    )


def sweep_csv(rows: Sequence[Mapping[str, Any]]) -> str:
    """CSV for the buffer-size sweep: k, mAP@5..50, mean output tokens."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["k", "map_at_5", "map_at_10", "map_at_25", "map_at_50", "mean_tokens"])
    for row in rows:
        writer.writerow(
            [
                row["k"],
                f"{row['map_at_5']:.2f}",
                f"{row['map_at_10']:.2f}",
                f"{row['map_at_25']:.2f}",
                f"{row['map_at_50']:.2f}",
                f"{row['mean_tokens']:.2f}",
            ]
        )
    return buf.getvalue()
