"""Plot-ready tables from eval and bench JSON outputs (no rendering)."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from pathlib import Path
from typing import Sequence

from .metric import APPROX, EXACT, MULTIPROP, metric_correlation
from .schema import SchemaMismatchError


def _load(paths: Sequence[str | Path]) -> list[dict]:
    out = []
    for p in paths:
        with open(p, encoding="utf-8") as f:
            out.append(json.load(f))
    return out


def build_tables(eval_reports: Sequence[dict], bench_reports: Sequence[dict]) -> dict[str, list[dict]]:
    """Return ``scores``, ``efficiency``, ``correlation``, ``correlation_points`` and ``radar`` rows."""
    if not eval_reports and not bench_reports:
        raise ValueError("report needs at least one eval or bench file")
    versions = {r.get("schema_version") for r in list(eval_reports) + list(bench_reports)} - {None}
    if len(versions) > 1:
        raise SchemaMismatchError(f"inputs mix schema versions: {sorted(versions)}")

    scores: dict[str, dict[str, float]] = defaultdict(dict)
    radar: dict[str, dict[str, float]] = {}
    for rep in eval_reports:
        system = rep.get("system", "system")
        kind = rep["mode"]["kind"]
        scores[system][kind] = rep["mean_delta"]
        if kind == MULTIPROP or system not in radar:
            radar[system] = rep.get("per_attribute", {})

    tables: dict[str, list[dict]] = {}
    tables["scores"] = [
        {"system": s, "exact": v.get(EXACT), "approx": v.get(APPROX), "multiprop": v.get(MULTIPROP)}
        for s, v in scores.items()
    ]
    tables["efficiency"] = [
        {
            "system": b.get("label", b["system"]),
            "samples_per_sec": b["samples_per_sec"],
            "multiprop": b.get("multiprop", scores.get(b.get("label", b["system"]), {}).get(MULTIPROP)),
        }
        for b in bench_reports
    ]
    complete = [v for v in scores.values() if all(k in v for k in (EXACT, APPROX, MULTIPROP))]
    tables["correlation"], tables["correlation_points"] = [], []
    if len(complete) >= 2:
        for corr in metric_correlation(complete):
            tables["correlation"].append({
                "x": corr.x_label, "y": corr.y_label, "n": len(corr.points),
                "pearson": corr.pearson, "spearman": corr.spearman, "degenerate": corr.degenerate,
            })
            for x, y in corr.points:
                tables["correlation_points"].append({"x_label": corr.x_label, "x": x, "y_label": corr.y_label, "y": y})
    tables["radar"] = [
        {"system": s, "attribute": k, "score": v} for s, attrs in radar.items() for k, v in attrs.items()
    ]
    return tables


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def report(eval_paths: Sequence[str | Path], bench_paths: Sequence[str | Path]) -> dict[str, list[dict]]:
    return build_tables(_load(eval_paths), _load(bench_paths))
