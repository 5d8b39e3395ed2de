"""Throughput measurement for the staged extractor and the JSON baseline."""

from __future__ import annotations

import os
import platform
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import torch

from .baseline import LMJson
from .corpus import DocumentRecord
from .pipeline import TeleSEE


def hardware_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "torch_threads": torch.get_num_threads(),
        "cpu_count": os.cpu_count(),
    }


def _one(system, text: str, batching: str) -> tuple[float, int, tuple[int, int] | None]:
    t0 = time.perf_counter()
    if isinstance(system, TeleSEE):
        _, trace = system.extract(text, batching)
        sizes = (trace.prompts[2], trace.prompts[3])
        n_out = sum(trace.output_tokens.values())
    else:
        n_out, sizes = system.extract(text).output_tokens, None
    return time.perf_counter() - t0, n_out, sizes


def _run_once(system, records: Sequence[DocumentRecord], batching: str,
              jobs: int = 1) -> tuple[float, list[float], dict]:
    start = time.perf_counter()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda r: _one(system, r.text, batching), records))
    else:
        rows = [_one(system, r.text, batching) for r in records]
    elapsed = time.perf_counter() - start
    sizes = [s for _, _, s in rows if s is not None]
    batch_sizes = {"stage2": [s[0] for s in sizes], "stage3": [s[1] for s in sizes]}
    return elapsed, [r[0] for r in rows], {"batch_sizes": batch_sizes, "output_tokens": [r[1] for r in rows]}


def bench_throughput(
    system: TeleSEE | LMJson,
    records: Sequence[DocumentRecord],
    repetitions: int = 5,
    batching: str = "parallel",
    warmup: int = 1,
    jobs: int = 1,
) -> dict:
    """Median samples/sec over repetitions, with per-document latency summary.

    ``jobs`` > 1 extracts that many documents concurrently.
    """
    if not records:
        raise ValueError("cannot benchmark an empty corpus")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    name = "telesee" if isinstance(system, TeleSEE) else "lm-json"
    for rec in records[:warmup]:
        if isinstance(system, TeleSEE):
            system.extract(rec.text, batching)
        else:
            system.extract(rec.text)
    rates, all_lat = [], []
    info: dict = {}
    for _ in range(repetitions):
        elapsed, lat, info = _run_once(system, records, batching, jobs)
        rates.append(len(records) / elapsed)
        all_lat.extend(lat)
    all_lat.sort()
    sizes = info["batch_sizes"]
    return {
        "system": name,
        "batching": batching if name == "telesee" else "single",
        "documents": len(records),
        "repetitions": repetitions,
        "jobs": jobs,
        "samples_per_sec": statistics.median(rates),
        "samples_per_sec_runs": rates,
        "spread": (max(rates) - min(rates)) / statistics.median(rates),
        "latency_sec": {
            "mean": statistics.fmean(all_lat),
            "median": statistics.median(all_lat),
            "p90": all_lat[min(len(all_lat) - 1, int(0.9 * len(all_lat)))],
            "max": all_lat[-1],
        },
        "mean_output_tokens": statistics.fmean(info["output_tokens"]),
        "mean_batch_size": {k: (statistics.fmean(v) if v else None) for k, v in sizes.items()},
        "n_params": system.model.n_params,
        "hardware": hardware_descriptor(),
    }
