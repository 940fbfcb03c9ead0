"""Wall-clock latency harness for model forwards."""
from __future__ import annotations

import csv
import io
import re
import time
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np
from threadpoolctl import threadpool_limits

from . import ops
from .model import ModelSpec, forward
from .tensor import make_rng

CSV_COLUMNS = ("target", "batch", "height", "width", "warmup", "iters", "median_ms", "p95_ms")
TIMED_KINDS = ("stem", "block", "head")


@dataclass(frozen=True)
class BenchRow:
    target: str
    batch: int
    height: int
    width: int
    warmup: int
    iters: int
    median_ms: float
    p95_ms: float


@dataclass
class BenchReport:
    rows: list[BenchRow]
    threads: int
    conv_method: str
    model: str = "custom"

    def row(self, target: str) -> BenchRow:
        return next(r for r in self.rows if r.target == target)

    def header(self) -> str:
        return f"# threads={self.threads} conv={self.conv_method} clock=perf_counter model={self.model}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.header() + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.target, r.batch, r.height, r.width, r.warmup, r.iters, f"{r.median_ms:.4f}", f"{r.p95_ms:.4f}"])
        return buf.getvalue()

    def table(self) -> str:
        width = max(len("target"), *(len(r.target) for r in self.rows))
        lines = [self.header(), f"{'target':<{width}}  {'median ms':>10}  {'p95 ms':>10}"]
        lines += [f"{r.target:<{width}}  {r.median_ms:>10.3f}  {r.p95_ms:>10.3f}" for r in self.rows]
        return "\n".join(lines)


def read_csv(text: str) -> BenchReport:
    """Inverse of :meth:`BenchReport.to_csv`."""
    lines = text.splitlines()
    meta = dict(re.findall(r"(\w+)=(.*?)(?= \w+=|$)", lines[0]))
    reader = csv.DictReader(lines[1:])
    types = {f.name: f.type for f in fields(BenchRow)}
    rows = [
        BenchRow(**{k: (v if types[k] == "str" else float(v) if types[k] == "float" else int(v)) for k, v in r.items()})
        for r in reader
    ]
    return BenchReport(rows, int(meta["threads"]), meta["conv"], meta.get("model", "custom"))


def _summary(samples_s: list[float]) -> tuple[float, float]:
    ms = np.asarray(samples_s) * 1e3
    return float(np.median(ms)), float(np.percentile(ms, 95))


def bench_run(
    spec: ModelSpec,
    params: Mapping,
    batch: int = 1,
    size: tuple[int, int] = (224, 224),
    warmup: int = 10,
    iters: int = 50,
    per_block: bool = False,
    threads: int = 1,
    conv_method: str | None = None,
    seed: int = 0,
) -> BenchReport:
    """Time ``iters`` forwards after ``warmup`` untimed ones.

    Without ``per_block`` the report has a single ``model`` row.  With it, the
    forward is instrumented and there is one row for the stem, one per block
    (the stage's patch embedding is charged to its first block) and one for
    the head.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if warmup < 0 or batch < 1 or threads < 1:
        raise ValueError("warmup must be >= 0; batch and threads must be >= 1")
    h, w = size
    x = make_rng(seed).standard_normal((batch, 3, h, w)).astype(np.float32)
    method = conv_method or ops.DEFAULT_CONV_METHOD

    targets: list[str] = []
    per_target: dict[str, list[float]] = {}
    totals: list[float] = []

    def run_once(record: bool):
        marks: list[tuple[str, float]] = []

        def hook(kind, name, value):
            if kind in TIMED_KINDS:
                marks.append((name, time.perf_counter()))

        t0 = time.perf_counter()
        forward(spec, params, x, hook if per_block else None)
        t1 = time.perf_counter()
        if not record:
            return
        totals.append(t1 - t0)
        prev = t0
        for name, t in marks:
            if name not in per_target:
                targets.append(name)
                per_target[name] = []
            per_target[name].append(t - prev)
            prev = t

    with threadpool_limits(limits=threads), ops.conv_method(method):
        for _ in range(warmup):
            run_once(False)
        for _ in range(iters):
            run_once(True)

    def row(target, samples):
        med, p95 = _summary(samples)
        return BenchRow(target, batch, h, w, warmup, iters, med, p95)

    rows = [row(t, per_target[t]) for t in targets] if per_block else [row("model", totals)]
    return BenchReport(rows, threads, method, spec.name)
