"""Cost-versus-frames benchmark for one layer of each attention method.

Methods:

* ``full``: attention over the whole video as one sequence,
* ``per-frame``: attention within each frame,
* ``divide``: windowed attention plus the SSM forwarding layer and SeqMod.

Each row records the forward wall-clock (median of ``repeats`` runs, pinned
to one BLAS thread), the high-water mark of bytes allocated during one
forward (tracemalloc, which sees numpy buffers) and the MAC count reported
by :class:`FlopMeter`. Cells whose attention score buffers would exceed
``memory_limit`` bytes are not run and are recorded with ``oom=1``.
"""

from __future__ import annotations

import contextlib
import csv
import ctypes
import ctypes.util
import io
import math
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from moma import attention as attn
from moma.attention import VideoTensor, WindowSpec
from moma.core import rng as rngs
from moma.core.tensor import FlopMeter, Tensor
from moma.errors import ConfigError
from moma.fusion import seqmod, ModulationPair
from moma.ssm import ScanPlan, init_ssm_params, ssm_flops, ssm_forward

METHODS = ("full", "per-frame", "divide")
ALIASES = {"full-attn": "full", "per-frame-attn": "per-frame", "frame": "per-frame",
           "divide+modulate": "divide", "moma": "divide"}
SCHEMA = "# moma-bench v1"
COLUMNS = ("method", "frames", "tokens", "flops", "time_s", "peak_bytes", "oom")


def canonical_method(name: str) -> str:
    name = ALIASES.get(name.strip(), name.strip())
    if name not in METHODS:
        raise ConfigError(f"unknown bench method {name!r}; valid: {', '.join(METHODS)}")
    return name


@dataclass
class BenchSetup:
    grid: int = 8           # H = W
    dim: int = 16
    heads: int = 4
    window: str = "4x4"
    state: int = 8
    hidden: int = 0         # 0 means 2 * dim
    repeats: int = 3
    memory_limit: int = 2 * 1024 ** 3
    seed: int = 0


@dataclass
class BenchRow:
    method: str
    frames: int
    tokens: int
    flops: int
    time_s: float
    peak_bytes: int
    oom: bool = False


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def method_rows(self, method: str, include_oom: bool = False) -> list[BenchRow]:
        return [r for r in self.rows if r.method == method and (include_oom or not r.oom)]

    def slope(self, method: str, column: str = "time_s") -> float:
        """Least-squares slope of log(column) against log(frames)."""
        rows = self.method_rows(method)
        if len(rows) < 2:
            return float("nan")
        x = np.log([r.frames for r in rows])
        y = np.log([float(getattr(r, column)) for r in rows])
        return float(np.polyfit(x, y, 1)[0])

    def to_csv(self, include_time: bool = True) -> str:
        """CSV text; ``include_time=False`` blanks the wall-clock column so output is reproducible."""
        buf = io.StringIO()
        buf.write(SCHEMA + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            t = "" if (r.oom or not include_time) else f"{r.time_s:.6g}"
            w.writerow([r.method, r.frames, r.tokens, r.flops, t, "" if r.oom else r.peak_bytes, int(r.oom)])
        return buf.getvalue()


def expected_flops(method: str, T: int, setup: BenchSetup) -> int:
    """Closed-form MACs of one layer forward."""
    H = W = setup.grid
    C = setup.dim
    tokens = T * H * W
    mode = {"full": WindowSpec.video(), "per-frame": WindowSpec.frame()}.get(method) or WindowSpec.parse(setup.window)
    total = attn.count_flops(H, W, T, C, mode).total + attn.ffn_flops(tokens, C)
    if method == "divide":
        E = setup.hidden or 2 * C
        total += ssm_flops(tokens, C, E, setup.state, len(ScanPlan.default()))
    return total


def _score_bytes(method: str, T: int, setup: BenchSetup) -> int:
    H = W = setup.grid
    spec = {"full": WindowSpec.video(), "per-frame": WindowSpec.frame()}.get(method) or WindowSpec.parse(setup.window)
    wt, wh, ww = spec.resolve(T, H, W)
    n = wt * wh * ww
    return 8 * setup.heads * (T * H * W // n) * n * n


class _Layer:
    def __init__(self, method: str, T: int, setup: BenchSetup):
        C = setup.dim
        self.method = method
        self.grid = (T, setup.grid, setup.grid)
        self.weights = attn.init_attention_weights(C, setup.heads, rngs.stream(setup.seed, "bench", "layer"))
        self.spec = {"full": WindowSpec.video(), "per-frame": WindowSpec.frame()}.get(method) \
            or WindowSpec.parse(setup.window)
        self.plan = ScanPlan.default()
        if method == "divide":
            self.ssm = init_ssm_params(C, rngs.stream(setup.seed, "bench", "ssm"), hidden=setup.hidden or None,
                                       state=setup.state, directions=len(self.plan))
            # non-zero output projection so the modulation path does real work
            self.ssm.out_w.data = rngs.stream(setup.seed, "bench", "out").normal(0.0, 0.02, self.ssm.out_w.shape)
        x = rngs.stream(setup.seed, "bench", "input", T).normal(size=(T * setup.grid * setup.grid, C))
        self.input = VideoTensor(Tensor(x), *self.grid)

    def __call__(self):
        v = self.input
        a = attn.attend(v, self.weights, self.spec)
        x = a.data
        if self.method == "divide":
            y1, y2 = ssm_forward(x, self.ssm, self.plan, self.grid)
            x = seqmod(x, ModulationPair(y1, y2))
        return attn.ffn(x, self.weights)


def _prepare(method: str, T: int, setup: BenchSetup):
    """Returns (row without timing, layer) or (OOM row, None)."""
    method = canonical_method(method)
    tokens = T * setup.grid * setup.grid
    flops = expected_flops(method, T, setup)
    oom = BenchRow(method, T, tokens, flops, math.nan, 0, oom=True)
    if _score_bytes(method, T, setup) > setup.memory_limit:
        return oom, None
    try:
        layer = _Layer(method, T, setup)
        with FlopMeter() as meter:
            layer()
        # min over traced runs drops one-off interpreter allocations from first-time code paths
        peaks = []
        tracemalloc.start()
        try:
            for _ in range(3):
                tracemalloc.reset_peak()
                base = tracemalloc.get_traced_memory()[0]
                layer()
                peaks.append(tracemalloc.get_traced_memory()[1] - base)
        finally:
            tracemalloc.stop()
    except MemoryError:
        return oom, None
    return BenchRow(method, T, tokens, meter.macs, math.nan, min(peaks)), layer


def _time_rows(prepared, repeats: int) -> None:
    """Median wall-clock per row; repeats run round-robin so machine drift spreads over all sizes."""
    live = [(row, layer) for row, layer in prepared if layer is not None]
    times = {id(row): [] for row, _ in live}
    for _ in range(max(repeats, 1)):
        for row, layer in live:
            t0 = time.perf_counter()
            layer()
            times[id(row)].append(time.perf_counter() - t0)
    for row, _ in live:
        row.time_s = statistics.median(times[id(row)])


def measure(method: str, T: int, setup: BenchSetup) -> BenchRow:
    prepared = [_prepare(method, T, setup)]
    _time_rows(prepared, setup.repeats)
    return prepared[0][0]


_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


@contextlib.contextmanager
def steady_allocator(threshold: int = 1 << 30):
    """Keep large buffers on the glibc heap so timings do not depend on allocation history.

    glibc adapts its mmap threshold as blocks are freed, so the same forward
    can run with or without fresh page faults depending on what ran before.
    Fixing both thresholds removes that drift. No-op where mallopt is absent.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"))
        mallopt = libc.mallopt
    except (OSError, AttributeError, TypeError):
        yield
        return
    mallopt(_M_MMAP_THRESHOLD, threshold)
    mallopt(_M_TRIM_THRESHOLD, threshold)
    yield


def bench_scaling(methods, frames, setup: BenchSetup | None = None) -> BenchReport:
    setup = setup or BenchSetup()
    frames = [int(t) for t in frames]
    if frames != sorted(frames):
        raise ConfigError(f"frame list must be ascending, got {frames}")
    report = BenchReport()
    with threadpool_limits(limits=1), steady_allocator():
        for m in methods:
            prepared = [_prepare(m, T, setup) for T in frames]
            _time_rows(prepared, setup.repeats)
            report.rows.extend(row for row, _ in prepared)
    return report
