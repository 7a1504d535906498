"""Frozen transformer primitives and window-partitioned (Divide) attention.

Token grids are stored flat in (t, h, w) raster order, i.e. token index
``(t * H + h) * W + w``, with an optional leading batch axis. Windows are
enumerated in raster order over (window-t, window-row, window-col), and the
tokens inside a window in raster order over (t, h, w).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, fields

import numpy as np

from moma.core import ops
from moma.core.tensor import Tensor
from moma.errors import ConfigError, DimensionError, WindowError


@dataclass(frozen=True)
class VideoTensor:
    """Token features ``data`` of shape (..., T*H*W, C) over a T x H x W grid."""

    data: Tensor
    T: int
    H: int
    W: int

    def __post_init__(self):
        if self.data.ndim < 2 or self.data.shape[-2] != self.T * self.H * self.W:
            raise DimensionError(
                f"token axis {self.data.shape} does not match grid T={self.T}, H={self.H}, W={self.W}")

    @property
    def C(self) -> int:
        return self.data.shape[-1]

    @property
    def grid(self) -> tuple[int, int, int]:
        return (self.T, self.H, self.W)

    def with_data(self, data: Tensor) -> VideoTensor:
        return VideoTensor(data, self.T, self.H, self.W)


@dataclass(frozen=True)
class WindowSpec:
    """Attention window shape.

    ``kind`` is ``"2d"`` (w x w per frame), ``"3d"`` (wt x wh x ww), ``"frame"``
    (one window per whole frame) or ``"video"`` (a single window spanning the
    full spatiotemporal grid).
    """

    kind: str
    extent: tuple[int, ...] = ()

    @classmethod
    def square(cls, w: int) -> WindowSpec:
        return cls("2d", (w,))

    @classmethod
    def cube(cls, wt: int, wh: int, ww: int) -> WindowSpec:
        return cls("3d", (wt, wh, ww))

    @classmethod
    def frame(cls) -> WindowSpec:
        return cls("frame")

    @classmethod
    def video(cls) -> WindowSpec:
        return cls("video")

    @classmethod
    def parse(cls, text: str) -> WindowSpec:
        """Accepts ``"frame"``, ``"video"``, ``"4"``, ``"4x4"`` or ``"4x4x4"``."""
        s = text.strip().lower()
        if s in ("frame", "full"):
            return cls.frame()
        if s == "video":
            return cls.video()
        parts = re.split(r"\s*[x×]\s*", s)
        try:
            nums = [int(p) for p in parts]
        except ValueError:
            raise ConfigError(f"bad window spec {text!r}") from None
        if any(n < 1 for n in nums):
            raise ConfigError(f"window extents must be positive: {text!r}")
        if len(nums) == 1 or (len(nums) == 2 and nums[0] == nums[1]):
            return cls.square(nums[0])
        if len(nums) == 3:
            return cls.cube(*nums)
        raise ConfigError(f"bad window spec {text!r}")

    def render(self) -> str:
        if self.kind in ("frame", "video"):
            return self.kind
        if self.kind == "2d":
            return f"{self.extent[0]}x{self.extent[0]}"
        return "x".join(str(e) for e in self.extent)

    def resolve(self, T: int, H: int, W: int) -> tuple[int, int, int]:
        """Window extents (wt, wh, ww) on a concrete grid, validating divisibility."""
        if self.kind == "frame":
            return (1, H, W)
        if self.kind == "video":
            return (T, H, W)
        if self.kind == "2d":
            w = self.extent[0]
            dims = (1, w, w)
        elif self.kind == "3d":
            dims = tuple(self.extent)
        else:
            raise ConfigError(f"unknown window kind {self.kind!r}")
        for name, size, ext in zip(("T", "H", "W"), (T, H, W), dims):
            if size % ext:
                raise WindowError(f"window extent {ext} does not divide {name}={size}")
        return dims


@dataclass
class AttentionWeights:
    """One pre-LN transformer layer: attention projections, FFN, two LayerNorms.

    Projection matrices are stored (in, out). All tensors are frozen.
    """

    heads: int
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    frozen: bool = True

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if isinstance(getattr(self, f.name), Tensor)}


def init_attention_weights(C: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4) -> AttentionWeights:
    """Random stand-in for pretrained weights: normal with variance 1/fan_in."""
    if C % heads:
        raise DimensionError(f"channels {C} not divisible by heads {heads}")

    def mat(n_in, n_out):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out)))

    def vec(n, scale=0.02, center=0.0):
        return Tensor(center + rng.normal(0.0, scale, n))

    H = mlp_ratio * C
    return AttentionWeights(
        heads=heads,
        ln1_g=vec(C, 0.1, 1.0), ln1_b=vec(C),
        wq=mat(C, C), bq=vec(C), wk=mat(C, C), bk=vec(C),
        wv=mat(C, C), bv=vec(C), wo=mat(C, C), bo=vec(C),
        ln2_g=vec(C, 0.1, 1.0), ln2_b=vec(C),
        w1=mat(C, H), b1=vec(H), w2=mat(H, C), b2=vec(C),
    )


# -- windows ---------------------------------------------------------------

def split_windows(v: VideoTensor, spec: WindowSpec) -> Tensor:
    """Partition the grid into non-overlapping windows.

    Returns shape (..., N, n, C) with N windows of n = wt*wh*ww tokens each.
    """
    wt, wh, ww = spec.resolve(v.T, v.H, v.W)
    lead = v.data.shape[:-2]
    C = v.C
    k = len(lead)
    x = ops.reshape(v.data, lead + (v.T // wt, wt, v.H // wh, wh, v.W // ww, ww, C))
    axes = list(range(k)) + [k + i for i in (0, 2, 4, 1, 3, 5, 6)]
    x = ops.transpose(x, axes)
    n_win = (v.T // wt) * (v.H // wh) * (v.W // ww)
    return ops.reshape(x, lead + (n_win, wt * wh * ww, C))


def merge_windows(windows: Tensor, grid: tuple[int, int, int], spec: WindowSpec) -> VideoTensor:
    """Inverse of :func:`split_windows`."""
    T, H, W = grid
    wt, wh, ww = spec.resolve(T, H, W)
    lead = windows.shape[:-3]
    C = windows.shape[-1]
    k = len(lead)
    x = ops.reshape(windows, lead + (T // wt, H // wh, W // ww, wt, wh, ww, C))
    axes = list(range(k)) + [k + i for i in (0, 3, 1, 4, 2, 5, 6)]
    x = ops.transpose(x, axes)
    return VideoTensor(ops.reshape(x, lead + (T * H * W, C)), T, H, W)


def window_attention(s: Tensor, weights: AttentionWeights) -> Tensor:
    """Multi-head scaled dot-product self-attention over the token axis (-2).

    ``s`` is (..., n, C); the output projection is applied, the FFN is not.
    """
    C = weights.dim
    if s.shape[-1] != C:
        raise DimensionError(f"attention: input channels {s.shape[-1]} vs weights {C}")
    h = weights.heads
    d = C // h
    lead = s.shape[:-2]
    n = s.shape[-2]

    def heads_first(t):
        t = ops.reshape(t, lead + (n, h, d))
        k = len(lead)
        return ops.transpose(t, list(range(k)) + [k + 1, k, k + 2])

    q = heads_first(ops.linear(s, weights.wq, weights.bq))
    k_ = heads_first(ops.linear(s, weights.wk, weights.bk))
    v = heads_first(ops.linear(s, weights.wv, weights.bv))
    scores = ops.matmul(q, ops.swapaxes(k_, -1, -2)) * (1.0 / math.sqrt(d))
    attn = ops.softmax(scores, axis=-1)
    ctx = ops.matmul(attn, v)  # (..., h, n, d)
    kk = len(lead)
    ctx = ops.transpose(ctx, list(range(kk)) + [kk + 1, kk, kk + 2])
    ctx = ops.reshape(ctx, lead + (n, C))
    return ops.linear(ctx, weights.wo, weights.bo)


def divide(v: VideoTensor, spec: WindowSpec, weights: AttentionWeights) -> VideoTensor:
    """Split into windows, attend within each window independently, merge back."""
    windows = split_windows(v, spec)
    return merge_windows(window_attention(windows, weights), v.grid, spec)


def full_attention(v: VideoTensor, weights: AttentionWeights) -> VideoTensor:
    """Attention over the entire spatiotemporal token sequence."""
    return v.with_data(window_attention(v.data, weights))


def attend(v: VideoTensor, weights: AttentionWeights, spec: WindowSpec) -> VideoTensor:
    """The residual attention stage of a pre-LN layer, with windowed attention."""
    normed = v.with_data(ops.layer_norm(v.data, weights.ln1_g, weights.ln1_b))
    return v.with_data(ops.add(v.data, divide(normed, spec, weights).data))


def ffn(x: Tensor, weights: AttentionWeights) -> Tensor:
    """Residual feed-forward stage: ``x + W2 gelu(W1 LN(x))``."""
    h = ops.layer_norm(x, weights.ln2_g, weights.ln2_b)
    h = ops.gelu(ops.linear(h, weights.w1, weights.b1))
    return ops.add(x, ops.linear(h, weights.w2, weights.b2))


def transformer_layer(v: VideoTensor, weights: AttentionWeights, spec: WindowSpec | None = None) -> VideoTensor:
    """Unmodified layer: FFN(Attention(v)); per-frame attention unless ``spec`` says otherwise."""
    a = attend(v, weights, spec or WindowSpec.frame())
    return a.with_data(ffn(a.data, weights))


# -- cost model ------------------------------------------------------------

@dataclass(frozen=True)
class FlopCount:
    """Multiply-accumulate counts for one attention stage."""

    projections: int
    scores: int
    weighted_values: int

    @property
    def attention(self) -> int:
        return self.scores + self.weighted_values

    @property
    def total(self) -> int:
        return self.projections + self.scores + self.weighted_values


def count_flops(H: int, W: int, T: int, C: int, mode: WindowSpec | str = "frame") -> FlopCount:
    """Closed-form MAC count of the attention stage.

    ``mode`` is a :class:`WindowSpec` or one of ``"full"`` (whole video as one
    sequence) / ``"per-frame"``. A window that does not divide the grid is
    treated as zero-padded up to whole windows.
    """
    if min(H, W, T, C) < 1:
        raise DimensionError("grid and channel sizes must be positive")
    if isinstance(mode, str):
        mode = {"full": WindowSpec.video(), "per-frame": WindowSpec.frame(),
                "frame": WindowSpec.frame(), "video": WindowSpec.video()}.get(mode) or WindowSpec.parse(mode)
    if mode.kind == "video":
        dims = (T, H, W)
    elif mode.kind == "frame":
        dims = (1, H, W)
    elif mode.kind == "2d":
        dims = (1, mode.extent[0], mode.extent[0])
    else:
        dims = tuple(mode.extent)
    wt, wh, ww = dims
    n_windows = -(-T // wt) * -(-H // wh) * -(-W // ww)
    n = wt * wh * ww
    tokens = T * H * W
    return FlopCount(projections=4 * tokens * C * C,
                     scores=n_windows * n * n * C,
                     weighted_values=n_windows * n * n * C)


def ffn_flops(tokens: int, C: int, mlp_ratio: int = 4) -> int:
    return 2 * tokens * C * mlp_ratio * C
