"""Finite-difference gradient checks for every differentiable building block.

Each case builds small random float64 inputs, reduces the op's output to a
scalar through a fixed random projection and compares tape gradients with
central differences for every input tensor.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from moma import attention as attn
from moma.attention import VideoTensor, WindowSpec
from moma.core import ops, rng as rngs
from moma.core.gradcheck import check_gradients
from moma.core.tensor import Tensor
from moma.fusion import KINDS, ModulationPair, fuse, init_fusion
from moma.ssm import ScanPlan, init_ssm_params, selective_scan, ssm_forward

TOLERANCE = 1e-4
GRID = (2, 2, 2)
C = 4


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    w = rng.normal(size=out.shape)
    return lambda y: ops.sum_(ops.mul(y, w))


def _case(build):
    """Wrap ``build(rng) -> (fn, tensors)`` into a checker returning per-tensor errors."""
    def run(seed: int, eps: float) -> dict[str, float]:
        rng = rngs.stream(seed, "gradsuite", build.__name__)
        fn, tensors = build(rng)
        reduce = _project(fn(), rng)
        return check_gradients(lambda: reduce(fn()), tensors, eps)
    run.__name__ = build.__name__
    return run


def _weights(rng, heads=2):
    w = attn.init_attention_weights(C, heads, rng)
    return w, dict(w.tensors())


def _ssm(rng, directions=4):
    p = init_ssm_params(C, rng, hidden=2 * C, state=2, directions=directions)
    p.out_w.data = rng.normal(0.0, 0.3, p.out_w.shape)
    p.out_b.data = rng.normal(0.0, 0.1, p.out_b.shape)
    return p


def _tokens(rng, batch=None):
    shape = (GRID[0] * GRID[1] * GRID[2], C) if batch is None else (batch, GRID[0] * GRID[1] * GRID[2], C)
    return Tensor(rng.normal(size=shape))


@_case
def matmul(rng):
    a, b = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(4, 5)))
    return (lambda: ops.matmul(a, b)), {"a": a, "b": b}


@_case
def softmax(rng):
    a = Tensor(rng.normal(size=(3, 5)))
    return (lambda: ops.softmax(a, axis=-1)), {"a": a}


@_case
def layer_norm(rng):
    x, g, b = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
    return (lambda: ops.layer_norm(x, g, b)), {"x": x, "gamma": g, "beta": b}


@_case
def attention(rng):
    w, params = _weights(rng)
    x = _tokens(rng)
    fn = lambda: attn.attend(VideoTensor(x, *GRID), w, WindowSpec.cube(1, 2, 1)).data
    return fn, {"x": x, **{k: params[k] for k in ("wq", "wk", "wv", "wo", "ln1_g")}}


@_case
def scan(rng):
    L, E, S = 6, 3, 2
    u = Tensor(rng.normal(size=(2, L, E)))
    d = Tensor(np.exp(rng.normal(size=(2, L, E)) - 1.0))
    A = Tensor(-np.exp(rng.normal(size=(E, S))))
    B, Cm = Tensor(rng.normal(size=(2, L, S))), Tensor(rng.normal(size=(2, L, S)))
    D = Tensor(rng.normal(size=E))
    return (lambda: selective_scan(u, d, A, B, Cm, D)), {"u": u, "delta": d, "A": A, "B": B, "C": Cm, "D": D}


@_case
def ssm_forward_(rng):
    p = _ssm(rng)
    x = _tokens(rng)
    plan = ScanPlan.default()
    fn = lambda: ops.concat(ssm_forward(x, p, plan, GRID), axis=-1)
    return fn, {"x": x, **p.tensors()}


@_case
def seqmod(rng):
    x, s, b = _tokens(rng), _tokens(rng), _tokens(rng)
    params = init_fusion("seqmod", C)
    return (lambda: fuse(x, ModulationPair(s, b), params)), {"x": x, "scale": s, "bias": b}


def _fusion_case(kind):
    def build(rng):
        x, s, b = _tokens(rng, batch=2), _tokens(rng, batch=2), _tokens(rng, batch=2)
        params = init_fusion(kind, C)
        for t in params.tensors.values():
            t.data = t.data + rng.normal(0.0, 0.3, t.shape)
        if kind == "max":
            # keep the two operands apart so the kink is never within eps
            s.data = x.data + np.where(rng.random(x.shape) < 0.5, 1.0, -1.0) * (0.5 + rng.random(x.shape))
        fn = lambda: fuse(x, ModulationPair(s, b), params)
        return fn, {"x": x, "scale": s, "bias": b, **params.tensors}
    build.__name__ = f"fusion_{kind}"
    return _case(build)


@_case
def full_layer(rng):
    w, _ = _weights(rng)
    p = _ssm(rng)
    fusion = init_fusion("seqmod", C)
    x = _tokens(rng)
    plan = ScanPlan.default()
    spec = WindowSpec.square(1)

    def fn():
        v = VideoTensor(x, *GRID)
        a = attn.attend(v, w, spec).data
        y1, y2 = ssm_forward(a, p, plan, GRID)
        return attn.ffn(fuse(a, ModulationPair(y1, y2), fusion), w)
    return fn, {"x": x, **p.tensors()}


CASES: dict[str, Callable[[int, float], dict[str, float]]] = {
    "matmul": matmul, "softmax": softmax, "layer_norm": layer_norm, "attention": attention,
    "scan": scan, "ssm_forward": ssm_forward_, "seqmod": seqmod,
    **{f"fusion_{k}": _fusion_case(k) for k in KINDS},
    "full_layer": full_layer,
}


def run_suite(seed: int = 0, eps: float = 1e-5, ops_filter=None) -> dict[str, float]:
    """Max relative error per op."""
    out = {}
    for name, case in CASES.items():
        if ops_filter and name not in ops_filter:
            continue
        errs = case(seed, eps)
        out[name] = max(errs.values()) if errs else 0.0
    return out
