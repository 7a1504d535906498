import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moma.core.gradcheck import check_gradients
from moma.core.rng import stream
from moma.core.tensor import Tensor
from moma.core import ops
from moma.errors import ConfigError, ContractError, DimensionError
from moma.harness.oracle import random_scan_inputs
from moma.ssm import (Direction, ScanPlan, init_ssm_params, inverse_reindex, reindex, scan_order,
                      selective_scan, selective_scan_chunked, selective_scan_ref, ssm_flops, ssm_forward)


def params(C=4, E=4, S=2, directions=4, seed=0, tied=False, out_scale=0.5):
    p = init_ssm_params(C, stream(seed, "test-ssm"), hidden=E, state=S, directions=directions, tied=tied)
    r = stream(seed, "test-ssm-out")
    p.out_w.data = r.normal(0.0, out_scale, p.out_w.shape)
    p.out_b.data = r.normal(0.0, 0.1, p.out_b.shape)
    return p


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


# -- reference scan ---------------------------------------------------------------

def test_single_step_closed_form(rng):
    u, d, A, B, C, D = random_scan_inputs(rng, 1, 3, 2)
    y = selective_scan_ref(u, d, A, B, C, D)
    expect = (C[:, 0, None, :] * d[:, 0, :, None] * B[:, 0, None, :] * u[:, 0, :, None]).sum(-1) + D * u[:, 0]
    np.testing.assert_allclose(y[:, 0], expect, rtol=1e-14)


def test_memoryless_limit(rng):
    u, d, A, B, C, D = random_scan_inputs(rng, 5, 3, 2)
    A = -np.exp(np.full_like(A, 600.0))  # exp(delta * A) underflows to 0
    y = selective_scan_ref(u, d, A, B, C, D)
    expect = (C[..., None, :] * d[..., None] * B[..., None, :] * u[..., None]).sum(-1) + D * u
    np.testing.assert_allclose(y, expect, rtol=1e-13)


def test_nonpositive_delta_rejected(rng):
    u, d, A, B, C, D = random_scan_inputs(rng, 4, 2, 2)
    d[0, 1, 0] = 0.0
    for scan in (selective_scan_ref, selective_scan_chunked, selective_scan):
        with pytest.raises(ContractError):
            scan(u, d, A, B, C, D)


def test_tape_scan_matches_reference(rng):
    args = random_scan_inputs(rng, 6, 3, 2, batch=2)
    assert rel(selective_scan(*args).data, selective_scan_ref(*args)) < 1e-10


@pytest.mark.parametrize("chunk", [1, 3, 6, 64])
def test_chunked_matches_reference(chunk, rng):
    args = random_scan_inputs(rng, 6, 3, 2)
    assert rel(selective_scan_chunked(*args, chunk_size=chunk), selective_scan_ref(*args)) < 1e-10


def test_chunk_size_must_be_positive(rng):
    with pytest.raises(ContractError):
        selective_scan_chunked(*random_scan_inputs(rng, 4, 2, 2), chunk_size=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 5), st.integers(1, 4), st.integers(1, 20), st.integers(0, 10_000))
def test_chunked_oracle_property(L, E, S, chunk, seed):
    args = random_scan_inputs(np.random.default_rng(seed), L, E, S)
    assert rel(selective_scan_chunked(*args, chunk_size=chunk), selective_scan_ref(*args)) < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(0, 10_000))
def test_scan_stable_for_bounded_input(L, seed):
    rng = np.random.default_rng(seed)
    u, d, A, B, C, D = random_scan_inputs(rng, L, 3, 4)
    u = np.clip(u, -1, 1)
    d = d * 50.0
    A = -np.exp(rng.normal(0, 3, A.shape))
    assert np.all(np.isfinite(selective_scan_ref(u, d, A, B, C, D)))


def test_scan_gradients(rng):
    u, d, A, B, C, D = (Tensor(a) for a in random_scan_inputs(rng, 6, 3, 2, batch=2))
    w = rng.normal(size=(2, 6, 3))
    errs = check_gradients(lambda: ops.sum_(ops.mul(selective_scan(u, d, A, B, C, D), w)),
                           {"u": u, "delta": d, "A": A, "B": B, "C": C, "D": D})
    assert max(errs.values()) < 1e-6, errs


def test_chunked_runtime_linear_in_L():
    rng = np.random.default_rng(0)
    Ls = (256, 512, 1024)
    times = []
    for L in Ls:
        args = random_scan_inputs(rng, L, 8, 8)
        samples = []
        for _ in range(5):
            t0 = time.perf_counter()
            selective_scan_chunked(*args, chunk_size=16)
            samples.append(time.perf_counter() - t0)
        times.append(float(np.median(samples)))
    ratios = [times[1] / times[0], times[2] / times[1]]
    assert all(1.6 <= r <= 2.6 for r in ratios), (times, ratios)
    fit = np.polyfit(Ls, times, 1)
    pred = np.polyval(fit, Ls)
    r2 = 1 - np.sum((times - pred) ** 2) / np.sum((times - np.mean(times)) ** 2)
    assert r2 > 0.98, r2


# -- scan orders -----------------------------------------------------------------

def test_temporal_major_example():
    assert scan_order(Direction("temporal-major"), (2, 1, 2)).tolist() == [0, 2, 1, 3]


def test_spatial_forward_is_identity(rng):
    x = Tensor(rng.normal(size=(12, 3)))
    assert np.array_equal(reindex(x, Direction("spatial-raster"), (3, 2, 2)).data, x.data)


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
       st.sampled_from(["spatial-raster", "temporal-major"]), st.sampled_from(["forward", "backward"]))
def test_orders_are_bijections(T, H, W, axis, orient):
    d = Direction(axis, orient)
    order = scan_order(d, (T, H, W))
    assert np.array_equal(np.sort(order), np.arange(T * H * W))
    x = Tensor(np.random.default_rng(0).normal(size=(T * H * W, 2)))
    assert inverse_reindex(reindex(x, d, (T, H, W)), d, (T, H, W)).data.tobytes() == x.data.tobytes()


def test_backward_reverses_forward():
    g = (2, 3, 2)
    for axis in ("spatial-raster", "temporal-major"):
        f = scan_order(Direction(axis, "forward"), g)
        b = scan_order(Direction(axis, "backward"), g)
        assert np.array_equal(b, f[::-1])


def test_scan_plan_parse_render():
    plan = ScanPlan.default()
    assert len(plan) == 4
    assert ScanPlan.parse(plan.render()) == plan
    with pytest.raises(ConfigError):
        ScanPlan.parse("diagonal:forward")
    with pytest.raises(ConfigError):
        ScanPlan.parse("")


# -- forwarding layer --------------------------------------------------------------

def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def _softplus(v):
    return math.log1p(math.exp(v))


def _gelu(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def hand_ssm(x, p, plan, grid):
    """Token-by-token evaluation with explicit loops over directions, steps, channels and states."""
    T, H, W = grid
    N, C = x.shape
    E, S, K = p.hidden, p.state, p.conv_w.shape[-1]
    xz = x @ p.in_w.data + p.in_b.data
    u, z = xz[:, :E], xz[:, E:]
    total = np.zeros((N, E))
    for di, direction in enumerate(plan.directions):
        if direction.axis == "spatial-raster":
            order = [(t * H + h) * W + w for t in range(T) for h in range(H) for w in range(W)]
        else:
            order = [(t * H + h) * W + w for h in range(H) for w in range(W) for t in range(T)]
        if direction.orientation == "backward":
            order = order[::-1]
        seq = [u[i] for i in order]
        state = np.zeros((E, S))
        for k, tok in enumerate(order):
            a = np.empty(E)
            for e in range(E):
                c = p.conv_b.data[di, e]
                for j in range(K):
                    src = k - (K - 1) + j
                    if src >= 0:
                        c += p.conv_w.data[di, e, j] * seq[src][e]
                a[e] = c * _sigmoid(c)
            dt = [_softplus(sum(a[i] * p.dt_w.data[di, i, e] for i in range(E)) + p.dt_b.data[di, e]) for e in range(E)]
            Bv = [sum(a[i] * p.b_w.data[di, i, s] for i in range(E)) for s in range(S)]
            Cv = [sum(a[i] * p.c_w.data[di, i, s] for i in range(E)) for s in range(S)]
            for e in range(E):
                out = 0.0
                for s in range(S):
                    A = -math.exp(p.a_log.data[di, e, s])
                    state[e, s] = math.exp(dt[e] * A) * state[e, s] + dt[e] * Bv[s] * a[e]
                    out += Cv[s] * state[e, s]
                total[tok, e] += out + p.skip.data[di, e] * a[e]
    gated = total * np.vectorize(_gelu)(z)
    out = gated @ p.out_w.data + p.out_b.data
    return out[:, :C], out[:, C:]


def test_ssm_forward_matches_hand_recurrence(rng):
    grid = (2, 2, 2)
    p = params(C=4, E=4, S=2)
    x = rng.normal(size=(8, 4))
    y1, y2 = ssm_forward(Tensor(x), p, ScanPlan.default(), grid)
    h1, h2 = hand_ssm(x, p, ScanPlan.default(), grid)
    assert rel(y1.data, h1) < 1e-9 and rel(y2.data, h2) < 1e-9


def test_zero_out_proj_gives_zero(rng):
    p = init_ssm_params(4, stream(0, "z"), hidden=8, state=2)
    y1, y2 = ssm_forward(Tensor(rng.normal(size=(8, 4))), p, ScanPlan.default(), (2, 2, 2))
    assert not y1.data.any() and not y2.data.any()


def test_output_width_is_double(rng):
    p = init_ssm_params(6, stream(0, "w"), state=3)
    assert p.out_w.shape == (12, 12) and p.hidden == 12
    assert np.all(-np.exp(p.a_log.data) < 0)
    dt = np.logaddexp(0.0, p.dt_b.data)
    assert dt.min() >= 1e-3 - 1e-12 and dt.max() <= 1e-1 + 1e-12


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(2, 2, 2), (3, 1, 2), (1, 3, 3)]))
def test_flip_equivariance_with_tied_directions(seed, grid):
    p = params(seed=seed % 7, tied=True)
    x = np.random.default_rng(seed).normal(size=(grid[0] * grid[1] * grid[2], 4))
    plan = ScanPlan.default()
    y1, y2 = ssm_forward(Tensor(x), p, plan, grid)
    f1, f2 = ssm_forward(Tensor(x[::-1].copy()), p, plan, grid)
    np.testing.assert_allclose(f1.data, y1.data[::-1], atol=1e-12)
    np.testing.assert_allclose(f2.data, y2.data[::-1], atol=1e-12)


def test_batched_matches_single(rng):
    p = params()
    x = rng.normal(size=(3, 8, 4))
    y1, _ = ssm_forward(Tensor(x), p, ScanPlan.default(), (2, 2, 2))
    for b in range(3):
        s1, _ = ssm_forward(Tensor(x[b]), p, ScanPlan.default(), (2, 2, 2))
        np.testing.assert_allclose(y1.data[b], s1.data, atol=1e-13)


def test_grid_mismatch(rng):
    with pytest.raises(DimensionError):
        ssm_forward(Tensor(rng.normal(size=(7, 4))), params(), ScanPlan.default(), (2, 2, 2))


def test_silu_gate_selectable(rng):
    p = params()
    x = Tensor(rng.normal(size=(8, 4)))
    a = ssm_forward(x, p, ScanPlan.default(), (2, 2, 2), gate="gelu")[0].data
    b = ssm_forward(x, p, ScanPlan.default(), (2, 2, 2), gate="silu")[0].data
    assert not np.allclose(a, b)
    with pytest.raises(ConfigError):
        ssm_forward(x, p, ScanPlan.default(), (2, 2, 2), gate="relu")


def test_ssm_forward_gradients_all_params(rng):
    p = params(directions=2)
    plan = ScanPlan.parse("spatial-raster:forward,temporal-major:backward")
    x = Tensor(rng.normal(size=(8, 4)))
    w = rng.normal(size=(8, 8))
    errs = check_gradients(lambda: ops.sum_(ops.mul(ops.concat(ssm_forward(x, p, plan, (2, 2, 2)), -1), w)),
                           {"x": x, **p.tensors()})
    assert max(errs.values()) < 1e-4, errs


def test_flop_formula_matches_meter(rng):
    from moma.core.tensor import FlopMeter
    p = params(C=4, E=6, S=3)
    with FlopMeter() as m:
        ssm_forward(Tensor(rng.normal(size=(8, 4))), p, ScanPlan.default(), (2, 2, 2))
    assert m.macs == ssm_flops(8, 4, 6, 3, 4)
