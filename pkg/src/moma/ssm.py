"""Selective state-space forwarding layer with multi-directional scans.

The recurrence per channel e and state s is::

    h[t] = exp(delta[t, e] * A[e, s]) * h[t-1] + delta[t, e] * B[t, s] * u[t, e]
    y[t, e] = sum_s C[t, s] * h[t, e, s] + D[e] * u[t, e]

with ``A = -exp(A_log)`` so every decay factor lies in (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from numba import njit

from moma.core import ops
from moma.core.tensor import Tensor, as_tensor, count_macs, make_output
from moma.errors import ConfigError, ContractError, DimensionError

AXES = ("spatial-raster", "temporal-major")
ORIENTATIONS = ("forward", "backward")


@dataclass(frozen=True)
class Direction:
    axis: str
    orientation: str = "forward"

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"scan axis must be one of {AXES}, got {self.axis!r}")
        if self.orientation not in ORIENTATIONS:
            raise ConfigError(f"scan orientation must be one of {ORIENTATIONS}, got {self.orientation!r}")

    def render(self) -> str:
        return f"{self.axis}:{self.orientation}"


@dataclass(frozen=True)
class ScanPlan:
    directions: tuple[Direction, ...]

    def __post_init__(self):
        if not self.directions:
            raise ConfigError("scan plan needs at least one direction")

    def __len__(self) -> int:
        return len(self.directions)

    @classmethod
    def default(cls) -> ScanPlan:
        return cls(tuple(Direction(a, o) for a in AXES for o in ORIENTATIONS))

    @classmethod
    def parse(cls, text: str) -> ScanPlan:
        """Comma-separated ``axis:orientation`` items, e.g. ``spatial-raster:forward``."""
        dirs = []
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            axis, _, orient = item.partition(":")
            dirs.append(Direction(axis.strip(), orient.strip() or "forward"))
        return cls(tuple(dirs))

    def render(self) -> str:
        return ",".join(d.render() for d in self.directions)


def scan_order(direction: Direction, grid: tuple[int, int, int]) -> np.ndarray:
    """Flat (t, h, w) token indices in the order the scan visits them."""
    T, H, W = grid
    idx = np.arange(T * H * W).reshape(T, H, W)
    if direction.axis == "temporal-major":
        idx = idx.transpose(1, 2, 0)
    order = idx.ravel()
    if direction.orientation == "backward":
        order = order[::-1]
    return np.ascontiguousarray(order)


def reindex(x: Tensor, direction: Direction, grid: tuple[int, int, int]) -> Tensor:
    _check_tokens(x, grid)
    return ops.take(x, scan_order(direction, grid), axis=-2)


def inverse_reindex(x: Tensor, direction: Direction, grid: tuple[int, int, int]) -> Tensor:
    _check_tokens(x, grid)
    return ops.take(x, np.argsort(scan_order(direction, grid)), axis=-2)


def _check_tokens(x, grid):
    n = grid[0] * grid[1] * grid[2]
    if x.shape[-2] != n:
        raise DimensionError(f"sequence length {x.shape[-2]} does not match grid {grid} ({n} tokens)")


# -- scans -------------------------------------------------------------------

def _check_delta(delta: np.ndarray) -> None:
    if not np.all(delta > 0):
        raise ContractError("selective scan needs strictly positive step sizes delta")


def selective_scan_ref(u, delta, A, B, C, D) -> np.ndarray:
    """Step-by-step recurrence; the reference every other scan is checked against.

    Shapes: ``u, delta`` (..., L, E); ``A`` (..., E, S); ``B, C`` (..., L, S);
    ``D`` (..., E). Leading axes broadcast.
    """
    u, delta, A, B, C, D = (np.asarray(a, dtype=np.float64) for a in (u, delta, A, B, C, D))
    _check_delta(delta)
    L = u.shape[-2]
    lead = np.broadcast_shapes(u.shape[:-2], delta.shape[:-2], A.shape[:-2], B.shape[:-2], C.shape[:-2], D.shape[:-1])
    E, S = A.shape[-2:]
    h = np.zeros(lead + (E, S))
    y = np.empty(lead + (L, E))
    for t in range(L):
        d = delta[..., t, :, None]
        h = np.exp(d * A) * h + d * B[..., t, None, :] * u[..., t, :, None]
        y[..., t, :] = (h * C[..., t, None, :]).sum(axis=-1) + D * u[..., t, :]
    return y


def selective_scan_chunked(u, delta, A, B, C, D, chunk_size: int = 16) -> np.ndarray:
    """Same recurrence, evaluated chunk by chunk.

    Inside a chunk of length Q every state is a decay-weighted sum of the
    chunk's inputs plus the decayed carry-in state, computed at once from
    cumulative log-decays; only the carry crosses chunk boundaries.
    """
    if chunk_size < 1:
        raise ContractError(f"chunk_size must be >= 1, got {chunk_size}")
    u, delta, A, B, C, D = (np.asarray(a, dtype=np.float64) for a in (u, delta, A, B, C, D))
    _check_delta(delta)
    L = u.shape[-2]
    lead = np.broadcast_shapes(u.shape[:-2], delta.shape[:-2], A.shape[:-2], B.shape[:-2], C.shape[:-2], D.shape[:-1])
    E, S = A.shape[-2:]
    h = np.zeros(lead + (E, S))
    y = np.empty(lead + (L, E))
    for start in range(0, L, chunk_size):
        stop = min(start + chunk_size, L)
        Q = stop - start
        d = delta[..., start:stop, :, None]  # (..., Q, E, 1)
        log_decay = np.cumsum(d * A[..., None, :, :], axis=-3)  # (..., Q, E, S)
        inputs = d * B[..., start:stop, None, :] * u[..., start:stop, :, None]
        # rel[t, r] = log-decay from step r (exclusive) to t (inclusive); keep r <= t only
        rel = log_decay[..., :, None, :, :] - log_decay[..., None, :, :, :]
        causal = np.tril(np.ones((Q, Q), dtype=bool))[:, :, None, None]
        weights = np.exp(np.where(causal, rel, -np.inf))
        states = (weights * inputs[..., None, :, :, :]).sum(axis=-3) + np.exp(log_decay) * h[..., None, :, :]
        y[..., start:stop, :] = (states * C[..., start:stop, None, :]).sum(axis=-1) + D[..., None, :] * u[..., start:stop, :]
        h = states[..., -1, :, :]
    return y


@njit(cache=True)
def _scan_forward(u, dt, A, B, C, D):
    P, L, E = u.shape
    S = A.shape[2]
    y = np.empty((P, L, E))
    h = np.empty(S)
    for p in range(P):
        for e in range(E):
            h[:] = 0.0
            for t in range(L):
                d = dt[p, t, e]
                x = u[p, t, e]
                acc = 0.0
                for s in range(S):
                    h[s] = math.exp(d * A[p, e, s]) * h[s] + d * B[p, t, s] * x
                    acc += C[p, t, s] * h[s]
                y[p, t, e] = acc + D[p, e] * x
    return y


@njit(cache=True)
def _scan_backward(u, dt, A, B, C, D, gy):
    P, L, E = u.shape
    S = A.shape[2]
    gu = np.empty((P, L, E))
    gdt = np.empty((P, L, E))
    gA = np.zeros((P, E, S))
    gB = np.zeros((P, L, S))
    gC = np.zeros((P, L, S))
    gD = np.zeros((P, E))
    hs = np.empty((L + 1, S))
    dh = np.empty(S)
    for p in range(P):
        for e in range(E):
            # recompute the forward states; hs[t + 1] is the state after step t
            hs[0, :] = 0.0
            for t in range(L):
                d = dt[p, t, e]
                x = u[p, t, e]
                for s in range(S):
                    hs[t + 1, s] = math.exp(d * A[p, e, s]) * hs[t, s] + d * B[p, t, s] * x
            dh[:] = 0.0
            for t in range(L - 1, -1, -1):
                g = gy[p, t, e]
                d = dt[p, t, e]
                x = u[p, t, e]
                gD[p, e] += g * x
                g_u = g * D[p, e]
                g_d = 0.0
                for s in range(S):
                    a = math.exp(d * A[p, e, s])
                    dh[s] += g * C[p, t, s]
                    gC[p, t, s] += g * hs[t + 1, s]
                    g_decay = dh[s] * hs[t, s] * a
                    g_d += g_decay * A[p, e, s] + dh[s] * B[p, t, s] * x
                    gA[p, e, s] += g_decay * d
                    gB[p, t, s] += dh[s] * d * x
                    g_u += dh[s] * d * B[p, t, s]
                    dh[s] *= a
                gu[p, t, e] = g_u
                gdt[p, t, e] = g_d
    return gu, gdt, gA, gB, gC, gD


def selective_scan(u, delta, A, B, C, D) -> Tensor:
    """Differentiable selective scan (shapes as in :func:`selective_scan_ref`).

    Forward and backward are compiled loops; the backward recomputes the
    states and runs the adjoint recurrence
    ``dh[t] = C[t] * dy[t] + exp(delta[t+1] A) * dh[t+1]`` in reverse.
    """
    u, delta, A, B, C, D = (as_tensor(a) for a in (u, delta, A, B, C, D))
    _check_delta(delta.data)
    L, E = u.shape[-2:]
    S = A.shape[-1]
    if delta.shape[-2:] != (L, E) or A.shape[-2] != E or B.shape[-2:] != (L, S) \
            or C.shape[-2:] != (L, S) or D.shape[-1] != E:
        raise DimensionError(
            f"selective_scan shapes: u {u.shape}, delta {delta.shape}, A {A.shape}, "
            f"B {B.shape}, C {C.shape}, D {D.shape}")
    lead = np.broadcast_shapes(u.shape[:-2], delta.shape[:-2], A.shape[:-2], B.shape[:-2],
                               C.shape[:-2], D.shape[:-1])
    P = int(np.prod(lead, dtype=np.int64))

    def flat(arr, tail):
        return np.ascontiguousarray(np.broadcast_to(arr, lead + tail).reshape((P,) + tail))

    args = (flat(u.data, (L, E)), flat(delta.data, (L, E)), flat(A.data, (E, S)),
            flat(B.data, (L, S)), flat(C.data, (L, S)), flat(D.data, (E,)))
    out = _scan_forward(*args).reshape(lead + (L, E))
    count_macs("selective_scan", 2 * P * L * E * S)

    def bw(g):
        gy = np.ascontiguousarray(np.broadcast_to(g, lead + (L, E)).reshape(P, L, E))
        grads = _scan_backward(*args, gy)
        shapes = [(L, E), (L, E), (E, S), (L, S), (L, S), (E,)]
        return tuple(ops.unbroadcast(gr.reshape(lead + tail), t.shape) if t.requires_grad else None
                     for gr, tail, t in zip(grads, shapes, (u, delta, A, B, C, D)))

    return make_output("selective_scan", out, (u, delta, A, B, C, D), bw)


# -- forwarding layer ----------------------------------------------------------

@dataclass
class SSMParams:
    """Parameters of one forwarding layer.

    Per-direction tensors carry a leading direction axis of size D. ``out_w``
    maps the hidden width E to 2C: the first C output channels form the scale
    sequence, the last C the bias sequence.
    """

    in_w: Tensor      # (C, 2E): main branch then gate branch
    in_b: Tensor      # (2E,)
    conv_w: Tensor    # (D, E, K)
    conv_b: Tensor    # (D, E)
    dt_w: Tensor      # (D, E, E)
    dt_b: Tensor      # (D, E)
    b_w: Tensor       # (D, E, S)
    c_w: Tensor       # (D, E, S)
    a_log: Tensor     # (D, E, S)
    skip: Tensor      # (D, E)
    out_w: Tensor     # (E, 2C)
    out_b: Tensor     # (2C,)

    @property
    def dim(self) -> int:
        return self.in_w.shape[0]

    @property
    def hidden(self) -> int:
        return self.conv_w.shape[1]

    @property
    def state(self) -> int:
        return self.a_log.shape[-1]

    @property
    def n_directions(self) -> int:
        return self.conv_w.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def init_ssm_params(C: int, rng: np.random.Generator, *, hidden: int | None = None, state: int = 8,
                    directions: int = 4, conv_width: int = 4, dt_min: float = 1e-3,
                    dt_max: float = 1e-1, tied: bool = False) -> SSMParams:
    """Fresh trainable parameters; the output projection starts at zero.

    ``tied`` copies the first direction's parameters to every direction.
    """
    E = hidden or 2 * C
    S = state
    nd = 1 if tied else directions

    def normal(shape, std):
        return rng.normal(0.0, std, shape)

    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), (nd, E)))
    per_dir = {
        "conv_w": normal((nd, E, conv_width), 1.0 / math.sqrt(conv_width)),
        "conv_b": np.zeros((nd, E)),
        "dt_w": normal((nd, E, E), 1.0 / math.sqrt(E)),
        "dt_b": dt + np.log(-np.expm1(-dt)),  # inverse softplus
        "b_w": normal((nd, E, S), 1.0 / math.sqrt(E)),
        "c_w": normal((nd, E, S), 1.0 / math.sqrt(E)),
        "a_log": np.broadcast_to(np.log(np.arange(1, S + 1, dtype=np.float64)), (nd, E, S)).copy(),
        "skip": np.ones((nd, E)),
    }
    if tied:
        per_dir = {k: np.repeat(v, directions, axis=0) for k, v in per_dir.items()}
    return SSMParams(
        in_w=Tensor(normal((C, 2 * E), 1.0 / math.sqrt(C))),
        in_b=Tensor(np.zeros(2 * E)),
        out_w=Tensor(np.zeros((E, 2 * C))),
        out_b=Tensor(np.zeros(2 * C)),
        **{k: Tensor(v) for k, v in per_dir.items()},
    )


def _expand(t: Tensor, n_lead: int) -> Tensor:
    """Insert ``n_lead`` singleton axes after the direction axis of ``t``."""
    shape = t.shape[:1] + (1,) * n_lead + t.shape[1:]
    return ops.reshape(t, shape) if n_lead else t


def _activation(name: str):
    if name == "gelu":
        return ops.gelu
    if name == "silu":
        return ops.silu
    raise ConfigError(f"gate activation must be 'gelu' or 'silu', got {name!r}")


def ssm_forward(x: Tensor, params: SSMParams, plan: ScanPlan, grid: tuple[int, int, int],
                gate: str = "gelu") -> tuple[Tensor, Tensor]:
    """Run the forwarding layer on tokens ``x`` (..., T*H*W, C); returns (scale, bias)."""
    _check_tokens(x, grid)
    C = params.dim
    if x.shape[-1] != C:
        raise DimensionError(f"ssm_forward: input channels {x.shape[-1]} vs params {C}")
    if len(plan) != params.n_directions:
        raise DimensionError(f"scan plan has {len(plan)} directions, params have {params.n_directions}")
    E = params.hidden
    lead = x.ndim - 2

    xz = ops.linear(x, params.in_w, params.in_b)
    u = xz[..., :E]
    z = xz[..., E:]

    perms = np.stack([scan_order(d, grid) for d in plan.directions])
    U = ops.gather_tokens(u, perms)  # (D, ..., N, E)
    U = ops.silu(ops.causal_conv1d(U, _expand(params.conv_w, lead), _expand(params.conv_b, lead)))

    dt_w = _expand(params.dt_w, lead)
    delta = ops.softplus(ops.add(ops.matmul(U, dt_w), _expand(ops.reshape(params.dt_b, (params.n_directions, 1, E)), lead)))
    Bm = ops.matmul(U, _expand(params.b_w, lead))
    Cm = ops.matmul(U, _expand(params.c_w, lead))
    A = ops.neg(ops.exp(_expand(params.a_log, lead)))
    Y = selective_scan(U, delta, A, Bm, Cm, _expand(params.skip, lead))
    y = ops.sum_(ops.scatter_tokens(Y, perms), axis=0)

    y = ops.mul(y, _activation(gate)(z))
    out = ops.linear(y, params.out_w, params.out_b)
    return out[..., :C], out[..., C:]


def ssm_flops(tokens: int, C: int, E: int, S: int, directions: int) -> int:
    """MACs of the forwarding layer's projections and state updates."""
    per_dir = tokens * (E * E + 4 * E * S)
    return tokens * C * 2 * E + directions * per_dir + tokens * E * 2 * C
