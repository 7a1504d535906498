"""Randomised comparison of the chunked scan against the sequential recurrence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from moma.core import rng as rngs
from moma.core.gradcheck import relative_error
from moma.ssm import selective_scan_chunked, selective_scan_ref

TOLERANCE = 1e-10


@dataclass
class OracleCase:
    L: int
    E: int
    S: int
    chunk: int
    rel_err: float

    @property
    def passed(self) -> bool:
        return self.rel_err < TOLERANCE


def random_scan_inputs(rng: np.random.Generator, L: int, E: int, S: int, batch: int = 1):
    u = rng.normal(size=(batch, L, E))
    delta = np.exp(rng.uniform(np.log(1e-3), np.log(1.0), size=(batch, L, E)))
    A = -np.exp(rng.normal(size=(E, S)))
    B = rng.normal(size=(batch, L, S))
    C = rng.normal(size=(batch, L, S))
    D = rng.normal(size=E)
    return u, delta, A, B, C, D


def run_oracle(seed: int = 0, cases: int = 100, max_L: int = 64, max_E: int = 8, max_S: int = 8) -> list[OracleCase]:
    rng = rngs.stream(seed, "oracle")
    out = []
    for _ in range(cases):
        L = int(rng.integers(1, max_L + 1))
        E = int(rng.integers(1, max_E + 1))
        S = int(rng.integers(1, max_S + 1))
        chunk = int(rng.integers(1, 33))
        args = random_scan_inputs(rng, L, E, S, batch=int(rng.integers(1, 3)))
        err = relative_error(selective_scan_chunked(*args, chunk_size=chunk), selective_scan_ref(*args))
        out.append(OracleCase(L, E, S, chunk, err))
    return out
