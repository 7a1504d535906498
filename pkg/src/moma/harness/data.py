"""Synthetic video classification tasks.

``motion``: a Gaussian blob drifts one pixel per frame up, down, left or
right on a torus (wrapping at the borders). Start positions are uniform, so
every single frame has the same distribution in every class and only the
order of frames reveals the label.

``static``: an oriented sinusoidal grating (0, 45, 90 or 135 degrees) with a
random phase, identical in every frame. Solvable without temporal modelling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from moma.core import rng as rngs
from moma.errors import ConfigError

TASKS = ("motion", "static")
ALIASES = {"motion-direction": "motion", "static-texture": "static"}
DIRECTIONS = ("up", "down", "left", "right")
VELOCITY = {0: (-1.0, 0.0), 1: (1.0, 0.0), 2: (0.0, -1.0), 3: (0.0, 1.0)}  # (row, col) per frame
ORIENTATIONS = (0.0, 45.0, 90.0, 135.0)


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "motion"
    samples: int = 1000
    frames: int = 8
    image: int = 16
    noise: float = 0.1
    seed: int = 0
    blob_sigma: float = 1.2
    grating_period: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ALIASES.get(self.kind, self.kind))
        if self.kind not in TASKS:
            raise ConfigError(f"task kind must be one of {TASKS}, got {self.kind!r}")

    @property
    def classes(self) -> int:
        return 4


@dataclass
class Dataset:
    pixels: np.ndarray   # (N, T, P, P)
    labels: np.ndarray   # (N,)

    def __len__(self) -> int:
        return len(self.labels)

    def split(self, train_fraction: float = 0.8) -> tuple[Dataset, Dataset]:
        cut = int(round(train_fraction * len(self)))
        return (Dataset(self.pixels[:cut], self.labels[:cut]),
                Dataset(self.pixels[cut:], self.labels[cut:]))

    def as_pair(self):
        return self.pixels, self.labels


def render_motion(label: int, start, frames: int, image: int, sigma: float = 1.2) -> np.ndarray:
    """Noise-free blob clip; ``start`` is the (row, col) centre in frame 0."""
    vr, vc = VELOCITY[int(label)]
    coords = np.arange(image, dtype=np.float64)
    out = np.empty((frames, image, image))
    for t in range(frames):
        cr = start[0] + vr * t
        cc = start[1] + vc * t
        dr = (coords - cr + image / 2) % image - image / 2
        dc = (coords - cc + image / 2) % image - image / 2
        out[t] = np.exp(-(dr[:, None] ** 2 + dc[None, :] ** 2) / (2 * sigma * sigma))
    return out


def render_grating(label: int, phase: float, frames: int, image: int, period: float = 5.0) -> np.ndarray:
    theta = np.deg2rad(ORIENTATIONS[int(label)])
    r, c = np.meshgrid(np.arange(image), np.arange(image), indexing="ij")
    img = np.sin(2 * np.pi * (c * np.cos(theta) + r * np.sin(theta)) / period + phase)
    return np.broadcast_to(img, (frames, image, image)).copy()


def gen_task(task: SyntheticTask) -> Dataset:
    """Deterministic per seed; labels are exactly balanced when samples % 4 == 0."""
    rng = rngs.stream(task.seed, "data", task.kind)
    labels = np.arange(task.samples) % task.classes
    labels = labels[rng.permutation(task.samples)]
    pixels = np.empty((task.samples, task.frames, task.image, task.image))
    for i, y in enumerate(labels):
        if task.kind == "motion":
            start = rng.uniform(0.0, task.image, 2)
            clip = render_motion(y, start, task.frames, task.image, task.blob_sigma)
        else:
            clip = render_grating(y, rng.uniform(0.0, 2 * np.pi), task.frames, task.image, task.grating_period)
        pixels[i] = clip + task.noise * rng.normal(size=clip.shape)
    return Dataset(pixels, labels.astype(np.intp))
