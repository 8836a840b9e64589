"""Synthetic small-object scenes: 3-8 colored shapes on a noisy background.

Images are (1, 3, 128, 128) in [0, 1]; objects are 4-16 px squares, disks,
or crosses whose channel-mean intensity differs from the background by at
least 0.2, so they stay detectable at the default noise level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Rng, Tensor

IMG_SIZE = 128
NUM_CLASSES = 3
CLASS_NAMES = ("square", "disk", "cross")
BG_LEVEL = 0.4
MIN_OBJECTS, MAX_OBJECTS = 3, 8
MIN_SIZE, MAX_SIZE = 4.0, 16.0
MIN_CENTER_DIST = 2.0

_TINTS = np.array([
    [1.0, 0.6, 0.5],   # square: warm
    [0.5, 1.0, 0.6],   # disk: green
    [0.6, 0.5, 1.0],   # cross: blue
])


@dataclass
class ToyObject:
    cls: int
    cx: float
    cy: float
    size: float

    @property
    def box(self) -> tuple[float, float, float, float]:
        half = self.size / 2.0
        return (max(0.0, self.cx - half), max(0.0, self.cy - half),
                min(float(IMG_SIZE), self.cx + half),
                min(float(IMG_SIZE), self.cy + half))


@dataclass
class ToyScene:
    image: Tensor  # (1, 3, IMG_SIZE, IMG_SIZE)
    objects: list[ToyObject]
    sigma: float


def _shape_mask(cls: int, cx: float, cy: float, size: float) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(IMG_SIZE), np.arange(IMG_SIZE), indexing="ij")
    dx = (jj + 0.5) - cx
    dy = (ii + 0.5) - cy
    half = size / 2.0
    if cls == 0:
        return np.maximum(np.abs(dx), np.abs(dy)) <= half
    if cls == 1:
        return dx * dx + dy * dy <= half * half
    arm = max(size / 6.0, 0.75)
    horiz = (np.abs(dy) <= arm) & (np.abs(dx) <= half)
    vert = (np.abs(dx) <= arm) & (np.abs(dy) <= half)
    return horiz | vert


def gen_scene(rng: Rng, sigma: float = 0.05) -> ToyScene:
    """Deterministic scene for a given rng state."""
    count = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1)[0])
    canvas = np.full((3, IMG_SIZE, IMG_SIZE), BG_LEVEL, dtype=np.float64)
    objects: list[ToyObject] = []
    for _ in range(count):
        cls = int(rng.integers(0, NUM_CLASSES)[0])
        size = float(rng.uniform((), MIN_SIZE, MAX_SIZE, dtype="f64"))
        margin = size / 2.0 + 1.0
        while True:
            cx = float(rng.uniform((), margin, IMG_SIZE - margin, dtype="f64"))
            cy = float(rng.uniform((), margin, IMG_SIZE - margin, dtype="f64"))
            if all((cx - o.cx) ** 2 + (cy - o.cy) ** 2 >= MIN_CENTER_DIST ** 2
                   for o in objects):
                break
        bright = float(rng.uniform((), 0.0, 1.0, dtype="f64")) < 0.5
        delta = float(rng.uniform((), 0.30, 0.38, dtype="f64"))
        color = BG_LEVEL + (delta if bright else -delta) * _TINTS[cls]
        mask = _shape_mask(cls, cx, cy, size)
        canvas[:, mask] = np.clip(color, 0.0, 1.0)[:, None]
        objects.append(ToyObject(cls, cx, cy, size))
    if sigma > 0:
        canvas = canvas + sigma * rng.normal((3, IMG_SIZE, IMG_SIZE), dtype="f64")
    image = np.clip(canvas, 0.0, 1.0).astype(np.float32)
    return ToyScene(Tensor(image[None]), objects, sigma)


def scene_batch(scenes: list[ToyScene]) -> Tensor:
    return Tensor(np.concatenate([s.image.data for s in scenes], axis=0))
