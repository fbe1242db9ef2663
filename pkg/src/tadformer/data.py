"""Synthetic correlated multi-task dense-prediction data.

Every sample is driven by one smooth latent field on the patch grid. The
image is a noisy nonlinear rendering of that field at pixel resolution, and
each task target is a different function of the same field, so the tasks
share structure.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import TaskKind


@dataclass
class SynthSample:
    image: np.ndarray  # (in_chans, h*p, w*p) float32
    targets: list  # per task: (h*w,) int labels or float values


@dataclass
class SynthDataset:
    images: np.ndarray  # (n, in_chans, h*p, w*p)
    targets: list  # per task: (n, h*w)

    def __len__(self):
        return self.images.shape[0]

    def batch(self, idx):
        idx = np.asarray(idx)
        return self.images[idx], [t[idx] for t in self.targets]

    def sample(self, i):
        return SynthSample(self.images[i], [t[i] for t in self.targets])


def latent_field(rng, grid, smoothness=2.0):
    h, w = grid
    z = gaussian_filter(rng.standard_normal((h, w)), sigma=smoothness, mode="wrap")
    lo, hi = z.min(), z.max()
    return (z - lo) / (hi - lo) if hi > lo else np.zeros_like(z)


def _make_sample(seed, index, tasks, grid, patch_size, in_chans):
    rng = np.random.default_rng([seed, index])
    z = latent_field(rng, grid)
    h, w = grid
    fine = np.kron(z, np.ones((patch_size, patch_size)))
    chans = [fine, np.sin(2 * np.pi * fine), fine**2]
    while len(chans) < in_chans:
        chans.append(np.cos(np.pi * len(chans) * fine))
    image = np.stack(chans[:in_chans]) + 0.05 * rng.standard_normal((in_chans, h * patch_size, w * patch_size))

    targets = []
    for task in tasks:
        if task.kind is TaskKind.CLASS_SEG:
            lab = np.minimum((z * task.classes).astype(np.int64), task.classes - 1)
            targets.append(lab.reshape(-1))
        elif task.kind is TaskKind.REGRESSION:
            gy, gx = np.gradient(z)
            targets.append((np.hypot(gy, gx) * max(h, w) / 4).astype(np.float32).reshape(-1))
        else:
            targets.append((z > np.median(z)).astype(np.int64).reshape(-1))
    return image.astype(np.float32), targets


def synth_generate(seed, tasks, grid=(16, 16), count=64, patch_size=1, in_chans=3, workers=1) -> SynthDataset:
    """Deterministic dataset of ``count`` samples.

    Per-sample generators are seeded from ``(seed, index)``, so the result
    does not depend on ``workers``.
    """
    grid = tuple(grid)
    args = [(seed, i, tasks, grid, patch_size, in_chans) for i in range(count)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda a: _make_sample(*a), args))
    else:
        samples = [_make_sample(*a) for a in args]
    images = np.stack([s[0] for s in samples]) if samples else np.zeros((0, in_chans, grid[0] * patch_size, grid[1] * patch_size), np.float32)
    targets = [np.stack([s[1][i] for s in samples]) if samples else np.zeros((0, grid[0] * grid[1])) for i in range(len(tasks))]
    return SynthDataset(images, targets)
