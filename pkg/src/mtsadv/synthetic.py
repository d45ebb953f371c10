"""Small generated datasets for smoke runs and tests."""

from __future__ import annotations

import numpy as np

from .data import LabeledDataset


def make_bumps(
    n: int,
    channels: int = 3,
    length: int = 32,
    n_classes: int = 2,
    noise: float = 0.3,
    seed: int = 0,
    name: str = "SyntheticBumps",
) -> LabeledDataset:
    """Noisy series whose class decides where a Gaussian bump sits in time.

    Classes are balanced (round-robin) and separable by bump position, with
    a per-channel amplitude so every channel carries signal.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    t = np.arange(length)
    centres = (np.arange(n_classes) + 0.5) * length / n_classes
    width = length / (3.0 * n_classes)
    amps = 1.0 + 0.5 * np.arange(channels)
    values = rng.normal(0.0, noise, size=(n, channels, length))
    for i, y in enumerate(labels):
        shift = rng.uniform(-width / 2, width / 2)
        bump = np.exp(-0.5 * ((t - centres[y] - shift) / width) ** 2)
        values[i] += amps[:, None] * bump[None, :]
    return LabeledDataset(
        values, np.full(n, length), labels,
        tuple(f"c{k}" for k in range(n_classes)), name=name,
    )
