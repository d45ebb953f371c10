"""Shared oracles and fixtures-by-function for the test suite."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mtsadv import tensor as T
from mtsadv.data import serialize_ts
from mtsadv.synthetic import make_bumps

FD_STEP = 1e-5
REL_TOL = 1e-6
# analytic gradients that are exactly zero (e.g. a bias feeding batch-norm)
# are compared against FD noise of ~1e-11; this floor keeps the ratio meaningful
REL_FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)


def numeric_gradient(f, arr: np.ndarray, idx, h: float = FD_STEP) -> float:
    """Central difference of scalar ``f()`` with respect to ``arr[idx]`` (in place)."""
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def branch_pattern(loss: T.Tensor) -> list[np.ndarray]:
    """Which side of every ReLU and which window maximum every pool selected."""
    pattern = []
    for node in T.computation_record(loss):
        x = node.parents[0].data
        if node.op == "relu":
            pattern.append(x > 0)
        elif node.op == "max_pool1d":
            n, c, length = x.shape
            width = length // node.shape[2]
            pattern.append(x[:, :, : node.shape[2] * width].reshape(n, c, node.shape[2], width).argmax(axis=3))
    return pattern


def probe(loss_fn, arr: np.ndarray, idx, h: float = FD_STEP) -> tuple[float, bool]:
    """Central difference at ``arr[idx]`` and whether +-h switches a branch.

    Central differences are only meaningful where the loss is smooth on
    [x - h, x + h]; a switched ReLU or pooling branch marks the probe.
    """
    old = arr[idx]
    arr[idx] = old + h
    up = loss_fn()
    arr[idx] = old - h
    down = loss_fn()
    arr[idx] = old
    kink = any(not np.array_equal(u, d) for u, d in zip(branch_pattern(up), branch_pattern(down)))
    return (float(up.data) - float(down.data)) / (2 * h), kink


@dataclass
class GradCheck:
    worst: float = 0.0
    where: tuple | None = None
    probes: int = 0
    redrawn: int = 0


def check_gradients(loss_fn, tensors: dict[str, T.Tensor], rng: np.random.Generator,
                    max_entries: int = 12) -> GradCheck:
    """Compare reverse-mode gradients with central differences.

    ``loss_fn()`` builds a fresh graph and returns a scalar Tensor. Up to
    ``max_entries`` randomly chosen entries of every tensor are probed;
    entries whose FD interval crosses a ReLU or max-pool switch are
    replaced by other entries and counted in ``redrawn``.
    """
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    loss = loss_fn()
    T.backward(loss)
    out = GradCheck()
    for name, t in tensors.items():
        flat = list(itertools.product(*[range(s) for s in t.data.shape]))
        order = rng.permutation(len(flat))
        done = 0
        for p in order:
            if done == max_entries:
                break
            idx = flat[p]
            n, kink = probe(loss_fn, t.data, idx)
            if kink:
                out.redrawn += 1
                continue
            a = float(t.grad[idx])
            err = float(relative_error(np.array(a), np.array(n)))
            done += 1
            out.probes += 1
            if err > out.worst:
                out.worst, out.where = err, (name, idx, a, n)
    return out


def brute_force_dtw(a, b) -> float:
    """Minimum over every warping path of the summed squared costs, then sqrt.

    Paths are enumerated recursively from (0, 0) with the three admissible
    steps, so this shares nothing with the dynamic programme.
    """
    n, m = len(a), len(b)
    best = np.inf

    def walk(i, j, acc):
        nonlocal best
        acc += (a[i] - b[j]) ** 2
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            return
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)

    walk(0, 0, 0.0)
    return float(np.sqrt(best))


def brute_force_signed_rank_p(a, b) -> float:
    """Two-sided p-value from all 2^n sign assignments of the ranked differences."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    mags = np.abs(d)
    # average ranks by direct counting
    ranks = np.array([np.sum(mags < v) + (np.sum(mags == v) + 1) / 2.0 for v in mags])
    w = min(ranks[d > 0].sum(), ranks[d < 0].sum())
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        if np.dot(signs, ranks) <= w + 1e-9:
            hits += 1
    return min(1.0, 2.0 * hits / 2 ** len(d))


def write_synthetic_pair(directory: Path, n_train: int = 100, n_test: int = 100, name: str = "Synth",
                         **kwargs) -> tuple[Path, Path]:
    """Write ``<name>_TRAIN.ts`` and ``<name>_TEST.ts`` bump datasets."""
    directory.mkdir(parents=True, exist_ok=True)
    train = directory / f"{name}_TRAIN.ts"
    test = directory / f"{name}_TEST.ts"
    train.write_text(serialize_ts(make_bumps(n_train, seed=101, name=name, **kwargs)))
    test.write_text(serialize_ts(make_bumps(n_test, seed=202, name=name, **kwargs)))
    return train, test
