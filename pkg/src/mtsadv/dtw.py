"""Multivariate DTW, 1-NN classification and its soft probabilistic form."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import BinaryIO

import numba
import numpy as np

# prefer OpenMP / workqueue; an outdated TBB only produces a warning
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from .data import LabeledDataset

__all__ = [
    "dtw_matrix",
    "dtw_distance",
    "warping_path",
    "multivariate_dtw",
    "distance_tensor",
    "soft_1nn",
    "hard_1nn",
    "DTWClassifier",
    "write_distance_tensor",
    "read_distance_tensor",
]


@numba.njit(cache=True)
def _cumulative(a, b, literal_init):
    n, m = a.shape[0], b.shape[0]
    inf = np.inf
    D = np.full((n + 1, m + 1), inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            if literal_init and i == 1 and j == 1:
                D[1, 1] = 0.0
                continue
            if literal_init and (i == 1 or j == 1):
                continue
            d = a[i - 1] - b[j - 1]
            best = D[i - 1, j - 1]
            if D[i - 1, j] < best:
                best = D[i - 1, j]
            if D[i, j - 1] < best:
                best = D[i, j - 1]
            D[i, j] = d * d + best
    return D


@numba.njit(cache=True)
def _dtw_sq(a, b, literal_init):
    # two-row version of _cumulative, returns D(n, m)
    n, m = a.shape[0], b.shape[0]
    inf = np.inf
    prev = np.full(m + 1, inf)
    cur = np.full(m + 1, inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = inf
        for j in range(1, m + 1):
            if literal_init and (i == 1 or j == 1):
                cur[j] = 0.0 if (i == 1 and j == 1) else inf
                continue
            d = a[i - 1] - b[j - 1]
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = d * d + best
        prev, cur = cur, prev
    return prev[m]


@numba.njit(parallel=True, cache=True)
def _tensor_parallel(qv, ql, rv, rl, literal_init):
    nq, nc = qv.shape[0], qv.shape[1]
    nr = rv.shape[0]
    out = np.empty((nq, nr, nc))
    for i in numba.prange(nq):
        for j in range(nr):
            for c in range(nc):
                out[i, j, c] = np.sqrt(_dtw_sq(qv[i, c, : ql[i]], rv[j, c, : rl[j]], literal_init))
    return out


@numba.njit(cache=True)
def _tensor_serial(qv, ql, rv, rl, literal_init):
    nq, nc = qv.shape[0], qv.shape[1]
    nr = rv.shape[0]
    out = np.empty((nq, nr, nc))
    for i in range(nq):
        for j in range(nr):
            for c in range(nc):
                out[i, j, c] = np.sqrt(_dtw_sq(qv[i, c, : ql[i]], rv[j, c, : rl[j]], literal_init))
    return out


def _seq(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("dtw: empty sequence")
    return x


def dtw_matrix(a, b, literal_init: bool = False) -> np.ndarray:
    """Cumulative-cost grid D of shape (n, m) under squared pointwise cost.

    By default a virtual border with D(0, 0) = 0 is used so that
    D(1, 1) = (a_1 - b_1)^2. ``literal_init=True`` instead fixes D(1, 1) = 0
    with the rest of the first row and column infinite.
    """
    return _cumulative(_seq(a), _seq(b), literal_init)[1:, 1:]


def dtw_distance(a, b, literal_init: bool = False) -> float:
    """sqrt(D(n, m)) between two 1-D sequences, no warping window."""
    return float(np.sqrt(_dtw_sq(_seq(a), _seq(b), literal_init)))


def warping_path(a, b, literal_init: bool = False) -> list[tuple[int, int]]:
    """An optimal warping path as 0-based (i, j) pairs from (0, 0) to (n-1, m-1)."""
    D = _cumulative(_seq(a), _seq(b), literal_init)
    i, j = D.shape[0] - 1, D.shape[1] - 1
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        steps = [(i - 1, j - 1), (i - 1, j), (i, j - 1)]
        i, j = min((s for s in steps if s[0] >= 1 and s[1] >= 1), key=lambda s: D[s])
        path.append((i - 1, j - 1))
    return path[::-1]


def multivariate_dtw(a: np.ndarray, b: np.ndarray, len_a: int | None = None, len_b: int | None = None,
                     literal_init: bool = False) -> float:
    """Sum over channels of the per-channel DTW distance.

    ``a`` and ``b`` are [channels, length] arrays; ``len_a``/``len_b`` cut off
    zero padding.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"multivariate_dtw: channel mismatch {a.shape[0]} vs {b.shape[0]}")
    la = a.shape[1] if len_a is None else len_a
    lb = b.shape[1] if len_b is None else len_b
    return float(sum(dtw_distance(a[c, :la], b[c, :lb], literal_init) for c in range(a.shape[0])))


def _arrays(ds) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(ds, LabeledDataset):
        return np.ascontiguousarray(ds.values), np.ascontiguousarray(ds.lengths, dtype=np.int64)
    values, lengths = ds
    values = np.ascontiguousarray(values, dtype=np.float64)
    if lengths is None:
        lengths = np.full(len(values), values.shape[2])
    return values, np.ascontiguousarray(lengths, dtype=np.int64)


def distance_tensor(queries, references, literal_init: bool = False, parallel: bool = True) -> np.ndarray:
    """Per-channel DTW distances, shape [N_query, N_reference, channels].

    Either argument may be a :class:`LabeledDataset` or a ``(values,
    lengths)`` pair. Entries are independent, so the parallel and serial
    paths give identical results.
    """
    qv, ql = _arrays(queries)
    rv, rl = _arrays(references)
    if qv.shape[1] != rv.shape[1]:
        raise ValueError(f"distance_tensor: channel mismatch {qv.shape[1]} vs {rv.shape[1]}")
    if len(qv) == 0 or len(rv) == 0:
        return np.zeros((len(qv), len(rv), qv.shape[1]))
    fn = _tensor_parallel if parallel else _tensor_serial
    return fn(qv, ql, rv, rl, literal_init)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def soft_1nn(V: np.ndarray, train_labels, n_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Probabilistic equivalent of 1-NN over a distance tensor.

    Negate ``V`` [N_test, N_train, channels], sum the channels, take the
    per-class maximum over training samples, softmax over classes. The
    returned argmax (ties to the lowest class index) is the hard 1-NN
    decision.
    """
    V = np.asarray(V, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    if V.ndim != 3 or V.shape[1] != len(y):
        raise ValueError(f"soft_1nn: distance tensor {V.shape} does not match {len(y)} train labels")
    k = int(y.max()) + 1 if n_classes is None else n_classes
    present = np.bincount(y, minlength=k)
    if np.any(present == 0):
        missing = np.flatnonzero(present == 0).tolist()
        raise ValueError(f"soft_1nn: classes {missing} absent from train labels")
    neg = -V.sum(axis=2)
    scores = np.stack([neg[:, y == c].max(axis=1) for c in range(k)], axis=1)
    p = _softmax_rows(scores)
    # argmax over the scores directly: softmax is monotone, and this keeps
    # exact ties between classes intact for the lowest-index rule
    q = scores.argmax(axis=1)
    return p, q


def hard_1nn(V: np.ndarray, train_labels) -> np.ndarray:
    """Label of the nearest training sample by channel-summed distance.

    Ties between equally near samples go to the lowest class index.
    """
    y = np.asarray(train_labels, dtype=np.int64)
    total = np.asarray(V, dtype=np.float64).sum(axis=2)
    best = total.min(axis=1, keepdims=True)
    hits = total == best
    return np.array([y[row].min() for row in hits])


class DTWClassifier:
    """1-NN DTW over a fixed reference (training) set.

    Distance rows already computed (or loaded from a cache with
    :meth:`remember`) are reused for identical query series.
    """

    kind = "dtw"

    def __init__(self, train: LabeledDataset, literal_init: bool = False, parallel: bool = True):
        self.train = train
        self.literal_init = literal_init
        self.parallel = parallel
        self._rows: dict[bytes, np.ndarray] = {}
        self.computed_rows = 0

    @property
    def n_classes(self) -> int:
        return self.train.n_classes

    @staticmethod
    def _keys(values: np.ndarray, lengths: np.ndarray) -> list[bytes]:
        return [
            hashlib.sha1(np.ascontiguousarray(v[:, :n]).tobytes() + int(n).to_bytes(8, "little")).digest()
            for v, n in zip(values, lengths)
        ]

    def remember(self, values, lengths, V: np.ndarray) -> None:
        values, lengths = _arrays((values, lengths))
        for k, row in zip(self._keys(values, lengths), V):
            self._rows[k] = row

    def distances(self, values, lengths=None) -> np.ndarray:
        values, lengths = _arrays((values, lengths))
        keys = self._keys(values, lengths)
        todo = [i for i, k in enumerate(keys) if k not in self._rows]
        if todo:
            fresh = distance_tensor((values[todo], lengths[todo]), self.train, self.literal_init, self.parallel)
            self.computed_rows += len(todo)
            for i, row in zip(todo, fresh):
                self._rows[keys[i]] = row
        if not len(keys):
            return np.zeros((0, len(self.train), self.train.channels))
        return np.stack([self._rows[k] for k in keys])

    def predict_proba(self, values, lengths=None) -> np.ndarray:
        return soft_1nn(self.distances(values, lengths), self.train.labels, self.n_classes)[0]

    def predict(self, values, lengths=None) -> np.ndarray:
        return soft_1nn(self.distances(values, lengths), self.train.labels, self.n_classes)[1]


# --------------------------------------------------------------------------
# binary cache format: three little-endian u64 dims, then row-major f64


def write_distance_tensor(V: np.ndarray, sink: BinaryIO | str | Path) -> None:
    V = np.asarray(V, dtype="<f8")
    if V.ndim != 3:
        raise ValueError(f"distance tensor must be rank 3, got shape {V.shape}")
    payload = struct.pack("<3Q", *V.shape) + np.ascontiguousarray(V).tobytes()
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(payload)
    else:
        sink.write(payload)


def read_distance_tensor(source: BinaryIO | str | Path) -> np.ndarray:
    raw = Path(source).read_bytes() if isinstance(source, (str, Path)) else source.read()
    if len(raw) < 24:
        raise ValueError("distance tensor file truncated")
    shape = struct.unpack_from("<3Q", raw)
    expected = 24 + 8 * int(np.prod(shape))
    if len(raw) != expected:
        raise ValueError(f"distance tensor file has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f8", offset=24).reshape(shape).astype(np.float64)
