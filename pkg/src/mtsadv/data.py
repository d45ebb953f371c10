"""Reading, writing, normalising and splitting ``.ts`` multivariate datasets."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

__all__ = [
    "TsParseError",
    "NormStats",
    "LabeledDataset",
    "SplitSpec",
    "parse_ts",
    "load_ts",
    "serialize_ts",
    "compute_stats",
    "znormalize",
    "stratified_split",
    "split_manifest",
    "relabel_by_model",
    "pad_to",
]


class TsParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source:
            where += f"{source}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.source = source


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    zero_variance: np.ndarray

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "zero_variance": self.zero_variance.tolist(),
        }


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Zero-padded series ``values`` [N, channels, max_length] with integer labels.

    ``true_labels`` is only set after :func:`relabel_by_model`; it keeps the
    archive labels for final evaluation while ``labels`` hold the model's
    predictions.
    """

    values: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    name: str = "dataset"
    stats: NormStats | None = None
    true_labels: np.ndarray | None = None
    indices: np.ndarray | None = None

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        if values.ndim != 3:
            raise ValueError(f"values must be [N, channels, length], got shape {values.shape}")
        n, c, length = values.shape
        lengths = _frozen(self.lengths, np.int64)
        labels = _frozen(self.labels, np.int64)
        if len(lengths) != n or len(labels) != n:
            raise ValueError("values, lengths and labels must have equal length")
        if n and (c < 1 or lengths.min() < 1 or lengths.max() > length):
            raise ValueError("every series needs >= 1 channel and 1 <= length <= max-length")
        k = len(self.class_names)
        if n and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.true_labels is not None:
            object.__setattr__(self, "true_labels", _frozen(self.true_labels, np.int64))
        idx = np.arange(n) if self.indices is None else self.indices
        object.__setattr__(self, "indices", _frozen(idx, np.int64))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def max_length(self) -> int:
        return self.values.shape[2]

    @property
    def ground_truth(self) -> np.ndarray:
        return self.labels if self.true_labels is None else self.true_labels

    def mask(self) -> np.ndarray:
        """[N, 1, max_length] array, 1 at valid positions and 0 in padding."""
        pos = np.arange(self.max_length)[None, None, :]
        return (pos < self.lengths[:, None, None]).astype(np.float64)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            values=self.values[idx],
            lengths=self.lengths[idx],
            labels=self.labels[idx],
            true_labels=None if self.true_labels is None else self.true_labels[idx],
            indices=self.indices[idx],
        )

    def with_values(self, values: np.ndarray) -> "LabeledDataset":
        return replace(self, values=values)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.lengths, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update("\x00".join(self.class_names).encode())
        return h.hexdigest()

    def equals(self, other: "LabeledDataset") -> bool:
        return (
            self.name == other.name
            and self.class_names == other.class_names
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.lengths, other.lengths)
            and np.array_equal(self.labels, other.labels)
        )


# --------------------------------------------------------------------------
# .ts parsing


_BOOL = {"true": True, "false": False}


def parse_ts(stream: TextIO | str | Iterable[str], source: str | None = None) -> LabeledDataset:
    """Parse a ``.ts`` archive file.

    Header directives start with ``@`` (case-insensitive) and end at
    ``@data``. Each data line is ``v,v,...:v,v,...:label`` with one
    colon-separated field per channel. Labels are mapped to ``0..C-1`` in
    the order declared by ``@classLabel``. Series of unequal length are
    zero-padded to the longest one. Missing values (``?``, ``NaN``) are
    rejected.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    name = "dataset"
    dimensions = None
    class_names: list[str] | None = None
    in_data = False
    rows: list[list[np.ndarray]] = []
    labels: list[int] = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not in_data:
            if not line.startswith("@"):
                raise TsParseError(f"expected a header directive, got {line[:40]!r}", lineno, source)
            key, _, rest = line[1:].partition(" ")
            key = key.lower()
            rest = rest.strip()
            if key == "problemname":
                name = rest
            elif key == "dimensions":
                try:
                    dimensions = int(rest)
                except ValueError:
                    raise TsParseError(f"bad @dimensions value {rest!r}", lineno, source) from None
            elif key == "timestamps":
                if _BOOL.get(rest.lower()):
                    raise TsParseError("timestamped series are not supported", lineno, source)
            elif key == "classlabel":
                parts = rest.split()
                if not parts or parts[0].lower() != "true":
                    raise TsParseError("a classification file needs '@classLabel true <labels>'", lineno, source)
                class_names = parts[1:]
                if not class_names:
                    raise TsParseError("@classLabel declares no labels", lineno, source)
                if len(set(class_names)) != len(class_names):
                    raise TsParseError("@classLabel declares duplicate labels", lineno, source)
            elif key == "data":
                if class_names is None:
                    raise TsParseError("@data reached without a @classLabel declaration", lineno, source)
                in_data = True
            # remaining directives (@univariate, @equalLength, @seriesLength, ...) are implied by the data
            continue
        fields = line.split(":")
        if len(fields) < 2:
            raise TsParseError("data line needs at least one channel and a label", lineno, source)
        label = fields[-1].strip()
        if label not in class_names:
            raise TsParseError(f"unknown class label {label!r}", lineno, source)
        channels = []
        for ch in fields[:-1]:
            items = [v.strip() for v in ch.split(",")]
            if any(v == "?" or v.lower() == "nan" for v in items):
                raise TsParseError("missing values are not supported", lineno, source)
            try:
                vals = np.array([float(v) for v in items], dtype=np.float64)
            except ValueError:
                raise TsParseError("non-numeric value in series", lineno, source) from None
            if ch.strip() == "" or vals.size == 0:
                raise TsParseError("empty channel", lineno, source)
            if not np.all(np.isfinite(vals)):
                raise TsParseError("missing or non-finite values are not supported", lineno, source)
            channels.append(vals)
        expected = dimensions if dimensions is not None else (len(rows[0]) if rows else len(channels))
        if len(channels) != expected:
            raise TsParseError(f"expected {expected} channels, found {len(channels)}", lineno, source)
        if len({len(c) for c in channels}) != 1:
            raise TsParseError(
                f"ragged channels: lengths {[len(c) for c in channels]} within one sample", lineno, source
            )
        rows.append(channels)
        labels.append(class_names.index(label))
    if not in_data:
        raise TsParseError("no @data section found", None, source)
    if not rows:
        raise TsParseError("no samples after @data", None, source)
    n_ch = len(rows[0])
    lengths = np.array([len(r[0]) for r in rows])
    values = np.zeros((len(rows), n_ch, lengths.max()))
    for i, r in enumerate(rows):
        values[i, :, : lengths[i]] = np.stack(r)
    return LabeledDataset(values, lengths, np.array(labels), tuple(class_names), name=name)


def load_ts(path: str | Path) -> LabeledDataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return parse_ts(fh, source=str(path))


def serialize_ts(ds: LabeledDataset) -> str:
    """Canonical ``.ts`` text for ``ds`` (unpadded, ``repr`` floats)."""
    equal = bool(np.all(ds.lengths == ds.lengths[0])) if len(ds) else True
    out = [
        f"@problemName {ds.name}",
        "@timeStamps false",
        "@missing false",
        f"@univariate {'true' if ds.channels == 1 else 'false'}",
        f"@dimensions {ds.channels}",
        f"@equalLength {'true' if equal else 'false'}",
    ]
    if equal and len(ds):
        out.append(f"@seriesLength {int(ds.lengths[0])}")
    out.append("@classLabel true " + " ".join(ds.class_names))
    out.append("@data")
    for x, n, y in zip(ds.values, ds.lengths, ds.labels):
        chans = [",".join(repr(float(v)) for v in x[c, :n]) for c in range(ds.channels)]
        out.append(":".join(chans) + ":" + ds.class_names[y])
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# normalisation


def compute_stats(ds: LabeledDataset) -> NormStats:
    """Per-channel mean and standard deviation over valid (unpadded) positions."""
    if len(ds) == 0:
        raise ValueError("cannot normalise an empty dataset")
    m = ds.mask()
    count = m.sum(axis=(0, 2))
    mean = (ds.values * m).sum(axis=(0, 2)) / count
    var = (((ds.values - mean[None, :, None]) * m) ** 2).sum(axis=(0, 2)) / count
    std = np.sqrt(var)
    flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(flat, 1.0, std)
    return NormStats(_frozen(mean, np.float64), _frozen(std, np.float64), _frozen(flat, bool))


def znormalize(ds: LabeledDataset, stats: NormStats | None = None) -> tuple[LabeledDataset, NormStats]:
    """Rescale each channel to zero mean and unit variance.

    With ``stats=None`` the statistics are computed from ``ds`` itself;
    otherwise the given statistics (typically from a reference split) are
    applied. Channels flagged as zero-variance are only centred. Padding stays
    zero. The map is affine, so applying it twice is not the same as once.
    """
    if stats is None:
        stats = compute_stats(ds)
    if len(stats.mean) != ds.channels:
        raise ValueError(f"statistics cover {len(stats.mean)} channels, dataset has {ds.channels}")
    scaled = (ds.values - stats.mean[None, :, None]) / stats.std[None, :, None]
    return replace(ds, values=scaled * ds.mask(), stats=stats), stats


# --------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    fractions: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        f = tuple(float(v) for v in self.fractions)
        if len(f) != 2 or min(f) < 0 or abs(sum(f) - 1.0) > 1e-12:
            raise ValueError(f"fractions must be two nonnegative reals summing to 1, got {self.fractions}")
        object.__setattr__(self, "fractions", f)


def stratified_split(ds: LabeledDataset, spec: SplitSpec = SplitSpec()) -> tuple[LabeledDataset, LabeledDataset]:
    """Split into two parts preserving class balance.

    Each class is shuffled with the seeded generator and divided by
    ``spec.fractions``; when a class cannot be divided exactly its extra
    sample goes to whichever part is furthest below its overall target, so
    per-class counts never differ from the ideal by more than one.
    """
    rng = np.random.default_rng(spec.seed)
    counts = np.bincount(ds.labels, minlength=ds.n_classes)
    for c, k in enumerate(counts):
        if 0 < k < 2:
            raise ValueError(f"class {ds.class_names[c]!r} has a single sample and cannot be split")
    f0 = spec.fractions[0]
    target0 = f0 * len(ds)
    first: list[int] = []
    second: list[int] = []
    for c in range(ds.n_classes):
        members = np.flatnonzero(ds.labels == c)
        if not len(members):
            continue
        members = members[rng.permutation(len(members))]
        exact = f0 * len(members)
        k0 = int(np.floor(exact + 1e-9))
        if exact - k0 > 1e-9:
            deficit0 = target0 - (len(first) + k0)
            deficit1 = (len(ds) - target0) - (len(second) + len(members) - k0 - 1)
            if deficit0 >= deficit1:
                k0 += 1
        first.extend(members[:k0].tolist())
        second.extend(members[k0:].tolist())
    return ds.subset(sorted(first)), ds.subset(sorted(second))


def split_manifest(parts: dict[str, LabeledDataset], spec: SplitSpec) -> str:
    """JSON record of which source indices went into each split."""
    return json.dumps(
        {
            "seed": spec.seed,
            "fractions": list(spec.fractions),
            "splits": {k: v.indices.tolist() for k, v in parts.items()},
        },
        indent=2,
        sort_keys=True,
    )


def relabel_by_model(ds: LabeledDataset, model) -> LabeledDataset:
    """Replace labels by ``model.predict`` while keeping the originals.

    ``model`` needs ``n_classes`` and ``predict(values, lengths)``.
    """
    if model.n_classes != ds.n_classes:
        raise ValueError(f"model has {model.n_classes} classes, dataset has {ds.n_classes}")
    pred = np.asarray(model.predict(ds.values, ds.lengths), dtype=np.int64)
    return replace(ds, labels=pred, true_labels=ds.ground_truth.copy())


def pad_to(ds: LabeledDataset, length: int) -> LabeledDataset:
    """Zero-pad ``ds`` to ``length`` time steps (no-op when already that long)."""
    if length < ds.max_length:
        raise ValueError(f"cannot pad a length-{ds.max_length} dataset down to {length}")
    if length == ds.max_length:
        return ds
    values = np.zeros((len(ds), ds.channels, length))
    values[:, :, : ds.max_length] = ds.values
    return replace(ds, values=values)
