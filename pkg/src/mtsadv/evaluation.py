"""Adversary counting, perturbation error, signed-rank tests and report files."""

from __future__ import annotations

import csv
import io
import json
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attack import AdversarialBatch, per_sample_squared_error

EXACT_MAX_N = 25
CSV_COLUMNS = ["Dataset", "Attack", "Model", "Beta", "Evaluated On", "Num. of Adversaries", "MSE"]


@dataclass
class AttackReport:
    dataset: str
    mode: str
    model_kind: str
    beta: float
    target: int
    evaluated_on: str
    n_evaluated: int
    adversary_count: int
    mse: float | None
    mse_all: float
    adversary_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.adversary_count <= self.n_evaluated:
            raise ValueError("adversary count must lie in [0, number evaluated]")

    def to_dict(self) -> dict:
        return asdict(self)


def count_adversaries(
    batch: AdversarialBatch,
    ground_truth,
    model=None,
    *,
    unlabeled: bool = False,
    dataset: str = "dataset",
    mode: str = "white-box",
    model_kind: str = "fcn",
    beta: float = float("nan"),
    target: int = 0,
    evaluated_on: str = "eval",
) -> AttackReport:
    """Count samples the attacked model gets right on x and changes on x_hat.

    ``model`` is the attacked (teacher) model; when omitted, the predictions
    already attached to ``batch`` are used. With ``unlabeled=True`` the
    model's clean prediction stands in for the ground truth, so only the
    label change is required.
    """
    y = np.asarray(ground_truth, dtype=np.int64)
    if len(y) != len(batch):
        raise ValueError(f"{len(y)} labels for {len(batch)} samples")
    if model is not None:
        batch.with_target_predictions(model)
    if batch.clean_pred is None:
        raise ValueError("batch carries no attacked-model predictions and no model was given")
    clean, adv = batch.clean_pred, batch.adv_pred
    correct = np.ones(len(y), bool) if unlabeled else clean == y
    hit = correct & (adv != clean)
    se = batch.squared_error
    idx = np.flatnonzero(hit)
    return AttackReport(
        dataset=dataset, mode=mode, model_kind=model_kind, beta=float(beta), target=target,
        evaluated_on=evaluated_on, n_evaluated=len(y), adversary_count=int(hit.sum()),
        mse=float(se[idx].mean()) if len(idx) else None,
        mse_all=float(se.mean()) if len(se) else 0.0,
        adversary_indices=[int(batch.sample_ids[i]) for i in idx],
    )


def perturbation_mse(x, x_hat, lengths=None) -> float:
    """Mean over samples of the mean squared difference over channels x valid steps."""
    return float(per_sample_squared_error(x, x_hat, lengths).mean())


# --------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass(frozen=True)
class SignedRankResult:
    statistic: float
    p_value: float
    n: int
    method: str


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v))
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def signed_rank_null(ranks) -> tuple[np.ndarray, np.ndarray]:
    """Exact null distribution of W+ for the given (possibly tied) ranks.

    Returns the support (rank sums) and their probabilities. Ranks are
    doubled to integers so half-ranks from ties are handled exactly.
    """
    twice = np.rint(2 * np.asarray(ranks, dtype=np.float64)).astype(np.int64)
    counts = _exact_counts(twice)
    support = [s for s, c in enumerate(counts) if c]
    scale = 2 ** len(twice)
    return np.array(support) / 2.0, np.array([float(Fraction(counts[s], scale)) for s in support])


def wilcoxon_signed_rank(a, b, exact_max_n: int = EXACT_MAX_N) -> SignedRankResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped, tied magnitudes share their average rank.
    The statistic is ``min(W+, W-)``. For ``n <= exact_max_n`` the p-value
    comes from the exact permutation distribution; above that a normal
    approximation with tie-corrected variance and continuity correction is
    used.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D arrays of equal length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n < 5:
        raise ValueError(f"only {n} nonzero differences; at least 5 are needed")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= exact_max_n:
        twice = np.rint(2 * ranks).astype(np.int64)
        counts = _exact_counts(twice)
        tail = sum(counts[: int(round(2 * w)) + 1], 0)
        p = min(Fraction(1), Fraction(2 * tail, 2 ** n))
        return SignedRankResult(w, float(p), n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    p = math.erfc(z / math.sqrt(2.0))
    return SignedRankResult(w, min(1.0, p), n, "normal")


def _exact_counts(twice: np.ndarray) -> list[int]:
    total = int(twice.sum())
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in twice:
        r = int(r)
        for s in range(total, r - 1, -1):
            counts[s] += counts[s - r]
    return counts


# --------------------------------------------------------------------------
# report files


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def reports_csv(reports: list[AttackReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([r.dataset, r.mode, r.model_kind, _fmt(r.beta), r.evaluated_on, r.adversary_count, _fmt(r.mse)])
    return buf.getvalue()


def emit_report(
    reports: list[AttackReport],
    out_dir: str | Path,
    comparisons: dict | None = None,
    stem: str = "report",
) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (one row per report) and ``<stem>.json`` (full detail)."""
    if not reports:
        raise ValueError("emit_report needs at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    csv_path.write_text(reports_csv(reports))
    payload = {"reports": [r.to_dict() for r in reports], "comparisons": comparisons or {}}
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
