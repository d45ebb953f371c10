"""Gradient adversarial transformation network: training and generation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import read_container, write_container
from .data import LabeledDataset
from .models import Classifier, GATNGenerator, TrainConfig, TrainResult, fit, input_gradient
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_BETAS = tuple(10.0 ** -b for b in range(1, 6))


@dataclass(frozen=True)
class AttackConfig:
    target: int = 0
    alpha: float = 1.5
    betas: tuple[float, ...] = DEFAULT_BETAS
    mode: str = "white-box"
    model_kind: str = "fcn"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=1000))

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.alpha <= 1:
            raise ValueError(f"reranking weight alpha must exceed 1, got {self.alpha}")
        if not self.betas or any(b <= 0 for b in self.betas):
            raise ValueError("every beta must be positive")
        if self.target < 0:
            raise ValueError("target class must be nonnegative")
        if self.mode not in ("white-box", "black-box"):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.model_kind not in ("dtw", "fcn"):
            raise ValueError(f"unknown attacked model kind {self.model_kind!r}")

    @property
    def attacks_teacher_directly(self) -> bool:
        """Only a white-box attack on the network uses it as its own surrogate."""
        return self.mode == "white-box" and self.model_kind == "fcn"


def rerank(y, target: int, alpha: float = 1.5) -> np.ndarray:
    """Boost the target entry to ``alpha * max(y)`` and renormalise by the sum.

    Works on a single probability vector or on rows of a [N, C] array.
    """
    y = np.asarray(y, dtype=np.float64)
    if alpha <= 1:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    if not 0 <= target < y.shape[-1]:
        raise ValueError(f"target class {target} out of range [0, {y.shape[-1]})")
    r = y.copy()
    r[..., target] = alpha * y.max(axis=-1)
    return r / r.sum(axis=-1, keepdims=True)


def atn_loss(x: Tensor, x_hat: Tensor, f_hat: Tensor, rerank_target: np.ndarray, beta: float) -> Tensor:
    """``beta * MSE(x_hat, x) + mean_i ||f(x_hat_i) - r_i||^2``."""
    if x.shape != x_hat.shape:
        raise T.ShapeError(f"atn_loss: shape mismatch x {x.shape} vs x_hat {x_hat.shape}")
    r = Tensor(rerank_target)
    if f_hat.shape != r.shape:
        raise T.ShapeError(f"atn_loss: shape mismatch output {f_hat.shape} vs target {r.shape}")
    d = T.sub(f_hat, r)
    l_y = T.scale(T.sum_all(T.mul(d, d)), 1.0 / f_hat.shape[0])
    return T.add(T.scale(T.mse(x_hat, x), beta), l_y)


def gradient_features(surrogate: Classifier, values: np.ndarray, target: int) -> np.ndarray:
    """Target-class input gradient of each sample, scaled to unit max-magnitude."""
    g = input_gradient(surrogate, values, target)
    peak = np.abs(g).max(axis=(1, 2), keepdims=True)
    return np.divide(g, peak, out=np.zeros_like(g), where=peak > 0)


def _require_logits(surrogate) -> None:
    if not isinstance(surrogate, Classifier):
        raise TypeError(f"surrogate must be a differentiable classifier exposing logits, got {type(surrogate).__name__}")


class _Frozen:
    """Eval mode and no parameter gradients for the duration of a block."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.flags = {k: p.requires_grad for k, p in self.model.params.items()}
        self.training = self.model.training
        self.model.eval().requires_grad_(False)
        return self.model

    def __exit__(self, *exc):
        for k, p in self.model.params.items():
            p.requires_grad = self.flags[k]
        self.model.train(self.training)


def _channel_mask(ds: LabeledDataset) -> np.ndarray:
    return np.ascontiguousarray(np.broadcast_to(ds.mask(), ds.values.shape))


def train_gatn(
    generator: GATNGenerator,
    surrogate: Classifier,
    train: LabeledDataset,
    beta: float,
    config: AttackConfig,
) -> TrainResult:
    """Fit ``generator`` against the frozen ``surrogate`` on ``train``.

    The rerank targets and input gradients are computed once from the
    surrogate's output on the clean series, since the surrogate never changes.
    """
    _require_logits(surrogate)
    if not 0 <= config.target < surrogate.n_classes:
        raise ValueError(f"target class {config.target} out of range [0, {surrogate.n_classes})")
    x = train.values
    mask = _channel_mask(train)
    with _Frozen(surrogate):
        r = rerank(surrogate.predict_proba(x), config.target, config.alpha)
        xg = gradient_features(surrogate, x, config.target)

        def batch_loss(idx):
            xb = Tensor(x[idx])
            x_hat = generator.forward(xb, Tensor(xg[idx]), mask[idx])
            return atn_loss(xb, x_hat, surrogate.forward(x_hat), r[idx], beta)

        result = fit(generator, len(x), config.train, batch_loss)
    generator.metadata.update(
        seed=config.train.seed, epochs=config.train.epochs, final_loss=result.final_loss,
        beta=beta, alpha=config.alpha, target=config.target,
    )
    return result


@dataclass
class AdversarialBatch:
    """Clean and perturbed series plus everything needed to score them."""

    x: np.ndarray
    x_hat: np.ndarray
    x_grad: np.ndarray
    lengths: np.ndarray
    sample_ids: np.ndarray
    surrogate_clean: np.ndarray
    surrogate_adv: np.ndarray
    clean_pred: np.ndarray | None = None
    adv_pred: np.ndarray | None = None

    def __post_init__(self):
        if self.x.shape != self.x_hat.shape:
            raise T.ShapeError(f"batch: shape mismatch x {self.x.shape} vs x_hat {self.x_hat.shape}")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def squared_error(self) -> np.ndarray:
        """Per-sample mean of (x_hat - x)^2 over channels and valid time steps."""
        return per_sample_squared_error(self.x, self.x_hat, self.lengths)

    def with_target_predictions(self, model) -> "AdversarialBatch":
        """Attach the attacked model's predictions on x and x_hat."""
        self.clean_pred = np.asarray(model.predict(self.x, self.lengths), dtype=np.int64)
        self.adv_pred = np.asarray(model.predict(self.x_hat, self.lengths), dtype=np.int64)
        return self

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tensors = {
            "x": self.x, "x_hat": self.x_hat, "x_grad": self.x_grad,
            "lengths": self.lengths.astype(np.float64),
            "sample_ids": self.sample_ids.astype(np.float64),
            "surrogate_clean": self.surrogate_clean.astype(np.float64),
            "surrogate_adv": self.surrogate_adv.astype(np.float64),
        }
        if self.clean_pred is not None:
            tensors["clean_pred"] = self.clean_pred.astype(np.float64)
            tensors["adv_pred"] = self.adv_pred.astype(np.float64)
        write_container(path, {"kind": "adversarial-batch", "count": len(self)}, tensors)
        index = [
            {
                "sample_id": int(self.sample_ids[i]),
                "clean_prediction": None if self.clean_pred is None else int(self.clean_pred[i]),
                "adversarial_prediction": None if self.adv_pred is None else int(self.adv_pred[i]),
                "squared_error": float(se),
            }
            for i, se in enumerate(self.squared_error)
        ]
        path.with_suffix(".json").write_text(json.dumps(index, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "AdversarialBatch":
        header, t = read_container(path)
        if header.get("kind") != "adversarial-batch":
            raise ValueError(f"{path} does not hold an adversarial batch")
        ints = lambda k: t[k].astype(np.int64) if k in t else None  # noqa: E731
        return cls(
            x=t["x"], x_hat=t["x_hat"], x_grad=t["x_grad"], lengths=ints("lengths"),
            sample_ids=ints("sample_ids"), surrogate_clean=ints("surrogate_clean"),
            surrogate_adv=ints("surrogate_adv"), clean_pred=ints("clean_pred"), adv_pred=ints("adv_pred"),
        )


def per_sample_squared_error(x: np.ndarray, x_hat: np.ndarray, lengths: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise T.ShapeError(f"squared error: shape mismatch {x.shape} vs {x_hat.shape}")
    if x.ndim == 2:
        x, x_hat = x[None], x_hat[None]
    if lengths is None:
        lengths = np.full(len(x), x.shape[2])
    pos = np.arange(x.shape[2])[None, None, :]
    m = pos < np.asarray(lengths)[:, None, None]
    sq = ((x_hat - x) ** 2) * m
    return sq.sum(axis=(1, 2)) / (x.shape[1] * np.asarray(lengths, dtype=np.float64))


def generate(generator: GATNGenerator, surrogate: Classifier, samples: LabeledDataset, target: int) -> AdversarialBatch:
    """One forward pass of the generator per sample; no weights change."""
    _require_logits(surrogate)
    x = samples.values
    with _Frozen(surrogate), _Frozen(generator):
        xg = gradient_features(surrogate, x, target)
        x_hat = generator.forward(Tensor(x), Tensor(xg), _channel_mask(samples)).data
        clean = surrogate.predict(x)
        adv = surrogate.predict(x_hat)
    return AdversarialBatch(
        x=np.array(x), x_hat=x_hat, x_grad=xg, lengths=np.array(samples.lengths),
        sample_ids=np.array(samples.indices), surrogate_clean=clean, surrogate_adv=adv,
    )


@dataclass
class GridEntry:
    beta: float
    value: object = None
    error: str | None = None


def grid_search(betas, run_one: Callable[[float], object]) -> dict[float, GridEntry]:
    """Run ``run_one`` for every beta; a failure is recorded and the grid continues."""
    out: dict[float, GridEntry] = {}
    for beta in betas:
        try:
            out[beta] = GridEntry(beta, run_one(beta))
        except Exception as exc:  # noqa: BLE001 - recorded per beta by design
            log.warning("beta=%g failed: %s", beta, exc)
            out[beta] = GridEntry(beta, error=f"{type(exc).__name__}: {exc}")
    return out
