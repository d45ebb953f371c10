"""Student distillation from a teacher under white-box or black-box access."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import Classifier, TrainConfig, fit, one_hot
from .tensor import Tensor

WHITE_BOX = "white-box"
BLACK_BOX = "black-box"
MODES = (WHITE_BOX, BLACK_BOX)


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 10.0
    gamma: float | None = None
    mode: str = WHITE_BOX
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=500))

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.gamma is None:
            object.__setattr__(self, "gamma", 0.5 if self.mode == WHITE_BOX else 1.0)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass(frozen=True)
class SoftTeacherSignal:
    """Teacher logits for white-box distillation.

    Build from probabilities with :meth:`from_probabilities`; the log of a
    probability vector is a valid logit vector up to a per-row constant.
    """

    logits: np.ndarray

    @classmethod
    def from_probabilities(cls, probs: np.ndarray) -> "SoftTeacherSignal":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(np.log(np.clip(probs, np.finfo(float).tiny, None)))

    def targets(self, temperature: float) -> np.ndarray:
        return temperature_softmax(self.logits, temperature)

    def predictions(self) -> np.ndarray:
        return np.asarray(self.logits).argmax(axis=1)


@dataclass(frozen=True)
class LabelTeacherSignal:
    """Predicted class labels only; the sole signal allowed in black-box mode."""

    labels: np.ndarray
    n_classes: int

    def targets(self, temperature: float) -> np.ndarray:
        return one_hot(self.labels, self.n_classes)

    def predictions(self) -> np.ndarray:
        return np.asarray(self.labels)


def temperature_softmax(z, temperature: float) -> np.ndarray:
    """``exp(z_i / T) / sum_j exp(z_j / T)`` along the last axis."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    s = np.asarray(z, dtype=np.float64) / temperature
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_signal(signal, mode: str) -> None:
    if mode == BLACK_BOX and not isinstance(signal, LabelTeacherSignal):
        raise TypeError("black-box distillation accepts teacher labels only, not probabilities or logits")
    if not isinstance(signal, (LabelTeacherSignal, SoftTeacherSignal)):
        raise TypeError(f"unsupported teacher signal {type(signal).__name__}")


def transfer_loss(
    student_logits: Tensor,
    teacher_signal: SoftTeacherSignal | LabelTeacherSignal,
    hard_labels: np.ndarray,
    config: DistillConfig,
) -> Tensor:
    """gamma * H(teacher_tau, student_tau) + (1 - gamma) * H(y, student_1)."""
    _check_signal(teacher_signal, config.mode)
    n_classes = student_logits.shape[1]
    g = config.gamma
    terms = []
    if g > 0:
        target = teacher_signal.targets(config.temperature)
        terms.append(T.scale(T.cross_entropy(student_logits, target, config.temperature), g))
    if g < 1:
        terms.append(T.scale(T.cross_entropy(student_logits, one_hot(hard_labels, n_classes)), 1.0 - g))
    return terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])


def subset_signal(signal, idx):
    if isinstance(signal, LabelTeacherSignal):
        return LabelTeacherSignal(np.asarray(signal.labels)[idx], signal.n_classes)
    return SoftTeacherSignal(np.asarray(signal.logits)[idx])


def agreement(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float((a == b).mean()) if len(a) else float("nan")


@dataclass
class FidelityReport:
    teacher_kind: str
    mode: str
    gamma: float
    temperature: float
    agreement_train: float
    agreement_eval: float | None
    loss_curve: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "teacher-kind": self.teacher_kind,
            "mode": self.mode,
            "gamma": self.gamma,
            "tau": self.temperature,
            "agreement-train": self.agreement_train,
            "agreement-eval": self.agreement_eval,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def distill(
    student: Classifier,
    train_values: np.ndarray,
    teacher_signal: SoftTeacherSignal | LabelTeacherSignal,
    hard_labels: np.ndarray,
    config: DistillConfig,
    teacher_kind: str = "unknown",
    eval_values: np.ndarray | None = None,
    eval_teacher_labels: np.ndarray | None = None,
) -> FidelityReport:
    """Train ``student`` in place by minimising :func:`transfer_loss`.

    The teacher is queried beforehand and only its signal is passed in, so
    black-box runs never see probabilities. Agreement with the teacher is
    measured on the training half and, if given, on the evaluation half.
    """
    _check_signal(teacher_signal, config.mode)
    train_values = np.asarray(train_values, dtype=np.float64)
    hard_labels = np.asarray(hard_labels, dtype=np.int64)
    result = fit(
        student, len(train_values), config.train,
        lambda idx: transfer_loss(
            student.logits(Tensor(train_values[idx])),
            subset_signal(teacher_signal, idx), hard_labels[idx], config,
        ),
    )
    student.metadata.update(
        seed=config.train.seed, epochs=config.train.epochs, final_loss=result.final_loss,
        distill_mode=config.mode, gamma=config.gamma, temperature=config.temperature,
    )
    agree_eval = None
    if eval_values is not None and eval_teacher_labels is not None:
        agree_eval = agreement(student.predict(eval_values), eval_teacher_labels)
    return FidelityReport(
        teacher_kind=teacher_kind,
        mode=config.mode,
        gamma=config.gamma,
        temperature=config.temperature,
        agreement_train=agreement(student.predict(train_values), teacher_signal.predictions()),
        agreement_eval=agree_eval,
        loss_curve=result.loss_curve,
    )


def query_teacher(teacher, values: np.ndarray, lengths: np.ndarray | None, mode: str):
    """Ask ``teacher`` for the signal ``mode`` permits.

    Black-box access goes through ``predict`` alone. White-box access prefers
    raw logits and falls back to probabilities (e.g. Soft-1NN for DTW).
    """
    if mode == BLACK_BOX:
        return LabelTeacherSignal(np.asarray(teacher.predict(values, lengths)), teacher.n_classes)
    if hasattr(teacher, "predict_logits"):
        return SoftTeacherSignal(teacher.predict_logits(values))
    return SoftTeacherSignal.from_probabilities(teacher.predict_proba(values, lengths))


def distill_from_teacher(teacher, student: Classifier, train, config: DistillConfig, eval_set=None) -> FidelityReport:
    """Distil ``teacher`` into ``student`` on the ``train`` dataset half.

    In black-box mode ``train.labels`` are expected to be the teacher's
    predictions already (see :func:`mtsadv.data.relabel_by_model`).
    """
    signal = query_teacher(teacher, train.values, train.lengths, config.mode)
    eval_values = eval_labels = None
    if eval_set is not None:
        eval_values = eval_set.values
        eval_labels = np.asarray(teacher.predict(eval_set.values, eval_set.lengths))
    return distill(
        student, train.values, signal, train.labels, config,
        teacher_kind=getattr(teacher, "kind", type(teacher).__name__),
        eval_values=eval_values, eval_teacher_labels=eval_labels,
    )
