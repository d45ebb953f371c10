"""Fixed network architectures, supervised training and input gradients.

All randomness comes from ``numpy.random.Generator`` (PCG64) seeded by the
caller; weight initialisation is He-uniform with zero biases.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

FCN_FILTERS = (128, 256, 128)
FCN_KERNELS = (8, 5, 3)
LENET_FILTERS = (6, 16)
LENET_UNITS = (120, 84)
LENET_KERNEL = 5
POOL = 2
GEN_FILTERS = 32
GEN_KERNEL = 5

KINDS = ("fcn", "lenet5", "gatn-generator")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: str
    channels: int
    length: int
    n_classes: int
    perturbation_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.channels < 1 or self.length < 1:
            raise ValueError("channels and length must be positive")
        if self.n_classes < 2:
            raise ValueError("class count must be at least 2")
        if self.perturbation_scale <= 0:
            raise ValueError("perturbation_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch size and learning rate positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Container of named parameters and buffers with a train/eval flag."""

    def __init__(self, spec: ArchitectureSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.metadata: dict = {}
        self.training = False

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, in construction order."""
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k in self.params:
                self.params[k].data = np.array(v, dtype=np.float64)
            else:
                self.buffers[k] = np.array(v, dtype=np.float64)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def checksum(self) -> str:
        return T.parameters_checksum(
            [Tensor(v) for v in self.state().values()]
        )


class Classifier(Module):
    """Network mapping [N, channels, length] to class logits."""

    def logits(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        return T.softmax(self.logits(x))

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 3 or x.shape[1] != self.spec.channels or x.shape[2] != self.spec.length:
            raise T.ShapeError(
                f"{self.spec.kind}: shape mismatch input {x.shape} vs "
                f"expected (N, {self.spec.channels}, {self.spec.length})"
            )

    def predict_logits(self, values: np.ndarray, batch_size: int = 256) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            out = [
                self.logits(Tensor(values[i:i + batch_size])).data
                for i in range(0, len(values), batch_size)
            ]
        finally:
            self.train(was)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.spec.n_classes))

    def predict_proba(self, values: np.ndarray, lengths: np.ndarray | None = None) -> np.ndarray:
        return T._softmax_np(self.predict_logits(values))

    def predict(self, values: np.ndarray, lengths: np.ndarray | None = None) -> np.ndarray:
        return self.predict_proba(values).argmax(axis=1)

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes


class FCN(Classifier):
    """Three conv/batch-norm/ReLU blocks, global average pooling, softmax head."""

    def __init__(self, spec: ArchitectureSpec, rng: np.random.Generator):
        super().__init__(spec)
        if spec.kind != "fcn":
            raise ValueError(f"FCN requires kind 'fcn', got {spec.kind!r}")
        if spec.length < max(FCN_KERNELS):
            raise ValueError(
                f"fcn: max-length {spec.length} is shorter than the largest kernel {max(FCN_KERNELS)}"
            )
        c_in = spec.channels
        for i, (f, k) in enumerate(zip(FCN_FILTERS, FCN_KERNELS), start=1):
            self._param(f"conv{i}.weight", he_uniform(rng, (f, c_in, k), c_in * k))
            self._param(f"conv{i}.bias", np.zeros(f))
            self._param(f"bn{i}.gamma", np.ones(f))
            self._param(f"bn{i}.beta", np.zeros(f))
            self.buffers[f"bn{i}.running_mean"] = np.zeros(f)
            self.buffers[f"bn{i}.running_var"] = np.ones(f)
            c_in = f
        self._param("head.weight", he_uniform(rng, (c_in, spec.n_classes), c_in))
        self._param("head.bias", np.zeros(spec.n_classes))

    def logits(self, x: Tensor) -> Tensor:
        self._check_input(x)
        p, b = self.params, self.buffers
        h = x
        for i in range(1, len(FCN_FILTERS) + 1):
            h = T.conv1d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding="same")
            h = T.batch_norm(
                h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                b[f"bn{i}.running_mean"], b[f"bn{i}.running_var"],
                training=self.training,
            )
            h = T.relu(h)
        return T.dense(T.global_avg_pool(h), p["head.weight"], p["head.bias"])


def _lenet_out_length(length: int, k: int) -> int:
    n = length - k + 1
    n = n // POOL
    n = n - k + 1
    return n // POOL if n >= 1 else 0


def lenet_kernel_for(length: int, adapt: bool = True) -> int:
    """Widest admissible kernel (at most 5) for a series of ``length``.

    Raises ``ValueError`` naming the minimal admissible length when no kernel
    fits (or, with ``adapt=False``, when width 5 does not fit).
    """
    if _lenet_out_length(length, LENET_KERNEL) >= 1:
        return LENET_KERNEL
    minimal = next(n for n in range(1, 1000) if _lenet_out_length(n, LENET_KERNEL) >= 1)
    if adapt:
        for k in range(LENET_KERNEL - 1, 0, -1):
            if _lenet_out_length(length, k) >= 1:
                return k
        minimal = next(n for n in range(1, 1000) if _lenet_out_length(n, 1) >= 1)
    raise ValueError(
        f"lenet5: series length {length} too short for the student stack; "
        f"minimal admissible length is {minimal}"
    )


class LeNet5Student(Classifier):
    """Conv(6) -> pool -> Conv(16) -> pool -> FC 120 -> FC 84 -> FC classes.

    Kernels are 1-D along time; series shorter than 16 steps get a narrower
    kernel (recorded in ``metadata['student_kernel']``).
    """

    def __init__(self, spec: ArchitectureSpec, rng: np.random.Generator, adapt_kernel: bool = True):
        super().__init__(spec)
        if spec.kind != "lenet5":
            raise ValueError(f"LeNet5Student requires kind 'lenet5', got {spec.kind!r}")
        k = lenet_kernel_for(spec.length, adapt_kernel)
        self.kernel = k
        self.metadata["student_kernel"] = k
        if k != LENET_KERNEL:
            log.info("lenet5: length %d too short for width-5 kernels, using width %d", spec.length, k)
        c1, c2 = LENET_FILTERS
        self._param("conv1.weight", he_uniform(rng, (c1, spec.channels, k), spec.channels * k))
        self._param("conv1.bias", np.zeros(c1))
        self._param("conv2.weight", he_uniform(rng, (c2, c1, k), c1 * k))
        self._param("conv2.bias", np.zeros(c2))
        d = c2 * _lenet_out_length(spec.length, k)
        for i, units in enumerate(LENET_UNITS + (spec.n_classes,), start=1):
            self._param(f"fc{i}.weight", he_uniform(rng, (d, units), d))
            self._param(f"fc{i}.bias", np.zeros(units))
            d = units

    def logits(self, x: Tensor) -> Tensor:
        self._check_input(x)
        p = self.params
        h = T.max_pool1d(T.conv1d(x, p["conv1.weight"], p["conv1.bias"]), POOL)
        h = T.max_pool1d(T.conv1d(h, p["conv2.weight"], p["conv2.bias"]), POOL)
        h = T.flatten(h)
        h = T.relu(T.dense(h, p["fc1.weight"], p["fc1.bias"]))
        h = T.relu(T.dense(h, p["fc2.weight"], p["fc2.bias"]))
        return T.dense(h, p["fc3.weight"], p["fc3.bias"])


class GATNGenerator(Module):
    """Residual perturbation network g(x, x_grad) -> x + scale * tanh(...)."""

    def __init__(self, spec: ArchitectureSpec, rng: np.random.Generator):
        super().__init__(spec)
        if spec.kind != "gatn-generator":
            raise ValueError(f"GATNGenerator requires kind 'gatn-generator', got {spec.kind!r}")
        c = spec.channels
        c_in = 2 * c
        for i in (1, 2):
            self._param(f"conv{i}.weight", he_uniform(rng, (GEN_FILTERS, c_in, GEN_KERNEL), c_in * GEN_KERNEL))
            self._param(f"conv{i}.bias", np.zeros(GEN_FILTERS))
            c_in = GEN_FILTERS
        self._param("out.weight", he_uniform(rng, (c, c_in, 1), c_in))
        self._param("out.bias", np.zeros(c))

    def delta(self, x: Tensor, x_grad: Tensor) -> Tensor:
        if x.shape != x_grad.shape:
            raise T.ShapeError(f"gatn-generator: shape mismatch x {x.shape} vs x_grad {x_grad.shape}")
        if x.data.ndim != 3 or x.shape[1] != self.spec.channels:
            raise T.ShapeError(
                f"gatn-generator: shape mismatch input {x.shape} vs channels {self.spec.channels}"
            )
        p = self.params
        h = T.concat([x, x_grad], axis=1)
        for i in (1, 2):
            h = T.relu(T.conv1d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding="same"))
        h = T.tanh(T.conv1d(h, p["out.weight"], p["out.bias"]))
        return T.scale(h, self.spec.perturbation_scale)

    def forward(self, x: Tensor, x_grad: Tensor, mask: np.ndarray | None = None) -> Tensor:
        d = self.delta(x, x_grad)
        if mask is not None:
            d = T.mul(d, Tensor(mask))
        return T.add(x, d)


def build_fcn(spec: ArchitectureSpec, seed: int = 0) -> FCN:
    return FCN(spec, np.random.default_rng(seed))


def build_lenet5_student(spec: ArchitectureSpec, seed: int = 0, adapt_kernel: bool = True) -> LeNet5Student:
    return LeNet5Student(spec, np.random.default_rng(seed), adapt_kernel=adapt_kernel)


def build_gatn_generator(spec: ArchitectureSpec, seed: int = 0) -> GATNGenerator:
    return GATNGenerator(spec, np.random.default_rng(seed))


def build(spec: ArchitectureSpec, seed: int = 0) -> Module:
    return {"fcn": build_fcn, "lenet5": build_lenet5_student, "gatn-generator": build_gatn_generator}[
        spec.kind
    ](spec, seed)


# --------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            with np.errstate(over="ignore", invalid="ignore"):
                v += (1.0 - self.b2) * p.grad * p.grad
                update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not (np.all(np.isfinite(v)) and np.all(np.isfinite(update))):
                raise T.NonFiniteError("adam: optimizer state overflowed")
            p.data = p.data - update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


@dataclass
class TrainResult:
    loss_curve: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        return self.loss_curve[-1] if self.loss_curve else None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_loss"])
            for i, v in enumerate(self.loss_curve, start=1):
                w.writerow([i, repr(float(v))])


def fit(
    module: Module,
    n_samples: int,
    config: TrainConfig,
    batch_loss: Callable[[np.ndarray], Tensor],
) -> TrainResult:
    """Generic Adam loop over shuffled minibatches of sample indices.

    ``batch_loss`` maps an index array to a scalar loss tensor. The module is
    put in training mode for the duration and returned to eval mode.
    """
    result = TrainResult()
    if config.epochs == 0 or n_samples == 0:
        return result
    rng = np.random.default_rng(config.seed)
    params = list(module.params.values())
    opt = Adam(params, lr=config.learning_rate)
    module.train()
    try:
        for epoch in range(1, config.epochs + 1):
            total, count = 0.0, 0
            for idx in minibatches(n_samples, config.batch_size, rng):
                opt.zero_grad()
                try:
                    loss = batch_loss(idx)
                    T.backward(loss)
                    opt.step()
                except T.NonFiniteError as exc:
                    raise TrainingDivergedError(epoch, str(exc)) from exc
                total += float(loss.data) * len(idx)
                count += len(idx)
            mean = total / count
            if not np.isfinite(mean):
                raise TrainingDivergedError(epoch)
            result.loss_curve.append(mean)
    finally:
        module.eval()
        opt.zero_grad()
    return result


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    return out


def train_supervised(
    model: Classifier, values: np.ndarray, labels: np.ndarray, config: TrainConfig
) -> TrainResult:
    """Cross-entropy training of ``model`` on ``values`` [N, C, L] with integer labels."""
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if len(values) == 0:
        raise ValueError("train_supervised: empty dataset")
    if len(values) != len(labels):
        raise ValueError("train_supervised: values and labels differ in length")
    targets = one_hot(labels, model.n_classes)
    result = fit(
        model, len(values), config,
        lambda idx: T.cross_entropy(model.logits(Tensor(values[idx])), targets[idx]),
    )
    model.metadata.update(seed=config.seed, epochs=config.epochs, final_loss=result.final_loss)
    return result


def target_probability(model: Classifier, x: Tensor, target: int) -> Tensor:
    """Sum over the batch of the softmax probability of class ``target``."""
    return T.sum_all(T.take_column(model.forward(x), target))


def input_gradient(model: Classifier, x: np.ndarray, target: int) -> np.ndarray:
    """Gradient of the target-class probability with respect to each input series.

    Evaluated in inference mode so samples do not interact through batch
    statistics; the model's parameters are not touched.
    """
    if not 0 <= target < model.n_classes:
        raise ValueError(f"target class {target} out of range [0, {model.n_classes})")
    was_training = model.training
    flags = {k: p.requires_grad for k, p in model.params.items()}
    model.eval().requires_grad_(False)
    try:
        xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        T.backward(target_probability(model, xt, target))
        grad = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    finally:
        model.train(was_training)
        for k, p in model.params.items():
            p.requires_grad = flags[k]
    return grad
