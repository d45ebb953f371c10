"""End-to-end stages: teacher training, attack over the beta grid, reporting.

Wiring follows the attack protocol:

* the archive TRAIN file fits the attacked model ``f``;
* the archive TEST file is the attacker's dataset ``D``, split into class
  balanced halves ``D_train`` (student and generator training) and
  ``D_eval``;
* the archive TRAIN file is reused as the held-out ``D_test``, which neither
  the student nor the generator ever sees;
* a white-box attack on the FCN trains the generator against ``f`` itself,
  every other combination goes through a LeNet-5 student.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import platform
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, generate, grid_search, train_gatn
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    LabeledDataset, SplitSpec, load_ts, pad_to, relabel_by_model, split_manifest,
    stratified_split, znormalize,
)
from .distill import BLACK_BOX, WHITE_BOX, DistillConfig, distill_from_teacher
from .dtw import DTWClassifier, distance_tensor, read_distance_tensor, write_distance_tensor
from .evaluation import AttackReport, count_adversaries, emit_report, wilcoxon_signed_rank
from .models import (
    ArchitectureSpec, TrainConfig, build_fcn, build_gatn_generator, build_lenet5_student,
    train_supervised,
)

log = logging.getLogger(__name__)

CACHE_ENV = "MTSADV_CACHE_DIR"
ATTACK_ORDER = [("black-box", "dtw"), ("white-box", "dtw"), ("black-box", "fcn"), ("white-box", "fcn")]


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@dataclass
class PipelineConfig:
    train_path: str = ""
    test_path: str = ""
    teacher: str = "fcn"
    mode: str = WHITE_BOX
    out_dir: str = "runs/default"
    cache_dir: str | None = None
    seed: int = 0
    target: int = 0
    alpha: float = 1.5
    betas: tuple[float, ...] = tuple(10.0 ** -b for b in range(1, 6))
    temperature: float = 10.0
    gamma: float | None = None
    teacher_epochs: int = 200
    student_epochs: int = 500
    gatn_epochs: int = 1000
    batch_size: int = 32
    learning_rate: float = 1e-3
    perturbation_scale: float = 1.0
    normalize: bool = True
    split_fractions: tuple[float, float] = (0.5, 0.5)
    literal_dtw_init: bool = False
    teacher_checkpoint: str | None = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        if self.teacher not in ("fcn", "dtw"):
            raise ValueError(f"unknown teacher kind {self.teacher!r}")
        if self.mode not in (WHITE_BOX, BLACK_BOX):
            raise ValueError(f"unknown attack mode {self.mode!r}")

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown configuration keys: {sorted(extra)}")
        return cls(**raw)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            raw = yaml.safe_load(text) or {}
        else:
            raw = json.loads(text)
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["split_fractions"] = list(self.split_fractions)
        return d

    # derived sub-configurations; every stage seed comes from the one master seed
    def train_config(self, epochs: int, offset: int) -> TrainConfig:
        return TrainConfig(epochs=epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, seed=self.seed + offset)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(target=self.target, alpha=self.alpha, betas=self.betas, mode=self.mode,
                            model_kind=self.teacher, train=self.train_config(self.gatn_epochs, 3))

    def distill_config(self) -> DistillConfig:
        return DistillConfig(temperature=self.temperature, gamma=self.gamma, mode=self.mode,
                             train=self.train_config(self.student_epochs, 2))

    def split_spec(self) -> SplitSpec:
        return SplitSpec(seed=self.seed, fractions=self.split_fractions)

    def resolved_cache_dir(self) -> Path:
        return Path(os.environ.get(CACHE_ENV) or self.cache_dir or Path(self.out_dir) / "cache")


def _file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Inputs:
    train: LabeledDataset
    test: LabeledDataset


def load_inputs(cfg: PipelineConfig) -> Inputs:
    """Parse both files, pad to a common length and z-normalise with TRAIN statistics."""
    try:
        train = load_ts(cfg.train_path)
        test = load_ts(cfg.test_path)
    except (OSError, ValueError) as exc:
        raise PipelineError("ingest", exc) from exc
    if train.channels != test.channels or train.class_names != test.class_names:
        raise PipelineError("ingest", "TRAIN and TEST disagree on channels or class labels")
    length = max(train.max_length, test.max_length)
    train, test = pad_to(train, length), pad_to(test, length)
    if cfg.normalize:
        train, stats = znormalize(train)
        test, _ = znormalize(test, stats)
    return Inputs(train, test)


def _arch(kind: str, ds: LabeledDataset, cfg: PipelineConfig) -> ArchitectureSpec:
    return ArchitectureSpec(kind, ds.channels, ds.max_length, ds.n_classes,
                            perturbation_scale=cfg.perturbation_scale if kind == "gatn-generator" else 1.0)


def _dtw_cache_path(cfg: PipelineConfig, inputs: Inputs) -> Path:
    key = hashlib.sha256(
        f"{inputs.test.content_hash()}|{inputs.train.content_hash()}|literal={cfg.literal_dtw_init}".encode()
    ).hexdigest()
    return cfg.resolved_cache_dir() / f"dtw-{key[:32]}.bin"


def _teacher_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.teacher_checkpoint) if cfg.teacher_checkpoint else Path(cfg.out_dir) / "teacher.ckpt"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train_teacher(cfg: PipelineConfig, inputs: Inputs | None = None) -> dict:
    """Fit the attacked model: an FCN checkpoint, or the cached DTW distance tensor."""
    inputs = inputs or load_inputs(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.teacher == "fcn":
        path = _teacher_path(cfg)
        try:
            model = build_fcn(_arch("fcn", inputs.train, cfg), seed=cfg.seed)
            result = train_supervised(model, inputs.train.values, inputs.train.labels,
                                      cfg.train_config(cfg.teacher_epochs, 1))
        except Exception as exc:
            raise PipelineError("train-teacher", exc) from exc
        acc = float((model.predict(inputs.train.values) == inputs.train.labels).mean())
        model.metadata["train_accuracy"] = acc
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, path)
        result.write_csv(out / "teacher_loss.csv")
        log.info("fcn teacher: train accuracy %.3f, checkpoint %s", acc, path)
        return {"kind": "fcn", "checkpoint": str(path), "train_accuracy": acc}
    path = _dtw_cache_path(cfg, inputs)
    if path.exists():
        log.info("dtw distance cache hit: %s", path)
        return {"kind": "dtw", "cache": str(path), "cache_hit": True}
    start = time.perf_counter()
    V = distance_tensor(inputs.test, inputs.train, cfg.literal_dtw_init)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_distance_tensor(V, path)
    log.info("dtw distance tensor %s computed in %.2fs", V.shape, time.perf_counter() - start)
    return {"kind": "dtw", "cache": str(path), "cache_hit": False}


class LabelOnly:
    """Black-box view of a classifier: exposes predicted labels and nothing else."""

    def __init__(self, model):
        self._predict = model.predict
        self.n_classes = model.n_classes
        self.kind = getattr(model, "kind", "unknown")

    def predict(self, values, lengths=None):
        return self._predict(values, lengths)


class FCNTeacher:
    kind = "fcn"

    def __init__(self, model):
        self.model = model
        self.n_classes = model.n_classes

    def predict_logits(self, values):
        return self.model.predict_logits(values)

    def predict_proba(self, values, lengths=None):
        return self.model.predict_proba(values)

    def predict(self, values, lengths=None):
        return self.model.predict(values)


def load_teacher(cfg: PipelineConfig, inputs: Inputs) -> tuple[object, dict]:
    info = cmd_train_teacher(cfg, inputs) if _needs_training(cfg, inputs) else _existing_teacher(cfg, inputs)
    if cfg.teacher == "fcn":
        return FCNTeacher(load_checkpoint(info["checkpoint"], expect_kind="fcn")), info
    teacher = DTWClassifier(inputs.train, literal_init=cfg.literal_dtw_init)
    teacher.remember(inputs.test.values, inputs.test.lengths, read_distance_tensor(info["cache"]))
    return teacher, info


def _needs_training(cfg: PipelineConfig, inputs: Inputs) -> bool:
    if cfg.teacher == "fcn":
        return not _teacher_path(cfg).exists()
    return not _dtw_cache_path(cfg, inputs).exists()


def _existing_teacher(cfg: PipelineConfig, inputs: Inputs) -> dict:
    if cfg.teacher == "fcn":
        return {"kind": "fcn", "checkpoint": str(_teacher_path(cfg))}
    return {"kind": "dtw", "cache": str(_dtw_cache_path(cfg, inputs)), "cache_hit": True}


def cmd_attack(cfg: PipelineConfig) -> list[AttackReport]:
    """Run the full attack for every beta and persist reports, checkpoints and batches."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = load_inputs(cfg)
    try:
        teacher, teacher_info = load_teacher(cfg, inputs)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError("teacher", exc) from exc
    acfg = cfg.attack_config()
    name = inputs.test.name

    try:
        d_train, d_eval = stratified_split(inputs.test, cfg.split_spec())
        d_test = inputs.train
        (out / "splits.json").write_text(
            split_manifest({"train": d_train, "eval": d_eval}, cfg.split_spec()) + "\n"
        )
    except Exception as exc:
        raise PipelineError("split", exc) from exc

    view = LabelOnly(teacher) if cfg.mode == BLACK_BOX else teacher
    if cfg.mode == BLACK_BOX:
        d_train = relabel_by_model(d_train, view)
        d_eval = relabel_by_model(d_eval, view)

    routing = {
        "teacher_access": "labels-only" if cfg.mode == BLACK_BOX else "probabilities",
        "teacher_signal": (
            "predicted-labels" if cfg.mode == BLACK_BOX
            else "soft-1nn" if cfg.teacher == "dtw" else "logits"
        ),
    }
    fidelity = None
    if acfg.attacks_teacher_directly:
        surrogate = teacher.model
        routing["surrogate"] = "teacher"
    else:
        try:
            student = build_lenet5_student(_arch("lenet5", inputs.train, cfg), seed=cfg.seed + 2)
            fidelity = distill_from_teacher(view, student, d_train, cfg.distill_config(), eval_set=d_eval)
            save_checkpoint(student, out / "student.ckpt")
            (out / "fidelity.json").write_text(fidelity.to_json() + "\n")
        except Exception as exc:
            raise PipelineError("distill", exc) from exc
        surrogate = student
        routing["surrogate"] = "student"

    gen_dir = out / "generators"
    batch_dir = out / "batches"
    gen_dir.mkdir(exist_ok=True)
    batch_dir.mkdir(exist_ok=True)
    checksums: dict[str, dict] = {}

    def run_beta(beta: float) -> list[AttackReport]:
        gen = build_gatn_generator(_arch("gatn-generator", inputs.train, cfg), seed=cfg.seed + 3)
        train_gatn(gen, surrogate, d_train, beta, acfg)
        tag = f"beta_{beta:.0e}"
        save_checkpoint(gen, gen_dir / f"{tag}.ckpt")
        before = gen.checksum()
        reports = []
        for split_name, split in (("eval", d_eval), ("test", d_test)):
            batch = generate(gen, surrogate, split, acfg.target)
            rep = count_adversaries(
                batch, split.ground_truth, teacher, dataset=name, mode=cfg.mode,
                model_kind=cfg.teacher, beta=beta, target=acfg.target, evaluated_on=split_name,
            )
            batch.save(batch_dir / f"{tag}_{split_name}.bin")
            reports.append(rep)
        after = gen.checksum()
        checksums[tag] = {"before": before, "after": after, "unchanged": before == after}
        if before != after:
            raise PipelineError("generate", f"generator weights changed during generation for beta={beta}")
        return reports

    results = grid_search(acfg.betas, run_beta)
    reports: list[AttackReport] = []
    failures = {}
    for beta, entry in results.items():
        if entry.error:
            failures[repr(beta)] = entry.error
        else:
            reports.extend(entry.value)
    if not reports:
        raise PipelineError("attack", f"every beta failed: {failures}")
    emit_report([r for r in reports if r.evaluated_on == "eval"], out, stem="reports")
    test_reports = [r for r in reports if r.evaluated_on == "test"]
    if test_reports:
        emit_report(test_reports, out, stem="generalization")

    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "dataset": name,
        "inputs": {"train": _file_hash(cfg.train_path), "test": _file_hash(cfg.test_path)},
        "versions": {"mtsadv": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "teacher": {k: v for k, v in teacher_info.items() if k != "cache_hit"},
        "routing": routing,
        "splits": {"train": len(d_train), "eval": len(d_eval), "test": len(d_test)},
        "fidelity": fidelity.to_dict() if fidelity else None,
        "generator_checksums": checksums,
        "failed_betas": failures,
    }
    _write_json(out / "manifest.json", manifest)
    return reports


# --------------------------------------------------------------------------
# cross-run report


def best_per_dataset(reports: list[dict], evaluated_on: str = "eval") -> dict[str, dict]:
    """Highest adversary count per dataset, ties broken by the lower MSE."""
    best: dict[str, dict] = {}
    for r in reports:
        if r["evaluated_on"] != evaluated_on:
            continue
        key = (-r["adversary_count"], r["mse"] if r["mse"] is not None else float("inf"))
        cur = best.get(r["dataset"])
        if cur is None or key < (-cur["adversary_count"], cur["mse"] if cur["mse"] is not None else float("inf")):
            best[r["dataset"]] = r
    return best


def _attack_label(mode: str, model: str) -> str:
    return f"{mode} {model}"


def cmd_report(run_dirs, out_dir: str | Path, evaluated_on: str = "eval") -> dict:
    """Combine run directories into one table plus pairwise signed-rank p-values.

    Runs are grouped by (mode, attacked model); all groups must cover the
    same datasets. With fewer than two groups the comparison is skipped.
    """
    groups: dict[tuple[str, str], list[dict]] = {}
    all_reports: list[AttackReport] = []
    stem = "reports" if evaluated_on == "eval" else "generalization"
    for d in run_dirs:
        payload = json.loads((Path(d) / f"{stem}.json").read_text())
        for r in payload["reports"]:
            groups.setdefault((r["mode"], r["model_kind"]), []).append(r)
            all_reports.append(AttackReport(**r))
    if not all_reports:
        raise ValueError("no reports found in the given run directories")
    order = [k for k in ATTACK_ORDER if k in groups] + sorted(k for k in groups if k not in ATTACK_ORDER)
    best = {k: best_per_dataset(groups[k], evaluated_on) for k in order}
    datasets = {k: set(v) for k, v in best.items()}
    union = set().union(*datasets.values())
    asym = sorted(ds for ds in union if any(ds not in s for s in datasets.values()))
    if asym:
        raise ValueError(f"runs cover different datasets; asymmetric: {asym}")
    names = sorted(union)
    comparisons: dict = {"evaluated_on": evaluated_on, "datasets": names, "pairs": []}
    if len(order) < 2:
        comparisons["notice"] = "fewer than two attack kinds; comparison skipped"
        log.info(comparisons["notice"])
    for a, b in itertools.combinations(order, 2):
        entry = {"a": _attack_label(*a), "b": _attack_label(*b)}
        for metric, key in (("adversaries", "adversary_count"), ("mse", "mse")):
            xa = [best[a][n][key] for n in names]
            xb = [best[b][n][key] for n in names]
            if any(v is None for v in xa + xb):
                entry[metric] = {"p_value": None, "reason": "missing values (no adversaries)"}
                continue
            try:
                res = wilcoxon_signed_rank(xa, xb)
                entry[metric] = {"p_value": res.p_value, "statistic": res.statistic, "n": res.n, "method": res.method}
            except ValueError as exc:
                entry[metric] = {"p_value": None, "reason": str(exc)}
        comparisons["pairs"].append(entry)
    emit_report(all_reports, out_dir, comparisons, stem="combined")
    matrix = {
        metric: {
            p["a"]: {q["b"]: q[metric]["p_value"] for q in comparisons["pairs"] if q["a"] == p["a"]}
            for p in comparisons["pairs"]
        }
        for metric in ("adversaries", "mse")
    }
    _write_json(Path(out_dir) / "comparison_matrix.json", matrix)
    return comparisons
