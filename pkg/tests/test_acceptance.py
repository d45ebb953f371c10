"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the terminal
summary lists every criterion with its outcome.
"""

from __future__ import annotations

import filecmp
import os
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import (
    FD_STEP, REL_TOL, brute_force_dtw, brute_force_signed_rank_p, check_gradients, write_synthetic_pair,
)
from mtsadv import tensor as T
from mtsadv.attack import AdversarialBatch
from mtsadv.checkpoint import load_checkpoint, save_checkpoint
from mtsadv.data import load_ts, parse_ts, serialize_ts, stratified_split
from mtsadv.distill import DistillConfig, WHITE_BOX, distill_from_teacher
from mtsadv.dtw import dtw_distance, hard_1nn, soft_1nn
from mtsadv.evaluation import signed_rank_null, wilcoxon_signed_rank
from mtsadv.models import ArchitectureSpec, TrainConfig, build_fcn, build_gatn_generator, build_lenet5_student
from mtsadv.pipeline import PipelineConfig, cmd_attack, cmd_train_teacher, load_inputs
from mtsadv.synthetic import make_bumps
from mtsadv.tensor import Tensor

N_SEEDS = 20
ERING_ENV = "MTSADV_ERING_DIR"
ERING_REFERENCE = {"adversaries": 30, "mse": 0.128423}  # black-box 1-NN DTW, archive appendix
# generator epochs for the desk-scale end-to-end run; the beta grid is the default one
SYNTH_GATN_EPOCHS = 100


# --------------------------------------------------------------------------
# 1. gradients


def _primitive_cases(rng):
    """(name, loss_fn, tensors) for every differentiable primitive."""
    r = lambda *s: Tensor(rng.normal(size=s))  # noqa: E731
    a, b = r(3, 4), r(3, 4)
    x3 = r(2, 3, 9)
    w_valid, w_same, bias = r(4, 3, 3), r(4, 3, 4), r(4)
    gamma, beta = Tensor(rng.uniform(0.5, 1.5, 3)), r(3)
    xd, wd, bd = r(3, 5), r(5, 4), r(4)
    logits = r(4, 3)
    target = rng.dirichlet(np.ones(3), size=4)
    other = r(2, 2, 9)
    W = {k: rng.normal(size=s) for k, s in [
        ("ab", (3, 4)), ("conv_v", (2, 4, 7)), ("conv_s", (2, 4, 9)), ("bn", (2, 3, 9)),
        ("pool", (2, 3, 4)), ("gap", (2, 3)), ("dense", (3, 4)), ("flat", (2, 27)),
        ("cat", (2, 5, 9)), ("col", (4,)), ("sm", (4, 3)),
    ]}
    wsum = lambda out, k: T.sum_all(T.mul(out, Tensor(W[k])))  # noqa: E731
    rm, rv = np.zeros(3), np.ones(3)
    return [
        ("add", lambda: wsum(T.add(a, b), "ab"), {"a": a, "b": b}),
        ("sub", lambda: wsum(T.sub(a, b), "ab"), {"a": a, "b": b}),
        ("mul", lambda: wsum(T.mul(a, b), "ab"), {"a": a, "b": b}),
        ("scale", lambda: wsum(T.scale(a, -1.7), "ab"), {"a": a}),
        ("relu", lambda: wsum(T.relu(a), "ab"), {"a": a}),
        ("tanh", lambda: wsum(T.tanh(a), "ab"), {"a": a}),
        ("conv1d-valid", lambda: wsum(T.conv1d(x3, w_valid, bias), "conv_v"), {"x": x3, "w": w_valid, "b": bias}),
        ("conv1d-same", lambda: wsum(T.conv1d(x3, w_same, bias, padding="same"), "conv_s"),
         {"x": x3, "w": w_same, "b": bias}),
        ("batch-norm-train", lambda: wsum(T.batch_norm(x3, gamma, beta, rm.copy(), rv.copy(), True), "bn"),
         {"x": x3, "gamma": gamma, "beta": beta}),
        ("batch-norm-eval",
         lambda: wsum(T.batch_norm(x3, gamma, beta, np.full(3, 0.2), np.full(3, 1.3), False), "bn"),
         {"x": x3, "gamma": gamma, "beta": beta}),
        ("max-pool", lambda: wsum(T.max_pool1d(x3, 2), "pool"), {"x": x3}),
        ("global-avg-pool", lambda: wsum(T.global_avg_pool(x3), "gap"), {"x": x3}),
        ("dense", lambda: wsum(T.dense(xd, wd, bd), "dense"), {"x": xd, "w": wd, "b": bd}),
        ("flatten", lambda: wsum(T.flatten(x3), "flat"), {"x": x3}),
        ("concat", lambda: wsum(T.concat([x3, other], axis=1), "cat"), {"x": x3, "other": other}),
        ("take-column", lambda: wsum(T.take_column(logits, 1), "col"), {"z": logits}),
        ("softmax", lambda: wsum(T.softmax(logits, 3.0), "sm"), {"z": logits}),
        ("log-softmax", lambda: wsum(T.log_softmax(logits, 3.0), "sm"), {"z": logits}),
        ("cross-entropy", lambda: T.cross_entropy(logits, target, 2.0), {"z": logits}),
        ("mse", lambda: T.mse(a, b), {"a": a, "b": b}),
        ("sum-all", lambda: T.sum_all(T.mul(a, a)), {"a": a}),
        ("mean-all", lambda: T.mean_all(T.mul(a, a)), {"a": a}),
    ]


def _architecture_cases(seed: int, rng):
    fcn = build_fcn(ArchitectureSpec("fcn", 2, 10, 3), seed=seed).train()
    student = build_lenet5_student(ArchitectureSpec("lenet5", 2, 20, 3), seed=seed).train()
    gen = build_gatn_generator(ArchitectureSpec("gatn-generator", 2, 10, 3), seed=seed).train()
    x_fcn = Tensor(rng.normal(size=(3, 2, 10)))
    x_len = Tensor(rng.normal(size=(3, 2, 20)))
    x_gen, g_gen = Tensor(rng.normal(size=(3, 2, 10))), Tensor(rng.normal(size=(3, 2, 10)))
    tgt = rng.dirichlet(np.ones(3), size=3)
    wg = rng.normal(size=(3, 2, 10))
    return [
        ("fcn", lambda: T.cross_entropy(fcn.logits(x_fcn), tgt), {"x": x_fcn, **fcn.params}),
        ("lenet5", lambda: T.cross_entropy(student.logits(x_len), tgt), {"x": x_len, **student.params}),
        ("gatn-generator", lambda: T.sum_all(T.mul(gen.forward(x_gen, g_gen), Tensor(wg))),
         {"x": x_gen, "x_grad": g_gen, **gen.params}),
    ]


def test_criterion_1_gradients(criterion, detail):
    criterion(1, "gradient correctness of primitives and architectures (central FD)")
    start = time.perf_counter()
    worst, probes, redrawn, failures = 0.0, 0, 0, []
    for seed in range(N_SEEDS):
        rng = np.random.default_rng(seed)
        for name, loss_fn, tensors in _primitive_cases(rng) + _architecture_cases(seed, rng):
            res = check_gradients(loss_fn, tensors, rng)
            worst = max(worst, res.worst)
            probes += res.probes
            redrawn += res.redrawn
            if res.worst >= REL_TOL:
                failures.append((seed, name, res.worst, res.where))
    elapsed = time.perf_counter() - start
    detail(
        f"worst relative error {worst:.2e} at step {FD_STEP} over {probes} probes, {N_SEEDS} seeds; "
        f"{redrawn} kink-straddling probes redrawn; {elapsed:.1f}s"
    )
    assert not failures, failures[:5]
    assert elapsed < 60


# --------------------------------------------------------------------------
# 2. DTW against enumeration


def test_criterion_2_dtw_oracle(criterion, detail):
    criterion(2, "DTW equals exhaustive warping-path enumeration; symmetry and identity")
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(250):
        a = rng.normal(size=rng.integers(1, 7))
        b = rng.normal(size=rng.integers(1, 7))
        worst = max(worst, abs(dtw_distance(a, b) - brute_force_dtw(a, b)))
    asym = ident = 0.0
    for _ in range(1000):
        a = rng.normal(size=rng.integers(1, 40))
        b = rng.normal(size=rng.integers(1, 40))
        asym = max(asym, abs(dtw_distance(a, b) - dtw_distance(b, a)))
        ident = max(ident, abs(dtw_distance(a, a)))
    elapsed = time.perf_counter() - start
    detail(f"max |dtw - enum| {worst:.1e}, asymmetry {asym:.1e}, dtw(a,a) {ident:.1e}, {elapsed:.1f}s")
    assert worst <= 1e-9
    assert asym <= 1e-9 and ident == 0.0
    assert elapsed < 60


# --------------------------------------------------------------------------
# 3. Soft-1NN argmax equals hard 1-NN


def test_criterion_3_soft_1nn(criterion, detail):
    criterion(3, "Soft-1NN argmax equals hard 1-NN incl. engineered ties")
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches, tied = 0, 0
    for i in range(1000):
        n_test, n_train, ch, k = rng.integers(1, 6), rng.integers(2, 12), rng.integers(1, 4), rng.integers(2, 5)
        k = min(k, n_train)
        labels = rng.permutation(np.concatenate([np.arange(k), rng.integers(0, k, n_train - k)]))
        if i % 3 == 0:
            # small integer distances force exact ties between classes
            V = rng.integers(0, 3, size=(n_test, n_train, ch)).astype(float)
        else:
            V = rng.exponential(size=(n_test, n_train, ch))
        if i % 5 == 0:
            V[:, 1] = V[:, 0]  # duplicate training sample, possibly with another label
        totals = V.sum(axis=2)
        tied += int(np.sum([(row == row.min()).sum() > 1 for row in totals]))
        p, q = soft_1nn(V, labels, k)
        mismatches += int(np.sum(q != hard_1nn(V, labels)))
        # argmax of p itself (ties to the lowest index) agrees too
        mismatches += int(np.sum(p.argmax(axis=1) != q))
    elapsed = time.perf_counter() - start
    detail(f"{mismatches} mismatches over 1000 tensors, {tied} tied query rows, {elapsed:.1f}s")
    assert mismatches == 0
    assert tied > 0
    assert elapsed < 60


# --------------------------------------------------------------------------
# shared synthetic pipeline run for criteria 4-6


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("synthetic")
    train, test = write_synthetic_pair(base / "data", 100, 100, name="Synth", channels=3, length=32, n_classes=2)
    cfg = PipelineConfig(
        train_path=str(train), test_path=str(test), teacher="fcn", mode=WHITE_BOX,
        out_dir=str(base / "run"), seed=0, gatn_epochs=SYNTH_GATN_EPOCHS,
    )
    start = time.perf_counter()
    info = cmd_train_teacher(cfg)
    teacher_time = time.perf_counter() - start
    reports = cmd_attack(cfg)
    return cfg, info, teacher_time, reports


def test_criterion_4_distillation_fidelity(criterion, detail, synthetic_run):
    criterion(4, "FCN teacher >= 95% train accuracy, white-box student agrees >= 90% on D_eval")
    cfg, info, teacher_time, _ = synthetic_run
    start = time.perf_counter()
    inputs = load_inputs(cfg)
    teacher = load_checkpoint(info["checkpoint"], expect_kind="fcn")
    train_acc = float(np.mean(teacher.predict(inputs.train.values) == inputs.train.labels))
    d_train, d_eval = stratified_split(inputs.test, cfg.split_spec())
    student = build_lenet5_student(ArchitectureSpec("lenet5", 3, 32, 2), seed=cfg.seed + 2)
    report = distill_from_teacher(teacher, student, d_train, cfg.distill_config(), eval_set=d_eval)
    # independent recount of agreement on D_eval
    agree = float(np.mean(student.predict(d_eval.values) == teacher.predict(d_eval.values)))
    elapsed = teacher_time + time.perf_counter() - start
    detail(f"teacher train acc {train_acc:.3f}, student agreement on D_eval {agree:.3f}, {elapsed:.0f}s")
    assert agree == report.agreement_eval
    assert train_acc >= 0.95
    assert agree >= 0.90
    assert elapsed < 300


def test_criterion_5_end_to_end_attack(criterion, detail, synthetic_run):
    criterion(5, "white-box FCN attack yields >= 1 adversary; rule rechecked from persisted batches")
    cfg, info, _, reports = synthetic_run
    out = Path(cfg.out_dir)
    teacher = load_checkpoint(info["checkpoint"], expect_kind="fcn")
    inputs = load_inputs(cfg)
    _, d_eval = stratified_split(inputs.test, cfg.split_spec())
    truth = dict(zip(d_eval.indices.tolist(), d_eval.ground_truth.tolist()))
    eval_reports = [r for r in reports if r.evaluated_on == "eval"]
    assert sorted(r.beta for r in eval_reports) == sorted(cfg.betas)
    best = 0
    for r in eval_reports:
        batch = AdversarialBatch.load(out / "batches" / f"beta_{r.beta:.0e}_eval.bin")
        clean = teacher.predict(batch.x)
        adv = teacher.predict(batch.x_hat)
        y = np.array([truth[i] for i in batch.sample_ids])
        hits = np.flatnonzero((clean == y) & (adv != clean))
        assert sorted(batch.sample_ids[hits].tolist()) == sorted(r.adversary_indices)
        assert len(hits) == r.adversary_count
        if len(hits):
            se = ((batch.x_hat - batch.x) ** 2).mean(axis=(1, 2))[hits].mean()
            assert abs(se - r.mse) <= 1e-12
        best = max(best, r.adversary_count)
    counts = ", ".join(f"{r.beta:.0e}:{r.adversary_count}" for r in eval_reports)
    detail(f"adversaries per beta on D_eval [{counts}]")
    assert best >= 1


def test_criterion_6_generalization(criterion, detail, synthetic_run):
    criterion(6, "generator applied to held-out D_test without weight updates (checksum)")
    cfg, _, _, reports = synthetic_run
    import json

    manifest = json.loads((Path(cfg.out_dir) / "manifest.json").read_text())
    sums = manifest["generator_checksums"]
    test_reports = [r for r in reports if r.evaluated_on == "test"]
    assert len(test_reports) == len(cfg.betas)
    for r in test_reports:
        tag = f"beta_{r.beta:.0e}"
        assert sums[tag]["before"] == sums[tag]["after"]
        # the saved generator (written before generation) has the same checksum
        gen = load_checkpoint(Path(cfg.out_dir) / "generators" / f"{tag}.ckpt")
        assert gen.checksum() == sums[tag]["after"]
    assert manifest["splits"]["test"] == 100
    counts = ", ".join(f"{r.beta:.0e}:{r.adversary_count}" for r in test_reports)
    detail(f"{len(test_reports)} D_test reports, checksums unchanged, adversaries [{counts}]")


# --------------------------------------------------------------------------
# 7. ERing


def _ering_dir() -> Path | None:
    candidates = [os.environ.get(ERING_ENV), Path(__file__).parent / "data" / "ERing"]
    for c in candidates:
        if c and (Path(c) / "ERing_TRAIN.ts").exists() and (Path(c) / "ERing_TEST.ts").exists():
            return Path(c)
    return None


def test_criterion_7_ering_smoke(criterion, detail, tmp_path):
    criterion(7, "black-box 1-NN DTW attack on ERing, < 30 min, >= 1 adversary")
    root = _ering_dir()
    if root is None:
        detail(f"ERing_TRAIN.ts/ERing_TEST.ts not found (set {ERING_ENV} or add tests/data/ERing)")
        pytest.fail(f"ERing archive files unavailable; set {ERING_ENV} to a directory holding them")
    cfg = PipelineConfig(
        train_path=str(root / "ERing_TRAIN.ts"), test_path=str(root / "ERing_TEST.ts"),
        teacher="dtw", mode="black-box", out_dir=str(tmp_path / "ering"), seed=0,
    )
    inputs = load_inputs(cfg)
    assert (len(inputs.train), len(inputs.test), inputs.train.channels, inputs.train.max_length) == (30, 270, 4, 65)
    start = time.perf_counter()
    reports = cmd_attack(cfg)
    elapsed = time.perf_counter() - start
    eval_reports = [r for r in reports if r.evaluated_on == "eval"]
    best = max(eval_reports, key=lambda r: (r.adversary_count, -(r.mse or 0)))
    detail(
        f"best beta {best.beta:.0e}: {best.adversary_count} adversaries, mse {best.mse}; "
        f"reference {ERING_REFERENCE['adversaries']} / {ERING_REFERENCE['mse']}; {elapsed:.0f}s"
    )
    assert elapsed < 1800
    assert best.adversary_count >= 1


# --------------------------------------------------------------------------
# 8. signed-rank


def test_criterion_8_signed_rank(criterion, detail):
    criterion(8, "signed-rank p-values equal exact enumeration (n <= 10)")
    rng = np.random.default_rng(8)
    worst, done = 0.0, 0
    while done < 50:
        n = int(rng.integers(5, 11))
        a = rng.integers(0, 6, n).astype(float) if done % 2 else rng.normal(size=n)
        b = rng.integers(0, 6, n).astype(float) if done % 2 else rng.normal(size=n)
        if np.count_nonzero(a - b) < 5:
            continue
        res = wilcoxon_signed_rank(a, b)
        worst = max(worst, abs(res.p_value - brute_force_signed_rank_p(a, b)))
        done += 1
    _, probs = signed_rank_null(np.arange(1, 11))
    detail(f"max |p - enumeration| {worst:.1e} over 50 cases; null mass {probs.sum():.15f}")
    assert worst <= 1e-12
    assert abs(probs.sum() - 1.0) <= 1e-12


# --------------------------------------------------------------------------
# 9. determinism and persistence


def _small_config(data: Path, out: Path, mode: str) -> PipelineConfig:
    train, test = data / "Det_TRAIN.ts", data / "Det_TEST.ts"
    return PipelineConfig(
        train_path=str(train), test_path=str(test), teacher="fcn", mode=mode, out_dir=str(out), seed=7,
        teacher_epochs=3, student_epochs=3, gatn_epochs=3, betas=(0.1, 0.001),
    )


def test_criterion_9_determinism(criterion, detail, tmp_path):
    criterion(9, "byte-identical reruns; exact checkpoint and .ts round-trips")
    write_synthetic_pair(tmp_path / "data", 24, 24, name="Det", channels=2, length=16, n_classes=2)
    compared = 0
    for mode in ("white-box", "black-box"):
        runs = [tmp_path / f"{mode}-{i}" for i in (1, 2)]
        for r in runs:
            cmd_attack(_small_config(tmp_path / "data", r, mode))
        files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
        files = [f for f in files if f.suffix in (".csv", ".ckpt", ".bin", ".json")]
        assert any(f.name == "reports.csv" for f in files)
        for f in files:
            if f.name == "manifest.json":
                # the manifest records its own output directory; everything else must match
                texts = [(r / f).read_text().replace(str(r), "<run>") for r in runs]
                assert texts[0] == texts[1], f"{mode}: manifest differs beyond the run path"
            else:
                assert filecmp.cmp(runs[0] / f, runs[1] / f, shallow=False), f"{mode}: {f} differs"
            compared += 1
    # checkpoint round-trip
    model = build_fcn(ArchitectureSpec("fcn", 2, 16, 3), seed=1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    again = load_checkpoint(path)
    assert all(np.array_equal(model.state()[k], again.state()[k]) for k in model.state())
    path2 = tmp_path / "m2.ckpt"
    save_checkpoint(again, path2)
    assert path.read_bytes() == path2.read_bytes()
    # .ts round-trip of generated and archive data
    ds = make_bumps(10, channels=2, length=12, n_classes=3, seed=4)
    text = serialize_ts(ds)
    back = parse_ts(text)
    assert back.equals(ds) and serialize_ts(back) == text
    real = Path(__file__).parent / "data" / "BasicMotions" / "BasicMotions_TRAIN.ts"
    bm = load_ts(real)
    assert parse_ts(serialize_ts(bm)).equals(bm)
    detail(f"{compared} artifacts byte-identical across reruns; round-trips exact")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
