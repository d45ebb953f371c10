import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from helpers import write_synthetic_pair
from mtsadv.checkpoint import load_checkpoint
from mtsadv.cli import main
from mtsadv.evaluation import AttackReport, emit_report, wilcoxon_signed_rank
from mtsadv.pipeline import CACHE_ENV, PipelineConfig, PipelineError, cmd_attack, cmd_report, cmd_train_teacher

FAST = dict(teacher_epochs=3, student_epochs=3, gatn_epochs=2, seed=1)


@pytest.fixture
def data(tmp_path):
    return write_synthetic_pair(tmp_path / "data", 20, 20, name="Tiny", channels=2, length=16, n_classes=2)


def _digest(paths):
    return [hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in paths]


def test_train_teacher_fcn_checkpoint_reloads(data, tmp_path):
    cfg = PipelineConfig(train_path=str(data[0]), test_path=str(data[1]), out_dir=str(tmp_path / "o"), **FAST)
    info = cmd_train_teacher(cfg)
    model = load_checkpoint(info["checkpoint"], expect_kind="fcn")
    assert model.spec.channels == 2 and (tmp_path / "o" / "teacher_loss.csv").exists()


def test_dtw_cache_hit_on_second_run(data, tmp_path, caplog, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "cache"))
    cfg = PipelineConfig(train_path=str(data[0]), test_path=str(data[1]), teacher="dtw",
                         out_dir=str(tmp_path / "o"), **FAST)
    first = cmd_train_teacher(cfg)
    with caplog.at_level("INFO", logger="mtsadv.pipeline"):
        second = cmd_train_teacher(cfg)
    assert not first["cache_hit"] and second["cache_hit"]
    assert "cache hit" in caplog.text
    assert Path(second["cache"]).parent == tmp_path / "cache"
    literal = PipelineConfig(**{**cfg.to_dict(), "literal_dtw_init": True})
    assert not cmd_train_teacher(literal)["cache_hit"]


def test_corrupt_file_exits_nonzero_with_line(data, tmp_path, capsys):
    bad = tmp_path / "bad.ts"
    lines = Path(data[0]).read_text().splitlines()
    lines[12] = lines[12].replace(":c", ":zzz")
    bad.write_text("\n".join(lines) + "\n")
    code = main(["train-teacher", "--train-path", str(bad), "--test-path", str(data[1]),
                 "--out-dir", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert code != 0
    assert "line 13" in err and "bad.ts" in err


def test_white_box_fcn_run_layout_and_no_input_mutation(data, tmp_path):
    before = _digest(data)
    cfg = PipelineConfig(train_path=str(data[0]), test_path=str(data[1]), out_dir=str(tmp_path / "o"), **FAST)
    reports = cmd_attack(cfg)
    out = tmp_path / "o"
    assert len((out / "reports.csv").read_text().splitlines()) == 1 + 5
    assert len((out / "generalization.csv").read_text().splitlines()) == 1 + 5
    assert len(reports) == 10
    assert len(list((out / "generators").glob("*.ckpt"))) == 5
    assert len(list((out / "batches").glob("*.bin"))) == 10
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["routing"]["surrogate"] == "teacher"
    assert manifest["inputs"]["train"] == before[0]
    assert set(manifest["versions"]) >= {"mtsadv", "numpy", "python"}
    assert not (out / "student.ckpt").exists()
    assert _digest(data) == before
    splits = json.loads((out / "splits.json").read_text())
    assert sorted(splits["splits"]["train"] + splits["splits"]["eval"]) == list(range(20))


def test_black_box_dtw_routes_through_labels_and_student(data, tmp_path):
    cfg = PipelineConfig(train_path=str(data[0]), test_path=str(data[1]), teacher="dtw", mode="black-box",
                         out_dir=str(tmp_path / "o"), betas=(0.1,), **FAST)
    cmd_attack(cfg)
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["routing"] == {"surrogate": "student", "teacher_access": "labels-only",
                            "teacher_signal": "predicted-labels"}
    assert m["fidelity"]["teacher-kind"] == "dtw" and m["fidelity"]["mode"] == "black-box"
    assert (tmp_path / "o" / "student.ckpt").exists()


def test_white_box_dtw_uses_soft_1nn(data, tmp_path):
    cfg = PipelineConfig(train_path=str(data[0]), test_path=str(data[1]), teacher="dtw", mode="white-box",
                         out_dir=str(tmp_path / "o"), betas=(0.1,), **FAST)
    cmd_attack(cfg)
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["routing"]["teacher_signal"] == "soft-1nn" and m["routing"]["surrogate"] == "student"


def test_stage_failure_names_stage(data, tmp_path):
    cfg = PipelineConfig(train_path=str(tmp_path / "missing.ts"), test_path=str(data[1]), out_dir=str(tmp_path))
    with pytest.raises(PipelineError, match="ingest") as info:
        cmd_attack(cfg)
    assert info.value.stage == "ingest"


def test_config_file_and_flag_override(data, tmp_path, capsys):
    cfg_file = tmp_path / "run.yaml"
    cfg_file.write_text(
        f"train_path: {data[0]}\ntest_path: {data[1]}\nteacher_epochs: 2\nstudent_epochs: 2\n"
        f"gatn_epochs: 1\nbetas: [0.1, 0.01]\nout_dir: {tmp_path / 'ignored'}\n"
    )
    code = main(["attack", "--config", str(cfg_file), "--out-dir", str(tmp_path / "o"), "--mode", "black-box"])
    assert code == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["config"]["mode"] == "black-box" and m["config"]["betas"] == [0.1, 0.01]
    assert not (tmp_path / "ignored").exists()
    with pytest.raises(ValueError, match="unknown configuration keys"):
        PipelineConfig.from_dict({"epochs": 3})


def _fake_run(root: Path, mode: str, model: str, counts: dict[str, list[int]]) -> Path:
    reports = []
    for ds, per_beta in counts.items():
        for beta, c in zip((0.1, 0.01), per_beta):
            reports.append(AttackReport(ds, mode, model, beta, 0, "eval", 50, c, 0.1 + 0.01 * c if c else None,
                                        0.05, list(range(c))))
    out = root / f"{mode}-{model}"
    emit_report(reports, out, stem="reports")
    return out


def test_report_four_runs_six_comparisons(tmp_path):
    rng = np.random.default_rng(0)
    names = [f"D{i}" for i in range(8)]
    runs = [
        _fake_run(tmp_path, mode, model, {n: rng.integers(1, 40, 2).tolist() for n in names})
        for mode, model in (("white-box", "fcn"), ("black-box", "dtw"), ("black-box", "fcn"), ("white-box", "dtw"))
    ]
    comp = cmd_report(runs, tmp_path / "combined")
    assert len(comp["pairs"]) == 6
    assert [(p["a"], p["b"]) for p in comp["pairs"]][0] == ("black-box dtw", "white-box dtw")
    # delegated p-values equal a direct call on the best-beta counts
    payloads = {p.name: json.loads((p / "reports.json").read_text())["reports"] for p in runs}

    def best(run):
        out = {}
        for r in payloads[run]:
            cur = out.get(r["dataset"])
            if cur is None or r["adversary_count"] > cur:
                out[r["dataset"]] = r["adversary_count"]
        return [out[n] for n in names]

    first = comp["pairs"][0]
    expected = wilcoxon_signed_rank(best("black-box-dtw"), best("white-box-dtw")).p_value
    assert first["adversaries"]["p_value"] == expected
    assert (tmp_path / "combined" / "combined.csv").exists()
    assert (tmp_path / "combined" / "comparison_matrix.json").exists()


def test_report_single_run_and_asymmetry(tmp_path):
    one = _fake_run(tmp_path, "white-box", "fcn", {"A": [1, 2], "B": [0, 3]})
    comp = cmd_report([one], tmp_path / "c1")
    assert comp["pairs"] == [] and "skipped" in comp["notice"]
    other = _fake_run(tmp_path, "black-box", "fcn", {"A": [1, 2], "C": [4, 0]})
    with pytest.raises(ValueError, match=r"asymmetric: \['B', 'C'\]"):
        cmd_report([one, other], tmp_path / "c2")


def test_report_underpowered_comparison_has_reason(tmp_path):
    a = _fake_run(tmp_path, "white-box", "fcn", {"A": [1, 2], "B": [0, 3]})
    b = _fake_run(tmp_path, "black-box", "fcn", {"A": [5, 2], "B": [1, 3]})
    comp = cmd_report([a, b], tmp_path / "c")
    assert comp["pairs"][0]["adversaries"]["p_value"] is None
    assert "nonzero" in comp["pairs"][0]["adversaries"]["reason"]


def test_cli_report_command(tmp_path, capsys):
    one = _fake_run(tmp_path, "white-box", "fcn", {"A": [1, 2]})
    assert main(["report", str(one), "--out-dir", str(tmp_path / "c")]) == 0
    assert "skipped" in capsys.readouterr().out
