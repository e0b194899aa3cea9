import hashlib
import json

import pytest

from main import build_parser, main


@pytest.fixture(autouse=True)
def no_output_root(monkeypatch):
    monkeypatch.delenv("ANOMALY_OUTPUT_ROOT", raising=False)


@pytest.fixture
def config_file(tmp_path, experiment_document):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(experiment_document))
    return str(path)


def tree_digest(root) -> str:
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.name != "config.json"):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def test_synth_with_defaults_writes_manifest(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "out")]) == 0
    manifest = tmp_path / "out" / "data" / "manifest.json"
    assert str(manifest) in capsys.readouterr().out
    assert len(json.loads(manifest.read_text())["samples"]) == (20 + 4 + 8) * 10


def test_invalid_blob_radius_exits_nonzero_naming_the_field(tmp_path, experiment_document, capsys):
    experiment_document["data"]["blob_radius"] = [0.5, 2.0]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(experiment_document))
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "out")]) == 1
    assert "blob_radius" in capsys.readouterr().err


def test_repeated_seed_gives_identical_checksums(tmp_path, config_file):
    assert main(["synth", "--config", config_file, "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--config", config_file, "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    assert main(["synth", "--config", config_file, "--seed", "4", "--out", str(tmp_path / "c")]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_outputs_are_not_overwritten_without_force(tmp_path, config_file):
    out = str(tmp_path / "out")
    assert main(["synth", "--config", config_file, "--out", out]) == 0
    assert main(["synth", "--config", config_file, "--out", out]) == 1
    assert main(["synth", "--config", config_file, "--out", out, "--force"]) == 0


def test_train_eval_report(tmp_path, config_file):
    out = tmp_path / "out"
    assert main(["train", "--config", config_file, "--out", str(out)]) == 0
    assert sorted(p.parent.name for p in out.glob("run_*/checkpoint.pt")) == ["run_0", "run_1"]
    assert main(["eval", "--config", config_file, "--out", str(out)]) == 0
    assert main(["eval", "--config", config_file, "--out", str(out)]) == 1
    assert main(["eval", "--config", config_file, "--out", str(out), "--method", "residual", "--regime", "fixed:0.5"]) == 0
    assert (out / "run_0" / "eval" / "residual" / "fixed_0.5.json").exists()
    assert main(["report", "--config", config_file, "--out", str(out)]) == 0
    assert (out / "report.csv").exists() and (out / "report.txt").exists()


def test_vanilla_and_resume(tmp_path, config_file):
    out = tmp_path / "out"
    assert main(["train", "--config", config_file, "--out", str(out), "--constraint", "none", "--repetitions", "1"]) == 0
    records = [json.loads(line) for line in (out / "run_0" / "train_log.jsonl").read_text().splitlines()]
    assert {r["phase"] for r in records} == {"warmup"}

    checkpoint = str(out / "run_0" / "checkpoint.pt")
    assert main(["train", "--config", config_file, "--out", str(out), "--resume", checkpoint, "--total-steps", "6"]) == 0
    records = [json.loads(line) for line in (out / "run_0" / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [1, 2, 3, 4, 5, 6]


def test_pipelines_with_equal_seeds_produce_identical_reports(tmp_path, config_file):
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["synth", "--config", config_file, "--out", out]) == 0
        assert main(["train", "--config", config_file, "--out", out, "--repetitions", "1"]) == 0
        assert main(["eval", "--config", config_file, "--out", out]) == 0
    for regime in ("fixed_0.5", "op", "percentile_95"):
        first = (tmp_path / "a" / "run_0" / "eval" / "attention" / f"{regime}.json").read_bytes()
        second = (tmp_path / "b" / "run_0" / "eval" / "attention" / f"{regime}.json").read_bytes()
        assert first == second


def test_operating_point_on_unlabeled_slices_cites_the_limitation(tmp_path, config_file, capsys):
    out = tmp_path / "out"
    assert main(["synth", "--config", config_file, "--out", str(out)]) == 0
    assert main(["train", "--config", config_file, "--out", str(out), "--repetitions", "1"]) == 0
    manifest_path = out / "data" / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    for entry in manifest["samples"]:
        entry["mask_path"] = None
    unlabeled = out / "data" / "unlabeled.json"
    unlabeled.write_text(json.dumps(manifest))
    assert main(["eval", "--config", config_file, "--out", str(out), "--dataset", str(unlabeled), "--regime", "op"]) == 1
    assert "unsupervised" in capsys.readouterr().err


def test_ablate_writes_table(tmp_path, config_file):
    out = tmp_path / "out"
    assert main(["ablate", "--config", config_file, "--out", str(out), "--axis", "t", "--values", "10,20"]) == 0
    assert (out / "ablation_t" / "ablation_t.csv").exists()


def test_unknown_axis_is_a_usage_error():
    with pytest.raises(SystemExit) as excinfo:
        build_parser().parse_args(["ablate", "--axis", "dropout"])
    assert excinfo.value.code == 2
