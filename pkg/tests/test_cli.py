import csv
import json

import numpy as np
import pytest
import yaml

from cxr_triage.cli import main
from cxr_triage.config import OUTPUT_ENV, ConfigError, RunConfig, substream_seed
from cxr_triage.dataset import read_manifest
from cxr_triage.metrics import PredictionMatrix, write_predictions


def write_config(path, covid, pneu, out, **extra):
    cfg = {
        "output_dir": str(out),
        "data": {"covid_dir": str(covid), "covid_metadata": str(covid / "metadata.csv"),
                 "pneumonia_dir": str(pneu)},
        "split": {"val_count": 2},
        "preprocess": {"target_size": 32},
        "model": {"backbone": "tiny"},
        "stage1": {"batch_size": 16, "max_epochs": 1},
        "stage2": {"batch_size": 8, "max_epochs": 1},
        "metrics": {"bootstrap_resamples": 10},
    }
    for key, value in extra.items():
        cfg.setdefault(key, {}).update(value) if isinstance(value, dict) else cfg.__setitem__(key, value)
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture
def config(tmp_path, sources):
    covid, pneu = sources
    return write_config(tmp_path / "run.yaml", covid, pneu, tmp_path / "out")


def test_prepare_data_outputs_and_determinism(config, tmp_path, capsys):
    assert main(["prepare-data", "--config", str(config)]) == 0
    out = tmp_path / "out"
    first = (out / "manifest.csv").read_text()
    manifest = read_manifest(out / "manifest.csv")
    assert len(manifest.records) == 52 and not manifest.check_patient_integrity()
    rejects = (out / "rejects.tsv").read_text()
    assert "missing.png" in rejects
    for name in ("split_summary_images.csv", "split_summary_patients.csv", "effective_config.yaml"):
        assert (out / name).is_file()
    assert "Patient-wise split" in capsys.readouterr().out
    assert main(["prepare-data", "--config", str(config)]) == 0
    assert (out / "manifest.csv").read_text() == first
    assert main(["prepare-data", "--config", str(config), "--seed", "7"]) == 0
    assert (out / "manifest.csv").read_text() != first


def test_empty_sources_exit_2(tmp_path, capsys):
    (tmp_path / "c").mkdir()
    (tmp_path / "p").mkdir()
    (tmp_path / "c" / "metadata.csv").write_text("patientid,finding,view,filename\n")
    cfg = write_config(tmp_path / "r.yaml", tmp_path / "c", tmp_path / "p", tmp_path / "o")
    assert main(["prepare-data", "--config", str(cfg)]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_paths_exit_2(tmp_path):
    cfg = write_config(tmp_path / "r.yaml", tmp_path / "nope", tmp_path / "nada", tmp_path / "o")
    assert main(["prepare-data", "--config", str(cfg)]) == 2


def test_config_errors_are_collected(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"class_mode": "five", "stage1": {"lr": -1}, "bogus": 1,
                                   "split": {"test_fraction": 1.5}}))
    with pytest.raises(ConfigError) as exc:
        RunConfig.load(bad)
    text = str(exc.value)
    for needle in ("class_mode", "stage1", "bogus", "test_fraction"):
        assert needle in text
    assert len(exc.value.problems) >= 4
    assert main(["train", "--config", str(bad)]) == 2


def test_usage_errors_exit_2(tmp_path):
    assert main(["train"]) == 2
    assert main(["evaluate", "--output-dir", str(tmp_path)]) == 2


def test_flag_file_default_precedence(tmp_path, monkeypatch):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"seed": 3, "output_dir": "from_file"}))
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    cfg = RunConfig.load(path)
    assert cfg.seed == 3 and cfg.output_dir == tmp_path / "from_file"
    assert cfg.stage_config(1).batch_size == 16
    cfg = RunConfig.load(path, {"seed": 5, "output_dir": str(tmp_path / "flag")})
    assert cfg.seed == 5 and cfg.output_dir == tmp_path / "flag"
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert RunConfig.load(path).output_dir == tmp_path / "env"
    assert RunConfig.load(path, {"output_dir": str(tmp_path / "flag")}).output_dir == tmp_path / "flag"


def test_substream_seeds_differ_and_are_stable():
    assert substream_seed(0, "split") == substream_seed(0, "split")
    assert len({substream_seed(0, n) for n in ("split", "stage1", "stage2", "init")}) == 4
    assert substream_seed(0, "split") != substream_seed(1, "split")


def test_effective_config_roundtrip(config, tmp_path):
    assert main(["prepare-data", "--config", str(config)]) == 0
    echo = tmp_path / "out" / "effective_config.yaml"
    again = RunConfig.load(echo)
    assert again.data == yaml.safe_load(echo.read_text())
    assert again.manifest_path.parent == (tmp_path / "out").resolve()


def test_evaluate_prediction_file(tmp_path):
    labels = np.repeat(np.arange(4), 5)
    pred = PredictionMatrix(np.eye(4)[labels] * 0.8 + 0.1, labels, ["a", "b", "c", "d"])
    write_predictions(pred, tmp_path / "p.csv")
    rc = main(["evaluate", "--predictions", str(tmp_path / "p.csv"), "--output-dir", str(tmp_path / "o")])
    assert rc == 0
    ev = tmp_path / "o" / "eval"
    report = json.loads((ev / "report.json").read_text())
    assert report["accuracy"] == 1.0 and report["bootstrap_f1"]["f1_point"] == 1.0
    for name in ("roc.png", "confusion.png", "per_class.csv", "confusion.csv", "predictions.csv"):
        assert (ev / name).stat().st_size > 0
    rows = list(csv.reader((ev / "confusion.csv").open()))
    assert rows[1] == ["a", "5", "0", "0", "0"]


def test_train_infer_explain_evaluate(config, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["prepare-data", "--config", str(config)]) == 0
    assert main(["train", "--config", str(config)]) == 0
    ckpts = out / "checkpoints"
    for name in ("stage1_best.pt", "stage2_best.pt", "stage1_log.jsonl", "stage2_log.jsonl"):
        assert (ckpts / name).is_file()
    final = out / "final.pt"
    assert final.is_file()

    # stage 2 alone resumes from the stage-1 selection
    assert main(["train", "--config", str(config), "--stage", "2"]) == 0

    images = [r.image_path for r in read_manifest(out / "manifest.csv").records[:2]]
    capsys.readouterr()
    assert main(["infer", "--checkpoint", str(final), "--output-dir", str(out), *images]) == 0
    rows = list(csv.reader((out / "infer_scores.csv").open()))
    assert rows[0][:2] == ["image", "prediction"] and len(rows) == 3
    scores = np.array(rows[1][2:], dtype=float)
    assert scores.shape == (4,) and np.all((scores > 0) & (scores < 1))
    assert rows[1][1] in rows[0][2:]

    assert main(["explain", "--checkpoint", str(final), "--output-dir", str(out), "--masks", "20",
                 "--all-classes", images[0]]) == 0
    sal = out / "saliency"
    stem = images[0].rsplit("/", 1)[-1].rsplit(".", 1)[0]
    maps = np.load(sal / f"{stem}_saliency.npz")["maps"]
    assert maps.shape == (4, 32, 32) and np.all(maps >= 0)
    assert len(list(sal.glob(f"{stem}_*.png"))) == 4
    assert json.loads((sal / f"{stem}_saliency.json").read_text())["mask_spec"]["num_masks"] == 20

    assert main(["evaluate", "--config", str(config), "--checkpoint", str(final)]) == 0
    report = json.loads((out / "eval" / "report.json").read_text())
    assert report["n"] == len(read_manifest(out / "manifest.csv").subset("test"))


def test_infer_bad_image_exit_1(config, tmp_path):
    from cxr_triage.model import ClassifierSpec, build_model, save_checkpoint
    spec = ClassifierSpec(num_classes=4, backbone="tiny")
    ck = save_checkpoint(build_model(spec), tmp_path / "m.pt", spec=spec, epoch=1, stage=1, val_loss=1.0,
                         class_config={"classes": list("abcd"), "sampling_ratio": [5, 5, 5, 1]})
    (tmp_path / "junk.png").write_bytes(b"not an image")
    assert main(["infer", "--checkpoint", str(ck), "--output-dir", str(tmp_path), str(tmp_path / "junk.png")]) == 1


def test_stage_batch_defaults_follow_class_mode():
    four, three = RunConfig(), RunConfig({"class_mode": "three_class"})
    assert (four.stage_config(1).batch_size, four.stage_config(2).batch_size) == (16, 8)
    assert (three.stage_config(1).batch_size, three.stage_config(2).batch_size) == (15, 8)
    with pytest.raises(ConfigError, match="stage1"):
        RunConfig({"class_mode": "three_class", "stage1": {"batch_size": 16}})
