import json

import pytest

from protoalign.cli import main
from protoalign.harness import RunManifest, is_complete
from protoalign.reporting import read_report

CONFIG = {
    "model": {"num_classes": 2, "prototypes_per_class": 2, "prototype_dim": 4, "latent_height": 4,
              "latent_width": 4, "input_height": 16, "input_width": 16, "hidden_channels": 8},
    "train": {"pretrain_epochs": 1, "warmup_epochs": 1, "joint_epochs": 1, "last_layer_epochs": 1,
              "batch_size": 4},
    "aug": {"apply_probability": 0.5},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["generate-data", "--out", str(data), "--num-classes", "2", "--train-per-class", "4",
                 "--test-per-class", "3", "--image-size", "16", "--part-size", "4", "6"]) == 0
    cfg = root / "config.json"
    cfg.write_text(json.dumps(CONFIG))
    reports = {}
    for name, lam, aug in (("baseline", "0", "off"), ("compensated", "10", "on")):
        run = root / name
        assert main(["train", "--config", str(cfg), "--data", str(data), "--lambda-align", lam,
                     "--masking-aug", aug, "--smooth-mask", "off", "--seed", "1", "--out", str(run)]) == 0
        assert main(["benchmark", "--checkpoint", str(run / "phase_last-layer.ckpt"), "--data", str(data),
                     "--split", str(data / "split.txt"), "--eps-total", "0.4", "--eps-step", "0.01",
                     "--iters", "5", "--seed", "1", "--out", str(run / "bench")]) == 0
        reports[name] = run / "bench" / "report.json"
    return root, data, reports


def test_generate_data_outputs(pipeline):
    root, data, _ = pipeline
    assert (data / "split.txt").exists()
    assert is_complete(str(data) + ".meta")


def test_train_outputs(pipeline):
    root, _, _ = pipeline
    run = root / "compensated"
    for phase in ("warmup", "joint", "projection", "pruning", "last-layer"):
        assert (run / f"phase_{phase}.ckpt").exists()
    m = RunManifest.read(run / "manifest.json")
    assert m.status == "complete" and m.config["train"]["lambda_align"] == 10.0
    assert m.config["train"]["masking_augmentation"] is True and m.seeds == [1]
    assert "train_log.csv" in m.outputs


def test_benchmark_report(pipeline):
    _, _, reports = pipeline
    rep = read_report(reports["baseline"])
    assert len(rep.records) == 6 and rep.config["pgd"]["iterations"] == 5


def test_report_and_plot(pipeline, capsys):
    root, _, reports = pipeline
    args = [f"{k}={v}" for k, v in reports.items()]
    assert main(["report", *args, "--out", str(root / "summary")]) == 0
    text = capsys.readouterr().out
    assert "baseline" in text and "compensated" in text
    summary = json.loads((root / "summary" / "summary.json").read_text())
    assert set(summary) == {"baseline", "compensated"}
    assert main(["plot", *args, "--out", str(root / "plots")]) == 0
    assert (root / "plots" / "metrics_bar.png").exists()


def test_output_root_env(pipeline, monkeypatch, tmp_path):
    _, data, _ = pipeline
    monkeypatch.setenv("PROTOALIGN_OUT", str(tmp_path))
    ckpt = pipeline[0] / "baseline" / "phase_last-layer.ckpt"
    assert main(["benchmark", "--checkpoint", str(ckpt), "--data", str(data), "--iters", "0"]) == 0
    assert (tmp_path / "benchmark" / "report.json").exists()


def test_failure_exit_code(tmp_path):
    assert main(["benchmark", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 1
    with pytest.raises(SystemExit):
        main(["train", "--data", "x", "--masking-aug", "maybe"])
