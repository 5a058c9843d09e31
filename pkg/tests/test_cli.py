"""Command-line workflows and the exit-code contract."""

import numpy as np
import pytest
from PIL import Image

from avnet.cli import main

TINY_CONFIG = """
# desk-scale smoke configuration
synth.count=6
synth.size=32
model.dense_block_layers=1,1,1,1
model.growth_rate=2
model.stem_channels=4
model.decoder_channels=8,8,4,4
model.input_size=32
train_samples_per_fold=4
batch_size=4
k_folds=5
eval_every=10
augment.rotation_max_deg=5
"""


@pytest.fixture()
def workspace(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    return tmp_path, cfg


def synth_into(tmp_path, cfg, name="data", seed="7"):
    out = tmp_path / name
    assert main(["synth", "--config", str(cfg), "--out", str(out), "--seed", seed]) == 0
    return out


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_three_pngs_per_sample(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("synth.count=4\nsynth.size=64\n")
    out = tmp_path / "data"
    assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(list(out.glob("*.png"))) == 12


def test_synth_same_seed_byte_identical(workspace):
    tmp_path, cfg = workspace
    a = synth_into(tmp_path, cfg, "a", seed="5")
    b = synth_into(tmp_path, cfg, "b", seed="5")
    for path_a in sorted(a.glob("*.png")):
        path_b = b / path_a.name
        assert path_a.read_bytes() == path_b.read_bytes()


def test_synth_invalid_config_key_is_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("synth.count=2\nbogus_key=1\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "line 2" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train


def test_train_writes_archives_report_and_figures(workspace):
    tmp_path, cfg = workspace
    data = synth_into(tmp_path, cfg)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data),
                 "--out", str(run)]) == 0
    for i in range(5):
        assert (run / f"fold{i}.avnw").exists()
    report_lines = (run / "report.csv").read_text().strip().splitlines()
    assert len(report_lines) == 4  # header + artery/vein/average
    assert (run / "loss_curves.png").exists()
    assert (run / "metrics_summary.png").exists()


def test_train_rerun_is_byte_identical(workspace):
    tmp_path, cfg = workspace
    data = synth_into(tmp_path, cfg)
    first = tmp_path / "run1"
    second = tmp_path / "run2"
    for out in (first, second):
        assert main(["train", "--config", str(cfg), "--data", str(data),
                     "--out", str(out)]) == 0
    assert (first / "report.csv").read_bytes() == (second / "report.csv").read_bytes()
    assert (first / "fold0.avnw").read_bytes() == (second / "fold0.avnw").read_bytes()


def test_train_missing_data_is_exit_3(workspace):
    tmp_path, cfg = workspace
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "run")]) == 3


def test_train_divergence_is_exit_4(workspace, monkeypatch):
    import avnet.cli as cli_mod
    from avnet.trainer import TrainingDivergedError

    tmp_path, cfg = workspace
    data = synth_into(tmp_path, cfg)

    def exploded(cfg, dataset):
        raise TrainingDivergedError(7, "non-finite loss at step 7")

    monkeypatch.setattr(cli_mod, "run_cv", exploded)
    assert main(["train", "--config", str(cfg), "--data", str(data),
                 "--out", str(tmp_path / "run")]) == 4


# ---------------------------------------------------------------------------
# predict


@pytest.fixture()
def trained(workspace):
    tmp_path, cfg = workspace
    data = synth_into(tmp_path, cfg)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data),
                 "--out", str(run)]) == 0
    return tmp_path, cfg, data, run / "fold0.avnw"


def test_predict_writes_pure_color_map(trained):
    tmp_path, _, data, weights = trained
    oct_path = sorted(data.glob("*_oct.png"))[0]
    octa_path = data / oct_path.name.replace("_oct", "_octa")
    out = tmp_path / "pred.png"
    assert main(["predict", "--weights", str(weights), "--oct", str(oct_path),
                 "--octa", str(octa_path), "--out", str(out)]) == 0
    rgb = np.asarray(Image.open(out).convert("RGB"))
    colors = {tuple(px) for px in rgb.reshape(-1, 3)}
    assert colors <= {(255, 0, 0), (0, 255, 0), (0, 0, 255)}

    again = tmp_path / "pred2.png"
    assert main(["predict", "--weights", str(weights), "--oct", str(oct_path),
                 "--octa", str(octa_path), "--out", str(again)]) == 0
    assert out.read_bytes() == again.read_bytes()


def test_predict_size_mismatch_is_exit_3(trained, tmp_path, capsys):
    _, _, _, weights = trained
    big = tmp_path / "big.png"
    Image.fromarray(np.zeros((64, 64), dtype=np.uint8), mode="L").save(big)
    assert main(["predict", "--weights", str(weights), "--oct", str(big),
                 "--octa", str(big), "--out", str(tmp_path / "o.png")]) == 3
    assert "32x32" in capsys.readouterr().err  # names the expected size


# ---------------------------------------------------------------------------
# eval


def test_eval_runs_on_dataset(trained, capsys):
    _, _, data, weights = trained
    assert main(["eval", "--weights", str(weights), "--data", str(data)]) == 0
    out = capsys.readouterr().out
    for row in ("artery", "vein", "average"):
        assert row in out
    assert "±" not in out  # single evaluation: no std column


def test_eval_pass_through_scores_100(trained, capsys):
    _, _, data, _ = trained
    assert main(["eval", "--data", str(data), "--pass-through"]) == 0
    out = capsys.readouterr().out
    assert out.count("100.000") >= 9


def test_eval_without_weights_or_passthrough_is_exit_2(trained):
    _, _, data, _ = trained
    assert main(["eval", "--data", str(data)]) == 2


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_passes_and_is_repeatable(capsys):
    assert main(["gradcheck", "--seed", "3"]) == 0
    first = capsys.readouterr().out
    assert main(["gradcheck", "--seed", "3"]) == 0
    second = capsys.readouterr().out
    assert first == second
    assert "PASS" in first and "FAIL" not in first


def test_gradcheck_corruption_is_exit_5(capsys):
    assert main(["gradcheck", "--seed", "3", "--corrupt", "conv2d"]) == 5
    out = capsys.readouterr().out
    assert "FAILED: conv2d" in out
