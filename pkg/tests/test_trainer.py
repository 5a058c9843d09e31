"""Training loop, cross-validation harness, and weight archives."""

import numpy as np
import pytest

from avnet import trainer as trainer_mod
from avnet.blocks import build_avnet
from avnet.config import TrainConfig
from avnet.data import SynthSpec, identity_augment, synth_generate
from avnet.gradcheck import tiny_config
from avnet.tensor import ShapeError, Tensor
from avnet.trainer import (
    ArchiveError,
    TrainingDivergedError,
    archive_from_model,
    derive_seed,
    evaluate,
    load_archive,
    model_from_archive,
    run_cv,
    save_archive,
    train_fold,
    write_archive,
)


def tiny_train_config(**overrides) -> TrainConfig:
    defaults = dict(
        model=tiny_config(),
        augment=identity_augment(),
        batch_size=4,
        train_samples_per_fold=8,  # 2 steps
        k_folds=2,
        eval_every=50,
        seed=123,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def tiny_samples(count, seed=0):
    return synth_generate(SynthSpec(count=count, size=32), seed=seed)


# ---------------------------------------------------------------------------
# step planning


def test_step_count_3000_at_batch_8():
    cfg = tiny_train_config(batch_size=8, train_samples_per_fold=3000)
    _, history = train_fold(cfg, tiny_samples(4), [], dry_run=True)
    assert history.steps_planned == 375


def test_dry_run_builds_no_model_and_cycles_ids():
    cfg = tiny_train_config(train_samples_per_fold=10, batch_size=4)
    archive, history = train_fold(cfg, tiny_samples(3), [], dry_run=True)
    assert archive is None
    assert history.losses == []
    expected = [f"synth{i % 3:04d}" for i in range(10)]
    assert history.draw_ids == expected
    assert history.steps_planned == 3  # ceil(10 / 4), last partial batch kept


def test_fold_isolation():
    samples = tiny_samples(6)
    cfg = tiny_train_config(train_samples_per_fold=50)
    train, test = samples[:4], samples[4:]
    _, history = train_fold(cfg, train, test, dry_run=True)
    test_ids = {s.id for s in test}
    assert test_ids.isdisjoint(history.draw_ids)


# ---------------------------------------------------------------------------
# actual training


def test_train_fold_runs_and_records():
    samples = tiny_samples(4)
    cfg = tiny_train_config()
    archive, history = train_fold(cfg, samples[:3], samples[3:])
    assert [step for step, _ in history.losses] == [1, 2]
    assert all(np.isfinite(value) for _, value in history.losses)
    assert history.evals[-1][0] == 2
    assert set(history.evals[-1][1]) == {0, 1, 2}
    assert set(archive.tensors) == set(build_avnet(cfg.model, 0).store.names())


def test_train_fold_deterministic():
    samples = tiny_samples(4)
    cfg = tiny_train_config()
    _, first = train_fold(cfg, samples[:3], samples[3:])
    _, second = train_fold(cfg, samples[:3], samples[3:])
    assert first.losses == second.losses  # bit-identical floats


def test_train_fold_rejects_wrong_sample_size():
    cfg = tiny_train_config()
    bad = synth_generate(SynthSpec(count=1, size=64), seed=5)
    with pytest.raises(ShapeError, match="expected \\[2, 32, 32\\]"):
        train_fold(cfg, bad, [])


def test_non_finite_loss_aborts_with_step(monkeypatch):
    from avnet.tensor import Tensor as T

    def poisoned(pred, target, cfg=None):
        return T(np.asarray(float("nan")))

    monkeypatch.setattr(trainer_mod, "compound_loss", poisoned)
    cfg = tiny_train_config()
    with pytest.raises(TrainingDivergedError) as exc_info:
        train_fold(cfg, tiny_samples(2), [])
    assert exc_info.value.step == 1


def test_dice_only_mode():
    samples = tiny_samples(2)
    cfg = tiny_train_config(loss_mode="dice_only", train_samples_per_fold=4)
    _, history = train_fold(cfg, samples, [])
    assert all(0.0 <= value <= 1.0 for _, value in history.losses)


def test_evaluate_is_repeatable():
    samples = tiny_samples(3)
    model = build_avnet(tiny_config(), seed=9)
    first = evaluate(model, samples)
    second = evaluate(model, samples)
    assert first == second


# ---------------------------------------------------------------------------
# archives


def test_archive_file_round_trip(tmp_path):
    cfg = tiny_train_config()
    model = build_avnet(cfg.model, cfg.seed)
    path = tmp_path / "model.avnw"
    save_archive(model.store, cfg, path)
    archive = load_archive(path)
    assert list(archive.tensors) == model.store.names()
    for name, tensor, trainable in model.store.items():
        np.testing.assert_array_equal(archive.tensors[name], tensor.data)
        assert archive.trainable[name] == trainable
    assert archive.train_config() == cfg

    # reserializing the loaded archive reproduces the file bit for bit
    second = tmp_path / "again.avnw"
    write_archive(archive, second)
    assert path.read_bytes() == second.read_bytes()


def test_archive_reload_gives_identical_predictions(tmp_path):
    cfg = tiny_train_config()
    archive, _ = train_fold(cfg, tiny_samples(2), [])
    path = tmp_path / "fold.avnw"
    write_archive(archive, path)
    model, loaded_cfg = model_from_archive(load_archive(path))
    assert loaded_cfg.model == cfg.model
    x = Tensor(tiny_samples(1, seed=77)[0].input[None])
    out_a = model.forward(x, "eval").data
    model_b, _ = model_from_archive(load_archive(path))
    np.testing.assert_array_equal(out_a, model_b.forward(x, "eval").data)


def test_truncated_archive_rejected(tmp_path):
    cfg = tiny_train_config()
    model = build_avnet(cfg.model, cfg.seed)
    path = tmp_path / "model.avnw"
    save_archive(model.store, cfg, path)
    blob = path.read_bytes()
    for cut in (len(blob) // 3, len(blob) - 2):
        clipped = tmp_path / "clipped.avnw"
        clipped.write_bytes(blob[:cut])
        with pytest.raises(ArchiveError, match="truncated"):
            load_archive(clipped)


def test_corrupt_magic_version_and_trailing_bytes(tmp_path):
    cfg = tiny_train_config()
    model = build_avnet(cfg.model, cfg.seed)
    path = tmp_path / "model.avnw"
    save_archive(model.store, cfg, path)
    blob = path.read_bytes()

    bad_magic = tmp_path / "magic.avnw"
    bad_magic.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(ArchiveError, match="magic"):
        load_archive(bad_magic)

    bad_version = tmp_path / "version.avnw"
    bad_version.write_bytes(blob[:4] + b"\x09\x00\x00\x00" + blob[8:])
    with pytest.raises(ArchiveError, match="version"):
        load_archive(bad_version)

    trailing = tmp_path / "trailing.avnw"
    trailing.write_bytes(blob + b"xx")
    with pytest.raises(ArchiveError, match="trailing"):
        load_archive(trailing)


def test_archive_payload_is_float32(tmp_path):
    model = build_avnet(tiny_config(), seed=3, dtype=np.float64)
    cfg = tiny_train_config()
    path = tmp_path / "f64.avnw"
    save_archive(model.store, cfg, path)
    archive = load_archive(path)
    assert all(arr.dtype == np.float32 for arr in archive.tensors.values())


# ---------------------------------------------------------------------------
# cross validation


def test_run_cv_smoke(tmp_path):
    samples = tiny_samples(4)
    cfg = tiny_train_config(k_folds=2, train_samples_per_fold=4,
                            checkpoint_dir=str(tmp_path / "cv"))
    report = run_cv(cfg, samples)
    assert report.num_folds == 2
    assert report.fold_test_counts == [2, 2]
    assert set(report.rows) == {"artery", "vein", "average"}
    out = tmp_path / "cv"
    for expected in ("fold0.avnw", "fold1.avnw", "report.csv", "report.txt",
                     "loss_curves.png", "metrics_summary.png"):
        assert (out / expected).exists()


def test_run_cv_degenerate_two_samples(tmp_path):
    samples = tiny_samples(2)
    cfg = tiny_train_config(k_folds=2, train_samples_per_fold=4,
                            checkpoint_dir=str(tmp_path / "cv"))
    report = run_cv(cfg, samples)
    assert report.fold_test_counts == [1, 1]


def test_derive_seed_is_stable_and_spread():
    assert derive_seed(42, 1, 0) == derive_seed(42, 1, 0)
    assert derive_seed(42, 1, 0) != derive_seed(42, 1, 1)
    assert derive_seed(42, 1, 0) != derive_seed(43, 1, 0)
    assert derive_seed(42, 2, 0) != derive_seed(42, 1, 0)
