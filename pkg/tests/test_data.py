"""Label codec, input assembly, augmentation, fold splits, synthetic data."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avnet.data import (
    AugmentSpec,
    Sample,
    SynthSpec,
    assemble_input,
    augment,
    decode_label_rgb,
    encode_label_rgb,
    identity_augment,
    kfold_split,
    load_dataset,
    save_dataset,
    synth_generate,
)
from avnet.tensor import ShapeError


# ---------------------------------------------------------------------------
# codec


def test_decode_pure_colors():
    img = np.zeros((1, 3, 3), dtype=np.uint8)
    img[0, 0] = (255, 0, 0)
    img[0, 1] = (0, 255, 0)
    img[0, 2] = (0, 0, 255)
    onehot = decode_label_rgb(img)
    assert onehot[0, 0, 0] == 1.0  # artery
    assert onehot[1, 0, 1] == 1.0  # background
    assert onehot[2, 0, 2] == 1.0  # vein


def test_decode_mixed_pixel_argmax():
    img = np.array([[[10, 200, 30]]], dtype=np.uint8)
    onehot = decode_label_rgb(img)
    np.testing.assert_array_equal(onehot[:, 0, 0], [0.0, 1.0, 0.0])


def test_encode_one_hot_and_tie_break():
    label = np.zeros((3, 1, 2), dtype=np.float32)
    label[0, 0, 0] = 1.0  # artery pixel
    label[:, 0, 1] = [0.4, 0.4, 0.2]  # tie resolves to artery
    rgb = encode_label_rgb(label)
    np.testing.assert_array_equal(rgb[0, 0], [255, 0, 0])
    np.testing.assert_array_equal(rgb[0, 1], [255, 0, 0])


@settings(deadline=None, max_examples=25)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_codec_round_trip_on_pure_colors(seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 3, size=(6, 6))
    img = np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255]], dtype=np.uint8)[idx]
    np.testing.assert_array_equal(encode_label_rgb(decode_label_rgb(img)), img)


# ---------------------------------------------------------------------------
# input assembly


def test_assemble_scaling_and_order():
    oct_img = np.full((4, 4), 255, dtype=np.uint8)
    octa_img = np.zeros((4, 4), dtype=np.uint8)
    x = assemble_input(oct_img, octa_img)
    assert x.shape == (2, 4, 4)
    np.testing.assert_array_equal(x[0], np.ones((4, 4), dtype=np.float32))
    np.testing.assert_array_equal(x[1], np.zeros((4, 4), dtype=np.float32))


def test_assemble_size_mismatch():
    with pytest.raises(ShapeError):
        assemble_input(np.zeros((4, 4), dtype=np.uint8), np.zeros((4, 5), dtype=np.uint8))


# ---------------------------------------------------------------------------
# augmentation


def unit_sample(size=32, seed=0) -> Sample:
    rng = np.random.default_rng(seed)
    label = np.zeros((3, size, size), dtype=np.float32)
    idx = rng.integers(0, 3, size=(size, size))
    for c in range(3):
        label[c][idx == c] = 1.0
    return Sample(input=rng.uniform(0, 1, (2, size, size)).astype(np.float32),
                  label=label, id="unit")


def test_identity_spec_is_identity():
    sample = unit_sample()
    out = augment(sample, identity_augment(), np.random.default_rng(3))
    np.testing.assert_array_equal(out.input, sample.input)
    np.testing.assert_array_equal(out.label, sample.label)
    assert out.id == sample.id


def test_flip_twice_restores_sample():
    spec = AugmentSpec(flip_h_prob=1.0, flip_v_prob=0.0, rotation_max_deg=0.0,
                       zoom_range=(1.0, 1.0), shift_max_frac=0.0)
    sample = unit_sample(seed=1)
    once = augment(sample, spec, np.random.default_rng(4))
    assert not np.array_equal(once.input, sample.input)
    twice = augment(once, spec, np.random.default_rng(4))
    np.testing.assert_array_equal(twice.input, sample.input)
    np.testing.assert_array_equal(twice.label, sample.label)


def test_augment_preserves_validity_over_many_draws():
    sample = unit_sample(seed=2)
    spec = AugmentSpec()
    rng = np.random.default_rng(5)
    for _ in range(1000):
        out = augment(sample, spec, rng)
        sums = out.label.sum(axis=0)
        np.testing.assert_array_equal(sums, np.ones_like(sums))
        assert out.input.min() >= 0.0 and out.input.max() <= 1.0
        assert out.input.dtype == np.float32


def test_augment_fills_with_background():
    spec = AugmentSpec(flip_h_prob=0.0, flip_v_prob=0.0, rotation_max_deg=0.0,
                       zoom_range=(1.0, 1.0), shift_max_frac=0.5)
    sample = unit_sample(seed=3)
    sample.input[:] = 1.0
    sample.label[:] = 0.0
    sample.label[0] = 1.0  # all artery, so any fill must be visible
    out = augment(sample, spec, np.random.default_rng(12))
    assert out.label[1].sum() > 0  # background appeared at the pulled-in edge
    assert out.input.min() == 0.0


def test_augment_is_deterministic_given_rng_state():
    sample = unit_sample(seed=4)
    spec = AugmentSpec()
    a = augment(sample, spec, np.random.default_rng(6))
    b = augment(sample, spec, np.random.default_rng(6))
    np.testing.assert_array_equal(a.input, b.input)
    np.testing.assert_array_equal(a.label, b.label)


# ---------------------------------------------------------------------------
# fold splitting


def test_kfold_40_into_5():
    plan = kfold_split(40, 5, seed=0)
    sizes = [len(plan.test_indices(f)) for f in range(5)]
    assert sizes == [8, 8, 8, 8, 8]


def test_kfold_10_into_5():
    plan = kfold_split(10, 5, seed=1)
    assert [len(plan.test_indices(f)) for f in range(5)] == [2] * 5


def test_kfold_deterministic():
    a = kfold_split(23, 4, seed=7)
    b = kfold_split(23, 4, seed=7)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    c = kfold_split(23, 4, seed=8)
    assert not np.array_equal(a.assignments, c.assignments)


def test_kfold_partition_properties():
    rng = np.random.default_rng(9)
    for _ in range(20):
        n = int(rng.integers(5, 60))
        k = int(rng.integers(2, min(n, 8) + 1))
        plan = kfold_split(n, k, seed=int(rng.integers(0, 10_000)))
        all_test = sorted(i for f in range(k) for i in plan.test_indices(f))
        assert all_test == list(range(n))  # disjoint and covering
        sizes = [len(plan.test_indices(f)) for f in range(k)]
        assert max(sizes) - min(sizes) <= 1
        for f in range(k):
            assert set(plan.test_indices(f)).isdisjoint(plan.train_indices(f))


def test_kfold_rejects_small_n():
    with pytest.raises(ValueError):
        kfold_split(3, 5, seed=0)


# ---------------------------------------------------------------------------
# synthetic data


def test_synth_deterministic():
    spec = SynthSpec(count=3, size=64)
    a = synth_generate(spec, seed=11)
    b = synth_generate(spec, seed=11)
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.input, sb.input)
        np.testing.assert_array_equal(sa.label, sb.label)
        assert sa.id == sb.id


def test_synth_labels_valid_and_all_classes_present():
    for sample in synth_generate(SynthSpec(count=5, size=64), seed=12):
        sums = sample.label.sum(axis=0)
        np.testing.assert_array_equal(sums, np.ones_like(sums))
        assert sample.label[0].sum() > 0  # artery
        assert sample.label[1].sum() > 0  # background
        assert sample.label[2].sum() > 0  # vein
        assert sample.input.min() >= 0.0 and sample.input.max() <= 1.0


def test_synth_oct_intensity_bands():
    spec = SynthSpec(count=6, size=64)
    for sample in synth_generate(spec, seed=13):
        artery_mean = sample.input[0][sample.label[0] == 1.0].mean()
        vein_mean = sample.input[0][sample.label[2] == 1.0].mean()
        margin = 2 * spec.noise_sigma
        assert spec.artery_oct_intensity[0] - margin <= artery_mean \
            <= spec.artery_oct_intensity[1] + margin
        assert spec.vein_oct_intensity[0] - margin <= vein_mean \
            <= spec.vein_oct_intensity[1] + margin
        # the learnable cue: class-conditional means separated beyond the noise
        assert artery_mean - vein_mean > 4 * spec.noise_sigma


def test_synth_octa_marks_vessels():
    for sample in synth_generate(SynthSpec(count=3, size=64), seed=14):
        vessel = sample.label[1] == 0.0
        assert sample.input[1][vessel].mean() > 0.6
        assert sample.input[1][~vessel].mean() < 0.2


def test_synth_spec_requires_disjoint_bands():
    with pytest.raises(ValueError, match="disjoint"):
        SynthSpec(artery_oct_intensity=(0.4, 0.7), vein_oct_intensity=(0.3, 0.5))


# ---------------------------------------------------------------------------
# dataset files


def test_dataset_save_load_round_trip(tmp_path):
    samples = synth_generate(SynthSpec(count=3, size=32), seed=15)
    save_dataset(samples, tmp_path)
    assert len(list(tmp_path.glob("*.png"))) == 9
    loaded = load_dataset(tmp_path)
    assert [s.id for s in loaded] == [s.id for s in samples]
    for orig, back in zip(samples, loaded):
        np.testing.assert_array_equal(back.label, orig.label)  # labels are exact
        assert np.max(np.abs(back.input - orig.input)) <= 0.5 / 255.0 + 1e-7


def test_load_dataset_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nothing")
