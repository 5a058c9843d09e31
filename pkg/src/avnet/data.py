"""Sample construction, label codec, augmentation, fold splitting, and the
synthetic OCT/OCTA dataset generator.

A sample pairs a 2xSxS input (channel 0 = enface OCT, channel 1 = OCTA, both
in [0, 1]) with a 3xSxS one-hot label over (artery, background, vein). On
disk a dataset is a flat directory of 8-bit PNGs named ``<id>_oct.png``,
``<id>_octa.png``, ``<id>_av.png``; ids are discovered by globbing the
``*_oct.png`` files.

The synthetic generator exists because arteries and veins are separable by
their reflectance in the OCT channel: each image gets a few smooth vessels,
alternating artery/vein, with disjoint OCT intensity bands per class, so a
2-channel network can learn the classification end to end at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor import ShapeError

# class channel order mirrors the R, G, B encoding
ARTERY, BACKGROUND, VEIN = 0, 1, 2
CLASS_COLORS = np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255]], dtype=np.uint8)


@dataclass
class Sample:
    input: np.ndarray  # 2xSxS float32 in [0, 1]
    label: np.ndarray  # 3xSxS float32 one-hot
    id: str


@dataclass
class AugmentSpec:
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    rotation_max_deg: float = 15.0
    zoom_range: tuple[float, float] = (0.9, 1.1)
    shift_max_frac: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.flip_h_prob <= 1.0 and 0.0 <= self.flip_v_prob <= 1.0):
            raise ValueError("flip probabilities must be in [0, 1]")
        lo, hi = self.zoom_range
        if not lo <= 1.0 <= hi:
            raise ValueError(f"zoom_range must bracket 1, got {self.zoom_range}")


def identity_augment() -> AugmentSpec:
    """Spec under which augment() is the identity (augmentation disabled)."""
    return AugmentSpec(flip_h_prob=0.0, flip_v_prob=0.0, rotation_max_deg=0.0,
                       zoom_range=(1.0, 1.0), shift_max_frac=0.0)


@dataclass
class FoldPlan:
    k: int
    assignments: np.ndarray  # per-sample fold index in [0, k)

    def test_indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignments) if f == fold]

    def train_indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignments) if f != fold]


@dataclass
class SynthSpec:
    count: int = 40
    size: int = 256
    vessels_per_image: tuple[int, int] = (3, 6)
    vessel_width_px: tuple[float, float] = (2.0, 5.0)
    artery_oct_intensity: tuple[float, float] = (0.65, 0.85)
    vein_oct_intensity: tuple[float, float] = (0.30, 0.50)
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.size % 32 != 0 or self.size <= 0:
            raise ValueError(f"size must be a positive multiple of 32, got {self.size}")
        a_lo, a_hi = self.artery_oct_intensity
        v_lo, v_hi = self.vein_oct_intensity
        if max(a_lo, v_lo) <= min(a_hi, v_hi):
            raise ValueError("artery and vein OCT intensity bands must be disjoint")


# ---------------------------------------------------------------------------
# label codec and input assembly


def decode_label_rgb(image: np.ndarray) -> np.ndarray:
    """Map an SxSx3 8-bit RGB image to a 3xSxS one-hot label.

    Per pixel the class is the argmax over (R, G, B) -> (artery, background,
    vein); ties resolve to the lowest class index.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected SxSx3 RGB array, got shape {list(img.shape)}")
    idx = img.argmax(axis=2)
    onehot = np.zeros((3, img.shape[0], img.shape[1]), dtype=np.float32)
    for c in range(3):
        onehot[c][idx == c] = 1.0
    return onehot


def encode_label_rgb(label: np.ndarray) -> np.ndarray:
    """Map 3xSxS class probabilities to a pure-color SxSx3 8-bit RGB image."""
    lab = np.asarray(label)
    if lab.ndim != 3 or lab.shape[0] != 3:
        raise ShapeError(f"expected 3xSxS array, got shape {list(lab.shape)}")
    idx = lab.argmax(axis=0)
    return CLASS_COLORS[idx]


def assemble_input(oct_img: np.ndarray, octa_img: np.ndarray) -> np.ndarray:
    """Stack 8-bit grayscale OCT and OCTA images as a 2xSxS [0,1] input."""
    oct_arr = np.asarray(oct_img)
    octa_arr = np.asarray(octa_img)
    if oct_arr.shape != octa_arr.shape or oct_arr.ndim != 2:
        raise ShapeError(
            f"OCT and OCTA must be equal-size 2-D images, got {list(oct_arr.shape)} "
            f"and {list(octa_arr.shape)}"
        )
    stacked = np.stack([oct_arr, octa_arr]).astype(np.float32)
    return stacked / 255.0


# ---------------------------------------------------------------------------
# augmentation


def augment(sample: Sample, spec: AugmentSpec, rng: np.random.Generator) -> Sample:
    """One random flip/rotate/zoom/shift chain applied to input and label.

    The input channels are resampled bilinearly; the label is warped as a
    class-index map with nearest-neighbor sampling and re-one-hotted, so it
    stays a valid one-hot map. Regions pulled in from outside the frame
    become background class and zero intensity. Draw order is fixed, so a
    given (sample, spec, rng state) always produces the same output.
    """
    flip_h = rng.random() < spec.flip_h_prob
    flip_v = rng.random() < spec.flip_v_prob
    theta = math.radians(rng.uniform(-spec.rotation_max_deg, spec.rotation_max_deg))
    zoom = rng.uniform(spec.zoom_range[0], spec.zoom_range[1])
    size = sample.input.shape[1]
    max_shift = spec.shift_max_frac * size
    shift = rng.uniform(-max_shift, max_shift, size=2)  # (rows, cols)

    image = sample.input
    classes = sample.label.argmax(axis=0)
    if flip_h:
        image = image[:, :, ::-1]
        classes = classes[:, ::-1]
    if flip_v:
        image = image[:, ::-1, :]
        classes = classes[::-1, :]

    if theta != 0.0 or zoom != 1.0 or np.any(shift != 0.0):
        # inverse map: out(p) = in(M @ (p - center - shift) + center)
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        matrix = np.array([[cos_t, -sin_t], [sin_t, cos_t]]) / zoom
        center = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
        offset = center - matrix @ (center + shift)
        image = np.stack([
            ndimage.affine_transform(ch, matrix, offset=offset, order=1, cval=0.0,
                                     mode="constant")
            for ch in image.astype(np.float64)
        ])
        classes = ndimage.affine_transform(classes, matrix, offset=offset, order=0,
                                           cval=BACKGROUND, mode="constant")

    onehot = np.zeros_like(sample.label)
    for c in range(3):
        onehot[c][classes == c] = 1.0
    return Sample(
        input=np.clip(image, 0.0, 1.0).astype(np.float32),
        label=onehot,
        id=sample.id,
    )


# ---------------------------------------------------------------------------
# fold splitting


def kfold_split(n: int, k: int, seed: int) -> FoldPlan:
    """Shuffle by seed, deal samples round-robin into k folds."""
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    for position, sample_idx in enumerate(order):
        assignments[sample_idx] = position % k
    return FoldPlan(k=k, assignments=assignments)


# ---------------------------------------------------------------------------
# synthetic data


def _stamp_disc(grid: np.ndarray, row: float, col: float, radius: float, value) -> None:
    size = grid.shape[0]
    r0 = max(int(math.floor(row - radius)), 0)
    r1 = min(int(math.ceil(row + radius)) + 1, size)
    c0 = max(int(math.floor(col - radius)), 0)
    c1 = min(int(math.ceil(col + radius)) + 1, size)
    if r0 >= r1 or c0 >= c1:
        return
    rr, cc = np.mgrid[r0:r1, c0:c1]
    inside = (rr - row) ** 2 + (cc - col) ** 2 <= radius ** 2
    grid[r0:r1, c0:c1][inside] = value


def _draw_vessel(class_map, oct_base, rng, size, cls, width, intensity) -> None:
    """Rasterize one quadratic vessel centerline crossing the whole frame."""
    if rng.random() < 0.5:  # left-right
        p0 = np.array([rng.uniform(0, size - 1), 0.0])
        p2 = np.array([rng.uniform(0, size - 1), size - 1.0])
    else:  # top-bottom
        p0 = np.array([0.0, rng.uniform(0, size - 1)])
        p2 = np.array([size - 1.0, rng.uniform(0, size - 1)])
    p1 = np.array([rng.uniform(0, size - 1), rng.uniform(0, size - 1)])
    radius = width / 2.0
    for t in np.linspace(0.0, 1.0, 3 * size):
        point = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
        _stamp_disc(class_map, point[0], point[1], radius, cls)
        _stamp_disc(oct_base, point[0], point[1], radius, intensity)


def synth_generate(spec: SynthSpec, seed: int) -> list[Sample]:
    """Procedurally generate a labeled OCT/OCTA dataset.

    Each image contains a handful of smooth vessels with alternating
    artery/vein classes (so both are always present); pixels where vessels
    cross take the later-drawn vessel's class. The OCTA channel is a bright
    vessel mask, the OCT channel carries the class-dependent reflectance
    band over a dim smooth background, and both get Gaussian noise.

    Per-sample generators are derived as ``seed XOR index``, so samples are
    reproducible independently of each other.
    """
    samples = []
    for index in range(spec.count):
        rng = np.random.default_rng(seed ^ index)
        size = spec.size
        class_map = np.full((size, size), -1, dtype=np.int64)
        oct_base = np.zeros((size, size))

        n_vessels = max(int(rng.integers(spec.vessels_per_image[0],
                                         spec.vessels_per_image[1] + 1)), 2)
        first_cls = int(rng.integers(0, 2))
        for j in range(n_vessels):
            is_artery = (first_cls + j) % 2 == 0
            band = spec.artery_oct_intensity if is_artery else spec.vein_oct_intensity
            width = rng.uniform(spec.vessel_width_px[0], spec.vessel_width_px[1])
            intensity = rng.uniform(band[0], band[1])
            _draw_vessel(class_map, oct_base, rng, size,
                         ARTERY if is_artery else VEIN, width, intensity)

        vessel_mask = class_map >= 0
        octa = np.where(vessel_mask, rng.uniform(0.85, 1.0), 0.0)
        octa = octa + rng.normal(0.0, spec.noise_sigma, size=(size, size))

        background = 0.08 + 0.06 * ndimage.gaussian_filter(
            rng.uniform(0.0, 1.0, size=(size, size)), sigma=size / 16.0
        )
        oct_ch = np.where(vessel_mask, oct_base, background)
        oct_ch = oct_ch + rng.normal(0.0, spec.noise_sigma, size=(size, size))

        label = np.zeros((3, size, size), dtype=np.float32)
        label[ARTERY][class_map == ARTERY] = 1.0
        label[VEIN][class_map == VEIN] = 1.0
        label[BACKGROUND][~vessel_mask] = 1.0

        samples.append(Sample(
            input=np.clip(np.stack([oct_ch, octa]), 0.0, 1.0).astype(np.float32),
            label=label,
            id=f"synth{index:04d}",
        ))
    return samples


# ---------------------------------------------------------------------------
# dataset files


def _to_u8(plane: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(plane * 255.0), 0, 255).astype(np.uint8)


def save_sample(sample: Sample, root: Path) -> list[Path]:
    root = Path(root)
    paths = []
    for suffix, img in (
        ("oct", Image.fromarray(_to_u8(sample.input[0]), mode="L")),
        ("octa", Image.fromarray(_to_u8(sample.input[1]), mode="L")),
        ("av", Image.fromarray(encode_label_rgb(sample.label), mode="RGB")),
    ):
        path = root / f"{sample.id}_{suffix}.png"
        img.save(path)
        paths.append(path)
    return paths


def save_dataset(samples: list[Sample], root: Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        save_sample(sample, root)


def load_sample(root: Path, sample_id: str) -> Sample:
    root = Path(root)
    oct_img = np.asarray(Image.open(root / f"{sample_id}_oct.png").convert("L"))
    octa_img = np.asarray(Image.open(root / f"{sample_id}_octa.png").convert("L"))
    av_img = np.asarray(Image.open(root / f"{sample_id}_av.png").convert("RGB"))
    return Sample(
        input=assemble_input(oct_img, octa_img),
        label=decode_label_rgb(av_img),
        id=sample_id,
    )


def load_dataset(root: Path) -> list[Sample]:
    """Load every sample under root; ids come from the *_oct.png files."""
    root = Path(root)
    ids = sorted(p.name[: -len("_oct.png")] for p in root.glob("*_oct.png"))
    if not ids:
        raise FileNotFoundError(f"no *_oct.png files under {root}")
    return [load_sample(root, sample_id) for sample_id in ids]
