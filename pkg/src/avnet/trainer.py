"""Single-fold training, k-fold cross-validation, and weight archives.

Training follows a fixed recipe: build the model from (config, seed), draw
``train_samples_per_fold`` augmented samples by cycling the fold's training
set (each draw seeded independently, so the whole run is reproducible
bit-for-bit), consume them in minibatches, and for every batch run forward ->
loss -> backward -> Adam. The held-out samples are evaluated un-augmented in
eval mode, which never touches parameters or batch-norm buffers.

Weight archive file layout (little-endian), extension ``.avnw``::

    magic "AVNW" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name UTF-8 | u8 trainable | u8 rank
                | rank x u64 dims | float32 payload, row-major
    u32 config_len | config UTF-8 (key=value dialect)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .blocks import AvNetModel, ShapeError, build_avnet, load_pretrained
from .config import TrainConfig, parse_config_text, serialize_train_config, train_config_from
from .data import Sample, augment, kfold_split
from .losses import compound_loss, dice_loss
from .metrics import FoldReport, aggregate_report, confusion, per_class_metrics, report_to_csv, report_to_text
from .optim import adam_step, init_adam
from .tensor import Tape, Tensor, backward

ARCHIVE_MAGIC = b"AVNW"
ARCHIVE_VERSION = 1

# spawn-key namespaces keeping seed derivations for different purposes apart
_NS_AUGMENT = 1
_NS_FOLD = 2


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


class ArchiveError(ValueError):
    """Weight archive file is malformed, truncated, or version-incompatible."""


def derive_seed(base: int, *path: int) -> int:
    """Stable 64-bit child seed for (base, path); independent per path."""
    ss = np.random.SeedSequence(entropy=base, spawn_key=tuple(path))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class TrainHistory:
    steps_planned: int
    draw_ids: list[str]
    losses: list[tuple[int, float]] = field(default_factory=list)
    evals: list[tuple[int, dict[int, dict[str, float]]]] = field(default_factory=list)


@dataclass
class WeightArchive:
    """In-memory form of an .avnw file: float32 tensors plus the config text."""

    tensors: dict[str, np.ndarray]
    trainable: dict[str, bool]
    config_text: str

    def train_config(self) -> TrainConfig:
        return train_config_from(parse_config_text(self.config_text))


def archive_from_model(model: AvNetModel, cfg: TrainConfig) -> WeightArchive:
    tensors = {}
    trainable = {}
    for name, tensor, is_param in model.store.items():
        tensors[name] = np.asarray(tensor.data, dtype=np.float32).copy()
        trainable[name] = is_param
    return WeightArchive(tensors=tensors, trainable=trainable,
                         config_text=serialize_train_config(cfg))


def write_archive(archive: WeightArchive, path: str | Path) -> None:
    buf = bytearray()
    buf += ARCHIVE_MAGIC
    buf += struct.pack("<II", ARCHIVE_VERSION, len(archive.tensors))
    for name, arr in archive.tensors.items():
        name_bytes = name.encode("utf-8")
        buf += struct.pack("<H", len(name_bytes))
        buf += name_bytes
        buf += struct.pack("<BB", 1 if archive.trainable[name] else 0, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    config_bytes = archive.config_text.encode("utf-8")
    buf += struct.pack("<I", len(config_bytes))
    buf += config_bytes
    Path(path).write_bytes(bytes(buf))


def save_archive(store, cfg: TrainConfig, path: str | Path) -> None:
    """Write a model's ParameterStore (parameters and buffers) to disk."""
    tensors = {}
    trainable = {}
    for name, tensor, is_param in store.items():
        tensors[name] = np.asarray(tensor.data, dtype=np.float32)
        trainable[name] = is_param
    write_archive(WeightArchive(tensors, trainable, serialize_train_config(cfg)), path)


def load_archive(path: str | Path) -> WeightArchive:
    data = Path(path).read_bytes()
    offset = 0

    def need(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise ArchiveError(f"{path}: truncated archive "
                               f"(needed {offset + n} bytes, have {len(data)})")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    if need(4) != ARCHIVE_MAGIC:
        raise ArchiveError(f"{path}: bad magic, not a weight archive")
    version, count = struct.unpack("<II", need(8))
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    tensors: dict[str, np.ndarray] = {}
    trainable: dict[str, bool] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2))
        name = need(name_len).decode("utf-8")
        flag, rank = struct.unpack("<BB", need(2))
        shape = struct.unpack(f"<{rank}Q", need(8 * rank)) if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = need(4 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        trainable[name] = bool(flag)
    (config_len,) = struct.unpack("<I", need(4))
    config_text = need(config_len).decode("utf-8")
    if offset != len(data):
        raise ArchiveError(f"{path}: {len(data) - offset} trailing bytes after config blob")
    return WeightArchive(tensors=tensors, trainable=trainable, config_text=config_text)


def model_from_archive(archive: WeightArchive) -> tuple[AvNetModel, TrainConfig]:
    """Rebuild the archived model: construct from its config, load all weights."""
    cfg = archive.train_config()
    model = build_avnet(cfg.model, cfg.seed)
    load_pretrained(model, archive, strict=True)
    return model, cfg


def evaluate(model: AvNetModel, samples: list[Sample]) -> dict[int, dict[str, float]]:
    """Per-class metrics over the pooled confusion counts of all samples."""
    total = None
    for sample in samples:
        pred = model.forward(Tensor(sample.input[None]), "eval")
        counts = confusion(pred.data[0], sample.label)
        total = counts if total is None else total.merge(counts)
    if total is None:
        raise ValueError("evaluate needs at least one sample")
    return per_class_metrics(total)


def _check_sample_sizes(samples: list[Sample], size: int) -> None:
    for sample in samples:
        if sample.input.shape != (2, size, size):
            raise ShapeError(
                f"sample {sample.id!r} has input shape {list(sample.input.shape)}, "
                f"expected [2, {size}, {size}]"
            )


def train_fold(
    cfg: TrainConfig,
    train: list[Sample],
    test: list[Sample],
    dry_run: bool = False,
) -> tuple[WeightArchive | None, TrainHistory]:
    """Train one fold; returns the final weights and the step/eval history.

    ``dry_run`` only plans the batch schedule (no model, no optimization) and
    returns (None, history) — useful for asserting step counts cheaply.
    """
    if not train:
        raise ValueError("train set must not be empty")
    size = cfg.model.input_size
    if not dry_run:
        _check_sample_sizes(train, size)
        _check_sample_sizes(test, size)

    n_draws = cfg.train_samples_per_fold
    steps_planned = math.ceil(n_draws / cfg.batch_size)
    draw_ids = [train[i % len(train)].id for i in range(n_draws)]
    history = TrainHistory(steps_planned=steps_planned, draw_ids=draw_ids)
    if dry_run:
        return None, history

    model = build_avnet(cfg.model, cfg.seed)
    state = init_adam(model.store, lr=cfg.lr)
    loss_fn = compound_loss if cfg.loss_mode == "compound" else dice_loss

    step = 0
    for start in range(0, n_draws, cfg.batch_size):
        draws = range(start, min(start + cfg.batch_size, n_draws))
        batch = [
            augment(train[i % len(train)], cfg.augment,
                    np.random.default_rng(derive_seed(cfg.seed, _NS_AUGMENT, i)))
            for i in draws
        ]
        x = Tensor(np.stack([s.input for s in batch]))
        y = Tensor(np.stack([s.label for s in batch]))
        step += 1
        with Tape():
            out = model.forward(x, "train")
            loss = loss_fn(out, y, cfg.loss)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(step, f"non-finite loss at step {step}")
        backward(loss)
        history.losses.append((step, value))
        adam_step(model.store, state)
        if test and step % cfg.eval_every == 0 and step != steps_planned:
            history.evals.append((step, evaluate(model, test)))
    if test:
        history.evals.append((steps_planned, evaluate(model, test)))

    return archive_from_model(model, cfg), history


def run_cv(cfg: TrainConfig, dataset: list[Sample]) -> FoldReport:
    """k-fold cross-validation: train each fold on the other k-1 folds.

    Every fold re-initializes its model from a seed derived from (cfg.seed,
    fold index). Writes ``fold<i>.avnw`` per fold plus ``report.csv``,
    ``report.txt``, and the report figures into ``cfg.checkpoint_dir``, and
    returns the aggregated report.
    """
    plan = kfold_split(len(dataset), cfg.k_folds, cfg.seed)
    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    fold_metrics = []
    histories = []
    test_counts = []
    for fold in range(plan.k):
        test = [dataset[i] for i in plan.test_indices(fold)]
        train = [dataset[i] for i in plan.train_indices(fold)]
        fold_cfg = replace(cfg, seed=derive_seed(cfg.seed, _NS_FOLD, fold))
        print(f"fold {fold}: {len(train)} train / {len(test)} test samples, "
              f"{math.ceil(cfg.train_samples_per_fold / cfg.batch_size)} steps")
        archive, history = train_fold(fold_cfg, train, test)
        write_archive(archive, out_dir / f"fold{fold}.avnw")
        final = history.evals[-1][1]
        print(f"fold {fold}: final loss {history.losses[-1][1]:.4f}, "
              f"artery F1 {100 * final[0]['f1']:.2f}%, vein F1 {100 * final[2]['f1']:.2f}%")
        fold_metrics.append(final)
        histories.append(history)
        test_counts.append(len(test))

    report = aggregate_report(fold_metrics, fold_test_counts=test_counts)
    (out_dir / "report.csv").write_text(report_to_csv(report), encoding="utf-8")
    (out_dir / "report.txt").write_text(report_to_text(report), encoding="utf-8")
    from .report import render_figures  # deferred: pulls in matplotlib

    render_figures(report, histories, out_dir)
    return report
