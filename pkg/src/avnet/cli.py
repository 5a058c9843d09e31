"""Command line: synth | train | predict | eval | gradcheck.

Exit codes are a stable contract: 0 success, 2 config error, 3 I/O or shape
error, 4 training divergence, 5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .blocks import InvalidConfigError, build_avnet, load_pretrained
from .config import ConfigError, parse_config_file, synth_spec_from, train_config_from
from .data import (
    assemble_input,
    encode_label_rgb,
    load_dataset,
    save_dataset,
    synth_generate,
)
from .gradcheck import run_suite
from .metrics import METRIC_NAMES, confusion, format_table, per_class_metrics
from .tensor import ShapeError, Tensor
from .trainer import (
    ArchiveError,
    TrainingDivergedError,
    load_archive,
    model_from_archive,
    run_cv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5

DEFAULT_SEED = 42


def _load_values(config_path: str | None) -> dict:
    return parse_config_file(config_path) if config_path else {}


def cmd_synth(args) -> int:
    values = _load_values(args.config)
    spec = synth_spec_from(values)
    seed = args.seed if args.seed is not None else values.get("seed", DEFAULT_SEED)
    samples = synth_generate(spec, seed)
    save_dataset(samples, Path(args.out))
    print(f"wrote {3 * len(samples)} files for {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    values = _load_values(args.config)
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = train_config_from(values)
    cfg.checkpoint_dir = args.out
    dataset = load_dataset(Path(args.data))
    report = run_cv(cfg, dataset)
    print(format_table(report))
    print(f"report and {cfg.k_folds} fold archives written to {args.out}")
    return EXIT_OK


def _load_model(weights_path: str):
    archive = load_archive(weights_path)
    return model_from_archive(archive)


def cmd_predict(args) -> int:
    model, cfg = _load_model(args.weights)
    size = cfg.model.input_size
    oct_img = np.asarray(Image.open(args.oct).convert("L"))
    octa_img = np.asarray(Image.open(args.octa).convert("L"))
    for name, img in (("OCT", oct_img), ("OCTA", octa_img)):
        if img.shape != (size, size):
            raise ShapeError(
                f"{name} image is {img.shape[0]}x{img.shape[1]}, model expects {size}x{size}"
            )
    x = Tensor(assemble_input(oct_img, octa_img)[None])
    pred = model.forward(x, "eval")
    Image.fromarray(encode_label_rgb(pred.data[0]), mode="RGB").save(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_dataset(Path(args.data))
    if args.pass_through:
        model, size = None, dataset[0].input.shape[1]
    else:
        if not args.weights:
            raise ConfigError("--weights is required unless --pass-through is given")
        model, cfg = _load_model(args.weights)
        size = cfg.model.input_size

    total = None
    for sample in dataset:
        if sample.input.shape[1] != size:
            raise ShapeError(
                f"sample {sample.id!r} is {sample.input.shape[1]}x{sample.input.shape[2]}, "
                f"expected {size}x{size}"
            )
        if args.pass_through:
            pred = sample.label
        else:
            pred = model.forward(Tensor(sample.input[None]), "eval").data[0]
        counts = confusion(pred, sample.label)
        total = counts if total is None else total.merge(counts)

    metrics = per_class_metrics(total)
    rows = [("artery", metrics[0]), ("vein", metrics[2])]
    rows.append(("average", {m: (metrics[0][m] + metrics[2][m]) / 2 for m in METRIC_NAMES}))
    print("".join(["row".ljust(10)] + [m.ljust(12) for m in METRIC_NAMES]))
    for name, values in rows:
        cells = [name.ljust(10)] + [f"{100 * values[m]:.3f}".ljust(12) for m in METRIC_NAMES]
        print("".join(cells))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed if args.seed is not None else DEFAULT_SEED,
                        corrupt=args.corrupt)
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{r.name:<22} max_rel_error={r.max_rel_error:.3e} tol={r.tolerance:.0e} {status}")
    failing = [r.name for r in results if not r.ok]
    if failing:
        print(f"FAILED: {', '.join(failing)}")
        return EXIT_GRADCHECK
    print("all gradient checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avnet",
        description="Artery-vein classification on OCT/OCTA image pairs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--config", help="key=value config file (synth.* keys)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help=f"RNG seed (default {DEFAULT_SEED})")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="k-fold cross-validation training")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for archives and report")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict an AV map for one OCT/OCTA pair")
    p.add_argument("--weights", required=True, help=".avnw weight archive")
    p.add_argument("--oct", required=True, help="grayscale enface OCT PNG")
    p.add_argument("--octa", required=True, help="grayscale OCTA PNG")
    p.add_argument("--out", required=True, help="output AV-map PNG")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate weights on a labeled dataset")
    p.add_argument("--weights", help=".avnw weight archive")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--pass-through", action="store_true",
                   help="score the ground-truth labels against themselves (codec check)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all backward rules")
    p.add_argument("--seed", type=int, help=f"RNG seed (default {DEFAULT_SEED})")
    p.add_argument("--corrupt", help="negative control: corrupt the named check")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ArchiveError, ShapeError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
