"""Finite-difference verification of every backward rule.

Each check builds a scalar loss from one operation — the op output is
projected onto a fixed random array so that no gradient component can hide —
then compares the tape's analytic gradients against central differences
computed in float64. The suite ends with a tiny end-to-end network whose
compound-loss parameter gradients are probed the same way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .blocks import AvNetConfig, build_avnet
from .losses import LossConfig, compound_loss, dice_loss, focal_loss
from .tensor import (
    Tape,
    Tensor,
    add,
    avg_pool2d,
    backward,
    batch_norm2d,
    clamp,
    concat_channels,
    conv2d,
    log,
    mul,
    pow_scalar,
    relu,
    slice_channels,
    softmax_channels,
    sub,
    sum_all,
    upsample_nearest2x,
)

DEFAULT_TOL = 1e-4
BATCH_NORM_TOL = 1e-3
END_TO_END_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def analytic_grads(f: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar f() w.r.t. each tensor, via the tape."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape():
        out = f()
    backward(out)
    return [t.grad.data.copy() if t.grad is not None else np.zeros_like(t.data)
            for t in tensors]


def numeric_grad(f: Callable[[], Tensor], tensor: Tensor, h: float) -> np.ndarray:
    """Central finite differences of the scalar f() w.r.t. every element."""
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f().item()
        flat[i] = orig - h
        f_minus = f().item()
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(tensor.shape)


def check_op(f: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-4) -> float:
    """Worst relative error between analytic and numeric gradients."""
    analytic = analytic_grads(f, tensors)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        n = numeric_grad(f, t, h)
        worst = max(worst, max_rel_error(a, n))
    return worst


def _rand(rng, shape, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), dtype=np.float64)


def _rand_away_from(rng, shape, points, margin, lo=-2.0, hi=2.0) -> Tensor:
    """Uniform draw nudged so finite differences never straddle a kink."""
    x = rng.uniform(lo, hi, size=shape)
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + margin * np.where(x[near] >= p, 1.0, -1.0) * 2.0
    return Tensor(x, dtype=np.float64)


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(proj, dtype=np.float64)))


def _one_hot_target(rng, shape) -> Tensor:
    n, l, h, w = shape
    idx = rng.integers(0, l, size=(n, h, w))
    onehot = np.zeros(shape)
    for c in range(l):
        onehot[:, c][idx == c] = 1.0
    return Tensor(onehot, dtype=np.float64)


def _op_checks(rng) -> list[tuple[str, float, Callable[[], float]]]:
    """(name, tolerance, runner) triples for every differentiable operation."""
    checks = []

    def conv_case(name, x_shape, w_shape, stride, padding, with_bias):
        x = _rand(rng, x_shape)
        w = _rand(rng, w_shape, -1.0, 1.0)
        b = _rand(rng, (w_shape[0],)) if with_bias else None
        n, o = x_shape[0], w_shape[0]
        h_out = (x_shape[2] + 2 * padding - w_shape[2]) // stride + 1
        w_out = (x_shape[3] + 2 * padding - w_shape[3]) // stride + 1
        proj = rng.normal(size=(n, o, h_out, w_out))
        tensors = [x, w] + ([b] if with_bias else [])

        def run():
            return check_op(lambda: _projected(conv2d(x, w, b, stride, padding), proj), tensors)

        checks.append((name, DEFAULT_TOL, run))

    conv_case("conv2d", (2, 3, 6, 6), (4, 3, 3, 3), 1, 1, True)
    conv_case("conv2d_stride2", (1, 2, 8, 8), (3, 2, 7, 7), 2, 3, False)

    def bn_case(name, mode):
        x = _rand(rng, (2, 3, 4, 4))
        gamma = _rand(rng, (3,), 0.5, 1.5)
        beta = _rand(rng, (3,), -0.5, 0.5)
        rm = Tensor(rng.uniform(-0.2, 0.2, size=3), dtype=np.float64)
        rv = Tensor(rng.uniform(0.8, 1.2, size=3), dtype=np.float64)
        proj = rng.normal(size=(2, 3, 4, 4))

        def run():
            return check_op(
                lambda: _projected(batch_norm2d(x, gamma, beta, rm, rv, mode), proj),
                [x, gamma, beta],
                h=1e-3,
            )

        checks.append((name, BATCH_NORM_TOL, run))

    bn_case("batch_norm2d_train", "train")
    bn_case("batch_norm2d_eval", "eval")

    def unary_case(name, tensor, op, h=1e-4, tol=DEFAULT_TOL):
        proj = rng.normal(size=op(tensor).shape)
        checks.append((name, tol, lambda: check_op(lambda: _projected(op(tensor), proj),
                                                   [tensor], h=h)))

    unary_case("relu", _rand_away_from(rng, (2, 3, 4, 4), [0.0], 1e-3), relu)
    unary_case("softmax_channels", _rand(rng, (2, 4, 3, 3)), softmax_channels)
    unary_case("avg_pool2d", _rand(rng, (2, 3, 4, 4)), avg_pool2d)
    unary_case("upsample_nearest2x", _rand(rng, (2, 3, 3, 3)), upsample_nearest2x)
    unary_case("log", _rand(rng, (5, 7), 0.1, 3.0), log)
    unary_case("pow_scalar", _rand(rng, (5, 7)), lambda t: pow_scalar(t, 2.0))
    unary_case("pow_scalar_frac", _rand(rng, (5, 7), 0.2, 2.0), lambda t: pow_scalar(t, 1.7))
    unary_case("clamp", _rand_away_from(rng, (5, 7), [-1.0, 1.0], 1e-3),
               lambda t: clamp(t, -1.0, 1.0))
    unary_case("sum_all", _rand(rng, (5, 7)), lambda t: add(sum_all(t), 0.0))
    unary_case("slice_channels", _rand(rng, (2, 5, 3, 3)), lambda t: slice_channels(t, 1, 4))

    def binary_case(name, op):
        a = _rand(rng, (3, 4, 2, 2))
        b = _rand(rng, (3, 4, 2, 2))
        proj = rng.normal(size=op(a, b).shape)
        checks.append((name, DEFAULT_TOL,
                       lambda: check_op(lambda: _projected(op(a, b), proj), [a, b])))

    binary_case("add", add)
    binary_case("sub", sub)
    binary_case("mul", mul)
    binary_case("concat_channels", concat_channels)

    def loss_case(name, loss_fn):
        pred = _rand(rng, (2, 3, 5, 5), 0.1, 0.9)
        target = _one_hot_target(rng, (2, 3, 5, 5))
        cfg = LossConfig()
        checks.append((name, DEFAULT_TOL,
                       lambda: check_op(lambda: loss_fn(pred, target, cfg), [pred])))

    loss_case("dice_loss", dice_loss)
    loss_case("focal_loss", focal_loss)
    loss_case("compound_loss", compound_loss)

    return checks


def tiny_config() -> AvNetConfig:
    """Smallest buildable network, used for end-to-end gradient probes."""
    return AvNetConfig(
        dense_block_layers=[1, 1, 1, 1],
        growth_rate=2,
        stem_channels=4,
        decoder_channels=[8, 8, 4, 4],
        input_size=32,
    )


def check_end_to_end(seed: int, num_params: int = 120, h: float = 1e-5) -> float:
    """Probe sampled parameter gradients of the compound loss on a tiny model.

    Returns the worst relative error over ``num_params`` randomly chosen
    parameter elements (at least one per parameter tensor while the budget
    lasts). The step is small because a perturbation must not push any of the
    thousands of downstream ReLU pre-activations across zero, where central
    differences stop approximating the one-sided derivative.
    """
    rng = np.random.default_rng(seed)
    model = build_avnet(tiny_config(), seed=seed, dtype=np.float64)
    batch = Tensor(rng.uniform(0.0, 1.0, size=(1, 2, 32, 32)), dtype=np.float64)
    target = _one_hot_target(rng, (1, 3, 32, 32))
    cfg = LossConfig()

    def loss_fn() -> Tensor:
        return compound_loss(model.forward(batch, "train"), target, cfg)

    model.store.zero_grads()
    with Tape():
        loss = loss_fn()
    backward(loss)

    params = [t for _, t in model.store.parameters()]
    probes: list[tuple[Tensor, int]] = []
    for p in params:
        probes.append((p, int(rng.integers(0, p.size))))
    while len(probes) < num_params:
        p = params[int(rng.integers(0, len(params)))]
        probes.append((p, int(rng.integers(0, p.size))))
    probes = probes[:max(num_params, len(params))]

    def probe_error(p: Tensor, flat_idx: int, step: float) -> float:
        flat = p.data.reshape(-1)
        orig = flat[flat_idx]
        flat[flat_idx] = orig + step
        f_plus = loss_fn().item()
        flat[flat_idx] = orig - step
        f_minus = loss_fn().item()
        flat[flat_idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        analytic = float(p.grad.data.reshape(-1)[flat_idx])
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)

    worst = 0.0
    for p, flat_idx in probes:
        err = probe_error(p, flat_idx, h)
        if err > 1e-4:
            # a kink inside [theta-h, theta+h] pollutes the difference but
            # vanishes as h shrinks; a wrong backward rule does not
            err = min(err, probe_error(p, flat_idx, h / 8.0))
        worst = max(worst, err)
    return worst


def run_suite(seed: int = 0, corrupt: str | None = None) -> list[CheckResult]:
    """Run every gradient check; ``corrupt`` inflates one check's reported
    error as a negative control for the harness itself.
    """
    rng = np.random.default_rng(seed)
    results = []
    for name, tol, runner in _op_checks(rng):
        err = runner()
        if corrupt == name:
            err = max(err, 0.01)
        results.append(CheckResult(name, err, tol))
    err = check_end_to_end(seed)
    if corrupt == "end_to_end":
        err = max(err, 0.01)
    results.append(CheckResult("end_to_end", err, END_TO_END_TOL))
    return results
