"""Finite-difference gradient suite over every differentiable op.

Used by the test suite and by the command-line ``self-test``.  Each case
builds a random scalar objective around one op; the suite reports the worst
relative error per op across independent draws, always in float64.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check

FD_EPS = 1e-5
FD_TOL = 1e-4


def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    # random weights keep every gradient entry O(1), away from the 1e-8 floor
    return ad.sum(ad.mul(t, Tensor(w)))


def _op_cases():
    """(name, builder) pairs; builder(rng) -> (f, x)."""

    def conv_input(rng):
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        stride = int(rng.integers(1, 3))
        R = rng.normal(size=(2, 3, (6 + 2 - 3) // stride + 1, (5 + 2 - 3) // stride + 1))
        f = lambda t: _weighted_sum(ad.conv2d(t, Tensor(w), Tensor(b), stride=stride, padding=1), R)
        return f, Tensor(rng.normal(size=(2, 2, 6, 5)))

    def conv_weight(rng):
        x = rng.normal(size=(1, 2, 5, 5))
        R = rng.normal(size=(1, 3, 3, 3))
        f = lambda t: _weighted_sum(ad.conv2d(Tensor(x), t, Tensor(np.zeros(3)), stride=2, padding=1), R)
        return f, Tensor(rng.normal(size=(3, 2, 3, 3)))

    def conv_bias(rng):
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(3, 2, 1, 1))
        R = rng.normal(size=(1, 3, 4, 4))
        f = lambda t: _weighted_sum(ad.conv2d(Tensor(x), Tensor(w), t), R)
        return f, Tensor(rng.normal(size=3))

    def upsample(rng):
        R = rng.normal(size=(1, 2, 6, 4))
        return (lambda t: _weighted_sum(ad.upsample2x(t), R)), Tensor(rng.normal(size=(1, 2, 3, 2)))

    def elementwise(name):
        def build(rng):
            other = Tensor(rng.normal(size=(3, 4)))
            R = rng.normal(size=(3, 4))
            op = {"add": lambda t: ad.add(t, other), "sub": lambda t: ad.sub(other, t),
                  "mul": lambda t: ad.mul(t, other), "neg": ad.neg,
                  "square": ad.square}[name]
            return (lambda t: _weighted_sum(op(t), R)), Tensor(rng.normal(size=(3, 4)))
        return build

    def sigmoid(rng):
        R = rng.normal(size=(10,))
        return (lambda t: _weighted_sum(ad.sigmoid(t), R)), Tensor(rng.normal(size=(10,)) * 3)

    def relu(rng):
        x = rng.normal(size=(10,))
        x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep off the kink
        R = rng.normal(size=(10,))
        return (lambda t: _weighted_sum(ad.relu(t), R)), Tensor(x)

    def clip(rng):
        x = rng.normal(size=(10,)) * 2
        x = np.where(np.abs(np.abs(x) - 1.5) < 0.05, 0.0, x)  # stay off the corners
        R = rng.normal(size=(10,))
        return (lambda t: _weighted_sum(ad.clip(t, -1.5, 1.5), R)), Tensor(x)

    def sqrt(rng):
        R = rng.normal(size=(6,))
        return (lambda t: _weighted_sum(ad.sqrt(t), R)), Tensor(rng.uniform(0.5, 2.0, size=6))

    def mean(rng):
        return (lambda t: ad.mean(ad.square(t))), Tensor(rng.normal(size=(4, 3)))

    def attention(which):
        def build(rng):
            q, k = rng.normal(size=(2, 2, 5, 3))
            v = rng.normal(size=(2, 5, 4))
            R = rng.normal(size=(2, 5, 4))

            def f(t):
                args = [Tensor(q), Tensor(k), Tensor(v)]
                args[which] = t
                return _weighted_sum(ad.scaled_dot_attention(*args), R)

            return f, Tensor([q, k, v][which])
        return build

    def group_norm_input(rng):
        gamma, beta = rng.normal(size=(2, 4))
        R = rng.normal(size=(2, 4, 3, 3))
        f = lambda t: _weighted_sum(ad.group_norm(t, 2, Tensor(gamma), Tensor(beta)), R)
        return f, Tensor(rng.normal(size=(2, 4, 3, 3)))

    def group_norm_affine(rng):
        x = rng.normal(size=(2, 4, 3, 3))
        beta = rng.normal(size=4)
        R = rng.normal(size=(2, 4, 3, 3))
        f = lambda t: _weighted_sum(ad.group_norm(Tensor(x), 2, t, Tensor(beta)), R)
        return f, Tensor(rng.normal(size=4))

    def reshape_transpose(rng):
        R = rng.normal(size=(3, 2, 4))
        f = lambda t: _weighted_sum(ad.transpose(ad.reshape(t, (2, 3, 4)), (1, 0, 2)), R)
        return f, Tensor(rng.normal(size=(6, 4)))

    def crop(rng):
        R = rng.normal(size=(1, 2, 3, 2))
        return (lambda t: _weighted_sum(ad.crop(t, 3, 2), R)), Tensor(rng.normal(size=(1, 2, 4, 4)))

    def expand(rng):
        R = rng.normal(size=(1, 3, 2, 2))
        return (lambda t: _weighted_sum(ad.expand_channels(t, 3), R)), Tensor(rng.normal(size=(1, 1, 2, 2)))

    def composed(rng):
        w = rng.normal(size=(2, 2, 3, 3))
        R = rng.normal(size=(1, 2, 8, 8))

        def f(t):
            h = ad.conv2d(t, Tensor(w), None, padding=1)
            gate = ad.sigmoid(ad.conv2d(h, Tensor(w), None, stride=2, padding=1))
            up = ad.upsample2x(gate)
            return _weighted_sum(ad.add(ad.mul(up, t), h), R)

        return f, Tensor(rng.normal(size=(1, 2, 8, 8)))

    cases = [
        ("conv2d/input", conv_input), ("conv2d/weight", conv_weight), ("conv2d/bias", conv_bias),
        ("upsample2x", upsample), ("sigmoid", sigmoid), ("relu", relu), ("clip", clip), ("sqrt", sqrt), ("mean", mean),
        ("attention/q", attention(0)), ("attention/k", attention(1)), ("attention/v", attention(2)),
        ("group_norm/input", group_norm_input), ("group_norm/weight", group_norm_affine),
        ("reshape+transpose", reshape_transpose), ("crop", crop), ("expand_channels", expand),
        ("composed", composed),
    ]
    def training_loss(rng):
        from .trainer import loss

        target = rng.normal(size=(1, 2, 3, 4))
        return (lambda t: loss(t, target, "ri_mse_plus_mag")), Tensor(rng.normal(size=(1, 2, 3, 4)))

    cases += [(name, elementwise(name)) for name in ("add", "sub", "mul", "neg", "square")]
    cases.append(("loss/ri_mse_plus_mag", training_loss))
    return cases


OP_CASES = _op_cases()


def run_gradient_suite(instances: int = 10) -> dict[str, float]:
    """Worst finite-difference error per op over ``instances`` random draws."""
    worst = {}
    for idx, (name, build) in enumerate(OP_CASES):
        errs = []
        for i in range(instances):
            f, x = build(np.random.default_rng(1000 * idx + i))
            errs.append(finite_diff_check(f, x, eps=FD_EPS))
        worst[name] = max(errs)
    return worst


def self_test(instances: int = 10) -> tuple[bool, dict[str, float], float]:
    """Run the suite; returns (all within FD_TOL, worst error per op, seconds)."""
    t0 = time.perf_counter()
    worst = run_gradient_suite(instances)
    return all(v <= FD_TOL for v in worst.values()), worst, time.perf_counter() - t0
