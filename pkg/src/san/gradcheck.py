"""Finite-difference verification of every loss/network composite.

Each check builds small random networks, evaluates one loss composite and
its analytic parameter gradient, and compares against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .engine import DenseNet, backward, finite_diff_check, forward, init_net, mlp_activations
from .losses import KernelBank, LossWeights, PairLabels

TOLERANCE = 1e-6

# Small widths keep the full suite well under a minute; the kernel bank
# bandwidths are sized for feature norms of order 1.
FEATURE_DIM = 5
NOISE_DIM = 3
HIDDEN = 6
BATCH = 7
TOY_BANK = KernelBank((0.5, 2.0, 8.0), (1.0, 0.5, 2.0))


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def _mlp(dims, seed, last="identity"):
    net = init_net(dims, mlp_activations(len(dims) - 1, last=last), seed)
    # Small positive biases move ReLU pre-activations off the kink.
    rng = np.random.default_rng(seed + 1000)
    for layer in net.layers:
        layer.bias[:] = rng.uniform(0.05, 0.3, layer.bias.shape)
    return net


def _toy_problem(seed):
    rng = np.random.default_rng(seed)
    f, z, h, n = FEATURE_DIM, NOISE_DIM, HIDDEN, BATCH
    nets = {
        "G1": _mlp([f + z, h, h, f], seed + 1),
        "D1": _mlp([f, h, 4, 1], seed + 2, last="sigmoid"),
        "R1": _mlp([f, h, f], seed + 3),
        "G2": _mlp([2 * f, h, h, f], seed + 4),
        "NN": _mlp([f, h, 2], seed + 5),
    }
    data = {
        "c": rng.normal(size=(n, f)),
        "z": rng.normal(size=(n, z)),
        "x": rng.normal(size=(n, f)),
        "x1": rng.normal(size=(n, f)),
        "real": rng.normal(size=(n + 2, f)),
    }
    return nets, data


def _through(net, x, head):
    """Forward ``x`` through ``net``, apply ``head(out) -> (value, dout)``, backprop."""
    out, trace = forward(net, x)
    value, dout = head(out)
    grads, dx = backward(net, trace, dout)
    return value, grads, dx


def build_checks(seed: int = 0) -> dict[str, tuple[Callable, list[DenseNet]]]:
    nets, data = _toy_problem(seed)
    g1, d1, r1, g2, nn = nets["G1"], nets["D1"], nets["R1"], nets["G2"], nets["NN"]
    c, x, real = data["c"], data["x"], data["real"]
    g1_in = np.concatenate([c, data["z"]], axis=1)
    g2_in = np.concatenate([c, data["x1"]], axis=1)
    w = LossWeights(alpha=0.3, beta=0.7, gamma=0.5, margin=5.0)

    def rec():
        v, g, _ = _through(g1, g1_in, lambda out: losses.loss_rec(x, out))
        return v, g

    def disc():
        fake = forward(g1, g1_in)[0]
        d_real, tr_real = forward(d1, real)
        d_fake, tr_fake = forward(d1, fake)
        v, (gr, gf) = losses.loss_adv_discriminator(d_real, d_fake)
        a, _ = backward(d1, tr_real, gr)
        b, _ = backward(d1, tr_fake, gf)
        return v, [p + q for p, q in zip(a, b)]

    def adv_gen():
        fake, tr_g = forward(g1, g1_in)
        v, _, dfake = _through(d1, fake, losses.loss_adv_generator)
        grads, _ = backward(g1, tr_g, dfake)
        return v, grads

    def reg():
        fake, tr_g = forward(g1, g1_in)
        v, grads_r, dfake = _through(r1, fake, lambda out: losses.loss_reg(c, out))
        grads_g, _ = backward(g1, tr_g, dfake)
        return v, grads_g + grads_r

    def gan_composite(gen, gen_in, use_mmd):
        def fn():
            fake, tr_g = forward(gen, gen_in)
            parts = {}
            parts["rec"], dfake = losses.loss_rec(x, fake)
            parts["adv_g"], _, d_adv = _through(d1, fake, losses.loss_adv_generator)
            parts["reg"], grads_r, d_reg = _through(r1, fake, lambda out: losses.loss_reg(c, out))
            dfake = dfake + w.alpha * d_adv + w.beta * d_reg
            if use_mmd:
                parts["mmd"], d_mmd = losses.loss_mmd(real, fake, TOY_BANK)
                dfake = dfake + w.gamma * d_mmd
            grads_g, _ = backward(gen, tr_g, dfake)
            return losses.combine_stage_loss(parts, w), grads_g + [w.beta * g for g in grads_r]
        return fn

    def mmd(normalize):
        def fn():
            v, g, _ = _through(g2, g2_in, lambda out: losses.loss_mmd(real, out, TOY_BANK, normalize))
            return v, g
        return fn

    labels = PairLabels(np.array([1, 0, 1, 0, 0, 1, 0], dtype=float))

    def contrastive(margin):
        def fn():
            o_g, tr_g = forward(nn, x)
            o_r, tr_r = forward(nn, real[:BATCH])
            v, (gg, gr) = losses.loss_contrastive(o_g, o_r, labels, margin)
            a, _ = backward(nn, tr_g, gg)
            b, _ = backward(nn, tr_r, gr)
            return v, [p + q for p, q in zip(a, b)]
        return fn

    def contrastive_margin_probe():
        # Pick a margin so that negative pairs sit on both sides of the hinge.
        o_g, o_r = forward(nn, x)[0], forward(nn, real[:BATCH])[0]
        d = losses.pair_distances(o_g, o_r)[0][labels.y_false == 1]
        return float(np.median(d)) + 1e-3

    return {
        "rec/G1": (rec, [g1]),
        "adv_discriminator/D1": (disc, [d1]),
        "adv_generator/D1∘G1": (adv_gen, [g1]),
        "reg/R1∘G1": (reg, [g1, r1]),
        "stage1_composite/G1+R1": (gan_composite(g1, g1_in, False), [g1, r1]),
        "mmd_normalized/G2": (mmd(True), [g2]),
        "mmd_raw_sum/G2": (mmd(False), [g2]),
        "stage2_composite/G2+R": (gan_composite(g2, g2_in, True), [g2, r1]),
        "contrastive/NN": (contrastive(contrastive_margin_probe()), [nn]),
    }


def run_gradchecks(eps: float = 1e-5, seed: int = 0) -> list[CheckResult]:
    results = []
    for name, (fn, nets) in build_checks(seed).items():
        t0 = time.perf_counter()
        err = finite_diff_check(fn, nets, eps)
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results
