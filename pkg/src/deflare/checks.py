"""Gradient-check suite and the attention timing benchmark.

Each check compares a taped backward against central differences at a
randomly sampled smooth point. Points near ReLU/clip kinks make central
differences meaningless, so every check may retry with the next seed in a
short fixed list; a genuine backward bug fails for all of them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import LossWeights, PatchSet, PyramidExtractor, contrastive_loss, fft_loss, l1_loss, perceptual_loss, supervised_loss
from .model import ModelConfig, attention_block, channel_attention, dual_attention_block, gated_directional_ffn, init_params, linear_attention, quadratic_attention_reference, restorer_forward, wrap_params
from .tensor import GradCheckReport, Tensor, grad_check

_RETRY_SEEDS = (0, 1, 2, 3)


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


def _run_with_retries(name, build, tol=1e-4):
    """build(rng) -> (f, x); retried over seeds to avoid non-smooth points."""
    best = None
    for seed in _RETRY_SEEDS:
        rng = np.random.default_rng(seed)
        f, x = build(rng)
        report = grad_check(f, x, name=name)
        if best is None or report.max_rel_error < best.max_rel_error:
            best = report
        if report.max_rel_error < tol:
            return report
    return best


def _block_config(dim=4):
    return ModelConfig(stages=2, base_dim=dim, blocks_per_stage=1, heads=1, in_channels=dim)


def _block_params(rng, dim=4):
    cfg = _block_config(dim)
    params = init_params(cfg, np.random.default_rng(int(rng.integers(0, 2**31))), dtype=np.float64)
    # zero-initialized branch projections would hide branch gradients; perturb
    out = {}
    for k, v in params.items():
        out[k] = v + rng.uniform(-0.3, 0.3, size=v.shape)
    return wrap_params(out), cfg


def gradient_suite() -> list[GradCheckReport]:
    """Every differentiable op plus the composite blocks and losses."""
    reports = []

    def check(name, build, tol=1e-4):
        reports.append(_run_with_retries(name, build, tol))

    # primitive ops
    def matmul_a(rng):
        b = _rand(rng, 3, 2)
        return (lambda x: T.matmul(x, b).sum()), _rand(rng, 4, 3)

    def matmul_b(rng):
        a = _rand(rng, 4, 3)
        return (lambda x: T.matmul(a, x).sum()), _rand(rng, 3, 2)

    check("matmul/dA", matmul_a)
    check("matmul/dB", matmul_b)

    def dwconv_x(rng):
        k = _rand(rng, 2, 3, 3)
        return (lambda x: T.depthwise_conv2d(x, k).sum()), _rand(rng, 1, 2, 5, 5)

    def dwconv_k(rng):
        x = _rand(rng, 1, 2, 5, 5)
        return (lambda k: T.depthwise_conv2d(x, k).sum()), _rand(rng, 2, 3, 3)

    check("depthwise_conv2d/dx", dwconv_x)
    check("depthwise_conv2d/dk", dwconv_k)

    def conv_x(rng):
        w = _rand(rng, 3, 2, 3, 3)
        return (lambda x: (T.conv2d(x, w, stride=2, padding=1) * 0.7).sum()), _rand(rng, 1, 2, 6, 6)

    def conv_w(rng):
        x = _rand(rng, 1, 2, 6, 6)
        return (lambda w: (T.conv2d(x, w, stride=2, padding=1) * 0.7).sum()), _rand(rng, 3, 2, 3, 3)

    check("conv2d/dx", conv_x)
    check("conv2d/dw", conv_w)

    def unary(fn, lo=-2.0, hi=2.0, margin=None):
        def build(rng):
            x = rng.uniform(lo, hi, size=(3, 4))
            if margin is not None:
                x = np.where(np.abs(x) < margin, x + 2 * margin, x)
            w = Tensor(rng.uniform(-1, 1, size=(3, 4)))
            return (lambda t: (fn(t) * w).sum()), Tensor(x)

        return build

    check("elu", unary(T.elu))
    check("relu", unary(T.relu, margin=1e-2))
    check("sigmoid", unary(T.sigmoid))
    check("abs", unary(T.absolute, margin=1e-2))
    check("exp", unary(T.exp))
    check("log", unary(T.log, lo=0.3, hi=2.0))
    check("sqrt", unary(T.sqrt, lo=0.3, hi=2.0))

    def clip_build(rng):
        x = rng.uniform(0.1, 0.9, size=(3, 4))
        w = Tensor(rng.uniform(-1, 1, size=(3, 4)))
        return (lambda t: (T.clip01(t) * w).sum()), Tensor(x)

    check("clip01", clip_build)

    def add_bcast(rng):
        b = _rand(rng, 1, 3, 1, 1)
        return (lambda x: ((x + b) * 0.5).sum()), _rand(rng, 2, 3, 4, 4)

    def mul_bcast(rng):
        b = _rand(rng, 1, 3, 1, 1)
        return (lambda x: (x * b).sum()), _rand(rng, 2, 3, 4, 4)

    def div_build(rng):
        b = _rand(rng, 3, 4, lo=0.5, hi=2.0)
        return (lambda x: (x / b).sum()), _rand(rng, 3, 4)

    check("add/broadcast", add_bcast)
    check("mul/broadcast", mul_bcast)
    check("div", div_build)

    def gap_build(rng):
        w = _rand(rng, 2, 3)
        return (lambda x: (T.global_avg_pool(x) * w).sum()), _rand(rng, 2, 3, 4, 4)

    check("global_avg_pool", gap_build)

    def pool_build(rng):
        w = _rand(rng, 1, 2, 2, 2)
        return (lambda x: (T.avg_pool2d(x, 2) * w).sum()), _rand(rng, 1, 2, 4, 4)

    check("avg_pool2d", pool_build)

    def up_build(rng):
        w = _rand(rng, 1, 2, 8, 8)
        return (lambda x: (T.upsample2x(x) * w).sum()), _rand(rng, 1, 2, 4, 4)

    check("upsample2x", up_build)

    def fft_build(rng):
        wr = _rand(rng, 1, 1, 4, 4)
        wi = _rand(rng, 1, 1, 4, 4)

        def f(x):
            re, im = T.fft2(x)
            return (re * wr).sum() + (im * wi).sum()

        return f, _rand(rng, 1, 1, 4, 4)

    check("fft2", fft_build)

    # composite blocks
    def attention_core(rng):
        k = _rand(rng, 8, 4)
        v = _rand(rng, 8, 4)
        return (lambda q: linear_attention(q, k, v, 1e-6).sum()), _rand(rng, 8, 4)

    check("linear_attention/dq", attention_core)

    def attention_core_k(rng):
        q = _rand(rng, 8, 4)
        v = _rand(rng, 8, 4)
        return (lambda k: linear_attention(q, k, v, 1e-6).sum()), _rand(rng, 8, 4)

    check("linear_attention/dk", attention_core_k)

    def attn_block(rng):
        params, cfg = _block_params(rng)
        p = {k[len("enc0.blk0."):]: v for k, v in params.items() if k.startswith("enc0.blk0.")}
        w = _rand(rng, 1, 4, 6, 6)
        return (lambda x: (attention_block(x, p, cfg) * w).sum()), _rand(rng, 1, 4, 6, 6)

    check("attention_block", attn_block)

    def cab_block(rng):
        w1 = _rand(rng, 4, 2)
        w2 = _rand(rng, 2, 4)
        w = _rand(rng, 1, 4, 5, 5)
        return (lambda x: (channel_attention(x, w1, w2) * w).sum()), _rand(rng, 1, 4, 5, 5)

    check("channel_attention", cab_block)

    def ffn_block(rng):
        params, cfg = _block_params(rng)
        p = {k[len("enc0.blk0."):]: v for k, v in params.items() if k.startswith("enc0.blk0.")}
        w = _rand(rng, 1, 4, 6, 6)
        return (lambda x: (gated_directional_ffn(x, p) * w).sum()), _rand(rng, 1, 4, 6, 6)

    check("gated_directional_ffn", ffn_block)

    def full_block(rng):
        params, cfg = _block_params(rng)
        p = {k[len("enc0.blk0."):]: v for k, v in params.items() if k.startswith("enc0.blk0.")}
        w = _rand(rng, 1, 4, 8, 8)
        return (lambda x: (dual_attention_block(x, p, cfg) * w).sum()), _rand(rng, 1, 4, 8, 8)

    check("dual_attention_block", full_block)

    def full_model(rng):
        params, cfg = _block_params(rng)
        w = _rand(rng, 1, 4, 8, 8)
        return (lambda x: (restorer_forward(x, params, cfg) * w).sum()), _rand(rng, 1, 4, 8, 8)

    check("restorer_forward", full_model)

    # losses
    def l1_build(rng):
        target = _rand(rng, 1, 2, 4, 4)

        def f(x):
            return l1_loss(x, target)

        # keep |pred - target| away from the abs kink
        x = target.data + np.sign(rng.uniform(-1, 1, size=target.shape)) * rng.uniform(0.2, 0.8, size=target.shape)
        return f, Tensor(x)

    check("l1_loss", l1_build)

    def fftloss_build(rng):
        target = _rand(rng, 1, 1, 4, 4)
        return (lambda x: fft_loss(x, target)), _rand(rng, 1, 1, 4, 4, lo=2.0, hi=3.0)

    check("fft_loss", fftloss_build)

    def perc_build(rng):
        target = _rand(rng, 1, 2, 8, 8)
        extractor = PyramidExtractor((2, 4))

        def f(x):
            return perceptual_loss(x, target, extractor)

        x = target.data + np.sign(rng.uniform(-1, 1, size=target.shape)) * rng.uniform(0.2, 0.8, size=target.shape)
        return f, Tensor(x)

    check("perceptual_loss", perc_build)

    def contrastive_build(rng):
        pos = Tensor(rng.uniform(-1, 1, size=(3, 6)))
        neg = Tensor(rng.uniform(-1, 1, size=(1, 3, 6)))

        def f(a):
            return contrastive_loss(PatchSet(a, pos, neg, []), 0.5)

        return f, Tensor(rng.uniform(-1, 1, size=(3, 6)) + 0.2)

    check("contrastive_loss", contrastive_build)

    def sup_build(rng):
        target = _rand(rng, 1, 2, 8, 8)
        weights = LossWeights(w_l1=1.0, w_perceptual=0.5, w_fft=0.5)
        extractor = PyramidExtractor((2,))

        def f(x):
            return supervised_loss(x, target, weights, extractor)[0]

        x = target.data + np.sign(rng.uniform(-1, 1, size=target.shape)) * rng.uniform(0.2, 0.8, size=target.shape)
        return f, Tensor(x)

    check("supervised_loss", sup_build)

    return reports


# -- attention scaling benchmark ------------------------------------------------------

@dataclass
class BenchRow:
    n_tokens: int
    t_linear: float
    t_quadratic: float
    max_abs_diff: float


def attention_benchmark(sizes, dim=64, value_dim=64, reps=5, seed=0) -> list[BenchRow]:
    """Median wall time of the linear-order path vs the quadratic oracle."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        q = rng.standard_normal((n, dim))
        k = rng.standard_normal((n, dim))
        v = rng.standard_normal((n, value_dim))
        qt, kt, vt = Tensor(q), Tensor(k), Tensor(v)
        lin = linear_attention(qt, kt, vt, 1e-6).data  # warm + correctness
        quad = quadratic_attention_reference(q, k, v, 1e-6)
        diff = float(np.abs(lin - quad).max())

        t_lin = []
        for _ in range(reps):
            t0 = time.perf_counter()
            linear_attention(qt, kt, vt, 1e-6)
            t_lin.append(time.perf_counter() - t0)
        t_quad = []
        for _ in range(reps):
            t0 = time.perf_counter()
            quadratic_attention_reference(q, k, v, 1e-6)
            t_quad.append(time.perf_counter() - t0)
        rows.append(BenchRow(n, float(np.median(t_lin)), float(np.median(t_quad)), diff))
    return rows
