"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines. The toy training environment (dataset + two identically seeded runs)
is built once per session through the CLI, exactly as a user would invoke it.
"""

import json
import math
import time

import numpy as np
import pytest

import deflare.tensor as T
from deflare import io as dio
from deflare.checks import attention_benchmark, gradient_suite
from deflare.cli import main
from deflare.engine import (
    BankConfig,
    PseudoLabelBank,
    QualityScorer,
    ema_update,
    load_train_checkpoint,
)
from deflare.losses import LossWeights, PatchSet, contrastive_loss, fft_loss, identity_extractor, l1_loss, perceptual_loss, supervised_loss
from deflare.metrics import PSNR_CAP_DB, RegionMask, masked_psnr, psnr, ssim
from deflare.model import linear_attention, quadratic_attention_reference, restorer_forward, wrap_params
from deflare.synth import Rng, procedural_background
from deflare.tensor import Tensor
from tests.test_engine import run_noisy_teacher_simulation
from tests.test_tensor import dft2_direct

TOY_SEED = 43  # dataset seed with uniformly strong flares (all pairs < 20.1 dB)

TOY_CONFIG = {
    "model": {"stages": 2, "base_dim": 8},
    "schedule": {
        "base_lr": 5e-3,
        "warmup_iters": 20,
        "total_epochs": 200,
        "ramp_epochs": 100,
        "mixup_start_epoch": 200,
    },
    "weights": {"w_fft": 0.01, "w_perceptual": 0.05, "unsup_weight": 0.1},
    "bank": {"beta": 1.0},
    "ema_alpha": 0.99,
    "batch_labeled": 4,
    "batch_unlabeled": 4,
}


def report(number, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, f"criterion {number}: {detail}"


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    """Dataset plus two identically seeded 200-step CLI training runs."""
    root = tmp_path_factory.mktemp("acceptance")
    data = root / "dataset"
    assert main(["synth", "--out", str(data), "--count", "4", "--unlabeled-count", "4",
                 "--size", "64", "--seed", str(TOY_SEED)]) == 0
    cfg_path = root / "toy_config.json"
    cfg_path.write_text(json.dumps(TOY_CONFIG))
    runs = []
    durations = []
    for name in ("run1", "run2"):
        out = root / name
        t0 = time.monotonic()
        assert main(["train", "--data", str(data), "--out", str(out), "--config", str(cfg_path),
                     "--steps", "200", "--seed", "0"]) == 0
        durations.append(time.monotonic() - t0)
        runs.append(out)
    return {"data": data, "runs": runs, "train_seconds": durations}


class TestCriterion1GradientSuite:
    def test_gradient_suite(self):
        t0 = time.monotonic()
        reports = gradient_suite()
        elapsed = time.monotonic() - t0
        worst = max(reports, key=lambda r: r.max_rel_error)
        ok = all(r.max_rel_error < 1e-4 for r in reports) and elapsed < 120
        report(1, ok, f"{len(reports)} checks, worst {worst.name} rel err {worst.max_rel_error:.2e}, {elapsed:.1f}s")


class TestCriterion2AttentionEquivalence:
    def test_linear_matches_quadratic_oracle(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            tokens = int(rng.integers(1, 257))
            d = int(rng.integers(1, 17))
            c = int(rng.integers(1, 17))
            q = rng.standard_normal((tokens, d))
            k = rng.standard_normal((tokens, d))
            v = rng.standard_normal((tokens, c))
            lin = linear_attention(Tensor(q), Tensor(k), Tensor(v), 1e-6).data
            quad = quadratic_attention_reference(q, k, v, 1e-6)
            worst = max(worst, float(np.abs(lin - quad).max()))
        elapsed = time.monotonic() - t0
        ok = worst < 1e-8 and elapsed < 30
        report(2, ok, f"100 instances up to 256 tokens, max abs diff {worst:.2e}, {elapsed:.1f}s")


class TestCriterion3AttentionComplexity:
    def test_linear_scaling(self):
        t0 = time.monotonic()
        rows = attention_benchmark([1024, 4096], dim=64, value_dim=64, reps=5, seed=0)
        elapsed = time.monotonic() - t0
        lin_ratio = rows[1].t_linear / rows[0].t_linear
        quad_ratio = rows[1].t_quadratic / rows[0].t_quadratic
        ok = lin_ratio < 8.0 and quad_ratio > 12.0 and elapsed < 120
        report(3, ok, f"4x tokens: linear ratio {lin_ratio:.2f} (<8), quadratic ratio {quad_ratio:.2f} (>12), {elapsed:.1f}s")


class TestCriterion4BankSemantics:
    def test_scripted_scenarios_and_monotone_scores(self):
        t0 = time.monotonic()
        shape = (3, 8, 8)
        flat = lambda v: np.full(shape, v)
        fixed = lambda s: QualityScorer(lambda img: s, "fixed", "0")
        checks = []

        bank = PseudoLabelBank(shape)
        cfg = BankConfig(beta=1.0, delta=0.5)
        ev = bank.update_batch([("s", flat(0.6), flat(0.4))], cfg, scorer=fixed(10.0))[0]
        checks.append(ev.accepted and np.array_equal(bank.get("s").pseudo_label, flat(0.4)))

        ev = bank.update_batch([("s", flat(0.6), flat(0.5))], cfg, scorer=fixed(10.25))[0]
        checks.append(not ev.accepted and bank.get("s").score == 10.0)

        ev = bank.update_batch([("s", flat(0.6), flat(0.0))], cfg, scorer=fixed(99.0))[0]
        checks.append(not ev.accepted and ev.reason == "gate-black")

        ev = bank.update_batch([("s", flat(0.97), flat(0.95))], cfg, scorer=fixed(99.0))[0]
        checks.append(not ev.accepted and ev.reason == "gate-fog")

        bank2 = PseudoLabelBank(shape)
        cfg2 = BankConfig(beta=0.25, delta=0.5)
        bank2.entries["s"] = type(bank2.get("s"))(flat(0.2), 40.0, True)
        ev = bank2.update_batch([("s", flat(0.9), flat(0.8))], cfg2, scorer=fixed(41.0))[0]
        checks.append(ev.accepted and np.allclose(bank2.get("s").pseudo_label, 0.35) and bank2.get("s").score == 41.0)

        _, history = run_noisy_teacher_simulation(gating=True, steps=500)
        monotone = all(all(b >= a for a, b in zip(s, s[1:])) for s in history.values())
        checks.append(monotone and all(len(s) > 1 for s in history.values()))

        elapsed = time.monotonic() - t0
        ok = all(checks) and elapsed < 60
        report(4, ok, f"scenarios {checks}, 500-step scores non-decreasing, {elapsed:.1f}s")


class TestCriterion5GatingAblation:
    def test_gated_scores_dominate_accept_all(self):
        t0 = time.monotonic()
        gated, _ = run_noisy_teacher_simulation(gating=True, steps=500)
        ungated, _ = run_noisy_teacher_simulation(gating=False, steps=500)
        g = float(np.mean([e.score for e in gated.entries.values()]))
        u = float(np.mean([e.score for e in ungated.entries.values()]))
        elapsed = time.monotonic() - t0
        ok = g >= u and elapsed < 120
        report(5, ok, f"mean stored score gated {g:.2f} >= accept-all {u:.2f}, {elapsed:.1f}s")


class TestCriterion6LossIdentities:
    def test_loss_identities(self):
        checks = []
        # contrastive: equal similarities -> ln 2
        anchors = Tensor(np.array([[1.0, 0.0, 0.0]]))
        positives = Tensor(np.array([[0.0, 1.0, 0.0]]))
        negatives = Tensor(np.array([[[0.0, 0.0, 1.0]]]))
        val = contrastive_loss(PatchSet(anchors, positives, negatives, []), 1.0).item()
        checks.append(abs(val - math.log(2.0)) < 1e-9)
        # opposed negative at tau=1 -> ln(1+e^-2)
        ps = PatchSet(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0]]), Tensor([[[-1.0, 0.0]]]), [])
        checks.append(abs(contrastive_loss(ps, 1.0).item() - math.log(1 + math.exp(-2))) < 1e-9)
        # anchor=positive, orthogonal negative, tau=0.5 -> ln(1+e^-2)
        ps = PatchSet(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0]]), Tensor([[[0.0, 1.0]]]), [])
        checks.append(abs(contrastive_loss(ps, 0.5).item() - math.log(1 + math.exp(-2))) < 1e-9)

        rng = np.random.default_rng(1)
        x = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))
        y = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))
        # eta = 0: the composed objective IS the supervised loss, bitwise
        weights = LossWeights(unsup_weight=0.0)
        sup, _ = supervised_loss(x, y, weights, identity_extractor)
        unsup_term = Tensor(0.0)
        total = sup if weights.unsup_weight == 0.0 else sup + weights.unsup_weight * unsup_term
        checks.append(total is sup)
        checks.append(fft_loss(x, x).item() < 1e-9)

        c = 0.2
        target = rng.uniform(0, 0.5, (1, 3, 8, 8))
        pred = target + c
        checks.append(abs(l1_loss(Tensor(pred), Tensor(target)).item() - c) < 1e-9)
        checks.append(abs(perceptual_loss(Tensor(pred), Tensor(target), identity_extractor).item() - c) < 1e-9)
        direct = 0.0
        for ch in range(3):
            d = dft2_direct(pred[0, ch]) - dft2_direct(target[0, ch])
            direct += np.abs(d).sum() / d.size
        direct /= 3
        got = fft_loss(Tensor(pred), Tensor(target)).item()
        checks.append(abs(got - direct) < 1e-9 and abs(got - c) < 1e-9)
        report(6, all(checks), f"identities {checks}")


class TestCriterion7MetricOracles:
    def test_metric_oracles(self):
        checks = []
        target = np.full((3, 8, 8), 0.25)
        checks.append(abs(psnr(target + 0.5, target) - 6.0206) < 1e-3)
        img = procedural_background(Rng(0), 24)
        checks.append(abs(ssim(img, img) - 1.0) < 1e-9)
        rng = np.random.default_rng(2)
        pred = rng.uniform(0, 1, (3, 8, 8))
        tgt = rng.uniform(0, 1, (3, 8, 8))
        full = RegionMask("full", np.ones((8, 8), dtype=bool))
        checks.append(abs(masked_psnr(pred, tgt, full) - psnr(pred, tgt)) < 1e-12)
        base = np.full((3, 8, 8), 0.4)
        noisy = base.copy()
        noisy[:, 2, 3] += 0.1
        mask = np.zeros((8, 8), dtype=bool)
        mask[2, 3] = True
        checks.append(abs(masked_psnr(noisy, base, RegionMask("px", mask)) - 20.0) < 1e-6)
        report(7, all(checks), f"oracles {checks}")


class TestCriterion8DeskScaleOverfit:
    def test_overfit_and_psnr_margin(self, toy_runs):
        run = toy_runs["runs"][0]
        _, records = dio.read_log(run / "train_log.ndjson")
        sup = [r["loss_supervised"] for r in records if "loss_supervised" in r]
        ratio = sup[-1] / sup[0]

        state, cfg = load_train_checkpoint(run / "checkpoint_final.zip")
        params = wrap_params(state.student)
        manifest = dio.read_manifest(toy_runs["data"] / "manifest.json")
        in_psnr, out_psnr = [], []
        for item in manifest["labeled"]:
            x = dio.load_image(toy_runs["data"] / item["input"])
            y = dio.load_image(toy_runs["data"] / item["target"])
            pred = restorer_forward(Tensor(x[None]), params, cfg.model, clip_output=True).data[0]
            in_psnr.append(psnr(x, y))
            out_psnr.append(psnr(pred, y))
        margin = float(np.mean(out_psnr) - np.mean(in_psnr))
        elapsed = toy_runs["train_seconds"][0]
        ok = ratio <= 0.5 and margin >= 2.0 and elapsed < 300
        report(8, ok, f"loss ratio {ratio:.3f} (<=0.5), PSNR margin {margin:.2f} dB (>=2), train {elapsed:.0f}s (<300)")


class TestCriterion9Determinism:
    def test_repeat_runs_bit_identical(self, toy_runs):
        import hashlib

        r1, r2 = toy_runs["runs"]
        h = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
        ck_equal = h(r1 / "checkpoint_final.zip") == h(r2 / "checkpoint_final.zip")
        bank_equal = h(r1 / "bank_final.zip") == h(r2 / "bank_final.zip")
        report(9, ck_equal and bank_equal, f"checkpoint hashes equal {ck_equal}, bank archives equal {bank_equal}")


class TestCriterion10EmaContraction:
    def test_contraction_rate_exact(self):
        rng = np.random.default_rng(3)
        student = {"a": rng.uniform(size=16), "b": rng.uniform(size=(4, 4))}
        teacher = {k: rng.uniform(size=v.shape) for k, v in student.items()}
        alpha = 0.999
        d0 = math.sqrt(sum(float(np.sum((teacher[k] - student[k]) ** 2)) for k in student))
        worst = 0.0
        for k in range(1, 51):
            teacher = ema_update(teacher, student, alpha)
            dk = math.sqrt(sum(float(np.sum((teacher[n] - student[n]) ** 2)) for n in student))
            worst = max(worst, abs(dk - alpha ** k * d0))
        report(10, worst < 1e-10, f"|deviation from alpha^k contraction| = {worst:.2e} over k=1..50")
