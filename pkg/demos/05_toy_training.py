"""A miniature semi-supervised training run, end to end in-process.

Synthesizes a few labeled pairs and unlabeled images at 32x32, trains a
small restorer for 180 steps with the teacher-student loop and the bank
engaged, then compares restoration quality before and after.

Takes a minute or two on a laptop CPU. The `deflare synth` + `deflare
train` commands drive the identical machinery from the shell.
"""

import numpy as np

from deflare.engine import ScheduleConfig, TrainConfig, TrainData, Trainer, load_train_checkpoint
from deflare.metrics import psnr
from deflare.model import ModelConfig, restorer_forward, wrap_params
from deflare.synth import AugmentationParams, Rng, procedural_background, procedural_flare, synthesize_pair
from deflare.tensor import Tensor
from pathlib import Path

rng = Rng(7)
labeled, unlabeled = [], []
for i in range(4):
    r = rng.child(1, i)
    labeled.append(synthesize_pair(procedural_background(r.child(0), 32), procedural_flare(r.child(1), 32),
                                   AugmentationParams(), r.child(2)))
for i in range(4):
    r = rng.child(2, i)
    pair = synthesize_pair(procedural_background(r.child(0), 32), procedural_flare(r.child(1), 32),
                           AugmentationParams(), r.child(2))
    unlabeled.append((f"u{i}", pair.input))

data = TrainData(labeled, unlabeled, labeled[0].input.shape)
cfg = TrainConfig(
    model=ModelConfig(stages=2, base_dim=8),
    schedule=ScheduleConfig(base_lr=5e-3, warmup_iters=15, total_epochs=180, ramp_epochs=90, mixup_start_epoch=180),
    ema_alpha=0.99,
)
cfg.weights.w_fft = 0.01
cfg.weights.w_perceptual = 0.05

out = Path(__file__).parent / "output" / "toy_run"
trainer = Trainer(data, cfg, out, seed=0, steps=180)
summary = trainer.run()
print(f"supervised loss: {summary['first_supervised']:.3f} -> {summary['last_supervised']:.3f}")

state, cfg2 = load_train_checkpoint(out / "checkpoint_final.zip")
params = wrap_params(state.student)
before, after = [], []
for pair in labeled:
    pred = restorer_forward(Tensor(pair.input[None]), params, cfg2.model, clip_output=True).data[0]
    before.append(psnr(pair.input, pair.target))
    after.append(psnr(pred, pair.target))
print(f"mean PSNR vs target: corrupted inputs {np.mean(before):.2f} dB, restored outputs {np.mean(after):.2f} dB")

from deflare.engine import PseudoLabelBank

bank = PseudoLabelBank.load(out / "bank_final.zip")
filled = sum(e.initialized for e in bank.entries.values())
print(f"bank: {len(bank.entries)} entries, {filled} initialized with pseudo-labels")
print(f"artifacts (checkpoints, bank, ndjson log) under {out}")
