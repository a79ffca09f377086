"""Walkthrough of the quality-gated pseudo-label bank.

Candidates are bounded by the input (restoration only removes light),
validity-gated against black/fog collapse, scored, and accepted only when
they beat the stored score by a margin. Accepted labels blend in with
momentum; rejected ones leave the entry untouched.
"""

import numpy as np

from deflare.engine import BankConfig, PseudoLabelBank, QualityScorer, get_scorer
from deflare.synth import Rng, procedural_background

shape = (3, 16, 16)
flat = lambda v: np.full(shape, v)
bank = PseudoLabelBank(shape)
cfg = BankConfig(beta=0.25, delta=0.5)


def show(title, events):
    for e in events:
        print(f"{title:<34} -> {'ACCEPT' if e.accepted else 'reject':<7} ({e.reason}), stored score {bank.get(e.sample_id).score:.2f}")


scorer60 = QualityScorer(lambda img: 60.0, "fixed", "0")

show("first valid candidate (slot empty)", bank.update_batch([("u0", flat(0.6), flat(0.5))], cfg, scorer=scorer60))
show("same score again (below margin)", bank.update_batch([("u0", flat(0.6), flat(0.5))], cfg, scorer=scorer60))
show("black candidate (gated out)", bank.update_batch([("u0", flat(0.6), flat(0.0))], cfg, scorer=scorer60))
show("foggy candidate (gated out)", bank.update_batch([("u0", flat(0.97), flat(0.95))], cfg, scorer=scorer60))
show("better by margin (blended in)", bank.update_batch([("u0", flat(0.6), flat(0.45))], cfg,
                                                        scorer=QualityScorer(lambda img: 61.0, "fixed", "0")))

print(f"\nstored label mean after momentum blends: {bank.get('u0').pseudo_label.mean():.3f}")

# the real scorer ranks quality sensibly
scorer = get_scorer("laplacian-entropy-v1")
scene = procedural_background(Rng(5), 32)
print("\nreference scorer on probe images:")
print(f"  detailed scene : {scorer(scene):6.2f}")
print(f"  blurred scene  : {scorer(np.stack([np.full((32, 32), scene.mean())] * 3)):6.2f}  (flat gray)")
print(f"  black frame    : {scorer(np.zeros(shape)):6.2f}")
print(f"  blown-out frame: {scorer(np.ones(shape)):6.2f}")
