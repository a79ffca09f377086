"""Teacher-student training engine with a quality-gated pseudo-label bank.

The teacher is an exponential moving average of the student and is the only
source of pseudo-labels. Its per-sample predictions are physically bounded
(a restored image may not add light beyond the input plus a small headroom),
validity-gated against black/fog collapse, scored by a pluggable no-reference
quality scorer, and only accepted into the persistent bank when they beat the
stored score by a margin (or the slot is still empty). Accepted labels are
blended with momentum rather than overwritten. The student trains on labeled
pairs plus bank-supervised strong views with a ramped weight; a second
validity mask keeps near-black stored labels out of the loss entirely.

All state transitions are pure functions of (state, batch, config, seed), so
a rerun with the same seed reproduces checkpoints bit for bit.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import io as dio
from .losses import LossWeights, PatchSet, PyramidExtractor, supervised_loss, unsupervised_loss, extract_patches
from .model import (
    ModelConfig,
    collect_grads,
    encode,
    init_params,
    load_arrays,
    restorer_forward,
    save_arrays,
    wrap_params,
)
from .synth import LabeledPair, Rng, UnlabeledViews, hflip, mixup, strong_augment, weak_augment
from .tensor import NumericError, Tape, Tensor, narrow


class ValidationError(ValueError):
    """A config file or runtime setting failed validation; names the field."""


# -- no-reference quality scoring ---------------------------------------------------

@dataclass(frozen=True)
class QualityScorer:
    """Deterministic image -> scalar quality callable with an identity."""

    fn: Callable[[np.ndarray], float]
    name: str
    version: str

    def __call__(self, img: np.ndarray) -> float:
        return float(self.fn(img))


def laplacian_entropy_score(img: np.ndarray) -> float:
    """Sharpness + histogram entropy + exposure headroom, scaled to [0,100].

    Monotone in Laplacian energy, rewards tonal diversity, and penalizes
    clipped (blown-out or crushed) pixels; degenerate flat or black images
    score near zero. A stand-in for a learned no-reference quality model
    behind the same interface.
    """
    img = np.asarray(img, dtype=np.float64)
    luma = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2] if img.ndim == 3 else img
    if luma.shape[0] >= 3 and luma.shape[1] >= 3:
        lap = (
            luma[:-2, 1:-1] + luma[2:, 1:-1] + luma[1:-1, :-2] + luma[1:-1, 2:]
            - 4.0 * luma[1:-1, 1:-1]
        )
        energy = float(np.mean(lap * lap))
    else:
        energy = 0.0
    sharpness = energy / (energy + 0.01)
    hist, _ = np.histogram(luma, bins=32, range=(0.0, 1.0))
    p = hist / max(luma.size, 1)
    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum() / math.log(32)) if nz.size else 0.0
    clipped = float(np.mean((img <= 0.005) | (img >= 0.995)))
    score = 100.0 * (0.5 * sharpness + 0.3 * entropy + 0.2 * (1.0 - clipped))
    return float(np.clip(score, 0.0, 100.0))


SCORERS: dict[str, QualityScorer] = {
    "laplacian-entropy-v1": QualityScorer(laplacian_entropy_score, "laplacian-entropy", "1"),
}


def get_scorer(name: str) -> QualityScorer:
    if name not in SCORERS:
        raise ValidationError(f"bank.scorer: unknown scorer '{name}' (have {sorted(SCORERS)})")
    return SCORERS[name]


# -- pseudo-label bank ----------------------------------------------------------------

@dataclass
class BankEntry:
    pseudo_label: np.ndarray
    score: float = 0.0
    initialized: bool = False


@dataclass
class BankConfig:
    delta: float = 0.5
    beta: float = 0.3
    eps_clip: float = 0.05
    tau_black: float = 0.02
    tau_fog: float = 0.90
    tau_empty: float = 0.02
    scorer: str = "laplacian-entropy-v1"
    gating: bool = True  # False = accept-all ablation (momentum only)

    def validate(self) -> None:
        if not 0.0 < self.beta <= 1.0:
            raise ValidationError("bank.beta must be in (0,1]")
        if self.delta < 0:
            raise ValidationError("bank.delta must be >= 0")
        if self.eps_clip < 0:
            raise ValidationError("bank.eps_clip must be >= 0")
        get_scorer(self.scorer)


def bound_candidate(p_hat: np.ndarray, x_weak: np.ndarray, eps_clip: float) -> np.ndarray:
    """Restoration only removes light: cap at input + headroom, clamp to [0,1]."""
    if p_hat.shape != x_weak.shape:
        raise ValueError(f"candidate {p_hat.shape} vs input {x_weak.shape}")
    return np.clip(np.minimum(p_hat, x_weak + eps_clip), 0.0, 1.0)


def _gate_reason(p_tilde: np.ndarray, cfg: BankConfig) -> Optional[str]:
    if float(p_tilde.mean()) < cfg.tau_black:
        return "black"
    if float(p_tilde.min()) > cfg.tau_fog:
        return "fog"
    return None


def gate_candidate(p_tilde: np.ndarray, cfg: BankConfig) -> bool:
    """False when the candidate collapsed to near-black or washed-out fog."""
    return _gate_reason(p_tilde, cfg) is None


def validity_mask(p_u: np.ndarray, tau_black: float) -> bool:
    """Loss-time mask: near-black stored labels contribute no gradient."""
    return float(p_u.mean()) >= tau_black


@dataclass
class UpdateEvent:
    sample_id: str
    accepted: bool
    reason: str
    candidate_score: Optional[float] = None
    stored_score: Optional[float] = None

    def to_record(self) -> dict:
        return dataclasses.asdict(self)


class PseudoLabelBank:
    """Per-sample persistent store of the best pseudo-label seen so far."""

    def __init__(self, image_shape: tuple, dtype=np.float64):
        self.image_shape = tuple(image_shape)
        self.dtype = np.dtype(dtype)
        self.entries: dict[str, BankEntry] = {}

    def ensure(self, sample_id: str) -> BankEntry:
        if sample_id not in self.entries:
            self.entries[sample_id] = BankEntry(np.zeros(self.image_shape, dtype=self.dtype))
        return self.entries[sample_id]

    def get(self, sample_id: str) -> BankEntry:
        return self.ensure(sample_id)

    def update_batch(
        self,
        items: Sequence[tuple[str, np.ndarray, np.ndarray]],
        cfg: BankConfig,
        scorer: Optional[QualityScorer] = None,
    ) -> list[UpdateEvent]:
        """Bound, gate, score and maybe accept each (id, weak input, prediction).

        Acceptance blends the stored label toward the candidate and records
        the candidate's own score; rejection leaves the entry untouched.
        """
        scorer = scorer or get_scorer(cfg.scorer)
        events = []
        for sample_id, x_weak, p_hat in items:
            entry = self.ensure(sample_id)
            p_tilde = bound_candidate(p_hat, x_weak, cfg.eps_clip)
            if cfg.gating:
                reason = _gate_reason(p_tilde, cfg)
                if reason is not None:
                    events.append(UpdateEvent(sample_id, False, f"gate-{reason}", stored_score=entry.score))
                    continue
            try:
                s_t = scorer(p_tilde)
            except Exception as exc:  # scorer failure rejects, never crashes
                events.append(UpdateEvent(sample_id, False, f"scorer-error:{type(exc).__name__}", stored_score=entry.score))
                continue
            if not np.isfinite(s_t):
                events.append(UpdateEvent(sample_id, False, "scorer-nonfinite", stored_score=entry.score))
                continue
            is_empty = float(entry.pseudo_label.mean()) < cfg.tau_empty
            is_better = s_t > entry.score + cfg.delta
            if cfg.gating and not (is_better or is_empty):
                events.append(
                    UpdateEvent(sample_id, False, "margin", candidate_score=s_t, stored_score=entry.score)
                )
                continue
            entry.pseudo_label = (1.0 - cfg.beta) * entry.pseudo_label + cfg.beta * p_tilde
            entry.score = s_t
            entry.initialized = True
            reason = "empty" if is_empty else ("better" if is_better else "accept-all")
            events.append(UpdateEvent(sample_id, True, reason, candidate_score=s_t, stored_score=s_t))
        return events

    def save(self, path) -> None:
        arrays = {sid: e.pseudo_label for sid, e in self.entries.items()}
        meta = {
            sid: {"score": self.entries[sid].score, "initialized": self.entries[sid].initialized}
            for sid in self.entries
        }
        save_arrays(path, arrays, {"kind": "pseudo-label-bank", "image_shape": list(self.image_shape), "meta": meta})

    @classmethod
    def load(cls, path) -> "PseudoLabelBank":
        arrays, header = load_arrays(path)
        bank = cls(tuple(header["image_shape"]))
        for sid, arr in arrays.items():
            m = header["meta"][sid]
            bank.entries[sid] = BankEntry(arr, float(m["score"]), bool(m["initialized"]))
            bank.dtype = arr.dtype
        return bank


# -- optimizer, EMA and schedules ------------------------------------------------------

def ema_update(teacher: dict, student: dict, alpha: float) -> dict:
    """Geometric blend toward the student: alpha=0 copies, alpha->1 freezes."""
    if not 0.0 <= alpha < 1.0:
        raise ValidationError("ema alpha must be in [0,1)")
    if teacher.keys() != student.keys():
        raise ValueError("teacher/student parameter sets differ")
    return {k: alpha * teacher[k] + (1.0 - alpha) * student[k] for k in teacher}


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def fresh(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict, AdamState]:
    """Canonical bias-corrected Adam; returns fresh param/state dicts."""
    t = state.t + 1
    new_m, new_v, new_p = {}, {}, {}
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_m[k], new_v[k] = m, v
        new_p[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class ScheduleConfig:
    base_lr: float = 1e-4
    warmup_iters: int = 20
    total_epochs: int = 40
    ramp_epochs: int = 5
    mixup_start_epoch: int = 10
    mixup_alpha: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    grad_accum_steps: int = 1

    def validate(self) -> None:
        if self.warmup_iters < 1:
            raise ValidationError("schedule.warmup_iters must be >= 1")
        if self.mixup_start_epoch > self.total_epochs:
            raise ValidationError("schedule.mixup_start_epoch must be <= total_epochs")
        if self.grad_accum_steps < 1:
            raise ValidationError("schedule.grad_accum_steps must be >= 1")
        if self.base_lr <= 0:
            raise ValidationError("schedule.base_lr must be > 0")


def lr_schedule(t: int, cfg: ScheduleConfig, total_steps: int) -> float:
    """Linear warm-up over warmup_iters, then cosine decay to zero."""
    if t <= cfg.warmup_iters:
        return cfg.base_lr * t / cfg.warmup_iters
    if total_steps <= cfg.warmup_iters:
        return cfg.base_lr
    frac = (t - cfg.warmup_iters) / (total_steps - cfg.warmup_iters)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def unsup_ramp(epoch: int, cfg: ScheduleConfig) -> float:
    """Exponential sigmoid ramp from ~e^-5 to 1 over ramp_epochs."""
    if cfg.ramp_epochs <= 0 or epoch >= cfg.ramp_epochs:
        return 1.0
    frac = epoch / cfg.ramp_epochs
    return math.exp(-5.0 * (1.0 - frac) ** 2)


# -- train config ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    ema_alpha: float = 0.999
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    contrastive_patch: int = 4
    contrastive_stride: int = 0  # 0 = same as patch
    extra_negatives: int = 0
    perceptual_factors: tuple = (2, 4)
    dtype: str = "float64"
    checkpoint_every: int = 0  # 0 = final only

    def validate(self) -> None:
        self.model.validate()
        self.schedule.validate()
        self.bank.validate()
        try:
            self.weights.validate()
        except ValueError as e:
            raise ValidationError(f"weights: {e}") from e
        if not 0.0 <= self.ema_alpha < 1.0:
            raise ValidationError("ema_alpha must be in [0,1)")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")
        if self.batch_labeled < 1:
            raise ValidationError("batch_labeled must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["perceptual_factors"] = list(self.perceptual_factors)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        sections = {"model": ModelConfig, "weights": LossWeights, "schedule": ScheduleConfig, "bank": BankConfig}
        kwargs = {}
        for key, value in data.items():
            if key in sections:
                kwargs[key] = _load_section(sections[key], value, key)
            elif key in {f.name for f in dataclasses.fields(cls)}:
                kwargs[key] = tuple(value) if key == "perceptual_factors" else value
            else:
                raise ValidationError(f"unknown config field '{key}'")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def _load_section(section_cls, value: dict, section: str):
    names = {f.name for f in dataclasses.fields(section_cls)}
    for key in value:
        if key not in names:
            raise ValidationError(f"unknown config field '{section}.{key}'")
    coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
    return section_cls(**coerced)


# -- training state and step ------------------------------------------------------------

@dataclass
class TrainState:
    student: dict
    teacher: dict
    adam: AdamState
    bank: PseudoLabelBank
    rng: Rng
    step: int = 0
    epoch: int = 0
    total_steps: int = 0
    pending_grads: Optional[dict] = None
    pending_count: int = 0


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    unsup_weight: float
    losses: dict
    bank_accepted: int = 0
    bank_rejected: int = 0
    bank_events: list = field(default_factory=list)
    aborted: bool = False
    skipped_nonfinite_grad: bool = False

    def to_record(self) -> dict:
        rec = {"step": self.step, "epoch": self.epoch, "lr": self.lr, "unsup_weight": self.unsup_weight}
        rec.update({f"loss_{k}": v for k, v in self.losses.items()})
        rec.update(
            {
                "bank_accepted": self.bank_accepted,
                "bank_rejected": self.bank_rejected,
                "aborted": self.aborted,
                "skipped_nonfinite_grad": self.skipped_nonfinite_grad,
            }
        )
        if self.bank_events:
            rec["bank_events"] = [e.to_record() for e in self.bank_events]
        return rec


# per-purpose child stream tags keep draw order independent across pipeline parts
_STREAM_SHUFFLE, _STREAM_USHUFFLE, _STREAM_MIXUP, _STREAM_VIEWS = 1, 2, 3, 4


def init_state(cfg: TrainConfig, seed: int, image_shape: tuple, total_steps: int) -> TrainState:
    rng = Rng(seed)
    dtype = np.dtype(cfg.dtype)
    student = init_params(cfg.model, rng.child(0).generator, dtype=dtype)
    teacher = {k: v.copy() for k, v in student.items()}
    return TrainState(
        student=student,
        teacher=teacher,
        adam=AdamState.fresh(student),
        bank=PseudoLabelBank(image_shape, dtype=dtype),
        rng=rng,
        total_steps=total_steps,
    )


def _snapshot(state: TrainState) -> dict:
    return {
        "student": {k: v.copy() for k, v in state.student.items()},
        "teacher": {k: v.copy() for k, v in state.teacher.items()},
        "adam": AdamState({k: v.copy() for k, v in state.adam.m.items()}, {k: v.copy() for k, v in state.adam.v.items()}, state.adam.t),
        "pending": None if state.pending_grads is None else {k: v.copy() for k, v in state.pending_grads.items()},
        "pending_count": state.pending_count,
    }


def _restore(state: TrainState, snap: dict) -> None:
    state.student = snap["student"]
    state.teacher = snap["teacher"]
    state.adam = snap["adam"]
    state.pending_grads = snap["pending"]
    state.pending_count = snap["pending_count"]


def _build_patch_set(
    anchor_feat: Tensor,
    positive_feat: Tensor,
    negative_feat: Tensor,
    cfg: TrainConfig,
    rng: Rng,
) -> PatchSet:
    patch = cfg.contrastive_patch
    stride = cfg.contrastive_stride or None
    anchors, coords = extract_patches(anchor_feat, patch, stride)
    positives, _ = extract_patches(positive_feat, patch, stride)
    negatives, _ = extract_patches(negative_feat, patch, stride)
    neg_sets = [negatives.data]
    for k in range(cfg.extra_negatives):
        perm = rng.child(90, k).generator.permutation(negatives.shape[0])
        neg_sets.append(negatives.data[perm])
    return PatchSet(
        anchors=anchors,
        positives=Tensor(positives.data),
        negatives=Tensor(np.stack(neg_sets)),
        coords=coords,
    )


def train_step(
    labeled_batch: Sequence[LabeledPair],
    unlabeled_batch: Sequence[tuple[str, np.ndarray]],
    state: TrainState,
    cfg: TrainConfig,
) -> StepRecord:
    """One optimization step of the semi-supervised objective.

    Order: teacher predicts on weak views (no tape), the bank updates, the
    student forwards labeled inputs and strong views on one tape, the weighted
    loss backpropagates, Adam applies (honoring gradient accumulation), and
    the teacher EMA follows. Any non-finite loss aborts the step and rolls the
    state back to its pre-step snapshot.
    """
    snap = _snapshot(state)
    try:
        return _train_step_inner(labeled_batch, unlabeled_batch, state, cfg)
    except NumericError:
        _restore(state, snap)
        rec = StepRecord(
            step=state.step,
            epoch=state.epoch,
            lr=lr_schedule(state.step + 1, cfg.schedule, state.total_steps),
            unsup_weight=0.0,
            losses={},
            aborted=True,
        )
        state.step += 1
        return rec


def _train_step_inner(labeled_batch, unlabeled_batch, state: TrainState, cfg: TrainConfig) -> StepRecord:
    dtype = np.dtype(cfg.dtype)
    step = state.step
    lr = lr_schedule(step + 1, cfg.schedule, state.total_steps)
    eta_eff = cfg.weights.unsup_weight * unsup_ramp(state.epoch, cfg.schedule)
    extractor = PyramidExtractor(cfg.perceptual_factors)

    # -- teacher pseudo-labels on weak views (never taped)
    views: list[UnlabeledViews] = []
    originals = []
    events = []
    accepted = rejected = 0
    if unlabeled_batch:
        view_rng = state.rng.child(_STREAM_VIEWS, step)
        for i, (sid, img) in enumerate(unlabeled_batch):
            weak, flipped = weak_augment(img, view_rng.child(i, 0))
            strong = strong_augment(weak, view_rng.child(i, 1))
            views.append(UnlabeledViews(weak=weak, strong=strong, sample_id=sid, flipped=flipped))
            originals.append(img)
        weak_stack = np.stack([v.weak for v in views]).astype(dtype)
        with Tape.paused():
            teacher_pred = restorer_forward(Tensor(weak_stack), wrap_params(state.teacher), cfg.model).data
        items = []
        for i, view in enumerate(views):
            # candidates are stored in canonical (unflipped) orientation
            cand = hflip(teacher_pred[i]) if view.flipped else teacher_pred[i]
            items.append((view.sample_id, originals[i].astype(dtype), np.asarray(cand, dtype=dtype)))
        events = state.bank.update_batch(items, cfg.bank)
        accepted = sum(e.accepted for e in events)
        rejected = len(events) - accepted

    # -- mixup on the labeled batch once past the start epoch
    pairs = list(labeled_batch)
    if state.epoch >= cfg.schedule.mixup_start_epoch and len(pairs) > 1:
        mix_rng = state.rng.child(_STREAM_MIXUP, step)
        perm = mix_rng.generator.permutation(len(pairs))
        pairs = [mixup(pairs[i], pairs[int(perm[i])], cfg.schedule.mixup_alpha, mix_rng.child(i)) for i in range(len(pairs))]

    x_l = np.stack([p.input for p in pairs]).astype(dtype)
    y_l = np.stack([p.target for p in pairs]).astype(dtype)

    losses: dict[str, float] = {}
    with Tape() as tape:
        student_t = wrap_params(state.student)
        pred_l = restorer_forward(Tensor(x_l), student_t, cfg.model)
        total, sup_parts = supervised_loss(pred_l, Tensor(y_l), cfg.weights, extractor)
        losses.update(sup_parts)
        losses["supervised"] = total.item()

        if views and eta_eff > 0.0:
            strong_stack = np.stack([v.strong for v in views]).astype(dtype)
            pred_u = restorer_forward(Tensor(strong_stack), student_t, cfg.model)
            unsup_sum = None
            unsup_l1_total = contrast_total = 0.0
            valid_count = 0
            for i, view in enumerate(views):
                entry = state.bank.get(view.sample_id)
                stored = entry.pseudo_label
                p_star = hflip(stored) if view.flipped else stored
                valid = entry.initialized and validity_mask(p_star, cfg.bank.tau_black)
                if not valid:
                    continue
                pred_i = narrow(pred_u, 0, i, 1)
                pseudo_t = Tensor(p_star[None].astype(dtype))
                patches = None
                if cfg.weights.w_contrastive > 0:
                    anchor_feat, _ = encode(pred_i, student_t, cfg.model)
                    with Tape.paused():
                        pos_feat, _ = encode(pseudo_t, student_t, cfg.model)
                        neg_feat, _ = encode(Tensor(view.strong[None].astype(dtype)), student_t, cfg.model)
                    patches = _build_patch_set(anchor_feat, pos_feat, neg_feat, cfg, state.rng.child(_STREAM_VIEWS, step, i))
                term, parts = unsupervised_loss(pred_i, pseudo_t, patches, cfg.weights)
                unsup_sum = term if unsup_sum is None else unsup_sum + term
                unsup_l1_total += parts["unsup_l1"]
                contrast_total += parts["contrastive"]
                valid_count += 1
            if unsup_sum is not None:
                unsup_mean = unsup_sum / float(len(views))
                losses["unsupervised"] = unsup_mean.item()
                losses["unsup_l1"] = unsup_l1_total / len(views)
                losses["contrastive"] = contrast_total / len(views)
                losses["unsup_valid"] = valid_count
                total = total + eta_eff * unsup_mean

        losses["total"] = total.item()
        if not np.isfinite(total.item()):
            raise NumericError("non-finite training loss")
        tape.backward(total)

    grads = collect_grads(student_t)
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.step += 1
        return StepRecord(step, state.epoch, lr, eta_eff, losses, accepted, rejected, events, skipped_nonfinite_grad=True)

    # -- accumulate, then Adam + EMA on the boundary
    accum = cfg.schedule.grad_accum_steps
    if state.pending_grads is None:
        state.pending_grads = {k: g / accum for k, g in grads.items()}
    else:
        for k, g in grads.items():
            state.pending_grads[k] += g / accum
    state.pending_count += 1
    if state.pending_count >= accum:
        state.student, state.adam = adam_step(
            state.student,
            state.pending_grads,
            state.adam,
            lr,
            cfg.schedule.adam_beta1,
            cfg.schedule.adam_beta2,
        )
        state.teacher = ema_update(state.teacher, state.student, cfg.ema_alpha)
        state.pending_grads = None
        state.pending_count = 0

    rec = StepRecord(step, state.epoch, lr, eta_eff, losses, accepted, rejected, events)
    state.step += 1
    return rec


# -- dataset + driver --------------------------------------------------------------------

@dataclass
class TrainData:
    labeled: list
    unlabeled: list  # (sample_id, image)
    image_shape: tuple


def load_dataset(manifest_path) -> TrainData:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = dio.read_manifest(manifest_path)
    labeled = []
    for item in manifest["labeled"]:
        labeled.append(LabeledPair(dio.load_image(root / item["input"]), dio.load_image(root / item["target"])))
    unlabeled = [(item["id"], dio.load_image(root / item["image"])) for item in manifest["unlabeled"]]
    if labeled:
        shape = labeled[0].input.shape
    elif unlabeled:
        shape = unlabeled[0][1].shape
    else:
        raise ValidationError("dataset: manifest lists no images")
    return TrainData(labeled, unlabeled, shape)


class Trainer:
    """Drives train_step over shuffled batches, logging and checkpointing."""

    def __init__(self, data: TrainData, cfg: TrainConfig, out_dir, seed: int, steps: int):
        cfg.validate()
        if not data.labeled:
            raise ValidationError("dataset: training requires labeled pairs")
        self.data = data
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.steps = steps
        self.state = init_state(cfg, seed, data.image_shape, steps)
        self._labeled_order: list[int] = []
        self._unlabeled_order: list[int] = []
        self._steps_per_epoch = max(1, math.ceil(len(data.labeled) / cfg.batch_labeled))

    def _labeled_batch(self) -> list:
        idx = []
        for _ in range(min(self.cfg.batch_labeled, len(self.data.labeled))):
            if not self._labeled_order:
                order = self.state.rng.child(_STREAM_SHUFFLE, self.state.epoch).generator.permutation(len(self.data.labeled))
                self._labeled_order = list(order)
            idx.append(self._labeled_order.pop(0))
        return [self.data.labeled[i] for i in idx]

    def _unlabeled_batch(self) -> list:
        if not self.data.unlabeled or self.cfg.batch_unlabeled == 0:
            return []
        idx = []
        for _ in range(min(self.cfg.batch_unlabeled, len(self.data.unlabeled))):
            if not self._unlabeled_order:
                order = self.state.rng.child(_STREAM_USHUFFLE, self.state.step).generator.permutation(len(self.data.unlabeled))
                self._unlabeled_order = list(order)
            idx.append(self._unlabeled_order.pop(0))
        return [self.data.unlabeled[i] for i in idx]

    def run(self) -> dict:
        import datetime

        started = datetime.datetime.now(datetime.timezone.utc).isoformat()
        log = dio.RunLog(
            self.out_dir / "train_log.ndjson",
            {"started": started, "seed": self.seed, "steps": self.steps, "config": self.cfg.to_dict()},
        )
        first_sup = last_sup = None
        self.save_checkpoint(self.out_dir / "checkpoint_init.zip")
        for _ in range(self.steps):
            record = train_step(self._labeled_batch(), self._unlabeled_batch(), self.state, self.cfg)
            log.write(record.to_record())
            sup = record.losses.get("supervised")
            if sup is not None:
                first_sup = sup if first_sup is None else first_sup
                last_sup = sup
            if self.cfg.checkpoint_every and (self.state.step % self.cfg.checkpoint_every == 0):
                self.save_checkpoint(self.out_dir / f"checkpoint_{self.state.step:06d}.zip")
            if self.state.step % self._steps_per_epoch == 0:
                self.state.epoch += 1
        if self.steps > 0:
            self.save_checkpoint(self.out_dir / "checkpoint_final.zip")
            self.state.bank.save(self.out_dir / "bank_final.zip")
        return {"first_supervised": first_sup, "last_supervised": last_sup, "steps": self.state.step}

    def save_checkpoint(self, path) -> None:
        save_train_checkpoint(path, self.state, self.cfg)


def save_train_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    arrays = {}
    for k, v in state.student.items():
        arrays[f"student/{k}"] = v
    for k, v in state.teacher.items():
        arrays[f"teacher/{k}"] = v
    for k, v in state.adam.m.items():
        arrays[f"adam_m/{k}"] = v
    for k, v in state.adam.v.items():
        arrays[f"adam_v/{k}"] = v
    header = {
        "kind": "train-checkpoint",
        "config": cfg.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "adam_t": state.adam.t,
        "total_steps": state.total_steps,
        "image_shape": list(state.bank.image_shape),
        "rng": state.rng.state(),
    }
    save_arrays(path, arrays, header)


def load_train_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    arrays, header = load_arrays(path)
    cfg = TrainConfig.from_dict(header["config"])
    student = {k[len("student/"):]: v for k, v in arrays.items() if k.startswith("student/")}
    teacher = {k[len("teacher/"):]: v for k, v in arrays.items() if k.startswith("teacher/")}
    m = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
    v = {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    rng = Rng(header["rng"]["seed"], tuple(header["rng"]["path"]))
    rng.restore(header["rng"])
    state = TrainState(
        student=student,
        teacher=teacher,
        adam=AdamState(m, v, header["adam_t"]),
        bank=PseudoLabelBank(tuple(header["image_shape"]), dtype=np.dtype(cfg.dtype)),
        rng=rng,
        step=header["step"],
        epoch=header["epoch"],
        total_steps=header["total_steps"],
    )
    return state, cfg
