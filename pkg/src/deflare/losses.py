"""Training objectives: pixel, spectral, perceptual and patch-contrastive.

The spectral loss compares unnormalized 2-D DFT spectra through the complex
modulus of the bin-wise difference, which makes it invariant to a common
circular shift of both images. The perceptual loss is pluggable: any callable
mapping an image to a list of feature maps works; the default is an
average-pool pyramid of the image itself (no pretrained network).

The contrastive loss is the standard temperature-scaled softmax over cosine
similarities, built patch-wise: each restored-image patch is pulled toward
the same-coordinate patch of a trusted pseudo-label and pushed away from the
flare-corrupted input's patch at those coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

from .tensor import (
    DimensionError,
    Tensor,
    absolute,
    avg_pool2d,
    concat,
    exp,
    fft2,
    log,
    narrow,
    reduce_mean,
    reduce_sum,
    sqrt,
)

FeatureExtractor = Callable[[Tensor], List[Tensor]]


@dataclass
class LossWeights:
    w_l1: float = 1.0
    w_perceptual: float = 0.1
    w_fft: float = 0.1
    w_contrastive: float = 0.1
    unsup_weight: float = 0.3
    temperature: float = 0.2

    def validate(self) -> None:
        for name in ("w_l1", "w_perceptual", "w_fft", "w_contrastive", "unsup_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    return reduce_mean(absolute(pred - target))


def fft_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean complex-modulus distance between the two spectra.

    The tiny constant inside the sqrt keeps the backward finite at bins where
    the spectra coincide; its contribution (~1e-12) is far below test
    tolerances.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"fft_loss shapes differ: {pred.shape} vs {target.shape}")
    re_p, im_p = fft2(pred)
    re_t, im_t = fft2(target)
    dre = re_p - re_t
    dim = im_p - im_t
    magnitude = sqrt(dre * dre + dim * dim + 1e-24)
    return reduce_mean(magnitude)


def identity_extractor(x: Tensor) -> List[Tensor]:
    return [x]


class PyramidExtractor:
    """Average-pool pyramid of the image itself; the default perceptual tap."""

    def __init__(self, factors: Sequence[int] = (2, 4)):
        self.factors = tuple(factors)

    def __call__(self, x: Tensor) -> List[Tensor]:
        return [avg_pool2d(x, f) for f in self.factors]


def perceptual_loss(pred: Tensor, target: Tensor, extractor: FeatureExtractor) -> Tensor:
    """Mean over extractor levels of the per-level mean absolute difference."""
    fp = extractor(pred)
    ft = extractor(target)
    if len(fp) != len(ft):
        raise DimensionError("extractor returned differing level counts")
    total = l1_loss(fp[0], ft[0])
    for a, b in zip(fp[1:], ft[1:]):
        total = total + l1_loss(a, b)
    return total / float(len(fp))


# -- patch-contrastive ------------------------------------------------------------

@dataclass
class PatchSet:
    """Aligned anchor/positive/negative patch features.

    ``anchors`` and ``positives`` are (P, D); ``negatives`` is (K, P, D) with
    K >= 1 negative per anchor, index-aligned so row p of every matrix was
    extracted at the same spatial coordinates (recorded in ``coords``).
    """

    anchors: Tensor
    positives: Tensor
    negatives: Tensor
    coords: list

    def __post_init__(self):
        if self.anchors.shape != self.positives.shape:
            raise DimensionError("anchors/positives shapes differ")
        if self.negatives.ndim != 3 or self.negatives.shape[1:] != self.anchors.shape:
            raise DimensionError(f"negatives shape {self.negatives.shape} incompatible with anchors {self.anchors.shape}")
        if self.negatives.shape[0] < 1:
            raise DimensionError("at least one negative per anchor required")


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity over the trailing axis, zero-norm guarded."""
    dots = reduce_sum(a * b, axis=-1)
    na = reduce_sum(a * a, axis=-1)
    nb = reduce_sum(b * b, axis=-1)
    return dots / sqrt(na * nb + 1e-24)


def contrastive_loss(patches: PatchSet, tau: float) -> Tensor:
    """Mean InfoNCE over anchors: positives same-coordinate trusted patches,
    negatives the corrupted input's patches."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    pos = cosine_rows(patches.anchors, patches.positives) / tau  # (P,)
    negs = cosine_rows(patches.negatives, patches.anchors) / tau  # (K,P)
    denom = exp(pos) + reduce_sum(exp(negs), axis=0)
    return reduce_mean(log(denom) - pos)


def extract_patches(
    x: Tensor,
    patch: int,
    stride: Optional[int] = None,
    projector: Optional[Callable[[Tensor], Tensor]] = None,
) -> tuple[Tensor, list]:
    """Row-major patch grid flattened to vectors: (P, C*patch*patch).

    Accepts (C,H,W) or (1,C,H,W). ``projector`` (optional) maps the stacked
    patch matrix to the final feature rows; identity when omitted.
    """
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[0] != 1:
        raise DimensionError("extract_patches expects one image")
    stride = patch if stride is None else stride
    _, c, h, w = x.shape
    if patch > h or patch > w:
        raise DimensionError(f"patch {patch} larger than image {h}x{w}")
    coords = [(i, j) for i in range(0, h - patch + 1, stride) for j in range(0, w - patch + 1, stride)]
    if stride == patch and h % patch == 0 and w % patch == 0:
        gh, gw = h // patch, w // patch
        grid = x.reshape(c, gh, patch, gw, patch)
        vectors = grid.transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * patch * patch)
    else:
        rows = []
        for (i, j) in coords:
            cell = narrow(narrow(x, 2, i, patch), 3, j, patch)
            rows.append(cell.reshape(1, c * patch * patch))
        vectors = concat(rows, axis=0)
    if projector is not None:
        vectors = projector(vectors)
    return vectors, coords


# -- composed objectives ------------------------------------------------------------

def supervised_loss(
    pred: Tensor,
    target: Tensor,
    weights: LossWeights,
    extractor: FeatureExtractor,
) -> tuple[Tensor, dict]:
    """Weighted pixel + perceptual + spectral objective; parts reported too."""
    part_l1 = l1_loss(pred, target)
    part_per = perceptual_loss(pred, target, extractor)
    part_fft = fft_loss(pred, target)
    total = weights.w_l1 * part_l1 + weights.w_perceptual * part_per + weights.w_fft * part_fft
    parts = {"l1": part_l1.item(), "perceptual": part_per.item(), "fft": part_fft.item()}
    return total, parts


def unsupervised_loss(
    pred: Tensor,
    pseudo_target: Tensor,
    patches: Optional[PatchSet],
    weights: LossWeights,
    valid: bool = True,
) -> tuple[Tensor, dict]:
    """Consistency-to-pseudo-label plus contrastive term; masked samples
    contribute an off-tape zero (no gradient)."""
    if not valid:
        return Tensor(0.0), {"unsup_l1": 0.0, "contrastive": 0.0, "masked": 1.0}
    part_l1 = l1_loss(pred, pseudo_target)
    total = weights.w_l1 * part_l1
    parts = {"unsup_l1": part_l1.item(), "contrastive": 0.0, "masked": 0.0}
    if patches is not None and weights.w_contrastive > 0:
        part_cr = contrastive_loss(patches, weights.temperature)
        total = total + weights.w_contrastive * part_cr
        parts["contrastive"] = part_cr.item()
    return total, parts
