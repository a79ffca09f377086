"""Paired flare data synthesis and view augmentation.

The compositing recipe: decode both source images to linear light with a
shared random gamma, geometrically and photometrically perturb the flare,
perturb the background (RGB gain + Gaussian noise), add the flare on top,
clip, and re-encode. The flare-free target is the composite minus the flare,
so targets keep the background noise but never exceed the input (flare only
adds light; the flare layer is clamped non-negative after its intensity
offset for exactly this reason).

Everything is a pure function of its inputs and an :class:`Rng`, so the same
seed reproduces byte-identical datasets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .tensor import DimensionError


class DomainError(ValueError):
    """Input values are outside the documented domain (e.g. not in [0,1])."""


class Rng:
    """Counter-based random stream (Philox) with derivable child streams.

    ``child(*key)`` derives an independent, reproducible stream; per-purpose
    children keep draw order stable when unrelated pipeline stages are added
    or removed.
    """

    ALGORITHM = "philox"

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in _path)
        self.generator = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(entropy=(self.seed,) + self.path))
        )

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(key))

    def uniform(self, lo, hi, size=None):
        return self.generator.uniform(lo, hi, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size=size)

    def chisquare(self, df: int):
        return float(self.generator.chisquare(df))

    def beta(self, a: float, b: float) -> float:
        return float(self.generator.beta(a, b))

    def random(self, size=None):
        return self.generator.random(size=size)

    def integers(self, lo, hi, size=None):
        return self.generator.integers(lo, hi, size=size)

    def state(self) -> dict:
        return {"seed": self.seed, "path": list(self.path), "bg": _jsonable(self.generator.bit_generator.state)}

    def restore(self, state: dict) -> None:
        self.generator.bit_generator.state = _from_jsonable(state["bg"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__nd__": obj.tolist(), "dtype": obj.dtype.str}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__nd__" in obj:
            return np.asarray(obj["__nd__"], dtype=np.dtype(obj["dtype"]))
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


@dataclass
class AugmentationParams:
    """Sampling ranges for the synthesis pipeline.

    Geometric ranges are stated at the 512 px reference scale; translation is
    rescaled proportionally to the actual canvas when applied, but the sampled
    value always lies in the stated range.
    """

    gamma_range: tuple = (1.8, 2.2)
    rotation_range: tuple = (0.0, 2.0 * math.pi)
    translation_range: tuple = (-300.0, 300.0)
    shear_range: tuple = (-20.0, 20.0)  # degrees
    scale_range: tuple = (0.8, 1.5)
    blur_sigma_range: tuple = (0.1, 3.0)
    flare_offset_range: tuple = (-0.02, 0.02)
    bg_rgb_scale_range: tuple = (0.5, 1.2)
    noise_var_scale: float = 0.01  # variance = scale * chi^2(1 dof) draw
    flip_prob: float = 0.5
    jitter_range: tuple = (0.8, 1.2)
    reference_size: int = 512

    def validate(self) -> None:
        for name in (
            "gamma_range",
            "rotation_range",
            "translation_range",
            "shear_range",
            "scale_range",
            "blur_sigma_range",
            "flare_offset_range",
            "bg_rgb_scale_range",
            "jitter_range",
        ):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise DomainError(f"{name}: lower bound {lo} must be < upper bound {hi}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise DomainError("flip_prob must be in [0,1]")


@dataclass
class LabeledPair:
    """Flare-corrupted input and its flare-free ground truth, both in [0,1]."""

    input: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        if self.input.shape != self.target.shape:
            raise DimensionError("input/target shapes differ")


@dataclass
class UnlabeledViews:
    """Pixel-aligned weak and strong views of one unlabeled image."""

    weak: np.ndarray
    strong: np.ndarray
    sample_id: str
    flipped: bool = False


def _check_unit_range(arr: np.ndarray, name: str) -> None:
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DomainError(f"{name} values must lie in [0,1]")


def _affine_matrix(rotation, shear_deg, scale, flip, center, translation):
    """Forward map p -> A(p - c) + c + t in (row, col) coordinates."""
    ct, st = math.cos(rotation), math.sin(rotation)
    rot = np.array([[ct, -st], [st, ct]])
    sh = math.tan(math.radians(shear_deg))
    shear = np.array([[1.0, sh], [0.0, 1.0]])
    flip_m = np.diag([1.0, -1.0 if flip else 1.0])
    a = rot @ shear @ flip_m * scale
    return a, np.asarray(center), np.asarray(translation)


def _apply_affine(img: np.ndarray, a: np.ndarray, center: np.ndarray, translation: np.ndarray) -> np.ndarray:
    # scipy maps output coords through (matrix, offset) to input coords
    inv = np.linalg.inv(a)
    offset = center - inv @ (center + translation)
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        out[c] = ndimage.affine_transform(img[c], inv, offset=offset, order=1, mode="constant", cval=0.0)
    return out


def random_flare_transform(flare: np.ndarray, params: AugmentationParams, rng: Rng) -> np.ndarray:
    """Rotation, translation (rescaled to canvas), shear, scale and flip."""
    h, w = flare.shape[-2:]
    rotation = float(rng.uniform(*params.rotation_range))
    t_ref = rng.uniform(*params.translation_range, size=2)
    shear = float(rng.uniform(*params.shear_range))
    scale = float(rng.uniform(*params.scale_range))
    flip = bool(rng.random() < params.flip_prob)
    px_scale = min(h, w) / params.reference_size
    a, c, t = _affine_matrix(rotation, shear, scale, flip, ((h - 1) / 2.0, (w - 1) / 2.0), t_ref * px_scale)
    return _apply_affine(flare, a, c, t)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        out[c] = ndimage.gaussian_filter(img[c], sigma=sigma, mode="nearest")
    return out


def synthesize_pair(
    background: np.ndarray,
    flare: np.ndarray,
    params: AugmentationParams,
    rng: Rng,
    apply_geometric: bool = True,
    apply_blur: bool = True,
    apply_photometric: bool = True,
    apply_noise: bool = True,
    return_flare: bool = False,
):
    """Composite one labeled pair; see the module docstring for the recipe."""
    if background.shape != flare.shape:
        raise DimensionError(f"background {background.shape} vs flare {flare.shape}")
    _check_unit_range(background, "background")
    _check_unit_range(flare, "flare")
    params.validate()

    gamma = float(rng.uniform(*params.gamma_range))
    bg = np.power(background.astype(np.float64), gamma)
    fl = np.power(flare.astype(np.float64), gamma)

    if apply_geometric:
        fl = random_flare_transform(fl, params, rng)
    if apply_blur:
        fl = gaussian_blur(fl, float(rng.uniform(*params.blur_sigma_range)))
    if apply_photometric:
        gains = rng.uniform(*params.jitter_range, size=(3, 1, 1))
        offset = float(rng.uniform(*params.flare_offset_range))
        fl = fl * gains + offset
        bg = bg * rng.uniform(*params.bg_rgb_scale_range, size=(3, 1, 1))
    fl = np.maximum(fl, 0.0)  # flare is additive light
    if apply_noise:
        var = params.noise_var_scale * rng.chisquare(1)
        bg = bg + rng.normal(0.0, math.sqrt(var), size=bg.shape)

    input_lin = np.clip(bg + fl, 0.0, 1.0)
    target_lin = np.clip(input_lin - fl, 0.0, 1.0)
    inv = 1.0 / gamma
    pair = LabeledPair(np.power(input_lin, inv), np.power(target_lin, inv))
    return (pair, fl) if return_flare else pair


# -- view augmentation -----------------------------------------------------------

def hflip(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[..., ::-1])


def weak_augment(x: np.ndarray, rng: Rng) -> tuple[np.ndarray, bool]:
    """Identity or horizontal flip (p=0.5); the flip flag is surfaced so the
    strong view and any stored pseudo-label can share the orientation."""
    _check_unit_range(x, "image")
    if rng.random() < 0.5:
        return hflip(x), True
    return x.copy(), False


LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def to_grayscale(x: np.ndarray) -> np.ndarray:
    luma = np.tensordot(LUMA_WEIGHTS, x, axes=(0, 0))
    return np.broadcast_to(luma, x.shape).copy()


def strong_augment(
    x: np.ndarray,
    rng: Rng,
    jitter_range: tuple = (0.8, 1.2),
    grayscale_prob: float = 0.2,
    blur_sigma_range: tuple = (0.1, 2.0),
) -> np.ndarray:
    """Photometric-only strong view: color jitter, random grayscale, blur.

    No pixel ever moves, so the strong view stays aligned with the weak one.
    """
    _check_unit_range(x, "image")
    out = x.astype(np.float64)
    b, c, s = (float(rng.uniform(*jitter_range)) for _ in range(3))
    out = out * b
    out = (out - out.mean()) * c + out.mean()
    luma = np.tensordot(LUMA_WEIGHTS, out, axes=(0, 0))[None]
    out = luma + (out - luma) * s
    if rng.random() < grayscale_prob:
        out = to_grayscale(out)
    sigma = float(rng.uniform(*blur_sigma_range))
    out = gaussian_blur(out, sigma)
    return np.clip(out, 0.0, 1.0)


def mixup(a: LabeledPair, b: LabeledPair, alpha_mix: float, rng: Rng, lam: Optional[float] = None) -> LabeledPair:
    """Convex blend of two labeled pairs with one Beta(alpha,alpha) weight."""
    if a.input.shape != b.input.shape:
        raise DimensionError("mixup operands must share shapes")
    if alpha_mix <= 0:
        raise DomainError("alpha_mix must be > 0")
    if lam is None:
        lam = rng.beta(alpha_mix, alpha_mix)
    return LabeledPair(
        lam * a.input + (1.0 - lam) * b.input,
        lam * a.target + (1.0 - lam) * b.target,
    )


# -- procedural sources -----------------------------------------------------------

def procedural_background(rng: Rng, size: int) -> np.ndarray:
    """Dim night-scene stand-in: gradient sky, colored shapes, faint texture."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    top = rng.uniform(0.02, 0.25, size=3)
    bottom = rng.uniform(0.05, 0.45, size=3)
    img = top[:, None, None] * (1 - yy)[None] + bottom[:, None, None] * yy[None]
    for _ in range(int(rng.integers(4, 9))):
        cy, cx = rng.uniform(0.1, 0.9, size=2) * size
        ry, rx = rng.uniform(0.05, 0.3, size=2) * size
        angle = float(rng.uniform(0, math.pi))
        color = rng.uniform(0.05, 0.7, size=3)
        ca, sa = math.cos(angle), math.sin(angle)
        u = (yy * size - cy) * ca + (xx * size - cx) * sa
        v = -(yy * size - cy) * sa + (xx * size - cx) * ca
        if rng.random() < 0.5:
            mask = ((u / ry) ** 2 + (v / rx) ** 2) <= 1.0
        else:
            mask = (np.abs(u) <= ry) & (np.abs(v) <= rx)
        img = np.where(mask[None], 0.35 * img + 0.65 * color[:, None, None], img)
    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def procedural_flare(rng: Rng, size: int) -> np.ndarray:
    """Bright core, radial streaks and a faint halo with a warm tint."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.25, 0.75, size=2) * size
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)

    core_sigma = float(rng.uniform(0.05, 0.12)) * size
    canvas = float(rng.uniform(0.7, 1.0)) * np.exp(-0.5 * (r / core_sigma) ** 2)

    n_rays = int(rng.integers(3, 8))
    base_angle = float(rng.uniform(0, 2 * math.pi))
    for k in range(n_rays):
        theta = base_angle + 2 * math.pi * k / n_rays + float(rng.uniform(-0.2, 0.2))
        ca, sa = math.cos(theta), math.sin(theta)
        d_perp = np.abs(dy * sa - dx * ca)
        d_along = dy * ca + dx * sa
        width = float(rng.uniform(0.6, 1.6))
        length = float(rng.uniform(0.3, 0.7)) * size
        ray = np.exp(-0.5 * (d_perp / width) ** 2) * np.exp(-0.5 * (d_along / length) ** 2)
        ray *= float(rng.uniform(0.4, 0.9)) * (d_along > 0)
        canvas = np.maximum(canvas, ray)

    halo_r = float(rng.uniform(0.15, 0.35)) * size
    halo_w = float(rng.uniform(0.02, 0.05)) * size
    canvas = np.maximum(canvas, float(rng.uniform(0.1, 0.3)) * np.exp(-0.5 * ((r - halo_r) / halo_w) ** 2))

    tint = np.array([1.0, float(rng.uniform(0.7, 1.0)), float(rng.uniform(0.4, 0.9))])
    return np.clip(tint[:, None, None] * canvas[None], 0.0, 1.0)


# -- ground-truth region masks -----------------------------------------------------

def flare_region_masks(
    flare_linear: np.ndarray,
    glare_threshold: float = 0.05,
    elongation_threshold: float = 3.0,
    min_area: int = 4,
) -> tuple[np.ndarray, np.ndarray]:
    """Binary (glare, streak) masks from the composited flare layer.

    Glare is every pixel the flare meaningfully brightened. Streaks are the
    thin structures of that region: whatever a morphological opening removes,
    kept component-wise when elongated (second-moment axis ratio above
    ``elongation_threshold``). Opening first is what lets rays be found even
    though they connect to the bright core as one blob.
    """
    glare = flare_linear.max(axis=0) > glare_threshold
    bulky = ndimage.binary_opening(glare, structure=np.ones((3, 3), dtype=bool), iterations=2)
    residue = glare & ~bulky
    streak = np.zeros_like(glare)
    labels, count = ndimage.label(residue)
    for idx in range(1, count + 1):
        ys, xs = np.nonzero(labels == idx)
        if ys.size < min_area:
            continue
        coords = np.stack([ys, xs]).astype(np.float64)
        coords -= coords.mean(axis=1, keepdims=True)
        cov = coords @ coords.T / ys.size
        evals = np.linalg.eigvalsh(cov)
        minor, major = max(evals[0], 1e-6), max(evals[1], 1e-6)
        if math.sqrt(major / minor) >= elongation_threshold:
            streak[labels == idx] = True
    return glare, streak
