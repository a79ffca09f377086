"""Linear-attention image restorer.

A U-shaped encoder/decoder whose basic unit is a dual-attention block:
a value-refined linear-attention branch for long-range spatial structure in
parallel with a gated channel-attention branch, followed by a gated
directional feed-forward stage. Both non-residual branches end in
zero-initialized 1x1 projections so a freshly initialized block is the
identity map and training starts near it.

Parameters live in a flat ``{path: np.ndarray}`` store; forwards take the
store wrapped into Tensors (see :func:`wrap_params`) so one step's tape never
aliases another's.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .tensor import (
    ConfigError,
    DimensionError,
    Tensor,
    clip01,
    conv2d,
    depthwise_conv2d,
    elu,
    global_avg_pool,
    matmul,
    narrow,
    relu,
    sigmoid,
    upsample2x,
)


@dataclass
class ModelConfig:
    stages: int = 2
    base_dim: int = 8
    blocks_per_stage: int = 1
    heads: int = 1
    ffn_expand: int = 2
    attn_eps: float = 1e-6
    in_channels: int = 3
    gate_reduction: int = 2
    refine_kernel: int = 3

    def validate(self) -> None:
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if self.base_dim % 2:
            raise ConfigError("base_dim must be even")
        if self.attn_eps <= 0:
            raise ConfigError("attn_eps must be > 0")
        if self.refine_kernel % 2 == 0:
            raise ConfigError("refine_kernel must be odd")
        for s in range(self.stages):
            dim = self.base_dim * (2 ** s)
            if dim % self.heads:
                raise ConfigError(f"heads={self.heads} does not divide dim {dim} at level {s}")
            if dim % self.gate_reduction:
                raise ConfigError(f"gate_reduction={self.gate_reduction} does not divide dim {dim}")
            if (dim * self.ffn_expand) % 2:
                raise ConfigError("expanded ffn channels must be even")

    def level_dim(self, level: int) -> int:
        return self.base_dim * (2 ** level)


def _uniform(rng, fan_in: int, shape, dtype) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _block_param_init(rng, dim: int, cfg: ModelConfig, dtype) -> dict[str, np.ndarray]:
    k = cfg.refine_kernel
    hidden = dim // cfg.gate_reduction
    ch = dim * cfg.ffn_expand // 2
    return {
        "attn.wq": _uniform(rng, dim, (dim, dim), dtype),
        "attn.wk": _uniform(rng, dim, (dim, dim), dtype),
        "attn.wv": _uniform(rng, dim, (dim, dim), dtype),
        "attn.refine": _uniform(rng, k * k, (dim, k, k), dtype),
        "attn.out": np.zeros((dim, dim), dtype=dtype),
        "cgate.w1": _uniform(rng, dim, (dim, hidden), dtype),
        "cgate.w2": _uniform(rng, hidden, (hidden, dim), dtype),
        "cgate.out": np.zeros((dim, dim, 1, 1), dtype=dtype),
        "ffn.expand": _uniform(rng, dim, (2 * ch, dim, 1, 1), dtype),
        "ffn.dwh": _uniform(rng, 3, (ch, 1, 3), dtype),
        "ffn.dwv": _uniform(rng, 3, (ch, 3, 1), dtype),
        "ffn.proj": np.zeros((dim, ch, 1, 1), dtype=dtype),
    }


def init_params(cfg: ModelConfig, rng, dtype=np.float64) -> dict[str, np.ndarray]:
    """Fresh parameter store. Branch output projections start at zero."""
    cfg.validate()
    gen = rng.generator if hasattr(rng, "generator") else rng
    params: dict[str, np.ndarray] = {}
    d0 = cfg.base_dim
    params["f_in.w"] = _uniform(gen, cfg.in_channels * 9, (d0, cfg.in_channels, 3, 3), dtype)
    for s in range(cfg.stages - 1):
        dim = cfg.level_dim(s)
        for b in range(cfg.blocks_per_stage):
            for name, arr in _block_param_init(gen, dim, cfg, dtype).items():
                params[f"enc{s}.blk{b}.{name}"] = arr
        params[f"down{s}.w"] = _uniform(gen, dim * 9, (2 * dim, dim, 3, 3), dtype)
    bdim = cfg.level_dim(cfg.stages - 1)
    for b in range(cfg.blocks_per_stage):
        for name, arr in _block_param_init(gen, bdim, cfg, dtype).items():
            params[f"bot.blk{b}.{name}"] = arr
    for s in range(cfg.stages - 1):
        dim = cfg.level_dim(s)
        params[f"up{s}.w"] = _uniform(gen, 2 * dim, (dim, 2 * dim, 1, 1), dtype)
        for b in range(cfg.blocks_per_stage):
            for name, arr in _block_param_init(gen, dim, cfg, dtype).items():
                params[f"dec{s}.blk{b}.{name}"] = arr
    params["f_out.w"] = _uniform(gen, d0 * 9, (cfg.in_channels, d0, 3, 3), dtype)
    return params


def wrap_params(store: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in store.items()}


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient per parameter after a backward pass (zeros where untouched)."""
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}


# -- attention ------------------------------------------------------------------

def linear_attention(query: Tensor, key: Tensor, value: Tensor, eps: float) -> Tensor:
    """Kernelized attention in linear association order.

    The 1+ELU feature map keeps queries/keys positive; the key-value summary
    K'^T V is built once, so cost grows linearly in token count instead of
    through an explicit token-by-token similarity matrix. Shapes are
    (..., T, d) / (..., T, c) with matching leading batch dims.
    """
    if eps <= 0:
        raise ConfigError("attention eps must be > 0")
    qp = elu(query) + 1.0
    kp = elu(key) + 1.0
    summary = matmul(kp.swapaxes(-1, -2), value)
    numer = matmul(qp, summary)
    ksum = kp.sum(axis=-2, keepdims=True)
    denom = matmul(qp, ksum.swapaxes(-1, -2)) + eps
    return numer / denom


def quadratic_attention_reference(query: np.ndarray, key: np.ndarray, value: np.ndarray, eps: float) -> np.ndarray:
    """Plain-numpy oracle that materializes the full TxT similarity matrix."""
    qp = np.where(query > 0, query, np.expm1(query)) + 1.0
    kp = np.where(key > 0, key, np.expm1(key)) + 1.0
    scores = qp @ np.swapaxes(kp, -1, -2)
    numer = scores @ value
    denom = scores.sum(axis=-1, keepdims=True) + eps
    return numer / denom


def _to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(n, h * w, c)


def _to_image(tokens: Tensor, h: int, w: int) -> Tensor:
    n, t, c = tokens.shape
    return tokens.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def attention_block(x: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Spatial branch: project, refine values with a depthwise conv, attend.

    The depthwise refinement counteracts the low-rank tendency of kernelized
    attention by mixing in local structure before the token summary.
    """
    n, c, h, w = x.shape
    tokens = _to_tokens(x)
    q = matmul(tokens, p["attn.wq"])
    k = matmul(tokens, p["attn.wk"])
    v = matmul(tokens, p["attn.wv"])
    v_img = _to_image(v, h, w)
    v_ref = v_img + depthwise_conv2d(v_img, p["attn.refine"])
    v = _to_tokens(v_ref)

    heads = cfg.heads
    if heads > 1:
        dh = c // heads
        q = q.reshape(n, h * w, heads, dh).transpose(0, 2, 1, 3)
        k = k.reshape(n, h * w, heads, dh).transpose(0, 2, 1, 3)
        v = v.reshape(n, h * w, heads, dh).transpose(0, 2, 1, 3)
        out = linear_attention(q, k, v, cfg.attn_eps)
        out = out.transpose(0, 2, 1, 3).reshape(n, h * w, c)
    else:
        out = linear_attention(q, k, v, cfg.attn_eps)
    out = matmul(out, p["attn.out"])
    return _to_image(out, h, w)


def channel_attention(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Squeeze-gate-scale: pooled descriptor -> two-layer gate -> rescale."""
    n, c, h, w = x.shape
    if w1.shape[0] != c or w2.shape[1] != c or w1.shape[1] != w2.shape[0]:
        raise DimensionError(f"channel_attention weights {w1.shape}/{w2.shape} do not fit {c} channels")
    z = global_avg_pool(x)
    gate = sigmoid(matmul(relu(matmul(z, w1)), w2))
    return x * gate.reshape(n, c, 1, 1)


def gated_directional_ffn(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Expand, split, filter one branch along rows and columns, gate, project."""
    expanded = conv2d(x, p["ffn.expand"])
    half = expanded.shape[1] // 2
    x1 = narrow(expanded, 1, 0, half)
    x2 = narrow(expanded, 1, half, half)
    directional = depthwise_conv2d(x1, p["ffn.dwh"]) + depthwise_conv2d(x1, p["ffn.dwv"])
    return conv2d(directional * x2, p["ffn.proj"])


def dual_attention_block(x: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Residual spatial+channel attention, then a residual feed-forward."""
    a = attention_block(x, p, cfg)
    g = conv2d(channel_attention(x, p["cgate.w1"], p["cgate.w2"]), p["cgate.out"])
    y = x + a + g
    return y + gated_directional_ffn(y, p)


def _block_view(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def encode(x: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig):
    """Input projection and encoder levels; returns (pre-bottleneck, skips)."""
    n, c, h, w = x.shape
    factor = 2 ** (cfg.stages - 1)
    if h % factor or w % factor:
        raise ConfigError(f"spatial extents {h}x{w} must be divisible by {factor}")
    t = conv2d(x, params["f_in.w"], stride=1, padding=1)
    skips = []
    for s in range(cfg.stages - 1):
        for b in range(cfg.blocks_per_stage):
            t = dual_attention_block(t, _block_view(params, f"enc{s}.blk{b}"), cfg)
        skips.append(t)
        t = conv2d(t, params[f"down{s}.w"], stride=2, padding=1)
    return t, skips


def restorer_forward(
    x: Tensor,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    clip_output: bool = False,
    want_features: bool = False,
):
    """Full restorer: encoder, bottleneck, mirrored decoder with skip addition.

    ``clip_output`` clamps to [0,1] and is meant for inference; training reads
    the raw output. ``want_features`` additionally returns the deepest
    pre-bottleneck feature map (the contrastive extractor's tap point).
    """
    t, skips = encode(x, params, cfg)
    features = t
    for b in range(cfg.blocks_per_stage):
        t = dual_attention_block(t, _block_view(params, f"bot.blk{b}"), cfg)
    for s in reversed(range(cfg.stages - 1)):
        t = conv2d(upsample2x(t), params[f"up{s}.w"])
        t = t + skips[s]
        for b in range(cfg.blocks_per_stage):
            t = dual_attention_block(t, _block_view(params, f"dec{s}.blk{b}"), cfg)
    y = conv2d(t, params["f_out.w"], stride=1, padding=1)
    if clip_output:
        y = clip01(y)
    return (y, features) if want_features else y


# -- checkpoint archive -----------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)  # fixed so archives are byte-stable


def _write_zip_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def save_arrays(path, arrays: Mapping[str, np.ndarray], header: dict) -> None:
    """Archive arrays as raw little-endian buffers plus a JSON header."""
    entries = {}
    blobs = {}
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries[name] = {"shape": list(arr.shape), "dtype": le.dtype.str}
        blobs[name] = le.tobytes()
    head = dict(header)
    head["entries"] = entries
    with zipfile.ZipFile(path, "w") as zf:
        _write_zip_entry(zf, "header.json", json.dumps(head, sort_keys=True).encode())
        for name in sorted(blobs):
            _write_zip_entry(zf, f"data/{name}.bin", blobs[name])


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("header.json"))
        arrays = {}
        for name, meta in header["entries"].items():
            buf = zf.read(f"data/{name}.bin")
            arr = np.frombuffer(buf, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"])
            arrays[name] = arr.copy()
    return arrays, header


def save_checkpoint(path, params: Mapping[str, np.ndarray], cfg: ModelConfig, extra: dict | None = None) -> None:
    header = {"kind": "restorer-checkpoint", "model_config": asdict(cfg)}
    if extra:
        header.update(extra)
    save_arrays(path, params, header)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    arrays, header = load_arrays(path)
    cfg = ModelConfig(**header["model_config"])
    return arrays, cfg, header
