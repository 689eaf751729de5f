"""A small deterministic diffusion transformer.

L pre-norm blocks of full spatial-temporal self-attention over the flattened
(frames x tokens) sequence, single-token cross-attention on a conditioning
vector, and a 4x FFN, with scalar scale/shift/gate modulation derived from the
timestep embedding. Every matmul routes through an overridable GEMM hook so
the runtime can swap in cached, pruned, or quantized paths; with all hooks at
their defaults the forward pass is bit-identical to the plain model.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from typing import Callable, List, Optional

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, attention, mm

# Weight-bearing GEMM sites in one block, in execution order. These are the
# sites eligible for weight quantization and channel balancing.
QUANT_SITES = (
    "sta_q", "sta_k", "sta_v", "sta_o",
    "ca_q", "ca_k", "ca_v", "ca_o",
    "ffn1", "ffn2",
)

FFN_RATIO = 4


@dataclass(frozen=True)
class DiTConfig:
    num_blocks: int = 8
    model_dim: int = 64
    num_heads: int = 4
    tokens_per_frame: int = 16
    frames: int = 4
    cond_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        vals = (self.num_blocks, self.model_dim, self.num_heads,
                self.tokens_per_frame, self.frames, self.cond_dim)
        if any(v <= 0 for v in vals):
            raise ConfigurationError("all model dimensions must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def seq_len(self) -> int:
        return self.tokens_per_frame * self.frames


@dataclass
class BlockWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    sta_q: np.ndarray
    sta_k: np.ndarray
    sta_v: np.ndarray
    sta_o: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    ca_q: np.ndarray
    ca_k: np.ndarray
    ca_v: np.ndarray
    ca_o: np.ndarray
    ln3_g: np.ndarray
    ln3_b: np.ndarray
    ffn1: np.ndarray
    ffn2: np.ndarray
    mod: np.ndarray  # (d, 6): shift/scale/gate for STA and FFN


@dataclass
class LayerHooks:
    """Overridable execution hooks; all-None means the plain forward pass."""

    # (layer, input) -> replacement block output, or None to compute normally
    before_block: Optional[Callable[[int, Tensor], Optional[Tensor]]] = None
    # (layer, realized output) -> None
    after_block: Optional[Callable[[int, Tensor], None]] = None
    # (layer, site, activation, fp_weight) -> product
    gemm: Optional[Callable[[int, str, np.ndarray, np.ndarray], np.ndarray]] = None


@dataclass
class DiTModel:
    cfg: DiTConfig
    blocks: List[BlockWeights]
    head_w: np.ndarray
    head_b: np.ndarray


def _normal(rng, shape, fan_in):
    return rng.normal(0.0, fan_in ** -0.5, size=shape).astype(np.float32)


def init_model(cfg: DiTConfig) -> DiTModel:
    """Seeded deterministic init; identical seeds give identical weights."""
    rng = np.random.default_rng(cfg.seed)
    d, c, hdim = cfg.model_dim, cfg.cond_dim, FFN_RATIO * cfg.model_dim
    blocks = []
    for _ in range(cfg.num_blocks):
        blocks.append(BlockWeights(
            ln1_g=np.ones(d, dtype=np.float32), ln1_b=np.zeros(d, dtype=np.float32),
            sta_q=_normal(rng, (d, d), d), sta_k=_normal(rng, (d, d), d),
            sta_v=_normal(rng, (d, d), d), sta_o=_normal(rng, (d, d), d),
            ln2_g=np.ones(d, dtype=np.float32), ln2_b=np.zeros(d, dtype=np.float32),
            ca_q=_normal(rng, (d, d), d), ca_k=_normal(rng, (c, d), c),
            ca_v=_normal(rng, (c, d), c), ca_o=_normal(rng, (d, d), d),
            ln3_g=np.ones(d, dtype=np.float32), ln3_b=np.zeros(d, dtype=np.float32),
            ffn1=_normal(rng, (d, hdim), d), ffn2=_normal(rng, (hdim, d), hdim),
            mod=_normal(rng, (d, 6), d),
        ))
    head_w = _normal(rng, (d, d), d)
    head_b = _normal(rng, (d,), d)
    return DiTModel(cfg, blocks, head_w, head_b)


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if emb.size < dim:
        emb = np.concatenate([emb, np.zeros(dim - emb.size)])
    return emb.astype(np.float32)


def _ln(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=-1, keepdims=True)
    out = (x64 - mean) / np.sqrt(var + 1e-5) * g.astype(np.float64) + b.astype(np.float64)
    return out.astype(np.float32)


def _gelu(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    return (0.5 * x64 * (1.0 + erf(x64 / np.sqrt(2.0)))).astype(np.float32)


def _mha(q: np.ndarray, k: np.ndarray, v: np.ndarray, num_heads: int) -> np.ndarray:
    dh = q.shape[1] // num_heads
    parts = []
    for h in range(num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        parts.append(attention(Tensor(q[:, sl]), Tensor(k[:, sl]), Tensor(v[:, sl])).data)
    return np.concatenate(parts, axis=1)


def block_forward(
    x: Tensor,
    cond: Tensor,
    t_emb: Tensor,
    weights: BlockWeights,
    layer: int = 0,
    hooks: Optional[LayerHooks] = None,
    num_heads: int = 1,
) -> Tensor:
    """One transformer block; residual additions stay in full precision."""
    xv = x.data
    if xv.ndim != 2 or xv.shape[1] != weights.sta_q.shape[0]:
        raise DimensionError(f"block input shape {xv.shape}")
    cv = cond.data.reshape(1, -1)
    if cv.shape[1] != weights.ca_k.shape[0]:
        raise DimensionError(f"cond shape {cond.shape}")
    gemm = (hooks.gemm if hooks and hooks.gemm else
            lambda _l, _s, a, w: mm(a, w))

    m = mm(t_emb.data.reshape(1, -1), weights.mod)[0]
    shift_sta, scale_sta, gate_sta, shift_ffn, scale_ffn, gate_ffn = (
        np.float32(m[i]) for i in range(6))

    h1 = _ln(xv, weights.ln1_g, weights.ln1_b) * (np.float32(1.0) + scale_sta) + shift_sta
    q = gemm(layer, "sta_q", h1, weights.sta_q)
    k = gemm(layer, "sta_k", h1, weights.sta_k)
    v = gemm(layer, "sta_v", h1, weights.sta_v)
    att = _mha(q, k, v, num_heads)
    xv = xv + gate_sta * gemm(layer, "sta_o", att, weights.sta_o)

    h2 = _ln(xv, weights.ln2_g, weights.ln2_b)
    q2 = gemm(layer, "ca_q", h2, weights.ca_q)
    k2 = gemm(layer, "ca_k", cv, weights.ca_k)
    v2 = gemm(layer, "ca_v", cv, weights.ca_v)
    ca = _mha(q2, k2, v2, num_heads)
    xv = xv + gemm(layer, "ca_o", ca, weights.ca_o)

    h3 = _ln(xv, weights.ln3_g, weights.ln3_b) * (np.float32(1.0) + scale_ffn) + shift_ffn
    hid = _gelu(gemm(layer, "ffn1", h3, weights.ffn1))
    xv = xv + gate_ffn * gemm(layer, "ffn2", hid, weights.ffn2)
    return Tensor(xv, frame_axis=x.frame_axis)


def predict_noise(
    x_t: Tensor,
    t: int,
    cond: Tensor,
    model: DiTModel,
    hooks: Optional[LayerHooks] = None,
    total_steps: Optional[int] = None,
) -> Tensor:
    """Full forward pass: L blocks plus a linear head; shape-preserving."""
    if t < 0 or (total_steps is not None and t >= total_steps):
        raise ValueError(f"timestep {t} out of range")
    cfg = model.cfg
    if x_t.data.shape != (cfg.frames, cfg.tokens_per_frame, cfg.model_dim):
        raise DimensionError(f"latent shape {x_t.data.shape}")
    x = Tensor(x_t.data.reshape(cfg.seq_len, cfg.model_dim))
    t_emb = Tensor(timestep_embedding(t, cfg.model_dim))

    for l in range(cfg.num_blocks):
        replacement = hooks.before_block(l, x) if hooks and hooks.before_block else None
        if replacement is not None:
            x = replacement
        else:
            x = block_forward(x, cond, t_emb, model.blocks[l], l, hooks, cfg.num_heads)
        if hooks and hooks.after_block:
            hooks.after_block(l, x)

    out = mm(x.data, model.head_w) + model.head_b
    return Tensor(out.reshape(cfg.frames, cfg.tokens_per_frame, cfg.model_dim),
                  frame_axis=0)


# ---------------------------------------------------------------------------
# Compute accounting (raw MACs; bit weighting happens in the scheduler)


def block_mac_cost(cfg: DiTConfig):
    from .schedule import BlockCost

    s, d, c = cfg.seq_len, cfg.model_dim, cfg.cond_dim
    quantizable = (
        4 * s * d * d          # STA projections
        + 2 * s * d * d        # CA query and output projections
        + 2 * c * d            # CA key/value projections of the cond token
        + 2 * FFN_RATIO * s * d * d  # FFN up and down
    )
    fp_always = 2 * s * s * d + 2 * s * d + 6 * d
    return BlockCost(quantizable=quantizable, fp_always=fp_always)


def head_mac_cost(cfg: DiTConfig) -> int:
    return cfg.seq_len * cfg.model_dim * cfg.model_dim


# ---------------------------------------------------------------------------
# Weight snapshot serialization: config header line + little-endian float32
# payload in declaration order.


def _weight_arrays(model: DiTModel):
    for blk in model.blocks:
        for f in fields(BlockWeights):
            yield getattr(blk, f.name)
    yield model.head_w
    yield model.head_b


def save_weights(model: DiTModel, path):
    header = json.dumps(model.cfg.__dict__, sort_keys=True).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in _weight_arrays(model):
            fh.write(arr.astype("<f4").tobytes())


def load_weights(path) -> DiTModel:
    with open(path, "rb") as fh:
        cfg = DiTConfig(**json.loads(fh.readline().decode()))
        model = init_model(cfg)
        for arr in _weight_arrays(model):
            raw = fh.read(arr.size * 4)
            if len(raw) != arr.size * 4:
                raise ValueError("truncated weight snapshot")
            arr[...] = np.frombuffer(raw, dtype="<f4").reshape(arr.shape)
    return model


def weight_checksum(model: DiTModel) -> str:
    digest = hashlib.sha256()
    for arr in _weight_arrays(model):
        digest.update(arr.astype("<f4").tobytes())
    return digest.hexdigest()
