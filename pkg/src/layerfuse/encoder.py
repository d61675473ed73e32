"""Token/region embedding and the single- or dual-stream transformer encoder.

Everything here runs on padded batches: token ids ``[B, M]`` and region inputs
``[B, N, F+7]`` with boolean masks marking real entries.  Per-layer outputs are
kept so fusion can see layers 0..L, layer 0 being the embedding output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

GEOMETRY_DIM = 7


@dataclass
class EncoderConfig:
    d: int = 64
    L: int = 4
    heads: int = 4
    ffn_mult: int = 4
    vocab_size: int = 61
    max_tokens: int = 16
    region_feature_dim: int = 14
    stream: str = "single"
    dual_split: tuple[int, int, int] | None = None

    def __post_init__(self):
        for name in ("d", "L", "heads", "ffn_mult", "vocab_size", "max_tokens", "region_feature_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"encoder.{name} must be >= 1 (got {getattr(self, name)})")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.stream not in ("single", "dual"):
            raise ValueError(f"stream must be 'single' or 'dual', got {self.stream!r}")
        if self.stream == "dual":
            if self.dual_split is None:
                self.dual_split = default_dual_split(self.L)
            self.dual_split = tuple(int(x) for x in self.dual_split)
            t, v, c = self.dual_split
            if min(t, v) < 0 or c < 1 or t + v + c != self.L:
                raise ValueError(f"dual_split {self.dual_split} must be (>=0, >=0, >=1) summing to L={self.L}")
        elif self.dual_split is not None:
            self.dual_split = tuple(int(x) for x in self.dual_split)

    @property
    def layer_kinds(self) -> list[str]:
        """Role of each of layers 1..L: 'text', 'vision' or 'joint'."""
        if self.stream == "single":
            return ["joint"] * self.L
        t, v, c = self.dual_split
        return ["text"] * t + ["vision"] * v + ["joint"] * c


def default_dual_split(L: int) -> tuple[int, int, int]:
    cross = max(1, L // 3)
    rest = L - cross
    return (rest + 1) // 2, rest // 2, cross


def encoder_param_spec(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, h = cfg.d, cfg.d * cfg.ffn_mult
    spec = [
        ("encoder.embed.token.weight", (cfg.vocab_size, d), "glorot-uniform"),
        ("encoder.embed.position.weight", (cfg.max_tokens, d), "glorot-uniform"),
        ("encoder.embed.region.weight", (cfg.region_feature_dim + GEOMETRY_DIM, d), "glorot-uniform"),
        ("encoder.embed.region.bias", (d,), "zeros"),
        ("encoder.embed.token_norm.gamma", (d,), "ones"),
        ("encoder.embed.token_norm.beta", (d,), "zeros"),
        ("encoder.embed.region_norm.gamma", (d,), "ones"),
        ("encoder.embed.region_norm.beta", (d,), "zeros"),
    ]
    for l in range(1, cfg.L + 1):
        p = f"encoder.layer{l:02d}."
        spec += [
            (p + "norm1.gamma", (d,), "ones"),
            (p + "norm1.beta", (d,), "zeros"),
            (p + "attn.qkv.weight", (d, 3 * d), "glorot-uniform"),
            (p + "attn.qkv.bias", (3 * d,), "zeros"),
            (p + "attn.out.weight", (d, d), "glorot-uniform"),
            (p + "attn.out.bias", (d,), "zeros"),
            (p + "norm2.gamma", (d,), "ones"),
            (p + "norm2.beta", (d,), "zeros"),
            (p + "ffn.in.weight", (d, h), "glorot-uniform"),
            (p + "ffn.in.bias", (h,), "zeros"),
            (p + "ffn.out.weight", (h, d), "glorot-uniform"),
            (p + "ffn.out.bias", (d,), "zeros"),
        ]
    return spec


@dataclass
class Batch:
    """Padded inputs for a group of samples."""

    token_ids: np.ndarray      # [B, M] int
    token_mask: np.ndarray     # [B, M] bool
    region_inputs: np.ndarray  # [B, N, F+7]
    region_mask: np.ndarray    # [B, N] bool
    targets: np.ndarray        # [B, N] IoU with the ground-truth box, 0 on padding

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


def region_inputs(sample) -> np.ndarray:
    return np.array([np.concatenate([r.features, r.box.geometry()]) for r in sample.regions])


def make_batch(samples: Sequence) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    B = len(samples)
    M = max(len(s.tokens) for s in samples)
    N = max(s.n for s in samples)
    if any(s.n == 0 for s in samples):
        raise ValueError("sample without regions")
    F = len(samples[0].regions[0].features) + GEOMETRY_DIM
    ids = np.zeros((B, M), dtype=np.int64)
    tmask = np.zeros((B, M), dtype=bool)
    reg = np.zeros((B, N, F))
    rmask = np.zeros((B, N), dtype=bool)
    targets = np.zeros((B, N))
    for b, s in enumerate(samples):
        ids[b, :len(s.tokens)] = s.tokens
        tmask[b, :len(s.tokens)] = True
        reg[b, :s.n] = region_inputs(s)
        rmask[b, :s.n] = True
        targets[b, :s.n] = s.iou_targets()
    return Batch(ids, tmask, reg, rmask, targets)


def check_batch(batch: Batch, cfg: EncoderConfig) -> None:
    if batch.token_ids.shape[1] > cfg.max_tokens:
        raise ValueError(f"command of {batch.token_ids.shape[1]} tokens exceeds max_tokens={cfg.max_tokens}")
    ids = batch.token_ids[batch.token_mask]
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    if batch.region_inputs.shape[-1] != cfg.region_feature_dim + GEOMETRY_DIM:
        raise ValueError(f"region inputs have {batch.region_inputs.shape[-1]} columns, "
                         f"expected {cfg.region_feature_dim + GEOMETRY_DIM}")
    if not batch.region_mask.any(axis=1).all():
        raise ValueError("every sample needs at least one region")
    if not batch.token_mask.any(axis=1).all():
        raise ValueError("every sample needs at least one token")


def embed(batch: Batch, p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Layer-0 representations: ``(tokens [B, M, d], regions [B, N, d])``."""
    M = batch.token_ids.shape[1]
    tok = ag.take(p["encoder.embed.token.weight"], batch.token_ids)
    pos = ag.slice_(p["encoder.embed.position.weight"], slice(0, M))
    tok = ag.layer_norm(tok + pos, p["encoder.embed.token_norm.gamma"], p["encoder.embed.token_norm.beta"])
    reg = batch.region_inputs @ p["encoder.embed.region.weight"] + p["encoder.embed.region.bias"]
    reg = ag.layer_norm(reg, p["encoder.embed.region_norm.gamma"], p["encoder.embed.region_norm.beta"])
    return tok, reg


def encoder_layer(x: Tensor, key_mask: np.ndarray, p: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Pre-norm block: x + MHA(LN(x)), then + FFN(LN(.)). ``key_mask`` is [B, S] bool."""
    B, S, d = x.shape
    dh = d // heads
    h = ag.layer_norm(x, p[prefix + "norm1.gamma"], p[prefix + "norm1.beta"])
    qkv = h @ p[prefix + "attn.qkv.weight"] + p[prefix + "attn.qkv.bias"]
    qkv = ag.transpose(ag.reshape(qkv, (B, S, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = ag.softmax(scores, axis=-1, mask=key_mask[:, None, None, :])
    ctx = ag.reshape(ag.transpose(attn @ v, (0, 2, 1, 3)), (B, S, d))
    x = x + (ctx @ p[prefix + "attn.out.weight"] + p[prefix + "attn.out.bias"])
    h = ag.layer_norm(x, p[prefix + "norm2.gamma"], p[prefix + "norm2.beta"])
    h = ag.gelu(h @ p[prefix + "ffn.in.weight"] + p[prefix + "ffn.in.bias"])
    return x + (h @ p[prefix + "ffn.out.weight"] + p[prefix + "ffn.out.bias"])


def encode(batch: Batch, cfg: EncoderConfig, p: dict[str, Tensor]) -> tuple[list[Tensor], list[Tensor]]:
    """Run the encoder. Returns per-layer ``(token_layers, region_layers)``, each of length L+1.

    Dual stream runs text-only layers, then vision-only layers, then joint
    layers over the concatenated sequence.  While one stream is idle its
    entries repeat its latest output, so both lists stay length L+1.
    """
    check_batch(batch, cfg)
    tok, reg = embed(batch, p)
    tok_layers, reg_layers = [tok], [reg]
    M = tok.shape[1]
    joint_mask = np.concatenate([batch.token_mask, batch.region_mask], axis=1)
    for l, kind in enumerate(cfg.layer_kinds, start=1):
        prefix = f"encoder.layer{l:02d}."
        if kind == "text":
            tok = encoder_layer(tok, batch.token_mask, p, prefix, cfg.heads)
        elif kind == "vision":
            reg = encoder_layer(reg, batch.region_mask, p, prefix, cfg.heads)
        else:
            x = encoder_layer(ag.concat([tok, reg], axis=1), joint_mask, p, prefix, cfg.heads)
            tok, reg = x[:, :M], x[:, M:]
        tok_layers.append(tok)
        reg_layers.append(reg)
    return tok_layers, reg_layers


@dataclass
class LayerStack:
    """Per-layer representations of one sample; index 0 is the embedding layer."""

    region_reps: np.ndarray  # [L+1, n, d]
    token_reps: np.ndarray   # [L+1, m, d]

    @property
    def L(self) -> int:
        return self.region_reps.shape[0] - 1


def encode_sample(sample, cfg: EncoderConfig, params) -> LayerStack:
    """Unbatched convenience wrapper around :func:`encode` for one sample."""
    leaves = {k: Tensor(v) for k, v in params.items()}
    tok_layers, reg_layers = encode(make_batch([sample]), cfg, leaves)
    return LayerStack(np.stack([t.data[0] for t in reg_layers]),
                      np.stack([t.data[0] for t in tok_layers]))


def embed_sample(sample, cfg: EncoderConfig, params) -> tuple[np.ndarray, np.ndarray]:
    """Layer-0 ``(regions [n, d], tokens [m, d])`` for one sample."""
    batch = make_batch([sample])
    check_batch(batch, cfg)
    leaves = {k: Tensor(v) for k, v in params.items()}
    tok, reg = embed(batch, leaves)
    return reg.data[0], tok.data[0]
