"""Encoder layer fusion: region-specific dynamic layer attention and baselines.

The batched core works on a list of per-layer region tensors ``[..., N, d]``
(length L+1) and returns ``(fused [..., N, d], weights [..., N, L+1] or None)``.
The unbatched functions further down take a :class:`LayerStack` and plain
parameter dicts.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import LayerStack
from .numeric import softmax_rows


class FusionKind(str, Enum):
    TopLayer = "TopLayer"
    CoarseGrained = "CoarseGrained"
    FineGrained = "FineGrained"
    DynamicCombination = "DynamicCombination"
    DynamicRouting = "DynamicRouting"
    SampleSpecific = "SampleSpecific"
    RSD = "RSD"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, name) -> "FusionKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown fusion kind {name!r}; expected one of "
                             f"{', '.join(k.value for k in cls)}") from None


WEIGHTLESS = frozenset({FusionKind.DynamicCombination})


def fusion_param_spec(kind, d: int, L: int) -> list[tuple[str, tuple[int, ...], str]]:
    kind = FusionKind.parse(kind)
    if kind in (FusionKind.RSD, FusionKind.SampleSpecific):
        return [("fusion.w_alpha", (d,), "glorot-uniform"), ("fusion.b_alpha", (1,), "zeros")]
    if kind is FusionKind.CoarseGrained:
        return [("fusion.layer_scores", (L + 1,), "zeros")]
    if kind is FusionKind.FineGrained:
        return [("fusion.element_scores", (L + 1, d), "zeros")]
    if kind is FusionKind.DynamicRouting:
        return [("fusion.proj", (L + 1, d, d), "glorot-uniform")]
    if kind is FusionKind.DynamicCombination:
        spec = []
        for l in range(1, L + 1):
            p = f"fusion.ffn{l:02d}."
            spec += [(p + "in.weight", (2 * d, 4 * d), "glorot-uniform"),
                     (p + "in.bias", (4 * d,), "zeros"),
                     (p + "out.weight", (4 * d, d), "glorot-uniform"),
                     (p + "out.bias", (d,), "zeros")]
        return spec
    return []


def param_count(kind, d: int, L: int) -> int:
    """Extra trainable parameters a fusion head adds on top of the encoder."""
    if d < 1 or L < 1:
        raise ValueError("d and L must be >= 1")
    kind = FusionKind.parse(kind)
    if kind is FusionKind.TopLayer:
        return 0
    if kind in (FusionKind.RSD, FusionKind.SampleSpecific):
        return d + 1
    if kind is FusionKind.CoarseGrained:
        return L + 1
    if kind is FusionKind.FineGrained:
        return d * (L + 1)
    if kind is FusionKind.DynamicRouting:
        return (L + 1) * d * d
    return L * (2 * d * 4 * d + 4 * d + 4 * d * d + d)


# ------------------------------------------------------------ batched core

def _stack(layers: Sequence[Tensor]) -> Tensor:
    return ag.stack(layers, axis=-2)  # [..., N, L+1, d]


def rsd(layers, p, region_mask=None):
    stacked = _stack(layers)
    relevance = ag.dot(stacked, p["fusion.w_alpha"]) + p["fusion.b_alpha"]
    weights = ag.softmax(relevance, axis=-1)
    return ag.weighted_sum(weights, stacked), weights


def sample_specific(layers, p, region_mask=None):
    stacked = _stack(layers)
    N = stacked.shape[-3]
    if N == 0:
        raise ValueError("sample-specific pooling over zero regions")
    if region_mask is None:
        region_mask = np.ones(stacked.shape[:-2], dtype=bool)
    m = region_mask.astype(np.float64)
    scale = m / m.sum(axis=-1, keepdims=True)                       # [..., N]
    pooled = ag.sum_(stacked * scale[..., None, None], axis=-3, keepdims=True)  # [..., 1, L+1, d]
    relevance = ag.dot(pooled, p["fusion.w_alpha"]) + p["fusion.b_alpha"]     # [..., 1, L+1]
    weights = ag.softmax(relevance, axis=-1)
    fused = ag.weighted_sum(weights, stacked)
    full = Tensor(np.broadcast_to(weights.data, stacked.shape[:-1]).copy(), requires_grad=False)
    return fused, full


def coarse_grained(layers, p, region_mask=None):
    stacked = _stack(layers)
    weights = ag.softmax(p["fusion.layer_scores"], axis=-1)  # [L+1]
    fused = ag.weighted_sum(weights, stacked)
    full = Tensor(np.broadcast_to(weights.data, stacked.shape[:-1]).copy(), requires_grad=False)
    return fused, full


def fine_grained(layers, p, region_mask=None):
    stacked = _stack(layers)
    w = ag.softmax(p["fusion.element_scores"], axis=0)  # [L+1, d], columns sum to 1
    fused = ag.sum_(stacked * w, axis=-2)
    layer_profile = w.data.mean(axis=1)
    full = Tensor(np.broadcast_to(layer_profile, stacked.shape[:-1]).copy(), requires_grad=False)
    return fused, full


def dynamic_routing(layers, p, region_mask=None, iterations: int = 3):
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    stacked = _stack(layers)
    lead = stacked.shape[:-2]
    K, d = stacked.shape[-2:]
    flat = ag.transpose(ag.reshape(stacked, (-1, K, d)), (1, 0, 2))       # [K, R, d]
    u = ag.matmul(flat, p["fusion.proj"])                                  # [K, R, d]
    u = ag.reshape(ag.transpose(u, (1, 0, 2)), lead + (K, d))              # [..., K, d]
    logits = Tensor(np.zeros(lead + (K,)), requires_grad=False)
    for _ in range(iterations):
        c = ag.softmax(logits, axis=-1)
        fused = ag.weighted_sum(c, u)
        agreement = ag.sum_(u * ag.reshape(fused, lead + (1, d)), axis=-1)
        logits = logits + agreement
    return fused, c


def dynamic_combination(layers, p, region_mask=None):
    g = layers[0]
    for l in range(1, len(layers)):
        pre = f"fusion.ffn{l:02d}."
        h = ag.gelu(ag.concat([layers[l], g], axis=-1) @ p[pre + "in.weight"] + p[pre + "in.bias"])
        g = h @ p[pre + "out.weight"] + p[pre + "out.bias"] + g
    return g, None


def top_layer(layers, p, region_mask=None):
    L = len(layers) - 1
    onehot = np.zeros(layers[-1].shape[:-1] + (L + 1,))
    onehot[..., L] = 1.0
    return layers[-1], Tensor(onehot, requires_grad=False)


_DISPATCH = {
    FusionKind.TopLayer: top_layer,
    FusionKind.CoarseGrained: coarse_grained,
    FusionKind.FineGrained: fine_grained,
    FusionKind.DynamicCombination: dynamic_combination,
    FusionKind.DynamicRouting: dynamic_routing,
    FusionKind.SampleSpecific: sample_specific,
    FusionKind.RSD: rsd,
}


def check_params(kind, p: Mapping, d: int, L: int) -> None:
    expected = {name: shape for name, shape, _ in fusion_param_spec(kind, d, L)}
    got = {k: tuple(np.shape(v.data if isinstance(v, Tensor) else v))
           for k, v in p.items() if k.startswith("fusion.")}
    if got != expected:
        raise ValueError(f"fusion parameters do not match kind {FusionKind.parse(kind)}: "
                         f"expected {sorted(expected)}, got {sorted(got)}")


def fuse_layers(kind, layers: Sequence[Tensor], p: Mapping, region_mask=None, iterations: int = 3):
    kind = FusionKind.parse(kind)
    if kind is FusionKind.DynamicRouting:
        return dynamic_routing(layers, p, region_mask, iterations)
    return _DISPATCH[kind](layers, p, region_mask)


# ------------------------------------------------------- unbatched interface

@dataclass
class FusionWeights:
    relevance: np.ndarray  # [n, L+1]
    weights: np.ndarray    # [n, L+1]


@dataclass
class FusedReps:
    vectors: np.ndarray  # [n, d]


def _layers(stack: LayerStack) -> list[Tensor]:
    return [Tensor(r) for r in stack.region_reps]


def _leaves(params: Mapping) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
            for k, v in params.items()}


def _check_shape(stack: LayerStack, params: Mapping, kind) -> None:
    L = stack.L
    d = stack.region_reps.shape[-1]
    check_params(kind, {k: v for k, v in params.items() if k.startswith("fusion.")}, d, L)


def rsd_weights(stack: LayerStack, params: Mapping) -> FusionWeights:
    _check_shape(stack, params, FusionKind.RSD)
    w = np.asarray(params["fusion.w_alpha"], dtype=np.float64)
    b = float(np.asarray(params["fusion.b_alpha"]).reshape(-1)[0])
    relevance = np.einsum("lnd,d->nl", stack.region_reps, w) + b
    return FusionWeights(relevance, softmax_rows(relevance))


def sample_specific_weights(stack: LayerStack, params: Mapping) -> FusionWeights:
    _check_shape(stack, params, FusionKind.SampleSpecific)
    n = stack.region_reps.shape[1]
    if n == 0:
        raise ValueError("sample-specific weights need at least one region")
    # pooled stack scored exactly as RSD scores one region, then broadcast
    pooled = stack.region_reps.mean(axis=1, keepdims=True)  # [L+1, 1, d]
    one = rsd_weights(LayerStack(pooled, stack.token_reps), params)
    return FusionWeights(np.tile(one.relevance, (n, 1)), np.tile(one.weights, (n, 1)))


def fuse_weighted_sum(stack: LayerStack, w: FusionWeights) -> FusedReps:
    weights = np.asarray(w.weights if isinstance(w, FusionWeights) else w)
    if weights.shape != stack.region_reps.shape[1::-1]:
        raise ValueError(f"weights {weights.shape} vs stack {stack.region_reps.shape}")
    return FusedReps(np.einsum("nl,lnd->nd", weights, stack.region_reps))


def coarse_grained_fuse(stack: LayerStack, params: Mapping) -> FusedReps:
    _check_shape(stack, params, FusionKind.CoarseGrained)
    fused, _ = coarse_grained(_layers(stack), _leaves(params))
    return FusedReps(fused.data)


def fine_grained_fuse(stack: LayerStack, params: Mapping) -> FusedReps:
    _check_shape(stack, params, FusionKind.FineGrained)
    fused, _ = fine_grained(_layers(stack), _leaves(params))
    return FusedReps(fused.data)


def dynamic_routing_fuse(stack: LayerStack, params: Mapping, iterations: int = 3) -> FusedReps:
    _check_shape(stack, params, FusionKind.DynamicRouting)
    fused, _ = dynamic_routing(_layers(stack), _leaves(params), iterations=iterations)
    return FusedReps(fused.data)


def dynamic_combination_fuse(stack: LayerStack, params: Mapping) -> FusedReps:
    _check_shape(stack, params, FusionKind.DynamicCombination)
    fused, _ = dynamic_combination(_layers(stack), _leaves(params))
    return FusedReps(fused.data)


def fuse(stack: LayerStack, kind, params: Mapping, iterations: int = 3) -> FusedReps:
    kind = FusionKind.parse(kind)
    _check_shape(stack, params, kind)
    if kind is FusionKind.TopLayer:
        return FusedReps(stack.region_reps[-1].copy())
    if kind is FusionKind.RSD:
        return fuse_weighted_sum(stack, rsd_weights(stack, params))
    if kind is FusionKind.SampleSpecific:
        return fuse_weighted_sum(stack, sample_specific_weights(stack, params))
    fused, _ = fuse_layers(kind, _layers(stack), _leaves(params), iterations=iterations)
    return FusedReps(fused.data)


def fusion_weights(stack: LayerStack, kind, params: Mapping, iterations: int = 3) -> np.ndarray:
    """Per-region layer weights ``[n, L+1]`` for every kind that has them."""
    kind = FusionKind.parse(kind)
    if kind in WEIGHTLESS:
        raise ValueError(f"{kind} fusion has no layer attention weights")
    _check_shape(stack, params, kind)
    _, w = fuse_layers(kind, _layers(stack), _leaves(params), iterations=iterations)
    return w.data
