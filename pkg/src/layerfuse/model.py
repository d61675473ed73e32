"""Encoder + layer fusion + linear scoring head, assembled for training and inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import Batch, EncoderConfig, encode, encoder_param_spec, make_batch
from .fusion import FusionKind, check_params, fuse_layers, fusion_param_spec
from .numeric import ParamStore, init_params


@dataclass
class ForwardResult:
    logits: Tensor                 # [B, N]
    fused: Tensor                  # [B, N, d]
    weights: Tensor | None         # [B, N, L+1]
    region_layers: list[Tensor]    # L+1 tensors [B, N, d]


@dataclass
class GroundingModel:
    encoder: EncoderConfig
    kind: FusionKind = FusionKind.RSD
    routing_iterations: int = 3

    def __post_init__(self):
        self.kind = FusionKind.parse(self.kind)

    def param_spec(self):
        d = self.encoder.d
        return (encoder_param_spec(self.encoder)
                + fusion_param_spec(self.kind, d, self.encoder.L)
                + [("head.w_s", (d,), "glorot-uniform"), ("head.b_s", (1,), "zeros")])

    def init(self, seed: int) -> ParamStore:
        return init_params(self.param_spec(), seed)

    def check(self, params) -> None:
        expected = {name: tuple(shape) for name, shape, _ in self.param_spec()}
        got = {k: tuple(np.shape(v)) for k, v in params.items()}
        if expected != got:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
            raise ValueError(f"parameters do not fit the model: missing={missing} extra={extra} "
                             f"wrong_shape={wrong}")

    def forward(self, p: dict[str, Tensor], batch: Batch) -> ForwardResult:
        _, reg_layers = encode(batch, self.encoder, p)
        check_params(self.kind, {k: v for k, v in p.items() if k.startswith("fusion.")},
                     self.encoder.d, self.encoder.L)
        fused, weights = fuse_layers(self.kind, reg_layers, p, batch.region_mask,
                                     self.routing_iterations)
        logits = ag.dot(fused, p["head.w_s"]) + p["head.b_s"]
        return ForwardResult(logits, fused, weights, reg_layers)

    def loss(self, p: dict[str, Tensor], batch: Batch) -> Tensor:
        """Mean over samples of the per-sample mean BCE over real regions."""
        out = self.forward(p, batch)
        return masked_bce(out.logits, batch.targets, batch.region_mask)

    def predict(self, params: ParamStore, samples: Sequence, batch_size: int = 64) -> list[np.ndarray]:
        """Logits per sample (trimmed to each sample's region count)."""
        leaves = {k: Tensor(v) for k, v in params.items()}
        result = []
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            out = self.forward(leaves, make_batch(chunk))
            result.extend(out.logits.data[b, :s.n].copy() for b, s in enumerate(chunk))
        return result


def masked_bce(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    m = mask.astype(np.float64)
    scale = m / (m.sum(axis=1, keepdims=True) * m.shape[0])
    return ag.sum_(ag.bce_logits(logits, targets) * scale)
