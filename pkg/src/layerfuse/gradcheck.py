"""Finite-difference verification of every differentiable component on a tiny config."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .encoder import EncoderConfig, encode, encoder_param_spec, make_batch
from .fusion import FusionKind
from .head import Box
from .model import GroundingModel, masked_bce
from .numeric import ParamStore, grad_check, init_params, sample_coordinates
from .rng import Rng
from .synthgen import GroundingSample, RegionProposal

LIMITS = {"d": 32, "L": 3, "n": 4}


@dataclass
class GradcheckLine:
    component: str
    errors: dict[str, float]   # stream or variant -> max relative error

    @property
    def worst(self) -> float:
        return max(self.errors.values())


def random_sample(n: int, m: int, feature_dim: int, vocab_size: int, seed: int) -> GroundingSample:
    rng = Rng(seed)
    regions = []
    for _ in range(n):
        w, h = rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5)
        x1, y1 = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
        regions.append(RegionProposal(Box(x1, y1, x1 + w, y1 + h), rng.normal(feature_dim)))
    tokens = [rng.integers(0, vocab_size) for _ in range(m)]
    return GroundingSample(0, regions, tokens, rng.integers(0, n), seed)


def _primitive_graph(seed: int):
    """A composite loss touching every recorded op, with its parameters."""
    rng = Rng(seed)
    params = ParamStore({
        "a": rng.normal((2, 3, 4)), "b": rng.normal((4, 5)), "gamma": rng.uniform(0.5, 1.5, (5,)),
        "beta": rng.normal(5), "w": rng.normal(5), "table": rng.normal((6, 5)),
    })
    ids = np.array([[0, 3, 3], [5, 1, 0]])
    targets = rng.random((2, 3))
    mask = np.array([[True, True, False], [True, True, True]])

    def loss(p):
        h = ag.layer_norm(p["a"] @ p["b"], p["gamma"], p["beta"])          # [2,3,5]
        h = ag.gelu(h) + ag.take(p["table"], ids)
        att = ag.softmax(ag.matmul(h, ag.transpose(h, (0, 2, 1))), mask=mask[:, None, :])
        h = ag.concat([att @ h, ag.sigmoid(h)], axis=-1)                   # [2,3,10]
        h = ag.reshape(h, (2, 3, 2, 5))
        pooled = ag.mean(h, axis=2)                                         # [2,3,5]
        other = h[:, :, 1, :]
        stk = ag.stack([pooled, other], axis=-2)                            # [2,3,2,5]
        mix = ag.softmax(ag.stack([ag.dot(pooled, p["w"]), ag.dot(other, p["w"])], axis=-1))
        mixed = ag.weighted_sum(mix, stk)
        logits = ag.dot(mixed, p["w"]) - ag.sum_(pooled, axis=-1) * 0.1
        return ag.mean(ag.bce_logits(logits, targets))

    return loss, params


def run_gradcheck(d: int = 16, L: int = 2, heads: int = 2, n: int = 3, m: int = 5,
                  epsilon: float = 1e-5, per_tensor: int = 4, seed: int = 0) -> list[GradcheckLine]:
    """Max relative error per component; fusion kinds are checked under both stream types."""
    if d > LIMITS["d"] or L > LIMITS["L"] or n > LIMITS["n"]:
        raise ValueError(f"gradcheck is limited to d<={LIMITS['d']}, L<={LIMITS['L']}, n<={LIMITS['n']}")
    vocab, feat = 20, 6
    sample = random_sample(n, m, feat, vocab, seed)
    batch = make_batch([sample])
    lines = []

    loss, params = _primitive_graph(seed)
    lines.append(GradcheckLine("numeric-core", {"ops": grad_check(loss, params, None, epsilon)}))

    enc_errors = {}
    for stream in ("single", "dual"):
        cfg = EncoderConfig(d=d, L=L, heads=heads, vocab_size=vocab, max_tokens=max(m, 8),
                            region_feature_dim=feat, stream=stream)
        p = init_params(encoder_param_spec(cfg), seed)
        probe = Rng(seed + 1).normal((L + 1, d))

        def enc_loss(leaves, cfg=cfg, probe=probe):
            toks, regs = encode(batch, cfg, leaves)
            total = None
            for l in range(L + 1):
                term = ag.sum_(ag.dot(regs[l], probe[l])) + ag.sum_(ag.dot(toks[l], probe[l])) * 0.5
                total = term if total is None else total + term
            return total

        enc_errors[stream] = grad_check(enc_loss, p, sample_coordinates(p, per_tensor, seed), epsilon)
    lines.append(GradcheckLine("encoder", enc_errors))

    rng = Rng(seed + 2)
    head = ParamStore({"head.w_s": rng.normal(d), "head.b_s": rng.normal(1)})
    fused = rng.normal((1, n, d))

    def head_loss(leaves):
        logits = ag.dot(fused, leaves["head.w_s"]) + leaves["head.b_s"]
        return masked_bce(logits, batch.targets, batch.region_mask)

    lines.append(GradcheckLine("grounding-head", {"bce": grad_check(head_loss, head, None, epsilon)}))

    for kind in FusionKind:
        errs = {}
        for stream in ("single", "dual"):
            cfg = EncoderConfig(d=d, L=L, heads=heads, vocab_size=vocab, max_tokens=max(m, 8),
                                region_feature_dim=feat, stream=stream)
            model = GroundingModel(cfg, kind)
            p = model.init(seed)
            errs[stream] = grad_check(lambda leaves, model=model: model.loss(leaves, batch), p,
                                      sample_coordinates(p, per_tensor, seed), epsilon)
        lines.append(GradcheckLine(f"fusion/{kind.value}", errs))
    return lines
