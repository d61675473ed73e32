"""Training, evaluation and fusion-kind comparison runs."""
from __future__ import annotations

import csv
import io
import logging
import os
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import Tensor, backward
from .encoder import EncoderConfig, make_batch
from .fusion import FusionKind, param_count
from .head import iou
from .model import GroundingModel, masked_bce
from .numeric import AdamState, ParamStore, adam_step
from .persistence import (RunConfig, load_checkpoint, load_dataset, parse_split,
                          save_checkpoint)
from .rng import Rng, derive_seed

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.lfck"
METRICS_NAME = "metrics.csv"


class CompatibilityError(ValueError):
    pass


def fmt(x: float) -> str:
    return repr(float(x))


def build_model(config: RunConfig, header: dict) -> GroundingModel:
    spec = header["spec"]
    enc = EncoderConfig(
        d=config.encoder.d, L=config.encoder.L, heads=config.encoder.heads,
        ffn_mult=config.encoder.ffn_mult, vocab_size=len(header["vocab"]),
        max_tokens=config.encoder.max_tokens,
        region_feature_dim=len(spec["categories"]) + len(spec["colors"]),
        stream=config.encoder.stream, dual_split=parse_split(config.encoder.dual_split))
    return GroundingModel(enc, FusionKind.parse(config.fusion.kind), config.fusion.routing_iterations)


def model_from_metadata(meta: dict) -> GroundingModel:
    enc = dict(meta["encoder"])
    if enc.get("dual_split") is not None:
        enc["dual_split"] = tuple(enc["dual_split"])
    return GroundingModel(EncoderConfig(**enc), FusionKind.parse(meta["fusion_kind"]),
                          int(meta["routing_iterations"]))


def checkpoint_metadata(model: GroundingModel, header: dict, seed: int, step: int) -> dict:
    return {
        "encoder": asdict(model.encoder),
        "fusion_kind": model.kind.value,
        "routing_iterations": model.routing_iterations,
        "seed": seed,
        "step": step,
        "grammar_version": header["grammar_version"],
        "vocab": list(header["vocab"]),
    }


def batch_order(samples: Sequence, batch_size: int, rng: Rng, pool: int = 8) -> list[list[int]]:
    """Shuffled mini-batches, length-bucketed inside pools of ``pool`` batches to cut padding."""
    perm = rng.permutation(len(samples))
    batches = []
    chunk = batch_size * pool
    for start in range(0, len(perm), chunk):
        part = sorted(perm[start:start + chunk],
                      key=lambda i: (len(samples[i].tokens) + samples[i].n, i))
        batches += [part[k:k + batch_size] for k in range(0, len(part), batch_size)]
    rng.shuffle(batches)
    return batches


def _eval_batches(samples: Sequence, batch_size: int) -> list[list[int]]:
    order = sorted(range(len(samples)), key=lambda i: (len(samples[i].tokens) + samples[i].n, i))
    return [order[k:k + batch_size] for k in range(0, len(order), batch_size)]


def predict_logits(model: GroundingModel, params: ParamStore, samples: Sequence,
                   batch_size: int = 64) -> list[np.ndarray]:
    leaves = {k: Tensor(v) for k, v in params.items()}
    out: list[np.ndarray | None] = [None] * len(samples)
    for idx in _eval_batches(samples, batch_size):
        res = model.forward(leaves, make_batch([samples[i] for i in idx]))
        for b, i in enumerate(idx):
            out[i] = res.logits.data[b, :samples[i].n].copy()
    return out


def mean_loss(model: GroundingModel, params: ParamStore, samples: Sequence, batch_size: int = 64) -> float:
    leaves = {k: Tensor(v) for k, v in params.items()}
    total = 0.0
    for idx in _eval_batches(samples, batch_size):
        batch = make_batch([samples[i] for i in idx])
        loss = masked_bce(model.forward(leaves, batch).logits, batch.targets, batch.region_mask)
        total += float(loss.data) * len(idx)
    return total / len(samples)


@dataclass
class EvalRow:
    id: int
    predicted_index: int
    predicted_box: list[float]
    iou: float
    correct: bool


def evaluate(model: GroundingModel, params: ParamStore, samples: Sequence) -> tuple[float, list[EvalRow]]:
    """IoU@0.5 accuracy and per-sample predictions."""
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    rows = []
    for s, logits in zip(samples, predict_logits(model, params, samples)):
        k = int(np.argmax(logits))
        box = s.regions[k].box
        v = iou(box, s.target_box)
        rows.append(EvalRow(s.id, k, box.as_list(), v, v > 0.5))
    return sum(r.correct for r in rows) / len(rows), rows


def eval_csv(rows: Sequence[EvalRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "predicted_index", "predicted_box", "iou", "correct"])
    for r in rows:
        w.writerow([r.id, r.predicted_index, " ".join(fmt(x) for x in r.predicted_box),
                    fmt(r.iou), int(r.correct)])
    return buf.getvalue()


@dataclass
class TrainResult:
    params: ParamStore
    model: GroundingModel
    metrics: list[dict] = field(default_factory=list)
    step: int = 0

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_iou05"])
        for m in self.metrics:
            w.writerow([m["epoch"], fmt(m["train_loss"]), fmt(m["val_iou05"])])
        return buf.getvalue()


def train(config: RunConfig, header: dict, train_set: Sequence, val_set: Sequence) -> TrainResult:
    """Fit the configured model with Adam; one metrics row per epoch (row 0 = initialization)."""
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    model = build_model(config, header)
    params = model.init(config.seed)
    state = AdamState()
    o = config.optim
    metrics = [{"epoch": 0, "train_loss": mean_loss(model, params, train_set),
                "val_iou05": evaluate(model, params, val_set)[0]}]
    log.info("epoch 0 loss %.4f val %.4f", metrics[0]["train_loss"], metrics[0]["val_iou05"])
    for epoch in range(1, config.train.epochs + 1):
        rng = Rng(derive_seed(config.seed, epoch))
        total = 0.0
        for idx in batch_order(train_set, config.train.batch_size, rng):
            batch = make_batch([train_set[i] for i in idx])
            loss = model.loss(params.leaves(), batch)
            grads = backward(loss)
            params, state = adam_step(params, grads, state, o.lr, o.beta1, o.beta2, o.eps)
            total += float(loss.data) * len(idx)
        val = evaluate(model, params, val_set)[0]
        metrics.append({"epoch": epoch, "train_loss": total / len(train_set), "val_iou05": val})
        log.info("epoch %d loss %.4f val %.4f", epoch, metrics[-1]["train_loss"], val)
    return TrainResult(params, model, metrics, state.step)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _load_split(path: str, what: str):
    if not path:
        raise ValueError(f"data.{what} is not set")
    if not Path(path).exists():
        raise FileNotFoundError(f"data.{what}: {path} does not exist")
    return load_dataset(path)


def run_train(config: RunConfig) -> TrainResult:
    """Train per ``config`` and write the checkpoint and metrics CSV to ``config.out_dir``."""
    config.validate()
    header, train_set = _load_split(config.data.train, "train")
    val_header, val_set = _load_split(config.data.val, "val")
    if val_header["vocab"] != header["vocab"]:
        raise CompatibilityError("train and val datasets use different vocabularies")
    result = train(config, header, train_set, val_set)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, checkpoint_metadata(result.model, header, config.seed, result.step),
                    out / CHECKPOINT_NAME)
    _write_atomic(out / METRICS_NAME, result.metrics_csv())
    return result


def check_compatible(meta: dict, header: dict, samples: Sequence) -> None:
    enc = meta["encoder"]
    theirs = {"vocab_size": len(header["vocab"]),
              "grammar_version": header["grammar_version"],
              "region_feature_dim": len(header["spec"]["categories"]) + len(header["spec"]["colors"])}
    ours = {"vocab_size": enc["vocab_size"], "grammar_version": meta["grammar_version"],
            "region_feature_dim": enc["region_feature_dim"]}
    longest = max((len(s.tokens) for s in samples), default=0)
    if ours != theirs or longest > enc["max_tokens"] or meta.get("vocab", header["vocab"]) != header["vocab"]:
        raise CompatibilityError(f"checkpoint {ours} (max_tokens={enc['max_tokens']}) is incompatible "
                                 f"with dataset {theirs} (longest command {longest})")


def run_eval(checkpoint, data, out=None) -> tuple[float, list[EvalRow]]:
    params, meta = load_checkpoint(checkpoint)
    header, samples = load_dataset(data)
    if not samples:
        raise ValueError(f"{data}: dataset has no samples")
    check_compatible(meta, header, samples)
    model = model_from_metadata(meta)
    model.check(params)
    acc, rows = evaluate(model, params, samples)
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_atomic(out, eval_csv(rows))
    return acc, rows


@dataclass
class CompareRow:
    kind: str
    seed: str
    val_iou05: float
    test_iou05: float
    extra_params: int


def compare_csv(rows: Sequence[CompareRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "seed", "val_iou05", "test_iou05", "extra_params"])
    for r in rows:
        w.writerow([r.kind, r.seed, fmt(r.val_iou05), fmt(r.test_iou05), r.extra_params])
    return buf.getvalue()


def summarize(rows: Sequence[CompareRow]) -> list[CompareRow]:
    """Append mean and population std rows per kind."""
    out = list(rows)
    kinds = list(dict.fromkeys(r.kind for r in rows))
    for kind in kinds:
        mine = [r for r in rows if r.kind == kind]
        vals = [r.val_iou05 for r in mine]
        tests = [r.test_iou05 for r in mine]
        extra = mine[0].extra_params
        out.append(CompareRow(kind, "mean", statistics.fmean(vals), statistics.fmean(tests), extra))
        out.append(CompareRow(kind, "std", statistics.pstdev(vals), statistics.pstdev(tests), extra))
    return out


def run_compare(config: RunConfig, kinds: Sequence[str], seeds: Sequence[int], out_csv=None) -> list[CompareRow]:
    """Train every (kind, seed) pair on shared data and tabulate val/test IoU@0.5."""
    header, train_set = _load_split(config.data.train, "train")
    _, val_set = _load_split(config.data.val, "val")
    _, test_set = _load_split(config.data.test, "test")
    rows = []
    for kind in kinds:
        kind = FusionKind.parse(kind)
        for seed in seeds:
            cfg = replace(config, seed=int(seed), fusion=replace(config.fusion, kind=kind.value))
            try:
                cfg.validate()
                result = train(cfg, header, train_set, val_set)
                val = evaluate(result.model, result.params, val_set)[0]
                test = evaluate(result.model, result.params, test_set)[0]
            except Exception as exc:
                raise RuntimeError(f"compare: run for kind {kind} seed {seed} failed: {exc}") from exc
            rows.append(CompareRow(kind.value, str(seed), val, test,
                                   param_count(kind, config.encoder.d, config.encoder.L)))
            log.info("compare %s seed %s val %.4f test %.4f", kind, seed, val, test)
    rows = summarize(rows)
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        _write_atomic(out_csv, compare_csv(rows))
    return rows
