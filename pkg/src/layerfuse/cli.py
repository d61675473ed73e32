"""Command-line entry point: generate, train, eval, compare, analyze, gradcheck."""
from __future__ import annotations

import argparse
import logging
import statistics
import sys
import time
from dataclasses import fields
from pathlib import Path

from .persistence import RunConfig, load_checkpoint, load_config, load_dataset
from .synthgen import SceneSpec, generate_dataset

PROG = "layerfuse"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors become a single diagnostic line and exit status 2."""

    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------- helpers

def parse_spec_text(text: str) -> SceneSpec:
    """``key = value`` lines naming SceneSpec fields; list fields are comma-separated."""
    types = {f.name: f.type for f in fields(SceneSpec)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"spec line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise CliError(f"spec line {lineno}: unknown key {key!r}")
        kind = str(types[key])
        if key in ("categories", "colors"):
            values[key] = tuple(v.strip() for v in value.split(",") if v.strip())
        elif "float" in kind:
            values[key] = float(value)
        else:
            values[key] = int(value)
    return SceneSpec(**values)


def _base_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.out_dir is not None:
        config.out_dir = args.out_dir
    return config


def _output(args, config: RunConfig, name: str) -> Path:
    return Path(args.out) if getattr(args, "out", None) else Path(config.out_dir) / name


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"expected comma-separated integers, got {text!r}") from None


def _load_model(checkpoint: str, data: str):
    from .train import check_compatible, model_from_metadata

    params, meta = load_checkpoint(checkpoint)
    header, samples = load_dataset(data)
    if not samples:
        raise CliError(f"{data}: dataset has no samples")
    check_compatible(meta, header, samples)
    model = model_from_metadata(meta)
    model.check(params)
    return model, params, samples


def _pick_sample(samples, sample_id):
    if sample_id is None:
        return samples[0]
    for s in samples:
        if s.id == sample_id:
            return s
    raise CliError(f"no sample with id {sample_id}")


# -------------------------------------------------------------- subcommands

def cmd_generate(args) -> int:
    config = _base_config(args)
    spec = parse_spec_text(Path(args.spec).read_text(encoding="utf-8")) if args.spec else SceneSpec()
    out = _output(args, config, "data.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    generate_dataset(spec, args.count, config.seed, out)
    print(f"wrote {args.count} samples to {out}")
    return 0


def cmd_train(args) -> int:
    from .train import CHECKPOINT_NAME, METRICS_NAME, run_train

    config = _base_config(args)
    for key, _ in RunConfig.keys():
        value = getattr(args, "cfg_" + key.replace(".", "__"), None)
        if value is not None:
            config.set(key, value)
    start = time.perf_counter()
    result = run_train(config)
    last = result.metrics[-1]
    print(f"trained {config.fusion.kind} for {last['epoch']} epochs in {time.perf_counter() - start:.1f}s: "
          f"train_loss {last['train_loss']:.4f} val_iou05 {last['val_iou05']:.4f}")
    print(f"checkpoint {Path(config.out_dir) / CHECKPOINT_NAME}, metrics {Path(config.out_dir) / METRICS_NAME}")
    return 0


def cmd_eval(args) -> int:
    from .train import run_eval

    config = _base_config(args)
    out = _output(args, config, "eval.csv")
    acc, rows = run_eval(args.checkpoint, args.data, out)
    print(f"iou05 {acc:.4f} over {len(rows)} samples; predictions in {out}")
    return 0


def cmd_compare(args) -> int:
    from .train import run_compare

    config = _base_config(args)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    seeds = _int_list(args.seeds) if args.seeds else [config.seed]
    if not kinds or not seeds:
        raise CliError("compare needs at least one kind and one seed")
    out = _output(args, config, "compare.csv")
    rows = run_compare(config, kinds, seeds, out)
    print(f"{'kind':<20}{'seed':>6}{'val_iou05':>12}{'test_iou05':>12}{'extra_params':>14}")
    for r in rows:
        print(f"{r.kind:<20}{r.seed:>6}{r.val_iou05:>12.4f}{r.test_iou05:>12.4f}{r.extra_params:>14}")
    if "DynamicCombination" in kinds:
        print("note: DynamicCombination is this package's residual FFN chain; its extra_params is that "
              "variant's count, not a reference figure")
    print(f"table in {out}")
    return 0


def cmd_analyze(args) -> int:
    from . import analysis

    config = _base_config(args)
    model, params, samples = _load_model(args.checkpoint, args.data)
    out = _output(args, config, f"{args.mode}.csv")
    if args.mode == "attention":
        chosen = [_pick_sample(samples, args.sample_id)] if args.sample_id is not None else samples
        profiles = analysis.attention_group_profile(model, params, chosen)
        _write(out, analysis.profile_csv(profiles))
        for note in analysis.profile_observations(profiles):
            print(note)
    elif args.mode == "pca":
        source = args.source if args.source == "fused" else int(args.source)
        proj = analysis.pca_project_regions(model, params, _pick_sample(samples, args.sample_id), source)
        _write(out, analysis.projection_csv(proj))
        ev = proj.explained_variance
        print(f"explained variance {ev[0]:.4f}, {ev[1]:.4f}")
    else:
        chosen = [_pick_sample(samples, args.sample_id)] if args.sample_id is not None else samples
        rows = analysis.margins(model, params, chosen)
        if not rows:
            raise CliError("no sample has two or more regions")
        _write(out, analysis.margins_csv(rows))
        top = statistics.fmean(r[1] for r in rows)
        fused = statistics.fmean(r[2] for r in rows)
        print(f"mean nearest-neighbour margin: top layer {top:.4f}, fused {fused:.4f} over {len(rows)} samples")
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    seed = args.seed if args.seed is not None else (load_config(args.config).seed if args.config else 0)
    try:
        lines = run_gradcheck(d=args.d, L=args.L, heads=args.heads, n=args.n, m=args.m, seed=seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    failed = []
    csv_rows = ["component,variant,max_rel_error"]
    for line in lines:
        parts = "  ".join(f"{k} {v:.3e}" for k, v in line.errors.items())
        ok = line.worst < args.threshold
        print(f"{line.component:<28}{parts}  {'ok' if ok else 'FAIL'}")
        csv_rows += [f"{line.component},{k},{v!r}" for k, v in line.errors.items()]
        if not ok:
            failed.append(line.component)
    if args.out_dir is not None:
        _write(Path(args.out_dir) / "gradcheck.csv", "\n".join(csv_rows) + "\n")
    if failed:
        print(f"{PROG} gradcheck: error: max relative error >= {args.threshold} in {', '.join(failed)}",
              file=sys.stderr)
        return 1
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Encoder layer fusion for region grounding.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--config", default=None, help="key = value run config file")
        return p

    p = common(sub.add_parser("generate", help="write a synthetic grounding dataset"))
    p.add_argument("--spec", help="key = value scene spec file")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("train", help="train one fusion variant"))
    for key, kind in RunConfig.keys():
        if key in ("seed", "out_dir"):
            continue
        p.add_argument(f"--{key}", dest="cfg_" + key.replace(".", "__"), default=None,
                       metavar=kind.__name__.upper())
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="score a checkpoint on a dataset"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("compare", help="train several fusion kinds over several seeds"))
    p.add_argument("--kinds", default="RSD,TopLayer,SampleSpecific")
    p.add_argument("--seeds", default=None, help="comma-separated, default: the config seed")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = common(sub.add_parser("analyze", help="attention profiles, PCA projections, margins"))
    p.add_argument("mode", choices=["attention", "pca", "margin"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample-id", type=int, default=None)
    p.add_argument("--source", default="fused", help="layer index or 'fused' (pca only)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = common(sub.add_parser("gradcheck", help="finite-difference check of every component"))
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--m", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError, RuntimeError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"{PROG} {args.command}: error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
