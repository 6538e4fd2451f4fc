"""Command-line entry point tying the pipeline together.

Every subcommand logs its fully resolved configuration to stderr, so any
artifact can be reproduced from the log line. Errors exit with a
machine-parsable category prefix: E_IO (exit 2), E_CONFIG (exit 3),
E_NUMERIC (exit 4).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import types
import typing
from pathlib import Path

import numpy as np

from . import augment as ag
from . import bench as bn
from . import formula as fm
from . import probe as pb
from . import trainer as tr
from .encoder import (
    EncoderConfig,
    encode,
    load_embeddings,
    load_encoder,
    save_embeddings,
)
from .errors import ConfigError, StlError
from .kernel import export_gram_csv, gram, load_gram, save_gram
from .objective import LossConfig
from .signals import load_trajectories, sample_mu0, save_trajectories

EXIT_OK = 0
EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# Flat key=value config handling

def load_kv_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(text: str, annotation):
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return _coerce(text, args[0])
    if origin is tuple:
        elem = typing.get_args(annotation)[0]
        parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
        return tuple(_coerce(p.strip(), elem) for p in parts)
    if annotation is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if annotation is int:
        return int(text)
    if annotation is float:
        return float(text)
    if annotation is str:
        return text
    raise ConfigError(f"unsupported config type {annotation}")


def build_config(cls, mapping: dict[str, str], label: str):
    """Instantiate ``cls`` from string key/values; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        if key not in names:
            raise ConfigError(f"unknown {label} key {key!r}")
        try:
            kwargs[key] = _coerce(value, hints[key])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {label} key {key!r}: {exc}") from exc
    return cls(**kwargs)


def resolved_line(label: str, cfg) -> str:
    pairs = " ".join(f"{f.name}={getattr(cfg, f.name)!r}"
                     for f in dataclasses.fields(cfg))
    return f"config[{label}]: {pairs}"


def _log_config(label: str, cfg) -> None:
    print(resolved_line(label, cfg), file=sys.stderr)


def _collect_sets(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# Subcommands

def _cmd_gen_signals(args) -> int:
    ts = sample_mu0(args.n, args.points, args.vars, args.horizon, args.seed)
    save_trajectories(ts, args.out)
    print(f"config[gen-signals]: n={args.n} points={args.points} vars={args.vars} "
          f"horizon={args.horizon} seed={args.seed} out={args.out}", file=sys.stderr)
    print(f"wrote {args.out}: {ts.n} trajectories, {ts.points} points, {ts.num_vars} vars")
    return EXIT_OK


def _augment_config(args) -> ag.AugmentConfig:
    mapping = load_kv_file(args.config) if args.config else {}
    mapping.update(_collect_sets(getattr(args, "set", None)))
    cfg = build_config(ag.AugmentConfig, mapping, "augment")
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _cmd_gen_dataset(args) -> int:
    cfg = _augment_config(args)
    _log_config("augment", cfg)
    seeds_path = args.seeds_file or ag.default_seed_path()
    seeds = ag.load_seed_formulas(seeds_path, num_vars=cfg.num_vars)
    records = ag.build_dataset(seeds, args.total, cfg, seed=cfg.seed)
    ag.save_dataset(records, args.out)
    counts = {k: sum(r.variant_kind == k for r in records) for k in ag.VARIANT_KINDS}
    print(f"wrote {args.out}: {len(records)} records from {len(seeds)} seeds {counts}")
    return EXIT_OK


def _cmd_kernel(args) -> int:
    records = ag.load_dataset(args.dataset)
    signals = load_trajectories(args.signals)
    formulae = [fm.parse(r.formula_text) for r in records]
    gm = gram(formulae, signals, args.sigma2, ids=[r.id for r in records])
    save_gram(gm, args.out)
    export_gram_csv(gm, str(args.out) + ".csv")
    print(f"config[kernel]: dataset={args.dataset} signals={args.signals} "
          f"sigma2={args.sigma2} out={args.out}", file=sys.stderr)
    print(f"wrote {args.out} (+.csv): {gm.size}x{gm.size} gram over {gm.n_signals} signals")
    return EXIT_OK


def _cmd_train(args) -> int:
    enc_map = load_kv_file(args.encoder_config) if args.encoder_config else {}
    train_map = load_kv_file(args.train_config) if args.train_config else {}
    train_map.update(_collect_sets(args.set))
    loss_map = {k[len("loss_"):]: train_map.pop(k)
                for k in list(train_map) if k.startswith("loss_")}

    if args.pooling:
        enc_map["pooling"] = args.pooling
    enc_cfg = build_config(EncoderConfig, enc_map, "encoder")
    train_cfg = build_config(tr.TrainConfig, train_map, "train")
    loss_cfg = build_config(LossConfig, loss_map, "loss")
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    if args.lr is not None:
        train_cfg.learning_rate = args.lr
    if args.seed is not None:
        train_cfg.seed = args.seed
        enc_cfg.seed = args.seed
    enc_cfg.validate()
    train_cfg.validate()
    _log_config("encoder", enc_cfg)
    _log_config("train", train_cfg)
    _log_config("loss", loss_cfg)

    records = ag.load_dataset(args.dataset)
    signals = load_trajectories(args.signals) if args.signals else None
    result = tr.train(records, enc_cfg, train_cfg, signals=signals,
                      loss_cfg=loss_cfg, out_dir=args.out_dir)
    val_rows = [r for r in result.log if r["split"] == "val"]
    if val_rows:
        last = val_rows[-1]
        print(f"trained {result.steps} steps; final val alignment "
              f"{last['alignment']:.6f}, loss {last['loss']:.6f}")
    else:
        print(f"trained {result.steps} steps (no validation split)")
    print(f"artifacts in {args.out_dir}")
    return EXIT_OK


def _cmd_embed(args) -> int:
    model = load_encoder(args.model)
    records = ag.load_dataset(args.dataset)
    sequences = [
        fm.tokenize(fm.parse(r.formula_text), model.cfg.max_len,
                    model.cfg.agg_token, model.cfg.max_vars)
        for r in records
    ]
    emb = encode(model, sequences, args.chunk)
    save_embeddings(emb, args.out)
    print(f"config[embed]: model={args.model} dataset={args.dataset} "
          f"chunk={args.chunk} out={args.out}", file=sys.stderr)
    print(f"wrote {args.out}: {emb.shape[0]} embeddings of dim {emb.shape[1]}")
    return EXIT_OK


def _cmd_similarity(args) -> int:
    emb = load_embeddings(args.embeddings).astype(np.float64)
    sims = emb @ emb.T
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in sims:
            writer.writerow([f"{v:.12g}" for v in row])
    print(f"config[similarity]: embeddings={args.embeddings} out={args.out}",
          file=sys.stderr)
    print(f"wrote {args.out}: {sims.shape[0]}x{sims.shape[1]} similarity matrix")
    return EXIT_OK


def _cmd_gen_pairs(args) -> int:
    cfg = _augment_config(args)
    _log_config("augment", cfg)
    records = ag.load_dataset(args.dataset)
    signals = load_trajectories(args.signals)
    pairs = pb.mine_agreement_pairs(records, cfg, signals,
                                    n_per_category=args.per_category,
                                    seed=cfg.seed)
    pb.save_pairs(pairs, args.out)
    print(f"wrote {args.out}: " + ", ".join(f"{k}={len(v)}" for k, v in pairs.items()))
    return EXIT_OK


def _cmd_eval_agreement(args) -> int:
    model = load_encoder(args.model)
    pairs = pb.load_pairs(args.pairs)
    signals = load_trajectories(args.signals)
    report = pb.agreement_eval(model, pairs, signals, args.sigma2)
    Path(args.out).write_text(report.to_json() + "\n")
    print(f"config[eval-agreement]: model={args.model} pairs={args.pairs} "
          f"signals={args.signals} sigma2={args.sigma2}", file=sys.stderr)
    print(report.format_table())
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_probe(args) -> int:
    records = ag.load_dataset(args.dataset)
    signals = load_trajectories(args.signals)
    formulae = [fm.parse(r.formula_text) for r in records]
    rho_bar, p_sat = pb.compute_targets(formulae, signals)
    targets = rho_bar if args.target == "robustness" else p_sat

    if args.model:
        model = load_encoder(args.model)
        sequences = [
            fm.tokenize(f, model.cfg.max_len, model.cfg.agg_token, model.cfg.max_vars)
            for f in formulae
        ]
        features = encode(model, sequences).astype(np.float64)
        source = "neural"
    else:
        gm = load_gram(args.gram)
        if gm.size != len(records) or tuple(gm.ids) != tuple(r.id for r in records):
            raise StlError("gram ids do not match the dataset records")
        features = gm.values
        source = "kernel"

    report = pb.train_probe(features, targets, args.target, source,
                            seed=args.seed, epochs=args.epochs)
    Path(args.out).write_text(report.to_json() + "\n")
    print(f"config[probe]: target={args.target} source={source} seed={args.seed} "
          f"epochs={args.epochs}", file=sys.stderr)
    print(f"{source} features -> {args.target}: r={report.pearson_r:.4f} "
          f"mae={report.mae:.4f} (test n={report.n_test})")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_invert_nn(args) -> int:
    model = load_encoder(args.model)
    records = ag.load_dataset(args.corpus)
    sequences = [
        fm.tokenize(fm.parse(r.formula_text), model.cfg.max_len,
                    model.cfg.agg_token, model.cfg.max_vars)
        for r in records
    ]
    corpus_emb = encode(model, sequences)
    query = fm.parse(args.query)
    query_seq = fm.tokenize(query, model.cfg.max_len, model.cfg.agg_token,
                            model.cfg.max_vars)
    query_emb = encode(model, [query_seq])[0]
    hits = pb.invert_nn(query_emb, corpus_emb, args.top_k)
    print(f"config[invert-nn]: model={args.model} corpus={args.corpus} "
          f"top_k={args.top_k}", file=sys.stderr)
    for rank, (idx, sim) in enumerate(hits, 1):
        print(f"{rank}\t{sim:.6f}\t{records[idx].id}\t{records[idx].formula_text}")
    return EXIT_OK


def _parse_grid(text: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
    parts = dict(p.split("=", 1) for p in text.split(";") if p)
    if set(parts) != {"B", "N"}:
        raise ConfigError(f"grid must look like B=64,128;N=100,400, got {text!r}")
    return (tuple(int(v) for v in parts["B"].split(",")),
            tuple(int(v) for v in parts["N"].split(",")))


def _cmd_bench(args) -> int:
    batch_sizes, signal_counts = _parse_grid(args.grid)
    cfg = bn.BenchConfig(
        batch_sizes=batch_sizes,
        signal_counts=signal_counts,
        signal_points=args.points,
        signal_vars=args.vars,
        signal_horizon=args.horizon,
        sigma2=args.sigma2,
        repetitions=args.reps,
        memory_budget_mb=args.budget_mb,
        seed=args.seed,
    )
    _log_config("bench", cfg)
    records = ag.load_dataset(args.dataset)
    run = bn.bench_embed if args.phase == "embed" else bn.bench_similarity
    result = run(records, args.model, cfg)
    bn.save_bench_records(result.records, args.out)
    print(bn.format_bench_table(result.records))
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="stldistill", description=__doc__)
    parser.add_argument("--threads", type=int, default=None,
                        help="torch intra-op thread count")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-signals", help="sample a trajectory cache")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--points", type=int, default=101)
    p.add_argument("--vars", type=int, default=3)
    p.add_argument("--horizon", type=float, default=100.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_signals)

    p = sub.add_parser("gen-dataset", help="build a stratified formula dataset")
    p.add_argument("--seeds-file", default=None)
    p.add_argument("--total", type=int, required=True)
    p.add_argument("--config", default=None, help="key=value augment config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_dataset)

    p = sub.add_parser("kernel", help="compute the Gram matrix for a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--signals", required=True)
    p.add_argument("--sigma2", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_kernel)

    p = sub.add_parser("train", help="distill the kernel into an encoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--signals", default=None)
    p.add_argument("--encoder-config", default=None)
    p.add_argument("--train-config", default=None)
    p.add_argument("--pooling", choices=("mean", "cls", "bos"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="train-config override (loss_* keys reach the loss)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("embed", help="export embeddings for a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--chunk", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_embed)

    p = sub.add_parser("similarity", help="embedding similarity matrix as CSV")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_similarity)

    p = sub.add_parser("gen-pairs", help="mine categorized agreement pairs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--signals", required=True)
    p.add_argument("--per-category", type=int, default=100)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_pairs)

    p = sub.add_parser("eval-agreement", help="neural vs kernel similarity report")
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--signals", required=True)
    p.add_argument("--sigma2", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval_agreement)

    p = sub.add_parser("probe", help="regress robustness/satisfaction from features")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--model")
    group.add_argument("--gram")
    p.add_argument("--dataset", required=True)
    p.add_argument("--signals", required=True)
    p.add_argument("--target", choices=("robustness", "satisfaction"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_probe)

    p = sub.add_parser("invert-nn", help="nearest-neighbor formula retrieval")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(fn=_cmd_invert_nn)

    p = sub.add_parser("bench", help="efficiency benchmarks over a (B, N) grid")
    p.add_argument("phase", choices=("embed", "similarity"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--grid", required=True, help="B=64,128;N=100,400")
    p.add_argument("--points", type=int, default=101)
    p.add_argument("--vars", type=int, default=3)
    p.add_argument("--horizon", type=float, default=100.0)
    p.add_argument("--sigma2", type=float, default=0.2)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--budget-mb", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_bench)

    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        if args.threads is not None:
            import torch

            torch.set_num_threads(args.threads)
        return args.fn(args)
    except ConfigError as exc:
        print(f"E_CONFIG: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"E_IO: {exc}", file=sys.stderr)
        return EXIT_IO
    except (StlError, ValueError, RuntimeError) as exc:
        print(f"E_NUMERIC: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
