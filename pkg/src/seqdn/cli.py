"""``seqdn`` command line: prepare, embed, synth, train, eval, report, sweep."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import SWEEP_THETAS, sweep_csv, sweep_rows
from .config import ConfigError, RunConfig, load_config
from .dataio import (
    Catalog,
    DataFormatError,
    PreprocessConfig,
    build_sequences,
    dataset_stats,
    k_core_filter,
    leave_one_out_split,
    load_interactions,
    read_split,
    write_interactions,
    write_split,
)
from .denoiser import read_mask_dump, write_mask_dump
from .evaluation import (
    SyntheticSpec,
    eval_masks,
    evaluate,
    generate_synthetic,
    noise_recovery,
    read_noise_labels,
    write_noise_labels,
)
from .semantic import (
    PrefixProvider,
    SemanticFormatError,
    load_prefix_file,
    load_semantic_table,
    pseudo_embed,
    write_semantic_table,
)
from .diffcompute import checkpoint as ckpt
from .trainer import DivergenceError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("seqdn")

EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    """Bad or missing user input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _stats_line(stats: dict) -> str:
    return (
        f"users {stats['users']}  items {stats['items']}  actions {stats['actions']}  "
        f"avg_len {stats['avg_len']:.2f}  sparsity {stats['sparsity']:.4%}"
    )


def _load_split(path):
    if path is None:
        raise InputError("no split manifest given (use --split or paths.split)")
    if not Path(path).exists():
        raise InputError(f"split manifest not found: {path}")
    return read_split(path)


def _semantics(path, catalog: Catalog) -> np.ndarray:
    if path is None:
        raise InputError("no semantic table given (use --semantic or paths.semantic)")
    if not Path(path).exists():
        raise InputError(f"semantic table not found: {path}")
    return load_semantic_table(path, catalog).aligned(catalog)


def _provider(mode: str, path) -> PrefixProvider:
    if mode == "exact_file":
        if path is None:
            raise InputError("prefix_mode exact_file needs --prefix")
        return load_prefix_file(path)
    return PrefixProvider(mode=mode)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _train_config(args) -> RunConfig:
    cfg = load_config(args.config)
    over: dict[str, dict] = {}
    for flag, (section, key) in {
        "seed": ("train", "seed"),
        "lr": ("train", "lr"),
        "max_epochs": ("train", "max_epochs"),
        "patience": ("train", "patience"),
        "batch_size": ("train", "batch_size"),
        "theta": ("gate", "theta"),
        "split": ("paths", "split"),
        "semantic": ("paths", "semantic"),
        "prefix": ("paths", "prefix"),
    }.items():
        v = getattr(args, flag, None)
        if v is not None:
            over.setdefault(section, {})[key] = v
    return cfg.with_overrides(**over)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    events = load_interactions(args.input, args.format)
    if not events:
        raise InputError(f"{args.input}: no interactions")
    cfg = PreprocessConfig(k_core=args.k_core, max_len=args.max_len)
    filtered = k_core_filter(events, cfg.k_core)
    if not filtered:
        raise InputError(f"{args.input}: nothing survives {cfg.k_core}-core filtering")
    catalog, seqs = build_sequences(filtered, cfg)
    split = leave_one_out_split(seqs, cfg, n_items=catalog.n_items)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_split(out / "split.jsonl", split, catalog)
    stats = dataset_stats(filtered)
    _write(out / "stats.txt", "".join(f"{k}: {v}\n" for k, v in stats.items()))
    print(_stats_line(stats))
    return 0


def cmd_embed(args) -> int:
    _, catalog = _load_split(args.catalog)
    if args.mode == "pseudo":
        table = pseudo_embed(catalog, args.dim, args.seed)
    else:
        if args.input is None:
            raise InputError("--mode import needs --input")
        table = load_semantic_table(args.input, catalog)
        table.aligned(catalog)  # every catalog item must be covered
    write_semantic_table(args.out, table, binary=args.binary)
    print(f"wrote {len(table)} vectors of dimension {table.dim} to {args.out}")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_users=args.n_users,
        n_items=args.n_items,
        n_clusters=args.n_clusters,
        min_len=args.min_len,
        max_len=args.max_len,
        noise_rate=args.noise_rate,
        seed=args.seed,
        sem_dim=args.sem_dim,
    )
    data = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(out / "interactions.tsv", data.events)
    write_noise_labels(out / "noise_labels.tsv", data.labels)
    write_semantic_table(out / "semantic.semb", data.semantics)
    n_noise = sum(sum(v) for v in data.labels.values())
    print(f"{len(data.events)} interactions, {n_noise} noise positions, written to {out}")
    return 0


def cmd_train(args) -> int:
    run = _train_config(args)
    split, catalog = _load_split(run.paths.split)
    sem = _semantics(run.paths.semantic, catalog)
    provider = _provider(run.semantic.prefix_mode, run.paths.prefix)
    cfg = run.train_config()
    out = Path(args.out_dir)
    meta = {
        "run_config": run.to_dict(),
        "run_config_hash": run.hash(),
        "split": str(Path(run.paths.split).resolve()),
        "semantic": str(Path(run.paths.semantic).resolve()),
        "prefix": str(Path(run.paths.prefix).resolve()) if run.paths.prefix else None,
        "prefix_mode": run.semantic.prefix_mode,
    }
    res = train(
        split, sem, cfg, provider=provider, user_ids=catalog.user_ids,
        out_dir=out, mask_dump=args.dump_masks, log_every=args.verbose, checkpoint_meta=meta,
    )
    masks, _, _ = eval_masks(res.model, split, "train")
    write_mask_dump(out / "train_masks.txt", [(catalog.user_ids[u], res.best_epoch, masks[u]) for u in split.users])
    print(f"best epoch {res.best_epoch}, valid NDCG@10 {res.best_valid_ndcg10:.4f}, config {run.hash()}")
    return 0


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        raise InputError(f"checkpoint not found: {args.checkpoint}")
    _, meta = ckpt.load(args.checkpoint)
    split_path = args.split or meta.get("split")
    split, catalog = _load_split(split_path)
    sem = _semantics(args.semantic or meta.get("semantic"), catalog)
    provider = _provider(meta.get("prefix_mode", "mean_pool_surrogate"), args.prefix or meta.get("prefix"))
    model, meta = load_checkpoint(args.checkpoint, sem, split.n_items, provider, catalog.user_ids)
    report = evaluate(model, split, which=args.which, bucket_mode=args.bucket_mode)
    report.extra["config_hash"] = meta.get("config_hash", "")
    out = Path(args.out)
    _write(out / "metrics.txt", report.to_text())
    _write(out / "metrics.csv", report.to_csv())
    sys.stdout.write(report.to_text())
    return 0


def _align_masks(masks: dict[str, np.ndarray], labels: dict[str, list[int]]) -> tuple[dict, dict]:
    """Pair each mask with the label positions it covers.

    A mask as long as the full sequence covers all of it; a shorter mask covers
    the train window, which ends two positions before the sequence end.
    """
    m_out, l_out = {}, {}
    for uid, m in masks.items():
        if uid not in labels:
            raise InputError(f"no noise labels for user {uid}")
        lab = labels[uid]
        if len(m) == len(lab):
            l_out[uid] = lab
        elif len(m) <= len(lab) - 2:
            end = len(lab) - 2
            l_out[uid] = lab[end - len(m) : end]
        else:
            raise InputError(f"user {uid}: mask of length {len(m)} cannot cover {len(lab)} labels")
        m_out[uid] = m
    return m_out, l_out


def cmd_report(args) -> int:
    out = Path(args.out)
    rows_written = []
    if args.history:
        with open(args.history, encoding="utf-8") as fh:
            hist = list(csv.DictReader(fh))
        if not hist:
            raise InputError(f"{args.history}: empty history")
        best = max(hist, key=lambda r: float(r["valid_NDCG@10"]))
        lines = ["metric,value", f"epochs,{len(hist)}", f"best_epoch,{best['epoch']}",
                 f"best_valid_NDCG@10,{best['valid_NDCG@10']}", f"final_denoise_ratio,{hist[-1]['denoise_ratio']}"]
        _write(out / "history_summary.csv", "\n".join(lines) + "\n")
        rows_written.append("history_summary.csv")
    if args.metrics:
        kv = {}
        for line in Path(args.metrics).read_text(encoding="utf-8").splitlines():
            k, _, v = line.partition(": ")
            kv[k] = v
        buckets = sorted(k for k in kv if k.startswith("bucket") and k.endswith("_NDCG@5"))
        text = "bucket,NDCG@5\n" + "".join(f"{k[len('bucket'):].split('_')[0]},{kv[k]}\n" for k in buckets)
        text += f"# denoise_ratio,{kv.get('denoise_ratio', '')}\n# bucket_mode,{kv.get('bucket_mode', '')}\n"
        _write(out / "buckets.csv", text)
        rows_written.append("buckets.csv")
    if args.masks and args.labels:
        dump = read_mask_dump(args.masks)
        latest: dict[str, tuple[int, np.ndarray]] = {}
        for uid, epoch, m in dump:
            if args.epoch is not None and epoch != args.epoch:
                continue
            if uid not in latest or epoch >= latest[uid][0]:
                latest[uid] = (epoch, m)
        masks, labels = _align_masks({u: m for u, (_, m) in latest.items()}, read_noise_labels(args.labels))
        nr = noise_recovery(masks, labels)
        fmt = lambda v: "undefined" if v is None else repr(v)
        text = "flagged,noise,hits,precision,recall,F1\n"
        text += f"{nr.flagged},{nr.noise},{nr.hits},{fmt(nr.precision)},{fmt(nr.recall)},{fmt(nr.f1)}\n"
        _write(out / "noise_recovery.csv", text)
        rows_written.append("noise_recovery.csv")
    if not rows_written:
        raise InputError("report needs --history, --metrics, or --masks with --labels")
    for name in rows_written:
        print(f"== {name}")
        sys.stdout.write((out / name).read_text(encoding="utf-8"))
    return 0


def cmd_sweep(args) -> int:
    run = _train_config(args)
    split, catalog = _load_split(run.paths.split)
    sem = _semantics(run.paths.semantic, catalog)
    provider = _provider(run.semantic.prefix_mode, run.paths.prefix)
    base = run.train_config()
    seeds = args.seeds if args.seeds else [base.seed]
    outcomes = {}
    for theta in args.thetas:
        reports = []
        for seed in seeds:
            cfg = replace(base, seed=seed, gate=replace(base.gate, theta=theta))
            res = train(split, sem, cfg, provider=provider, user_ids=catalog.user_ids)
            reports.append(evaluate(res.model, split))
        outcomes[theta] = reports
    text = sweep_csv(sweep_rows(outcomes))
    _write(Path(args.out), text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="seqdn", description="Interest-aligned sequence denoising for next-item recommendation.", formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="k-core filter, build sequences, leave-one-out split", formatter_class=fmt)
    s.add_argument("--input", required=True, help="interaction file")
    s.add_argument("--format", choices=["tsv", "movielens"], default="tsv", help="input layout")
    s.add_argument("--out", required=True, help="output directory for split.jsonl and stats.txt")
    s.add_argument("--k-core", type=int, default=5, help="minimum interactions per user and item")
    s.add_argument("--max-len", type=int, default=32, help="newest items kept per evaluation prefix")
    s.set_defaults(fn=cmd_prepare)

    s = sub.add_parser("embed", help="write a semantic table (pseudo vectors or an imported file)", formatter_class=fmt)
    s.add_argument("--catalog", required=True, help="split manifest whose items need vectors")
    s.add_argument("--mode", choices=["pseudo", "import"], default="pseudo", help="pseudo vectors or import an existing SEMB file")
    s.add_argument("--input", default=None, help="SEMB file to import (import mode)")
    s.add_argument("--dim", type=int, default=64, help="dimension of pseudo vectors")
    s.add_argument("--seed", type=int, default=0, help="seed for pseudo vectors")
    s.add_argument("--binary", action="store_true", help="write the binary SEMB variant")
    s.add_argument("--out", required=True, help="output SEMB path")
    s.set_defaults(fn=cmd_embed)

    d = SyntheticSpec()
    s = sub.add_parser("synth", help="generate the synthetic noise benchmark", formatter_class=fmt)
    s.add_argument("--n-users", type=int, default=d.n_users, help="number of users")
    s.add_argument("--n-items", type=int, default=d.n_items, help="number of items")
    s.add_argument("--n-clusters", type=int, default=d.n_clusters, help="number of item clusters")
    s.add_argument("--min-len", type=int, default=d.min_len, help="shortest sequence")
    s.add_argument("--max-len", type=int, default=d.max_len, help="longest sequence")
    s.add_argument("--noise-rate", type=float, default=d.noise_rate, help="probability that a position is noise")
    s.add_argument("--sem-dim", type=int, default=d.sem_dim, help="dimension of the cluster-correlated semantic vectors")
    s.add_argument("--seed", type=int, default=d.seed, help="generator seed")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_synth)

    def train_flags(s):
        s.add_argument("--config", default=None, help="JSON run config (defaults when omitted)")
        s.add_argument("--split", default=None, help="split manifest (overrides paths.split)")
        s.add_argument("--semantic", default=None, help="SEMB file (overrides paths.semantic)")
        s.add_argument("--prefix", default=None, help="SPFX file for exact prefix vectors")
        s.add_argument("--seed", type=int, default=None, help="seed (falls back to config, then $SEQDN_SEED)")
        s.add_argument("--lr", type=float, default=None, help="learning rate override")
        s.add_argument("--max-epochs", type=int, default=None, help="epoch cap override")
        s.add_argument("--patience", type=int, default=None, help="early-stopping patience override")
        s.add_argument("--batch-size", type=int, default=None, help="batch size override")
        s.add_argument("--theta", type=float, default=None, help="user gate threshold override")

    s = sub.add_parser("train", help="train and write checkpoint, history and masks", formatter_class=fmt)
    train_flags(s)
    s.add_argument("--out-dir", required=True, help="output directory")
    s.add_argument("--dump-masks", action="store_true", help="also write every epoch's training masks to masks.txt")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="rank held-out items and write a metrics report", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="model checkpoint")
    s.add_argument("--split", default=None, help="split manifest (defaults to the one used in training)")
    s.add_argument("--semantic", default=None, help="SEMB file (defaults to the one used in training)")
    s.add_argument("--prefix", default=None, help="SPFX file (exact prefix mode)")
    s.add_argument("--which", choices=["valid", "test"], default="test", help="held-out part to score")
    s.add_argument("--bucket-mode", choices=["items", "interactions"], default="items", help="popularity bucket construction")
    s.add_argument("--out", default=".", help="directory for metrics.txt and metrics.csv")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("report", help="bucket and noise-recovery tables as CSV", formatter_class=fmt)
    s.add_argument("--history", default=None, help="history.csv from train")
    s.add_argument("--metrics", default=None, help="metrics.txt from eval")
    s.add_argument("--masks", default=None, help="mask dump (train_masks.txt or masks.txt)")
    s.add_argument("--labels", default=None, help="noise_labels.tsv from synth")
    s.add_argument("--epoch", type=int, default=None, help="mask epoch to score (latest when omitted)")
    s.add_argument("--out", default=".", help="output directory")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("sweep", help="train over a grid of gate thresholds", formatter_class=fmt)
    train_flags(s)
    s.add_argument("--thetas", type=float, nargs="+", default=list(SWEEP_THETAS), help="threshold grid")
    s.add_argument("--seeds", type=int, nargs="+", default=None, help="seeds averaged per threshold")
    s.add_argument("--out", required=True, help="CSV output path")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except DivergenceError as exc:
        print(f"seqdn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, DataFormatError, SemanticFormatError, ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"seqdn: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
