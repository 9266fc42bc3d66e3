"""Synthetic experiments: ablations, threshold sweeps and noise recovery runs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

from .dataio import Catalog, DatasetSplit, PreprocessConfig, prepare
from .evaluation import (
    MetricsReport,
    NoiseRecovery,
    SyntheticSpec,
    eval_masks,
    evaluate,
    generate_synthetic,
    noise_recovery,
    window_labels,
)
from .model import ModelConfig
from .trainer import TrainConfig, TrainResult, baseline_config, train

SWEEP_THETAS = (-0.9, -0.5, -0.1, 0.3, 0.7, 0.9)

# Ablation name -> config transform. "w/o both" keeps the denoiser running
# with untrained scores; "plain" switches gating off entirely.
ABLATIONS = {
    "full": lambda c: c,
    "w/o both": lambda c: replace(c, w_info=0.0, w_recon=0.0),
    "w/o info": lambda c: replace(c, disable_info=True),
    "w/o recon": lambda c: replace(c, disable_recon=True),
    "long only": lambda c: replace(c, long_only=True),
    "short only": lambda c: replace(c, short_only=True),
    "plain": baseline_config,
}


def benchmark_config(seed: int = 0, **overrides) -> TrainConfig:
    """Training setup used for the synthetic benchmark.

    Smaller than the production defaults so that dozens of runs fit on one
    CPU core: 32/64 dimensions, lr 1e-2, at most 15 epochs, patience 4.
    """
    base = TrainConfig(
        lr=1e-2,
        max_epochs=15,
        patience=4,
        seed=seed,
        model=ModelConfig(d_emb=32, d_hidden=64, n_layers=2),
    )
    return replace(base, **overrides)


@dataclass
class Benchmark:
    catalog: Catalog
    split: DatasetSplit
    sem: np.ndarray
    labels: dict[str, list[int]]


def synthetic_benchmark(seed: int, spec: SyntheticSpec | None = None, max_len: int = 32) -> Benchmark:
    spec = replace(spec or SyntheticSpec(), seed=seed)
    data = generate_synthetic(spec)
    catalog, split = prepare(data.events, PreprocessConfig(k_core=5, max_len=max_len))
    return Benchmark(catalog, split, data.semantics.aligned(catalog), data.labels)


@dataclass
class RunOutcome:
    name: str
    seed: int
    result: TrainResult
    report: MetricsReport
    noise_eval: NoiseRecovery  # noiseless masks of the restored model
    noise_train: NoiseRecovery  # sampled masks used as training input in the last epoch


def run_variant(bench: Benchmark, cfg: TrainConfig, name: str = "full") -> RunOutcome:
    res = train(bench.split, bench.sem, cfg, user_ids=bench.catalog.user_ids)
    report = evaluate(res.model, bench.split)
    labels = window_labels(bench.split, bench.catalog.user_ids, bench.labels)
    masks, _, _ = eval_masks(res.model, bench.split, "train")
    train_masks = {u: np.asarray(m, dtype=np.int64) for u, m in res.masks.items()}
    report.noise = noise_recovery(masks, labels)
    return RunOutcome(
        name=name,
        seed=cfg.seed,
        result=res,
        report=report,
        noise_eval=report.noise,
        noise_train=noise_recovery(train_masks, labels),
    )


def random_flag_f1(labels: dict, rate: float, seed: int) -> float | None:
    """F1 of flagging each position independently with probability ``rate``."""
    rng = np.random.default_rng(seed)
    masks = {u: (rng.random(len(v)) >= rate).astype(np.int64) for u, v in labels.items()}
    return noise_recovery(masks, labels).f1


def sweep_rows(reports: dict[float, list[MetricsReport]]) -> list[dict]:
    """Seed-averaged metrics per threshold, in ascending threshold order."""
    rows = []
    for theta in sorted(reports):
        reps = reports[theta]
        rows.append(
            {
                "theta": theta,
                "HR@5": float(np.mean([r.hr[5] for r in reps])),
                "NDCG@5": float(np.mean([r.ndcg[5] for r in reps])),
                "NDCG@10": float(np.mean([r.ndcg[10] for r in reps])),
                "seeds": len(reps),
            }
        )
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["theta", "HR@5", "NDCG@5", "NDCG@10", "seeds"])
    for r in rows:
        w.writerow([repr(r["theta"]), repr(r["HR@5"]), repr(r["NDCG@5"]), repr(r["NDCG@10"]), r["seeds"]])
    return buf.getvalue()


def theta_sweep(
    benches: dict[int, Benchmark],
    base: TrainConfig,
    thetas=SWEEP_THETAS,
    cache: dict | None = None,
) -> dict[float, list[RunOutcome]]:
    """Train one model per (theta, seed); ``cache`` maps (name, seed) to reusable outcomes."""
    out: dict[float, list[RunOutcome]] = {}
    for theta in thetas:
        for seed, bench in benches.items():
            cfg = replace(base, seed=seed, gate=replace(base.gate, theta=theta))
            key = ("full", seed) if theta == base.gate.theta else (f"theta={theta}", seed)
            if cache is not None and key in cache:
                run = cache[key]
            else:
                run = run_variant(bench, cfg, key[0])
                if cache is not None:
                    cache[key] = run
            out.setdefault(theta, []).append(run)
    return out
