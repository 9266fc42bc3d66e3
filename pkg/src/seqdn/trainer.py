"""Joint training: progressive masking, alignment, reconstruction, early stopping."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcompute as dc
from .alignment import AlignConfig, alignment_loss
from .dataio import DatasetSplit
from .denoiser import GateConfig, denoise_ratio, write_mask_dump
from .diffcompute import Tensor, checkpoint
from .evaluation import evaluate
from .model import (
    DenoisingRecommender,
    ModelConfig,
    ScoreTerms,
    SeqBatch,
    interests,
    make_batch,
    masked_input,
    recon_loss,
    reconstruct,
    run_encoder,
    sample_masks,
    semantic_rows,
)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = [
    "epoch", "L_CE", "L_long", "L_short", "L_recon", "L_total",
    "valid_HR@10", "valid_NDCG@10", "denoise_ratio",
]


class DivergenceError(FloatingPointError):
    """A loss term became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    w_ce: float = 1.0
    w_info: float = 1.0
    w_recon: float = 1.0
    disable_info: bool = False
    disable_recon: bool = False
    long_only: bool = False
    short_only: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    align: AlignConfig = field(default_factory=AlignConfig)

    def __post_init__(self):
        if min(self.w_ce, self.w_info, self.w_recon) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.long_only and self.short_only:
            raise ValueError("long_only and short_only are exclusive")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")

    def weights(self) -> tuple[float, float, float]:
        return (
            self.w_ce,
            0.0 if self.disable_info else self.w_info,
            0.0 if self.disable_recon else self.w_recon,
        )

    def terms(self) -> ScoreTerms:
        if self.long_only:
            return ScoreTerms(c1=True, c2=True, c3=False)
        if self.short_only:
            return ScoreTerms(c1=False, c2=False, c3=True)
        return ScoreTerms()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sub = {"model": ModelConfig, "gate": GateConfig, "align": AlignConfig}
        for k, typ in sub.items():
            if k in d and isinstance(d[k], dict):
                d[k] = typ(**d[k])
        return cls(**d)


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# masks and losses
# ---------------------------------------------------------------------------


class EpochMaskStore:
    """Previous-epoch keep masks per user; unknown users read as all-ones."""

    def __init__(self):
        self._masks: dict[int, np.ndarray] = {}

    def get(self, user: int, length: int, warn: bool = False) -> np.ndarray:
        m = self._masks.get(user)
        if m is None:
            if warn:
                log.warning("no stored mask for user %d; using all-ones", user)
            return np.ones(length)
        if len(m) != length:
            raise ValueError(f"stored mask for user {user} has length {len(m)}, expected {length}")
        return m

    def update(self, masks: dict[int, np.ndarray]) -> None:
        self._masks.update({u: np.asarray(m, dtype=np.float64).copy() for u, m in masks.items()})

    def __contains__(self, user: int) -> bool:
        return user in self._masks

    def __len__(self) -> int:
        return len(self._masks)


def check_finite(parts: dict[str, Tensor]) -> None:
    for name, t in parts.items():
        if not np.all(np.isfinite(t.data)):
            raise DivergenceError(f"loss term {name} is not finite ({t.data})")


def total_loss(parts: dict[str, Tensor], weights: tuple[float, float, float]) -> Tensor:
    """w_ce * L_CE + w_info * L_info + w_recon * L_recon; zero-weight terms are left out."""
    check_finite(parts)
    out = None
    for name, w in zip(("L_CE", "L_info", "L_recon"), weights):
        if w == 0:
            continue
        term = parts[name] if w == 1 else dc.scalar_mul(parts[name], w)
        out = term if out is None else out + term
    return out if out is not None else Tensor(0.0)


def next_item_targets(batch: SeqBatch, keep_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(state rows, target items) for next-item prediction inside each window.

    Every step predicts its successor. Successors dropped by the previous
    mask are skipped, except the window's final item.
    """
    T, B = batch.idx.shape
    rows, targets = [], []
    for t in range(T - 1):
        for b in range(B):
            if not batch.real[t, b]:
                continue
            if keep_prev[t + 1, b] == 0 and t + 1 != T - 1:
                continue
            rows.append(t * B + b)
            targets.append(batch.idx[t + 1, b])
    return np.array(rows, dtype=np.int64), np.array(targets, dtype=np.int64)


@dataclass
class StepResult:
    parts: dict[str, Tensor]
    total: Tensor
    masks: dict[int, np.ndarray]
    gated: set[int]


def batch_losses(
    model: DenoisingRecommender,
    batch: SeqBatch,
    keep_prev: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    tau: float,
) -> StepResult:
    """All loss terms for one batch plus the freshly sampled hard masks."""
    w_ce, w_info, w_recon = cfg.weights()
    need_denoise = model.gate.theta <= 1.0

    # collaborative pass on the original sequence: interests, scores, reconstruction
    out = run_encoder(model, batch)
    sem = semantic_rows(model, batch)
    bundle = interests(model, batch, out, sem)
    use_long = not cfg.short_only
    use_short = not cfg.long_only
    l_long, l_short, l_info = alignment_loss(bundle, cfg.align, use_long, use_short)

    masks: dict[int, np.ndarray] = {}
    gated: set[int] = set()
    l_recon = Tensor(0.0)
    if need_denoise:
        bm = sample_masks(model, batch, bundle, rng, tau)
        for b, u in enumerate(batch.users):
            masks[u] = batch.grid_to_window(bm.grid, b).copy()
            if bm.gated[b]:
                gated.add(u)
        rows, keep = _gated_rows(batch, bm)
        if rows.size:
            h = dc.gather_rows(out.stacked(), rows)
            x_hat = reconstruct(h, keep, model.decoder)
            target = model.encoder.item_emb.data[batch.idx.reshape(-1)[rows]]
            l_recon = recon_loss(x_hat, target, int(bm.gated.sum()))
    else:
        for b, u in enumerate(batch.users):
            masks[u] = np.ones(int(batch.lengths[b]))

    # next-item prediction on the previous epoch's denoised input
    if np.all(keep_prev[batch.real] == 1):
        ce_out = out
    else:
        ce_out = run_encoder(model, batch, keep_prev)
    rows, targets = next_item_targets(batch, keep_prev)
    logits = model.encoder.logits(dc.gather_rows(ce_out.stacked(), rows))
    l_ce = dc.softmax_cross_entropy(logits, targets - 1)

    parts = {"L_CE": l_ce, "L_long": l_long, "L_short": l_short, "L_info": l_info, "L_recon": l_recon}
    total = total_loss(parts, (w_ce, w_info, w_recon))
    return StepResult(parts=parts, total=total, masks=masks, gated=gated)


def _gated_rows(batch: SeqBatch, bm) -> tuple[np.ndarray, Tensor]:
    """Real rows of gated users and their keep values (sampled for prefixes, 1 for the final step)."""
    T, B = batch.idx.shape
    prefix_pos = {int(r): k for k, r in enumerate(batch.prefix_rows)}
    rows, src = [], []
    M = len(batch.prefix_rows)
    for b in np.flatnonzero(bm.gated):
        for r in batch.window_rows(int(b)):
            rows.append(int(r))
            src.append(prefix_pos.get(int(r), M))
    rows = np.array(rows, dtype=np.int64)
    if not rows.size:
        return rows, Tensor(np.zeros(0))
    ext = dc.concat([dc.reshape(bm.keep, (M, 1)), Tensor(np.ones((1, 1)))], axis=0) if M else Tensor(np.ones((1, 1)))
    keep = dc.reshape(dc.gather_rows(ext, np.array(src, dtype=np.int64)), (len(src),))
    return rows, keep


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DenoisingRecommender
    history: list[dict]
    best_epoch: int
    best_valid_ndcg10: float
    masks: dict[int, np.ndarray]

    def history_csv(self) -> str:
        return history_csv(self.history)


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def build_model(split: DatasetSplit, sem_table: np.ndarray, cfg: TrainConfig, provider=None, user_ids=None) -> DenoisingRecommender:
    return DenoisingRecommender(
        split.n_items,
        sem_table,
        cfg.model,
        seed=cfg.seed,
        gate=cfg.gate,
        terms=cfg.terms(),
        provider=provider,
        user_ids=user_ids,
    )


def train(
    split: DatasetSplit,
    sem_table: np.ndarray,
    cfg: TrainConfig,
    provider=None,
    user_ids: list[str] | None = None,
    out_dir=None,
    mask_dump: bool = False,
    log_every: bool = False,
    checkpoint_meta: dict | None = None,
) -> TrainResult:
    """Train with early stopping on validation NDCG@10; the best parameters are restored."""
    model = build_model(split, sem_table, cfg, provider, user_ids)
    params = list(model.named_parameters().values())
    adam = dc.AdamState(lr=cfg.lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    gumbel_rng = np.random.default_rng([cfg.seed, 3])
    store = EpochMaskStore()
    users = split.users
    windows = {u: split.train[u][-split.max_len :] for u in users}
    offsets = {u: len(split.train[u]) - len(windows[u]) for u in users}
    w_ce, w_info, w_recon = cfg.weights()

    history: list[dict] = []
    dumps: list[tuple[str, int, np.ndarray]] = []
    best, best_epoch, best_state, bad = -math.inf, -1, model.state(), 0
    for epoch in range(cfg.max_epochs):
        tau = cfg.gate.tau_at(epoch, cfg.max_epochs)
        order = shuffle_rng.permutation(len(users))
        sums = dict.fromkeys(("L_CE", "L_long", "L_short", "L_recon", "L_total"), 0.0)
        n_batches = 0
        new_masks: dict[int, np.ndarray] = {}
        gated: set[int] = set()
        for s in range(0, len(order), cfg.batch_size):
            chunk = [users[i] for i in order[s : s + cfg.batch_size]]
            batch = make_batch(chunk, [windows[u] for u in chunk], [offsets[u] for u in chunk])
            keep_prev = np.zeros(batch.idx.shape)
            for b, u in enumerate(chunk):
                n = int(batch.lengths[b])
                keep_prev[batch.T - n :, b] = store.get(u, n)
            step = batch_losses(model, batch, keep_prev, cfg, gumbel_rng, tau)
            dc.backward(step.total)
            model.encoder.freeze_padding_grad()
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            dc.adam_step(params, adam)
            new_masks.update(step.masks)
            gated |= step.gated
            for k in ("L_CE", "L_long", "L_short", "L_recon"):
                sums[k] += step.parts[k].item()
            sums["L_total"] += step.total.item()
            n_batches += 1
        if epoch >= cfg.gate.warmup_epochs:
            store.update(new_masks)
        if mask_dump:
            for u in users:
                dumps.append((model.user_key(u), epoch, new_masks[u]))

        valid = evaluate(model, split, which="valid", ks=(10,))
        row = {"epoch": epoch}
        row.update({k: v / n_batches for k, v in sums.items()})
        row["valid_HR@10"] = valid.hr[10]
        row["valid_NDCG@10"] = valid.ndcg[10]
        row["denoise_ratio"] = denoise_ratio(new_masks, gated)
        history.append(row)
        if log_every:
            log.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in row.items()})

        if valid.ndcg[10] > best:
            best, best_epoch, best_state, bad = valid.ndcg[10], epoch, model.state(), 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break

    model.load_state(best_state)
    result = TrainResult(
        model=model,
        history=history,
        best_epoch=best_epoch,
        best_valid_ndcg10=best,
        masks={u: store.get(u, len(windows[u])) for u in users},
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.ckpt", model, cfg, best_epoch, best, checkpoint_meta)
        (out / "history.csv").write_text(result.history_csv(), encoding="utf-8")
        if mask_dump:
            write_mask_dump(out / "masks.txt", dumps)
    return result


def save_checkpoint(path, model: DenoisingRecommender, cfg: TrainConfig, epoch: int, best: float, extra: dict | None = None) -> None:
    meta = {
        "epoch": epoch,
        "best_valid_NDCG@10": best,
        "config_hash": config_hash(cfg),
        "config": cfg.to_dict(),
    }
    if extra:
        meta.update(extra)
    checkpoint.save(path, model.state(), meta)


def load_checkpoint(path, sem_table: np.ndarray, n_items: int, provider=None, user_ids=None) -> tuple[DenoisingRecommender, dict]:
    state, meta = checkpoint.load(path)
    cfg = TrainConfig.from_dict(meta["config"])
    model = DenoisingRecommender(
        n_items, sem_table, cfg.model, seed=cfg.seed, gate=cfg.gate, terms=cfg.terms(),
        provider=provider, user_ids=user_ids,
    )
    model.load_state(state)
    return model, meta


def baseline_config(cfg: TrainConfig) -> TrainConfig:
    """Plain next-item training: no alignment, no reconstruction, nobody gated."""
    return replace(cfg, w_info=0.0, w_recon=0.0, gate=replace(cfg.gate, theta=1.5))
