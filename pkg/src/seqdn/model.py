"""The full denoising recommender: parameters plus the batched forward pieces
shared by training and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcompute as dc
from .alignment import InterestBundle
from .denoiser import GateConfig, gumbel_sigmoid, item_scores, user_gate
from .diffcompute import Tensor
from .encoder import EncoderOutput, GRUEncoder, embed_sequence, left_pad
from .semantic import PrefixProvider, SemanticProjection, prefix_vectors, project

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    d_emb: int = 64
    d_hidden: int = 128
    n_layers: int = 2

    def __post_init__(self):
        if min(self.d_emb, self.d_hidden, self.n_layers) < 1:
            raise ValueError("model dimensions must be positive")


@dataclass(frozen=True)
class ScoreTerms:
    """Which cosines enter the per-step noise score."""

    c1: bool = True
    c2: bool = True
    c3: bool = True


class Decoder:
    """Per-step affine map from hidden states back to item-embedding space."""

    def __init__(self, d_hidden: int, d_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(d_hidden)
        self.W = dc.parameter(rng.uniform(-bound, bound, size=(d_hidden, d_out)), name="decoder.W")
        self.b = dc.parameter(np.zeros(d_out), name="decoder.b")

    def named_parameters(self) -> dict[str, Tensor]:
        return {"decoder.W": self.W, "decoder.b": self.b}

    def __call__(self, h: Tensor) -> Tensor:
        return dc.add_bias(h @ self.W, self.b)


def reconstruct(h: Tensor, keep: Tensor, decoder: Decoder) -> Tensor:
    """Decode each hidden row after scaling it by its keep value."""
    return decoder(dc.mul_rows(h, keep))


def recon_loss(x_hat: Tensor, target: np.ndarray, n_users: int) -> Tensor:
    """Squared error summed over rows and dims, divided by the number of users.

    ``target`` is plain data, so no gradient reaches the original embeddings.
    """
    if n_users == 0:
        log.warning("recon_loss: no gated users, loss defined as 0")
        return Tensor(0.0)
    diff = x_hat - Tensor(np.asarray(target, dtype=np.float64))
    return dc.scalar_mul(dc.sum_(diff * diff), 1.0 / n_users)


class DenoisingRecommender:
    def __init__(
        self,
        n_items: int,
        sem_table: np.ndarray,
        cfg: ModelConfig = ModelConfig(),
        seed: int = 0,
        gate: GateConfig = GateConfig(),
        terms: ScoreTerms = ScoreTerms(),
        provider: PrefixProvider | None = None,
        user_ids: list[str] | None = None,
    ):
        sem_table = np.asarray(sem_table, dtype=np.float64)
        if sem_table.shape[0] != n_items + 1:
            raise ValueError(f"semantic table has {sem_table.shape[0]} rows, expected {n_items + 1}")
        self.cfg = cfg
        self.n_items = n_items
        self.sem_table = sem_table
        self.gate = gate
        self.terms = terms
        self.provider = provider if provider is not None else PrefixProvider()
        self.user_ids = user_ids
        self.encoder = GRUEncoder(n_items, cfg.d_emb, cfg.d_hidden, cfg.n_layers, rng=np.random.default_rng([seed, 0]))
        rng = np.random.default_rng([seed, 1])
        self.proj = SemanticProjection(sem_table.shape[1], cfg.d_hidden, rng)
        self.decoder = Decoder(cfg.d_hidden, cfg.d_emb, rng)

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.encoder.named_parameters()
        out.update(self.proj.named_parameters())
        out.update(self.decoder.named_parameters())
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state lacks parameters: {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def user_key(self, user: int) -> str:
        return self.user_ids[user] if self.user_ids is not None else str(user)


@dataclass
class SeqBatch:
    """Left-padded windows of several users plus prefix bookkeeping.

    Prefix k covers the first ``step[k] + 1`` items of user ``owner[k]``'s
    window; only steps before the last one get a prefix (the final step is
    never scored and always kept).
    """

    users: list[int]
    idx: np.ndarray  # (T, B)
    lengths: np.ndarray  # (B,)
    offsets: np.ndarray  # (B,) items preceding each window in the full sequence

    def __post_init__(self):
        T, B = self.idx.shape
        owner, step, rows = [], [], []
        for b, n in enumerate(self.lengths):
            for j in range(n - 1):
                owner.append(b)
                step.append(j)
                rows.append((T - n + j) * B + b)
        self.owner = np.array(owner, dtype=np.int64)
        self.step = np.array(step, dtype=np.int64)
        self.prefix_rows = np.array(rows, dtype=np.int64)
        self.real = self.idx != 0

    @property
    def T(self) -> int:
        return self.idx.shape[0]

    @property
    def B(self) -> int:
        return self.idx.shape[1]

    def window_rows(self, b: int) -> np.ndarray:
        """Flat time-major rows of user b's real steps, oldest first."""
        n = int(self.lengths[b])
        return (np.arange(self.T - n, self.T) * self.B + b).astype(np.int64)

    def grid_to_window(self, grid: np.ndarray, b: int) -> np.ndarray:
        n = int(self.lengths[b])
        return np.asarray(grid)[self.T - n :, b]


def make_batch(users, windows, offsets=None) -> SeqBatch:
    windows = [list(w) for w in windows]
    if any(len(w) == 0 for w in windows):
        raise ValueError("empty sequence window")
    offsets = np.zeros(len(windows), dtype=np.int64) if offsets is None else np.asarray(offsets, dtype=np.int64)
    return SeqBatch(
        users=list(users),
        idx=left_pad(windows),
        lengths=np.array([len(w) for w in windows], dtype=np.int64),
        offsets=offsets,
    )


def masked_input(items, keep, table: Tensor) -> Tensor:
    """Original embeddings of ``items`` scaled row-wise by ``keep``; never compounds across epochs."""
    x = embed_sequence(items, table)
    return dc.mul_rows(x, Tensor(np.asarray(keep, dtype=np.float64).reshape(-1)))


def run_encoder(model: DenoisingRecommender, batch: SeqBatch, keep: np.ndarray | None = None) -> EncoderOutput:
    """Encode the batch; ``keep`` (T, B) zeroes dropped inputs and holds the state across them."""
    mask = batch.real.astype(np.float64)
    if keep is None:
        x = embed_sequence(batch.idx.reshape(-1), model.encoder.item_emb)
    else:
        mask = mask * keep
        x = masked_input(batch.idx.reshape(-1), mask, model.encoder.item_emb)
    return model.encoder.encode(x, batch.B, mask)


def semantic_rows(model: DenoisingRecommender, batch: SeqBatch) -> tuple[np.ndarray, np.ndarray]:
    """Raw semantic vectors: one per prefix (M, D) and one per whole window (B, D)."""
    D = model.sem_table.shape[1]
    pref, whole = [], []
    for b, u in enumerate(batch.users):
        window = batch.grid_to_window(batch.idx, b)
        v = prefix_vectors(model.provider, model.user_key(u), window, model.sem_table, int(batch.offsets[b]))
        pref.append(v[:-1])
        whole.append(v[-1])
    l_raw = np.concatenate(pref, axis=0) if pref else np.zeros((0, D))
    return l_raw.reshape(-1, D), np.array(whole).reshape(-1, D)


def interests(model: DenoisingRecommender, batch: SeqBatch, out: EncoderOutput, sem=None) -> InterestBundle:
    l_raw, e1_raw = sem if sem is not None else semantic_rows(model, batch)
    h_all = out.stacked()
    return InterestBundle(
        e1=project(model.proj, e1_raw),
        e2=out.e2,
        l=project(model.proj, l_raw),
        h=dc.gather_rows(h_all, batch.prefix_rows),
        owner=batch.owner,
        step=batch.step,
    )


@dataclass
class BatchMasks:
    gated: np.ndarray  # (B,) bool
    keep: Tensor  # (M,) per-prefix keep values, straight-through when sampled
    grid: np.ndarray  # (T, B) hard keep mask; padding rows are 0


def sample_masks(
    model: DenoisingRecommender,
    batch: SeqBatch,
    bundle: InterestBundle,
    rng: np.random.Generator | None,
    tau: float | None = None,
) -> BatchMasks:
    """Gate users and draw keep/drop masks; ``rng=None`` gives the noiseless mask."""
    gated = np.asarray(user_gate(bundle.e1.data, bundle.e2.data, model.gate.theta), dtype=bool).reshape(-1)
    grid = batch.real.astype(np.float64)
    if bundle.n_prefixes == 0:
        return BatchMasks(gated=gated, keep=Tensor(np.zeros(0)), grid=grid)
    t = model.terms
    scores = item_scores(bundle, use_c1=t.c1, use_c2=t.c2, use_c3=t.c3)
    m, _ = gumbel_sigmoid(scores.score, model.gate, rng, tau=tau)
    hard = m.data
    on = gated[batch.owner]
    T, B = batch.idx.shape
    flat = grid.reshape(-1)
    flat[batch.prefix_rows[on]] = hard[on]
    return BatchMasks(gated=gated, keep=m, grid=flat.reshape(T, B))


def denoised_logits(model: DenoisingRecommender, batch: SeqBatch, denoise: bool = True) -> tuple[np.ndarray, BatchMasks | None]:
    """Scores over items 1..n for each window's next item, after the noiseless mask."""
    with dc.no_grad():
        out = run_encoder(model, batch)
        masks = None
        if denoise:
            masks = sample_masks(model, batch, interests(model, batch, out), rng=None)
            if masks.gated.any():
                out = run_encoder(model, batch, masks.grid)
        return model.encoder.logits(out.e2).data, masks
