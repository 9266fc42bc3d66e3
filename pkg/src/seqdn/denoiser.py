"""User gating, per-step noise scores and Gumbel-Sigmoid keep/drop masks."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcompute as dc
from .alignment import InterestBundle
from .diffcompute import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GateConfig:
    theta: float = -0.9
    tau_gumbel: float = 1.0
    tau_gumbel_final: float | None = None  # linear anneal target; None = constant
    hard: bool = True
    eps: float = 1e-10
    warmup_epochs: int = 0

    def __post_init__(self):
        if not self.tau_gumbel > 0:
            raise ValueError("gate.tau_gumbel must be > 0")
        if self.tau_gumbel_final is not None and not self.tau_gumbel_final > 0:
            raise ValueError("gate.tau_gumbel_final must be > 0")
        if self.warmup_epochs < 0:
            raise ValueError("gate.warmup_epochs must be >= 0")

    def tau_at(self, epoch: int, max_epochs: int) -> float:
        if self.tau_gumbel_final is None or max_epochs <= 1:
            return self.tau_gumbel
        frac = min(max(epoch / (max_epochs - 1), 0.0), 1.0)
        return self.tau_gumbel + frac * (self.tau_gumbel_final - self.tau_gumbel)


@dataclass
class NoiseScore:
    c1: Tensor  # cos(e1, h_t)
    c2: Tensor  # cos(e2, l_t)
    c3: Tensor  # cos(h_t, l_t)
    score: Tensor


@dataclass
class NoiseMask:
    hard: np.ndarray  # 0/1 per step
    soft: np.ndarray  # sigmoid values in (0, 1)


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def long_term_similarity(e1, e2) -> np.ndarray:
    """cos(e1, e2) per row (or for a single pair), without gradient."""
    a, b = _as_array(e1), _as_array(e2)
    with dc.no_grad():
        return np.asarray(dc.cosine_similarity(Tensor(a), Tensor(b)).data)


def user_gate(e1, e2, theta: float) -> np.ndarray | bool:
    """True where cos(e1, e2) >= theta; a zero vector never qualifies."""
    a, b = _as_array(e1), _as_array(e2)
    sim = long_term_similarity(a, b)
    zero = (np.linalg.norm(a, axis=-1) == 0) | (np.linalg.norm(b, axis=-1) == 0)
    if np.any(zero):
        log.warning("user_gate: %d zero interest vector(s); treated as unqualified", int(np.sum(zero)))
    gated = (sim >= theta) & ~zero
    return bool(gated) if np.ndim(gated) == 0 else gated


def item_scores(
    bundle: InterestBundle,
    use_c1: bool = True,
    use_c2: bool = True,
    use_c3: bool = True,
) -> NoiseScore:
    """Three cosines per prefix and their sum; disabled terms contribute 0."""
    e1_rows = dc.gather_rows(bundle.e1, bundle.owner)
    e2_rows = dc.gather_rows(bundle.e2, bundle.owner)
    zero = Tensor(np.zeros(bundle.n_prefixes))
    c1 = dc.cosine_similarity(e1_rows, bundle.h) if use_c1 else zero
    c2 = dc.cosine_similarity(e2_rows, bundle.l) if use_c2 else zero
    c3 = dc.cosine_similarity(bundle.h, bundle.l) if use_c3 else zero
    hz = np.linalg.norm(bundle.h.data, axis=1) == 0
    lz = np.linalg.norm(bundle.l.data, axis=1) == 0
    if np.any(hz | lz):
        log.warning("item_scores: %d step(s) with a zero interest vector; cosine set to 0", int(np.sum(hz | lz)))
    score = c1 + c2 + c3
    return NoiseScore(c1=c1, c2=c2, c3=c3, score=score)


def gumbel_noise(u: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    return -np.log(-np.log(u + eps) + eps)


def gumbel_sigmoid(
    score: Tensor,
    cfg: GateConfig,
    rng: np.random.Generator | None = None,
    tau: float | None = None,
    uniform: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Return (m, y) for a vector of scores.

    y = sigmoid((score + g) / tau) with g Gumbel noise from ``rng`` (or from
    the given ``uniform`` draws). With neither, g = 0 (the noiseless path).
    Hard mode gives m = 1[y > 0.5] forward while the gradient of m is that of
    y (straight-through).
    """
    tau = cfg.tau_gumbel if tau is None else tau
    if uniform is None and rng is not None:
        uniform = rng.random(score.shape)
    if uniform is None:
        logits = score
    else:
        logits = score + Tensor(gumbel_noise(np.asarray(uniform, dtype=np.float64), cfg.eps))
    y = dc.sigmoid(dc.scalar_mul(logits, 1.0 / tau))
    if not cfg.hard:
        return y, y
    hard = (y.data > 0.5).astype(np.float64)
    m = y + Tensor(hard - y.data)
    m.data = hard  # exact 0/1 forward; y + (hard - y) can be off by one ulp
    return m, y


def apply_mask(seq, mask) -> list:
    """Items whose mask is 1, in order; if none survive, keep the last item."""
    seq = list(seq)
    mask = np.asarray(mask)
    if len(seq) != len(mask):
        raise ValueError(f"apply_mask: sequence length {len(seq)} != mask length {len(mask)}")
    kept = [it for it, m in zip(seq, mask) if m == 1]
    if not kept and seq:
        kept = [seq[-1]]
    return kept


def denoise_ratio(masks: dict[int, np.ndarray], gated: set[int] | None = None) -> float:
    """Fraction of zeros over all mask entries of gated users (0 when nobody is gated)."""
    keys = masks.keys() if gated is None else [u for u in masks if u in gated]
    total = sum(len(masks[u]) for u in keys)
    if total == 0:
        return 0.0
    return float(sum(int(np.sum(np.asarray(masks[u]) == 0)) for u in keys) / total)


def write_mask_dump(path, rows) -> None:
    """Rows of (user_id, epoch, mask) as ``<user_id> <epoch> <0/1 string>`` lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for user, epoch, mask in rows:
            bits = "".join("1" if int(v) else "0" for v in mask)
            fh.write(f"{user} {epoch} {bits}\n")


def read_mask_dump(path) -> list[tuple[str, int, np.ndarray]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) == 2:
                parts.append("")
            if len(parts) != 3 or set(parts[2]) - {"0", "1"}:
                raise ValueError(f"{path}:{lineno}: expected '<user> <epoch> <0/1 string>'")
            out.append((parts[0], int(parts[1]), np.array([int(c) for c in parts[2]], dtype=np.int64)))
    return out
