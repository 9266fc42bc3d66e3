"""Cross-modal InfoNCE alignment of long- and short-term interests."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcompute as dc
from .diffcompute import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignConfig:
    tau: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("align.tau must be > 0")


@dataclass
class InterestBundle:
    """Interests for a batch of N users holding M real prefixes in total.

    ``e1``/``l`` are projected semantic vectors, ``e2``/``h`` collaborative
    states. ``owner[k]`` is the batch row of the user owning prefix k and
    ``step[k]`` its 0-based position in that user's sequence.
    """

    e1: Tensor  # (N, d)
    e2: Tensor  # (N, d)
    l: Tensor  # (M, d)
    h: Tensor  # (M, d)
    owner: np.ndarray
    step: np.ndarray

    def __post_init__(self):
        if self.l.shape != self.h.shape or self.e1.shape != self.e2.shape:
            raise dc.ShapeError(
                f"InterestBundle: e1 {self.e1.shape}/e2 {self.e2.shape}, l {self.l.shape}/h {self.h.shape}"
            )
        if len(self.owner) != self.h.shape[0]:
            raise dc.ShapeError("InterestBundle: owner length must equal prefix count")

    @property
    def n_users(self) -> int:
        return self.e1.shape[0]

    @property
    def n_prefixes(self) -> int:
        return self.h.shape[0]

    def prefix_rows(self, user_row: int) -> np.ndarray:
        return np.flatnonzero(self.owner == user_row)


def info_nce(anchors: Tensor, positives: Tensor, tau: float) -> Tensor:
    """Mean over i of -log softmax_j(cos(a_i, p_j) / tau)[i].

    Row i of ``positives`` is the positive for anchor i; all other rows act as
    in-batch negatives. Only the anchor side is normalised over.
    """
    if anchors.shape != positives.shape or anchors.data.ndim != 2:
        raise dc.ShapeError(f"info_nce: shapes {anchors.shape} vs {positives.shape}")
    n = anchors.shape[0]
    if n == 0:
        log.warning("info_nce: empty batch, loss defined as 0")
        return Tensor(0.0)
    sims = dc.scalar_mul(dc.pairwise_cosine(anchors, positives), 1.0 / tau)
    return dc.softmax_cross_entropy(sims, np.arange(n))


def alignment_loss(
    bundle: InterestBundle,
    cfg: AlignConfig,
    use_long: bool = True,
    use_short: bool = True,
) -> tuple[Tensor, Tensor, Tensor]:
    """(L_long, L_short, L_info) with collaborative vectors as anchors."""
    zero = Tensor(0.0)
    l_long = info_nce(bundle.e2, bundle.e1, cfg.tau) if use_long else zero
    l_short = info_nce(bundle.h, bundle.l, cfg.tau) if use_short else zero
    return l_long, l_short, l_long + l_short
