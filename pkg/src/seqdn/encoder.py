"""Collaborative backbone: item-ID embeddings, stacked GRU, dot-product head.

Batches are time-major. A batch of B sequences left-padded to length T is a
``(T * B, d)`` matrix whose rows ``t*B : (t+1)*B`` hold step ``t``; the keep
mask is a ``(T, B)`` 0/1 array. A masked step copies the previous hidden
state forward, so padding and dropped items are both invisible to the
recurrence and the final step always carries the state of the last kept item.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import diffcompute as dc
from .dataio import PAD
from .diffcompute import Tensor

GATES = ("z", "r", "h")


@dataclass
class EncoderOutput:
    h: list[Tensor]  # per step, (B, d_h) top-layer states
    e2: Tensor  # (B, d_h) state after the final step

    def stacked(self) -> Tensor:
        """All top-layer states as one time-major ``(T * B, d_h)`` matrix."""
        return dc.concat(self.h, axis=0) if len(self.h) > 1 else self.h[0]


class Backbone(Protocol):
    """Sequence encoder interface; attention or convolutional encoders would slot in here."""

    d_in: int
    d_hidden: int

    def encode(self, x: Tensor, batch: int, mask: np.ndarray | None = None) -> EncoderOutput: ...

    def named_parameters(self) -> dict[str, Tensor]: ...


class GRU:
    def __init__(self, d_in: int, d_hidden: int, n_layers: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.layers: list[dict[str, Tensor]] = []
        bound = 1.0 / np.sqrt(d_hidden)
        for li in range(n_layers):
            din = d_in if li == 0 else d_hidden
            p = {}
            for g in GATES:
                p[f"W{g}"] = dc.parameter(rng.uniform(-bound, bound, size=(din, d_hidden)))
                p[f"U{g}"] = dc.parameter(rng.uniform(-bound, bound, size=(d_hidden, d_hidden)))
                p[f"b{g}"] = dc.parameter(np.zeros(d_hidden))
            for k, t in p.items():
                t.name = f"gru.l{li + 1}.{k}"
            self.layers.append(p)

    def named_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for p in self.layers for t in p.values()}

    def encode(self, x: Tensor, batch: int = 1, mask: np.ndarray | None = None) -> EncoderOutput:
        return gru_forward(x, self, mask=mask, batch=batch)


def gru_forward(x: Tensor, params: GRU, mask: np.ndarray | None = None, batch: int = 1) -> EncoderOutput:
    """Run the stacked GRU over a time-major ``(T * batch, d_in)`` input."""
    rows = x.shape[0]
    if rows == 0 or rows % batch:
        raise dc.ShapeError(f"gru_forward: {rows} rows not divisible into batch {batch}")
    T = rows // batch
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64).reshape(T, batch)
        masks = [Tensor(mask[t]) for t in range(T)]
    d_h = params.d_hidden
    inp = x
    steps: list[Tensor] = []
    for p in params.layers:
        proj = {g: dc.add_bias(inp @ p[f"W{g}"], p[f"b{g}"]) for g in GATES}
        h = Tensor(np.zeros((batch, d_h)))
        steps = []
        for t in range(T):
            sl = slice(t * batch, (t + 1) * batch)
            z = dc.sigmoid(proj["z"][sl] + h @ p["Uz"])
            r = dc.sigmoid(proj["r"][sl] + h @ p["Ur"])
            cand = dc.tanh(proj["h"][sl] + (r * h) @ p["Uh"])
            delta = z * (cand - h)
            if mask is not None:
                delta = dc.mul_rows(delta, masks[t])
            h = h + delta
            steps.append(h)
        inp = dc.concat(steps, axis=0) if T > 1 else steps[0]
    return EncoderOutput(h=steps, e2=steps[-1])


def embed_sequence(items, table: Tensor) -> Tensor:
    """Gather embedding rows; index 0 is the all-zero padding row."""
    idx = np.asarray(items, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"item index out of range for table with {table.shape[0]} rows")
    return dc.gather_rows(table, idx)


def score_items(e2: Tensor, table: Tensor, head_W: Tensor, head_b: Tensor) -> Tensor:
    """Logits over real items 1..n (column j scores item j + 1); padding is never scored."""
    if e2.data.ndim == 1:
        proj = e2 @ head_W + head_b
    else:
        proj = dc.add_bias(e2 @ head_W, head_b)
    items = table[1:]
    return proj @ dc.transpose(items)


class GRUEncoder:
    """Item table + GRU backbone + prediction head, as one parameter bundle."""

    def __init__(
        self,
        n_items: int,
        d_emb: int = 64,
        d_hidden: int = 128,
        n_layers: int = 2,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_items = n_items
        self.d_emb = d_emb
        self.d_hidden = d_hidden
        emb = rng.normal(0.0, 1.0 / np.sqrt(d_emb), size=(n_items + 1, d_emb))
        emb[PAD] = 0.0
        self.item_emb = dc.parameter(emb, name="item_emb")
        self.backbone: Backbone = GRU(d_emb, d_hidden, n_layers, rng)
        bound = 1.0 / np.sqrt(d_hidden)
        self.head_W = dc.parameter(rng.uniform(-bound, bound, size=(d_hidden, d_emb)), name="head.W")
        self.head_b = dc.parameter(np.zeros(d_emb), name="head.b")

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"item_emb": self.item_emb}
        out.update(self.backbone.named_parameters())
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    def freeze_padding_grad(self) -> None:
        if self.item_emb.grad is not None:
            self.item_emb.grad[PAD] = 0.0

    def encode(self, x: Tensor, batch: int, mask: np.ndarray | None = None) -> EncoderOutput:
        return self.backbone.encode(x, batch=batch, mask=mask)

    def logits(self, states: Tensor) -> Tensor:
        return score_items(states, self.item_emb, self.head_W, self.head_b)


def left_pad(seqs: Sequence[Sequence[int]], length: int | None = None) -> np.ndarray:
    """(T, B) time-major index matrix, sequences right-aligned, 0 = padding."""
    T = length if length is not None else max(len(s) for s in seqs)
    out = np.zeros((T, len(seqs)), dtype=np.int64)
    for b, s in enumerate(seqs):
        s = list(s)[-T:]
        if s:
            out[T - len(s) :, b] = s
    return out
