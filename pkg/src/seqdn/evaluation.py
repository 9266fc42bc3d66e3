"""Full-catalog ranking metrics, popularity buckets, denoising diagnostics,
and a synthetic benchmark with known noise positions."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import PAD, DatasetSplit, Interaction
from .denoiser import denoise_ratio
from .model import DenoisingRecommender, denoised_logits, make_batch
from .semantic import SemanticTable

KS = (5, 10, 20)


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------


def rank_of(scores: np.ndarray, target: int) -> int:
    """1-based rank of item ``target`` given scores for items 1..n (column j = item j+1).

    Ties go to the lower item index.
    """
    if target == PAD:
        raise ValueError("target is the padding index")
    if not 1 <= target <= len(scores):
        raise IndexError(f"target {target} outside 1..{len(scores)}")
    s = scores[target - 1]
    return int(1 + np.count_nonzero(scores > s) + np.count_nonzero(scores[: target - 1] == s))


def hit_and_ndcg(rank: int, k: int) -> tuple[float, float]:
    if rank <= k:
        return 1.0, 1.0 / math.log2(rank + 1)
    return 0.0, 0.0


def rank_and_score(model: DenoisingRecommender, prefix, target: int, user: int = 0, offset: int = 0, ks=KS):
    """Rank of the target after ``prefix`` plus HR@K and NDCG@K for each K."""
    logits, _ = denoised_logits(model, make_batch([user], [prefix], [offset]))
    rank = rank_of(logits[0], target)
    hits, ndcg = {}, {}
    for k in ks:
        hits[k], ndcg[k] = hit_and_ndcg(rank, k)
    return rank, hits, ndcg


# ---------------------------------------------------------------------------
# popularity buckets
# ---------------------------------------------------------------------------


def item_counts(train: dict[int, list[int]], n_items: int) -> np.ndarray:
    counts = np.zeros(n_items + 1, dtype=np.int64)
    for seq in train.values():
        np.add.at(counts, np.asarray(seq, dtype=np.int64), 1)
    counts[PAD] = 0
    return counts


def popularity_buckets(
    train: dict[int, list[int]],
    n_items: int,
    n_buckets: int = 5,
    mode: str = "items",
) -> dict[int, int]:
    """Item -> bucket in 1..n_buckets, 1 = most popular.

    ``items`` mode gives equal item counts (remainder to the hottest buckets);
    ``interactions`` mode cuts where cumulative train frequency crosses equal shares.
    """
    if n_items < n_buckets:
        raise ValueError(f"need at least {n_buckets} items for {n_buckets} buckets, got {n_items}")
    counts = item_counts(train, n_items)
    order = sorted(range(1, n_items + 1), key=lambda i: (-counts[i], i))
    out: dict[int, int] = {}
    if mode == "items":
        base, extra = divmod(n_items, n_buckets)
        pos = 0
        for b in range(n_buckets):
            size = base + (1 if b < extra else 0)
            for i in order[pos : pos + size]:
                out[i] = b + 1
            pos += size
        return out
    if mode != "interactions":
        raise ValueError(f"unknown bucket mode {mode!r}")
    total = counts.sum()
    b = in_b = cum = 0
    for rank, i in enumerate(order):
        if b < n_buckets - 1 and in_b > 0:
            share_full = cum >= (b + 1) * total / n_buckets
            # every later bucket still needs one item
            must_move = n_items - rank <= n_buckets - 1 - b
            if share_full or must_move:
                b, in_b = b + 1, 0
        out[i] = b + 1
        in_b += 1
        cum += counts[i]
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class NoiseRecovery:
    flagged: int
    noise: int
    hits: int
    precision: float | None  # None = undefined (zero denominator)
    recall: float | None
    f1: float | None

    @property
    def undefined(self) -> list[str]:
        return [k for k in ("precision", "recall", "f1") if getattr(self, k) is None]


@dataclass
class MetricsReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    bucket_ndcg5: list[float | None]
    denoise_ratio: float
    n_users: int
    bucket_mode: str = "items"
    noise: NoiseRecovery | None = None
    extra: dict[str, str] = field(default_factory=dict)

    def items(self) -> list[tuple[str, str]]:
        rows = [("users", str(self.n_users))]
        rows += [(f"HR@{k}", _fmt(v)) for k, v in sorted(self.hr.items())]
        rows += [(f"NDCG@{k}", _fmt(v)) for k, v in sorted(self.ndcg.items())]
        rows += [(f"bucket{b + 1}_NDCG@5", _fmt(v)) for b, v in enumerate(self.bucket_ndcg5)]
        rows.append(("bucket_mode", self.bucket_mode))
        rows.append(("denoise_ratio", _fmt(self.denoise_ratio)))
        if self.noise is not None:
            for k in ("precision", "recall", "f1"):
                rows.append((f"noise_{k}", _fmt(getattr(self.noise, k))))
        rows += sorted(self.extra.items())
        return rows

    def to_text(self) -> str:
        return "".join(f"{k}: {v}\n" for k, v in self.items())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(self.items())
        return buf.getvalue()


def _fmt(v) -> str:
    return "undefined" if v is None else repr(float(v))


def _windows(split: DatasetSplit, which: str, users):
    """(window, offset, target) per user for train/valid/test."""
    out = []
    for u in users:
        train = split.train[u]
        if which == "train":
            w = train[-split.max_len :]
            out.append((w, len(train) - len(w), None))
        elif which == "valid":
            w, t = split.valid[u]
            out.append((w, len(train) - len(w), t))
        elif which == "test":
            w, t = split.test[u]
            out.append((w, len(train) + 1 - len(w), t))
        else:
            raise ValueError(f"unknown split part {which!r}")
    return out


def eval_masks(
    model: DenoisingRecommender,
    split: DatasetSplit,
    which: str = "train",
    batch_size: int = 256,
    denoise: bool = True,
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray], set[int]]:
    """Noiseless masks per user over the chosen window.

    Returns (masks, logits for the next item, gated users); logits are None for
    the train part.
    """
    users = split.users
    wins = _windows(split, which, users)
    masks, logits, gated = {}, {}, set()
    for s in range(0, len(users), batch_size):
        chunk = users[s : s + batch_size]
        part = wins[s : s + batch_size]
        batch = make_batch(chunk, [w for w, _, _ in part], [o for _, o, _ in part])
        scores, bm = denoised_logits(model, batch, denoise=denoise)
        for b, u in enumerate(chunk):
            if bm is not None:
                masks[u] = batch.grid_to_window(bm.grid, b).astype(np.int64)
                if bm.gated[b]:
                    gated.add(u)
            else:
                masks[u] = np.ones(int(batch.lengths[b]), dtype=np.int64)
            logits[u] = scores[b]
    return masks, logits, gated


def evaluate(
    model: DenoisingRecommender,
    split: DatasetSplit,
    which: str = "test",
    ks=KS,
    n_buckets: int = 5,
    bucket_mode: str = "items",
    batch_size: int = 256,
    denoise: bool = True,
) -> MetricsReport:
    masks, logits, gated = eval_masks(model, split, which, batch_size, denoise)
    users = split.users
    targets = {u: (split.valid[u][1] if which == "valid" else split.test[u][1]) for u in users}
    ranks = np.array([rank_of(logits[u], targets[u]) for u in users], dtype=np.int64)
    hr, ndcg = _aggregate(ranks, ks)
    buckets = popularity_buckets(split.train, split.n_items, n_buckets, bucket_mode)
    bucket_ids = np.array([buckets[targets[u]] for u in users])
    per_bucket: list[float | None] = []
    for b in range(1, n_buckets + 1):
        sel = ranks[bucket_ids == b]
        per_bucket.append(_aggregate(sel, (5,))[1][5] if sel.size else None)
    return MetricsReport(
        hr=hr,
        ndcg=ndcg,
        bucket_ndcg5=per_bucket,
        denoise_ratio=denoise_ratio(masks, gated),
        n_users=len(users),
        bucket_mode=bucket_mode,
    )


def _aggregate(ranks: np.ndarray, ks) -> tuple[dict[int, float], dict[int, float]]:
    hr, ndcg = {}, {}
    n = max(len(ranks), 1)
    gains = 1.0 / np.log2(ranks + 1.0)
    for k in ks:
        hit = ranks <= k
        # np.sum reduces pairwise in user order, so the result is bit-stable
        hr[k] = float(np.sum(hit.astype(np.float64)) / n)
        ndcg[k] = float(np.sum(np.where(hit, gains, 0.0)) / n)
    return hr, ndcg


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Cluster-walk users with uniformly injected out-of-cluster noise.

    Each user walks a ring of its cluster's items by steps of 1..3; with
    probability ``noise_rate`` a position instead holds a random item from
    another cluster, and the walk does not advance. With ``clean_targets`` the
    final two positions (the held-out targets) are never noise.
    """

    n_users: int = 500
    n_items: int = 300
    n_clusters: int = 5
    min_len: int = 20
    max_len: int = 40
    noise_rate: float = 0.2
    seed: int = 0
    sem_dim: int = 16
    sem_spread: float = 0.3
    clean_targets: bool = True

    def __post_init__(self):
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must be in [0, 1)")
        if self.n_clusters < 2:
            raise ValueError("need at least 2 clusters")
        if self.n_items < 2 * self.n_clusters:
            raise ValueError("need at least 2 items per cluster")
        if not 3 <= self.min_len <= self.max_len:
            raise ValueError("need 3 <= min_len <= max_len")


@dataclass
class SyntheticData:
    events: list[Interaction]
    labels: dict[str, list[int]]  # user id -> 0/1 per chronological position
    semantics: SemanticTable
    item_cluster: dict[str, int]
    user_cluster: dict[str, int]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(spec.n_items) + 1
    clusters = [list(c) for c in np.array_split(perm, spec.n_clusters)]
    item_cluster = {f"i{int(i)}": c for c, members in enumerate(clusters) for i in members}
    all_items = np.arange(1, spec.n_items + 1)

    centroids = rng.normal(size=(spec.n_clusters, spec.sem_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    ids = [f"i{i}" for i in all_items]
    vecs = np.array(
        [centroids[item_cluster[k]] + spec.sem_spread * rng.normal(size=spec.sem_dim) / math.sqrt(spec.sem_dim) for k in ids]
    )

    events: list[Interaction] = []
    labels: dict[str, list[int]] = {}
    user_cluster: dict[str, int] = {}
    for u in range(spec.n_users):
        uid = f"u{u}"
        c = int(rng.integers(spec.n_clusters))
        user_cluster[uid] = c
        ring = clusters[c]
        outside = all_items[~np.isin(all_items, ring)]
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        pos = int(rng.integers(len(ring)))
        seq, lab = [], []
        for t in range(n):
            noisy = rng.random() < spec.noise_rate
            if spec.clean_targets and t >= n - 2:
                noisy = False
            if noisy:
                seq.append(int(outside[rng.integers(len(outside))]))
                lab.append(1)
            else:
                pos = (pos + int(rng.integers(1, 4))) % len(ring)
                seq.append(int(ring[pos]))
                lab.append(0)
        events.extend(Interaction(uid, f"i{it}", t + 1) for t, it in enumerate(seq))
        labels[uid] = lab
    return SyntheticData(
        events=events,
        labels=labels,
        semantics=SemanticTable(ids, vecs),
        item_cluster=item_cluster,
        user_cluster=user_cluster,
    )


def write_noise_labels(path, labels: dict[str, list[int]]) -> None:
    """``user_id position 0/1`` lines; positions are 0-based chronological indices."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for uid, lab in labels.items():
            for t, v in enumerate(lab):
                fh.write(f"{uid} {t} {int(v)}\n")


def read_noise_labels(path) -> dict[str, list[int]]:
    rows: dict[str, dict[int, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected 'user_id position 0/1'")
            rows.setdefault(parts[0], {})[int(parts[1])] = int(parts[2])
    out = {}
    for uid, d in rows.items():
        if sorted(d) != list(range(len(d))):
            raise ValueError(f"{path}: positions of user {uid} are not contiguous from 0")
        out[uid] = [d[t] for t in range(len(d))]
    return out


def noise_recovery(masks: dict, labels: dict) -> NoiseRecovery:
    """Score masks (0 = flagged as noise) against 0/1 noise labels of the same positions."""
    flagged = noise = hits = 0
    for key, m in masks.items():
        m = np.asarray(m)
        lab = np.asarray(labels[key])
        if m.shape != lab.shape:
            raise ValueError(f"user {key}: mask length {m.size} != label length {lab.size}")
        f = m == 0
        y = lab == 1
        flagged += int(f.sum())
        noise += int(y.sum())
        hits += int((f & y).sum())
    p = hits / flagged if flagged else None
    r = hits / noise if noise else None
    if p is None or r is None:
        f1 = None
    else:
        f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return NoiseRecovery(flagged=flagged, noise=noise, hits=hits, precision=p, recall=r, f1=f1)


def window_labels(split: DatasetSplit, user_ids: list[str], labels: dict[str, list[int]]) -> dict[int, np.ndarray]:
    """Noise labels restricted to each user's train window, keyed by dense user index."""
    out = {}
    for u in split.users:
        lab = labels[user_ids[u]]
        train = split.train[u]
        if len(lab) != len(train) + 2:
            raise ValueError(f"user {user_ids[u]}: {len(lab)} labels for a sequence of {len(train) + 2}")
        w = len(train[-split.max_len :])
        out[u] = np.asarray(lab[len(train) - w : len(train)], dtype=np.int64)
    return out
