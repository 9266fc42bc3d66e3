"""Interaction ingestion, k-core filtering, sequence building and leave-one-out splits."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

PAD = 0


class DataFormatError(ValueError):
    """Malformed input file; the message names the offending line."""


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class PreprocessConfig:
    k_core: int = 5
    max_len: int = 32

    def __post_init__(self):
        if self.k_core < 1:
            raise ValueError("k_core must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")


@dataclass
class Catalog:
    """Dense ids: users in [0, m), items in [1, n] with 0 reserved for padding."""

    user_ids: list[str]
    item_ids: list[str]  # item_ids[i - 1] is the raw id of dense item i
    user_index: dict[str, int] = field(init=False)
    item_index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.user_index = {u: i for i, u in enumerate(self.user_ids)}
        self.item_index = {it: i + 1 for i, it in enumerate(self.item_ids)}
        if len(self.user_index) != len(self.user_ids) or len(self.item_index) != len(self.item_ids):
            raise ValueError("catalog ids must be unique")

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def item_raw(self, idx: int) -> str:
        if idx == PAD:
            raise IndexError("index 0 is padding")
        return self.item_ids[idx - 1]


@dataclass
class UserSequence:
    user: int
    items: list[int]
    timestamps: list[int]


@dataclass
class DatasetSplit:
    """Leave-one-out split.

    ``valid[u]`` and ``test[u]`` are ``(prefix, target)`` pairs; prefixes are
    already truncated to the ``max_len`` newest items, ``train[u]`` is not.
    """

    train: dict[int, list[int]]
    valid: dict[int, tuple[list[int], int]]
    test: dict[int, tuple[list[int], int]]
    max_len: int
    n_items: int

    @property
    def users(self) -> list[int]:
        return sorted(self.train)


def load_interactions(path, format: str = "tsv") -> list[Interaction]:
    """Read ``user<TAB>item<TAB>ts`` (tsv) or ``user<TAB>item<TAB>rating<TAB>ts`` (movielens)."""
    if format not in ("tsv", "movielens"):
        raise ValueError(f"unknown format {format!r}")
    ncols = 3 if format == "tsv" else 4
    out: list[Interaction] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != ncols:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {ncols} tab-separated fields, got {len(parts)}"
                )
            user, item, ts = parts[0], parts[1], parts[-1]
            try:
                out.append(Interaction(user.strip(), item.strip(), int(ts)))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    return out


def write_interactions(path, events: list[Interaction]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in events:
            fh.write(f"{e.user_id}\t{e.item_id}\t{e.timestamp}\n")


def k_core_filter(events: list[Interaction], k: int) -> list[Interaction]:
    """Drop users and items with fewer than ``k`` events until nothing changes.

    The surviving set is the unique maximal subset in which every user and
    item has at least ``k`` events; input order is preserved.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    alive = list(events)
    while True:
        ucount = Counter(e.user_id for e in alive)
        icount = Counter(e.item_id for e in alive)
        kept = [e for e in alive if ucount[e.user_id] >= k and icount[e.item_id] >= k]
        if len(kept) == len(alive):
            return kept
        alive = kept


def build_sequences(
    events: list[Interaction], cfg: PreprocessConfig | None = None, min_len: int = 3
) -> tuple[Catalog, list[UserSequence]]:
    """Group events per user in time order (ties keep input order).

    Users with fewer than ``min_len`` events are dropped, then dense ids are
    assigned in order of first appearance among the survivors.
    """
    per_user: dict[str, list[tuple[int, int, str]]] = {}
    for pos, e in enumerate(events):
        per_user.setdefault(e.user_id, []).append((e.timestamp, pos, e.item_id))
    kept_users = [u for u, evs in per_user.items() if len(evs) >= min_len]
    for u in kept_users:
        per_user[u].sort()

    item_order: dict[str, None] = {}
    for e in events:
        if e.user_id in per_user and len(per_user[e.user_id]) >= min_len:
            item_order.setdefault(e.item_id, None)
    catalog = Catalog(user_ids=kept_users, item_ids=list(item_order))

    seqs = []
    for u in kept_users:
        evs = per_user[u]
        seqs.append(
            UserSequence(
                user=catalog.user_index[u],
                items=[catalog.item_index[it] for _, _, it in evs],
                timestamps=[ts for ts, _, _ in evs],
            )
        )
    return catalog, seqs


def leave_one_out_split(seqs: list[UserSequence], cfg: PreprocessConfig, n_items: int | None = None) -> DatasetSplit:
    train: dict[int, list[int]] = {}
    valid: dict[int, tuple[list[int], int]] = {}
    test: dict[int, tuple[list[int], int]] = {}
    L = cfg.max_len
    for s in seqs:
        items = s.items
        if len(items) < 3:
            log.warning("user %d has %d items; excluded from split", s.user, len(items))
            continue
        train[s.user] = list(items[:-2])
        valid[s.user] = (list(items[:-2][-L:]), items[-2])
        test[s.user] = (list(items[:-1][-L:]), items[-1])
    if n_items is None:
        n_items = max((max(s.items) for s in seqs), default=0)
    return DatasetSplit(train=train, valid=valid, test=test, max_len=L, n_items=n_items)


def dataset_stats(events: list[Interaction]) -> dict[str, float]:
    """Table-style statistics: users, items, actions, average length, sparsity."""
    users = {e.user_id for e in events}
    items = {e.item_id for e in events}
    n_u, n_i, n_a = len(users), len(items), len(events)
    return {
        "users": n_u,
        "items": n_i,
        "actions": n_a,
        "avg_len": n_a / n_u if n_u else 0.0,
        "sparsity": 1.0 - n_a / (n_u * n_i) if n_u and n_i else 0.0,
    }


# ---------------------------------------------------------------------------
# split manifest (JSON lines: header, then one record per user)
# ---------------------------------------------------------------------------

MANIFEST_FORMAT = "seqdn-split"


def write_split(path, split: DatasetSplit, catalog: Catalog) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = {
            "format": MANIFEST_FORMAT,
            "version": 1,
            "max_len": split.max_len,
            "users": catalog.user_ids,
            "items": catalog.item_ids,
        }
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for u in split.users:
            vp, vt = split.valid[u]
            tp, tt = split.test[u]
            rec = {"user": u, "train": split.train[u], "valid": [vp, vt], "test": [tp, tt]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_split(path) -> tuple[DatasetSplit, Catalog]:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty split manifest")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise DataFormatError(f"{path}:1: not a split manifest")
    catalog = Catalog(user_ids=header["users"], item_ids=header["items"])
    train, valid, test = {}, {}, {}
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            u = int(rec["user"])
            train[u] = [int(i) for i in rec["train"]]
            valid[u] = ([int(i) for i in rec["valid"][0]], int(rec["valid"][1]))
            test[u] = ([int(i) for i in rec["test"][0]], int(rec["test"][1]))
        except (KeyError, ValueError, TypeError, IndexError) as exc:
            raise DataFormatError(f"{path}:{lineno}: bad record ({exc})") from None
    split = DatasetSplit(train, valid, test, max_len=int(header["max_len"]), n_items=catalog.n_items)
    return split, catalog


def prepare(events: list[Interaction], cfg: PreprocessConfig) -> tuple[Catalog, DatasetSplit]:
    """k-core -> sequences -> leave-one-out, in that order."""
    filtered = k_core_filter(events, cfg.k_core)
    catalog, seqs = build_sequences(filtered, cfg)
    return catalog, leave_one_out_split(seqs, cfg, n_items=catalog.n_items)
