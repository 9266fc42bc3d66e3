"""Frozen per-item semantic vectors, per-prefix semantic interests, projection.

Semantic vectors come from an external text encoder and are ingested from
files; nothing here runs a language model. ``pseudo_embed`` is a deterministic
stand-in used when no real vectors are available.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcompute as dc
from .dataio import Catalog
from .diffcompute import Tensor

log = logging.getLogger(__name__)

TEXT_MAGIC = "SEMB"
PREFIX_MAGIC = "SPFX"
BIN_MAGIC = b"SEMB"


class SemanticFormatError(ValueError):
    pass


@dataclass
class SemanticTable:
    ids: list[str]
    vectors: np.ndarray  # (count, D)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise SemanticFormatError(
                f"{len(self.ids)} ids but vectors of shape {self.vectors.shape}"
            )
        seen = set()
        for i in self.ids:
            if i in seen:
                raise SemanticFormatError(f"duplicate item id {i!r}")
            seen.add(i)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def aligned(self, catalog: Catalog) -> np.ndarray:
        """(n_items + 1, D) matrix indexed by dense item id; row 0 is zero.

        Every catalog item must be present.
        """
        pos = {i: k for k, i in enumerate(self.ids)}
        out = np.zeros((catalog.n_items + 1, self.dim))
        missing = [it for it in catalog.item_ids if it not in pos]
        if missing:
            raise SemanticFormatError(
                f"{len(missing)} catalog items lack semantic vectors, e.g. {missing[:3]}"
            )
        for it in catalog.item_ids:
            out[catalog.item_index[it]] = self.vectors[pos[it]]
        return out


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _fmt_row(key: str, v: np.ndarray) -> str:
    return key + " " + " ".join(repr(float(x)) for x in v)


def write_semantic_table(path, table: SemanticTable, binary: bool = False) -> None:
    if binary:
        parts = [BIN_MAGIC, struct.pack("<BII", 1, len(table), table.dim)]
        for key, v in zip(table.ids, table.vectors):
            raw = key.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(np.asarray(v, dtype="<f8").tobytes())
        Path(path).write_bytes(b"".join(parts))
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{TEXT_MAGIC} v1 {len(table)} {table.dim}\n")
        for key, v in zip(table.ids, table.vectors):
            if not key or any(c.isspace() for c in key):
                raise SemanticFormatError(f"item id {key!r} cannot be written in text format")
            fh.write(_fmt_row(key, v) + "\n")


def _parse_header(line: str, magic: str, path) -> tuple[int, int]:
    parts = line.split()
    if len(parts) != 4 or parts[0] != magic or parts[1] != "v1":
        raise SemanticFormatError(f"{path}:1: expected header '{magic} v1 <count> <D>'")
    try:
        return int(parts[2]), int(parts[3])
    except ValueError:
        raise SemanticFormatError(f"{path}:1: non-integer count or dimension") from None


def _load_binary(buf: bytes, path) -> SemanticTable:
    try:
        version, count, dim = struct.unpack_from("<BII", buf, 4)
        if version != 1:
            raise SemanticFormatError(f"{path}: unsupported binary version {version}")
        off = 13
        ids, rows = [], []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            ids.append(buf[off : off + n].decode("utf-8"))
            off += n
            rows.append(np.frombuffer(buf, dtype="<f8", count=dim, offset=off))
            off += 8 * dim
    except struct.error as exc:
        raise SemanticFormatError(f"{path}: truncated binary table ({exc})") from None
    except ValueError as exc:
        if isinstance(exc, SemanticFormatError):
            raise
        raise SemanticFormatError(f"{path}: truncated binary table ({exc})") from None
    vec = np.array(rows, dtype=np.float64).reshape(count, dim)
    return SemanticTable(ids, vec)


def load_semantic_table(path, catalog: Catalog | None = None) -> SemanticTable:
    """Read a text or binary SEMB file.

    With ``catalog`` given, ids outside the catalog are rejected.
    """
    raw = Path(path).read_bytes()
    if raw[:4] == BIN_MAGIC and len(raw) > 4 and raw[4] == 1:
        table = _load_binary(raw, path)
    else:
        lines = raw.decode("utf-8").splitlines()
        if not lines:
            raise SemanticFormatError(f"{path}: empty file")
        count, dim = _parse_header(lines[0], TEXT_MAGIC, path)
        ids, rows, seen = [], [], set()
        body = [ln for ln in lines[1:] if ln.strip()]
        for lineno, line in enumerate(body, start=2):
            parts = line.split()
            if len(parts) != dim + 1:
                raise SemanticFormatError(
                    f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}"
                )
            key = parts[0]
            if key in seen:
                raise SemanticFormatError(f"{path}:{lineno}: duplicate item id {key!r}")
            seen.add(key)
            try:
                rows.append([float(x) for x in parts[1:]])
            except ValueError:
                raise SemanticFormatError(f"{path}:{lineno}: non-numeric value") from None
            ids.append(key)
        if len(ids) != count:
            raise SemanticFormatError(f"{path}: header declares {count} rows, found {len(ids)}")
        table = SemanticTable(ids, np.array(rows, dtype=np.float64).reshape(count, dim))
    if catalog is not None:
        for k, key in enumerate(table.ids):
            if key not in catalog.item_index:
                raise SemanticFormatError(f"{path}: row {k + 1}: unknown item id {key!r}")
    return table


def pseudo_embed(catalog: Catalog, dim: int, seed: int) -> SemanticTable:
    """Unit vectors seeded by (seed, sha256(item id)); independent of catalog order."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    rows = []
    for key in catalog.item_ids:
        h = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
        v = np.random.default_rng([seed, h]).normal(size=dim)
        rows.append(v / np.linalg.norm(v))
    return SemanticTable(list(catalog.item_ids), np.array(rows).reshape(len(rows), dim))


# ---------------------------------------------------------------------------
# prefix interests
# ---------------------------------------------------------------------------


@dataclass
class PrefixProvider:
    """Source of per-prefix semantic vectors.

    ``exact_file`` looks up stored encodings keyed by (user id, t), where t is
    the 1-based prefix length in the user's full chronological sequence. The
    mean-pool modes average item vectors over the prefix; ``pseudo_random_surrogate``
    is the same computation over a pseudo table.
    """

    mode: str = "mean_pool_surrogate"
    exact: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("exact_file", "mean_pool_surrogate", "pseudo_random_surrogate"):
            raise ValueError(f"unknown prefix mode {self.mode!r}")


def load_prefix_file(path) -> PrefixProvider:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SemanticFormatError(f"{path}: empty file")
    count, dim = _parse_header(lines[0], PREFIX_MAGIC, path)
    store: dict[tuple[str, int], np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != dim + 2:
            raise SemanticFormatError(f"{path}:{lineno}: expected {dim} values")
        key = (parts[0], int(parts[1]))
        if key in store:
            raise SemanticFormatError(f"{path}:{lineno}: duplicate prefix {key}")
        store[key] = np.array([float(x) for x in parts[2:]])
    if len(store) != count:
        raise SemanticFormatError(f"{path}: header declares {count} rows, found {len(store)}")
    return PrefixProvider(mode="exact_file", exact=store)


def write_prefix_file(path, rows: dict[tuple[str, int], np.ndarray]) -> None:
    dim = len(next(iter(rows.values()))) if rows else 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{PREFIX_MAGIC} v1 {len(rows)} {dim}\n")
        for (user, t), v in rows.items():
            fh.write(_fmt_row(f"{user} {t}", v) + "\n")


def prefix_vectors(
    provider: PrefixProvider,
    user_id: str,
    items,
    table: np.ndarray,
    offset: int = 0,
) -> np.ndarray:
    """Semantic vector of every prefix of ``items``: row t covers items[: t + 1].

    ``table`` is the catalog-aligned (n_items + 1, D) matrix. ``offset`` is the
    number of the user's items that precede ``items`` (used by exact mode only).
    """
    items = np.asarray(items, dtype=np.int64)
    if items.size == 0:
        raise ValueError("prefix must be non-empty")
    if provider.mode == "exact_file":
        out = []
        for t in range(1, len(items) + 1):
            key = (user_id, offset + t)
            if key not in provider.exact:
                raise KeyError(f"no stored prefix vector for user {user_id!r}, t={offset + t}")
            out.append(provider.exact[key])
        return np.array(out)
    rows = table[items]
    return np.cumsum(rows, axis=0) / np.arange(1, len(items) + 1)[:, None]


def prefix_embedding(provider: PrefixProvider, user_id: str, prefix_items, table: np.ndarray, offset: int = 0) -> np.ndarray:
    """Semantic vector of the whole prefix."""
    return prefix_vectors(provider, user_id, prefix_items, table, offset)[-1]


class SemanticProjection:
    """Learnable affine map from semantic space (D) into the collaborative hidden space."""

    def __init__(self, d_sem: int, d_hidden: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(d_sem)
        self.W = dc.parameter(rng.uniform(-bound, bound, size=(d_sem, d_hidden)), name="sem_proj.W")
        self.b = dc.parameter(np.zeros(d_hidden), name="sem_proj.b")

    def named_parameters(self) -> dict[str, Tensor]:
        return {"sem_proj.W": self.W, "sem_proj.b": self.b}


def project(proj: SemanticProjection, v) -> Tensor:
    """Affine projection of a vector (D,) or a batch of rows (N, D); input is treated as constant."""
    v = v if isinstance(v, Tensor) else Tensor(v)
    if v.shape[-1] != proj.W.shape[0]:
        raise dc.ShapeError(f"project: input dim {v.shape[-1]} != {proj.W.shape[0]}")
    if v.data.ndim == 1:
        return v @ proj.W + proj.b
    return dc.add_bias(v @ proj.W, proj.b)
