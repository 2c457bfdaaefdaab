"""Interaction logs, item embeddings, chronological splits, synthetic corpora.

File formats owned here:

* interactions: TSV `user_id \\t item_id \\t timestamp`, UTF-8, no header.
  Raw ids may be arbitrary strings; loading densifies them to [0, N) in
  first-appearance order unless an id map is supplied.
* id maps: TSV `raw_id \\t dense_id`, one per users/items.
* embeddings ("EMB1"): 16-byte header — magic b"EMB1", u32 N, u32 d
  (little-endian), 4 reserved zero bytes — then N*d float32 little-endian,
  row-major. Row i is the embedding of dense item id i.
* planted hierarchy: TSV `item_id \\t top_label \\t sub_label`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EMB_MAGIC = b"EMB1"


@dataclass
class InteractionLog:
    """Event stream with densified ids, sorted per user by (timestamp, file order)."""

    users: np.ndarray  # int64
    items: np.ndarray  # int64
    times: np.ndarray  # int64
    user_map: dict[str, int] = field(default_factory=dict)
    item_map: dict[str, int] = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.user_map) if self.user_map else int(self.users.max()) + 1

    @property
    def n_items(self) -> int:
        return len(self.item_map) if self.item_map else int(self.items.max()) + 1

    def __len__(self) -> int:
        return len(self.users)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, InteractionLog)
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.times, other.times)
        )

    def sequences(self) -> dict[int, list[int]]:
        """Per-user item sequences in chronological order."""
        seqs: dict[int, list[int]] = {}
        for u, i in zip(self.users.tolist(), self.items.tolist()):
            seqs.setdefault(u, []).append(i)
        return seqs


def _sort_per_user(users: np.ndarray, items: np.ndarray, times: np.ndarray):
    # stable sort keeps file order for tied timestamps
    order = np.lexsort((np.arange(len(users)), times, users))
    return users[order], items[order], times[order]


def load_interactions(
    path: str | Path,
    user_map: dict[str, int] | None = None,
    item_map: dict[str, int] | None = None,
) -> InteractionLog:
    """Parse an interactions TSV, densify ids, and sort per user.

    Without explicit maps, dense ids are assigned in first-appearance order.
    Malformed rows raise ValueError naming the line.
    """
    path = Path(path)
    users_raw: list[str] = []
    items_raw: list[str] = []
    times: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                ts = int(parts[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric timestamp {parts[2]!r}") from None
            users_raw.append(parts[0])
            items_raw.append(parts[1])
            times.append(ts)
    if not users_raw:
        raise ValueError(f"{path}: empty interactions file")

    umap = dict(user_map) if user_map is not None else {}
    imap = dict(item_map) if item_map is not None else {}

    def densify(raw: list[str], mapping: dict[str, int], fixed: bool, kind: str) -> np.ndarray:
        out = np.empty(len(raw), dtype=np.int64)
        for i, r in enumerate(raw):
            if r not in mapping:
                if fixed:
                    raise ValueError(f"{path}: {kind} id {r!r} not present in supplied id map")
                mapping[r] = len(mapping)
            out[i] = mapping[r]
        return out

    users = densify(users_raw, umap, user_map is not None, "user")
    items = densify(items_raw, imap, item_map is not None, "item")
    times_arr = np.asarray(times, dtype=np.int64)
    users, items, times_arr = _sort_per_user(users, items, times_arr)
    return InteractionLog(users, items, times_arr, umap, imap)


def write_interactions(path: str | Path, log: InteractionLog) -> None:
    inv_u = {v: k for k, v in log.user_map.items()} if log.user_map else {}
    inv_i = {v: k for k, v in log.item_map.items()} if log.item_map else {}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, t in zip(log.users.tolist(), log.items.tolist(), log.times.tolist()):
            fh.write(f"{inv_u.get(u, u)}\t{inv_i.get(i, i)}\t{t}\n")


def write_id_map(path: str | Path, mapping: dict[str, int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for raw, dense in sorted(mapping.items(), key=lambda kv: kv[1]):
            fh.write(f"{raw}\t{dense}\n")


def load_id_map(path: str | Path) -> dict[str, int]:
    mapping: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            raw, dense = line.rstrip("\n").split("\t")
            mapping[raw] = int(dense)
    return mapping


@dataclass
class SplitDataset:
    """Leave-one-out splits: per-user (history, target) pairs."""

    train: list[tuple[list[int], int]]
    valid: dict[int, tuple[list[int], int]]
    test: dict[int, tuple[list[int], int]]
    min_test_len: int

    @property
    def n_train(self) -> int:
        return len(self.train)


def chronological_split(log: InteractionLog, min_test_len: int = 10) -> SplitDataset:
    """Leave-one-out split of each user's chronological sequence.

    Last item -> test target, second-to-last -> valid target, every earlier
    (prefix, next) pair -> train. Users with fewer than 3 events contribute
    to train only; users with total length < `min_test_len` are additionally
    dropped from test.
    """
    train: list[tuple[list[int], int]] = []
    valid: dict[int, tuple[list[int], int]] = {}
    test: dict[int, tuple[list[int], int]] = {}
    for user, seq in sorted(log.sequences().items()):
        n = len(seq)
        if n < 2:
            continue
        if n == 2:
            train.append((seq[:1], seq[1]))
            continue
        for k in range(1, n - 2):
            train.append((seq[:k], seq[k]))
        valid[user] = (seq[: n - 2], seq[n - 2])
        if n >= min_test_len:
            test[user] = (seq[: n - 1], seq[n - 1])
    return SplitDataset(train, valid, test, min_test_len)


def train_sequences(log: InteractionLog) -> dict[int, list[int]]:
    """Per-user sequences with the held-out valid/test targets removed.

    Users with fewer than 3 events have no held-out items (they never enter
    valid/test), so their full sequence is kept.
    """
    out: dict[int, list[int]] = {}
    for user, seq in log.sequences().items():
        out[user] = seq[:-2] if len(seq) >= 3 else seq
    return out


@dataclass
class ItemEmbeddingMatrix:
    X: np.ndarray  # (N, d) float32
    source: str = "external"

    @property
    def n_items(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def write_embeddings(path: str | Path, X: np.ndarray) -> None:
    X = np.ascontiguousarray(X, dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", X.shape[0], X.shape[1]))
        fh.write(b"\x00\x00\x00\x00")
        fh.write(X.tobytes())


def load_item_embeddings(path: str | Path, expected_n: int | None = None,
                         source: str = "external") -> ItemEmbeddingMatrix:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EMB_MAGIC:
            raise ValueError(f"{path}: not an EMB1 file (magic {magic!r})")
        n, d = struct.unpack("<II", fh.read(8))
        fh.read(4)
        data = np.frombuffer(fh.read(4 * n * d), dtype="<f4")
        if data.size != n * d:
            raise ValueError(f"{path}: truncated payload ({data.size} of {n * d} floats)")
        X = data.reshape(n, d).copy()
    if expected_n is not None and n != expected_n:
        raise ValueError(f"{path}: header N={n} does not match catalog size {expected_n}")
    bad = ~np.isfinite(X).all(axis=1)
    if bad.any():
        raise ValueError(f"{path}: non-finite embedding at row {int(np.argmax(bad))}")
    return ItemEmbeddingMatrix(X, source=source)


@dataclass
class SyntheticSpec:
    """Planted two-level hierarchy with category-sticky random-walk sessions."""

    top_categories: int = 4
    subcategories_per_top: int = 4
    items_per_sub: int = 60
    embedding_dim: int = 32
    noise: float = 0.1
    p_stay: float = 0.9
    users: int = 2000
    session_min: int = 10
    session_max: int = 30
    seed: int = 42

    @property
    def n_items(self) -> int:
        return self.top_categories * self.subcategories_per_top * self.items_per_sub

    def validate(self) -> None:
        if min(self.top_categories, self.subcategories_per_top, self.items_per_sub,
               self.users, self.session_min) < 1:
            raise ValueError("synthetic spec: all counts must be >= 1")
        if not 0.0 <= self.p_stay <= 1.0:
            raise ValueError("synthetic spec: p_stay must lie in [0, 1]")
        if self.noise < 0:
            raise ValueError("synthetic spec: noise must be >= 0")
        if self.session_max < self.session_min:
            raise ValueError("synthetic spec: session_max < session_min")


@dataclass
class PlantedHierarchy:
    top: np.ndarray  # (N,) top-category label per item
    sub: np.ndarray  # (N,) global subcategory label per item


def generate_synthetic(spec: SyntheticSpec) -> tuple[InteractionLog, ItemEmbeddingMatrix, PlantedHierarchy]:
    """Draw item embeddings around a planted hierarchy and walk sticky sessions.

    Item embedding = top-category center + subcategory offset + N(0, noise^2).
    Sessions stay in the current subcategory with probability p_stay; a jump
    leaves it, returning to the session's anchor subcategory (that of the
    first item) when possible and drawing uniformly outside the current
    subcategory otherwise. Either way the within-subcategory transition
    frequency converges to p_stay, and jump targets carry a long-range
    dependency on the session opening.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    t, s, m = spec.top_categories, spec.subcategories_per_top, spec.items_per_sub
    n = spec.n_items

    top_labels = np.repeat(np.arange(t), s * m)
    sub_labels = np.repeat(np.arange(t * s), m)

    top_centers = rng.normal(0.0, 3.0, size=(t, spec.embedding_dim))
    sub_offsets = rng.normal(0.0, 1.0, size=(t * s, spec.embedding_dim))
    X = (
        top_centers[top_labels]
        + sub_offsets[sub_labels]
        + rng.normal(0.0, spec.noise, size=(n, spec.embedding_dim))
    ).astype(np.float32)

    users: list[int] = []
    items: list[int] = []
    times: list[int] = []
    for u in range(spec.users):
        length = int(rng.integers(spec.session_min, spec.session_max + 1))
        cur = int(rng.integers(n))
        anchor_sub = cur // m
        for step in range(length):
            users.append(u)
            items.append(cur)
            times.append(step)
            sub = cur // m
            if rng.random() < spec.p_stay:
                cur = sub * m + int(rng.integers(m))
            elif anchor_sub != sub:
                cur = anchor_sub * m + int(rng.integers(m))
            else:
                # uniform over items outside the current subcategory
                other = int(rng.integers(n - m))
                cur = other if other < sub * m else other + m

    user_map = {str(u): u for u in range(spec.users)}
    item_map = {str(i): i for i in range(n)}
    log = InteractionLog(
        np.asarray(users, dtype=np.int64),
        np.asarray(items, dtype=np.int64),
        np.asarray(times, dtype=np.int64),
        user_map,
        item_map,
    )
    return log, ItemEmbeddingMatrix(X, source="synthetic"), PlantedHierarchy(top_labels, sub_labels)


def write_hierarchy(path: str | Path, hierarchy: PlantedHierarchy) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, (tl, sl) in enumerate(zip(hierarchy.top.tolist(), hierarchy.sub.tolist())):
            fh.write(f"{i}\t{tl}\t{sl}\n")


def load_hierarchy(path: str | Path) -> PlantedHierarchy:
    top: list[int] = []
    sub: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            _, tl, sl = line.rstrip("\n").split("\t")
            top.append(int(tl))
            sub.append(int(sl))
    return PlantedHierarchy(np.asarray(top), np.asarray(sub))
