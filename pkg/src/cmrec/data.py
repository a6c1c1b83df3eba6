"""Per-market interaction data: loading, id encoding, dedup, sparse matrices, summaries.

File layout per market directory (UTF-8 TSV with a header row):

    train.tsv / train_5core.tsv / valid_qrel.tsv / test_qrel.tsv
        userId <TAB> itemId <TAB> rating
    valid_run.tsv / test_run.tsv
        userId <TAB> candidate item ids (tab separated), one user per line

train.tsv and train_5core.tsv are mandatory; everything else is optional.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .util import DataError

SPLITS = ("train", "train_5core", "valid_qrel", "test_qrel")
SPLIT_FILES = {
    "train": "train.tsv",
    "train_5core": "train_5core.tsv",
    "valid_qrel": "valid_qrel.tsv",
    "test_qrel": "test_qrel.tsv",
}
MANDATORY_SPLITS = ("train", "train_5core")
RUN_FILES = {"valid": "valid_run.tsv", "test": "test_run.tsv"}


@dataclass(frozen=True, slots=True)
class RawInteraction:
    user: str
    item: str
    rating: float
    market: str
    split: str


@dataclass(frozen=True, slots=True)
class Interaction:
    """One (user, item, rating) record with dense integer ids."""

    user: int
    item: int
    rating: float
    market: str
    split: str


def load_market(dir_path, market: str):
    """Parse one market directory into raw interaction records.

    Returns (rows, report). Structurally malformed lines (wrong column
    count, blank) are skipped, counted in report["malformed"], and listed
    with line numbers in report["malformed_lines"]. A rating that is
    present but unparsable or outside [1, 5] is a hard error, as is a
    missing mandatory file.
    """
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise DataError(f"market directory not found: {dir_path} (market {market})")
    rows: list[RawInteraction] = []
    malformed = 0
    malformed_lines: list[str] = []
    for split in SPLITS:
        fname = SPLIT_FILES[split]
        fpath = dir_path / fname
        if not fpath.exists():
            if split in MANDATORY_SPLITS:
                raise DataError(f"missing mandatory file {fname} in {dir_path}")
            continue
        with fpath.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if lineno == 1:
                    continue  # header
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    malformed += 1
                    malformed_lines.append(f"{fpath}:{lineno}")
                    continue
                user, item, rating_s = parts
                try:
                    rating = float(rating_s)
                except ValueError:
                    raise DataError(f"{fpath}:{lineno}: unparsable rating {rating_s!r}") from None
                if not (1.0 <= rating <= 5.0):
                    raise DataError(f"{fpath}:{lineno}: rating {rating} outside [1, 5]")
                rows.append(RawInteraction(user, item, rating, market, split))
    report = {"market": market, "rows": len(rows), "malformed": malformed,
              "malformed_lines": malformed_lines[:20]}
    return rows, report


@dataclass(frozen=True)
class RunFile:
    """Ordered per-user candidate lists (raw string ids)."""

    entries: tuple[tuple[str, tuple[str, ...]], ...]

    def users(self) -> list[str]:
        return [u for u, _ in self.entries]

    def pairs(self) -> list[tuple[str, str]]:
        return [(u, c) for u, cands in self.entries for c in cands]


def load_run(path) -> RunFile:
    path = Path(path)
    if not path.exists():
        raise DataError(f"run file not found: {path}")
    entries = []
    seen = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno == 1:
                continue
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise DataError(f"{path}:{lineno}: run line needs a user and candidates")
            user, cands = parts[0], tuple(parts[1:])
            if user in seen:
                raise DataError(f"{path}:{lineno}: duplicate user {user!r}")
            if len(set(cands)) != len(cands):
                raise DataError(f"{path}:{lineno}: duplicate candidates for user {user!r}")
            seen.add(user)
            entries.append((user, cands))
    return RunFile(tuple(entries))


def write_run(run: RunFile, path) -> None:
    lines = ["userId\titemIds"]
    for user, cands in run.entries:
        lines.append("\t".join([user, *cands]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class IdEncoder:
    """Bijective raw-string <-> dense-int mapping, ids assigned in sorted order."""

    forward: dict[str, int]
    reverse: tuple[str, ...]

    @classmethod
    def fit(cls, values: Iterable[str]) -> "IdEncoder":
        ordered = sorted(set(values))
        return cls({v: i for i, v in enumerate(ordered)}, tuple(ordered))

    def __len__(self) -> int:
        return len(self.reverse)

    def encode(self, value: str) -> int:
        try:
            return self.forward[value]
        except KeyError:
            raise DataError(f"unknown id {value!r}") from None

    def decode(self, idx: int) -> str:
        return self.reverse[idx]

    def encode_many(self, values: Sequence[str]) -> np.ndarray:
        return np.array([self.encode(v) for v in values], dtype=np.int64)


def fit_encoders(rows: Sequence[RawInteraction],
                 runs: Sequence[RunFile] = ()) -> tuple[IdEncoder, IdEncoder]:
    """Build the global user/item encoders over interactions plus run files.

    One id space is shared across all markets: items overlap between
    markets, users do not, but a single dense space keeps every matrix
    addressable by the same indices.
    """
    users = {r.user for r in rows}
    items = {r.item for r in rows}
    for run in runs:
        for u, cands in run.entries:
            users.add(u)
            items.update(cands)
    return IdEncoder.fit(users), IdEncoder.fit(items)


def encode_interactions(rows: Sequence[RawInteraction],
                        users: IdEncoder, items: IdEncoder) -> list[Interaction]:
    return [Interaction(users.encode(r.user), items.encode(r.item), r.rating,
                        r.market, r.split) for r in rows]


def dedupe_and_mark_5core(rows, force_rating: float = 5.0):
    """Collapse duplicate (user, item, market, split) rows keeping the last
    occurrence, then force every train_5core rating to `force_rating`.

    Works on raw or encoded interactions; row order is otherwise stable
    (a collapsed row keeps the position of its first occurrence).
    """
    byname = {}
    for r in rows:
        byname[(r.user, r.item, r.market, r.split)] = r
    out = []
    for r in byname.values():
        if r.split == "train_5core" and r.rating != force_rating:
            r = replace(r, rating=force_rating)
        out.append(r)
    return out


@dataclass(frozen=True)
class CombinationSpec:
    """Which market union feeds one scorer instance, and the leakage rule.

    exclude_valid_of_target drops every (user, item) pair found in the
    target market's valid_qrel from the union, so no valid positive can
    leak into features that later train the final ranker.
    """

    target: str
    markets: tuple[str, ...]
    exclude_valid_of_target: bool = True

    def __post_init__(self):
        if self.target not in self.markets:
            raise ValueError(f"target {self.target!r} not in markets {self.markets}")

    @property
    def combo_id(self) -> str:
        return "-".join(self.markets)


@dataclass(frozen=True)
class SparseInteractionMatrix:
    """Immutable user x item matrix with both row and column adjacency.

    user_ptr/user_items/user_ratings form a CSR view (items strictly
    increasing within each row); item_ptr/item_users/item_ratings the
    matching CSC view. Both views hold the identical nonzero set.
    """

    n_users: int
    n_items: int
    user_ptr: np.ndarray
    user_items: np.ndarray
    user_ratings: np.ndarray
    item_ptr: np.ndarray
    item_users: np.ndarray
    item_ratings: np.ndarray

    @classmethod
    def from_pairs(cls, users: np.ndarray, items: np.ndarray, ratings: np.ndarray,
                   n_users: int, n_items: int) -> "SparseInteractionMatrix":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        ratings = np.asarray(ratings, dtype=np.float64)
        if len(users) and (users.min() < 0 or users.max() >= n_users):
            raise DataError("user id outside encoder range")
        if len(items) and (items.min() < 0 or items.max() >= n_items):
            raise DataError("item id outside encoder range")
        order = np.lexsort((items, users))
        u, it, r = users[order], items[order], ratings[order]
        if len(u) > 1 and bool(np.any((u[1:] == u[:-1]) & (it[1:] == it[:-1]))):
            raise DataError("duplicate (user, item) pair in matrix input")
        user_ptr = np.zeros(n_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(u, minlength=n_users), out=user_ptr[1:])
        order_c = np.lexsort((u, it))
        item_ptr = np.zeros(n_items + 1, dtype=np.int64)
        np.cumsum(np.bincount(it, minlength=n_items), out=item_ptr[1:])
        return cls(n_users, n_items, user_ptr, it, r,
                   item_ptr, u[order_c], r[order_c])

    @property
    def nnz(self) -> int:
        return int(len(self.user_items))

    def row(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.user_ptr[user], self.user_ptr[user + 1]
        return self.user_items[s:e], self.user_ratings[s:e]

    def col(self, item: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.item_ptr[item], self.item_ptr[item + 1]
        return self.item_users[s:e], self.item_ratings[s:e]

    def user_degrees(self) -> np.ndarray:
        return np.diff(self.user_ptr)

    def item_degrees(self) -> np.ndarray:
        return np.diff(self.item_ptr)

    def binarized(self) -> "SparseInteractionMatrix":
        return replace(self, user_ratings=np.ones_like(self.user_ratings),
                       item_ratings=np.ones_like(self.item_ratings))

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_users, self.n_items))
        for u in range(self.n_users):
            it, r = self.row(u)
            dense[u, it] = r
        return dense

    def validate(self) -> None:
        """Full-enumeration consistency check; intended for tests (small nnz)."""
        rows = {(u, int(i), float(r)) for u in range(self.n_users)
                for i, r in zip(*self.row(u))}
        cols = {(int(u), i, float(r)) for i in range(self.n_items)
                for u, r in zip(*self.col(i))}
        if rows != cols:
            raise AssertionError("row/col adjacency disagree")
        for u in range(self.n_users):
            it, _ = self.row(u)
            if len(it) > 1 and not bool(np.all(np.diff(it) > 0)):
                raise AssertionError(f"row {u} not strictly increasing")
        for i in range(self.n_items):
            us, _ = self.col(i)
            if len(us) > 1 and not bool(np.all(np.diff(us) > 0)):
                raise AssertionError(f"col {i} not strictly increasing")


def build_matrix(rows: Sequence[Interaction], spec: CombinationSpec,
                 n_users: int, n_items: int) -> SparseInteractionMatrix:
    """Union the interactions of spec.markets into one matrix.

    Applies the valid-positive exclusion when the spec asks for it. A
    (user, item) pair seen in several splits collapses to its maximum
    rating, keeping the matrix free of duplicate nonzeros.
    """
    market_set = set(spec.markets)
    for r in rows:
        if r.market not in market_set:
            raise DataError(f"row market {r.market!r} outside combination {spec.combo_id}")
    if spec.exclude_valid_of_target:
        banned = {(r.user, r.item) for r in rows
                  if r.market == spec.target and r.split == "valid_qrel"}
        rows = [r for r in rows if (r.user, r.item) not in banned]
    merged: dict[tuple[int, int], float] = {}
    for r in rows:
        key = (r.user, r.item)
        prev = merged.get(key)
        if prev is None or r.rating > prev:
            merged[key] = r.rating
    if merged:
        keys = np.array(list(merged.keys()), dtype=np.int64)
        vals = np.array(list(merged.values()), dtype=np.float64)
        return SparseInteractionMatrix.from_pairs(keys[:, 0], keys[:, 1], vals,
                                                  n_users, n_items)
    return SparseInteractionMatrix.from_pairs(
        np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), n_users, n_items)


@dataclass
class DatasetSummary:
    markets: list[str]
    samples: dict[str, int]
    users: dict[str, int]
    items: dict[str, int]
    rating_mean: dict[str, float]
    overlap: dict[str, dict[str, int]]
    total_samples: int = 0
    total_users: int = 0
    total_items: int = 0
    unique_items: int = 0

    def to_dict(self) -> dict:
        return {
            "markets": self.markets,
            "samples": self.samples,
            "users": self.users,
            "items": self.items,
            "rating_mean": self.rating_mean,
            "overlap": self.overlap,
            "total_samples": self.total_samples,
            "total_users": self.total_users,
            "total_items": self.total_items,
            "unique_items": self.unique_items,
        }


def summarize(rows: Sequence[Interaction]) -> DatasetSummary:
    """Per-market counts, rating means, and the shared-item overlap matrix."""
    markets = sorted({r.market for r in rows})
    items_by_market: dict[str, set[int]] = {m: set() for m in markets}
    users_by_market: dict[str, set[int]] = {m: set() for m in markets}
    samples = {m: 0 for m in markets}
    rating_sum = {m: 0.0 for m in markets}
    for r in rows:
        items_by_market[r.market].add(r.item)
        users_by_market[r.market].add(r.user)
        samples[r.market] += 1
        rating_sum[r.market] += r.rating
    overlap = {
        a: {b: len(items_by_market[a] & items_by_market[b]) for b in markets}
        for a in markets
    }
    all_items = set().union(*items_by_market.values()) if markets else set()
    return DatasetSummary(
        markets=markets,
        samples=samples,
        users={m: len(users_by_market[m]) for m in markets},
        items={m: len(items_by_market[m]) for m in markets},
        rating_mean={m: (rating_sum[m] / samples[m] if samples[m] else 0.0)
                     for m in markets},
        overlap=overlap,
        total_samples=sum(samples.values()),
        total_users=sum(len(v) for v in users_by_market.values()),
        total_items=sum(len(v) for v in items_by_market.values()),
        unique_items=len(all_items),
    )
