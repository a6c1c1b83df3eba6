"""Pre-ranking feature assembly: run every (scorer x market-combination)
over a candidate run file, attach global statistics and external-embedding
similarities, and keep everything cached and resumable on disk."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import embeddings as emb
from . import memory_cf as mcf
from .data import (CombinationSpec, IdEncoder, Interaction, RunFile,
                   SparseInteractionMatrix, build_matrix)
from .util import ConfigError, DataError, atomic_write_text, fmt, params_hash

SCORERS = ("item_cf", "user_cf", "swing", "llr", "bigraph",
           "word2vec", "node2vec_dfs", "node2vec_bfs", "lightgcn")


@dataclass(frozen=True)
class ScorerSpec:
    scorer: str
    params: Mapping
    combination: CombinationSpec

    def __post_init__(self):
        if self.scorer not in SCORERS:
            raise ConfigError(f"unknown scorer {self.scorer!r}")

    @property
    def feature_name(self) -> str:
        return (f"{self.scorer}__{params_hash(dict(self.params))}"
                f"__{self.combination.combo_id}")


@dataclass(frozen=True)
class FeatureTable:
    """Rows keyed by (user, item); dense float64 columns; optional labels."""

    users: tuple[str, ...]
    items: tuple[str, ...]
    columns: tuple[str, ...]
    values: np.ndarray
    labels: np.ndarray | None = None
    provenance: Mapping[str, Mapping] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.users)
        if len(self.items) != n:
            raise ValueError("users and items must align")
        if self.values.shape != (n, len(self.columns)):
            raise ValueError("values shape does not match rows x columns")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")
        if self.labels is not None:
            if len(self.labels) != n:
                raise ValueError("labels must align with rows")
            if not set(np.unique(self.labels)) <= {0, 1}:
                raise ValueError("labels must be 0/1")
        if len(set(zip(self.users, self.items))) != n:
            raise ValueError("duplicate (user, item) keys")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("duplicate column names")

    @property
    def n_rows(self) -> int:
        return len(self.users)

    def column(self, name: str) -> np.ndarray:
        try:
            pos = self.columns.index(name)
        except ValueError:
            raise KeyError(f"no feature column {name!r}") from None
        return self.values[:, pos]

    def select(self, names: Sequence[str]) -> "FeatureTable":
        pos = []
        for name in names:
            if name not in self.columns:
                raise KeyError(f"no feature column {name!r}")
            pos.append(self.columns.index(name))
        return FeatureTable(self.users, self.items, tuple(names),
                            self.values[:, pos].copy(), self.labels,
                            {n: self.provenance[n] for n in names
                             if n in self.provenance})

    def with_labels(self, labels: np.ndarray) -> "FeatureTable":
        return FeatureTable(self.users, self.items, self.columns, self.values,
                            np.asarray(labels, dtype=np.int8), self.provenance)

    def take(self, indices) -> "FeatureTable":
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureTable(tuple(self.users[i] for i in idx),
                            tuple(self.items[i] for i in idx),
                            self.columns, self.values[idx],
                            None if self.labels is None else self.labels[idx],
                            self.provenance)

    def with_columns(self, names: Sequence[str], matrix: np.ndarray,
                     provenance: Mapping[str, Mapping]) -> "FeatureTable":
        merged = dict(self.provenance)
        merged.update(provenance)
        values = (np.hstack([self.values, matrix])
                  if self.columns else np.asarray(matrix, dtype=np.float64))
        return FeatureTable(self.users, self.items,
                            self.columns + tuple(names), values,
                            self.labels, merged)


def empty_table(run: RunFile) -> FeatureTable:
    users, items = [], []
    for user, cands in run.entries:
        for c in cands:
            users.append(user)
            items.append(c)
    return FeatureTable(tuple(users), tuple(items), (),
                        np.zeros((len(users), 0)))


def write_table(table: FeatureTable, tsv_path, catalog_path) -> None:
    header = ["user", "item"] + (["label"] if table.labels is not None else [])
    header += list(table.columns)
    lines = ["\t".join(header)]
    for r in range(table.n_rows):
        row = [table.users[r], table.items[r]]
        if table.labels is not None:
            row.append(str(int(table.labels[r])))
        row += [fmt(v) for v in table.values[r]]
        lines.append("\t".join(row))
    atomic_write_text(Path(tsv_path), "\n".join(lines) + "\n")
    catalog = {"columns": list(table.columns),
               "has_labels": table.labels is not None,
               "provenance": {k: dict(v) for k, v in table.provenance.items()}}
    atomic_write_text(Path(catalog_path),
                      json.dumps(catalog, indent=2, sort_keys=True) + "\n")


def read_table(tsv_path, catalog_path=None) -> FeatureTable:
    tsv_path = Path(tsv_path)
    if not tsv_path.exists():
        raise DataError(f"feature table not found: {tsv_path}")
    with tsv_path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:2] != ["user", "item"]:
            raise DataError(f"{tsv_path}:1: bad feature table header")
        has_labels = len(header) > 2 and header[2] == "label"
        col_start = 3 if has_labels else 2
        columns = tuple(header[col_start:])
        users, items, labels, rows = [], [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(header):
                raise DataError(f"{tsv_path}:{lineno}: wrong field count")
            users.append(parts[0])
            items.append(parts[1])
            if has_labels:
                labels.append(int(parts[2]))
            try:
                rows.append([float(v) for v in parts[col_start:]])
            except ValueError:
                raise DataError(f"{tsv_path}:{lineno}: non-numeric value") from None
    provenance = {}
    if catalog_path is not None and Path(catalog_path).exists():
        catalog = json.loads(Path(catalog_path).read_text(encoding="utf-8"))
        provenance = catalog.get("provenance", {})
    values = (np.array(rows) if rows
              else np.zeros((0, len(columns))))
    return FeatureTable(tuple(users), tuple(items), columns,
                        values.reshape(len(users), len(columns)),
                        np.array(labels, dtype=np.int8) if has_labels else None,
                        provenance)


def default_combinations(target: str, all_markets: Sequence[str],
                         targets: Sequence[str] | None = None
                         ) -> list[CombinationSpec]:
    """The ten benchmark market combinations for one target: all markets,
    all sources + target, target alone, both targets, every source pair +
    target, every single source + target."""
    all_markets = sorted(all_markets)
    if target not in all_markets:
        raise ConfigError(f"target {target!r} not among markets")
    if targets is None:
        targets = [m for m in all_markets if m.startswith("t")]
    targets = sorted(targets)
    sources = [m for m in all_markets if m not in targets]
    if len(sources) != 3 or len(targets) != 2:
        raise ConfigError("expected exactly 3 source and 2 target markets")
    s1, s2, s3 = sources

    def spec(markets):
        return CombinationSpec(target, tuple(sorted(set(markets))))

    return [
        spec(all_markets),
        spec([s1, s2, s3, target]),
        spec([target]),
        spec(targets),
        spec([s1, s3, target]),
        spec([s1, s2, target]),
        spec([s2, s3, target]),
        spec([s1, target]),
        spec([s2, target]),
        spec([s3, target]),
    ]


@dataclass(frozen=True)
class PlanContext:
    """Everything run_plan needs: encoded interactions and the encoders.

    model_cache memoizes fitted similarity tables / embedding tables per
    (scorer, params, combination) so that scoring a second run file does
    not retrain anything."""

    rows: tuple[Interaction, ...]
    users: IdEncoder
    items: IdEncoder
    cache_dir: Path | None = None
    model_cache: dict = field(default_factory=dict, compare=False)


def _scorer_columns(spec: ScorerSpec, matrix: SparseInteractionMatrix,
                    ctx: PlanContext, run: RunFile) -> tuple[np.ndarray, np.ndarray]:
    """Score all run pairs with one spec; returns (values, missing) arrays."""
    p = dict(spec.params)
    values, missing = [], []
    cache_key = (spec.scorer, params_hash(p), spec.combination.combo_id)

    def fitted(builder):
        if cache_key not in ctx.model_cache:
            ctx.model_cache[cache_key] = builder()
        return ctx.model_cache[cache_key]

    if spec.scorer in ("item_cf", "swing", "llr"):
        k = int(p.get("top_k", mcf.DEFAULT_TOP_K))
        if spec.scorer == "item_cf":
            table = fitted(lambda: mcf.item_cosine_similarity(matrix, k))
        elif spec.scorer == "swing":
            table = fitted(lambda: mcf.swing_similarity(
                matrix.binarized(), alpha=float(p.get("alpha", 1.0)), k=k,
                max_users_per_item=int(p.get("max_users_per_item",
                                             mcf.DEFAULT_SWING_MAX_USERS))))
        else:
            table = fitted(lambda: mcf.llr_item_similarity(matrix.binarized(), k))
        for user, cands in run.entries:
            u = ctx.users.forward.get(user, -1)
            c_ids = np.array([ctx.items.encode(c) for c in cands])
            scores, cold = mcf.score_candidates(table, matrix, u, c_ids)
            values.append(scores)
            missing.append(np.full(len(cands), cold))

    elif spec.scorer == "user_cf":
        table = fitted(lambda: mcf.user_cosine_similarity(
            matrix, int(p.get("top_k", mcf.DEFAULT_TOP_K))))
        for user, cands in run.entries:
            u = ctx.users.forward.get(user, -1)
            c_ids = np.array([ctx.items.encode(c) for c in cands])
            scores, cold = mcf.score_candidates_user_based(table, matrix, u, c_ids)
            values.append(scores)
            missing.append(np.full(len(cands), cold))

    elif spec.scorer == "bigraph":
        bmatrix = matrix.binarized()
        retain = bool(p.get("retain_seed", True))
        for user, cands in run.entries:
            u = ctx.users.forward.get(user, -1)
            c_ids = np.array([ctx.items.encode(c) for c in cands])
            scores = np.zeros(len(cands))
            if 0 <= u < bmatrix.n_users:
                nz, mass = mcf.bigraph_scores(bmatrix, u, retain_seed=retain)
                cold = len(nz) == 0
                if not cold:
                    pos = np.searchsorted(nz, c_ids)
                    pos[pos == len(nz)] = 0
                    hit = nz[pos] == c_ids
                    scores[hit] = mass[pos[hit]]
            else:
                cold = True
            values.append(scores)
            missing.append(np.full(len(cands), cold))

    else:
        table = fitted(lambda: _embedding_table(spec.scorer, p, matrix))
        metric = p.get("metric", "dot" if spec.scorer == "lightgcn" else "cosine")
        for user, cands in run.entries:
            u = ctx.users.forward.get(user, -1)
            c_ids = [ctx.items.encode(c) for c in cands]
            scores, miss = emb.embedding_score(table, u, c_ids, metric=metric)
            values.append(scores)
            missing.append(miss)

    return np.concatenate(values), np.concatenate(missing).astype(np.float64)


def _embedding_table(scorer: str, p: Mapping,
                     matrix: SparseInteractionMatrix) -> emb.EmbeddingTable:
    seed = int(p.get("seed", 0))
    sg = emb.SkipGramParams(dim=int(p.get("dim", 64)),
                            window=int(p.get("window", 5)),
                            negatives=int(p.get("negatives", 5)),
                            epochs=int(p.get("epochs", 3)),
                            learning_rate=float(p.get("learning_rate", 0.025)),
                            seed=seed)
    if scorer == "word2vec":
        corpus = emb.user_history_sequences(matrix, int(p.get("shuffles", 2)),
                                            seed)
        table = emb.train_skipgram(corpus, sg)
        return emb.derive_user_vectors(matrix, table)
    if scorer in ("node2vec_dfs", "node2vec_bfs"):
        q = 0.5 if scorer == "node2vec_dfs" else 2.0
        walks = emb.generate_walks(matrix, emb.WalkParams(
            p=float(p.get("p", 1.0)), q=float(p.get("q", q)),
            walk_length=int(p.get("walk_length", 20)),
            walks_per_node=int(p.get("walks_per_node", 10)), seed=seed))
        n_users = matrix.n_users

        def key(token: int) -> str:
            return (emb.user_node(token) if token < n_users
                    else emb.item_node(token - n_users))

        return emb.train_skipgram(walks, sg, node_key=key)
    if scorer == "lightgcn":
        return emb.train_lightgcn(matrix.binarized(), emb.LightGcnParams(
            layers=int(p.get("layers", 4)), dim=int(p.get("dim", 64)),
            node_dropout=float(p.get("node_dropout", 0.4)),
            learning_rate=float(p.get("learning_rate", 0.001)),
            l2_reg=float(p.get("l2_reg", 1e-4)),
            epochs=int(p.get("epochs", 20)),
            batch_size=int(p.get("batch_size", 1024)), seed=seed))
    raise ConfigError(f"unknown embedding scorer {scorer!r}")


def combination_matrix(ctx: PlanContext,
                       combination: CombinationSpec) -> SparseInteractionMatrix:
    """Training matrix for one market combination: training splits plus
    cross-market valid positives, never any test positives; the target's
    own valid positives are excluded by the combination flag."""
    market_set = set(combination.markets)
    rows = tuple(r for r in ctx.rows
                 if r.market in market_set and r.split != "test_qrel")
    return build_matrix(rows, combination, len(ctx.users), len(ctx.items))


def _cache_path(ctx: PlanContext, name: str) -> Path | None:
    return None if ctx.cache_dir is None else Path(ctx.cache_dir) / f"{name}.tsv"


def _load_cached(path: Path, name: str, run: RunFile
                 ) -> tuple[np.ndarray, np.ndarray] | None:
    pairs = list(run.pairs())
    by_col: dict[str, list[tuple[str, str, float]]] = {name: [], f"{name}__missing": []}
    try:
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                user, item, col, value = line.rstrip("\n").split("\t")
                if col not in by_col:
                    return None
                by_col[col].append((user, item, float(value)))
    except (OSError, ValueError):
        return None
    for col_rows in by_col.values():
        if [(u, i) for u, i, _ in col_rows] != pairs:
            return None
    return (np.array([v for _, _, v in by_col[name]]),
            np.array([v for _, _, v in by_col[f"{name}__missing"]]))


def _write_cache(path: Path, name: str, run: RunFile,
                 vals: np.ndarray, miss: np.ndarray) -> None:
    pairs = list(run.pairs())
    lines = [f"{u}\t{i}\t{name}\t{fmt(v)}" for (u, i), v in zip(pairs, vals)]
    lines += [f"{u}\t{i}\t{name}__missing\t{fmt(v)}"
              for (u, i), v in zip(pairs, miss)]
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, "\n".join(lines) + "\n")


def run_plan(plan: Sequence[ScorerSpec], ctx: PlanContext, run: RunFile
             ) -> tuple[FeatureTable, list[dict]]:
    """One feature column (plus a missing-indicator column) per spec, rows
    exactly the run file's (user, candidate) pairs in order. Completed
    columns are cached on disk and skipped on re-run. A failing scorer is
    recorded and the plan continues."""
    names = [spec.feature_name for spec in plan]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate feature names in plan")
    table = empty_table(run)
    failures: list[dict] = []
    matrices: dict[str, SparseInteractionMatrix] = {}
    for spec in plan:
        name = spec.feature_name
        cache = _cache_path(ctx, name)
        got = None
        if cache is not None and cache.exists():
            got = _load_cached(cache, name, run)
        if got is None:
            try:
                combo = spec.combination.combo_id
                if combo not in matrices:
                    matrices[combo] = combination_matrix(ctx, spec.combination)
                got = _scorer_columns(spec, matrices[combo], ctx, run)
            except Exception as exc:  # noqa: BLE001 - plan must survive one bad scorer
                failures.append({"feature": name, "error": f"{type(exc).__name__}: {exc}"})
                continue
            if cache is not None:
                _write_cache(cache, name, run, *got)
        vals, miss = got
        prov = {"kind": "scorer", "scorer": spec.scorer,
                "params": dict(spec.params),
                "combination": list(spec.combination.markets),
                "excludes_target_valid": spec.combination.exclude_valid_of_target}
        table = table.with_columns(
            [name, f"{name}__missing"],
            np.column_stack([vals, miss]),
            {name: prov, f"{name}__missing": {**prov, "kind": "missing_indicator"}})
    return table, failures


_STAT_SPLITS = ("train", "train_5core")


def global_statistic_features(ctx: PlanContext, run: RunFile, target: str
                              ) -> tuple[list[str], np.ndarray, dict]:
    """Fixed catalog of aggregate statistics, computed over the union of
    all markets and over the target market alone (training splits only):
    per-item interaction count (+log1p), mean rating, cross-market overlap
    count, per-user history length (+log1p) and mean rating."""
    markets = sorted({r.market for r in ctx.rows})
    scopes = {"all": set(markets), "target": {target}}
    pairs = list(run.pairs())
    columns: list[str] = []
    mats: list[np.ndarray] = []
    prov: dict[str, dict] = {}

    item_markets: dict[str, set] = {}
    for r in ctx.rows:
        if r.split in _STAT_SPLITS:
            item_markets.setdefault(ctx.items.decode(r.item), set()).add(r.market)

    def push(name, vals, miss=None):
        columns.append(name)
        mats.append(np.asarray(vals, dtype=np.float64))
        prov[name] = {"kind": "statistic", "statistic": name}
        if miss is not None:
            columns.append(f"{name}__missing")
            mats.append(np.asarray(miss, dtype=np.float64))
            prov[f"{name}__missing"] = {"kind": "missing_indicator",
                                        "statistic": name}

    for scope, scope_markets in scopes.items():
        item_count: dict[str, int] = {}
        item_sum: dict[str, float] = {}
        user_count: dict[str, int] = {}
        user_sum: dict[str, float] = {}
        for r in ctx.rows:
            if r.split not in _STAT_SPLITS or r.market not in scope_markets:
                continue
            item = ctx.items.decode(r.item)
            user = ctx.users.decode(r.user)
            item_count[item] = item_count.get(item, 0) + 1
            item_sum[item] = item_sum.get(item, 0.0) + r.rating
            user_count[user] = user_count.get(user, 0) + 1
            user_sum[user] = user_sum.get(user, 0.0) + r.rating

        ic = np.array([item_count.get(i, 0) for _, i in pairs], dtype=np.float64)
        im = np.array([item_sum.get(i, 0.0) / item_count[i]
                       if i in item_count else 0.0 for _, i in pairs])
        uc = np.array([user_count.get(u, 0) for u, _ in pairs], dtype=np.float64)
        um = np.array([user_sum.get(u, 0.0) / user_count[u]
                       if u in user_count else 0.0 for u, _ in pairs])
        push(f"stat__item_count__{scope}", ic)
        push(f"stat__item_count_log1p__{scope}", np.log1p(ic))
        push(f"stat__item_mean_rating__{scope}", im,
             miss=[0.0 if i in item_count else 1.0 for _, i in pairs])
        push(f"stat__user_history_len__{scope}", uc)
        push(f"stat__user_history_len_log1p__{scope}", np.log1p(uc))
        push(f"stat__user_mean_rating__{scope}", um,
             miss=[0.0 if u in user_count else 1.0 for u, _ in pairs])

    overlap = np.array([len(item_markets.get(i, ())) for _, i in pairs],
                       dtype=np.float64)
    push("stat__item_market_overlap__all", overlap)
    return columns, np.column_stack(mats), prov


def external_embedding_features(table: emb.EmbeddingTable, run: RunFile,
                                matrix: SparseInteractionMatrix,
                                ctx: PlanContext
                                ) -> tuple[list[str], np.ndarray, dict]:
    """Mean and max cosine between each candidate's vector and the user's
    covered history-item vectors; uncovered pairs get the missing flag."""
    mean_col, max_col, miss_col = [], [], []
    norm_cache: dict[str, np.ndarray] = {}

    def unit(raw_item: str):
        if raw_item in norm_cache:
            return norm_cache[raw_item]
        vec = table.vectors.get(raw_item)
        if vec is not None:
            n = float(np.linalg.norm(vec))
            vec = vec / n if n > 0 else None
        norm_cache[raw_item] = vec
        return vec

    for user, cands in run.entries:
        u = ctx.users.forward.get(user, -1)
        hist_units = []
        if 0 <= u < matrix.n_users:
            items, _ = matrix.row(u)
            hist_units = [v for v in (unit(ctx.items.decode(int(i)))
                                      for i in items) if v is not None]
        hist = np.stack(hist_units) if hist_units else None
        for cand in cands:
            c_vec = unit(cand)
            if c_vec is None or hist is None:
                mean_col.append(0.0)
                max_col.append(0.0)
                miss_col.append(1.0)
            else:
                cos = hist @ c_vec
                mean_col.append(float(np.mean(cos)))
                max_col.append(float(np.max(cos)))
                miss_col.append(0.0)

    names = ["ext_emb__mean_cos", "ext_emb__max_cos", "ext_emb__missing"]
    prov = {n: {"kind": "external_embedding"} for n in names}
    return names, np.column_stack([mean_col, max_col, miss_col]), prov


def feature_correlation(table: FeatureTable, columns: Sequence[str]
                        ) -> tuple[np.ndarray, list[str]]:
    """Pearson correlation matrix over the named columns. Constant columns
    correlate as 0 everywhere and are returned in the flag list."""
    if table.n_rows < 2:
        raise DataError("correlation needs at least two rows")
    mat = np.column_stack([table.column(c) for c in columns])
    centered = mat - mat.mean(axis=0)
    std = centered.std(axis=0)
    constant = std == 0
    safe = np.where(constant, 1.0, std)
    z = centered / safe
    corr = (z.T @ z) / len(z)
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    for pos in np.flatnonzero(~constant):
        corr[pos, pos] = 1.0
    return corr, [columns[i] for i in np.flatnonzero(constant)]


def write_correlation(corr: np.ndarray, columns: Sequence[str], path) -> None:
    lines = ["\t".join(["feature"] + list(columns))]
    for name, row in zip(columns, corr):
        lines.append("\t".join([name] + [fmt(v) for v in row]))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")
