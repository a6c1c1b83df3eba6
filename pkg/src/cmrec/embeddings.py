"""Embedding scorers: skip-gram over history sequences or biased walks,
and a LightGCN trainer with BPR loss.

Nodes live on the bipartite user-item graph. Embedding tables key vectors
by node strings — ``u:<id>`` for users, ``i:<id>`` for items — so one
table can hold both sides; externally supplied tables may use raw item
ids instead.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import SparseInteractionMatrix
from .util import DataError, fmt, stage_seed, atomic_write_text

log = logging.getLogger(__name__)


def user_node(user) -> str:
    return f"u:{user}"


def item_node(item) -> str:
    return f"i:{item}"


@dataclass(frozen=True)
class WalkParams:
    p: float = 1.0
    q: float = 1.0
    walk_length: int = 20
    walks_per_node: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.p <= 0 or self.q <= 0:
            raise ValueError("p and q must be positive")
        if self.walk_length < 2:
            raise ValueError("walk_length must be at least 2")


@dataclass(frozen=True)
class SkipGramParams:
    dim: int = 64
    window: int = 5
    negatives: int = 5
    epochs: int = 3
    learning_rate: float = 0.025
    seed: int = 0

    def __post_init__(self):
        for name in ("dim", "window", "negatives", "epochs", "learning_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class LightGcnParams:
    layers: int = 4
    dim: int = 64
    node_dropout: float = 0.4
    learning_rate: float = 0.001
    l2_reg: float = 1e-4
    epochs: int = 20
    batch_size: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be at least 1")
        if not 0.0 <= self.node_dropout < 1.0:
            raise ValueError("node_dropout must lie in [0, 1)")


@dataclass(frozen=True)
class EmbeddingTable:
    """node key → fixed-width vector; meta carries training diagnostics."""

    dim: int
    vectors: dict[str, np.ndarray]
    meta: Mapping | None = field(default=None, compare=False)

    def __post_init__(self):
        for key, vec in self.vectors.items():
            if len(vec) != self.dim:
                raise ValueError(f"vector for {key!r} has wrong width")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"non-finite vector for {key!r}")

    def __contains__(self, key) -> bool:
        return key in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)


def write_embedding_tsv(table: EmbeddingTable, path) -> None:
    lines = []
    for key in sorted(table.vectors):
        vec = table.vectors[key]
        lines.append("\t".join([key] + [fmt(v) for v in vec]))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_embedding_tsv(path) -> EmbeddingTable:
    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding file not found: {path}")
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise DataError(f"{path}:{lineno}: expected node id and values")
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric vector value") from None
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{path}:{lineno}: non-finite vector value")
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise DataError(f"{path}:{lineno}: inconsistent vector width")
            if parts[0] in vectors:
                raise DataError(f"{path}:{lineno}: duplicate node id {parts[0]!r}")
            vectors[parts[0]] = vec
    if dim is None:
        raise DataError(f"embedding file is empty: {path}")
    return EmbeddingTable(dim, vectors)


# --- biased walks -----------------------------------------------------------

def bipartite_adjacency(m: SparseInteractionMatrix) -> list[np.ndarray]:
    """Neighbor lists in a unified node space: users 0..n_users-1, items
    offset by n_users. Ratings are ignored."""
    adj: list[np.ndarray] = []
    for u in range(m.n_users):
        items, _ = m.row(u)
        adj.append(items + m.n_users)
    for i in range(m.n_items):
        users, _ = m.col(i)
        adj.append(users.copy())
    return adj


def transition_weights(adj: Sequence[np.ndarray], prev: int, cur: int,
                       p: float, q: float) -> np.ndarray:
    """Unnormalized second-order weights for each neighbor of cur: 1/p to
    return to prev, 1 to a common neighbor of prev and cur, 1/q else."""
    nbrs = adj[cur]
    weights = np.full(len(nbrs), 1.0 / q)
    prev_nbrs = adj[prev]
    common = np.isin(nbrs, prev_nbrs, assume_unique=True)
    weights[common] = 1.0
    weights[nbrs == prev] = 1.0 / p
    return weights


def _draw(rng: np.random.Generator, weights: np.ndarray) -> int:
    cdf = np.cumsum(weights)
    return int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))


def generate_walks(m: SparseInteractionMatrix,
                   params: WalkParams) -> list[list[int]]:
    """Second-order biased walks from every non-isolated node, alternating
    sides of the bipartite graph. Node ids are unified (items offset by
    n_users). Deterministic given the seed."""
    adj = bipartite_adjacency(m)
    walks: list[list[int]] = []
    for start in range(len(adj)):
        if len(adj[start]) == 0:
            continue
        for w in range(params.walks_per_node):
            rng = np.random.default_rng(
                stage_seed(params.seed, "walk", str(start), str(w)))
            walk = [start]
            cur = start
            prev = -1
            for _ in range(params.walk_length - 1):
                nbrs = adj[cur]
                if prev < 0:
                    nxt = int(nbrs[_draw(rng, np.ones(len(nbrs)))])
                else:
                    weights = transition_weights(adj, prev, cur,
                                                 params.p, params.q)
                    nxt = int(nbrs[_draw(rng, weights)])
                walk.append(nxt)
                prev, cur = cur, nxt
            walks.append(walk)
    return walks


def user_history_sequences(m: SparseInteractionMatrix, shuffles: int,
                           seed: int) -> list[list[int]]:
    """Each user's item history, emitted `shuffles` times in independently
    seeded random orders. Tokens are plain item ids."""
    if shuffles < 1:
        raise ValueError("shuffles must be at least 1")
    corpus: list[list[int]] = []
    for u in range(m.n_users):
        items, _ = m.row(u)
        if len(items) == 0:
            continue
        for s in range(shuffles):
            rng = np.random.default_rng(stage_seed(seed, "hist", str(u), str(s)))
            corpus.append([int(i) for i in rng.permutation(items)])
    return corpus


# --- skip-gram with negative sampling ---------------------------------------

def sgns_pair_loss(v_c: np.ndarray, u_o: np.ndarray, u_negs: np.ndarray
                   ) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Loss and gradients for one (center, context, negatives) example:
    -log σ(u_o·v_c) - Σ log σ(-u_n·v_c). Returns (loss, d v_c, d u_o, d u_negs)."""
    pos = float(u_o @ v_c)
    negs = u_negs @ v_c
    loss = -_log_sigmoid(pos) - float(np.sum(_log_sigmoid(-negs)))
    g_pos = _sigmoid(pos) - 1.0
    g_negs = _sigmoid(negs)
    d_vc = g_pos * u_o + g_negs @ u_negs
    d_uo = g_pos * v_c
    d_unegs = g_negs[:, None] * v_c[None, :]
    return loss, d_vc, d_uo, d_unegs


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _log_sigmoid(x):
    # log σ(x) = -log1p(exp(-x)), stable on both tails.
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def _pairs_for_sequence(seq: list[int], window: int) -> tuple[np.ndarray, np.ndarray]:
    centers, contexts = [], []
    n = len(seq)
    for t in range(n):
        lo, hi = max(0, t - window), min(n, t + window + 1)
        for j in range(lo, hi):
            if j != t:
                centers.append(seq[t])
                contexts.append(seq[j])
    return np.array(centers, dtype=np.int64), np.array(contexts, dtype=np.int64)


def train_skipgram(corpus: Iterable[Sequence[int]], params: SkipGramParams,
                   node_key=None) -> EmbeddingTable:
    """Skip-gram with negative sampling over integer-token sequences.

    Negatives come from the unigram^0.75 distribution. Updates are applied
    in deterministic chunks of pairs; input vectors (W_in) become the
    embedding. node_key maps a token to its table key (default: i:<token>).
    """
    corpus = [list(seq) for seq in corpus]
    if not corpus or all(len(s) == 0 for s in corpus):
        raise ValueError("corpus must be nonempty")
    node_key = node_key or item_node
    vocab = sorted({tok for seq in corpus for tok in seq})
    index = {tok: k for k, tok in enumerate(vocab)}
    counts = np.zeros(len(vocab))
    for seq in corpus:
        for tok in seq:
            counts[index[tok]] += 1.0
    noise = counts ** 0.75
    noise /= noise.sum()
    noise_cdf = np.cumsum(noise)

    rng = np.random.default_rng(stage_seed(params.seed, "sgns"))
    w_in = rng.uniform(-0.5 / params.dim, 0.5 / params.dim,
                       size=(len(vocab), params.dim))
    w_out = np.zeros((len(vocab), params.dim))

    chunk = 1024
    epoch_loss: list[float] = []
    for _epoch in range(params.epochs):
        total, n_pairs = 0.0, 0
        for seq in corpus:
            toks = [index[t] for t in seq]
            centers, contexts = _pairs_for_sequence(toks, params.window)
            if len(centers) == 0:
                continue
            for s in range(0, len(centers), chunk):
                c = centers[s:s + chunk]
                o = contexts[s:s + chunk]
                draws = rng.random((len(c), params.negatives))
                negs = np.searchsorted(noise_cdf, draws, side="right")
                total += _sgns_chunk(w_in, w_out, c, o, negs,
                                     params.learning_rate)
                n_pairs += len(c)
        epoch_loss.append(total / max(n_pairs, 1))

    vectors = {node_key(tok): w_in[index[tok]].copy() for tok in vocab}
    return EmbeddingTable(params.dim, vectors,
                          meta={"epoch_loss": epoch_loss, "vocab": len(vocab)})


def _sgns_chunk(w_in, w_out, centers, contexts, negs, lr) -> float:
    """One accumulated-gradient update over a chunk of pairs; returns the
    summed pair loss at the pre-update parameters."""
    v = w_in[centers]                                  # (B, d)
    u_o = w_out[contexts]
    u_n = w_out[negs]                                  # (B, K, d)
    pos = np.einsum("bd,bd->b", v, u_o)
    neg = np.einsum("bkd,bd->bk", u_n, v)
    loss = float(np.sum(-_log_sigmoid(pos)) + np.sum(-_log_sigmoid(-neg)))
    g_pos = _sigmoid(pos) - 1.0                        # (B,)
    g_neg = _sigmoid(neg)                              # (B, K)
    d_v = g_pos[:, None] * u_o + np.einsum("bk,bkd->bd", g_neg, u_n)
    np.add.at(w_in, centers, -lr * d_v)
    np.add.at(w_out, contexts, -lr * g_pos[:, None] * v)
    np.add.at(w_out, negs.ravel(),
              -lr * (g_neg[:, :, None] * v[:, None, :]).reshape(-1, v.shape[1]))
    return loss


def derive_user_vectors(m: SparseInteractionMatrix,
                        table: EmbeddingTable) -> EmbeddingTable:
    """Add u:<id> vectors as the mean of each user's covered history items."""
    vectors = dict(table.vectors)
    for u in range(m.n_users):
        items, _ = m.row(u)
        held = [table.vectors[item_node(int(i))] for i in items
                if item_node(int(i)) in table.vectors]
        if held:
            vectors[user_node(u)] = np.mean(held, axis=0)
    return EmbeddingTable(table.dim, vectors, meta=table.meta)


# --- LightGCN ----------------------------------------------------------------

def _propagate_mean(user_vecs: np.ndarray, item_vecs: np.ndarray,
                    user_ptr, user_items, item_ptr, item_users,
                    user_deg: np.ndarray, item_deg: np.ndarray,
                    layers: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean over layers 0..layers of symmetric-normalized propagation."""
    inv_u = np.where(user_deg > 0, 1.0 / np.sqrt(np.maximum(user_deg, 1)), 0.0)
    inv_i = np.where(item_deg > 0, 1.0 / np.sqrt(np.maximum(item_deg, 1)), 0.0)
    acc_u, acc_i = user_vecs.copy(), item_vecs.copy()
    cur_u, cur_i = user_vecs, item_vecs
    for _ in range(layers):
        nxt_u = _segment_sum(cur_i * inv_i[:, None], user_items, user_ptr)
        nxt_u *= inv_u[:, None]
        nxt_i = _segment_sum(cur_u * inv_u[:, None], item_users, item_ptr)
        nxt_i *= inv_i[:, None]
        acc_u += nxt_u
        acc_i += nxt_i
        cur_u, cur_i = nxt_u, nxt_i
    scale = 1.0 / (layers + 1)
    return acc_u * scale, acc_i * scale


def _segment_sum(source: np.ndarray, gather_idx, ptr) -> np.ndarray:
    """Sum source[gather_idx] rows over contiguous ptr segments."""
    gathered = source[gather_idx]
    cs = np.vstack([np.zeros((1, source.shape[1])), np.cumsum(gathered, axis=0)])
    return cs[ptr[1:]] - cs[ptr[:-1]]


def lightgcn_propagate(m: SparseInteractionMatrix, table: EmbeddingTable,
                       layers: int) -> EmbeddingTable:
    """Average of embedding layers 0..layers under e_u^(k+1) =
    Σ_{i∈N(u)} e_i^(k)/√(|N_u||N_i|) (and symmetrically for items)."""
    user_vecs = np.stack([table.vectors[user_node(u)] for u in range(m.n_users)])
    item_vecs = np.stack([table.vectors[item_node(i)] for i in range(m.n_items)])
    out_u, out_i = _propagate_mean(
        user_vecs, item_vecs, m.user_ptr, m.user_items, m.item_ptr,
        m.item_users, m.user_degrees().astype(float),
        m.item_degrees().astype(float), layers)
    vectors = {user_node(u): out_u[u] for u in range(m.n_users)}
    vectors.update({item_node(i): out_i[i] for i in range(m.n_items)})
    return EmbeddingTable(table.dim, vectors)


def _dropout_graph(m: SparseInteractionMatrix, drop: np.ndarray):
    """Subgraph arrays after removing all edges incident to dropped nodes
    (users first, items offset by n_users), with re-computed degrees."""
    keep_user = ~drop[:m.n_users]
    keep_item = ~drop[m.n_users:]
    edge_users = np.repeat(np.arange(m.n_users), np.diff(m.user_ptr))
    edge_items = m.user_items
    kept = keep_user[edge_users] & keep_item[edge_items]
    eu, ei = edge_users[kept], edge_items[kept]
    user_deg = np.bincount(eu, minlength=m.n_users).astype(float)
    item_deg = np.bincount(ei, minlength=m.n_items).astype(float)
    order_u = np.lexsort((ei, eu))
    user_ptr = np.zeros(m.n_users + 1, dtype=np.int64)
    np.cumsum(np.bincount(eu, minlength=m.n_users), out=user_ptr[1:])
    order_i = np.lexsort((eu, ei))
    item_ptr = np.zeros(m.n_items + 1, dtype=np.int64)
    np.cumsum(np.bincount(ei, minlength=m.n_items), out=item_ptr[1:])
    return (user_ptr, ei[order_u], item_ptr, eu[order_i], user_deg, item_deg)


def bpr_loss_and_grad(user_vecs, item_vecs, graph, layers, l2_reg,
                      users, pos_items, neg_items):
    """Mean BPR loss over the batch triples and the gradient with respect
    to the layer-0 embeddings, propagated through the mean-of-layers graph
    convolution (the adjacency is symmetric, so backprop reuses it)."""
    user_ptr, user_items, item_ptr, item_users, user_deg, item_deg = graph
    f_u, f_i = _propagate_mean(user_vecs, item_vecs, user_ptr, user_items,
                               item_ptr, item_users, user_deg, item_deg, layers)
    fu, fp, fn = f_u[users], f_i[pos_items], f_i[neg_items]
    margin = np.einsum("bd,bd->b", fu, fp - fn)
    b = len(users)
    loss = float(np.mean(-_log_sigmoid(margin)))
    coef = -_sigmoid(-margin) / b                       # d loss / d margin
    d_fu = np.zeros_like(f_u)
    d_fi = np.zeros_like(f_i)
    np.add.at(d_fu, users, coef[:, None] * (fp - fn))
    np.add.at(d_fi, pos_items, coef[:, None] * fu)
    np.add.at(d_fi, neg_items, -coef[:, None] * fu)
    g_u, g_i = _propagate_mean(d_fu, d_fi, user_ptr, user_items, item_ptr,
                               item_users, user_deg, item_deg, layers)
    reg = 0.0
    for vecs, grad, idx in ((user_vecs, g_u, users),
                            (item_vecs, g_i, pos_items),
                            (item_vecs, g_i, neg_items)):
        rows = vecs[idx]
        reg += float(np.sum(rows * rows))
        np.add.at(grad, idx, (2.0 * l2_reg / b) * rows)
    return loss + l2_reg * reg / b, g_u, g_i


def train_lightgcn(m: SparseInteractionMatrix,
                   params: LightGcnParams) -> EmbeddingTable:
    """BPR-trained LightGCN embeddings (Adam), returned already propagated
    so scores are plain dot products."""
    rng = np.random.default_rng(stage_seed(params.seed, "lightgcn"))
    user_vecs = rng.normal(0.0, 0.1, size=(m.n_users, params.dim))
    item_vecs = rng.normal(0.0, 0.1, size=(m.n_items, params.dim))
    full_graph = (m.user_ptr, m.user_items, m.item_ptr, m.item_users,
                  m.user_degrees().astype(float), m.item_degrees().astype(float))
    edge_users = np.repeat(np.arange(m.n_users), np.diff(m.user_ptr))
    edge_items = m.user_items
    n_nodes = m.n_users + m.n_items

    adam_m = [np.zeros_like(user_vecs), np.zeros_like(item_vecs)]
    adam_v = [np.zeros_like(user_vecs), np.zeros_like(item_vecs)]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    epoch_loss: list[float] = []
    for _epoch in range(params.epochs):
        order = rng.permutation(len(edge_users))
        losses = []
        for s in range(0, len(order), params.batch_size):
            batch = order[s:s + params.batch_size]
            users = edge_users[batch]
            pos = edge_items[batch]
            neg = _sample_negatives(m, users, rng)
            ok = neg >= 0
            if not ok.all():
                users, pos, neg = users[ok], pos[ok], neg[ok]
                if len(users) == 0:
                    continue
            if params.node_dropout > 0:
                drop = rng.random(n_nodes) < params.node_dropout
                graph = _dropout_graph(m, drop)
            else:
                graph = full_graph
            loss, g_u, g_i = bpr_loss_and_grad(
                user_vecs, item_vecs, graph, params.layers, params.l2_reg,
                users, pos, neg)
            losses.append(loss)
            step += 1
            for k, (vecs, grad) in enumerate(((user_vecs, g_u),
                                              (item_vecs, g_i))):
                adam_m[k] = beta1 * adam_m[k] + (1 - beta1) * grad
                adam_v[k] = beta2 * adam_v[k] + (1 - beta2) * grad * grad
                m_hat = adam_m[k] / (1 - beta1 ** step)
                v_hat = adam_v[k] / (1 - beta2 ** step)
                vecs -= params.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        epoch_loss.append(float(np.mean(losses)) if losses else math.nan)

    out_u, out_i = _propagate_mean(
        user_vecs, item_vecs, *full_graph, params.layers)
    vectors = {user_node(u): out_u[u] for u in range(m.n_users)}
    vectors.update({item_node(i): out_i[i] for i in range(m.n_items)})
    return EmbeddingTable(params.dim, vectors, meta={"epoch_loss": epoch_loss})


def _sample_negatives(m: SparseInteractionMatrix, users: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    """Uniform non-interacted item per user; -1 after 100 failed retries."""
    neg = np.empty(len(users), dtype=np.int64)
    for row, u in enumerate(users):
        items, _ = m.row(int(u))
        found = -1
        for _ in range(100):
            cand = int(rng.integers(m.n_items))
            pos = np.searchsorted(items, cand)
            if pos >= len(items) or items[pos] != cand:
                found = cand
                break
        if found < 0:
            log.warning("negative sampling failed for user %d; triple skipped", u)
        neg[row] = found
    return neg


def embedding_score(table: EmbeddingTable, user, candidates: Sequence,
                    metric: str = "dot") -> tuple[np.ndarray, np.ndarray]:
    """Dot or cosine scores between the user vector and each candidate
    vector. Returns (scores, missing): absent nodes score 0 and are
    flagged; a zero vector under cosine also scores 0."""
    if metric not in ("dot", "cosine"):
        raise ValueError(f"unknown metric {metric!r}")
    scores = np.zeros(len(candidates))
    missing = np.ones(len(candidates), dtype=bool)
    u_vec = table.vectors.get(user_node(user))
    if u_vec is None:
        return scores, missing
    u_norm = float(np.linalg.norm(u_vec))
    for pos, cand in enumerate(candidates):
        c_vec = table.vectors.get(item_node(cand))
        if c_vec is None:
            continue
        missing[pos] = False
        if metric == "dot":
            scores[pos] = float(u_vec @ c_vec)
        else:
            c_norm = float(np.linalg.norm(c_vec))
            if u_norm > 0 and c_norm > 0:
                scores[pos] = float(u_vec @ c_vec) / (u_norm * c_norm)
    return scores, missing
