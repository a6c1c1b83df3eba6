"""Dense brute-force oracles for the five pre-rank scorers.

Every oracle is written from the definition, independent of the library's
sparse kernels, and deliberately slow (python loops over dense arrays).
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmrec import memory_cf as mcf
from cmrec.data import SparseInteractionMatrix


def matrix_from_dense(dense):
    dense = np.asarray(dense, dtype=np.float64)
    u, i = np.nonzero(dense)
    return SparseInteractionMatrix.from_pairs(u, i, dense[u, i], *dense.shape)


def random_dense(rng, n_users, n_items, density=0.3):
    mask = rng.random((n_users, n_items)) < density
    vals = rng.integers(1, 6, (n_users, n_items)).astype(float)
    return np.where(mask, vals, 0.0)


def cosine_oracle(columns):
    """Pairwise cosine between the columns of a dense matrix, zero diagonal."""
    norms = np.linalg.norm(columns, axis=0)
    out = columns.T @ columns
    nz = norms > 0
    out[~nz, :] = 0.0
    out[:, ~nz] = 0.0
    denom = np.outer(np.where(nz, norms, 1.0), np.where(nz, norms, 1.0))
    out = out / denom
    np.fill_diagonal(out, 0.0)
    return out


def swing_oracle(dense, alpha, cap):
    inc = dense > 0
    n_users, n_items = inc.shape
    items_of = [set(np.flatnonzero(inc[u])) for u in range(n_users)]
    sim = np.zeros((n_items, n_items))
    for i in range(n_items):
        users_i = np.flatnonzero(inc[:, i])[:cap]
        for j in range(n_items):
            if j == i:
                continue
            total = 0.0
            for a in range(len(users_i)):
                for b in range(a + 1, len(users_i)):
                    u, v = users_i[a], users_i[b]
                    if inc[u, j] and inc[v, j]:
                        total += 1.0 / (alpha + len(items_of[u] & items_of[v]))
            sim[i, j] = total
    return sim


def llr_oracle(k11, k12, k21, k22):
    def entropy_part(*xs):
        total = sum(xs)
        return sum(x * math.log(x / total) for x in xs if x > 0)

    stat = 2.0 * (entropy_part(k11, k12, k21, k22)
                  - entropy_part(k11 + k12, k21 + k22)
                  - entropy_part(k11 + k21, k12 + k22))
    return max(stat, 0.0)


def llr_table_oracle(dense):
    inc = (dense > 0).astype(float)
    n_users, n_items = inc.shape
    co = inc.T @ inc
    deg = inc.sum(axis=0)
    sim = np.zeros((n_items, n_items))
    for i in range(n_items):
        for j in range(n_items):
            if i == j or co[i, j] == 0:
                continue
            k11 = co[i, j]
            k12 = deg[i] - k11
            k21 = deg[j] - k11
            k22 = n_users - deg[i] - deg[j] + k11
            sim[i, j] = llr_oracle(k11, k12, k21, k22)
    return sim


def bigraph_oracle(dense, user, retain_seed=True):
    inc = dense > 0
    n_users, n_items = inc.shape
    seed = np.flatnonzero(inc[user])
    umass = np.zeros(n_users)
    for i in seed:
        users_i = np.flatnonzero(inc[:, i])
        umass[users_i] += 1.0 / len(users_i)
    out = np.zeros(n_items)
    for v in np.flatnonzero(umass):
        items_v = np.flatnonzero(inc[v])
        out[items_v] += umass[v] / len(items_v)
    if not retain_seed:
        out[seed] = 0.0
    return out


class TestCosineOracles:
    @pytest.mark.parametrize("seed", range(5))
    def test_item_cosine_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        dense = random_dense(rng, 24, 18)
        table = mcf.item_cosine_similarity(matrix_from_dense(dense), k=18)
        assert np.allclose(table.dense(), cosine_oracle(dense), atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_user_cosine_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        dense = random_dense(rng, 20, 25)
        table = mcf.user_cosine_similarity(matrix_from_dense(dense), k=20)
        assert np.allclose(table.dense(), cosine_oracle(dense.T), atol=1e-9)

    def test_hand_case(self):
        # users A,B both rate items 0,1; cos(0,1) = (2*3 + 4*5)/(sqrt(4+16)*sqrt(9+25))
        dense = np.array([[2.0, 3.0], [4.0, 5.0]])
        table = mcf.item_cosine_similarity(matrix_from_dense(dense), k=5)
        want = (2 * 3 + 4 * 5) / (math.sqrt(20) * math.sqrt(34))
        assert table.lookup(0, 1) == pytest.approx(want)

    def test_symmetric_without_truncation(self, rng):
        dense = random_dense(rng, 15, 12)
        table = mcf.item_cosine_similarity(matrix_from_dense(dense), k=12)
        sims = table.dense()
        assert np.allclose(sims, sims.T, atol=1e-12)


class TestSimTableInvariants:
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 8))
    def test_neighbor_lists_sorted_sim_desc_ties_id_asc(self, seed, k):
        rng = np.random.default_rng(seed)
        dense = random_dense(rng, 12, 10, density=0.4)
        table = mcf.item_cosine_similarity(matrix_from_dense(dense), k=k)
        for entity, sims in table.sims.items():
            ids = table.ids[entity]
            assert len(ids) <= k
            for pos in range(len(sims) - 1):
                assert sims[pos] >= sims[pos + 1]
                if sims[pos] == sims[pos + 1]:
                    assert ids[pos] < ids[pos + 1]

    def test_truncation_keeps_top_k(self):
        dense = np.array([
            [1.0, 1.0, 1.0, 0.0],
            [1.0, 1.0, 0.0, 1.0],
            [1.0, 0.0, 1.0, 1.0],
        ])
        full = mcf.item_cosine_similarity(matrix_from_dense(dense), k=4)
        trunc = mcf.item_cosine_similarity(matrix_from_dense(dense), k=1)
        for i in range(4):
            if i in trunc.ids:
                top = trunc.ids[i][0]
                assert full.sims[i][0] == pytest.approx(trunc.sims[i][0])
                assert full.ids[i][0] == top


class TestSwing:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        dense = random_dense(rng, 16, 12, density=0.35)
        m = matrix_from_dense(dense).binarized()
        table = mcf.swing_similarity(m, alpha=1.0, k=12,
                                     max_users_per_item=999)
        want = swing_oracle(dense, 1.0, cap=10 ** 9)
        assert np.allclose(table.dense(), want, atol=1e-9)

    def test_user_cap_ascending_ids(self):
        rng = np.random.default_rng(9)
        dense = random_dense(rng, 14, 8, density=0.5)
        m = matrix_from_dense(dense).binarized()
        table = mcf.swing_similarity(m, alpha=0.7, k=8, max_users_per_item=3)
        want = swing_oracle(dense, 0.7, cap=3)
        assert np.allclose(table.dense(), want, atol=1e-9)

    def test_hand_case_two_users_two_items(self):
        # users 0,1 share items 0,1 -> overlap 2; sim = 1/(alpha+2)
        dense = np.array([[1.0, 1.0], [1.0, 1.0]])
        table = mcf.swing_similarity(matrix_from_dense(dense), alpha=1.0, k=2)
        assert table.lookup(0, 1) == pytest.approx(1.0 / 3.0)

    @given(st.integers(0, 2 ** 31 - 1))
    def test_alpha_monotonicity(self, seed):
        rng = np.random.default_rng(seed)
        dense = random_dense(rng, 10, 8, density=0.45)
        m = matrix_from_dense(dense).binarized()
        lo = mcf.swing_similarity(m, alpha=0.5, k=8).dense()
        hi = mcf.swing_similarity(m, alpha=2.0, k=8).dense()
        assert np.all(hi <= lo + 1e-12)

    def test_alpha_must_be_positive(self):
        m = matrix_from_dense([[1.0]])
        with pytest.raises(ValueError, match="alpha"):
            mcf.swing_similarity(m, alpha=0.0)


class TestLlr:
    def test_perfect_association(self):
        # diagonal table: G^2 = 2*N*ln(2) with N=20
        assert mcf.llr(10, 0, 0, 10) == pytest.approx(40 * math.log(2))

    def test_independence_is_zero(self):
        assert mcf.llr(5, 5, 5, 5) == pytest.approx(0.0, abs=1e-12)

    def test_never_negative_and_matches_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            k = rng.integers(0, 50, 4).astype(float)
            got = mcf.llr(*k)
            assert got >= 0.0
            assert got == pytest.approx(llr_oracle(*k), abs=1e-9)

    def test_negative_count_rejected(self):
        with pytest.raises(ValueError):
            mcf.llr(-1, 2, 3, 4)

    def test_llr_many_vectorized_agrees_with_scalar(self, rng):
        k = rng.integers(0, 30, (50, 4)).astype(float)
        many = mcf.llr_many(k[:, 0], k[:, 1], k[:, 2], k[:, 3])
        for row, got in zip(k, many):
            assert got == pytest.approx(mcf.llr(*row), abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_table_matches_oracle(self, seed):
        rng = np.random.default_rng(200 + seed)
        dense = random_dense(rng, 18, 14, density=0.3)
        m = matrix_from_dense(dense).binarized()
        table = mcf.llr_item_similarity(m, k=14)
        assert np.allclose(table.dense(), llr_table_oracle(dense), atol=1e-9)


class TestBigraph:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(300 + seed)
        dense = random_dense(rng, 15, 12, density=0.35)
        m = matrix_from_dense(dense).binarized()
        for user in range(15):
            ids, masses = mcf.bigraph_scores(m, user)
            got = np.zeros(12)
            got[ids] = masses
            assert np.allclose(got, bigraph_oracle(dense, user), atol=1e-9)

    def test_seed_items_can_be_dropped(self, rng):
        dense = random_dense(rng, 10, 8, density=0.5)
        m = matrix_from_dense(dense).binarized()
        ids, _ = mcf.bigraph_scores(m, 0, retain_seed=False)
        seed_items = np.flatnonzero(dense[0])
        assert not set(ids) & set(seed_items)

    def test_mass_conserved_when_seed_retained(self, rng):
        # every seed item emits unit mass; diffusion only redistributes it
        dense = random_dense(rng, 12, 9, density=0.4)
        m = matrix_from_dense(dense).binarized()
        for user in range(12):
            _, masses = mcf.bigraph_scores(m, user)
            n_seed = int((dense[user] > 0).sum())
            assert masses.sum() == pytest.approx(n_seed, abs=1e-9)

    def test_cold_user_empty(self):
        m = matrix_from_dense(np.zeros((3, 3)))
        ids, masses = mcf.bigraph_scores(m, 1)
        assert len(ids) == 0 and len(masses) == 0
        ids, _ = mcf.bigraph_scores(m, -1)
        assert len(ids) == 0


class TestScoreCandidates:
    def test_item_based_matches_manual_sum(self, rng):
        dense = random_dense(rng, 12, 10, density=0.4)
        m = matrix_from_dense(dense)
        table = mcf.item_cosine_similarity(m, k=10)
        sims = table.dense()
        cands = np.arange(10)
        for user in range(12):
            got, cold = mcf.score_candidates(table, m, user, cands)
            hist = np.flatnonzero(dense[user])
            if len(hist) == 0:
                assert cold and np.all(got == 0)
                continue
            want = sims[:, hist] @ dense[user, hist]
            assert not cold
            assert np.allclose(got, want, atol=1e-9)

    def test_user_based_matches_manual_sum(self, rng):
        dense = random_dense(rng, 10, 12, density=0.4)
        m = matrix_from_dense(dense)
        table = mcf.user_cosine_similarity(m, k=10)
        sims = table.dense()
        cands = np.arange(12)
        for user in range(10):
            got, cold = mcf.score_candidates_user_based(table, m, user, cands)
            if dense[user].sum() == 0:
                assert cold
                continue
            want = sims[user] @ dense
            assert np.allclose(got, want, atol=1e-9)

    def test_unknown_user_is_cold(self, rng):
        dense = random_dense(rng, 5, 5)
        m = matrix_from_dense(dense)
        table = mcf.item_cosine_similarity(m, k=5)
        got, cold = mcf.score_candidates(table, m, -1, np.array([0, 1]))
        assert cold and np.all(got == 0)
        got, cold = mcf.score_candidates(table, m, 99, np.array([0]))
        assert cold


class TestRelabelingInvariance:
    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20)
    def test_item_sims_stable_under_user_permutation(self, seed):
        rng = np.random.default_rng(seed)
        dense = random_dense(rng, 10, 8, density=0.4)
        perm = rng.permutation(10)
        base = mcf.item_cosine_similarity(matrix_from_dense(dense), k=8)
        moved = mcf.item_cosine_similarity(matrix_from_dense(dense[perm]), k=8)
        assert np.allclose(base.dense(), moved.dense(), atol=1e-9)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20)
    def test_swing_stable_under_user_permutation(self, seed):
        rng = np.random.default_rng(seed)
        dense = random_dense(rng, 9, 7, density=0.45)
        perm = rng.permutation(9)
        m1 = matrix_from_dense(dense).binarized()
        m2 = matrix_from_dense(dense[perm]).binarized()
        a = mcf.swing_similarity(m1, alpha=1.0, k=7, max_users_per_item=999)
        b = mcf.swing_similarity(m2, alpha=1.0, k=7, max_users_per_item=999)
        assert np.allclose(a.dense(), b.dense(), atol=1e-12)
