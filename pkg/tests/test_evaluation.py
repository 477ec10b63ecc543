import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frwreid.data import generate_synthetic
from frwreid.errors import ContractError, DimensionError, ProtocolError
from frwreid.evaluation import (
    PROTOCOLS,
    CMCurve,
    DistanceMatrix,
    Protocol,
    cmc_single_shot,
    evaluate_embeddings,
    make_split,
    normalize_embeddings,
    pairwise_distances,
)


def enumeration_cmc(values, probe_ids, gallery_ids):
    """Rank of the true match counted pair by pair: every gallery entry that
    is strictly closer, or equally close with a lower index, precedes it."""
    P, G = values.shape
    rates = np.zeros(G)
    for i in range(P):
        j = int(np.flatnonzero(gallery_ids == probe_ids[i])[0])
        ahead = sum(1 for k in range(G) if values[i, k] < values[i, j] or (values[i, k] == values[i, j] and k < j))
        rates[ahead:] += 1
    return rates / P


class TestNormalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(normalize_embeddings(np.array([[3.0, 4.0]])), [[0.6, 0.8]])

    def test_unit_norm_and_idempotent(self, rng):
        x = normalize_embeddings(rng.normal(size=(20, 7)))
        np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1, atol=1e-6)
        np.testing.assert_allclose(normalize_embeddings(x), x, atol=1e-7)

    def test_zero_row(self):
        with pytest.raises(ContractError, match="row 1"):
            normalize_embeddings(np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestDistances:
    def test_arithmetic(self):
        assert pairwise_distances(np.zeros((1, 2)), np.array([[3.0, 4.0]])).values[0, 0] == 5.0

    def test_identical_sets_zero_diagonal(self, rng):
        x = rng.normal(size=(6, 4))
        assert np.all(np.diag(pairwise_distances(x, x).values) == 0)

    def test_brute_force(self, rng):
        p, g = rng.normal(size=(10, 5)), rng.normal(size=(10, 5))
        d = pairwise_distances(p, g).values
        for i in range(10):
            for j in range(10):
                assert abs(d[i, j] - np.sqrt(sum((p[i, k] - g[j, k]) ** 2 for k in range(5)))) < 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            pairwise_distances(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_cosine_relation(self, rng):
        p, g = normalize_embeddings(rng.normal(size=(8, 6))), normalize_embeddings(rng.normal(size=(9, 6)))
        d = pairwise_distances(p, g).values
        np.testing.assert_allclose(d ** 2, 2 - 2 * p @ g.T, atol=1e-6)

    def test_matrix_invariants(self):
        with pytest.raises(ContractError):
            DistanceMatrix(np.array([[-1.0]]), [0], [0])
        with pytest.raises(DimensionError):
            DistanceMatrix(np.zeros((2, 2)), [0], [0, 1])


class TestCMC:
    def test_hand_example(self):
        d = DistanceMatrix(np.array([[0.1, 0.2, 0.3], [0.3, 0.4, 0.6], [0.9, 0.8, 0.7]]), [0, 1, 2], [0, 1, 2])
        curve = cmc_single_shot(d, 3)
        assert curve.rank(1) == pytest.approx(2 / 3)
        assert curve.rank(2) == 1.0 and curve.rank(3) == 1.0

    def test_perfect_embedding(self, rng):
        values = rng.uniform(1, 2, size=(5, 5))
        np.fill_diagonal(values, 0.5)
        assert np.all(cmc_single_shot(DistanceMatrix(values, range(5), range(5))).rates == 1)

    def test_ties_go_to_lower_index(self):
        d = DistanceMatrix(np.ones((2, 2)), [0, 1], [0, 1])
        np.testing.assert_array_equal(cmc_single_shot(d).rates, [0.5, 1.0])

    def test_missing_identity(self):
        with pytest.raises(ProtocolError):
            cmc_single_shot(DistanceMatrix(np.ones((1, 2)), [5], [0, 1]))

    def test_duplicate_gallery_identity(self):
        with pytest.raises(ProtocolError):
            cmc_single_shot(DistanceMatrix(np.ones((1, 2)), [0], [0, 0]))

    def test_enumeration_oracle(self, rng):
        for _ in range(1000):
            G = int(rng.integers(1, 9))
            P = int(rng.integers(1, G + 1))
            gallery_ids = rng.permutation(G) + 10
            probe_ids = rng.choice(gallery_ids, P, replace=False)
            # coarse values make ties common
            values = rng.integers(0, 4, size=(P, G)).astype(float) if rng.random() < 0.5 else rng.random((P, G))
            got = cmc_single_shot(DistanceMatrix(values, probe_ids, gallery_ids)).rates
            np.testing.assert_array_equal(got, enumeration_cmc(values, probe_ids, gallery_ids))

    def test_exhaustive_small_galleries(self):
        # every distance pattern over {0, 1, 2} for one probe and galleries up to size 4
        for G in range(1, 5):
            for row in itertools.product(range(3), repeat=G):
                values = np.array([row], dtype=float)
                for j in range(G):
                    got = cmc_single_shot(DistanceMatrix(values, [j], np.arange(G))).rates
                    np.testing.assert_array_equal(got, enumeration_cmc(values, np.array([j]), np.arange(G)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10 ** 6))
    def test_monotone_and_complete(self, G, seed):
        r = np.random.default_rng(seed)
        rates = cmc_single_shot(DistanceMatrix(r.random((G, G)), np.arange(G), np.arange(G))).rates
        assert np.all(np.diff(rates) >= 0) and rates[-1] == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10 ** 6))
    def test_monotone_transform_invariance(self, G, seed):
        r = np.random.default_rng(seed)
        values = r.random((G, G))
        ids = np.arange(G)
        base = cmc_single_shot(DistanceMatrix(values, ids, ids)).rates
        for f in (np.sqrt, lambda v: 3 * v + 1, np.exp):
            np.testing.assert_array_equal(cmc_single_shot(DistanceMatrix(f(values), ids, ids)).rates, base)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10 ** 6))
    def test_gallery_permutation_invariance(self, G, seed):
        r = np.random.default_rng(seed)
        values = r.random((G, G))
        ids = np.arange(G)
        perm = r.permutation(G)
        a = cmc_single_shot(DistanceMatrix(values, ids, ids)).rates
        b = cmc_single_shot(DistanceMatrix(values[:, perm], ids, ids[perm])).rates
        np.testing.assert_array_equal(a, b)

    def test_csv(self):
        curve = CMCurve(np.array([0.5, 1.0]), 2, np.array([0.1, 0.0]))
        lines = curve.to_csv().splitlines()
        assert lines[0] == "rank,mean_rate,stddev"
        assert [line.split(",")[0] for line in lines[1:]] == ["1", "2"]


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(12, 2, 2, size=(16, 8), seed=1)


class TestSplits:
    def test_deterministic(self, data):
        p = Protocol(num_splits=3, train_frac=0.5, seed=4)
        a, b = make_split(data, p, 1), make_split(data, p, 1)
        np.testing.assert_array_equal(a.test_ids, b.test_ids)
        np.testing.assert_array_equal(a.probe_index, b.probe_index)
        assert len(a.test_ids) == 6
        assert np.all(data.cams[a.probe_index] == 0) and np.all(data.cams[a.gallery_index] == 1)

    def test_swap_views(self, data):
        sp = make_split(data, Protocol(swap_views=True), 0)
        assert np.all(data.cams[sp.probe_index] == 1)

    def test_single_split_reduces_to_cmc(self, data, rng):
        emb = rng.normal(size=(len(data), 5))
        p = Protocol(num_splits=1, seed=2, max_rank=12)
        curve = evaluate_embeddings(emb, data, p)
        sp = make_split(data, p, 0)
        unit = normalize_embeddings(emb)
        direct = cmc_single_shot(pairwise_distances(unit[sp.probe_index], unit[sp.gallery_index],
                                                    data.ids[sp.probe_index], data.ids[sp.gallery_index]), 12)
        np.testing.assert_array_equal(curve.rates, direct.rates)
        assert np.all(curve.stddev == 0)

    def test_stats_over_splits(self, data, rng):
        curve = evaluate_embeddings(rng.normal(size=(len(data), 5)), data, Protocol(num_splits=4, train_frac=0.5))
        assert curve.per_split.shape == (4, 6)
        np.testing.assert_allclose(curve.rates, curve.per_split.mean(axis=0))

    def test_too_few_identities(self, data, rng):
        with pytest.raises(ContractError):
            evaluate_embeddings(rng.normal(size=(len(data), 5)), data, Protocol(num_test_ids=20))

    def test_named_protocols(self):
        cuhk03 = PROTOCOLS["cuhk03"]
        assert cuhk03.num_splits == 20 and cuhk03.num_test_ids == 100
        assert round(cuhk03.train_frac * 1360) == 1160
        assert PROTOCOLS["viper"].num_splits == 10 and PROTOCOLS["cuhk01"].num_splits == 10
