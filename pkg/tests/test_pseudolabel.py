import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import adjusted_rand_index, brute_force_best_partition
from tpsnet.pseudolabel import (PrototypeBank, PseudoLabelAssignment, align_to_prompts, inertia, init_prototypes,
                                kmeans_cluster, momentum_mix, momentum_update, reassign_by_prototype)


def blobs(seed, classes=5, per=100, dim=16, sep=10.0, sigma=1.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, dim))
    centers *= sep * sigma / np.min([np.linalg.norm(a - b) for i, a in enumerate(centers) for b in centers[i + 1:]])
    y = np.repeat(np.arange(classes), per)
    return centers[y] + rng.normal(scale=sigma, size=(len(y), dim)), y


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestKMeans:
    def test_k_equals_n(self, rng):
        x = rng.normal(size=(7, 3))
        a, _ = kmeans_cluster(x, 7, seed=0)
        assert sorted(a.labels) == list(range(7))

    def test_two_separated_groups(self, rng):
        x = np.concatenate([rng.normal(0, 0.1, (10, 2)), rng.normal(0, 0.1, (10, 2)) + [1.0, 0.0]])
        a, _ = kmeans_cluster(x, 2, seed=3)
        assert len(set(a.labels[:10])) == 1 and len(set(a.labels[10:])) == 1
        assert a.labels[0] != a.labels[10]

    @pytest.mark.parametrize("seed", range(3))
    def test_global_optimum_on_tiny_instance(self, seed):
        x = np.random.default_rng(seed).normal(size=(8, 2))
        a, _ = kmeans_cluster(x, 2, seed=seed)
        assert inertia(x, a.labels) == pytest.approx(brute_force_best_partition(x, 2), rel=1e-9)

    def test_deterministic(self, rng):
        x = rng.normal(size=(60, 4))
        a, ca = kmeans_cluster(x, 4, seed=11)
        b, cb = kmeans_cluster(x, 4, seed=11)
        assert np.array_equal(a.labels, b.labels) and np.array_equal(ca, cb)

    @pytest.mark.parametrize("seed", range(3))
    def test_blob_recovery(self, seed):
        x, y = blobs(seed)
        a, _ = kmeans_cluster(x, 5, seed=seed)
        assert adjusted_rand_index(a.labels, y) >= 0.99

    def test_duplicate_points_fill_all_clusters(self):
        x = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]] * 5 + [[4.0, 0.0]])
        a, _ = kmeans_cluster(x, 3, seed=0, n_init=1)
        assert set(a.labels) == {0, 1, 2}
        assert len(set(a.labels[:5])) == len(set(a.labels[5:10])) == 1

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            kmeans_cluster(rng.normal(size=(3, 2)), 4, seed=0)
        with pytest.raises(ValueError):
            kmeans_cluster(rng.normal(size=(3, 2)), 0, seed=0)


class TestPrototypes:
    def test_single_member(self, rng):
        f = unit_rows(rng, 3, 4)
        bank = init_prototypes(f, PseudoLabelAssignment([0, 1, 2]), 3)
        assert np.allclose(bank.prototypes, f, atol=1e-15)

    def test_identical_members(self, rng):
        f = unit_rows(rng, 1, 4)
        bank = init_prototypes(np.repeat(f, 2, 0), PseudoLabelAssignment([0, 0]), 1)
        assert np.allclose(bank.prototypes[0], f[0], atol=1e-15)

    def test_group_mean_oracle(self, rng):
        f = unit_rows(rng, 20, 5)
        y = np.arange(20) % 4
        bank = init_prototypes(f, PseudoLabelAssignment(y), 4)
        for c in range(4):
            acc = np.zeros(5)
            for i in range(20):
                if y[i] == c:
                    acc += f[i]
            assert np.allclose(bank.prototypes[c], acc / np.linalg.norm(acc), atol=1e-12)

    def test_empty_class_raises(self, rng):
        with pytest.raises(ValueError, match="no members"):
            init_prototypes(unit_rows(rng, 2, 3), PseudoLabelAssignment([0, 0]), 2)


class TestMomentum:
    def test_m_one_is_fixed_point(self, rng):
        p, f = unit_rows(rng, 1, 6)[0], unit_rows(rng, 1, 6)[0]
        assert np.array_equal(momentum_mix(p, f, 1.0), p)
        bank = PrototypeBank(p[None].copy())
        bank.update(0, f, 1.0)
        assert np.max(np.abs(bank.prototypes[0] - p)) <= 1e-12

    def test_m_zero_replaces(self, rng):
        p, f = unit_rows(rng, 1, 6)[0], unit_rows(rng, 1, 6)[0]
        assert np.array_equal(momentum_mix(p, f, 0.0), f)
        assert np.max(np.abs(momentum_update(PrototypeBank(p[None]), 0, f, 0.0).prototypes[0] - f)) <= 1e-12

    def test_half_mix(self):
        assert np.array_equal(momentum_mix([1.0, 0.0], [0.0, 1.0], 0.5), [0.5, 0.5])
        bank = momentum_update(PrototypeBank(np.array([[1.0, 0.0]])), 0, np.array([0.0, 1.0]), 0.5)
        assert np.allclose(bank.prototypes[0], [0.70710678, 0.70710678], atol=1e-8)

    def test_functional_update_leaves_input(self, rng):
        bank = PrototypeBank(unit_rows(rng, 3, 4))
        before = bank.prototypes.copy()
        momentum_update(bank, 1, unit_rows(rng, 1, 4)[0], 0.9)
        assert np.array_equal(bank.prototypes, before)

    def test_zero_norm_update_keeps_previous(self):
        bank = PrototypeBank(np.array([[1.0, 0.0]]))
        with pytest.warns(UserWarning, match="zero-norm"):
            bank.update(0, np.array([-1.0, 0.0]), 0.5)
        assert np.array_equal(bank.prototypes[0], [1.0, 0.0])

    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.999), st.integers(0, 3))
    def test_rows_stay_unit_norm(self, seed, m, c):
        r = np.random.default_rng(seed)
        bank = PrototypeBank(unit_rows(r, 4, 5))
        bank.update(c, unit_rows(r, 1, 5)[0], m)
        assert np.allclose(np.linalg.norm(bank.prototypes, axis=1), 1.0, atol=1e-6)

    def test_invalid_momentum(self):
        with pytest.raises(ValueError):
            momentum_mix([1.0], [1.0], 1.5)


class TestReassign:
    def test_exact_match(self):
        bank = PrototypeBank(np.eye(4))
        assert reassign_by_prototype(np.eye(4)[[2]], bank).labels[0] == 2

    def test_tie_goes_to_lowest(self):
        bank = PrototypeBank(np.eye(3))
        f = np.array([[1.0, 1.0, 0.0]]) / np.sqrt(2)
        assert reassign_by_prototype(f, bank).labels[0] == 0

    @given(arrays(np.float64, (10, 4), elements=st.floats(-1, 1)), arrays(np.float64, (3, 4), elements=st.floats(-1, 1)))
    def test_nearest_oracle(self, f, p):
        labels = reassign_by_prototype(f, PrototypeBank(p)).labels
        for i in range(10):
            best = 0
            for c in range(1, 3):
                if f[i] @ p[c] > f[i] @ p[best]:
                    best = c
            assert labels[i] == best


class TestAlignment:
    def test_relabel_only(self, rng):
        clusters = rng.integers(0, 4, 50)
        prompts = (clusters + 1) % 4
        aligned = align_to_prompts(clusters, prompts, 4)
        assert np.array_equal(aligned, prompts)

    @given(st.integers(0, 2**32 - 1))
    def test_partition_preserved(self, seed):
        r = np.random.default_rng(seed)
        clusters, prompts = r.integers(0, 5, 40), r.integers(0, 5, 40)
        aligned = align_to_prompts(clusters, prompts, 5)
        assert adjusted_rand_index(aligned, clusters) == pytest.approx(1.0)
