import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import ortho_group

from oracles import precision_oracle
from tpsnet.dataset import DomainDataset, ImageSample
from tpsnet.retrieval import (MetricsTable, RetrievalScenario, enumerate_scenarios, evaluate_embeddings,
                              evaluate_scenarios, precision_at_k, rank_gallery)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestPrecision:
    def test_two_of_three(self):
        q = np.array([[1.0, 0.0]])
        g = np.array([[1.0, 0.0], [0.9, 0.1], [0.8, 0.2], [0.0, 1.0]])
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        assert precision_at_k(q, [0], g, [0, 1, 0, 1], 3) == pytest.approx(2 / 3, abs=1e-12)

    def test_perfect_separation(self):
        g = np.repeat(np.eye(3), 4, axis=0)
        gl = np.repeat(np.arange(3), 4)
        for k in range(1, 5):
            assert precision_at_k(np.eye(3), [0, 1, 2], g, gl, k) == 1.0

    def test_ties_broken_by_index(self):
        g = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert list(rank_gallery(np.array([[1.0, 0.0]]), g)[0]) == [0, 1, 2]
        assert precision_at_k(np.array([[1.0, 0.0]]), [5], g, [5, 6, 6], 1) == 1.0
        assert precision_at_k(np.array([[1.0, 0.0]]), [6], g, [5, 6, 6], 1) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_oracle_six_by_fifteen(self, seed):
        r = np.random.default_rng(seed)
        q, g = unit_rows(r, 6, 4), unit_rows(r, 15, 4)
        ql, gl = r.integers(0, 3, 6), r.integers(0, 3, 15)
        for k in (1, 3, 7, 15):
            assert precision_at_k(q, ql, g, gl, k) == precision_oracle(q, ql, g, gl, k)

    @given(st.integers(0, 2**32 - 1))
    def test_orthogonal_invariance(self, seed):
        r = np.random.default_rng(seed)
        q, g = unit_rows(r, 5, 6), unit_rows(r, 12, 6)
        ql, gl = r.integers(0, 3, 5), r.integers(0, 3, 12)
        rot = ortho_group.rvs(6, random_state=seed % (2**32 - 1))
        for k in (1, 4):
            assert precision_at_k(q, ql, g, gl, k) == pytest.approx(precision_at_k(q @ rot, ql, g @ rot, gl, k))

    def test_errors(self):
        g = np.eye(3)
        with pytest.raises(ValueError, match="gallery"):
            precision_at_k(np.eye(3)[:1], [0], g, [0, 1, 2], 4)
        with pytest.raises(ValueError, match="empty"):
            precision_at_k(np.zeros((0, 3)), [], g, [0, 1, 2], 1)


class TestScenarios:
    def test_counts(self):
        assert [s.name() for s in enumerate_scenarios(2)] == ["A->B", "B->A"]
        assert len(enumerate_scenarios(4)) == 12

    def test_same_domain_rejected(self):
        with pytest.raises(ValueError):
            RetrievalScenario(1, 1)

    def test_table_rows_and_csv(self, rng):
        embs = [unit_rows(rng, 20, 4), unit_rows(rng, 20, 4)]
        labels = [rng.integers(0, 3, 20), rng.integers(0, 3, 20)]
        table = evaluate_embeddings(embs, labels, [1, 5, 15])
        assert len(table.rows) == 2 * 3
        text = table.to_csv()
        assert text.splitlines()[0] == "scenario,k,precision"
        assert sum(1 for line in text.splitlines() if line.startswith("average")) == 3
        back = MetricsTable.from_csv(text)
        assert back.rows == table.rows
        assert "A->B" in table.render()

    def test_deterministic(self, rng):
        embs = [unit_rows(rng, 10, 4), unit_rows(rng, 10, 4)]
        labels = [rng.integers(0, 2, 10), rng.integers(0, 2, 10)]
        assert evaluate_embeddings(embs, labels, [1, 3]).to_csv() == evaluate_embeddings(embs, labels, [1, 3]).to_csv()


class _Identity:
    """Stand-in pipeline: flattens pixels into unit vectors."""

    def embed(self, ds):
        x = ds.pixel_array().reshape(len(ds), -1)
        return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestEvaluateScenarios:
    def _pair(self, labelled=True):
        out = []
        for d in (0, 1):
            samples = [ImageSample(np.full((2, 2, 3), 0.1 + 0.4 * c) + 0.01 * i, d, f"{c}/{i}",
                                   c if labelled else None) for c in range(2) for i in range(3)]
            out.append(DomainDataset(tuple(samples), d, 2))
        return out

    def test_two_domains(self):
        table = evaluate_scenarios(self._pair(), _Identity(), [1])
        assert table.scenarios == ["A->B", "B->A"]

    def test_needs_labels(self):
        with pytest.raises(ValueError, match="labels"):
            evaluate_scenarios(self._pair(labelled=False), _Identity(), [1])
