"""Cross-domain retrieval: precision@k, scenario enumeration, metrics tables."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DOMAIN_LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


@dataclass(frozen=True)
class RetrievalScenario:
    query_domain: int
    gallery_domain: int

    def __post_init__(self):
        if self.query_domain == self.gallery_domain:
            raise ValueError("query and gallery domains must differ")

    def name(self, domain_names: Sequence[str] | None = None) -> str:
        names = domain_names or DOMAIN_LETTERS
        return f"{names[self.query_domain]}->{names[self.gallery_domain]}"


def enumerate_scenarios(num_domains: int) -> list[RetrievalScenario]:
    return [RetrievalScenario(q, g) for q, g in itertools.permutations(range(num_domains), 2)]


def rank_gallery(query_embs: np.ndarray, gallery_embs: np.ndarray) -> np.ndarray:
    """Gallery indices per query by descending dot product, ties to the lower index."""
    scores = np.asarray(query_embs, dtype=np.float64) @ np.asarray(gallery_embs, dtype=np.float64).T
    return np.argsort(-scores, axis=1, kind="stable")


def precision_at_k(query_embs: np.ndarray, query_labels: np.ndarray, gallery_embs: np.ndarray,
                   gallery_labels: np.ndarray, k: int) -> float:
    """Fraction of the top-k gallery items sharing the query label, averaged over queries."""
    nq, ng = len(query_embs), len(gallery_embs)
    if nq == 0:
        raise ValueError("empty query set")
    if not 1 <= k <= ng:
        raise ValueError(f"k={k} must lie in [1, {ng}] (gallery size)")
    top = rank_gallery(query_embs, gallery_embs)[:, :k]
    hits = int((np.asarray(gallery_labels)[top] == np.asarray(query_labels)[:, None]).sum())
    return hits / (k * nq)


@dataclass
class MetricsTable:
    rows: list[tuple[str, int, float]] = field(default_factory=list)

    @property
    def ks(self) -> list[int]:
        return sorted({k for _, k, _ in self.rows})

    @property
    def scenarios(self) -> list[str]:
        return list(dict.fromkeys(s for s, _, _ in self.rows))

    def averages(self) -> dict[int, float]:
        return {k: float(np.mean([p for _, kk, p in self.rows if kk == k])) for k in self.ks}

    def get(self, scenario: str, k: int) -> float:
        for s, kk, p in self.rows:
            if s == scenario and kk == k:
                return p
        raise KeyError((scenario, k))

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "k", "precision"])
        for s, k, p in self.rows:
            w.writerow([s, k, repr(p)])
        for k, p in self.averages().items():
            w.writerow(["average", k, repr(p)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "MetricsTable":
        reader = csv.DictReader(io.StringIO(text))
        return cls([(r["scenario"], int(r["k"]), float(r["precision"]))
                    for r in reader if r["scenario"] != "average"])

    def render(self) -> str:
        ks = self.ks
        head = ["scenario"] + [f"P@{k}" for k in ks]
        lines = [[s] + [f"{100 * self.get(s, k):.2f}" for k in ks] for s in self.scenarios]
        avg = self.averages()
        lines.append(["average"] + [f"{100 * avg[k]:.2f}" for k in ks])
        widths = [max(len(r[i]) for r in [head] + lines) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(r))
        return "\n".join([fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in lines])


def evaluate_embeddings(embeddings: Sequence[np.ndarray], labels: Sequence[np.ndarray], ks: Sequence[int],
                        domain_names: Sequence[str] | None = None) -> MetricsTable:
    """Every ordered domain pair at every k."""
    table = MetricsTable()
    for sc in enumerate_scenarios(len(embeddings)):
        q, g = sc.query_domain, sc.gallery_domain
        for k in ks:
            p = precision_at_k(embeddings[q], labels[q], embeddings[g], labels[g], k)
            table.rows.append((sc.name(domain_names), int(k), p))
    return table


def evaluate_scenarios(datasets, pipeline, ks: Sequence[int]) -> MetricsTable:
    """Embed every dataset with ``pipeline.embed`` and score all ordered domain pairs.

    ``pipeline`` is a :class:`tpsnet.checkpoint.Checkpoint` (rebuilt into a
    pipeline here) or anything exposing ``embed(dataset) -> N x d``.
    """
    from .checkpoint import Checkpoint, Pipeline

    if isinstance(pipeline, Checkpoint):
        pipeline = Pipeline.from_checkpoint(pipeline)
    for ds in datasets:
        if not ds.has_labels():
            raise ValueError(f"domain {ds.domain_id} lacks ground-truth labels; cannot evaluate")
    embs = [pipeline.embed(ds) for ds in datasets]
    dims = {e.shape[1] for e in embs}
    if len(dims) != 1:
        raise ValueError(f"embedding dimensions disagree across domains: {sorted(dims)}")
    return evaluate_embeddings(embs, [ds.labels() for ds in datasets], ks)
