"""Retrieval and classification metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..encoders import EmbeddingBatch, EncoderParams, encode, pair_dot
from ..numerics import log_softmax_rows

KS = (1, 5, 10)


def true_pair_ranks(S: np.ndarray) -> np.ndarray:
    """0-based rank of the true match ``i`` in row ``i`` of a score matrix.

    Higher score ranks first; equal scores go to the lower gallery index.
    """
    S = np.asarray(S)
    n = S.shape[0]
    pos = S[np.arange(n), np.arange(n)][:, None]
    lower = np.arange(n)[None, :] < np.arange(n)[:, None]
    ahead = (S > pos) | ((S == pos) & lower)
    return ahead.sum(axis=1)


def recall_at_k(emb: EmbeddingBatch, k: int, direction: str = "v2t") -> float:
    """Fraction of queries whose paired item ranks in the top ``k`` by cosine."""
    n = emb.video.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside 1..{n}")
    return float(np.mean(_ranks(emb, direction) < k))


def _ranks(emb: EmbeddingBatch, direction: str) -> np.ndarray:
    if direction == "v2t":
        return true_pair_ranks(pair_dot(emb.video, emb.text))
    if direction == "t2v":
        return true_pair_ranks(pair_dot(emb.text, emb.video))
    raise ValueError(f"unknown direction {direction!r}")


def accuracy(predictions, labels, concepts=None):
    """Exact-match accuracy, plus a per-concept map when ``concepts`` is given."""
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {lab.shape}")
    if pred.size == 0:
        raise ValueError("accuracy of an empty set")
    hit = pred == lab
    overall = float(hit.mean())
    if concepts is None:
        return overall
    concepts = np.asarray(concepts)
    return overall, {int(c): float(hit[concepts == c].mean()) for c in np.unique(concepts)}


@dataclass
class MetricsReport:
    variant: str
    recall: dict  # {"v2t": {"1": r, ...}, "t2v": {...}}
    accuracy: float
    per_concept: dict = field(default_factory=dict)

    def r1(self) -> float:
        """Mean of the two directions' R@1."""
        return 0.5 * (self.recall["v2t"]["1"] + self.recall["t2v"]["1"])

    def concept_r1(self, concept: int) -> float:
        pc = self.per_concept[str(concept)]["recall"]
        return 0.5 * (pc["v2t"]["1"] + pc["t2v"]["1"])

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "recall": self.recall,
            "accuracy": self.accuracy,
            "per_concept": self.per_concept,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["variant"], d["recall"], d["accuracy"], d.get("per_concept", {}))


def metrics_from_embeddings(emb: EmbeddingBatch, predictions, labels, concepts, variant: str = "") -> MetricsReport:
    n = emb.video.shape[0]
    ks = [k for k in KS if k <= n]
    concepts = np.asarray(concepts)
    ranks = {d: _ranks(emb, d) for d in ("v2t", "t2v")}
    recall = {d: {str(k): float(np.mean(r < k)) for k in ks} for d, r in ranks.items()}
    acc, acc_by_concept = accuracy(predictions, labels, concepts)
    per_concept = {}
    for c in np.unique(concepts):
        sel = concepts == c
        per_concept[str(int(c))] = {
            "count": int(sel.sum()),
            "recall": {d: {str(k): float(np.mean(r[sel] < k)) for k in ks} for d, r in ranks.items()},
            "accuracy": acc_by_concept[int(c)],
        }
    return MetricsReport(variant, recall, acc, per_concept)


def evaluate(params: EncoderParams, split, variant: str = "") -> MetricsReport:
    """Retrieval over the whole split as gallery, and fusion-head accuracy."""
    emb = encode(params, split.video, split.text)
    fin = np.concatenate([emb.video, emb.text], axis=1)
    llh = log_softmax_rows(fin @ params.arrays["fusion.w"].T + params.arrays["fusion.b"])
    predictions = np.argmax(llh, axis=1)
    return metrics_from_embeddings(emb, predictions, split.concept, split.concept, variant)
