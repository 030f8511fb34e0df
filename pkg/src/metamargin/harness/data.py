"""Synthetic paired video/text features with concept imbalance and misalignment."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..encoders import Batch
from ..numerics import make_rng


def zipf_distribution(n: int, s: float) -> np.ndarray:
    p = np.arange(1, n + 1, dtype=np.float64) ** -s
    return p / p.sum()


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Generator settings.

    Concept ``c`` has a Gaussian latent cluster; video and text features are
    two random linear views of the latent plus small noise. ``misalign_sigma``
    adds extra text-only noise to training pairs, standing in for captions that
    miss details. Meta and test splits are clean; the meta split is exactly
    balanced over concepts.
    """

    n_concepts: int = 10
    zipf_s: Optional[float] = 1.2
    concept_distribution: Optional[tuple] = None
    n_train: int = 1000
    n_meta: int = 100
    n_test: int = 300
    d_latent: int = 8
    d_video: int = 8
    d_text: int = 8
    misalign_sigma: float = 0.3
    label_fraction: float = 0.5
    center_scale: float = 1.0
    concept_spread: float = 0.6
    feature_noise: float = 0.05
    concept_specificity: float = 0.0
    shared_projection: bool = False
    balanced_test: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_concepts < 1:
            raise ValueError("need at least one concept")
        if self.n_meta % self.n_concepts:
            raise ValueError(f"n_meta={self.n_meta} is not divisible by {self.n_concepts} concepts; cannot balance")
        if self.balanced_test and self.n_test % self.n_concepts:
            raise ValueError("balanced test split needs n_test divisible by n_concepts")
        if self.misalign_sigma < 0 or self.feature_noise < 0:
            raise ValueError("noise scales must be >= 0")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in [0, 1]")
        p = self.probabilities()
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("concept distribution must be non-negative and sum to 1")
        if self.shared_projection and self.d_video != self.d_text:
            raise ValueError("shared projection needs d_video == d_text")

    def probabilities(self) -> np.ndarray:
        if self.concept_distribution is not None:
            p = np.asarray(self.concept_distribution, dtype=np.float64)
            if p.size != self.n_concepts:
                raise ValueError("concept_distribution length must equal n_concepts")
            return p
        if self.zipf_s is None:
            return np.full(self.n_concepts, 1.0 / self.n_concepts)
        return zipf_distribution(self.n_concepts, self.zipf_s)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["concept_distribution"] is not None:
            d["concept_distribution"] = list(d["concept_distribution"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDatasetSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown dataset spec fields: {sorted(unknown)}")
        if d.get("concept_distribution") is not None:
            d["concept_distribution"] = tuple(d["concept_distribution"])
        return cls(**d)


@dataclass
class Split:
    video: np.ndarray
    text: np.ndarray
    labels: np.ndarray  # -1 where unlabeled
    concept: np.ndarray

    def __len__(self):
        return len(self.concept)

    def as_batch(self) -> Batch:
        return Batch(self.video, self.text, self.labels)

    def to_dict(self) -> dict:
        return {
            "video": self.video.tolist(),
            "text": self.text.tolist(),
            "labels": self.labels.tolist(),
            "concept": self.concept.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Split":
        return cls(
            video=np.asarray(d["video"], dtype=np.float64),
            text=np.asarray(d["text"], dtype=np.float64),
            labels=np.asarray(d["labels"], dtype=np.int64),
            concept=np.asarray(d["concept"], dtype=np.int64),
        )


@dataclass
class Dataset:
    spec: SyntheticDatasetSpec
    train: Split
    meta: Split
    test: Split

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "train": self.train.to_dict(),
            "meta": self.meta.to_dict(),
            "test": self.test.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        return cls(
            spec=SyntheticDatasetSpec.from_dict(d["spec"]),
            train=Split.from_dict(d["train"]),
            meta=Split.from_dict(d["meta"]),
            test=Split.from_dict(d["test"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def append_pairs(self, video, text, concept, labels=None) -> None:
        """Add extra (e.g. caption-augmented) pairs to the training split."""
        video = np.atleast_2d(np.asarray(video, dtype=np.float64))
        text = np.atleast_2d(np.asarray(text, dtype=np.float64))
        concept = np.atleast_1d(np.asarray(concept, dtype=np.int64))
        labels = np.full(len(concept), -1) if labels is None else np.atleast_1d(np.asarray(labels, dtype=np.int64))
        tr = self.train
        self.train = Split(
            np.vstack([tr.video, video]),
            np.vstack([tr.text, text]),
            np.concatenate([tr.labels, labels]),
            np.concatenate([tr.concept, concept]),
        )


class _World:
    def __init__(self, spec: SyntheticDatasetSpec, rng: np.random.Generator):
        self.spec = spec
        self.centers = rng.normal(size=(spec.n_concepts, spec.d_latent)) * spec.center_scale
        scale = 1.0 / np.sqrt(spec.d_latent)
        self.A_v = rng.normal(size=(spec.d_video, spec.d_latent)) * scale
        self.A_t = self.A_v if spec.shared_projection else rng.normal(size=(spec.d_text, spec.d_latent)) * scale
        # per-concept deviation of the text view
        self.A_t_concept = self.A_t[None] + spec.concept_specificity * scale * rng.normal(
            size=(spec.n_concepts, spec.d_text, spec.d_latent)
        )

    def sample(self, concept: np.ndarray, misalign: float, label_fraction: float, rng) -> Split:
        s = self.spec
        n = len(concept)
        z = self.centers[concept] + s.concept_spread * rng.normal(size=(n, s.d_latent))
        video = z @ self.A_v.T + s.feature_noise * rng.normal(size=(n, s.d_video))
        if s.concept_specificity:
            text = np.einsum("nl,ntl->nt", z, self.A_t_concept[concept])
        else:
            text = z @ self.A_t.T
        text = text + s.feature_noise * rng.normal(size=(n, s.d_text))
        text = text + misalign * rng.normal(size=(n, s.d_text))
        labeled = rng.random(n) < label_fraction
        labels = np.where(labeled, concept, -1)
        return Split(video, text, labels.astype(np.int64), concept.astype(np.int64))


def _balanced(n: int, C: int, rng) -> np.ndarray:
    return rng.permutation(np.repeat(np.arange(C), n // C))


def generate(spec: SyntheticDatasetSpec) -> Dataset:
    """Draw train/meta/test splits from one seeded generator."""
    rng = make_rng(spec.seed)
    world = _World(spec, rng)
    C = spec.n_concepts
    train_concepts = rng.choice(C, size=spec.n_train, p=spec.probabilities())
    train = world.sample(train_concepts, spec.misalign_sigma, spec.label_fraction, rng)
    meta = world.sample(_balanced(spec.n_meta, C, rng), 0.0, 1.0, rng)
    if spec.balanced_test:
        test_concepts = _balanced(spec.n_test, C, rng)
    else:
        test_concepts = rng.choice(C, size=spec.n_test, p=spec.probabilities())
    test = world.sample(test_concepts, 0.0, 1.0, rng)
    return Dataset(spec, train, meta, test)
