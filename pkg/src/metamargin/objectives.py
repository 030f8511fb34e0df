"""Contrastive, angular-margin and cross-entropy objectives.

Both retrieval directions share one implementation: ``"v2t"`` reads row ``i``
of the similarity (or angle) matrix, ``"t2v"`` reads column ``i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .numerics import NonFiniteError, log_sum_exp, log_sum_exp_rows, safe_arccos

HALF_PI = math.pi / 2
DIRECTIONS = ("v2t", "t2v")


@dataclass(frozen=True)
class MarginSchedule:
    """Margin ``mu(k) = a0 / (a1 + exp(-a2 * k))`` rising towards ``a0 / a1``."""

    a0: float = 2.0
    a1: float = 10.0
    a2: float = 0.1

    def __post_init__(self):
        if not self.a1 > 0:
            raise ValueError(f"a1 must be positive, got {self.a1}")
        if self.a0 < 0:
            raise ValueError(f"a0 must be non-negative, got {self.a0}")
        # sup over k >= 0 of a0 / (a1 + e^{-a2 k}) is below a0 / a1
        if self.a0 / self.a1 >= HALF_PI:
            raise ValueError("schedule can reach pi/2; need a0 / a1 < pi/2")

    @classmethod
    def constant(cls, mu: float, a1: float = 10.0) -> "MarginSchedule":
        """Schedule that returns ``mu`` at every step (a2 = 0)."""
        return cls(a0=mu * (a1 + 1.0), a1=a1, a2=0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "MarginSchedule":
        return cls(float(d["a0"]), float(d["a1"]), float(d["a2"]))

    def to_dict(self) -> dict:
        return {"a0": self.a0, "a1": self.a1, "a2": self.a2}


# Implementation-details hyperparameters (a0=0.2, a1=10, a2=-0.1); the margin
# then decays from 0.018 towards 0. Kept selectable for comparison.
LITERAL_SETTINGS_SCHEDULE = MarginSchedule(a0=0.2, a1=10.0, a2=-0.1)


def margin_at(sched: MarginSchedule, k: float) -> float:
    if k < 0:
        raise ValueError(f"step index must be >= 0, got {k}")
    mu = sched.a0 / (sched.a1 + math.exp(-sched.a2 * k))
    if not math.isfinite(mu):
        raise NonFiniteError(f"margin is not finite at step {k}")
    return mu


@dataclass
class LossBreakdown:
    per_sample: np.ndarray
    v2t: np.ndarray
    t2v: np.ndarray
    ce: np.ndarray
    eta: float

    def to_dict(self) -> dict:
        return {
            "per_sample": self.per_sample.tolist(),
            "v2t": self.v2t.tolist(),
            "t2v": self.t2v.tolist(),
            "ce": self.ce.tolist(),
            "eta": self.eta,
        }


def _oriented(m: np.ndarray, direction: str) -> np.ndarray:
    if direction == "v2t":
        return m
    if direction == "t2v":
        return m.T
    raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _check_mu(mu: float) -> None:
    if not 0.0 <= mu < HALF_PI:
        raise ValueError(f"margin must lie in [0, pi/2), got {mu}")


def _nce(logits: np.ndarray) -> np.ndarray:
    # L_i = logsumexp_j(logits_ij) - logits_ii
    return log_sum_exp_rows(logits) - np.diagonal(logits)


def positive_angle(diag_angles: np.ndarray, mu: float) -> np.ndarray:
    """Effective positive-pair angle: ``[lam - mu]_+`` on the margined branch."""
    return np.where(diag_angles <= HALF_PI, np.maximum(diag_angles - mu, 0.0), diag_angles)


def margined_cosines(angles: np.ndarray, mu: float) -> np.ndarray:
    """Cosine logits (before temperature) with the margin applied on the diagonal."""
    c = np.cos(angles)
    idx = np.arange(angles.shape[0])
    c[idx, idx] = np.cos(positive_angle(np.diagonal(angles), mu))
    return c


def contrastive_loss(S, tau: float = 1.0, direction: str = "v2t") -> np.ndarray:
    """Per-sample InfoNCE loss over a BxB cosine-similarity matrix."""
    _check_tau(tau)
    S = _oriented(np.asarray(S, dtype=np.float64), direction)
    return _nce(S / tau)


def angular_margin_loss(lam, mu: float, tau: float = 1.0, direction: str = "v2t") -> np.ndarray:
    """Per-sample contrastive loss with a subtractive margin on the positive angle.

    For ``lam_ii <= pi/2`` the positive logit is ``cos([lam_ii - mu]_+) / tau``;
    beyond ``pi/2`` it is the plain ``cos(lam_ii) / tau``. Negatives always use
    ``cos(lam_ij) / tau``. The boundary ``lam_ii == pi/2`` takes the margined
    branch.
    """
    _check_tau(tau)
    _check_mu(mu)
    A = _oriented(np.asarray(lam, dtype=np.float64), direction)
    return _nce(margined_cosines(A, mu) / tau)


def _row_terms(lam, mu, tau, i, direction):
    A = _oriented(np.asarray(lam, dtype=np.float64), direction)
    row = A[i]
    neg = np.cos(np.delete(row, i)) / tau
    return float(row[i]), neg


def angular_loss_grad(lam, mu: float, tau: float, i: int, direction: str = "v2t") -> float:
    """Closed-form derivative of the angular loss of sample ``i`` w.r.t. ``lam_ii``.

    ``sin(a)/tau * sum_neg / (exp(cos(a)/tau) + sum_neg)`` with ``a`` the
    effective positive angle. The softmax fraction is evaluated as a sigmoid of
    a log-sum-exp difference so tiny values keep full relative precision.
    """
    _check_tau(tau)
    _check_mu(mu)
    lii, neg = _row_terms(lam, mu, tau, i, direction)
    if neg.size == 0:
        return 0.0
    eff = float(positive_angle(np.array(lii), mu))
    pos = math.cos(eff) / tau
    frac = float(expit(log_sum_exp(neg) - pos))
    return math.sin(eff) / tau * frac


def gradient_ratio(lam, mu: float, tau: float, i: int, direction: str = "v2t") -> float:
    """|d angular / d lam_ii| divided by |d contrastive / d lam_ii|, in closed form.

    Only defined on ``0 < lam_ii <= pi/2``.
    """
    _check_tau(tau)
    _check_mu(mu)
    lii, neg = _row_terms(lam, mu, tau, i, direction)
    if lii == 0.0:
        raise ValueError("gradient ratio is 0/0 at lam_ii = 0")
    if not 0.0 < lii <= HALF_PI:
        raise ValueError(f"gradient ratio needs 0 < lam_ii <= pi/2, got {lii}")
    eff = max(lii - mu, 0.0)
    sin_ratio = math.sin(eff) / math.sin(lii)
    den_plain = log_sum_exp(np.concatenate(([math.cos(lii) / tau], neg)))
    den_margin = log_sum_exp(np.concatenate(([math.cos(eff) / tau], neg)))
    return sin_ratio * math.exp(den_plain - den_margin)


def cross_entropy(log_likelihoods, target: int) -> float:
    """Negative log-likelihood of ``target`` under a normalized log-distribution."""
    llh = np.asarray(log_likelihoods, dtype=np.float64)
    total = float(np.sum(np.exp(llh)))
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"log-likelihoods are not normalized (sum of probabilities {total})")
    if not 0 <= target < llh.size:
        raise IndexError(f"target {target} out of range for {llh.size} classes")
    return float(-llh[target])


def label_mask(labels, B: int) -> np.ndarray:
    """Boolean mask of labeled samples; ``None`` or negative entries are unlabeled."""
    if labels is None:
        return np.zeros(B, dtype=bool)
    if len(labels) != B:
        raise ValueError(f"labels length {len(labels)} != batch size {B}")
    return np.array([y is not None and int(y) >= 0 for y in labels], dtype=bool)


def combined_from_angles(lam, log_likelihoods, labels, mu, tau, eta) -> LossBreakdown:
    """Training objective per sample given an angle matrix and a fixed margin."""
    lam = np.asarray(lam, dtype=np.float64)
    B = lam.shape[0]
    mask = label_mask(labels, B)
    if mask.any() and log_likelihoods is None:
        raise ValueError("labels supplied without fusion log-likelihoods")
    v2t = angular_margin_loss(lam, mu, tau, "v2t")
    t2v = angular_margin_loss(lam, mu, tau, "t2v")
    ce = np.zeros(B)
    for i in np.flatnonzero(mask):
        ce[i] = cross_entropy(log_likelihoods[i], int(labels[i]))
    per_sample = v2t + t2v + eta * ce
    return LossBreakdown(per_sample=per_sample, v2t=v2t, t2v=t2v, ce=ce, eta=float(eta))


def combined_loss(
    S,
    labels=None,
    log_likelihoods=None,
    sched: MarginSchedule = MarginSchedule(),
    k: int = 0,
    tau: float = 1.0,
    eta: float = 1.0,
) -> LossBreakdown:
    """Symmetric angular-margin loss plus ``eta``-weighted cross-entropy.

    Samples without a label get no cross-entropy term, which is the same as
    setting ``eta = 0`` for them.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {S.shape}")
    return combined_from_angles(safe_arccos(S), log_likelihoods, labels, margin_at(sched, k), tau, eta)
