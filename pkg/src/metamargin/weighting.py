"""Per-sample weighting functions.

The learnable weighting is a 1 -> H -> 1 MLP with a relu hidden layer and a
sigmoid output, mapping a training loss to a weight in (0, 1). Baselines
(focal, self-paced, uniform, L2RW-style) are fixed rules on the same input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .numerics import NonFiniteError


@dataclass(frozen=True)
class WeightNetParams:
    w1: np.ndarray  # (H, 1)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (1, H)
    b2: float

    def __post_init__(self):
        H = self.b1.shape[0]
        if H < 1:
            raise ValueError("hidden width must be >= 1")
        if self.w1.shape != (H, 1) or self.w2.shape != (1, H):
            raise ValueError(f"inconsistent shapes w1={self.w1.shape} b1={self.b1.shape} w2={self.w2.shape}")
        for name in ("w1", "b1", "w2", "b2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteError(f"weight-net parameter {name} is not finite")

    @property
    def hidden(self) -> int:
        return self.b1.shape[0]

    @property
    def size(self) -> int:
        return 3 * self.hidden + 1

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = 100) -> "WeightNetParams":
        """Hidden layer uniform in +-1/sqrt(H); zero output layer, so every weight starts at 0.5."""
        bound = 1.0 / math.sqrt(hidden)
        return cls(
            w1=rng.uniform(-bound, bound, size=(hidden, 1)),
            b1=rng.uniform(-bound, bound, size=hidden),
            w2=np.zeros((1, hidden)),
            b2=0.0,
        )

    @classmethod
    def zeros(cls, hidden: int) -> "WeightNetParams":
        return cls(np.zeros((hidden, 1)), np.zeros(hidden), np.zeros((1, hidden)), 0.0)

    def flat(self) -> np.ndarray:
        """Parameters as one vector, ordered w1, b1, w2, b2."""
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), [self.b2]])

    @classmethod
    def from_flat(cls, v, hidden: int) -> "WeightNetParams":
        v = np.asarray(v, dtype=np.float64)
        if v.size != 3 * hidden + 1:
            raise ValueError(f"expected {3 * hidden + 1} values, got {v.size}")
        H = hidden
        return cls(
            w1=v[:H].reshape(H, 1).copy(),
            b1=v[H : 2 * H].copy(),
            w2=v[2 * H : 3 * H].reshape(1, H).copy(),
            b2=float(v[3 * H]),
        )

    def to_dict(self) -> dict:
        return {
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WeightNetParams":
        return cls(
            w1=np.asarray(d["w1"], dtype=np.float64),
            b1=np.asarray(d["b1"], dtype=np.float64),
            w2=np.asarray(d["w2"], dtype=np.float64),
            b2=float(d["b2"]),
        )


def _check_losses(losses) -> np.ndarray:
    x = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("weighting input loss is not finite")
    return x


def weightnet_forward(theta: WeightNetParams, loss: float) -> float:
    """``sigmoid(w2 . relu(w1 * loss + b1) + b2)``."""
    return float(weights(theta, np.array([loss]))[0])


def weights(theta: WeightNetParams, losses) -> np.ndarray:
    """Vectorized :func:`weightnet_forward` over a batch of losses."""
    x = _check_losses(losses)
    hidden = np.maximum(x[:, None] * theta.w1[:, 0] + theta.b1, 0.0)
    return expit(hidden @ theta.w2[0] + theta.b2)


def weights_jacobian(theta: WeightNetParams, losses) -> np.ndarray:
    """d w_j / d theta for each loss, shape ``(len(losses), theta.size)``.

    Column order matches :meth:`WeightNetParams.flat`. The relu derivative is
    taken as 0 at the kink.
    """
    x = _check_losses(losses)
    pre = x[:, None] * theta.w1[:, 0] + theta.b1
    act = (pre > 0).astype(np.float64)
    hidden = pre * act
    w = expit(hidden @ theta.w2[0] + theta.b2)
    dz = (w * (1.0 - w))[:, None]
    g_hidden = dz * theta.w2[0] * act  # d w / d pre
    return np.concatenate([g_hidden * x[:, None], g_hidden, dz * hidden, dz], axis=1)


def weightnet_grad(theta: WeightNetParams, loss: float) -> WeightNetParams:
    """Gradient of the weight w.r.t. theta, packed in the shape of ``theta``."""
    g = weights_jacobian(theta, np.array([loss]))[0]
    return WeightNetParams.from_flat(g, theta.hidden)


def standardize(losses) -> np.ndarray:
    """Zero-mean, unit-variance copy of ``losses`` (identity shift when constant)."""
    x = np.asarray(losses, dtype=np.float64)
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x - x.mean()


VARIANTS = ("mlp", "focal", "spl", "l2rw", "uniform")


@dataclass(frozen=True)
class WeightingScheme:
    variant: str = "mlp"
    gamma: float = 2.0  # focal exponent
    threshold: float = 1.0  # self-paced learning cut-off

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown weighting variant {self.variant!r}; expected one of {VARIANTS}")
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        if not self.threshold > 0:
            raise ValueError("SPL threshold must be > 0")

    def to_dict(self) -> dict:
        return {"variant": self.variant, "gamma": self.gamma, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "WeightingScheme":
        return cls(
            variant=d.get("variant", "mlp"),
            gamma=float(d.get("gamma", 2.0)),
            threshold=float(d.get("threshold", 1.0)),
        )


def baseline_weight(scheme: WeightingScheme, loss: float) -> float:
    """Fixed-rule weight for a single loss value.

    focal: ``(1 - exp(-loss)) ** gamma`` (the loss read as ``-log p_t``);
    spl: 1 below the threshold, 0 at or above it; uniform: 1.
    """
    loss = float(loss)
    if not math.isfinite(loss):
        raise NonFiniteError("weighting input loss is not finite")
    if scheme.variant == "focal":
        return (-math.expm1(-loss)) ** scheme.gamma
    if scheme.variant == "spl":
        return 1.0 if loss < scheme.threshold else 0.0
    if scheme.variant == "uniform":
        return 1.0
    raise ValueError(f"{scheme.variant!r} has no fixed per-loss rule")


def l2rw_weights(train_grads, meta_grad) -> np.ndarray:
    """Weights proportional to the clipped alignment ``max(<g_j, g_meta>, 0)``.

    Normalized to sum to one; falls back to uniform ``1/B`` when no training
    gradient has positive alignment.
    """
    G = np.atleast_2d(np.asarray(train_grads, dtype=np.float64))
    g = np.asarray(meta_grad, dtype=np.float64).ravel()
    if G.shape[1] != g.size:
        raise ValueError(f"gradient size mismatch: {G.shape[1]} vs {g.size}")
    align = np.maximum(G @ g, 0.0)
    total = align.sum()
    if total > 0:
        return align / total
    return np.full(G.shape[0], 1.0 / G.shape[0])
