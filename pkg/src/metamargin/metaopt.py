"""Meta-optimized training of the encoder and the weighting network.

One training step:

1. a virtual weighted SGD step of the encoder on a training batch,
2. an update of the weighting network that lowers the meta-batch loss at the
   virtual parameters,
3. the real encoder step, re-weighted with the updated weighting network.

The weighting-network update has two independent implementations:
:func:`meta_update_direct` back-propagates through the virtual step via its
Jacobian, :func:`meta_update_derived` uses the expanded form built from the
train/meta gradient inner products ``G_ij``. A joint-learning baseline and
fixed-rule weighting schemes share the same loop.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from . import weighting as wt
from .encoders import Batch, EncoderParams, per_sample_loss_and_grads, summed_loss_and_grad
from .numerics import NonFiniteError
from .objectives import MarginSchedule, margin_at
from .weighting import WeightingScheme, WeightNetParams

log = logging.getLogger(__name__)

STRATEGIES = ("meta", "joint")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    beta: float = 0.5
    tau: float = 1.0
    eta: float = 1.0
    batch_size: int = 32
    meta_batch_size: int = 20
    steps: int = 300
    sched: MarginSchedule = field(default_factory=MarginSchedule)
    scheme: WeightingScheme = field(default_factory=WeightingScheme)
    strategy: str = "meta"
    seed: int = 0
    hidden: int = 16
    embed: int = 16
    weightnet_hidden: int = 100
    standardize_losses: bool = False
    normalize_weights: bool = False

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("learning rates alpha and beta must be positive")
        if min(self.batch_size, self.meta_batch_size) < 1 or self.steps < 0:
            raise ValueError("batch sizes must be >= 1 and steps >= 0")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.tau > 0:
            raise ValueError("temperature must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sched"] = self.sched.to_dict()
        d["scheme"] = self.scheme.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "sched" in d:
            d["sched"] = MarginSchedule.from_dict(d["sched"])
        if "scheme" in d:
            d["scheme"] = WeightingScheme.from_dict(d["scheme"])
        return cls(**d)

    def updated(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class StepTrace:
    step: int
    mu: float
    losses: list
    weights: list
    mean_loss: float
    meta_loss: Optional[float]
    grad_norm_model: float
    grad_norm_weightnet: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "mu": self.mu,
                "mean_loss": self.mean_loss,
                "losses": self.losses,
                "weights": self.weights,
                "meta_loss": self.meta_loss,
                "grad_norm_model": self.grad_norm_model,
                "grad_norm_weightnet": self.grad_norm_weightnet,
            }
        )


def _train_terms(Theta: EncoderParams, batch: Batch, k: int, cfg: TrainConfig):
    mu = margin_at(cfg.sched, k)
    try:
        breakdown, grads = per_sample_loss_and_grads(Theta, batch, mu, cfg.tau, cfg.eta)
    except NonFiniteError as exc:
        raise NonFiniteError(f"training batch at step {k}: {exc}") from exc
    bad = np.flatnonzero(~np.all(np.isfinite(grads), axis=1))
    if bad.size:
        raise NonFiniteError(f"non-finite gradient for training sample {int(bad[0])} at step {k}")
    return breakdown.per_sample, grads, mu


def _weight_inputs(losses: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    return wt.standardize(losses) if cfg.standardize_losses else losses


def batch_weights(theta: WeightNetParams, losses: np.ndarray, cfg: TrainConfig):
    """Sample weights and their theta-Jacobian, optionally rescaled to mean one."""
    x = _weight_inputs(losses, cfg)
    w = wt.weights(theta, x)
    jac = wt.weights_jacobian(theta, x)
    if cfg.normalize_weights:
        B, total = w.size, w.sum()
        jac = B * (jac * total - np.outer(w, jac.sum(axis=0))) / total**2
        w = B * w / total
    return w, jac


def _weighted_step(Theta: EncoderParams, w: np.ndarray, grads: np.ndarray, alpha: float) -> EncoderParams:
    B = grads.shape[0]
    return Theta.with_flat(Theta.flat() - (alpha / B) * (w @ grads))


def inner_estimate(
    Theta: EncoderParams, theta: WeightNetParams, batch: Batch, k: int, cfg: TrainConfig
) -> EncoderParams:
    """Virtual step ``Theta - alpha/B * sum_j w_j * grad L_j`` with the current weights."""
    losses, grads, _ = _train_terms(Theta, batch, k, cfg)
    w, _ = batch_weights(theta, losses, cfg)
    return _weighted_step(Theta, w, grads, cfg.alpha)


def _meta_grad_direct(theta, Theta, losses, grads, meta_batch, mu, cfg):
    w, jac_w = batch_weights(theta, losses, cfg)  # (B,), (B, T)
    B = grads.shape[0]
    Theta_hat = _weighted_step(Theta, w, grads, cfg.alpha)
    meta_total, g_meta = summed_loss_and_grad(Theta_hat, meta_batch, mu, cfg.tau, cfg.eta)
    # d Theta_hat / d theta, shape (P, T)
    dTheta_hat = -(cfg.alpha / B) * (grads.T @ jac_w)
    M = meta_batch.video.shape[0]
    return dTheta_hat.T @ g_meta / M, meta_total / M


def meta_update_direct(
    theta: WeightNetParams,
    Theta: EncoderParams,
    batch: Batch,
    meta_batch: Batch,
    k: int,
    cfg: TrainConfig,
) -> WeightNetParams:
    """Weight-net step on the meta loss, differentiated through the virtual step."""
    losses, grads, mu = _train_terms(Theta, batch, k, cfg)
    g, _ = _meta_grad_direct(theta, Theta, losses, grads, meta_batch, mu, cfg)
    return WeightNetParams.from_flat(theta.flat() - cfg.beta * g, theta.hidden)


def coefficient_matrix(meta_grads: np.ndarray, train_grads: np.ndarray) -> np.ndarray:
    """``G[i, j] = <grad meta_i at Theta_hat, grad train_j at Theta>``, shape (M, B)."""
    return meta_grads @ train_grads.T


def apply_coefficients(theta: WeightNetParams, losses: np.ndarray, G: np.ndarray, cfg: TrainConfig) -> WeightNetParams:
    """``theta + alpha*beta/(BM) * sum_ij G_ij * dw_j/dtheta`` for a given (M, B) matrix ``G``."""
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    M, B = G.shape
    if B != len(losses):
        raise ValueError(f"G has {B} columns for {len(losses)} training losses")
    _, jac_w = batch_weights(theta, np.asarray(losses, dtype=np.float64), cfg)
    step = (cfg.alpha * cfg.beta / (B * M)) * (G.sum(axis=0) @ jac_w)
    return WeightNetParams.from_flat(theta.flat() + step, theta.hidden)


def _meta_step_derived(theta, Theta, losses, grads, meta_batch, mu, cfg):
    w, _ = batch_weights(theta, losses, cfg)
    Theta_hat = _weighted_step(Theta, w, grads, cfg.alpha)
    _, meta_grads = per_sample_loss_and_grads(Theta_hat, meta_batch, mu, cfg.tau, cfg.eta)
    G = coefficient_matrix(meta_grads, grads)
    return apply_coefficients(theta, losses, G, cfg), G


def meta_update_derived(
    theta: WeightNetParams,
    Theta: EncoderParams,
    batch: Batch,
    meta_batch: Batch,
    k: int,
    cfg: TrainConfig,
) -> WeightNetParams:
    """Weight-net step ``theta + alpha*beta/(BM) * sum_ij G_ij * dw_j/dtheta``."""
    losses, grads, mu = _train_terms(Theta, batch, k, cfg)
    theta_next, _ = _meta_step_derived(theta, Theta, losses, grads, meta_batch, mu, cfg)
    return theta_next


def model_update(
    Theta: EncoderParams, theta_next: WeightNetParams, batch: Batch, k: int, cfg: TrainConfig
) -> EncoderParams:
    """Real encoder step with weights from the updated weighting network.

    Losses and gradients are those at the current ``Theta``; only the weights
    change relative to :func:`inner_estimate`.
    """
    losses, grads, _ = _train_terms(Theta, batch, k, cfg)
    w, _ = batch_weights(theta_next, losses, cfg)
    return _weighted_step(Theta, w, grads, cfg.alpha)


class _Cycler:
    """Minibatches without replacement, reshuffled at each pass over the data."""

    def __init__(self, n: int, size: int, rng: np.random.Generator):
        if size > n:
            raise ValueError(f"batch size {size} exceeds split size {n}")
        self.n, self.size, self.rng = n, size, rng
        self._order = np.empty(0, dtype=int)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.size > self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.size]
        self._pos += self.size
        return idx


def _take(data: Batch, idx: np.ndarray) -> Batch:
    labels = None if data.labels is None else np.asarray(data.labels)[idx]
    return Batch(np.asarray(data.video)[idx], np.asarray(data.text)[idx], labels)


def _n_classes(*splits: Batch) -> int:
    top = max((int(np.max(s.labels)) for s in splits if s.labels is not None and len(s.labels)), default=0)
    return max(top + 1, 1)


def init_params(cfg: TrainConfig, d_video: int, d_text: int, n_classes: int):
    """Seeded initial encoder and weight-net parameters."""
    init_seq = np.random.SeedSequence(cfg.seed).spawn(3)[0]
    rng = np.random.Generator(np.random.PCG64(init_seq))
    Theta = EncoderParams.init(rng, d_video, d_text, n_classes, cfg.hidden, cfg.embed)
    theta = WeightNetParams.init(rng, cfg.weightnet_hidden)
    return Theta, theta


def train_step(Theta, theta, batch, meta_batch, k, cfg):
    """One step of the configured strategy; returns ``(Theta', theta', StepTrace)``."""
    losses, grads, mu = _train_terms(Theta, batch, k, cfg)
    B = grads.shape[0]
    meta_loss = None
    theta_next = theta
    scheme = cfg.scheme.variant
    if scheme == "mlp" and cfg.strategy == "meta":
        g_theta, meta_loss = _meta_grad_direct(theta, Theta, losses, grads, meta_batch, mu, cfg)
        theta_next = WeightNetParams.from_flat(theta.flat() - cfg.beta * g_theta, theta.hidden)
        w, _ = batch_weights(theta_next, losses, cfg)
    elif scheme == "mlp":
        w, jac_w = batch_weights(theta, losses, cfg)
        # d/dtheta of (1/B) sum_j w_j L_j, taken at the same point as the model step
        g_theta = losses @ jac_w / B
        theta_next = WeightNetParams.from_flat(theta.flat() - cfg.beta * g_theta, theta.hidden)
    elif scheme == "l2rw":
        M = meta_batch.video.shape[0]
        meta_total, g_meta = summed_loss_and_grad(Theta, meta_batch, mu, cfg.tau, cfg.eta)
        meta_loss = meta_total / M
        w = B * wt.l2rw_weights(grads, g_meta)
        g_theta = np.zeros(theta.size)
    else:
        w = np.array([wt.baseline_weight(cfg.scheme, v) for v in losses])
        g_theta = np.zeros(theta.size)
    direction = (w @ grads) / B
    Theta_next = Theta.with_flat(Theta.flat() - cfg.alpha * direction)
    trace = StepTrace(
        step=k,
        mu=mu,
        losses=losses.tolist(),
        weights=w.tolist(),
        mean_loss=float(losses.mean()),
        meta_loss=None if meta_loss is None else float(meta_loss),
        grad_norm_model=float(np.linalg.norm(direction)),
        grad_norm_weightnet=float(np.linalg.norm(g_theta)),
    )
    return Theta_next, theta_next, trace


def _resolve_init(cfg, train_data, meta_data, Theta, theta):
    if Theta is not None and theta is not None:
        return Theta, theta
    Theta0, theta0 = init_params(
        cfg, train_data.video.shape[1], train_data.text.shape[1], _n_classes(train_data, meta_data)
    )
    return (Theta0 if Theta is None else Theta), (theta0 if theta is None else theta)


def iter_training(cfg: TrainConfig, train_data: Batch, meta_data: Batch, Theta=None, theta=None) -> Iterator:
    """Yield ``(Theta, theta, StepTrace)`` after each step."""
    Theta, theta = _resolve_init(cfg, train_data, meta_data, Theta, theta)
    _, train_seq, meta_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    train_batches = _Cycler(len(train_data.video), cfg.batch_size, np.random.Generator(np.random.PCG64(train_seq)))
    meta_batches = _Cycler(len(meta_data.video), cfg.meta_batch_size, np.random.Generator(np.random.PCG64(meta_seq)))
    for k in range(cfg.steps):
        batch = _take(train_data, train_batches.next())
        meta_batch = _take(meta_data, meta_batches.next())
        try:
            Theta, theta, trace = train_step(Theta, theta, batch, meta_batch, k, cfg)
        except (NonFiniteError, ValueError) as exc:
            raise type(exc)(f"step {k}: {exc}") from exc
        yield Theta, theta, trace


def train(cfg: TrainConfig, train_data: Batch, meta_data: Batch, Theta=None, theta=None):
    """Run ``cfg.steps`` steps; returns ``(Theta, theta, traces)``.

    With ``steps == 0`` the (seeded) initial parameters come back unchanged.
    """
    Theta, theta = _resolve_init(cfg, train_data, meta_data, Theta, theta)
    traces = []
    for Theta, theta, trace in iter_training(cfg, train_data, meta_data, Theta, theta):
        traces.append(trace)
        if trace.step % 100 == 0:
            log.debug("step %d mu=%.4f mean_loss=%.4f", trace.step, trace.mu, trace.mean_loss)
    return Theta, theta, traces
