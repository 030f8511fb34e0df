"""Toy dual encoder with exact per-sample gradients.

Video and text features each pass through an affine-relu-affine stack and are
L2-normalized; their dot products are cosine similarities. A fusion head
(concatenation + affine + log-softmax) provides class log-likelihoods for
labeled samples. Gradients are written out by hand so that every training
sample's loss gets its own gradient vector, which the meta-update needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .numerics import ARCCOS_EPS, NonFiniteError, log_softmax_rows, safe_arccos, safe_arccos_grad
from .objectives import HALF_PI, LossBreakdown, combined_from_angles, margined_cosines

NORM_FLOOR = 1e-12

PARAM_NAMES = (
    "video.w1", "video.b1", "video.w2", "video.b2",
    "text.w1", "text.b1", "text.w2", "text.b2",
    "fusion.w", "fusion.b",
)


class Batch(NamedTuple):
    video: np.ndarray  # (B, D_v)
    text: np.ndarray  # (B, D_t)
    labels: Optional[np.ndarray] = None  # (B,), -1 marks unlabeled


@dataclass(frozen=True)
class EncoderParams:
    """Named parameter arrays of both towers and the fusion head."""

    arrays: dict

    def __post_init__(self):
        missing = [n for n in PARAM_NAMES if n not in self.arrays]
        if missing:
            raise ValueError(f"missing encoder parameters: {missing}")
        a = self.arrays
        for tower in ("video", "text"):
            h, _ = a[f"{tower}.w1"].shape
            e, h2 = a[f"{tower}.w2"].shape
            if h2 != h or a[f"{tower}.b1"].shape != (h,) or a[f"{tower}.b2"].shape != (e,):
                raise ValueError(f"{tower} tower layer shapes do not chain")
        e_v, e_t = a["video.w2"].shape[0], a["text.w2"].shape[0]
        if e_v != e_t:
            raise ValueError("video and text embedding sizes differ")
        c, fin = a["fusion.w"].shape
        if fin != 2 * e_v or a["fusion.b"].shape != (c,):
            raise ValueError("fusion head shape does not match embedding size")

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        d_video: int,
        d_text: int,
        n_classes: int,
        hidden: int = 16,
        embed: int = 16,
    ) -> "EncoderParams":
        """Uniform +-1/sqrt(fan_in) initialization for every layer."""

        def layer(fan_out, fan_in):
            b = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-b, b, size=(fan_out, fan_in)), rng.uniform(-b, b, size=fan_out)

        arrays = {}
        for tower, d_in in (("video", d_video), ("text", d_text)):
            arrays[f"{tower}.w1"], arrays[f"{tower}.b1"] = layer(hidden, d_in)
            arrays[f"{tower}.w2"], arrays[f"{tower}.b2"] = layer(embed, hidden)
        arrays["fusion.w"], arrays["fusion.b"] = layer(n_classes, 2 * embed)
        return cls(arrays)

    @property
    def shapes(self) -> dict:
        return {n: self.arrays[n].shape for n in PARAM_NAMES}

    @property
    def size(self) -> int:
        return sum(self.arrays[n].size for n in PARAM_NAMES)

    @property
    def embed_dim(self) -> int:
        return self.arrays["video.w2"].shape[0]

    @property
    def n_classes(self) -> int:
        return self.arrays["fusion.w"].shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n in PARAM_NAMES])

    def with_flat(self, v) -> "EncoderParams":
        """New parameters of the same shapes filled from a flat vector."""
        v = np.asarray(v)
        if v.size != self.size:
            raise ValueError(f"expected {self.size} values, got {v.size}")
        out, pos = {}, 0
        for n in PARAM_NAMES:
            shape = self.arrays[n].shape
            size = int(np.prod(shape))
            out[n] = v[pos : pos + size].reshape(shape).copy()
            pos += size
        return EncoderParams(out)

    def slices(self) -> dict:
        """Flat-vector slice of each named parameter."""
        out, pos = {}, 0
        for n in PARAM_NAMES:
            size = self.arrays[n].size
            out[n] = slice(pos, pos + size)
            pos += size
        return out

    def to_dict(self) -> dict:
        return {n: {"shape": list(self.arrays[n].shape), "data": self.arrays[n].ravel().tolist()} for n in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderParams":
        return cls({n: np.asarray(d[n]["data"], dtype=np.float64).reshape(d[n]["shape"]) for n in PARAM_NAMES})


@dataclass
class EmbeddingBatch:
    video: np.ndarray
    text: np.ndarray


def _check(name: str, x) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in layer {name}")


def _tower(params: EncoderParams, tower: str, x: np.ndarray):
    a = params.arrays
    z1 = x @ a[f"{tower}.w1"].T + a[f"{tower}.b1"]
    _check(f"{tower}.hidden", z1)
    h = np.maximum(z1, 0.0)
    u = h @ a[f"{tower}.w2"].T + a[f"{tower}.b2"]
    _check(f"{tower}.output", u)
    return z1, h, u


def _normalize(u: np.ndarray, tower: str):
    norms = np.sqrt(np.sum(u * u, axis=1))
    bad = np.flatnonzero(norms < NORM_FLOOR)
    if bad.size:
        raise ValueError(f"{tower} embedding row {int(bad[0])} has near-zero norm; cannot normalize")
    return u / norms[:, None], norms


def encode(params: EncoderParams, raw_video, raw_text) -> EmbeddingBatch:
    """Forward both towers and L2-normalize every output row."""
    ev, _ = _normalize(_tower(params, "video", np.asarray(raw_video, dtype=np.float64))[2], "video")
    et, _ = _normalize(_tower(params, "text", np.asarray(raw_text, dtype=np.float64))[2], "text")
    return EmbeddingBatch(ev, et)


def pair_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b.T`` accumulated feature by feature, so ``pair_dot(b, a) == pair_dot(a, b).T`` exactly."""
    out = np.zeros((a.shape[0], b.shape[0]), dtype=np.result_type(a, b))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[:, k])
    return out


def similarity(emb: EmbeddingBatch) -> np.ndarray:
    """Cosine similarity matrix ``S[i, j] = <video_i, text_j>`` clipped to [-1, 1]."""
    return np.clip(pair_dot(emb.video, emb.text), -1.0, 1.0)


def _fusion_input(emb: EmbeddingBatch) -> np.ndarray:
    return np.concatenate([emb.video, emb.text], axis=1)


def fusion_log_likelihoods(params: EncoderParams, emb: EmbeddingBatch, i: int) -> np.ndarray:
    """Log-softmax of the fusion head applied to ``[video_i ; text_i]``."""
    if not 0 <= i < emb.video.shape[0]:
        raise IndexError(f"row {i} out of range")
    h = np.concatenate([emb.video[i], emb.text[i]])
    logits = params.arrays["fusion.w"] @ h + params.arrays["fusion.b"]
    return log_softmax_rows(logits[None, :])[0]


class _Forward(NamedTuple):
    x: dict
    z1: dict
    h: dict
    u_norm: dict
    emb: EmbeddingBatch
    S_raw: np.ndarray
    lam: np.ndarray
    llh: np.ndarray
    mask: np.ndarray
    breakdown: LossBreakdown


def _forward(params: EncoderParams, batch: Batch, mu: float, tau: float, eta: float) -> _Forward:
    x, z1, h, emb_rows, u_norm = {}, {}, {}, {}, {}
    for tower, raw in (("video", batch.video), ("text", batch.text)):
        x[tower] = np.asarray(raw, dtype=np.float64)
        z1[tower], h[tower], u = _tower(params, tower, x[tower])
        emb_rows[tower], u_norm[tower] = _normalize(u, tower)
    emb = EmbeddingBatch(emb_rows["video"], emb_rows["text"])
    S_raw = pair_dot(emb.video, emb.text)
    lam = safe_arccos(np.clip(S_raw, -1.0, 1.0))
    logits = _fusion_input(emb) @ params.arrays["fusion.w"].T + params.arrays["fusion.b"]
    llh = log_softmax_rows(logits)
    _check("fusion", llh)
    B = S_raw.shape[0]
    labels = batch.labels
    mask = np.zeros(B, dtype=bool) if labels is None else np.asarray(labels) >= 0
    breakdown = combined_from_angles(lam, llh, None if labels is None else list(labels), mu, tau, eta)
    _check("loss", breakdown.per_sample)
    return _Forward(x, z1, h, u_norm, emb, S_raw, lam, llh, mask, breakdown)


def sample_losses(params: EncoderParams, batch: Batch, mu: float, tau: float = 1.0, eta: float = 1.0) -> LossBreakdown:
    """Forward pass only: per-sample training losses of a batch."""
    return _forward(params, batch, mu, tau, eta).breakdown


def kink_distance(params: EncoderParams, batch: Batch, mu: float) -> float:
    """Distance of a batch from the loss's non-smooth set.

    The smallest of: any hidden pre-activation's magnitude, the gap between a
    positive angle and ``mu`` or ``pi/2``, and any cosine's gap to the clamp.
    Finite differences are only trustworthy when this is well above the step.
    """
    fw = _forward(params, batch, mu, 1.0, 1.0)
    relu = min(float(np.abs(z).min()) for z in fw.z1.values())
    diag = np.diag(fw.lam)
    angle = float(min(np.abs(diag - mu).min(), np.abs(diag - HALF_PI).min()))
    clamp = float((1.0 - ARCCOS_EPS - np.abs(fw.S_raw)).min())
    return min(relu, angle, clamp)


def _cosine_slopes(fw: _Forward, mu: float) -> np.ndarray:
    """d(logit cosine)/dS elementwise, margin included on the diagonal."""
    dlam = safe_arccos_grad(np.clip(fw.S_raw, -1.0, 1.0))
    idx = np.arange(dlam.shape[0])
    lii = fw.lam[idx, idx]
    eff = np.where(lii <= HALF_PI, np.maximum(lii - mu, 0.0), lii)
    D = -np.sin(fw.lam) * dlam
    # sin(0) = 0 makes the slope vanish exactly on the clamped region
    D[idx, idx] = -np.sin(eff) * dlam[idx, idx]
    return D


def _softmaxes(fw: _Forward, mu: float, tau: float):
    C = margined_cosines(fw.lam, mu) / tau
    P_v = np.exp(log_softmax_rows(C))
    P_t = np.exp(log_softmax_rows(C.T))
    return P_v, P_t


def similarity_grads(params: EncoderParams, batch: Batch, mu: float, tau: float = 1.0, eta: float = 1.0) -> np.ndarray:
    """``G[i] = d L_i / d S`` for every sample ``i``; shape ``(B, B, B)``.

    Only the two contrastive terms depend on S; cross-entropy enters through
    the fusion head instead.
    """
    fw = _forward(params, batch, mu, tau, eta)
    return _per_sample_sim_grads(fw, mu, tau)


def _per_sample_sim_grads(fw: _Forward, mu: float, tau: float) -> np.ndarray:
    B = fw.lam.shape[0]
    D = _cosine_slopes(fw, mu)
    P_v, P_t = _softmaxes(fw, mu, tau)
    eye = np.eye(B)
    idx = np.arange(B)
    G = np.zeros((B, B, B))
    G[idx, idx, :] = (P_v - eye) * D / tau
    G[idx, :, idx] += (P_t - eye) * D.T / tau
    return G


def _summed_sim_grad(fw: _Forward, mu: float, tau: float) -> np.ndarray:
    B = fw.lam.shape[0]
    D = _cosine_slopes(fw, mu)
    P_v, P_t = _softmaxes(fw, mu, tau)
    eye = np.eye(B)
    return (P_v - eye) * D / tau + ((P_t - eye) * D.T / tau).T


def _fusion_logit_grads(fw: _Forward, batch: Batch, eta: float) -> np.ndarray:
    """Row ``i``: d(eta * CE_i)/d(fusion logits of row i); zero for unlabeled rows."""
    B, C = fw.llh.shape
    g = np.zeros((B, C))
    for i in np.flatnonzero(fw.mask):
        g[i] = np.exp(fw.llh[i])
        g[i, int(batch.labels[i])] -= 1.0
    return eta * g


def _backward(params: EncoderParams, fw: _Forward, G: np.ndarray, gF: np.ndarray) -> np.ndarray:
    """Reverse pass for ``n`` scalar objectives at once.

    ``G[n]`` is objective n's gradient w.r.t. S (B x B) and ``gF[n]`` its
    gradient w.r.t. the fusion logits of every row (B x C). Returns ``(n, P)``.
    """
    a = params.arrays
    n = G.shape[0]
    e = params.embed_dim
    ev, et = fw.emb.video, fw.emb.text
    g_ev = np.einsum("nrc,cd->nrd", G, et)
    g_et = np.einsum("nrc,rd->ncd", G, ev)

    fin = _fusion_input(fw.emb)
    out = {
        "fusion.w": np.einsum("nrk,rd->nkd", gF, fin),
        "fusion.b": gF.sum(axis=1),
    }
    g_fin = np.einsum("nrk,kd->nrd", gF, a["fusion.w"])
    g_ev += g_fin[..., :e]
    g_et += g_fin[..., e:]

    for tower, g_emb, emb in (("video", g_ev, ev), ("text", g_et, et)):
        # through u / |u|
        radial = np.sum(g_emb * emb[None], axis=2, keepdims=True)
        g_u = (g_emb - emb[None] * radial) / fw.u_norm[tower][None, :, None]
        out[f"{tower}.w2"] = np.einsum("nrd,rh->ndh", g_u, fw.h[tower])
        out[f"{tower}.b2"] = g_u.sum(axis=1)
        g_h = np.einsum("nrd,dh->nrh", g_u, a[f"{tower}.w2"])
        g_z = g_h * (fw.z1[tower] > 0)[None]
        out[f"{tower}.w1"] = np.einsum("nrh,rx->nhx", g_z, fw.x[tower])
        out[f"{tower}.b1"] = g_z.sum(axis=1)
    flat = np.concatenate([out[name].reshape(n, -1) for name in PARAM_NAMES], axis=1)
    _check("gradient", flat)
    return flat


def per_sample_loss_and_grads(
    params: EncoderParams, batch: Batch, mu: float, tau: float = 1.0, eta: float = 1.0
):
    """Per-sample losses and their gradients w.r.t. every model parameter.

    Returns
    -------
    (LossBreakdown, np.ndarray)
        The loss breakdown and a ``(B, P)`` matrix whose row ``i`` is the
        gradient of ``L_i`` alone, in :meth:`EncoderParams.flat` order.
    """
    fw = _forward(params, batch, mu, tau, eta)
    G = _per_sample_sim_grads(fw, mu, tau)
    g = _fusion_logit_grads(fw, batch, eta)
    B = g.shape[0]
    gF = np.zeros((B,) + g.shape)
    gF[np.arange(B), np.arange(B)] = g
    return fw.breakdown, _backward(params, fw, G, gF)


def summed_loss_and_grad(
    params: EncoderParams, batch: Batch, mu: float, tau: float = 1.0, eta: float = 1.0
):
    """Sum of per-sample losses and its gradient, via a single reverse pass."""
    fw = _forward(params, batch, mu, tau, eta)
    G = _summed_sim_grad(fw, mu, tau)
    gF = _fusion_logit_grads(fw, batch, eta)
    grad = _backward(params, fw, G[None], gF[None])[0]
    return float(fw.breakdown.per_sample.sum()), grad
