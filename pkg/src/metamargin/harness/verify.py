"""Self-check suites run by ``metamargin verify``.

Each suite compares the package against a second computation that shares
no code with it: arbitrary-precision finite differences, the alternative
meta-update route, or exhaustive loops.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import mpmath
import numpy as np

from .. import keyframes as kf
from ..encoders import Batch, EncoderParams, kink_distance, per_sample_loss_and_grads, sample_losses
from ..metaopt import TrainConfig, apply_coefficients, batch_weights, meta_update_derived, meta_update_direct
from ..numerics import make_rng
from ..objectives import HALF_PI, MarginSchedule, angular_loss_grad, gradient_ratio
from ..weighting import WeightNetParams

SUITES = ("theorem1", "metagrad", "density")


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.suite}.{self.name}: {self.detail}"


# -- theorem1 ---------------------------------------------------------------


def _row_loss_mp(lii, neg, mu, tau):
    half_pi = mpmath.pi / 2
    if lii <= half_pi:
        pos = mpmath.cos(lii - mu if lii > mu else mpmath.mpf(0)) / tau
    else:
        pos = mpmath.cos(lii) / tau
    return mpmath.log(mpmath.exp(pos) + mpmath.fsum(mpmath.exp(t) for t in neg)) - pos


def random_margin_instance(rng):
    """One draw: angle matrix, row index, margin, temperature, direction."""
    B = int(rng.integers(2, 17))
    tau = float(rng.choice([0.05, 0.5, 1.0]))
    lam = rng.uniform(0.0, math.pi, size=(B, B))
    i = int(rng.integers(B))
    lam[i, i] = HALF_PI * (1.0 - rng.random())  # (0, pi/2]
    mu = HALF_PI * rng.random()  # [0, pi/2)
    direction = "v2t" if rng.random() < 0.5 else "t2v"
    return lam, i, mu, tau, direction


def check_theorem1(n: int = 10_000, seed: int = 0, rel_tol: float = 1e-6, kink_gap: float = 1e-9):
    rng = make_rng(seed)
    worst_ratio = 0.0
    worst_rel = 0.0
    skipped = 0
    ratio_bad = fd_bad = 0
    h = mpmath.mpf("1e-12")
    with mpmath.workdps(40):
        for _ in range(n):
            lam, i, mu, tau, direction = random_margin_instance(rng)
            r = gradient_ratio(lam, mu, tau, i, direction)
            worst_ratio = max(worst_ratio, r)
            ratio_bad += not r <= 1.0 + 1e-12
            lii = lam[i, i]
            if abs(lii - mu) < kink_gap or abs(lii - HALF_PI) < kink_gap:
                skipped += 1
                continue
            others = lam[i] if direction == "v2t" else lam[:, i]
            neg = [mpmath.cos(mpmath.mpf(float(v))) / tau for j, v in enumerate(others) if j != i]
            x = mpmath.mpf(float(lii))
            mmu = mpmath.mpf(mu)
            fd = (_row_loss_mp(x + h, neg, mmu, tau) - _row_loss_mp(x - h, neg, mmu, tau)) / (2 * h)
            closed = angular_loss_grad(lam, mu, tau, i, direction)
            if fd == 0:
                rel = 0.0 if closed == 0.0 else math.inf
            else:
                rel = float(abs((closed - fd) / fd))
            worst_rel = max(worst_rel, rel)
            fd_bad += not rel <= rel_tol
    return [
        CheckResult("theorem1", "ratio_bound", ratio_bad == 0, f"{n} draws, max ratio {worst_ratio:.17g}"),
        CheckResult(
            "theorem1",
            "derivative_vs_fd",
            fd_bad == 0,
            f"{n - skipped} draws ({skipped} within {kink_gap:g} of a kink skipped), max rel err {worst_rel:.3g}",
        ),
    ]


# -- metagrad ---------------------------------------------------------------


def random_model_instance(rng, max_params: int = 2000, max_batch: int = 8, labeled: bool = True):
    """Random encoder, weight net, batch and meta batch of modest size."""
    while True:
        d_video, d_text = (int(v) for v in rng.integers(2, 9, size=2))
        hidden, embed = (int(v) for v in rng.integers(2, 13, size=2))
        C = int(rng.integers(2, 6))
        Theta = EncoderParams.init(rng, d_video, d_text, C, hidden=hidden, embed=embed)
        if Theta.size <= max_params:
            break
    B, M = (int(v) for v in rng.integers(2, max_batch + 1, size=2))

    def batch(n):
        labels = np.where(rng.random(n) < 0.6, rng.integers(C, size=n), -1) if labeled else None
        return Batch(rng.normal(size=(n, d_video)), rng.normal(size=(n, d_text)), labels)

    theta = WeightNetParams.init(rng, 100)
    theta = WeightNetParams.from_flat(theta.flat() + 0.3 * rng.normal(size=theta.size), 100)
    return Theta, theta, batch(B), batch(M)


def random_train_config(rng, **overrides) -> TrainConfig:
    kw = dict(
        alpha=float(rng.uniform(0.05, 1.0)),
        beta=float(rng.uniform(0.05, 1.0)),
        tau=float(rng.choice([0.1, 0.5, 1.0])),
        eta=float(rng.uniform(0.0, 2.0)),
        sched=MarginSchedule.constant(float(rng.uniform(0.0, 0.5))),
        normalize_weights=bool(rng.random() < 0.5),
        standardize_losses=bool(rng.random() < 0.5),
    )
    kw.update(overrides)
    return TrainConfig(**kw)


def sign_law_instance(seed: int, alpha_beta: float = 1e-4):
    """Two samples, train gradients ``g`` and ``-g``, meta gradient ``g``.

    Returns weights before and after one coefficient step.
    """
    rng = make_rng(seed)
    cfg = TrainConfig(alpha=math.sqrt(alpha_beta), beta=math.sqrt(alpha_beta), normalize_weights=True, standardize_losses=True)
    theta = WeightNetParams.init(rng, cfg.weightnet_hidden)
    losses = rng.uniform(0.1, 8.0, size=2)
    g = rng.normal(size=50)
    G = np.array([[g @ g, g @ -g]])
    before, _ = batch_weights(theta, losses, cfg)
    after, _ = batch_weights(apply_coefficients(theta, losses, G, cfg), losses, cfg)
    return before, after


def check_metagrad(n_equiv: int = 100, n_sign: int = 50, n_fd: int = 20, seed: int = 0):
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_equiv):
        Theta, theta, batch, meta = random_model_instance(rng)
        cfg = random_train_config(rng)
        a = meta_update_direct(theta, Theta, batch, meta, 0, cfg).flat()
        b = meta_update_derived(theta, Theta, batch, meta, 0, cfg).flat()
        worst = max(worst, float(np.max(np.abs(a - b))))
    out = [CheckResult("metagrad", "direct_vs_derived", worst <= 1e-8, f"{n_equiv} instances, max |diff| {worst:.3g}")]

    sign_ok = 0
    for s in range(n_sign):
        before, after = sign_law_instance(s)
        sign_ok += after[0] > before[0] and after[1] < before[1]
    out.append(CheckResult("metagrad", "sign_law", sign_ok == n_sign, f"{sign_ok}/{n_sign} seeds"))

    worst_fd, draws = 0.0, 0
    h = 1e-5  # float64 round-off dominates below this
    while draws < n_fd:
        Theta, _, batch, _ = random_model_instance(rng, max_params=600, max_batch=5)
        mu, tau, eta = float(rng.uniform(0, 0.5)), float(rng.choice([0.5, 1.0])), 1.0
        if kink_distance(Theta, batch, mu) < 1e-3:
            continue
        draws += 1
        _, grads = per_sample_loss_and_grads(Theta, batch, mu, tau, eta)
        base = Theta.flat()
        coords = rng.choice(base.size, size=min(40, base.size), replace=False)
        for c in coords:
            up, dn = base.copy(), base.copy()
            up[c] += h
            dn[c] -= h
            lu = sample_losses(Theta.with_flat(up), batch, mu, tau, eta).per_sample
            ld = sample_losses(Theta.with_flat(dn), batch, mu, tau, eta).per_sample
            fd = (lu - ld) / (2 * h)
            err = np.abs(grads[:, c] - fd) / (np.abs(fd) + 1e-4)
            worst_fd = max(worst_fd, float(err.max()))
    out.append(CheckResult("metagrad", "per_sample_vs_fd", worst_fd <= 1e-5, f"{n_fd} draws, max scaled err {worst_fd:.3g}"))
    return out


# -- density ----------------------------------------------------------------


def _brute_keyframes(X, K, Q):
    N, D = X.shape
    rows = X.tolist()
    dist = [[0.0] * N for _ in range(N)]
    for a in range(N):
        for b in range(N):
            s = 0.0
            for k in range(D):
                diff = rows[a][k] - rows[b][k]
                s += diff * diff
            dist[a][b] = s
    d = []
    for j in range(N):
        near = sorted((dist[j][l], l) for l in range(N) if l != j)[:K]
        s = 0.0
        for v, _ in near:
            s += v
        d.append(math.exp(-(s / K)))
    gamma = []
    for j in range(N):
        denser = [dist[l][j] for l in range(N) if d[l] > d[j]]
        gamma.append(min(denser) if denser else max(dist[l][j] for l in range(N)))
    score = [a * b for a, b in zip(d, gamma)]
    top = sorted(range(N), key=lambda j: (-score[j], j))[:Q]
    return d, gamma, top


def planted_instance(rng, Q: int = 12, per_cluster: int = 10, n_noise: int = 30, dim: int = 8):
    """Tight clusters at random centers in a box plus uniform background frames."""
    centers = rng.uniform(0.0, 10.0, size=(Q, dim))
    pts = centers[:, None, :] + 0.1 * rng.normal(size=(Q, per_cluster, dim))
    noise = rng.uniform(0.0, 10.0, size=(n_noise, dim))
    X = np.vstack([pts.reshape(-1, dim), noise])
    owner = np.concatenate([np.repeat(np.arange(Q), per_cluster), np.full(n_noise, -1)])
    perm = rng.permutation(len(X))
    return X[perm], owner[perm]


def planted_recovered(X, owner, K: int = 6, Q: int = 12) -> bool:
    sel = kf.select_keyframes(X, K, Q).selected
    hit = sorted(int(owner[j]) for j in sel)
    return hit == list(range(Q))


def check_density(n: int = 100, n_planted: int = 200, seed: int = 0, K: int = 6, Q: int = 12):
    rng = make_rng(seed)
    mismatches = 0
    for t in range(n):
        N = int(rng.integers(Q, 61))
        X = rng.normal(size=(N, int(rng.integers(1, 6))))
        if t % 4 == 0:
            X = np.round(X, 1)
        sel = kf.select_keyframes(X, K, Q)
        d, gamma, top = _brute_keyframes(X, K, Q)
        same = sel.density.tolist() == d and sel.distance_index.tolist() == gamma and list(sel.selected) == top
        mismatches += not same
    out = [CheckResult("density", "bruteforce_exact", mismatches == 0, f"{n - mismatches}/{n} instances identical")]

    inv_bad = 0
    for _ in range(20):
        X = rng.normal(size=(int(rng.integers(Q, 40)), 3))
        base = kf.select_keyframes(X, K, Q)
        shifted = kf.select_keyframes(X + rng.normal(size=3), K, Q)
        perm = rng.permutation(len(X))
        permuted = kf.select_keyframes(X[perm], K, Q)
        inv_bad += set(shifted.selected) != set(base.selected)
        inv_bad += sorted(perm[list(permuted.selected)].tolist()) != sorted(base.selected)
    out.append(CheckResult("density", "invariances", inv_bad == 0, f"{inv_bad} translation/permutation violations"))

    ok = sum(planted_recovered(*planted_instance(rng)) for _ in range(n_planted))
    out.append(CheckResult("density", "planted_clusters", ok >= 0.95 * n_planted, f"{ok}/{n_planted} trials one frame per cluster"))
    return out


def run_suite(name: str = "all") -> list:
    if name == "all":
        names = SUITES
    elif name in SUITES:
        names = (name,)
    else:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")
    runners = {"theorem1": check_theorem1, "metagrad": check_metagrad, "density": check_density}
    results = []
    for s in names:
        t0 = time.perf_counter()
        res = runners[s]()
        for r in res:
            r.detail += f" [{time.perf_counter() - t0:.1f}s suite]" if r is res[-1] else ""
        results.extend(res)
    return results
