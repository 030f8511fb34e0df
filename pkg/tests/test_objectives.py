import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from metamargin.numerics import make_rng, safe_arccos
from metamargin.objectives import (
    HALF_PI,
    LITERAL_SETTINGS_SCHEDULE,
    MarginSchedule,
    angular_loss_grad,
    angular_margin_loss,
    combined_loss,
    contrastive_loss,
    cross_entropy,
    gradient_ratio,
    margin_at,
)
from oracles import contrastive_row_mp


def random_angles(rng, B):
    return rng.uniform(0.0, math.pi, size=(B, B))


# -- schedule ---------------------------------------------------------------


def test_margin_examples():
    s = MarginSchedule(2.0, 10.0, 0.1)
    assert margin_at(s, 0) == pytest.approx(2 / 11, abs=1e-15)
    assert margin_at(s, 1e4) == pytest.approx(0.2, abs=1e-15)
    flat = MarginSchedule(2.0, 10.0, 0.0)
    assert all(margin_at(flat, k) == 2 / 11 for k in (0, 5, 500))


def test_default_schedule_rises_to_point_two():
    assert MarginSchedule() == MarginSchedule(2.0, 10.0, 0.1)
    mus = [margin_at(MarginSchedule(), k) for k in range(0, 300, 7)]
    assert all(b >= a for a, b in zip(mus, mus[1:]))
    assert mus[-1] <= 0.2


def test_literal_settings_schedule_decays():
    mus = [margin_at(LITERAL_SETTINGS_SCHEDULE, k) for k in (0, 10, 100)]
    assert mus[0] > mus[1] > mus[2] >= 0


@given(st.floats(0, 1.5), st.floats(0.1, 50))
def test_constant_schedule(mu, a1):
    assume(mu * (a1 + 1) / a1 < HALF_PI)
    s = MarginSchedule.constant(mu, a1)
    assert margin_at(s, 0) == pytest.approx(mu, rel=1e-14, abs=1e-16)
    assert margin_at(s, 1000) == margin_at(s, 0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        MarginSchedule(1.0, 0.0, 0.1)
    with pytest.raises(ValueError):
        MarginSchedule(20.0, 10.0, 0.1)
    with pytest.raises(ValueError):
        margin_at(MarginSchedule(), -1)


# -- contrastive ------------------------------------------------------------


def test_contrastive_trivial_cases():
    assert contrastive_loss(np.array([[0.3]]))[0] == 0.0
    np.testing.assert_allclose(contrastive_loss(np.full((4, 4), 0.2)), math.log(4), atol=1e-15)
    with pytest.raises(ValueError):
        contrastive_loss(np.eye(2), tau=0.0)


def test_contrastive_matches_mp_oracle():
    rng = make_rng(5)
    S = rng.uniform(-1, 1, size=(8, 8))
    for direction, M in (("v2t", S), ("t2v", S.T)):
        got = contrastive_loss(S, 1.0, direction)
        for i in range(8):
            row = [mpmath.mpf(float(v)) for v in M[i]]
            ref = mpmath.log(mpmath.fsum(mpmath.exp(v) for v in row)) - row[i]
            assert abs(got[i] - float(ref)) <= 1e-14


@settings(max_examples=40)
@given(st.integers(2, 9), st.integers(0, 2**32 - 1), st.sampled_from([0.05, 0.5, 1.0]), st.floats(0, 1.5))
def test_losses_nonnegative_and_permutation_equivariant(B, seed, tau, mu):
    rng = make_rng(seed)
    lam = random_angles(rng, B)
    perm = rng.permutation(B)
    for d in ("v2t", "t2v"):
        a = angular_margin_loss(lam, mu, tau, d)
        assert np.all(a >= 0)
        np.testing.assert_allclose(angular_margin_loss(lam[perm][:, perm], mu, tau, d), a[perm], rtol=1e-12, atol=1e-12)
        c = contrastive_loss(np.cos(lam), tau, d)
        assert np.all(c >= 0)


# -- angular margin ---------------------------------------------------------


def test_angular_examples():
    lam = np.array([[0.1, 1.0], [1.2, 0.4]])
    # clamp active: positive logit is exactly 1/tau
    loss = angular_margin_loss(lam, 0.2, 0.5, "v2t")[0]
    assert loss == pytest.approx(math.log(math.exp(2.0) + math.exp(math.cos(1.0) / 0.5)) - 2.0, abs=1e-14)
    lam2 = np.array([[2.0, 1.0], [1.2, 0.4]])
    assert angular_margin_loss(lam2, 0.3, 1.0)[0] == contrastive_loss(np.cos(lam2), 1.0)[0]


def test_angular_mu_zero_is_contrastive_bitwise():
    rng = make_rng(0)
    for B in (2, 5, 9):
        lam = random_angles(rng, B)
        for d in ("v2t", "t2v"):
            assert np.array_equal(angular_margin_loss(lam, 0.0, 0.7, d), contrastive_loss(np.cos(lam), 0.7, d))


def test_angular_boundary_takes_margin_branch():
    lam = np.array([[HALF_PI, 1.0], [1.0, 1.0]])
    with_margin = angular_margin_loss(lam, 0.3)[0]
    assert with_margin < contrastive_loss(np.cos(lam))[0]


def test_mu_out_of_range():
    with pytest.raises(ValueError):
        angular_margin_loss(np.eye(2), HALF_PI)
    with pytest.raises(ValueError):
        angular_margin_loss(np.eye(2), -0.1)


def test_angular_grad_examples():
    rng = make_rng(3)
    lam = random_angles(rng, 5)
    lam[1, 1] = 0.15
    assert angular_loss_grad(lam, 0.2, 1.0, 1) == 0.0
    lam[1, 1] = 0.9
    neg = [math.exp(math.cos(lam[1, j])) for j in range(5) if j != 1]
    expected = math.sin(0.9) * sum(neg) / (math.exp(math.cos(0.9)) + sum(neg))
    assert angular_loss_grad(lam, 0.0, 1.0, 1) == pytest.approx(expected, rel=1e-14)


@settings(max_examples=200)
@given(
    st.integers(2, 12),
    st.integers(0, 2**32 - 1),
    st.sampled_from([0.05, 0.5, 1.0]),
    st.floats(0.0, 1.5),
    st.sampled_from(["v2t", "t2v"]),
)
def test_angular_grad_matches_mp_fd(B, seed, tau, mu, direction):
    rng = make_rng(seed)
    lam = random_angles(rng, B)
    i = int(rng.integers(B))
    lii = float(rng.uniform(1e-3, math.pi))
    assume(abs(lii - mu) > 1e-6 and abs(lii - HALF_PI) > 1e-6)
    lam[i, i] = lii
    row = list(lam[i] if direction == "v2t" else lam[:, i])
    with mpmath.workdps(40):
        h = mpmath.mpf("1e-15")
        x = mpmath.mpf(lii)

        def f(v):
            r = [mpmath.mpf(float(a)) for a in row]
            r[i] = v
            return contrastive_row_mp(r, i, mpmath.mpf(mu), tau)

        fd = float((f(x + h) - f(x - h)) / (2 * h))
    got = angular_loss_grad(lam, mu, tau, i, direction)
    if fd == 0.0:
        assert got == 0.0
    else:
        assert abs(got - fd) <= 1e-9 * abs(fd)


# -- gradient ratio ---------------------------------------------------------


def test_ratio_examples():
    rng = make_rng(8)
    lam = random_angles(rng, 6)
    lam[2, 2] = 1.1
    assert gradient_ratio(lam, 0.0, 0.5, 2) == 1.0
    lam[2, 2] = 0.2
    assert gradient_ratio(lam, 0.3, 0.5, 2) == 0.0
    lam[2, 2] = 0.0
    with pytest.raises(ValueError):
        gradient_ratio(lam, 0.1, 0.5, 2)
    lam[2, 2] = 2.0
    with pytest.raises(ValueError):
        gradient_ratio(lam, 0.1, 0.5, 2)


@settings(max_examples=300)
@given(st.integers(2, 16), st.integers(0, 2**32 - 1), st.sampled_from([0.05, 0.5, 1.0]), st.floats(0.0, 1.0))
def test_ratio_is_quotient_of_derivatives(B, seed, tau, frac):
    rng = make_rng(seed)
    lam = random_angles(rng, B)
    i = int(rng.integers(B))
    lam[i, i] = float(rng.uniform(1e-3, HALF_PI))
    mu = frac * lam[i, i] * 0.999
    r = gradient_ratio(lam, mu, tau, i)
    plain = angular_loss_grad(lam, 0.0, tau, i)
    margined = angular_loss_grad(lam, mu, tau, i)
    assert 0.0 <= r <= 1.0 + 1e-12
    if plain > 1e-250:
        assert r == pytest.approx(margined / plain, rel=1e-10)


# -- cross-entropy and combined --------------------------------------------


def test_cross_entropy_examples():
    assert cross_entropy(np.log(np.full(5, 0.2)), 3) == pytest.approx(math.log(5), abs=1e-15)
    assert cross_entropy(np.array([0.0, -np.inf]), 0) == 0.0
    assert abs(cross_entropy(np.log([0.25, 0.75]), 0) - math.log(4)) <= 1e-12
    with pytest.raises(ValueError):
        cross_entropy(np.log([0.3, 0.3]), 0)


def test_combined_without_labels_is_symmetric_contrastive():
    rng = make_rng(11)
    S = rng.uniform(-1, 1, size=(6, 6))
    out = combined_loss(S, sched=MarginSchedule.constant(0.0))
    lam = safe_arccos(S)
    expected = contrastive_loss(np.cos(lam), 1.0, "v2t") + contrastive_loss(np.cos(lam), 1.0, "t2v")
    np.testing.assert_array_equal(out.per_sample, expected)
    assert np.all(out.ce == 0)


def test_combined_components():
    rng = make_rng(12)
    B, C = 5, 4
    S = rng.uniform(-1, 1, size=(B, B))
    logits = rng.normal(size=(B, C))
    llh = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    labels = [0, -1, 3, None, 1]
    sched = MarginSchedule(2.0, 10.0, 0.1)
    out = combined_loss(S, labels, llh, sched, k=7, tau=0.5, eta=0.8)
    mu = 2.0 / (10.0 + math.exp(-0.7))
    lam = np.arccos(np.clip(S, -1 + 1e-12, 1 - 1e-12))
    for i in range(B):
        for d, M in (("v2t", lam), ("t2v", lam.T)):
            logit = [math.cos(M[i, j]) / 0.5 for j in range(B)]
            if M[i, i] <= HALF_PI:
                logit[i] = math.cos(max(M[i, i] - mu, 0.0)) / 0.5
            ref = math.log(sum(math.exp(v) for v in logit)) - logit[i]
            assert getattr(out, d)[i] == pytest.approx(ref, abs=1e-12)
        ce = -llh[i, labels[i]] if labels[i] is not None and labels[i] >= 0 else 0.0
        assert out.ce[i] == pytest.approx(ce, abs=1e-12)
        assert out.per_sample[i] == pytest.approx(out.v2t[i] + out.t2v[i] + 0.8 * ce, abs=1e-12)
    no_ce = combined_loss(S, labels, llh, sched, k=7, tau=0.5, eta=0.0)
    np.testing.assert_array_equal(no_ce.per_sample, no_ce.v2t + no_ce.t2v)


def test_labels_without_fusion_logits():
    with pytest.raises(ValueError):
        combined_loss(np.eye(3), labels=[0, 1, 2])
