import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from metamargin.numerics import NonFiniteError, make_rng
from metamargin.weighting import (
    WeightingScheme,
    WeightNetParams,
    baseline_weight,
    l2rw_weights,
    standardize,
    weightnet_forward,
    weightnet_grad,
    weights,
    weights_jacobian,
)


def random_theta(rng, H=100, scale=0.5):
    return WeightNetParams(
        w1=rng.normal(size=(H, 1)) * scale,
        b1=rng.normal(size=H) * scale,
        w2=rng.normal(size=(1, H)) * scale,
        b2=float(rng.normal() * scale),
    )


def forward_oracle(theta, loss):
    z = theta.b2
    for h in range(theta.hidden):
        a = theta.w1[h, 0] * loss + theta.b1[h]
        z += theta.w2[0, h] * (a if a > 0 else 0.0)
    return 1.0 / (1.0 + math.exp(-z))


def test_forward_examples():
    assert weightnet_forward(WeightNetParams.zeros(100), 3.7) == 0.5
    rng = make_rng(0)
    theta = random_theta(rng)
    assert weightnet_forward(theta, 1.3) == pytest.approx(forward_oracle(theta, 1.3), rel=1e-14)
    flat = WeightNetParams(np.zeros((100, 1)), theta.b1, theta.w2, theta.b2)
    assert weightnet_forward(flat, 0.1) == weightnet_forward(flat, 9.0)


def test_init_gives_half_everywhere():
    theta = WeightNetParams.init(make_rng(4), 100)
    bound = 1 / math.sqrt(100)
    assert np.all(np.abs(theta.w1) <= bound) and np.all(np.abs(theta.b1) <= bound)
    np.testing.assert_array_equal(weights(theta, np.linspace(0, 10, 7)), 0.5)


def test_forward_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        weightnet_forward(WeightNetParams.zeros(3), math.nan)


@given(st.floats(0, 1e3), st.integers(0, 2**32 - 1))
def test_forward_strictly_inside_unit_interval(loss, seed):
    theta = random_theta(make_rng(seed), H=8, scale=1.0)
    pre = np.maximum(theta.w1[:, 0] * loss + theta.b1, 0.0) @ theta.w2[0] + theta.b2
    # float64 sigmoid rounds to exactly 1 beyond a logit of ~36.7
    assume(abs(pre) < 36)
    assert 0.0 < weightnet_forward(theta, loss) < 1.0


def test_forward_bounded_for_moderate_inputs():
    rng = make_rng(9)
    for _ in range(200):
        theta = random_theta(rng, H=20)
        w = weightnet_forward(theta, float(rng.uniform(0, 10)))
        assert 0.0 < w < 1.0


def _fd_grad(theta, loss, h=1e-6):
    v = theta.flat()
    out = np.zeros_like(v)
    for i in range(v.size):
        up, dn = v.copy(), v.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (
            forward_oracle(WeightNetParams.from_flat(up, theta.hidden), loss)
            - forward_oracle(WeightNetParams.from_flat(dn, theta.hidden), loss)
        ) / (2 * h)
    return out


def test_grad_matches_fd_away_from_kinks():
    rng = make_rng(1)
    checked = 0
    while checked < 1000:
        theta = random_theta(rng, H=6)
        loss = float(rng.uniform(0, 5))
        pre = theta.w1[:, 0] * loss + theta.b1
        if np.min(np.abs(pre)) <= 1e-3:
            continue
        checked += 1
        g = weightnet_grad(theta, loss).flat()
        fd = _fd_grad(theta, loss)
        assert np.all(np.abs(g - fd) <= 1e-6 * np.abs(fd) + 1e-10)


def test_grad_with_zero_input_weights():
    rng = make_rng(2)
    theta = random_theta(rng, H=10)
    theta = WeightNetParams(np.zeros((10, 1)), theta.b1, theta.w2, theta.b2)
    g = weightnet_grad(theta, 2.0)
    w = weightnet_forward(theta, 2.0)
    mask = theta.b1 > 0
    np.testing.assert_allclose(g.w1[:, 0], w * (1 - w) * theta.w2[0] * mask * 2.0, rtol=1e-13)
    np.testing.assert_allclose(g.flat(), _fd_grad(theta, 2.0), rtol=1e-6, atol=1e-10)


def test_grad_b2_is_sigmoid_slope():
    theta = WeightNetParams.init(make_rng(3), 100)
    g = weightnet_grad(theta, 1.0)
    assert g.b2 == 0.25


def test_jacobian_rows_match_single_grads():
    rng = make_rng(5)
    theta = random_theta(rng, H=12)
    losses = rng.uniform(0, 4, size=7)
    J = weights_jacobian(theta, losses)
    for j, l in enumerate(losses):
        np.testing.assert_allclose(J[j], weightnet_grad(theta, l).flat(), rtol=1e-14, atol=1e-300)


def test_flat_roundtrip_and_json():
    theta = random_theta(make_rng(6), H=9)
    assert np.array_equal(WeightNetParams.from_flat(theta.flat(), 9).flat(), theta.flat())
    assert np.array_equal(WeightNetParams.from_dict(theta.to_dict()).flat(), theta.flat())
    assert theta.size == 28
    with pytest.raises(ValueError):
        WeightNetParams.from_flat(np.zeros(5), 9)


def test_standardize():
    x = standardize([1.0, 2.0, 3.0, 4.0])
    assert x.mean() == pytest.approx(0, abs=1e-15) and x.std() == pytest.approx(1)
    np.testing.assert_array_equal(standardize([2.0, 2.0]), [0.0, 0.0])


# -- baselines --------------------------------------------------------------


def test_baseline_examples():
    assert baseline_weight(WeightingScheme("focal", gamma=2.0), 0.0) == 0.0
    assert baseline_weight(WeightingScheme("spl", threshold=1.5), 1.5) == 0.0
    assert baseline_weight(WeightingScheme("spl", threshold=1.5), 1.49) == 1.0
    assert baseline_weight(WeightingScheme("focal", gamma=1.0), math.log(2)) == pytest.approx(0.5, abs=1e-16)
    assert baseline_weight(WeightingScheme("uniform"), 12.0) == 1.0


def test_unknown_variant():
    with pytest.raises(ValueError):
        WeightingScheme("boost")
    with pytest.raises(ValueError):
        baseline_weight(WeightingScheme("mlp"), 1.0)


@given(st.lists(st.floats(0, 50), min_size=2, max_size=20), st.floats(0, 4), st.floats(0.01, 10))
def test_baseline_ranges(losses, gamma, thr):
    focal = WeightingScheme("focal", gamma=gamma)
    spl = WeightingScheme("spl", threshold=thr)
    ls = sorted(losses)
    fw = [baseline_weight(focal, l) for l in ls]
    assert all(0.0 <= w <= 1.0 for w in fw)
    assert all(b >= a for a, b in zip(fw, fw[1:]))
    assert {baseline_weight(spl, l) for l in ls} <= {0.0, 1.0}


def test_l2rw_examples():
    g = np.array([1.0, 0.0])
    assert l2rw_weights([[2.0, 0.0]], g).tolist() == [1.0]
    np.testing.assert_array_equal(l2rw_weights([[-1.0, 0.0], [-2.0, 1.0]], g), [0.5, 0.5])
    np.testing.assert_allclose(l2rw_weights([[3.0, 5.0], [1.0, -2.0]], g), [0.75, 0.25])
    with pytest.raises(ValueError):
        l2rw_weights([[1.0, 2.0, 3.0]], g)


@settings(max_examples=50)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_l2rw_sums_to_one(B, seed):
    rng = make_rng(seed)
    G = rng.normal(size=(B, 5))
    g = rng.normal(size=5)
    w = l2rw_weights(G, g)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(w >= 0)
