import numpy as np
import pytest
from hypothesis import given, strategies as st

from wavepmp.grid import (SQRT2, DimensionError, GridConfig, MetricFactor, WaveField, field_to_nodes,
                          inverse_wave_transform, matched_metrics, nodes_to_field, power_split,
                          wave_transform)


def spd_factor(rng, n):
    A = rng.standard_normal((n, n))
    return MetricFactor(np.eye(n) + 0.3 * A / np.sqrt(n))


def test_wave_transform_symmetric_case():
    wp, wm = wave_transform(np.array([1.0]), np.array([1.0]), MetricFactor.identity(1))
    np.testing.assert_allclose(wp, [SQRT2])
    np.testing.assert_allclose(wm, [0.0], atol=1e-15)


def test_wave_transform_scalar_metric():
    wp, wm = wave_transform(np.array([1.0]), np.array([2.0]), MetricFactor.scalar(2.0, 1))
    np.testing.assert_allclose(wp, [3 / SQRT2])
    np.testing.assert_allclose(wm, [1 / SQRT2])


def test_inverse_examples():
    x, lam = inverse_wave_transform(np.array([SQRT2]), np.array([0.0]), MetricFactor.identity(1))
    np.testing.assert_allclose([x[0], lam[0]], [1.0, 1.0])
    x, lam = inverse_wave_transform(np.zeros(1), np.zeros(1), MetricFactor.identity(1))
    assert x[0] == 0 and lam[0] == 0
    x, lam = inverse_wave_transform(np.array([3 / SQRT2]), np.array([1 / SQRT2]), MetricFactor.scalar(2.0, 1))
    np.testing.assert_allclose([x[0], lam[0]], [1.0, 2.0])


def test_power_split_examples():
    wp, wm = wave_transform(np.array([2.0]), np.array([1.0]), MetricFactor.identity(1))
    assert power_split(wp, wm) == pytest.approx(2.0)
    v = np.array([0.3, -1.0])
    assert power_split(v, v) == 0.0


def test_random_roundtrip_n5(rng):
    th = spd_factor(rng, 5)
    x, lam = rng.standard_normal(5), rng.standard_normal(5)
    x2, lam2 = inverse_wave_transform(*wave_transform(x, lam, th), th)
    np.testing.assert_allclose(x2, x, rtol=0, atol=1e-12)
    np.testing.assert_allclose(lam2, lam, rtol=0, atol=1e-12)


@given(n=st.integers(1, 16), seed=st.integers(0, 2**31 - 1))
def test_roundtrip_and_power_identity(n, seed):
    rng = np.random.default_rng(seed)
    th = spd_factor(rng, n)
    x, lam = rng.standard_normal(n), rng.standard_normal(n)
    wp, wm = wave_transform(x, lam, th)
    x2, lam2 = inverse_wave_transform(wp, wm, th)
    scale = 1 + np.abs(x).max() + np.abs(lam).max()
    assert np.abs(x2 - x).max() <= 1e-12 * scale * 10
    assert np.abs(lam2 - lam).max() <= 1e-12 * scale * 10
    assert abs(power_split(wp, wm) - lam @ x) <= 1e-12 * scale**2 * 10


@given(n=st.integers(1, 8), seed=st.integers(0, 2**31 - 1))
def test_pairing_independent_of_metric(n, seed):
    rng = np.random.default_rng(seed)
    x, lam = rng.standard_normal(n), rng.standard_normal(n)
    a = power_split(*wave_transform(x, lam, spd_factor(rng, n)))
    b = power_split(*wave_transform(x, lam, spd_factor(rng, n)))
    assert abs(a - b) <= 1e-10


def test_dimension_mismatch_raises():
    with pytest.raises(DimensionError):
        wave_transform(np.zeros(2), np.zeros(3), MetricFactor.identity(2))
    with pytest.raises(DimensionError):
        wave_transform(np.zeros(2), np.zeros(2), MetricFactor.identity(3))


def test_singular_metric_raises():
    with pytest.raises(ValueError):
        MetricFactor(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_batch_columns_roundtrip(rng):
    th = spd_factor(rng, 3)
    X, L = rng.standard_normal((3, 7)), rng.standard_normal((3, 7))
    X2, L2 = inverse_wave_transform(*wave_transform(X, L, th), th)
    np.testing.assert_allclose(X2, X, atol=1e-12)
    np.testing.assert_allclose(L2, L, atol=1e-12)


def test_field_nodes_roundtrip(rng):
    widths = [2, 3, 1]
    thetas = [spd_factor(rng, n) for n in widths]
    f = WaveField([rng.standard_normal((n, 1)) for n in widths], [rng.standard_normal((n, 1)) for n in widths], 5)
    g = nodes_to_field(field_to_nodes(f, thetas), thetas, f.n)
    assert g.n == 5 and g.widths == widths
    for a, b in zip(f.w_plus + f.w_minus, g.w_plus + g.w_minus):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_zeros_and_copy():
    f = WaveField.zeros([2, 1], batch=3)
    assert f.num_nodes == 2 and f.w_plus[0].shape == (2, 3)
    g = f.copy()
    g.w_plus[0][0, 0] = 1.0
    assert f.w_plus[0][0, 0] == 0.0


def test_grid_courant_and_alpha_default():
    g = GridConfig(5, dt=2.0, dtau=1.0, c=1.0)
    assert g.nu == 0.5 and g.alpha == 1.0 and g.N == 4
    g = GridConfig.from_courant(5, 1.0, alpha=0.5)
    assert g.nu == pytest.approx(1.0) and g.alpha == 0.5
    with pytest.raises(ValueError):
        GridConfig.from_courant(5, 1.5).validate_cfl()


def test_matched_metrics_balance_scales():
    th = matched_metrics([2, 3], 16)
    np.testing.assert_allclose(th[0].apply(np.ones(2)), 0.25 * np.ones(2))
    assert all(t.is_identity for t in matched_metrics([2, 3], 1))
    with pytest.raises(ValueError):
        matched_metrics([2], 0)
