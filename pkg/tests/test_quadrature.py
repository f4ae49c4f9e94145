import numpy as np
import pytest
from scipy import integrate, stats

from ungd.activations import ActivationKind
from ungd.quadrature import gaussian_expectation, gaussian_nodes


def _scipy_expectation(fn, scale, shift, points=None):
    f = lambda v: fn(scale * v + shift) * stats.norm.pdf(v)
    val, _ = integrate.quad(f, -40, 40, points=points, limit=500, epsabs=1e-14, epsrel=1e-13)
    return val


def test_weights_integrate_density_to_one():
    for scale in (0.0, 0.3, 1.0, 10.0, 200.0):
        _, w = gaussian_nodes(scale, 0.7)
        assert abs(w.sum() - 1.0) < 1e-13


@pytest.mark.parametrize("power,expected", [(0, 1.0), (1, 0.0), (2, 1.0), (4, 3.0)])
def test_polynomial_moments(power, expected):
    got = gaussian_expectation(np.ones_like, 1.0, power=power)
    assert abs(got - expected) < 1e-12


@pytest.mark.parametrize("scale", [0.5, 1.0, 3.0, 10.0])
@pytest.mark.parametrize("shift", [-1.0, 0.0, 0.4])
@pytest.mark.parametrize("act", ["relu", "tanh", "sigmoid"])
def test_matches_adaptive_quadrature(act, scale, shift):
    a = ActivationKind.parse(act)
    fn = lambda u: a.dphi(u) ** 2
    ref = _scipy_expectation(fn, scale, shift, points=[-shift / scale])
    assert abs(gaussian_expectation(fn, scale, shift) - ref) < 1e-10


@pytest.mark.parametrize("scale", [1.0, 10.0])
def test_node_count_convergence(scale):
    fn = lambda u: np.tanh(u) ** 2
    lo = gaussian_expectation(fn, scale, 0.1, n_nodes=64)
    hi = gaussian_expectation(fn, scale, 0.1, n_nodes=128)
    assert abs(lo - hi) < 1e-10


def test_broadcasts_over_arrays():
    scales = np.array([0.5, 1.0, 2.0])
    shifts = np.array([[0.0], [1.0]])
    got = gaussian_expectation(lambda u: u * u, scales, shifts)
    assert got.shape == (2, 3)
    np.testing.assert_allclose(got, scales**2 + shifts**2, rtol=1e-12)
