import numpy as np
import pytest

from ungd import rng
from ungd.meanfield import (
    activity_fixed_point,
    activity_step,
    chi_step,
    monte_carlo,
    propagate,
    propagate_resnet,
    regime,
    resnet_activity_step,
    resnet_chi,
)
from ungd.nets import NetConfig, ResNetConfig


def _mc_mean(values):
    return values.mean(), values.std(ddof=1) / np.sqrt(values.size)


def _normals(n, seed):
    return rng.sample_normals(seed, rng.Stream.PROBE, 0, n // 1000, 1000).ravel()


def test_trivial_steps():
    assert activity_step(1.0, 1.0, 0.0, "linear") == (1.0, 1.0)
    for a in (0.3, 1.0, 7.0):
        A, tau2 = activity_step(a, 2.0, 0.0, "relu")
        assert A == pytest.approx(a, rel=1e-15) and tau2 == 2 * a
    assert chi_step(1.0, 0.7, 0.0, "linear") == 0.7
    assert chi_step(3.0, 2.0, 0.0, "relu") == 1.0


def test_tau2_exact():
    _, tau2 = activity_step(0.37, 1.3, 0.02, "tanh")
    assert tau2 == 1.3 * 0.37 + 0.02


def test_quadrature_relu_matches_closed_form():
    from ungd.quadrature import gaussian_expectation

    for tau in (0.5, 1.0, 3.0):
        q = gaussian_expectation(lambda u: np.maximum(u, 0) ** 2, tau)
        assert abs(q - tau * tau / 2) < 1e-12


def test_tanh_fixed_point(oracle):
    step = lambda A: activity_step(A, 2.0, 0.01, "tanh")[0]
    fp = activity_fixed_point(step, 1.0)
    assert fp.converged
    assert abs(fp.value - oracle["tanh_fixed_point_sw2_2_sb2_0.01"]) < 1e-8
    tau = np.sqrt(2.0 * fp.value + 0.01)
    mean, se = _mc_mean(np.tanh(tau * _normals(10**7, 1)) ** 2)
    assert abs(fp.value - mean) < 3 * se


def test_tanh_chi(oracle):
    chi = chi_step(1.0, 2.0, 0.0, "tanh")
    assert abs(chi - oracle["tanh_chi_sw2_2_tau2_2"]) < 1e-10
    mean, se = _mc_mean(2.0 / np.cosh(np.sqrt(2.0) * _normals(10**7, 2)) ** 4)
    assert abs(chi - mean) < 3 * se


def test_fixed_point_divergence_reported():
    fp = activity_fixed_point(lambda A: 2.0 * A + 1.0, 1.0, max_iter=5000)
    assert not fp.converged


def test_chi_products(oracle):
    trace = propagate(NetConfig([10] * 6, 0.81, 0.0, "linear"))
    assert trace.chi_prod[0] == pytest.approx(oracle["linear_chi_prod_0.81_5"], rel=1e-14)
    for l in range(4):
        assert trace.chi_prod[l] == pytest.approx(trace.chi_prod[l + 1] * trace.chi[l], rel=1e-14)
    crit = propagate(NetConfig([10] * 4, 2.0, 0.0, "relu"))
    assert np.all(crit.chi_prod == 1.0) and set(crit.regimes) == {"critical"}


def test_regimes():
    assert regime(1.0) == "critical" and regime(1.2) == "chaotic" and regime(0.5) == "ordered"


def test_resnet_recursion_examples():
    assert resnet_activity_step(0.8, 1.0, 0.0, 0.0, 1.0, "tanh") == 0.8
    assert resnet_activity_step(2.0, 1.0, 0.0, 1.0, 0.5, "linear") == pytest.approx(2.5)
    assert resnet_chi(1.0, 1.0, 0.0) == 1.0
    assert resnet_chi(1.0, 0.5, 0.5) == 1.0
    assert resnet_chi(0.0, 3.0, 0.9) == 0.9


def test_resnet_divergence_warning():
    with pytest.warns(RuntimeWarning):
        res = ResNetConfig(NetConfig([4] * 5, 1.0, 0.0, "linear"), 1.0, 1.0)
    with pytest.warns(RuntimeWarning):
        trace = propagate_resnet(res)
    assert trace.diverging and np.all(np.diff(trace.A) > 0)


def test_monte_carlo_relu_perturbation():
    cfg = NetConfig([1000] * 6, 2.0, 0.0, "relu", 3)
    mc = monte_carlo(cfg, n_seeds=10)
    assert abs(np.prod(mc.chi) - propagate(cfg).chi_prod[0]) < 0.1


def test_monte_carlo_is_reproducible():
    cfg = NetConfig([50] * 3, 1.5, 0.1, "tanh", 4)
    a, b = monte_carlo(cfg, n_seeds=3), monte_carlo(cfg, n_seeds=3)
    assert np.array_equal(a.A_per_seed, b.A_per_seed)


def test_negative_inputs_rejected():
    with pytest.raises(ValueError):
        activity_step(-1.0, 1.0, 0.0, "tanh")


def test_resnet_chi_exact_skip_matches_perturbations():
    res = ResNetConfig(NetConfig([1000] * 4, 1.0, 0.0, "linear", 1), 1.0, 0.5)
    mc = monte_carlo(res.base, n_seeds=10, resnet=res)
    exact = propagate_resnet(res, exact_skip=True)
    assert resnet_chi(1.0, 1.0, 0.5, exact_skip=True) == 1.25
    np.testing.assert_allclose(mc.chi, exact.chi, rtol=0.05)
