"""Mean-field recursions for activity, pre-activation variance and the
enlargement factor chi, plus Monte-Carlo counterparts measured on sampled nets.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import rng
from .activations import ActivationKind
from .nets import NetConfig, ResNetConfig, forward, forward_resnet, init_mixers, init_random
from .quadrature import DEFAULT_NODES, gaussian_expectation

FIXED_POINT_TOL = 1e-9
FIXED_POINT_MAX_ITER = 10_000


def _check_nonneg(**values):
    for name, v in values.items():
        if not v >= 0:
            raise ValueError(f"{name} must be >= 0, got {v}")


def pre_activation_variance(A_prev, sigma_w2, sigma_b2):
    return sigma_w2 * A_prev + sigma_b2


def activity_step(A_prev, sigma_w2, sigma_b2, act, n_nodes=DEFAULT_NODES):
    """One layer of the activity map; returns ``(A_next, tau2)``."""
    _check_nonneg(A_prev=A_prev, sigma_w2=sigma_w2, sigma_b2=sigma_b2)
    act = ActivationKind.parse(act)
    tau2 = pre_activation_variance(A_prev, sigma_w2, sigma_b2)
    if act is ActivationKind.LINEAR:
        return tau2, tau2
    if act is ActivationKind.RELU:
        return 0.5 * tau2, tau2
    A = float(gaussian_expectation(lambda u: act.phi(u) ** 2, np.sqrt(tau2), n_nodes=n_nodes))
    return A, tau2


def chi_step(A_prev, sigma_w2, sigma_b2, act, n_nodes=DEFAULT_NODES):
    """Enlargement factor sigma_w2 * E[phi'(tau v)^2] of one layer."""
    _check_nonneg(A_prev=A_prev, sigma_w2=sigma_w2, sigma_b2=sigma_b2)
    act = ActivationKind.parse(act)
    tau2 = pre_activation_variance(A_prev, sigma_w2, sigma_b2)
    if act is ActivationKind.LINEAR:
        return float(sigma_w2)
    if act is ActivationKind.RELU:
        # phi'(0) = 0, so a degenerate tau = 0 carries no perturbation
        return 0.5 * sigma_w2 if tau2 > 0 else 0.0
    return sigma_w2 * float(gaussian_expectation(lambda u: act.dphi(u) ** 2, np.sqrt(tau2), n_nodes=n_nodes))


def resnet_activity_step(A_prev, sigma_w2, sigma_b2, sigma_v2, alpha, act, n_nodes=DEFAULT_NODES):
    """``sigma_v2 * Abar + alpha^2 * A_prev`` with ``Abar`` the plain-layer activity."""
    _check_nonneg(sigma_v2=sigma_v2, alpha=alpha)
    abar, _ = activity_step(A_prev, sigma_w2, sigma_b2, act, n_nodes)
    return sigma_v2 * abar + alpha**2 * A_prev


def resnet_chi(chi_base, sigma_v2, alpha, exact_skip=False):
    """Residual enlargement factor ``sigma_v2 chi + alpha``.

    The skip path scales a perturbation by alpha, so its squared length
    grows by alpha^2; ``exact_skip=True`` returns ``sigma_v2 chi + alpha^2``,
    which is what forward-propagated perturbations measure.
    """
    _check_nonneg(chi_base=chi_base, sigma_v2=sigma_v2, alpha=alpha)
    return sigma_v2 * chi_base + (alpha**2 if exact_skip else alpha)


@dataclass
class FixedPoint:
    value: float
    iterations: int
    converged: bool


def activity_fixed_point(step, A0=1.0, tol=FIXED_POINT_TOL, max_iter=FIXED_POINT_MAX_ITER):
    """Iterate ``A <- step(A)`` until ``|dA| < tol``.

    Non-convergence (including divergence to infinity) returns the last
    finite iterate with ``converged=False``.
    """
    A = float(A0)
    for it in range(1, max_iter + 1):
        nxt = float(step(A))
        if not np.isfinite(nxt):
            return FixedPoint(A, it, False)
        if abs(nxt - A) < tol:
            return FixedPoint(nxt, it, True)
        A = nxt
    return FixedPoint(A, max_iter, False)


def regime(chi, atol=1e-9):
    if abs(chi - 1.0) <= atol:
        return "critical"
    return "chaotic" if chi > 1.0 else "ordered"


@dataclass
class MeanFieldTrace:
    """Per-layer theory values.

    ``A[l]`` for ``l = 0 .. L``; ``tau2``, ``chi``, ``chi_prod`` and
    ``regimes`` are indexed ``l - 1`` for ``l = 1 .. L``.  ``chi_prod[l-1]``
    is chi^L_l = chi^L chi^{L-1} ... chi^l.
    """

    A: np.ndarray
    tau2: np.ndarray
    chi: np.ndarray
    chi_prod: np.ndarray
    regimes: list
    diverging: bool = False

    @property
    def n_layers(self):
        return len(self.tau2)


def _chi_products(chi):
    # chi_prod[k] = prod(chi[k:]), built from the top so it telescopes exactly
    out = np.empty_like(chi)
    acc = 1.0
    for k in range(len(chi) - 1, -1, -1):
        acc = acc * chi[k]
        out[k] = acc
    return out


def propagate(config: NetConfig, A0=1.0, n_nodes=DEFAULT_NODES) -> MeanFieldTrace:
    _check_nonneg(A0=A0)
    L = config.n_layers
    A = np.empty(L + 1)
    tau2 = np.empty(L)
    chi = np.empty(L)
    A[0] = A0
    for l in range(1, L + 1):
        sw, sb = config.sigma_w2[l - 1], config.sigma_b2[l - 1]
        chi[l - 1] = chi_step(A[l - 1], sw, sb, config.activation, n_nodes)
        A[l], tau2[l - 1] = activity_step(A[l - 1], sw, sb, config.activation, n_nodes)
    return MeanFieldTrace(A, tau2, chi, _chi_products(chi), [regime(c) for c in chi])


def propagate_resnet(res_config: ResNetConfig, A0=1.0, n_nodes=DEFAULT_NODES, exact_skip=False) -> MeanFieldTrace:
    """Residual activity recursion and chi-bar per block (see :func:`resnet_chi`).

    ``diverging`` is set (and a warning issued) when the activity grows
    monotonically over every block with alpha >= 1.
    """
    _check_nonneg(A0=A0)
    base = res_config.base
    L = base.n_layers
    A = np.empty(L + 1)
    tau2 = np.empty(L)
    chi = np.empty(L)
    A[0] = A0
    for l in range(1, L + 1):
        sw, sb = base.sigma_w2[l - 1], base.sigma_b2[l - 1]
        chi_base = chi_step(A[l - 1], sw, sb, base.activation, n_nodes)
        chi[l - 1] = resnet_chi(chi_base, res_config.sigma_v2, res_config.alpha, exact_skip)
        tau2[l - 1] = pre_activation_variance(A[l - 1], sw, sb)
        A[l] = resnet_activity_step(A[l - 1], sw, sb, res_config.sigma_v2, res_config.alpha, base.activation, n_nodes)
    diverging = bool(res_config.alpha >= 1.0 and L > 0 and np.all(np.diff(A) > 0))
    if diverging:
        warnings.warn("residual activity grows without bound (alpha >= 1)", RuntimeWarning, stacklevel=2)
    return MeanFieldTrace(A, tau2, chi, _chi_products(chi), [regime(c) for c in chi], diverging)


# ------------------------------------------------------------- Monte Carlo side


@dataclass
class MonteCarloTrace:
    """Seed-averaged empirical activity ``A[l]`` (``l = 0 .. L``) and per-layer
    squared-perturbation ratios ``chi[l-1] = |dx^l|^2 / |dx^{l-1}|^2``."""

    A: np.ndarray
    chi: np.ndarray
    A_per_seed: np.ndarray
    chi_per_seed: np.ndarray

    @property
    def n_seeds(self):
        return self.A_per_seed.shape[0]


def monte_carlo(config, A0=1.0, n_seeds=20, perturbation=1e-4, resnet=None) -> MonteCarloTrace:
    """Measure activities and perturbation growth on ``n_seeds`` sampled nets.

    Replicate ``k`` draws its net from ``derive_seed(config.seed, k)`` and a
    fresh N(0, A0 I) input; a random perturbation of norm ``perturbation``
    is pushed through alongside it.  ``resnet`` is an optional
    :class:`ResNetConfig` whose base replaces ``config``.
    """
    if resnet is not None:
        config = resnet.base
    n0 = config.layer_widths[0]
    L = config.n_layers
    A_runs = np.empty((n_seeds, L + 1))
    chi_runs = np.empty((n_seeds, L))
    for k in range(n_seeds):
        seed_k = rng.derive_seed(config.seed, k)
        cfg_k = config.replace(seed=seed_k)
        params = init_random(cfg_k)
        x0 = np.sqrt(A0) * rng.normals(seed_k, rng.Stream.INPUTS, 0, 1, n0)[0]
        d = rng.normals(seed_k, rng.Stream.PERTURB, 0, 1, n0)[0]
        x1 = x0 + perturbation * d / np.linalg.norm(d)
        both = np.stack([x0, x1])
        if resnet is None:
            trace = forward(params, both)
        else:
            res_k = ResNetConfig(cfg_k, resnet.sigma_v2, resnet.alpha)
            trace = forward_resnet(params, init_mixers(res_k), res_k, both)
        for l, x in enumerate(trace.xs):
            A_runs[k, l] = np.mean(x[0] ** 2)
        dist2 = np.array([np.sum((x[1] - x[0]) ** 2) for x in trace.xs])
        chi_runs[k] = dist2[1:] / dist2[:-1]
    return MonteCarloTrace(A_runs.mean(0), chi_runs.mean(0), A_runs, chi_runs)
