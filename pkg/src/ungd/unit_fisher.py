"""Closed-form Fisher information of a single unit under N(0, I) inputs.

For a unit ``phi(w . x + w0)`` the Fisher matrix over ``w* = (w, w0)`` is

    G = A00 I + (Ann - A00)/|w|^2  w~ w~ + A0n/|w| (e0 w~ + w~ e0)

with ``w~ = (w, 0)`` and ``e0`` the bias axis (last coordinate), and its
inverse has the same shape with coefficients ``(Abar00, X, Y, Z)``.  All
functions accept scalars or arrays of units (``w_norm``/``w0`` broadcast);
weight matrices hold one unit per row.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtr

from . import rng
from .activations import ActivationKind
from .quadrature import DEFAULT_NODES, gaussian_nodes

EPS_D = 1e-12
EPS_A = 1e-12
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class SingularFisher(ArithmeticError):
    """The unit Fisher block is (numerically) singular; no natural step exists."""


def std_normal_cdf(z):
    """Phi(z); what the closed ReLU forms call ``erf``."""
    return ndtr(z)


@dataclass(frozen=True)
class UnitWeights:
    w: np.ndarray
    w0: float

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        if w.ndim != 1 or w.size < 1:
            raise ValueError("w must be a non-empty vector")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "w0", float(self.w0))

    @property
    def n(self):
        return self.w.size

    @property
    def w_norm(self):
        return float(np.linalg.norm(self.w))

    @property
    def direction(self):
        """w / |w|, or zeros for the all-zero weight vector."""
        norm = self.w_norm
        return self.w / norm if norm > 0 else np.zeros_like(self.w)


@dataclass(frozen=True)
class UnitFisherCoeffs:
    """Rotated-basis coefficients; fields may be arrays (one entry per unit)."""

    A00: np.ndarray
    A0n: np.ndarray
    Ann: np.ndarray

    @property
    def Abar00(self):
        return 1.0 / self.A00

    @property
    def D(self):
        return self.A00 * self.Ann - self.A0n**2

    @property
    def X(self):
        return self.A00 / self.D - self.Abar00

    @property
    def Y(self):
        return -self.A0n / self.D

    @property
    def Z(self):
        return self.Ann / self.D - self.Abar00

    def damped(self, lam):
        """Tikhonov damping: ``lam`` added to A00 and Ann."""
        if lam < 0:
            raise ValueError("damping must be >= 0")
        if lam == 0:
            return self
        return replace(self, A00=self.A00 + lam, Ann=self.Ann + lam)

    def singular_mask(self, eps_d=EPS_D, eps_a=EPS_A):
        """True where the inverse is not usable (tiny A00 or tiny relative D)."""
        A00 = np.asarray(self.A00, dtype=float)
        Ann = np.asarray(self.Ann, dtype=float)
        D = np.asarray(self.D, dtype=float)
        bad = ~(A00 > eps_a) | ~(D > eps_d * A00 * Ann) | ~np.isfinite(D)
        return bad

    def as_dict(self):
        return {
            "A00": self.A00,
            "A0n": self.A0n,
            "Ann": self.Ann,
            "Abar00": self.Abar00,
            "X": self.X,
            "Y": self.Y,
            "Z": self.Z,
            "D": self.D,
        }


def _check_norm(w_norm):
    w_norm = np.asarray(w_norm, dtype=float)
    if np.any(w_norm < 0) or not np.all(np.isfinite(w_norm)):
        raise ValueError("w_norm must be finite and >= 0")
    return w_norm


def coeffs_relu(w_norm, w0) -> UnitFisherCoeffs:
    """Closed forms for ReLU with r = w0/|w|:
    A00 = Phi(r), A0n = pdf(r), Ann = Phi(r) - r pdf(r).

    ``w_norm = 0`` takes the |w| -> 0+ limit, so r = +-inf (or 0 when w0 = 0).
    """
    w_norm = _check_norm(w_norm)
    w0 = np.asarray(w0, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(w_norm > 0, w0 / w_norm, np.sign(w0) * np.inf)
    r = np.where(np.isnan(r), 0.0, r)
    cdf = std_normal_cdf(r)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * r * r)
    with np.errstate(invalid="ignore"):
        r_pdf = np.where(np.isfinite(r), r * pdf, 0.0)
    return UnitFisherCoeffs(A00=cdf, A0n=pdf, Ann=cdf - r_pdf)


def coeffs_linear(w_norm, w0) -> UnitFisherCoeffs:
    shape = np.broadcast(np.asarray(w_norm), np.asarray(w0)).shape
    one = np.ones(shape)
    return UnitFisherCoeffs(A00=one, A0n=np.zeros(shape), Ann=one.copy())


def coeffs_quadrature(w_norm, w0, act, n_nodes=DEFAULT_NODES) -> UnitFisherCoeffs:
    """The three Gaussian integrals of phi'(|w| v + w0)^2 against 1, v, v^2.

    Works for every activation; the ReLU kink lands on a panel edge.
    """
    act = ActivationKind.parse(act)
    w_norm = _check_norm(w_norm)
    w0 = np.asarray(w0, dtype=float)
    v, weights = gaussian_nodes(w_norm, w0, n_nodes)
    wn, b = np.broadcast_arrays(w_norm, w0)
    f = act.dphi(wn[..., None] * v + b[..., None]) ** 2
    wf = weights * f
    return UnitFisherCoeffs(A00=wf.sum(-1), A0n=(wf * v).sum(-1), Ann=(wf * v * v).sum(-1))


def unit_coeffs(w_norm, w0, act, n_nodes=DEFAULT_NODES) -> UnitFisherCoeffs:
    """Closed form where one exists (ReLU, linear), quadrature otherwise."""
    act = ActivationKind.parse(act)
    if act is ActivationKind.RELU:
        return coeffs_relu(w_norm, w0)
    if act is ActivationKind.LINEAR:
        return coeffs_linear(w_norm, w0)
    return coeffs_quadrature(w_norm, w0, act, n_nodes)


def _augmented_direction(weights):
    n = weights.n
    e_n = np.zeros(n + 1)
    e_n[:n] = weights.direction
    e0 = np.zeros(n + 1)
    e0[n] = 1.0
    return e_n, e0


def assemble_G(coeffs: UnitFisherCoeffs, weights: UnitWeights) -> np.ndarray:
    """Dense (n+1)x(n+1) unit Fisher, bias last.  With ``w = 0`` the rotated
    basis is undefined and ``A00 I`` is returned."""
    n = weights.n
    A00, A0n, Ann = (float(c) for c in (coeffs.A00, coeffs.A0n, coeffs.Ann))
    G = A00 * np.eye(n + 1)
    if weights.w_norm == 0:
        return G
    e_n, e0 = _augmented_direction(weights)
    G += (Ann - A00) * np.outer(e_n, e_n)
    G += A0n * (np.outer(e0, e_n) + np.outer(e_n, e0))
    return G


def ginv_matrix(coeffs: UnitFisherCoeffs, weights: UnitWeights) -> np.ndarray:
    """Dense closed-form inverse (for checks; steps use :func:`apply_Ginv`)."""
    n = weights.n
    G = float(coeffs.Abar00) * np.eye(n + 1)
    if weights.w_norm == 0:
        return G
    e_n, e0 = _augmented_direction(weights)
    G += float(coeffs.X) * np.outer(e_n, e_n)
    G += float(coeffs.Y) * (np.outer(e0, e_n) + np.outer(e_n, e0))
    G += float(coeffs.Z) * np.outer(e0, e0)
    return G


def apply_Ginv(coeffs: UnitFisherCoeffs, weights: UnitWeights, xstar, eps_d=EPS_D, eps_a=EPS_A):
    """G^{-1} x* in O(n) without forming G.  ``xstar = (x, x0)``, bias last.

    Raises :class:`SingularFisher` when the block is numerically singular.
    """
    if np.any(coeffs.singular_mask(eps_d, eps_a)):
        raise SingularFisher(f"unit Fisher singular (A00={float(coeffs.A00):.3g}, D={float(coeffs.D):.3g})")
    xstar = np.asarray(xstar, dtype=float)
    if xstar.shape != (weights.n + 1,):
        raise ValueError(f"xstar must have length {weights.n + 1}")
    step_w, step_b = ginv_rows(coeffs, weights.w[None, :], np.array([weights.w0]), xstar[None, :-1], xstar[-1:])
    return np.concatenate([step_w[0], step_b])


def ginv_rows(coeffs, W, b, gW, gb):
    """Apply each unit's closed-form G^{-1} to its own row ``(gW[i], gb[i])``.

    ``W`` is ``(units, n)``; coefficients have shape ``(units,)``.  Units with
    an all-zero weight row use ``Abar00 I``.  No singularity check here.
    """
    W = np.asarray(W, dtype=float)
    norms = np.linalg.norm(W, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    dirs = W / safe[:, None]
    has_dir = norms > 0
    gb = np.asarray(gb, dtype=float).reshape(norms.shape)
    abar = np.broadcast_to(np.asarray(coeffs.Abar00, dtype=float), norms.shape)
    X = np.where(has_dir, coeffs.X, 0.0)
    Y = np.where(has_dir, coeffs.Y, 0.0)
    Z = np.where(has_dir, coeffs.Z, 0.0)
    proj = np.einsum("ij,ij->i", dirs, gW)
    out_w = abar[:, None] * gW + (X * proj + Y * gb)[:, None] * dirs
    out_b = abar * gb + Y * proj + Z * gb
    return out_w, out_b


@dataclass
class GinvStructure:
    """Squared Frobenius masses of G^{-1} on three disjoint supports:
    the diagonal, the off-diagonal part of the rank-1 w w block, and the
    bias row/column.  They add up to ``total`` exactly."""

    diagonal: float
    rank1_offdiag: float
    bias_coupling: float
    total: float

    @property
    def fractions(self):
        return {
            "diagonal": self.diagonal / self.total,
            "rank1_offdiag": self.rank1_offdiag / self.total,
            "bias_coupling": self.bias_coupling / self.total,
        }


def ginv_structure(coeffs: UnitFisherCoeffs, weights: UnitWeights) -> GinvStructure:
    Ginv = ginv_matrix(coeffs, weights)
    n = weights.n
    diag = np.diag(Ginv)
    block = Ginv[:n, :n]
    off = block - np.diag(np.diag(block))
    bias = Ginv[:n, n]
    return GinvStructure(
        diagonal=float(np.sum(diag**2)),
        rank1_offdiag=float(np.sum(off**2)),
        bias_coupling=float(2.0 * np.sum(bias**2)),
        total=float(np.sum(Ginv**2)),
    )


@dataclass
class MonteCarloG:
    """Sampled unit Fisher ``E[phi'(u)^2 x* x*^T]`` with jackknife standard errors."""

    mean: np.ndarray
    stderr: np.ndarray
    n_samples: int

    def z_scores(self, G):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.stderr > 0, np.abs(G - self.mean) / self.stderr, np.where(G == self.mean, 0.0, np.inf))


def monte_carlo_G(weights: UnitWeights, act, n_samples, seed, n_groups=20, chunk=50_000) -> MonteCarloG:
    """Estimate the unit Fisher from ``n_samples`` N(0, I) inputs.

    Samples are split into ``n_groups`` contiguous groups; the stderr is the
    delete-one-group jackknife of the mean.
    """
    act = ActivationKind.parse(act)
    if n_groups < 2 or n_samples < n_groups:
        raise ValueError("need n_samples >= n_groups >= 2")
    n = weights.n
    bounds = np.linspace(0, n_samples, n_groups + 1).astype(int)
    sums = []
    for g in range(n_groups):
        acc = np.zeros((n + 1, n + 1))
        for s in range(bounds[g], bounds[g + 1], chunk):
            count = min(chunk, bounds[g + 1] - s)
            x = rng.sample_normals(seed, rng.Stream.PROBE, s, count, n, tag=1)
            xs = np.hstack([x, np.ones((count, 1))])
            f = act.dphi(x @ weights.w + weights.w0) ** 2
            acc += (xs * f[:, None]).T @ xs
        sums.append(acc)
    sizes = np.diff(bounds).astype(float)
    total, N = sum(sums), float(n_samples)
    loo = np.array([(total - s) / (N - k) for s, k in zip(sums, sizes)])
    se = np.sqrt((n_groups - 1) / n_groups * np.sum((loo - loo.mean(0)) ** 2, axis=0))
    return MonteCarloG(total / N, se, int(n_samples))
