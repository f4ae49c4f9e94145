"""SGD and unit-wise natural-gradient training for plain nets and resnets.

Loss per sample is ``0.5 |y - x^L|^2`` and the output error is
``e^L = y - x^L``.  With that sign, a descent step *adds*
``eta * delta_i * x*`` to unit ``i`` (``delta_i = e_i phi'(u_i)``); the natural
step replaces ``x*`` by ``G_i^{-1} x*`` using the unit's closed-form Fisher.
"""

import time
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .fisher_probe import ResidualSpec
from .nets import NetworkParams, forward, forward_resnet
from .unit_fisher import EPS_A, EPS_D, assemble_G, ginv_rows, unit_coeffs, UnitWeights


class NumericalError(ArithmeticError):
    """A non-finite value appeared in a gradient or parameter update."""


@dataclass
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" or "ungd"
    eta: float = 0.01
    batch_size: int = 32
    damping: float = 0.0
    polyak: bool = False
    compat_eq68_w0: bool = False
    check_fraction: float = 0.01

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "ungd"):
            raise ValueError(f"optimizer kind must be 'sgd' or 'ungd', got {self.kind!r}")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")


@dataclass
class TrainRow:
    step: int
    loss: float
    step_norm: float
    fallbacks: int
    n_units: int
    wall_time: float
    ginv_check: float = float("nan")


@dataclass
class TrainRecord:
    rows: list = field(default_factory=list)
    flagged: bool = False

    HEADER = ("step", "loss", "step_norm", "fallbacks", "n_units", "wall_time", "ginv_check")

    def append(self, row):
        self.rows.append(row)
        # acceptance rule: fewer than half of the units may fall back
        if row.n_units and row.fallbacks >= 0.5 * row.n_units:
            self.flagged = True

    @property
    def losses(self):
        return np.array([r.loss for r in self.rows])

    def __len__(self):
        return len(self.rows)


def batch_loss(output, y):
    return float(0.5 * np.mean(np.sum((np.asarray(y) - output) ** 2, axis=-1)))


def _forward(params, x, resnet):
    if resnet is None:
        return forward(params, x)
    return forward_resnet(params, resnet.mixers, resnet.config, x)


def backprop_errors(trace, params: NetworkParams, y):
    """Errors and unit deltas for every layer.

    Returns ``(errors, deltas)``: ``errors[m]`` is ``e^m`` at ``x^m`` for
    ``m = 0 .. L`` (``e^L = y - x^L``), and ``deltas[l-1]`` is the error
    reaching ``u^l``, i.e. ``e^l phi'(u^l)`` (plain) or ``(V^l)^T e^l * phi'(u^l)``
    (residual).  The loss gradient of layer l is ``-deltas[l-1]^T x*^{l-1}``.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != trace.output.shape:
        raise ValueError(f"target shape {y.shape} != output shape {trace.output.shape}")
    L = params.n_layers
    e = y - trace.output
    errors = [None] * (L + 1)
    deltas = [None] * L
    errors[L] = e
    for l in range(L, 0, -1):
        if trace.is_resnet:
            d = (e @ trace.mixers[l - 1]) * trace.dphi(l)
            e = d @ params.weights[l - 1] + trace.alpha * e
        else:
            d = e * trace.dphi(l)
            e = d @ params.weights[l - 1]
        deltas[l - 1] = d
        errors[l - 1] = e
    return errors, deltas


def euclidean_steps(trace, deltas):
    """Batch-mean descent directions ``(dW, db)`` per layer (loss decreases along +)."""
    steps = []
    for l, d in enumerate(deltas, start=1):
        x = trace.xs[l - 1]
        d2 = d.reshape(-1, d.shape[-1])
        x2 = x.reshape(-1, x.shape[-1])
        count = d2.shape[0]
        steps.append((d2.T @ x2 / count, d2.sum(0) / count))
    return steps


def loss_gradient(params, x, y, resnet=None):
    """dl/dtheta per layer as ``(dW, db)`` pairs, averaged over the batch."""
    trace = _forward(params, x, resnet)
    _, deltas = backprop_errors(trace, params, y)
    return [(-gw, -gb) for gw, gb in euclidean_steps(trace, deltas)]


def _apply(params, steps, eta):
    new = params.copy()
    norm2 = 0.0
    for l, (sw, sb) in enumerate(steps):
        dw, db = eta * sw, eta * sb
        if not (np.isfinite(dw).all() and np.isfinite(db).all()):
            raise NumericalError(f"non-finite update in layer {l + 1}")
        new.weights[l] += dw
        new.biases[l] += db
        norm2 += float(np.sum(dw * dw) + np.sum(db * db))
    return new, float(np.sqrt(norm2))


def sgd_step(params, batch, eta, resnet=None):
    """theta <- theta - eta * mean_batch dl/dtheta.  Returns ``(params, TrainRow)``."""
    t0 = time.perf_counter()
    x, y = batch
    trace = _forward(params, x, resnet)
    loss = batch_loss(trace.output, y)
    _, deltas = backprop_errors(trace, params, y)
    steps = euclidean_steps(trace, deltas)
    new, norm = _apply(params, steps, eta)
    n_units = sum(w.shape[0] for w in params.weights)
    return new, TrainRow(0, loss, norm, 0, n_units, time.perf_counter() - t0)


def natural_unit_steps(params, steps, damping=0.0, compat_eq68_w0=False, eps_d=EPS_D, eps_a=EPS_A):
    """Map Euclidean per-unit directions through each unit's closed-form G^{-1}.

    Coefficients use the current ``(|w|, b)`` of every unit under the N(0, I)
    input assumption.  Singular units keep the Euclidean direction.
    Returns ``(natural_steps, n_fallbacks)``.
    """
    act = params.activation
    out = []
    fallbacks = 0
    for (gw, gb), W, b in zip(steps, params.weights, params.biases):
        coeffs = unit_coeffs(np.linalg.norm(W, axis=1), b, act).damped(damping)
        bad = coeffs.singular_mask(eps_d, eps_a)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            nw, nb = ginv_rows(coeffs, W, b, gw, gb)
        if compat_eq68_w0:
            nb = nb * b
        nw = np.where(bad[:, None], gw, nw)
        nb = np.where(bad, gb, nb)
        fallbacks += int(bad.sum())
        out.append((nw, nb))
    return out, fallbacks


def _spot_check(params, steps, nat_steps, damping, gen):
    """Relative error of one random unit's closed-form step against a dense solve."""
    l = int(gen.integers(len(params.weights)))
    i = int(gen.integers(params.weights[l].shape[0]))
    w, b = params.weights[l][i], params.biases[l][i]
    weights = UnitWeights(w, b)
    coeffs = unit_coeffs(weights.w_norm, b, params.activation).damped(damping)
    if coeffs.singular_mask().any():
        return float("nan")
    rhs = np.concatenate([steps[l][0][i], [steps[l][1][i]]])
    dense = np.linalg.solve(assemble_G(coeffs, weights), rhs)
    got = np.concatenate([nat_steps[l][0][i], [nat_steps[l][1][i]]])
    return float(np.linalg.norm(got - dense) / max(np.linalg.norm(dense), 1e-300))


def unit_ngd_step(params, batch, cfg: OptimizerConfig, resnet=None, check_gen=None):
    """Unit-wise natural-gradient step.  Returns ``(params, TrainRow)``.

    ``check_gen`` (a numpy Generator) enables the dense-inverse spot check
    on a ``cfg.check_fraction`` share of calls.
    """
    t0 = time.perf_counter()
    x, y = batch
    trace = _forward(params, x, resnet)
    loss = batch_loss(trace.output, y)
    _, deltas = backprop_errors(trace, params, y)
    steps = euclidean_steps(trace, deltas)
    nat, fallbacks = natural_unit_steps(params, steps, cfg.damping, cfg.compat_eq68_w0)
    check = float("nan")
    if check_gen is not None and not cfg.compat_eq68_w0 and check_gen.random() < cfg.check_fraction:
        check = _spot_check(params, steps, nat, cfg.damping, check_gen)
    new, norm = _apply(params, nat, cfg.eta)
    n_units = sum(w.shape[0] for w in params.weights)
    return new, TrainRow(0, loss, norm, fallbacks, n_units, time.perf_counter() - t0, check)


def polyak_average(history, window):
    """Arithmetic mean of the last ``window`` iterates (all of them if fewer)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    history = list(history)
    if not history:
        raise ValueError("empty history")
    tail = history[-window:]
    k = len(tail)
    weights = [sum(p.weights[l] for p in tail) / k for l in range(tail[0].n_layers)]
    biases = [sum(p.biases[l] for p in tail) / k for l in range(tail[0].n_layers)]
    return NetworkParams(weights, biases, tail[0].config)


# ------------------------------------------------------------------- datasets


@dataclass
class TeacherStudentTask:
    """Regression targets from a frozen random teacher net.

    Inputs of step ``t`` are rows ``t*batch .. (t+1)*batch-1`` of the keyed
    N(0, input_scale^2 I) stream, so every run sees the same data.
    """

    teacher: NetworkParams
    seed: int
    teacher_resnet: ResidualSpec = None
    input_scale: float = 1.0
    noise_std: float = 0.0

    @property
    def input_dim(self):
        return self.teacher.config.layer_widths[0]

    def sample(self, start, count):
        x = self.input_scale * rng.sample_normals(self.seed, rng.Stream.DATA, start, count, self.input_dim)
        y = _forward(self.teacher, x, self.teacher_resnet).output
        if self.noise_std:
            y = y + self.noise_std * rng.sample_normals(self.seed, rng.Stream.DATA, start, count, y.shape[-1], tag=1)
        return x, y

    def batch(self, step, size):
        return self.sample(step * size, size)


def train(params, task, cfg: OptimizerConfig, steps, resnet=None, polyak_window=0, seed=0):
    """Run ``steps`` optimizer steps on ``task``.

    Returns ``(final_params, record, averaged_params)``; the average is
    ``None`` unless ``polyak_window > 0``.
    """
    record = TrainRecord()
    history = deque(maxlen=max(1, polyak_window))
    check_gen = np.random.Generator(np.random.Philox(rng.derive_seed(seed, 0xC4EC)))
    for t in range(steps):
        batch = task.batch(t, cfg.batch_size)
        if cfg.kind == "sgd":
            params, row = sgd_step(params, batch, cfg.eta, resnet)
        else:
            params, row = unit_ngd_step(params, batch, cfg, resnet, check_gen)
        row.step = t
        record.append(row)
        if polyak_window > 0:
            history.append(params)
    averaged = polyak_average(history, polyak_window) if polyak_window > 0 else None
    return params, record, averaged


def train_resnet(params, mixers, res_config, task, cfg: OptimizerConfig, steps, polyak_window=0, seed=0):
    """Residual-net training with the mixers V frozen; only (W, b) move."""
    if res_config.alpha >= 1.0:
        warnings.warn("alpha >= 1: residual activity diverges with depth", RuntimeWarning, stacklevel=2)
    resnet = ResidualSpec([np.array(v, copy=True) for v in mixers], res_config)
    return train(params, task, cfg, steps, resnet=resnet, polyak_window=polyak_window, seed=seed)


def evaluate(params, task, n_samples=1000, resnet=None, offset=2**31):
    """Mean loss on a held-out slice of the task's input stream."""
    x, y = task.sample(offset, n_samples)
    return batch_loss(_forward(params, x, resnet).output, y)
