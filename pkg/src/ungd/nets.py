"""Random deep nets and residual blocks: configs, init, forward pass, Jacobians.

Layer ``l`` (1-based, ``l = 1 .. L``) maps ``x^{l-1}`` of width ``n_{l-1}`` to
``x^l`` of width ``n_l``::

    u^l = W^l x^{l-1} + b^l,    x^l = phi(u^l)                 (plain)
    x^l = V^l phi(u^l) + alpha x^{l-1}                          (residual)

Arrays may carry leading batch axes; the feature axis is always last.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import rng
from .activations import ActivationKind


class ConfigError(ValueError):
    """Invalid network or experiment configuration."""


def _per_layer(value, n_layers, name):
    if np.isscalar(value):
        vals = (float(value),) * n_layers
    else:
        vals = tuple(float(v) for v in value)
    if len(vals) != n_layers:
        raise ConfigError(f"{name} needs 1 or {n_layers} values, got {len(vals)}")
    if any(not np.isfinite(v) or v < 0 for v in vals):
        raise ConfigError(f"{name} must be finite and >= 0, got {vals}")
    return vals


@dataclass(frozen=True)
class NetConfig:
    layer_widths: tuple
    sigma_w2: tuple
    sigma_b2: tuple
    activation: ActivationKind = ActivationKind.RELU
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(n) for n in self.layer_widths)
        if len(widths) < 2:
            raise ConfigError("need at least an input and one layer (2 widths)")
        if any(n < 1 for n in widths):
            raise ConfigError(f"all widths must be >= 1, got {widths}")
        n_layers = len(widths) - 1
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "sigma_w2", _per_layer(self.sigma_w2, n_layers, "sigma_w2"))
        object.__setattr__(self, "sigma_b2", _per_layer(self.sigma_b2, n_layers, "sigma_b2"))
        object.__setattr__(self, "activation", ActivationKind.parse(self.activation))
        seed = int(self.seed)
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed must fit in 64 bits, got {seed}")
        object.__setattr__(self, "seed", seed)

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    def replace(self, **changes):
        fields = dict(
            layer_widths=self.layer_widths,
            sigma_w2=self.sigma_w2,
            sigma_b2=self.sigma_b2,
            activation=self.activation,
            seed=self.seed,
        )
        fields.update(changes)
        return NetConfig(**fields)


@dataclass(frozen=True)
class ResNetConfig:
    base: NetConfig
    sigma_v2: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        widths = self.base.layer_widths
        if len(set(widths)) != 1:
            raise ConfigError(f"residual blocks need equal widths, got {widths}")
        if not self.sigma_v2 >= 0:
            raise ConfigError("sigma_v2 must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.alpha >= 1.0:
            warnings.warn(
                "alpha >= 1: the activity recursion diverges with depth", RuntimeWarning, stacklevel=2
            )
        object.__setattr__(self, "sigma_v2", float(self.sigma_v2))
        object.__setattr__(self, "alpha", float(self.alpha))


@dataclass
class NetworkParams:
    weights: list
    biases: list
    config: NetConfig

    def __post_init__(self):
        widths = self.config.layer_widths
        if len(self.weights) != self.config.n_layers or len(self.biases) != self.config.n_layers:
            raise ConfigError("number of weight/bias arrays does not match config")
        for l, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            if w.shape != (widths[l], widths[l - 1]) or b.shape != (widths[l],):
                raise ConfigError(f"layer {l}: shapes {w.shape}, {b.shape} disagree with widths")

    @property
    def n_layers(self):
        return self.config.n_layers

    @property
    def activation(self):
        return self.config.activation

    def copy(self):
        return NetworkParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.config
        )

    def flat(self):
        """All parameters as one vector, unit by unit with the bias last."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(np.concatenate([w, b[:, None]], axis=1).ravel())
        return np.concatenate(parts)

    def is_finite(self):
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in zip(self.weights, self.biases))


@dataclass
class ForwardTrace:
    """Activations of one forward pass.

    ``xs[l]`` is ``x^l`` for ``l = 0 .. L``; ``us[l-1]`` and ``dphis[l-1]``
    hold ``u^l`` and ``phi'(u^l)``.
    """

    xs: list
    us: list
    dphis: list
    activation: ActivationKind
    mixers: list = None
    alpha: float = None

    @property
    def output(self):
        return self.xs[-1]

    @property
    def is_resnet(self):
        return self.mixers is not None

    def u(self, l):
        return self.us[l - 1]

    def dphi(self, l):
        return self.dphis[l - 1]


def init_random(config: NetConfig) -> NetworkParams:
    """Draw W^l ~ N(0, sigma_w2[l]/n_{l-1}) and b^l ~ N(0, sigma_b2[l]) entrywise.

    Entry ``(i, j)`` of layer ``l`` uses the Philox counter ``(j, i, l, stream)``,
    so the draw does not depend on how or in which order entries are filled.
    """
    widths = config.layer_widths
    weights, biases = [], []
    for l in range(1, config.n_layers + 1):
        n_out, n_in = widths[l], widths[l - 1]
        z = rng.normals(config.seed, rng.Stream.WEIGHTS, l, n_out, n_in)
        weights.append(np.sqrt(config.sigma_w2[l - 1] / n_in) * z)
        zb = rng.normals(config.seed, rng.Stream.BIASES, l, n_out, 1)[:, 0]
        biases.append(np.sqrt(config.sigma_b2[l - 1]) * zb)
    return NetworkParams(weights, biases, config)


def init_mixers(res_config: ResNetConfig) -> list:
    """Fixed residual mixers V^l with entries ~ N(0, sigma_v2 / n)."""
    base = res_config.base
    n = base.layer_widths[0]
    scale = np.sqrt(res_config.sigma_v2 / n)
    return [scale * rng.normals(base.seed, rng.Stream.MIXERS, l, n, n) for l in range(1, base.n_layers + 1)]


def _check_input(params, x0):
    x0 = np.asarray(x0, dtype=float)
    n0 = params.config.layer_widths[0]
    if x0.ndim == 0 or x0.shape[-1] != n0:
        raise ValueError(f"input must have trailing dimension {n0}, got shape {x0.shape}")
    return x0


def forward(params: NetworkParams, x0) -> ForwardTrace:
    x = _check_input(params, x0)
    act = params.activation
    xs, us, dphis = [x], [], []
    for w, b in zip(params.weights, params.biases):
        u = x @ w.T + b
        x = act.phi(u)
        us.append(u)
        dphis.append(act.dphi(u))
        xs.append(x)
    return ForwardTrace(xs, us, dphis, act)


def forward_resnet(params: NetworkParams, mixers, res_config: ResNetConfig, x0) -> ForwardTrace:
    if res_config.base.layer_widths != params.config.layer_widths:
        raise ValueError("residual config and parameters disagree on widths")
    if len(mixers) != params.n_layers:
        raise ValueError(f"need {params.n_layers} mixers, got {len(mixers)}")
    n = params.config.layer_widths[0]
    for v in mixers:
        if v.shape != (n, n):
            raise ValueError(f"mixer shape {v.shape} != {(n, n)}")
    alpha = res_config.alpha
    x = _check_input(params, x0)
    act = params.activation
    xs, us, dphis = [x], [], []
    for w, b, v in zip(params.weights, params.biases, mixers):
        u = x @ w.T + b
        x = act.phi(u) @ v.T + alpha * x
        us.append(u)
        dphis.append(act.dphi(u))
        xs.append(x)
    return ForwardTrace(xs, us, dphis, act, mixers=list(mixers), alpha=alpha)


def layer_jacobian(trace: ForwardTrace, params: NetworkParams, l: int) -> np.ndarray:
    """B^l = dx^l / dx^{l-1}, with any batch axes of the trace leading."""
    if not 1 <= l <= params.n_layers:
        raise IndexError(f"layer {l} outside 1..{params.n_layers}")
    scaled = trace.dphi(l)[..., :, None] * params.weights[l - 1]
    if not trace.is_resnet:
        return scaled
    return trace.mixers[l - 1] @ scaled + trace.alpha * np.eye(scaled.shape[-1])


def jacobian_product(trace: ForwardTrace, params: NetworkParams, top: int, bottom: int) -> np.ndarray:
    """B^top B^{top-1} ... B^bottom, i.e. dx^top / dx^{bottom-1}."""
    out = layer_jacobian(trace, params, top)
    for l in range(top - 1, bottom - 1, -1):
        out = out @ layer_jacobian(trace, params, l)
    return out


# ---------------------------------------------------------------- file formats

CONFIG_KEYS = ("widths", "sigma_w2", "sigma_b2", "sigma_v2", "alpha", "activation", "seed")


def _floats(text):
    vals = [float(t) for t in text.replace(",", " ").split()]
    return vals[0] if len(vals) == 1 else vals


def parse_config(text: str):
    """Parse ``key = value`` lines into a NetConfig, or a ResNetConfig when
    ``sigma_v2`` or ``alpha`` is present.  Lists are comma separated, ``#``
    starts a comment, unknown or repeated keys are errors."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value
    missing = [k for k in ("widths", "sigma_w2", "sigma_b2", "activation") if k not in entries]
    if missing:
        raise ConfigError(f"missing keys: {', '.join(missing)}")
    try:
        widths = [int(t) for t in entries["widths"].replace(",", " ").split()]
        base = NetConfig(
            layer_widths=widths,
            sigma_w2=_floats(entries["sigma_w2"]),
            sigma_b2=_floats(entries["sigma_b2"]),
            activation=entries["activation"],
            seed=int(entries.get("seed", "0")),
        )
        if "sigma_v2" in entries or "alpha" in entries:
            return ResNetConfig(
                base,
                sigma_v2=float(entries.get("sigma_v2", "1.0")),
                alpha=float(entries.get("alpha", "0.5")),
            )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return base


def read_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(config) -> str:
    res = None
    if isinstance(config, ResNetConfig):
        res, config = config, config.base

    def fmt(vals):
        return ", ".join(repr(float(v)) for v in vals)

    lines = [
        f"widths = {', '.join(str(n) for n in config.layer_widths)}",
        f"sigma_w2 = {fmt(config.sigma_w2)}",
        f"sigma_b2 = {fmt(config.sigma_b2)}",
        f"activation = {config.activation.value}",
        f"seed = {config.seed}",
    ]
    if res is not None:
        lines += [f"sigma_v2 = {res.sigma_v2!r}", f"alpha = {res.alpha!r}"]
    return "\n".join(lines) + "\n"


def write_config(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(config))


def save_params(params: NetworkParams, path, mixers=None):
    """Write parameters as ``.npz`` (raw float64 arrays with shape headers)."""
    arrays = {}
    for l, (w, b) in enumerate(zip(params.weights, params.biases), start=1):
        arrays[f"W{l}"] = w
        arrays[f"b{l}"] = b
    for l, v in enumerate(mixers or (), start=1):
        arrays[f"V{l}"] = v
    arrays["config"] = np.array(format_config(params.config))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(params, mixers or None)``."""
    with np.load(path, allow_pickle=False) as data:
        config = parse_config(str(data["config"]))
        n_layers = config.n_layers
        weights = [data[f"W{l}"] for l in range(1, n_layers + 1)]
        biases = [data[f"b{l}"] for l in range(1, n_layers + 1)]
        mixers = [data[f"V{l}"] for l in range(1, n_layers + 1)] if "V1" in data else None
    return NetworkParams(weights, biases, config), mixers

