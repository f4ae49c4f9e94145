import enum

import numpy as np
from scipy.special import expit


class ActivationKind(enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    LINEAR = "linear"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown activation {value!r} (expected one of {names})") from None

    @property
    def has_kink(self):
        return self is ActivationKind.RELU

    def phi(self, u):
        u = np.asarray(u, dtype=float)
        if self is ActivationKind.RELU:
            return np.maximum(u, 0.0)
        if self is ActivationKind.TANH:
            return np.tanh(u)
        if self is ActivationKind.SIGMOID:
            return expit(u)
        return u.copy()

    def dphi(self, u):
        """Derivative of ``phi``; the ReLU derivative at exactly 0 is 0."""
        u = np.asarray(u, dtype=float)
        if self is ActivationKind.RELU:
            return (u > 0.0).astype(float)
        if self is ActivationKind.TANH:
            # 1 - tanh^2 loses everything for large |u|; sech^2 does not
            return 1.0 / np.cosh(np.minimum(np.abs(u), 350.0)) ** 2
        if self is ActivationKind.SIGMOID:
            return expit(u) * expit(-u)
        return np.ones_like(u)
