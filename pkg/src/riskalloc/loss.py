"""Multivariate loss functions and the root-finding field.

Vectors are handled along the last axis, so every function accepts a single
point of shape ``(d,)`` or a stack of shape ``(..., d)``.  Sums over
components are taken in sorted order so that permuting the inputs leaves
the result bit-identical.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

# exp(709.78) overflows a double
EXP_GUARD = 700.0


class NonFiniteResultError(FloatingPointError):
    """Raised when a loss evaluation would overflow or produces a non-finite value."""


class LossKind(str, enum.Enum):
    EXPONENTIAL = "exponential"
    POSPART_QUADRATIC = "pospart_quadratic"


@dataclass(frozen=True)
class LossSpec:
    """A permutation-invariant multivariate loss function.

    Parameters
    ----------
    kind : LossKind
        ``exponential``: ``(sum exp(b x_i) + a exp(b sum x)) / (1 + a) - (a + d) / (a + 1)``.
        ``pospart_quadratic``: ``sum x_i + sum (x_i^+)^2 / 2 + a sum_{i<j} x_i^+ x_j^+``.
    d : int
        Number of components (at least 2).
    alpha : float
        Systemic weight, non-negative.
    beta : float
        Risk aversion, only used by the exponential family.
    """

    kind: LossKind
    d: int
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if int(self.d) != self.d or self.d < 2:
            raise ValueError(f"d must be an integer >= 2, got {self.d}")
        object.__setattr__(self, "d", int(self.d))
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.kind is LossKind.EXPONENTIAL and not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")

    @property
    def lower_bound_c(self) -> float:
        """A constant ``c`` with ``l(x) >= sum(x) - c`` for every ``x``."""
        if self.kind is LossKind.POSPART_QUADRATIC:
            return 0.0
        a, b, d = self.alpha, self.beta, self.d
        # inf over x of exp(b x) - (1 + a) x, dropping the non-negative systemic term
        per_coord = (1 + a) / b * (1 - math.log((1 + a) / b))
        return (a + d) / (a + 1) - d * per_coord / (1 + a)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "d": self.d, "alpha": self.alpha, "beta": self.beta}

    def eval(self, x):
        return evaluate(self, x)

    def grad(self, x):
        return gradient(self, x)

    def field(self, x, z):
        return field(self, x, z)


def _check_dim(loss: LossSpec, x: np.ndarray) -> None:
    if x.shape[-1:] != (loss.d,):
        raise ValueError(f"expected last dimension {loss.d}, got shape {x.shape}")


def _sorted_sum(a: np.ndarray) -> np.ndarray:
    return np.sort(a, axis=-1).sum(axis=-1)


def _exp_terms(loss: LossSpec, x: np.ndarray):
    b = loss.beta
    total = _sorted_sum(x)
    peak = np.max(b * x) if x.size else 0.0
    if loss.alpha > 0 and x.size:
        peak = max(peak, np.max(b * total))
    if not peak <= EXP_GUARD:
        raise NonFiniteResultError(
            f"exponential loss argument {peak:.4g} exceeds {EXP_GUARD}")
    return np.exp(b * x), np.exp(b * total)


def _value_and_grad(loss: LossSpec, x: np.ndarray):
    a, d = loss.alpha, loss.d
    if loss.kind is LossKind.EXPONENTIAL:
        b = loss.beta
        ex, es = _exp_terms(loss, x)
        val = (_sorted_sum(ex) + a * es) / (1 + a) - (a + d) / (a + 1)
        grad = b * (ex + a * es[..., None]) / (1 + a)
    else:
        xp = np.maximum(x, 0.0)
        sq = _sorted_sum(xp * xp)
        sp = _sorted_sum(xp)
        val = _sorted_sum(x) + 0.5 * sq + 0.5 * a * (sp * sp - sq)
        grad = 1.0 + xp + a * (x > 0) * (sp[..., None] - xp)
    if not np.all(np.isfinite(val)):
        raise NonFiniteResultError("loss evaluation produced a non-finite value")
    return val, grad


def evaluate(loss: LossSpec, x) -> np.ndarray | float:
    """Loss value ``l(x)``."""
    x = np.asarray(x, dtype=float)
    _check_dim(loss, x)
    val, _ = _value_and_grad(loss, x)
    return val[()] if isinstance(val, np.ndarray) else val


def gradient(loss: LossSpec, x) -> np.ndarray:
    """Analytic gradient of ``l``; the positive part has derivative 0 at 0."""
    x = np.asarray(x, dtype=float)
    _check_dim(loss, x)
    return _value_and_grad(loss, x)[1]


def field(loss: LossSpec, x, z) -> np.ndarray:
    """``H(x, z) = (lambda * grad l(x - m) - 1, l(x - m))`` for ``z = (m, lambda)``.

    ``z`` has length ``d + 1`` with the multiplier last.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.shape[-1:] != (loss.d + 1,):
        raise ValueError(f"expected allocation point of length {loss.d + 1}, got shape {z.shape}")
    _check_dim(loss, x)
    val, g = _value_and_grad(loss, x - z[..., :-1])
    out = np.empty(np.broadcast_shapes(g.shape[:-1], z.shape[:-1]) + (loss.d + 1,))
    out[..., :-1] = z[..., -1:] * g - 1.0
    out[..., -1] = val
    return out
