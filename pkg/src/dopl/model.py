"""Model primitives for the dynamic ordered panel logit model.

Outcome levels are 1-based everywhere in the public API, matching the usual
notation ``Y_it in {1, ..., Q}``.  Thresholds are stored as ``lam`` (length
``Q - 1``); the implicit outer thresholds are ``-inf`` and ``+inf``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "IndexSpec",
    "Params",
    "PanelDataset",
    "logistic_cdf",
    "logistic_diff",
    "single_index",
    "transition_probs",
    "path_probability",
    "extended_thresholds",
]


class IndexSpec(enum.Enum):
    """Functional form of the single index ``z(y_prev, x_t, theta)``."""

    LINEAR = "linear"
    INTERACTED = "interacted"


def _as_vector(values, name):
    arr = np.array(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Params:
    """Common parameter ``theta = (beta, gamma, lambda)``.

    Parameters
    ----------
    beta : array_like, shape (K,)
        Coefficients on the strictly exogenous regressors.
    gamma : array_like, shape (Q,)
        State-dependence shifts, one per level of the lagged outcome.
    lam : array_like, shape (Q - 1,)
        Strictly increasing thresholds ``lambda_1 < ... < lambda_{Q-1}``.
    delta : array_like, shape (Q, K), optional
        Interaction coefficients for :attr:`IndexSpec.INTERACTED`.
    gamma_norm, lambda_norm : int, optional
        1-based positions pinned to zero.  ``None`` means no normalization.
    """

    beta: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    delta: np.ndarray | None = None
    gamma_norm: int | None = None
    lambda_norm: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta", _as_vector(self.beta, "beta"))
        object.__setattr__(self, "gamma", _as_vector(self.gamma, "gamma"))
        object.__setattr__(self, "lam", _as_vector(self.lam, "lam"))
        Q = self.gamma.size
        if Q < 2:
            raise ValueError("gamma must have length Q >= 2")
        if self.lam.size != Q - 1:
            raise ValueError(f"lam must have length Q-1={Q - 1}, got {self.lam.size}")
        if np.any(np.diff(self.lam) <= 0):
            raise ValueError(f"thresholds must be strictly increasing, got {self.lam}")
        if self.delta is not None:
            delta = np.array(self.delta, dtype=float)
            if delta.shape != (Q, self.beta.size):
                raise ValueError(f"delta must have shape {(Q, self.beta.size)}, got {delta.shape}")
            if not np.all(np.isfinite(delta)):
                raise ValueError("delta must be finite")
            delta.setflags(write=False)
            object.__setattr__(self, "delta", delta)
        if self.gamma_norm is not None:
            if not 1 <= self.gamma_norm <= Q:
                raise ValueError(f"gamma_norm must be in 1..{Q}")
            if self.gamma[self.gamma_norm - 1] != 0.0:
                raise ValueError(f"gamma[{self.gamma_norm}] must be 0 under normalization")
        if self.lambda_norm is not None:
            if not 1 <= self.lambda_norm <= Q - 1:
                raise ValueError(f"lambda_norm must be in 1..{Q - 1}")
            if self.lam[self.lambda_norm - 1] != 0.0:
                raise ValueError(f"lam[{self.lambda_norm}] must be 0 under normalization")

    def __eq__(self, other):
        if not isinstance(other, Params):
            return NotImplemented
        same = lambda a, b: (a is None and b is None) or (  # noqa: E731
            a is not None and b is not None and np.array_equal(a, b))
        return (same(self.beta, other.beta) and same(self.gamma, other.gamma) and same(self.lam, other.lam)
                and same(self.delta, other.delta) and self.gamma_norm == other.gamma_norm
                and self.lambda_norm == other.lambda_norm)

    __hash__ = None

    @property
    def Q(self) -> int:
        return self.gamma.size

    @property
    def K(self) -> int:
        return self.beta.size

    def normalized(self, gamma_norm: int | None, lambda_norm: int | None) -> "Params":
        """Shift gamma and lambda so the requested entries are zero."""
        gamma = self.gamma.copy()
        lam = self.lam.copy()
        if gamma_norm is not None:
            gamma = gamma - gamma[gamma_norm - 1]
            gamma[gamma_norm - 1] = 0.0
        if lambda_norm is not None:
            lam = lam - lam[lambda_norm - 1]
            lam[lambda_norm - 1] = 0.0
        return Params(self.beta, gamma, lam, self.delta, gamma_norm, lambda_norm)

    def reversed(self) -> "Params":
        """Parameters of the model with outcome labels reversed (y -> Q+1-y)."""
        delta = None if self.delta is None else self.delta[::-1]
        return Params(-self.beta, -self.gamma[::-1], -self.lam[::-1], delta)

    def vector(self) -> np.ndarray:
        """Stack as ``(beta, gamma, lam)``."""
        return np.concatenate([self.beta, self.gamma, self.lam])

    def names(self) -> list[str]:
        return (
            [f"beta{k + 1}" for k in range(self.K)]
            + [f"gamma{q + 1}" for q in range(self.Q)]
            + [f"lambda{q + 1}" for q in range(self.Q - 1)]
        )


def extended_thresholds(lam) -> np.ndarray:
    """Return ``(lambda_0, ..., lambda_Q)`` with ``lambda_0=-inf``, ``lambda_Q=+inf``."""
    return np.concatenate([[-np.inf], np.asarray(lam, dtype=float), [np.inf]])


def logistic_cdf(u):
    """Logistic CDF, exact at ``+-inf``."""
    return expit(u)


def logistic_diff(a, b):
    """``Lambda(a) - Lambda(b)`` for ``a >= b`` without cancellation.

    Uses ``Lambda(a) - Lambda(b) = -Lambda(a) * Lambda(-b) * expm1(b - a)``.
    Either argument may be infinite, but not both with the same sign.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    with np.errstate(invalid="ignore"):
        gap = b - a
    return -expit(a) * expit(-b) * np.expm1(gap)


def _check_level(level, Q):
    arr = np.asarray(level)
    if np.any((arr < 1) | (arr > Q)):
        raise ValueError(f"outcome level out of range 1..{Q}: {level}")


def single_index(y_prev, x_t, params: Params, spec: IndexSpec = IndexSpec.LINEAR):
    """Single index ``z(y_prev, x_t, theta)``.

    ``y_prev`` and the leading axes of ``x_t`` broadcast; the last axis of
    ``x_t`` is the covariate axis.
    """
    _check_level(y_prev, params.Q)
    return _index(np.asarray(y_prev), np.asarray(x_t, dtype=float), params.beta,
                  params.gamma, params.delta, spec)


def _index(y_prev, x_t, beta, gamma, delta, spec):
    xb = x_t @ beta
    g = gamma[y_prev - 1]
    if spec is IndexSpec.INTERACTED:
        if delta is None:
            raise ValueError("interacted index requires delta")
        xd = np.einsum("...k,...k->...", x_t, delta[y_prev - 1])
        return xb + g * (1.0 + xd)
    return xb + g


def _level_probs(u, lam_ext):
    """Probabilities of levels 1..Q at latent index ``u`` (last axis = level)."""
    u = np.asarray(u, dtype=float)[..., None]
    with np.errstate(invalid="ignore"):
        upper = u - lam_ext[:-1]
        lower = u - lam_ext[1:]
    probs = logistic_diff(upper, lower)
    # u = +-inf degenerates to a point mass on the extreme level
    pos = np.isposinf(u[..., 0])
    neg = np.isneginf(u[..., 0])
    if pos.any() or neg.any():
        Q = lam_ext.size - 1
        probs = np.where(pos[..., None], np.eye(Q)[-1], probs)
        probs = np.where(neg[..., None], np.eye(Q)[0], probs)
    return probs


def transition_probs(y_prev, x_t, alpha, params: Params, spec: IndexSpec = IndexSpec.LINEAR):
    """Distribution of ``Y_t`` given ``Y_{t-1}=y_prev``, ``X_t=x_t`` and ``A=alpha``.

    Returns a length-``Q`` vector (or an array with trailing axis ``Q`` when
    inputs are batched).  ``alpha`` may be ``+-inf``.
    """
    z = single_index(y_prev, x_t, params, spec)
    return _level_probs(z + np.asarray(alpha, dtype=float), extended_thresholds(params.lam))


def path_probability(y0, y, x, alpha, params: Params, spec: IndexSpec = IndexSpec.LINEAR):
    """Probability of the outcome path ``y`` given ``y0``, ``x`` and ``alpha``.

    Parameters
    ----------
    y0 : int
    y : array_like, shape (T,)
    x : array_like, shape (T, K)
    alpha : float, may be infinite
    """
    y = np.asarray(y, dtype=int)
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.size or x.shape[1] != params.K:
        raise ValueError(f"x must have shape ({y.size}, {params.K}), got {x.shape}")
    _check_level(y0, params.Q)
    _check_level(y, params.Q)
    lags = np.concatenate([[y0], y[:-1]])
    z = _index(lags, x, params.beta, params.gamma, params.delta, spec)
    probs = _level_probs(z + float(alpha), extended_thresholds(params.lam))
    return float(np.prod(probs[np.arange(y.size), y - 1]))


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel: initial conditions, outcomes and covariates.

    Attributes
    ----------
    y0 : ndarray of int, shape (n,)
    y : ndarray of int, shape (n, T)
    x : ndarray of float, shape (n, T, K)
        Covariates for periods ``1..T``.
    Q : int
        Number of outcome levels.
    """

    y0: np.ndarray
    y: np.ndarray
    x: np.ndarray
    Q: int

    def __post_init__(self):
        y0 = np.array(self.y0)
        y = np.array(self.y)
        x = np.array(self.x, dtype=float)
        if not (np.issubdtype(y0.dtype, np.integer) and np.issubdtype(y.dtype, np.integer)):
            raise ValueError("outcomes must be integers")
        if y0.ndim != 1 or y.ndim != 2 or x.ndim != 3:
            raise ValueError("expected y0 (n,), y (n, T), x (n, T, K)")
        n = y0.size
        if n < 1:
            raise ValueError("panel must contain at least one unit")
        if y.shape[0] != n or x.shape[:2] != y.shape:
            raise ValueError(f"inconsistent shapes y0{y0.shape} y{y.shape} x{x.shape}")
        if self.Q < 2:
            raise ValueError("Q must be >= 2")
        for arr, name in ((y0, "y0"), (y, "y")):
            if np.any((arr < 1) | (arr > self.Q)):
                raise ValueError(f"{name} has values outside 1..{self.Q}")
        if not np.all(np.isfinite(x)):
            raise ValueError("covariates must be finite")
        y0 = y0.astype(int, copy=False)
        y = y.astype(int, copy=False)
        for arr in (y0, y, x):
            arr.setflags(write=False)
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y0.size

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def K(self) -> int:
        return self.x.shape[2]

    def lags(self) -> np.ndarray:
        """Lagged outcomes ``(Y_0, ..., Y_{T-1})``, shape (n, T)."""
        return np.column_stack([self.y0, self.y[:, :-1]])

    def subset(self, rows) -> "PanelDataset":
        return PanelDataset(self.y0[rows], self.y[rows], self.x[rows], self.Q)
