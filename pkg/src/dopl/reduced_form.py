"""Ordered logit without fixed effects, used as an auxiliary reduced form.

It serves two purposes: starting values for the thresholds, and an
approximate law of ``Y`` given ``(Y_0, X)`` under which near-optimal
instruments are computed by enumeration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import EstimationError
from .model import IndexSpec, PanelDataset, Params, logistic_diff
from .moments import FamilyEvaluator
from .oracle import all_paths
from .paramspace import ParamSpace

__all__ = [
    "OrderedLogitFit",
    "ReducedFormModel",
    "fit_ordered_logit",
    "ordered_logit_mle",
    "period_design",
    "efficient_instruments",
    "optimal_instrument",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OrderedLogitFit:
    """``P(Y=q | Z) = Lambda(Z b - tau_{q-1}) - Lambda(Z b - tau_q)``."""

    b: np.ndarray
    tau: np.ndarray
    loglik: float
    grad_norm: float
    iterations: int

    def probs(self, Z) -> np.ndarray:
        eta = np.asarray(Z, dtype=float) @ self.b if self.b.size else np.zeros(np.shape(Z)[0])
        ext = np.concatenate([[-np.inf], self.tau, [np.inf]])
        return logistic_diff(eta[:, None] - ext[:-1], eta[:, None] - ext[1:])


def _loglik_parts(y, Z, b, tau, Q, want_hessian=True):
    """Log-likelihood, gradient and Hessian in ``(b, tau)``."""
    N, p = Z.shape
    eta = Z @ b if p else np.zeros(N)
    ext = np.concatenate([[-np.inf], tau, [np.inf]])
    a = eta - ext[y - 1]
    c = eta - ext[y]
    P = logistic_diff(a, c)
    if np.any(P <= 0):
        return -np.inf, None, None
    La, Lc = expit(a), expit(c)
    fa, fc = La * (1 - La), Lc * (1 - Lc)
    ga, gc = fa / P, fc / P
    ha, hc = fa * (1 - 2 * La) / P, fc * (1 - 2 * Lc) / P
    D = ga - gc
    # one-hot maps to tau_{y-1} and tau_y (absent at the extremes)
    E_lo = np.zeros((N, Q - 1))
    E_hi = np.zeros((N, Q - 1))
    rows = np.arange(N)
    lo_ok, hi_ok = y > 1, y < Q
    E_lo[rows[lo_ok], y[lo_ok] - 2] = 1.0
    E_hi[rows[hi_ok], y[hi_ok] - 1] = 1.0
    ll = float(np.sum(np.log(P)))
    grad = np.concatenate([Z.T @ D, -E_lo.T @ ga + E_hi.T @ gc])
    if not want_hessian:
        return ll, grad, None
    w_bb = ha - hc - D**2
    H_bb = (Z * w_bb[:, None]).T @ Z
    H_bt = (Z * (-ha + D * ga)[:, None]).T @ E_lo + (Z * (hc - D * gc)[:, None]).T @ E_hi
    cross = (E_lo * (ga * gc)[:, None]).T @ E_hi
    H_tt = (E_lo * (ha - ga**2)[:, None]).T @ E_lo + (E_hi * (-hc - gc**2)[:, None]).T @ E_hi + cross + cross.T
    H = np.block([[H_bb, H_bt], [H_bt.T, H_tt]])
    return ll, grad, H


def fit_ordered_logit(y, Z, Q: int, max_iter: int = 200, tol: float = 1e-9, label: str = "") -> OrderedLogitFit:
    """Maximum likelihood by damped Newton; the likelihood is concave in ``(b, tau)``."""
    y = np.asarray(y, dtype=int)
    Z = np.asarray(Z, dtype=float).reshape(y.size, -1)
    counts = np.bincount(y, minlength=Q + 1)[1:]
    missing = [q + 1 for q in range(Q) if counts[q] == 0]
    if missing:
        raise EstimationError(f"outcome level(s) {missing} never observed{label}; thresholds not identified")
    p = Z.shape[1]
    cum = np.cumsum(counts)[:-1] / y.size
    theta = np.concatenate([np.zeros(p), np.log(cum / (1 - cum))])
    ll, grad, H = _loglik_parts(y, Z, theta[:p], theta[p:], Q)
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(H, -grad)
        except np.linalg.LinAlgError:
            raise EstimationError(f"singular information matrix{label}") from None
        t = 1.0
        while True:
            cand = theta + t * step
            if np.all(np.diff(cand[p:]) > 0):
                ll_new, g_new, H_new = _loglik_parts(y, Z, cand[:p], cand[p:], Q)
                if ll_new >= ll - 1e-12 * abs(ll):
                    break
            t /= 2
            if t < 1e-12:
                raise EstimationError(f"line search failed{label}")
        theta, ll, grad, H = cand, ll_new, g_new, H_new
        if np.max(np.abs(grad)) < tol * max(1.0, y.size ** 0.5) or np.max(np.abs(t * step)) < 1e-13:
            break
    else:
        raise EstimationError(f"no convergence after {max_iter} Newton steps{label} (possible separation)")
    if np.max(np.abs(theta)) > 50:
        raise EstimationError(f"coefficients diverge{label} (possible separation)")
    return OrderedLogitFit(theta[:p], theta[p:], ll, float(np.linalg.norm(grad) / y.size), it)


def period_design(history, x_t, x_bar, Q: int) -> np.ndarray:
    """Regressors of the per-period reduced form.

    ``history`` holds the observed lags ``(Y_0, ..., Y_{t-1})`` column-wise;
    each lag contributes dummies for levels ``2..Q``.  Then ``X_t`` and the
    time average of ``X``.
    """
    history = np.asarray(history, dtype=int)
    if history.ndim == 1:
        history = history[:, None]
    levels = np.arange(2, Q + 1)
    dummies = (history[:, :, None] == levels).reshape(history.shape[0], -1).astype(float)
    return np.column_stack([dummies, x_t, x_bar])


@dataclass(frozen=True)
class ReducedFormModel:
    """Fitted reduced form.

    ``design="thresholds"``: one set of thresholds pooled over periods, no
    regressors.  ``design="per_period"``: a separate ordered logit for each
    period on :func:`period_design` regressors.
    """

    design: str
    Q: int
    T: int
    K: int
    fits: tuple

    @property
    def thresholds(self) -> np.ndarray:
        return self.fits[0].tau

    def transition(self, t: int, history, x_t, x_bar) -> np.ndarray:
        """``P(Y_t = . | Y_0..Y_{t-1} = history, X)``, shape (rows, Q); ``t`` is 1-based."""
        history = np.asarray(history, dtype=int)
        if history.ndim == 1:
            history = history[:, None]
        if self.design == "thresholds":
            return np.broadcast_to(self.fits[0].probs(np.zeros((1, 0))), (history.shape[0], self.Q))
        return self.fits[t - 1].probs(period_design(history, x_t, x_bar, self.Q))

    def path_law(self, y0: int, x) -> np.ndarray:
        """Probabilities of all ``Q^T`` paths (lexicographic order) for one unit."""
        return self.path_laws(np.array([y0]), np.asarray(x, dtype=float)[None])[0]

    def path_laws(self, y0, x) -> np.ndarray:
        """Path probabilities for many units, shape (n, Q^T)."""
        y0 = np.asarray(y0, dtype=int)
        x = np.asarray(x, dtype=float)
        n = y0.size
        paths = all_paths(self.Q, self.T)
        S = paths.shape[0]
        full = np.column_stack([np.repeat(y0, S), np.tile(paths, (n, 1))])
        x_bar = np.repeat(x.mean(axis=1), S, axis=0)
        out = np.ones(n * S)
        for t in range(1, self.T + 1):
            probs = self.transition(t, full[:, :t], np.repeat(x[:, t - 1], S, axis=0), x_bar)
            out *= probs[np.arange(n * S), full[:, t] - 1]
        return out.reshape(n, S)


def ordered_logit_mle(dataset: PanelDataset, design: str = "thresholds") -> ReducedFormModel:
    """Fit the reduced form to periods ``1..T`` of ``dataset``."""
    Q, T = dataset.Q, dataset.T
    if design == "thresholds":
        fit = fit_ordered_logit(dataset.y.ravel(), np.zeros((dataset.n * T, 0)), Q, label=" in pooled periods")
        return ReducedFormModel(design, Q, T, dataset.K, (fit,))
    if design != "per_period":
        raise ValueError(f"unknown design {design!r}")
    full = np.column_stack([dataset.y0, dataset.y])
    x_bar = dataset.x.mean(axis=1)
    fits = []
    for t in range(T):
        Z = period_design(full[:, : t + 1], dataset.x[:, t], x_bar, Q)
        # lag levels that never occur carry no information; park them at 0
        n_dummies = (t + 1) * (Q - 1)
        keep = np.ones(Z.shape[1], dtype=bool)
        keep[:n_dummies] = Z[:, :n_dummies].any(axis=0)
        fit = fit_ordered_logit(dataset.y[:, t], Z[:, keep], Q, label=f" in period {t + 1}")
        b = np.zeros(Z.shape[1])
        b[keep] = fit.b
        fits.append(OrderedLogitFit(b, fit.tau, fit.loglik, fit.grad_norm, fit.iterations))
    return ReducedFormModel(design, Q, T, dataset.K, tuple(fits))


def optimal_instrument(probs, m, dm, ridge: float = 1e-8) -> np.ndarray:
    """``E[dm]' (V[m] + ridge)^{-1}`` under discrete laws.

    ``probs`` has shape (S,) or (n, S), ``m`` (..., S, L) and ``dm``
    (..., S, L, p) over support points ``S``.  The ridge added to ``V`` is
    ``ridge * trace(V) / L``.  Returns (p, L), or (n, p, L) when batched.
    """
    probs = np.asarray(probs, dtype=float)
    single = probs.ndim == 1
    if single:
        probs, m, dm = probs[None], np.asarray(m)[None], np.asarray(dm)[None]
    mean_m = np.einsum("ns,nsl->nl", probs, m)
    centered = m - mean_m[:, None, :]
    V = np.einsum("ns,nsl,nsk->nlk", probs, centered, centered)
    L = V.shape[-1]
    tr = np.trace(V, axis1=1, axis2=2)
    bump = np.where(tr > 0, ridge * tr / L, ridge)
    V = V + bump[:, None, None] * np.eye(L)
    J = np.einsum("ns,nslp->nlp", probs, dm)
    try:
        out = np.swapaxes(np.linalg.solve(V, J), 1, 2)
    except np.linalg.LinAlgError:
        raise EstimationError("conditional moment variance is singular beyond the ridge") from None
    return out[0] if single else out


def moment_path_jacobian(family, y0, paths, x, params: Params, space: ParamSpace,
                         spec: IndexSpec = IndexSpec.LINEAR, rel_step: float = 1e-6):
    """Moment values and central-difference derivatives in natural free coordinates.

    ``y0`` is a scalar or one value per unit and ``x`` is (T, K) or (n, T, K).
    Returns ``m`` of shape ([n,] S, L) and ``dm`` of shape ([n,] S, L, p).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    xs = x[None] if single else x
    n, S = xs.shape[0], paths.shape[0]
    y0s = np.broadcast_to(np.asarray(y0, dtype=int), (n,))
    ev = FamilyEvaluator(family, np.repeat(y0s, S), np.tile(paths, (n, 1)),
                         np.repeat(xs, S, axis=0), params.Q, spec)
    theta = space.from_params(params)
    L = len(ev.family)
    m = ev.values(params).reshape(n, S, L)
    dm = np.empty((n, S, L, theta.size))
    for k in range(theta.size):
        h = rel_step * max(1.0, abs(theta[k]))
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        diff = ev.values(space.to_params(up, params.delta)) - ev.values(space.to_params(dn, params.delta))
        dm[..., k] = diff.reshape(n, S, L) / (2 * h)
    return (m[0], dm[0]) if single else (m, dm)


def efficient_instruments(dataset: PanelDataset, rf: ReducedFormModel, params: Params, family,
                          spec: IndexSpec = IndexSpec.LINEAR, ridge: float = 1e-8,
                          chunk: int = 256) -> np.ndarray:
    """Per-unit instrument matrices ``A(X_i)``, shape (n, p, L).

    Column ``j`` multiplies family member ``j``.  Members whose initial
    condition differs from the unit's are identically zero for that unit and
    receive zero weight.  Units are processed in chunks of equal ``Y_0`` to
    bound memory.
    """
    family = list(family)
    space = ParamSpace.for_params(params)
    paths = all_paths(dataset.Q, dataset.T)
    out = np.zeros((dataset.n, space.size, len(family)))
    by_y0 = {}
    for j, idx in enumerate(family):
        by_y0.setdefault(idx.y0, []).append(j)
    for y0, cols in by_y0.items():
        units = np.flatnonzero(dataset.y0 == y0)
        sub = [family[j] for j in cols]
        for start in range(0, units.size, chunk):
            part = units[start: start + chunk]
            m, dm = moment_path_jacobian(sub, y0, paths, dataset.x[part], params, space, spec)
            law = rf.path_laws(np.full(part.size, y0), dataset.x[part])
            out[np.ix_(part, np.arange(space.size), cols)] = optimal_instrument(law, m, dm, ridge)
    return out
