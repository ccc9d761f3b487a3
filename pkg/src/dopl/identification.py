"""Constructive identification on known conditional laws.

Everything here works on a :class:`CondLaw`, the distribution of
``(Y_1, Y_2, Y_3)`` given ``Y_0`` and ``X`` on a finite set of covariate
cells.  Laws are built exactly by mixing the model over a finite support of
the fixed effect, which makes the recovery steps checkable to machine
precision:

* :func:`recover_gamma` uses cells with time-constant covariates and reads
  ``exp(gamma)`` off the null vector of a ``Q x Q`` matrix of path
  probabilities.
* :func:`recover_beta` solves one equation per covariate sign pattern.
* :func:`recover_lambda` solves one increasing scalar equation per interior
  threshold.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import IdentificationError
from .model import IndexSpec, Params, extended_thresholds
from .moments import FamilyEvaluator, MomentIndex
from .oracle import _path_probs, all_paths

__all__ = [
    "CondLaw",
    "build_law",
    "default_cells",
    "b_matrix",
    "sign_pattern",
    "recover_gamma",
    "recover_beta",
    "recover_lambda",
    "identify_all",
]

log = logging.getLogger(__name__)

T_ID = 3


@dataclass(frozen=True)
class CondLaw:
    """Path probabilities for each ``(y0, cell)``.

    ``cells`` is a tuple of ``(3, K)`` covariate arrays.  ``probs[y0 - 1, c]``
    is the length ``Q^3`` vector over :func:`all_paths` order and
    ``mass[y0 - 1, c]`` is ``P(X = cell c | Y_0 = y0)``.
    """

    Q: int
    cells: tuple
    probs: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        mass = np.asarray(self.mass, dtype=float)
        C = len(self.cells)
        if probs.shape != (self.Q, C, self.Q**T_ID):
            raise ValueError(f"probs must have shape {(self.Q, C, self.Q ** T_ID)}")
        if mass.shape != (self.Q, C):
            raise ValueError(f"mass must have shape {(self.Q, C)}")
        if np.any(probs < 0) or not np.allclose(probs.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("each path law must be a probability vector")
        if np.any(mass < 0):
            raise ValueError("cell masses must be nonnegative")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "cells", tuple(np.asarray(c, dtype=float) for c in self.cells))

    @property
    def K(self) -> int:
        return self.cells[0].shape[1]

    def expectation(self, values, y0: int, cells) -> float:
        """``E[v(Y) | Y_0 = y0, X in cells]`` for per-cell path values ``values[c]`` (Q^3,)."""
        cells = list(cells)
        w = self.mass[y0 - 1, cells]
        if w.sum() <= 0:
            raise IdentificationError(f"conditioning set has zero mass for y0={y0}")
        total = sum(wc * float(self.probs[y0 - 1, c] @ values[k]) for k, (c, wc) in enumerate(zip(cells, w)))
        return total / w.sum()

    def event_prob(self, y0: int, cell: int, event) -> float:
        """Probability of the paths selected by the boolean mask ``event``."""
        return float(self.probs[y0 - 1, cell][event].sum())


def build_law(params: Params, cells, support, weights=None, mass=None,
              spec: IndexSpec = IndexSpec.LINEAR) -> CondLaw:
    """Mix the model over a finite fixed-effect ``support``.

    ``weights`` gives ``P(A = a | Y_0, X)``: ``None`` (uniform), a vector over
    the support, or a callable ``(y0, cell_index, x) -> vector``.  ``mass``
    defaults to equal cell probabilities.
    """
    Q = params.Q
    cells = [np.asarray(c, dtype=float).reshape(T_ID, -1) for c in cells]
    support = np.asarray(support, dtype=float)
    paths = all_paths(Q, T_ID)
    probs = np.empty((Q, len(cells), paths.shape[0]))
    for y0 in range(1, Q + 1):
        for c, x in enumerate(cells):
            if weights is None:
                w = np.full(support.size, 1.0 / support.size)
            elif callable(weights):
                w = np.asarray(weights(y0, c, x), dtype=float)
            else:
                w = np.asarray(weights, dtype=float)
            if w.shape != support.shape or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise ValueError("mixing weights must be a probability vector over the support")
            probs[y0 - 1, c] = w @ _path_probs(y0, x, support, params, spec, paths)
    if mass is None:
        mass = np.full((Q, len(cells)), 1.0 / len(cells))
    return CondLaw(Q, tuple(cells), probs, mass)


def default_cells(K: int, level: float = 0.0, spread: float = 1.0) -> list:
    """A time-constant cell plus one cell per sign pattern with a positive last entry.

    For coordinate ``k`` the pattern ``+`` uses ``(x_1, x_2, x_3) = (0, s, s/2)``
    and ``-`` the negated values, shifted by ``level``.  Patterns are ordered
    as in :func:`itertools.product` over ``(-, +)``.
    """
    cells = [np.full((T_ID, K), level)]
    for signs in itertools.product((-1.0, 1.0), repeat=K - 1):
        x = np.empty((T_ID, K))
        for k, sgn in enumerate(signs + (1.0,)):
            x[:, k] = level + sgn * spread * np.array([0.0, 1.0, 0.5])
        cells.append(x)
    return cells


def sign_pattern(x) -> tuple | None:
    """``+1``/``-1`` per coordinate, or ``None`` if some coordinate fits neither set.

    Coordinate ``k`` is ``+`` when ``x_1 <= x_3 < x_2`` or ``x_1 < x_3 <= x_2``,
    and ``-`` under the mirrored inequalities.
    """
    out = []
    for a, b, c in np.asarray(x, dtype=float).T:
        if (a <= c < b) or (a < c <= b):
            out.append(1)
        elif (a >= c > b) or (a > c >= b):
            out.append(-1)
        else:
            return None
    return tuple(out)


# -- gamma ---------------------------------------------------------------------


def _constant_cells(law):
    return [c for c, x in enumerate(law.cells) if np.allclose(x, x[0])]


def b_matrix(law: CondLaw, cell: int) -> np.ndarray:
    """Matrix ``B`` with ``B g = 0`` for ``g = exp(gamma)`` at a time-constant cell.

    Row ``y0`` collects the path probabilities multiplying ``g_1..g_Q`` in the
    conditional mean of the ``q1 = q2 = q3 = 1`` function (rescaled by
    ``exp(gamma_{y0})`` so that it is linear in ``g``).
    """
    Q = law.Q
    x = law.cells[cell]
    if not np.allclose(x, x[0]):
        raise IdentificationError("B is defined at a cell with time-constant covariates")
    paths = all_paths(Q, T_ID)
    y1, y2, y3 = paths.T
    B = np.zeros((Q, Q))
    leave = (y1 == 1) & (y2 > 1)
    for y0 in range(1, Q + 1):
        B[y0 - 1, 0] = law.event_prob(y0, cell, (y1 > 1) & (y2 == 1) & (y3 == 1))
        for q in range(2, Q + 1):
            B[y0 - 1, q - 1] = law.event_prob(y0, cell, (y1 == q) & (y2 == 1) & (y3 > 1))
        B[y0 - 1, y0 - 1] -= law.event_prob(y0, cell, leave)
    return B


def recover_gamma(law: CondLaw, cell: int | None = None, tol: float = 1e-9) -> np.ndarray:
    """State dependence normalized to ``gamma_1 = 0``.

    The null vector of ``B`` is taken as the right singular vector of the
    smallest singular value, sign-fixed to be positive.
    """
    if cell is None:
        const = _constant_cells(law)
        if not const:
            raise IdentificationError("no cell with time-constant covariates")
        cell = const[0]
    if np.any(law.mass[:, cell] <= 0):
        raise IdentificationError("the time-constant cell needs positive mass for every initial condition")
    B = b_matrix(law, cell)
    off = B[~np.eye(law.Q, dtype=bool)]
    if np.any(off <= 0):
        raise IdentificationError("B has non-positive off-diagonal entries; the law is not regular")
    _, sv, vt = np.linalg.svd(B)
    scale = sv[0] if sv[0] > 0 else 1.0
    if sv[-1] > tol * scale:
        raise IdentificationError(f"B has no null vector (smallest singular value {sv[-1] / scale:.2e} relative)")
    if law.Q > 1 and sv[-2] <= tol * scale:
        raise IdentificationError("null space of B has dimension above one")
    g = vt[-1]
    g = g * np.sign(g[np.argmax(np.abs(g))])
    if np.any(g <= 0):
        raise IdentificationError("null vector of B is not positive")
    return np.log(g) - np.log(g[0])


# -- beta ----------------------------------------------------------------------


def _path_evaluator(law, idx, cells):
    """Evaluator for one function over every path, one block of paths per cell."""
    paths = all_paths(law.Q, T_ID)
    S = paths.shape[0]
    x = np.concatenate([np.broadcast_to(law.cells[c], (S,) + law.cells[c].shape) for c in cells])
    return FamilyEvaluator([idx], np.full(S * len(cells), idx.y0), np.tile(paths, (len(cells), 1)), x, law.Q)


def _pattern_cells(law, y0):
    groups: dict[tuple, list[int]] = {}
    for c, x in enumerate(law.cells):
        pat = sign_pattern(x)
        if pat is not None and law.mass[y0 - 1, c] > 0:
            groups.setdefault(pat, []).append(c)
    return groups


def _path_values(ev, n_cells, params, lam_ext=None):
    return ev.bases(params, lam_ext)[:, 0].reshape(n_cells, -1)


def recover_beta(law: CondLaw, gamma, y0: int = 1, cells=None, tol: float = 1e-10,
                 max_iter: int = 200) -> np.ndarray:
    """Regression coefficients given ``gamma``.

    ``cells`` maps sign patterns (tuples of ``+-1`` with last entry ``+1``) to
    lists of cell indices; by default every cell is classified with
    :func:`sign_pattern`.  ``K = 1`` is solved by bracketing, larger ``K`` by
    damped Gauss-Newton on the ``2^(K-1)`` equations.
    """
    K = law.K
    gamma = np.asarray(gamma, dtype=float)
    if cells is None:
        cells = _pattern_cells(law, y0)
    patterns = [p + (1,) for p in itertools.product((-1, 1), repeat=K - 1)]
    missing = [p for p in patterns if not cells.get(p)]
    if missing:
        raise IdentificationError(f"insufficient covariate variation: no cells with sign pattern(s) {missing}")
    lam = np.arange(law.Q - 1, dtype=float)
    idx = MomentIndex(y0, 1, 1, 1)
    evs = [(_path_evaluator(law, idx, cells[p]), cells[p]) for p in patterns]

    def residual(beta):
        params = Params(beta, gamma, lam)
        out = []
        for ev, cs in evs:
            vals = _path_values(ev, len(cs), params)
            out.append(law.expectation(vals, y0, cs))
        return np.array(out)

    if K == 1:
        return np.array([_bracket_root(lambda b: residual(np.array([b]))[0], tol)])
    beta = np.zeros(K)
    r = residual(beta)
    for _ in range(max_iter):
        J = _fd(residual, beta, r)
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        t = 1.0
        while t > 1e-8:
            cand = beta + t * step
            r_new = residual(cand)
            if np.all(np.isfinite(r_new)) and np.linalg.norm(r_new) < np.linalg.norm(r):
                break
            t /= 2
        else:
            break
        beta, r = cand, r_new
        if np.max(np.abs(t * step)) < tol:
            break
    else:
        raise IdentificationError(f"beta equations did not converge in {max_iter} iterations")
    if np.max(np.abs(r)) > 1e-8:
        raise IdentificationError(f"beta equations have no root (residual {np.max(np.abs(r)):.2e})")
    return beta


def _fd(fun, x, f0, h=1e-7):
    J = np.empty((f0.size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h * max(1.0, abs(x[k]))
        J[:, k] = (fun(x + e) - fun(x - e)) / (2 * e[k])
    return J


def _bracket_root(f, tol, start=1.0, limit=200.0):
    """Root of an increasing or decreasing scalar function by bracket expansion plus Brent."""
    lo, hi = -start, start
    flo, fhi = f(lo), f(hi)
    while np.sign(flo) == np.sign(fhi):
        if hi >= limit:
            raise IdentificationError("no sign change found in bracket; insufficient covariate variation")
        lo, hi = 2 * lo, 2 * hi
        flo, fhi = f(lo), f(hi)
    return optimize.brentq(f, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps)


# -- lambda --------------------------------------------------------------------


def recover_lambda(law: CondLaw, beta, gamma, y0: int = 1, tol: float = 1e-10) -> np.ndarray:
    """Thresholds normalized to ``lambda_1 = 0``.

    For ``Q = 2`` there is nothing to solve and ``[0.0]`` is returned.
    """
    Q = law.Q
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    out = np.zeros(Q - 1)
    if Q == 2:
        log.info("Q=2: the single threshold is fixed by normalization")
        return out
    cells = [c for c in range(len(law.cells)) if law.mass[y0 - 1, c] > 0]
    if not cells:
        raise IdentificationError(f"no cells with positive mass for y0={y0}")
    params = Params(beta, gamma, np.arange(Q - 1, dtype=float))
    base_ext = extended_thresholds(params.lam)
    for q1 in range(2, Q):
        ev = _path_evaluator(law, MomentIndex(y0, q1, 1, 1), cells)

        def g(d, q1=q1, ev=ev):
            # only lambda_{q1} - lambda_1 enters this function
            ext = base_ext.copy()
            ext[1], ext[q1] = 0.0, d
            return law.expectation(_path_values(ev, len(cells), params, ext), y0, cells)

        lo, hi = -1.0, 1.0
        while g(lo) > 0:
            lo *= 2
            if lo < -1e3:
                raise IdentificationError(f"lambda_{q1}: no bracket below")
        while g(hi) < 0:
            hi *= 2
            if hi > 1e3:
                raise IdentificationError(f"lambda_{q1}: no bracket above")
        out[q1 - 1] = optimize.bisect(g, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500)
    return out


def identify_all(law: CondLaw, y0: int = 1) -> Params:
    """Run the three recovery steps in order."""
    gamma = recover_gamma(law)
    beta = recover_beta(law, gamma, y0)
    lam = recover_lambda(law, beta, gamma, y0)
    return Params(beta, gamma, lam, gamma_norm=1, lambda_norm=1)
