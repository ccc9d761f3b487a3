"""Brute-force verification by exact enumeration of the outcome space.

Nothing here is used by estimation.  These routines answer three questions
directly: does a function have conditional mean zero for every value of the
fixed effect, how many linearly independent such functions exist, and do the
auxiliary two-variable identities behind the moment functions hold.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import flint
import numpy as np

from .errors import EnumerationLimitError
from .model import IndexSpec, Params, _level_probs, extended_thresholds
from .moments import FamilyEvaluator, MomentIndex, enumerate_indices, index_tables

__all__ = [
    "AlphaGrid",
    "LemmaKernel",
    "all_paths",
    "compensated_sum",
    "conditional_expectation",
    "expectation_grid",
    "default_rank_grid",
    "rational_orthogonal",
    "probability_matrix",
    "valid_space_dimension",
    "moment_vectors",
    "random_lemma_kernel",
    "lemma_kernel_check",
    "lemma_kernel_draws",
    "random_design",
    "validity_check",
    "ValidityReport",
]

ENUMERATION_LIMIT = 10**7
RANK_LIMIT = 10**4


@dataclass(frozen=True)
class AlphaGrid:
    """Fixed-effect values at which to evaluate; may contain ``+-inf``."""

    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("alpha grid must be nonempty")
        if any(math.isnan(v) for v in vals):
            raise ValueError("alpha grid contains NaN")
        finite = [v for v in vals if math.isfinite(v)]
        if finite != sorted(finite):
            raise ValueError("finite alpha values must be sorted")
        object.__setattr__(self, "values", vals)

    @classmethod
    def chebyshev(cls, n: int = 41, half_width: float = 20.0, infinities: bool = True) -> "AlphaGrid":
        """``n`` Chebyshev nodes on ``[-half_width, half_width]``, optionally with ``+-inf``."""
        k = np.arange(n)
        nodes = np.sort(half_width * np.cos(np.pi * (k + 0.5) / n))
        vals = list(nodes)
        if infinities:
            vals = [-math.inf] + vals + [math.inf]
        return cls(tuple(vals))

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


def all_paths(Q: int, T: int) -> np.ndarray:
    """Every outcome path in ``{1..Q}^T`` in lexicographic order, shape (Q^T, T)."""
    if Q**T > ENUMERATION_LIMIT:
        raise EnumerationLimitError(f"Q^T = {Q**T} exceeds the enumeration limit {ENUMERATION_LIMIT}")
    grids = np.indices((Q,) * T).reshape(T, -1).T
    return grids + 1


def compensated_sum(values, axis: int = 0) -> np.ndarray | float:
    """Correctly rounded sum along ``axis`` (``math.fsum`` per lane)."""
    arr = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    if arr.ndim == 1:
        return math.fsum(arr)
    flat = arr.reshape(-1, arr.shape[-1])
    out = np.array([math.fsum(row) for row in flat])
    return out.reshape(arr.shape[:-1])


def _path_probs(y0, x, alphas, params, spec, paths):
    """Path probabilities, shape (len(alphas), Q^T)."""
    T = paths.shape[1]
    x = np.asarray(x, dtype=float).reshape(1, T, -1)
    z_all, _ = index_tables([y0], paths[:1], x, params, spec)
    lam_ext = extended_thresholds(params.lam)
    alphas = np.asarray(alphas, dtype=float)
    # trans[a, t, lag, level]
    trans = _level_probs(z_all[0][None, :, :] + alphas[:, None, None], lam_ext)
    lags = np.column_stack([np.full(paths.shape[0], y0), paths[:, :-1]]) - 1
    out = np.ones((alphas.size, paths.shape[0]))
    for t in range(T):
        out *= trans[:, t, lags[:, t], paths[:, t] - 1]
    return out


def conditional_expectation(fn, y0: int, x, alpha, params: Params,
                            spec: IndexSpec = IndexSpec.LINEAR):
    """``E[fn(Y) | Y_0=y0, X=x, A=alpha]`` by summing over all ``Q^T`` paths.

    ``fn`` is a :class:`MomentIndex`, a list of them (returns an array), or a
    callable mapping a (Q^T, T) array of paths to values of shape (Q^T,) or
    (Q^T, L).
    """
    x = np.asarray(x, dtype=float)
    T = x.shape[0]
    paths = all_paths(params.Q, T)
    probs = _path_probs(y0, x, [alpha], params, spec, paths)[0]
    vals = _evaluate_on_paths(fn, y0, x, params, spec, paths)
    terms = probs[:, None] * vals.reshape(paths.shape[0], -1)
    out = compensated_sum(terms, axis=0)
    if isinstance(fn, MomentIndex) or (callable(fn) and vals.ndim == 1):
        return float(out[0])
    return out


def expectation_grid(family, y0: int, x, grid: AlphaGrid, params: Params,
                     spec: IndexSpec = IndexSpec.LINEAR) -> np.ndarray:
    """Conditional means of every family member at every grid value, shape (len(grid), L)."""
    x = np.asarray(x, dtype=float)
    paths = all_paths(params.Q, x.shape[0])
    vals = _evaluate_on_paths(list(family), y0, x, params, spec, paths)
    probs = _path_probs(y0, x, list(grid), params, spec, paths)
    terms = probs[:, :, None] * vals[None, :, :]
    return compensated_sum(terms, axis=1)


def _evaluate_on_paths(fn, y0, x, params, spec, paths):
    if isinstance(fn, MomentIndex):
        fn = [fn]
    if callable(fn):
        return np.asarray(fn(paths), dtype=float)
    N, T = paths.shape
    ev = FamilyEvaluator(fn, np.full(N, y0), paths, np.broadcast_to(x, (N,) + x.shape), params.Q, spec)
    return ev.values(params)


def moment_vectors(family, y0: int, x, params: Params, spec: IndexSpec = IndexSpec.LINEAR) -> np.ndarray:
    """Moment functions as vectors over the outcome space, shape (L, Q^T)."""
    x = np.asarray(x, dtype=float)
    paths = all_paths(params.Q, x.shape[0])
    return _evaluate_on_paths(list(family), y0, x, params, spec, paths).T


def probability_matrix(y0: int, x, params: Params, grid: AlphaGrid,
                       spec: IndexSpec = IndexSpec.LINEAR) -> np.ndarray:
    """Rows ``p(. | y0, x, alpha)`` over the outcome space, one per grid value."""
    x = np.asarray(x, dtype=float)
    paths = all_paths(params.Q, x.shape[0])
    return _path_probs(y0, x, list(grid), params, spec, paths)


def random_design(Q: int, T: int, K: int, rng):
    """Moderate random ``(params, x)``: ``beta, gamma ~ U(-1, 1)``, threshold gaps ``U(0.3, 1.5)``, ``x ~ N(0, 1)``."""
    gaps = rng.uniform(0.3, 1.5, size=Q - 1)
    lam = np.cumsum(gaps) - gaps.sum() / 2
    params = Params(rng.uniform(-1, 1, size=K), rng.uniform(-1, 1, size=Q), lam)
    return params, rng.standard_normal((T, K))


@dataclass(frozen=True)
class ValidityReport:
    Q: int
    T: int
    draws: int
    functions: int
    max_abs: float
    worst: tuple


def validity_check(Q: int, T: int, draws: int, seed: int, K: int = 2, grid: AlphaGrid | None = None,
                   boundary_gaps: bool = True) -> ValidityReport:
    """Largest ``|E[m | y0, x, alpha]|`` over random designs, every initial condition and a grid of alpha."""
    grid = grid or AlphaGrid.chebyshev(41)
    rng = np.random.default_rng(seed)
    worst, where, count = 0.0, None, 0
    for d in range(draws):
        params, x = random_design(Q, T, K, rng)
        for y0 in range(1, Q + 1):
            fam = enumerate_indices(Q, T, y0=y0, boundary_gaps=boundary_gaps)
            count = max(count, len(fam))
            e = np.abs(expectation_grid(fam, y0, x, grid, params))
            k = np.unravel_index(int(np.argmax(e)), e.shape)
            if e[k] > worst:
                worst, where = float(e[k]), (d, fam[k[1]].label(), grid.values[k[0]])
    return ValidityReport(Q, T, draws, count, worst, where)


def _fq(v: float):
    num, den = float(v).as_integer_ratio()
    return flint.fmpq(num, den)


def _exact_probability_rows(y0, x, params, grid, spec):
    """Probability matrix in exact rational arithmetic.

    Every exponential is rounded once to a double and then treated as exact,
    so the rows are the exact path laws of a logit model whose parameters
    differ from ``params`` by rounding error.  Rank is a generic property, so
    this does not change the answer for generic inputs.
    """
    Q = params.Q
    T = x.shape[0]
    z_all, _ = index_tables([y0], np.ones((1, T), dtype=int), x.reshape(1, T, -1), params, spec)
    ez = [[_fq(np.exp(z_all[0, t, q])) for q in range(Q)] for t in range(T)]
    el = [_fq(np.exp(v)) for v in params.lam]
    one, zero = flint.fmpq(1), flint.fmpq(0)
    paths = list(itertools.product(range(1, Q + 1), repeat=T))
    rows = []
    for alpha in grid:
        if alpha == math.inf:
            rows.append([one if all(v == Q for v in p) else zero for p in paths])
            continue
        u = zero if alpha == -math.inf else _fq(np.exp(alpha))
        # cdf[t][lag][k] = P(Y*_t > lambda_k), k = 0..Q with the outer ones exact
        cdf = []
        for t in range(T):
            per_lag = []
            for lag in range(Q):
                w = ez[t][lag] * u
                inner = [(w / e) / (one + w / e) for e in el]
                per_lag.append([one] + inner + [zero])
            cdf.append(per_lag)
        row = []
        for p in paths:
            prob, lag = one, y0
            for t, level in enumerate(p):
                c = cdf[t][lag - 1]
                prob *= c[level - 1] - c[level]
                lag = level
            row.append(prob)
        rows.append(row)
    return flint.fmpq_mat(rows)


def default_rank_grid(Q: int, T: int) -> AlphaGrid:
    """Chebyshev grid with at least ``max(41, 2 Q^T)`` finite nodes plus ``+-inf``."""
    return AlphaGrid.chebyshev(max(41, 2 * Q**T))


def valid_space_dimension(Q: int, T: int, y0: int, x, params: Params, grid: AlphaGrid | None = None,
                          spec: IndexSpec = IndexSpec.LINEAR, method: str = "exact",
                          tol: float = 1e-9, mixing=None) -> int:
    """Dimension of the space of functions of ``Y`` with zero mean at every grid value.

    Equals ``Q^T`` minus the rank of the probability matrix.  ``method="exact"``
    computes the rank over the rationals; ``method="svd"`` uses double
    precision singular values below ``tol * max`` as zero, which is only
    reliable for very small ``Q^T``.  ``mixing`` optionally left-multiplies
    the rows by a (rational, for the exact method) matrix before the rank.
    """
    if Q != params.Q:
        raise ValueError("Q disagrees with params")
    x = np.asarray(x, dtype=float)
    if x.shape[0] != T:
        raise ValueError(f"x must have {T} rows")
    if Q**T > RANK_LIMIT:
        raise EnumerationLimitError(f"Q^T = {Q**T} exceeds the rank limit {RANK_LIMIT}")
    if grid is None:
        grid = default_rank_grid(Q, T)
    if method == "exact":
        P = _exact_probability_rows(y0, x, params, grid, spec)
        if mixing is not None:
            P = mixing * P
        return Q**T - P.rank()
    if method == "svd":
        P = probability_matrix(y0, x, params, grid, spec)
        if mixing is not None:
            P = np.asarray(mixing, dtype=float) @ P
        sv = np.linalg.svd(P, compute_uv=False)
        return Q**T - int(np.sum(sv > tol * sv[0]))
    raise ValueError(f"unknown method {method!r}")


def rational_orthogonal(n: int, rng, scale: int = 5):
    """Random exact orthogonal matrix via the Cayley transform of a skew matrix."""
    S = flint.fmpq_mat(n, n)
    for i in range(n):
        for j in range(i + 1, n):
            v = flint.fmpq(int(rng.integers(-scale, scale + 1)), int(rng.integers(1, scale + 1)))
            S[i, j] = v
            S[j, i] = -v
    eye = flint.fmpq_mat(n, n)
    for i in range(n):
        eye[i, i] = 1
    return (eye - S) * (eye + S).inv()


# -- auxiliary two-variable identities -----------------------------------------


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


@dataclass(frozen=True)
class LemmaKernel:
    """Joint law of a small Markov-type system with partly logistic transitions.

    ``kind="lemma1"``: ``Y1 in {0,1} -> W -> Y2 in {1,2,3} -> Y3 in {0,1}`` with
    logistic ``Y1``, ordered-logistic ``Y2 | W`` (indices ``pi21 >= pi22``) and
    logistic ``Y3 | Y2=2`` (index ``pi3``).  ``f`` is ``W | Y1`` (2 x Q);
    ``p3_other`` holds ``P(Y3=1 | Y2, W)`` for ``Y2 in {1, 3}`` (2 x Q).

    ``kind="lemma2"``: ``Y1 -> W -> Y2 in {0,1} -> V -> Y3 in {0,1}`` with
    logistic links ``pi1``, ``pi2(W)``, ``pi3(V)``.  ``g[y2, w, v]`` is
    ``V | Y2, W`` and must not depend on ``w`` when ``y2=1``.
    """

    kind: str
    Q: int
    pi1: float
    f: np.ndarray
    pi3: object = None
    pi21: np.ndarray | None = None
    pi22: np.ndarray | None = None
    p3_other: np.ndarray | None = None
    pi2: np.ndarray | None = None
    g: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def validate(self, require_assumptions: bool = True) -> None:
        Q = self.Q
        _check_stochastic(self.f, (2, Q), "f")
        if self.kind == "lemma1":
            if self.pi21 is None or self.pi22 is None or self.p3_other is None:
                raise ValueError("lemma1 kernel needs pi21, pi22, p3_other")
            if np.any(np.asarray(self.pi21) <= np.asarray(self.pi22)):
                raise ValueError("lemma1 kernel needs pi21 > pi22 elementwise")
            p3 = np.asarray(self.p3_other)
            if p3.shape != (2, Q) or np.any((p3 < 0) | (p3 > 1)):
                raise ValueError("p3_other must be 2 x Q probabilities")
        elif self.kind == "lemma2":
            if self.pi2 is None or self.g is None:
                raise ValueError("lemma2 kernel needs pi2, g")
            g = np.asarray(self.g)
            if g.shape != (2, Q, Q):
                raise ValueError("g must have shape (2, Q, Q)")
            _check_stochastic(g.reshape(2 * Q, Q), (2 * Q, Q), "g")
            if require_assumptions and not np.allclose(g[1], g[1][0], rtol=0, atol=0):
                raise ValueError("lemma2 kernel needs g(v | 1, w) independent of w")
        else:
            raise ValueError(f"unknown lemma kind {self.kind!r}")

    def expectation(self) -> float:
        """``E[m]`` by exact summation over the joint support."""
        if self.kind == "lemma1":
            return _lemma1_expectation(self)
        return _lemma2_expectation(self)


def _check_stochastic(table, shape, name):
    arr = np.asarray(table, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}")
    if np.any(arr < 0) or not np.allclose(arr.sum(axis=-1), 1.0, atol=1e-12):
        raise ValueError(f"{name} rows must be probability vectors")


def _lemma1_expectation(k: LemmaKernel) -> float:
    pi1, pi3 = k.pi1, float(k.pi3)
    terms = []
    for y1 in (0, 1):
        p1 = _sig(pi1) if y1 == 1 else 1.0 - _sig(pi1)
        for w in range(k.Q):
            a, b = float(k.pi21[w]), float(k.pi22[w])
            p2 = (1.0 - _sig(a), _sig(a) - _sig(b), _sig(b))
            for y2 in (1, 2, 3):
                for y3 in (0, 1):
                    if y2 == 2:
                        p3 = _sig(pi3) if y3 == 1 else 1.0 - _sig(pi3)
                    else:
                        q = k.p3_other[0 if y2 == 1 else 1, w]
                        p3 = q if y3 == 1 else 1.0 - q
                    m = _lemma1_m(y1, y2, y3, pi1, pi3, a, b)
                    if m:
                        terms.append(m * p3 * p2[y2 - 1] * k.f[y1, w] * p1)
    return math.fsum(terms)


def _lemma1_m(y1, y2, y3, pi1, pi3, a, b):
    if y1 == 0:
        if y2 == 2:
            c = math.exp(pi1 - pi3)
            if y3 == 0:
                return c * math.expm1(pi3 - b) / math.expm1(a - b)
            return c * -math.expm1(b - pi3) / -math.expm1(b - a)
        if y2 == 3:
            return math.exp(pi1 - pi3)
        return 0.0
    if y2 == 1:
        return -1.0
    if y2 == 2:
        if y3 == 0:
            return -(-math.expm1(pi3 - a)) / -math.expm1(b - a)
        return -math.expm1(a - pi3) / math.expm1(a - b)
    return 0.0


def _lemma2_expectation(k: LemmaKernel) -> float:
    pi1 = k.pi1
    pi2 = np.asarray(k.pi2, dtype=float)
    pi3 = np.asarray(k.pi3, dtype=float)
    terms = []
    for y1 in (0, 1):
        p1 = _sig(pi1) if y1 == 1 else 1.0 - _sig(pi1)
        for w in range(k.Q):
            for y2 in (0, 1):
                p2 = _sig(pi2[w]) if y2 == 1 else 1.0 - _sig(pi2[w])
                for v in range(k.Q):
                    for y3 in (0, 1):
                        p3 = _sig(pi3[v]) if y3 == 1 else 1.0 - _sig(pi3[v])
                        m = _lemma2_m(y1, y2, y3, pi1, pi2[w], pi3[v])
                        if m:
                            terms.append(m * p3 * k.g[y2, w, v] * p2 * k.f[y1, w] * p1)
    return math.fsum(terms)


def _lemma2_m(y1, y2, y3, pi1, p2, p3):
    if (y1, y2) == (1, 0):
        return -1.0
    if (y1, y2, y3) == (0, 1, 0):
        return math.exp(pi1 - p2)
    if (y1, y2, y3) == (0, 1, 1):
        return math.exp(pi1 - p3)
    if (y1, y2, y3) == (1, 1, 0):
        return math.expm1(p3 - p2)
    return 0.0


def _random_rows(rng, rows, cols):
    tab = rng.dirichlet(np.ones(cols), size=rows)
    return tab


def random_lemma_kernel(which: str, Q: int, rng, w_dependent_g: bool = False) -> LemmaKernel:
    """Draw a kernel with random indices and random free transition tables.

    ``w_dependent_g=True`` (lemma2 only) lets ``g(v | 1, w)`` vary with ``w``,
    breaking the assumption the identity relies on.
    """
    f = _random_rows(rng, 2, Q)
    pi1 = float(rng.normal(scale=1.5))
    if which == "lemma1":
        hi = rng.normal(scale=1.5, size=Q)
        lo = hi - rng.uniform(0.05, 3.0, size=Q)
        return LemmaKernel("lemma1", Q, pi1, f, pi3=float(rng.normal(scale=1.5)), pi21=hi, pi22=lo,
                           p3_other=rng.uniform(size=(2, Q)))
    if which == "lemma2":
        g = np.empty((2, Q, Q))
        g[0] = _random_rows(rng, Q, Q)
        g[1] = _random_rows(rng, Q, Q) if w_dependent_g else _random_rows(rng, 1, Q)[0]
        return LemmaKernel("lemma2", Q, pi1, f, pi3=rng.normal(scale=1.5, size=Q),
                           pi2=rng.normal(scale=1.5, size=Q), g=g)
    raise ValueError(f"unknown lemma kind {which!r}")


def lemma_kernel_draws(which: str, Q: int, trials: int, seed: int,
                       w_dependent_g: bool = False) -> np.ndarray:
    """``|E[m]|`` for ``trials`` independent random kernels."""
    rng = np.random.default_rng(seed)
    out = np.empty(trials)
    for i in range(trials):
        kern = random_lemma_kernel(which, Q, rng, w_dependent_g)
        kern.validate(require_assumptions=not w_dependent_g)
        out[i] = abs(kern.expectation())
    return out


def lemma_kernel_check(which: str, Q: int = 5, trials: int = 100, seed: int = 0) -> float:
    """Largest ``|E[m]|`` over random admissible kernels."""
    return float(lemma_kernel_draws(which, Q, trials, seed).max())
