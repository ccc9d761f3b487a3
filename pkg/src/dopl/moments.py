"""Fixed-effect-free moment functions of the dynamic ordered logit model.

Each moment function is identified by a :class:`MomentIndex`.  For an
interior ``q2`` (``2 <= q2 <= Q-1``) the function combines periods
``(t, s, s+1)``; for ``q2`` in ``{1, Q}`` any ``t < s < r`` is allowed.  Every
function is multiplied by the history indicator ``1{(y_1..y_{t-1}) = h}``.

Evaluation is vectorized: :class:`FamilyEvaluator` precomputes the
combinatorial structure of a family once and then evaluates all functions
for all units at a given parameter value with a handful of array operations.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import SingularParameterError
from .model import IndexSpec, Params, extended_thresholds, single_index

__all__ = [
    "MomentIndex",
    "FamilyEvaluator",
    "moment_t3",
    "moment_general",
    "interior_moment",
    "enumerate_indices",
    "moment_count",
    "closed_form_count",
    "rescale_tilde",
    "format_index_listing",
    "index_tables",
]


@dataclass(frozen=True, order=True)
class MomentIndex:
    """Label of one moment function.

    ``t < s < r`` are 1-based periods and ``history`` is the required value
    of ``(y_1, ..., y_{t-1})``.
    """

    y0: int
    q1: int
    q2: int
    q3: int
    t: int = 1
    s: int = 2
    r: int = 3
    history: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "history", tuple(int(h) for h in self.history))
        if min(self.y0, self.q1, self.q2, self.q3) < 1:
            raise ValueError(f"levels are 1-based: {self}")
        if not 1 <= self.t < self.s < self.r:
            raise ValueError(f"need 1 <= t < s < r, got {(self.t, self.s, self.r)}")
        if len(self.history) != self.t - 1:
            raise ValueError(f"history must have length t-1={self.t - 1}")

    def validate(self, Q: int, T: int | None = None) -> None:
        """Check ranges against ``Q`` levels and ``T`` periods."""
        if self.y0 > Q or self.q2 > Q or self.q1 > Q - 1 or self.q3 > Q - 1:
            raise ValueError(f"index {self} out of range for Q={Q}")
        if any(not 1 <= h <= Q for h in self.history):
            raise ValueError(f"history {self.history} out of range for Q={Q}")
        if T is not None and self.r > T:
            raise ValueError(f"index uses period {self.r} but T={T}")
        if 2 <= self.q2 <= Q - 1 and self.r != self.s + 1:
            raise ValueError("interior q2 requires r = s + 1")

    def reversed(self, Q: int) -> "MomentIndex":
        """Index of the counterpart under relabeling ``y -> Q+1-y``.

        Interior functions map to the rescaled counterpart (see
        :func:`rescale_tilde`); the two boundary families map onto each other
        without rescaling.
        """
        return MomentIndex(Q + 1 - self.y0, Q - self.q1, Q + 1 - self.q2, Q - self.q3,
                           self.t, self.s, self.r, tuple(Q + 1 - h for h in self.history))

    def kind(self, Q: int) -> str:
        return _kind(self.q2, Q)

    def label(self) -> str:
        h = ",".join(map(str, self.history))
        return (
            f"y0={self.y0} q=({self.q1},{self.q2},{self.q3}) "
            f"t={self.t} s={self.s} r={self.r} h=({h})"
        )


def _kind(q2, Q):
    if q2 == 1:
        return "lower"
    if q2 == Q:
        return "upper"
    return "interior"


def index_tables(y0, y, x, params: Params, spec: IndexSpec = IndexSpec.LINEAR):
    """Single indices for all lagged levels and at the observed lags.

    Returns ``z_all`` of shape (n, T, Q) with ``z_all[i, a, q-1] = z(q, x_{i,a+1})``
    and ``z_obs`` of shape (n, T) evaluated at the observed lagged outcome.
    """
    y0 = np.asarray(y0)
    y = np.asarray(y)
    x = np.asarray(x, dtype=float)
    xb = x @ params.beta
    if spec is IndexSpec.INTERACTED:
        if params.delta is None:
            raise ValueError("interacted index requires delta")
        xd = np.einsum("ntk,qk->ntq", x, params.delta)
        z_all = xb[..., None] + params.gamma * (1.0 + xd)
    else:
        z_all = xb[..., None] + params.gamma
    lags = np.column_stack([y0, y[:, :-1]])
    z_obs = np.take_along_axis(z_all, lags[..., None] - 1, axis=2)[..., 0]
    return z_all, z_obs


def _interior_values(q1, q2, q3, yt, ys, yr, zt, zs, zr, zrq, lam_ext):
    l1, l2, l2m, l3 = lam_ext[q1], lam_ext[q2], lam_ext[q2 - 1], lam_ext[q3]
    d = l2 - l2m
    up = np.expm1(d)
    down = -np.expm1(-d)
    if np.any(up == 0) or np.any(down == 0):
        raise SingularParameterError("adjacent thresholds coincide")
    lo_t = yt <= q1
    eq_s = ys == q2
    lo_r = yr <= q3
    with np.errstate(over="ignore", invalid="ignore"):
        # zrq evaluates period r with lag q2, which absorbs the gamma shift of the third branch
        scale = np.exp(zt - zrq + l3 - l1)
        b1 = scale * np.expm1(zr - zs + l2 - l3) / up
        b2 = scale * -np.expm1(zs - zr + l3 - l2) / down
        b5 = np.expm1(zr - zs + l2m - l3) / down
        b6 = -np.expm1(zs - zr + l3 - l2m) / up
    out = np.zeros(np.broadcast(yt, q1).shape)
    out = np.where(lo_t & eq_s & lo_r, b1, out)
    out = np.where(lo_t & eq_s & ~lo_r, b2, out)
    out = np.where(lo_t & (ys > q2), scale, out)
    out = np.where(~lo_t & (ys < q2), -1.0, out)
    out = np.where(~lo_t & eq_s & lo_r, b5, out)
    out = np.where(~lo_t & eq_s & ~lo_r, b6, out)
    return out


def _lower_values(q1, q3, yt, ys, yr, zt, zs, zr, lam_ext):
    l1, l3, base = lam_ext[q1], lam_ext[q3], lam_ext[1]
    lo_t = yt <= q1
    at1 = ys == 1
    lo_r = yr <= q3
    with np.errstate(over="ignore"):
        c1 = np.expm1(zs - zr + l3 - base)
        c3 = np.exp(zr - zt + l1 - l3)
        c4 = np.exp(zs - zt + l1 - base)
    out = np.zeros(np.broadcast(yt, q1).shape)
    out = np.where(lo_t & at1 & ~lo_r, c1, out)
    out = np.where(lo_t & ~at1, -1.0, out)
    out = np.where(~lo_t & at1 & lo_r, c3, out)
    out = np.where(~lo_t & at1 & ~lo_r, c4, out)
    return out


def _upper_values(q1, q3, Q, yt, ys, yr, zt, zs, zr, lam_ext):
    l1, l3, top = lam_ext[q1], lam_ext[q3], lam_ext[Q - 1]
    lo_t = yt <= q1
    atQ = ys == Q
    lo_r = yr <= q3
    with np.errstate(over="ignore"):
        c1 = np.exp(zt - zs + top - l1)
        c2 = np.exp(zt - zr + l3 - l1)
        c4 = np.expm1(zr - zs + top - l3)
    out = np.zeros(np.broadcast(yt, q1).shape)
    out = np.where(lo_t & atQ & lo_r, c1, out)
    out = np.where(lo_t & atQ & ~lo_r, c2, out)
    out = np.where(~lo_t & ~atQ, -1.0, out)
    out = np.where(~lo_t & atQ & lo_r, c4, out)
    return out


class FamilyEvaluator:
    """Evaluate a family of moment functions on fixed data at varying parameters.

    Columns of :meth:`values` follow the order of ``family``.  Internally the
    family is reduced to distinct *bases* ``(q1, q2, q3, t, s, r)`` and
    *cells* ``(y0, t, history)``; a column is a base multiplied by the cell
    indicator.  :meth:`bases` exposes the reduced form for callers that
    aggregate by cell.
    """

    def __init__(self, family, y0, y, x, Q: int, spec: IndexSpec = IndexSpec.LINEAR):
        family = list(family)
        if not family:
            raise ValueError("empty moment family")
        self.y0 = np.asarray(y0, dtype=int)
        self.y = np.asarray(y, dtype=int)
        self.x = np.asarray(x, dtype=float)
        self.Q = Q
        self.spec = spec
        n, T = self.y.shape
        for idx in family:
            idx.validate(Q, T)
        self.family = family

        base_keys, cell_keys = {}, {}
        col_base, col_cell = [], []
        for idx in family:
            bkey = (idx.q1, idx.q2, idx.q3, idx.t, idx.s, idx.r)
            ckey = (idx.y0, idx.t, idx.history)
            col_base.append(base_keys.setdefault(bkey, len(base_keys)))
            col_cell.append(cell_keys.setdefault(ckey, len(cell_keys)))
        self.base_list = list(base_keys)
        self.cell_list = list(cell_keys)
        self.col_base = np.array(col_base)
        self.col_cell = np.array(col_cell)

        # cell membership per unit
        member = np.zeros((n, len(self.cell_list)))
        for c, (cy0, t, hist) in enumerate(self.cell_list):
            mask = self.y0 == cy0
            if hist:
                mask = mask & np.all(self.y[:, : t - 1] == np.array(hist), axis=1)
            member[:, c] = mask
        self.cell_members = member

        # bases grouped by (t, s, r, kind) for vectorized kernels
        groups: dict[tuple, list[int]] = {}
        for b, (q1, q2, q3, t, s, r) in enumerate(self.base_list):
            groups.setdefault((t, s, r, _kind(q2, Q)), []).append(b)
        self._groups = []
        for (t, s, r, kind), members in groups.items():
            q = np.array([self.base_list[b][:3] for b in members])
            self._groups.append((t, s, r, kind, np.array(members), q[:, 0], q[:, 1], q[:, 2]))

    @property
    def n(self) -> int:
        return self.y0.size

    def bases(self, params: Params, lam_ext=None) -> np.ndarray:
        """Distinct base moment values, shape (n, number of bases)."""
        if params.Q != self.Q:
            raise ValueError("params and evaluator disagree on Q")
        z_all, z_obs = index_tables(self.y0, self.y, self.x, params, self.spec)
        if lam_ext is None:
            lam_ext = extended_thresholds(params.lam)
        out = np.empty((self.n, len(self.base_list)))
        for t, s, r, kind, members, q1, q2, q3 in self._groups:
            yt, ys, yr = (self.y[:, a - 1, None] for a in (t, s, r))
            zt, zs, zr = (z_obs[:, a - 1, None] for a in (t, s, r))
            if kind == "interior":
                zrq = z_all[:, r - 1, q2 - 1]
                vals = _interior_values(q1, q2, q3, yt, ys, yr, zt, zs, zr, zrq, lam_ext)
            elif kind == "lower":
                vals = _lower_values(q1, q3, yt, ys, yr, zt, zs, zr, lam_ext)
            else:
                vals = _upper_values(q1, q3, self.Q, yt, ys, yr, zt, zs, zr, lam_ext)
            out[:, members] = vals
        return out

    def base_scales(self, params: Params) -> np.ndarray:
        """Largest absolute base value over outcomes not fixed by the cell, shape (n, bases).

        The maximum runs over ``y_t, y_s, y_r`` and over any lag the base
        leaves free, holding ``X`` and the conditioned history at their
        observed values.  Dividing a base by its scale keeps it a valid
        moment function.
        """
        Q = self.Q
        z_all, z_obs = index_tables(self.y0, self.y, self.x, params, self.spec)
        lam_ext = extended_thresholds(params.lam)
        out = np.ones((self.n, len(self.base_list)))
        levels = range(1, Q + 1)
        for t, s, r, kind, members, q1, q2, q3 in self._groups:
            zt = z_obs[:, t - 1, None]
            lag_s = [None] if s == t + 1 else levels
            lag_r = [None] if r == s + 1 else levels
            best = out[:, members]
            for yt, ys, yr, ls, lr in itertools.product(levels, levels, (1, Q), lag_s, lag_r):
                zs = z_all[:, s - 1, (yt if ls is None else ls) - 1, None]
                zr = z_all[:, r - 1, (ys if lr is None else lr) - 1, None]
                y_t, y_s, y_r = np.array([yt]), np.array([ys]), np.array([yr])
                if kind == "interior":
                    vals = _interior_values(q1, q2, q3, y_t, y_s, y_r, zt, zs, zr, z_all[:, r - 1, q2 - 1], lam_ext)
                elif kind == "lower":
                    vals = _lower_values(q1, q3, y_t, y_s, y_r, zt, zs, zr, lam_ext)
                else:
                    vals = _upper_values(q1, q3, Q, y_t, y_s, y_r, zt, zs, zr, lam_ext)
                np.fmax(best, np.abs(vals), out=best)
            out[:, members] = best
        return out

    def values(self, params: Params) -> np.ndarray:
        """Moment values for every unit and family member, shape (n, L)."""
        b = self.bases(params)
        return b[:, self.col_base] * self.cell_members[:, self.col_cell]


def _single(idx, y0, y, x, params, spec, lam_ext=None):
    y = np.asarray(y, dtype=int).reshape(1, -1)
    x = np.asarray(x, dtype=float).reshape(1, y.shape[1], -1)
    if x.shape[2] != params.K:
        raise ValueError(f"x must have {params.K} columns")
    if int(y0) != idx.y0:
        raise ValueError(f"index is for y0={idx.y0}, got y0={y0}")
    ev = FamilyEvaluator([idx], [y0], y, x, params.Q, spec)
    if lam_ext is None:
        return float(ev.values(params)[0, 0])
    return float(ev.bases(params, lam_ext)[0, 0] * ev.cell_members[0, 0])


def moment_general(idx: MomentIndex, y0, y, x, params: Params,
                   spec: IndexSpec = IndexSpec.LINEAR) -> float:
    """Value of moment function ``idx`` at one observation ``(y0, y, x)``."""
    return _single(idx, y0, y, x, params, spec)


def moment_t3(idx: MomentIndex, y0, y, x, params: Params,
              spec: IndexSpec = IndexSpec.LINEAR) -> float:
    """Three-period moment function; ``idx`` must use periods (1, 2, 3)."""
    if (idx.t, idx.s, idx.r) != (1, 2, 3):
        raise ValueError("moment_t3 requires (t, s, r) = (1, 2, 3)")
    if np.asarray(y).size != 3:
        raise ValueError("moment_t3 requires T=3 data")
    return _single(idx, y0, y, x, params, spec)


def interior_moment(idx: MomentIndex, y0, y, x, params: Params, outer=(-np.inf, np.inf),
                    spec: IndexSpec = IndexSpec.LINEAR) -> float:
    """Six-branch interior formula at any ``q2``, with finite stand-ins for the outer thresholds.

    With ``outer=(lo, hi)`` finite, ``q2=1`` and ``q2=Q`` become evaluable and
    approach the boundary formulas as ``lo -> -inf`` and ``hi -> +inf``.
    """
    lam_ext = extended_thresholds(params.lam)
    lam_ext[0], lam_ext[-1] = outer
    y = np.asarray(y, dtype=int).reshape(1, -1)
    x = np.asarray(x, dtype=float).reshape(1, y.shape[1], -1)
    if idx.r != idx.s + 1:
        raise ValueError("interior formula requires r = s + 1")
    z_all, z_obs = index_tables([y0], y, x, params, spec)
    t, s, r = idx.t, idx.s, idx.r
    hist_ok = tuple(y[0, : t - 1]) == idx.history and int(y0) == idx.y0
    val = _interior_values(
        idx.q1, idx.q2, idx.q3, y[0, t - 1], y[0, s - 1], y[0, r - 1],
        z_obs[0, t - 1], z_obs[0, s - 1], z_obs[0, r - 1], z_all[0, r - 1, idx.q2 - 1], lam_ext,
    )
    return float(val) if hist_ok else 0.0


def rescale_tilde(value, idx: MomentIndex, y0, x, params: Params,
                  spec: IndexSpec = IndexSpec.LINEAR) -> float:
    """Renormalize so the ``(y_t <= q1, y_s > q2)`` branch equals ``-1``.

    Divides ``-value`` by ``exp(z_t - z_r(q2) + lambda_q3 - lambda_q1)``, where
    ``z_r(q2)`` is the period-``r`` index at lagged level ``q2``.  The lag of
    period ``t`` is taken from ``y0`` or the index history.
    """
    x = np.asarray(x, dtype=float)
    lag_t = idx.history[-1] if idx.history else int(y0)
    zt = single_index(lag_t, x[idx.t - 1], params, spec)
    zr = single_index(idx.q2, x[idx.r - 1], params, spec)
    lam_ext = extended_thresholds(params.lam)
    return float(-value / np.exp(zt - zr + lam_ext[idx.q3] - lam_ext[idx.q1]))


def _check_qt(Q, T):
    if int(Q) != Q or Q < 2:
        raise ValueError(f"Q must be an integer >= 2, got {Q}")
    if int(T) != T or T < 3:
        raise ValueError(f"T must be an integer >= 3, got {T}")


def enumerate_indices(Q: int, T: int, y0=None, boundary_gaps: bool = False) -> list[MomentIndex]:
    """All moment indices for ``Q`` levels and ``T`` periods.

    By default yields ``r = s + 1`` only.  ``boundary_gaps=True`` adds the
    ``q2 in {1, Q}`` functions with ``r > s + 1``.  ``y0`` restricts to one
    initial condition.
    """
    _check_qt(Q, T)
    y0s = range(1, Q + 1) if y0 is None else [y0]
    out = []
    for v in y0s:
        for t in range(1, T - 1):
            for hist in itertools.product(range(1, Q + 1), repeat=t - 1):
                for s in range(t + 1, T):
                    for q1 in range(1, Q):
                        for q2 in range(1, Q + 1):
                            for q3 in range(1, Q):
                                out.append(MomentIndex(v, q1, q2, q3, t, s, s + 1, hist))
                if not boundary_gaps:
                    continue
                for s in range(t + 1, T):
                    for r in range(s + 2, T + 1):
                        for q1 in range(1, Q):
                            for q2 in (1, Q):
                                for q3 in range(1, Q):
                                    out.append(MomentIndex(v, q1, q2, q3, t, s, r, hist))
    return out


def moment_count(Q: int, T: int, static_model: bool = False) -> int:
    """Number of linearly independent moment functions per initial condition.

    Dynamic: ``(Q-1)^2 Q sum_{t=1}^{T-2} (T-t-1) Q^{t-1}``.
    Static (no state dependence): ``Q^T - T(Q-1) - 1``.
    """
    _check_qt(Q, T)
    if static_model:
        return Q**T - T * (Q - 1) - 1
    return (Q - 1) ** 2 * Q * sum((T - t - 1) * Q ** (t - 1) for t in range(1, T - 1))


def closed_form_count(Q: int, T: int, sign: int = -1) -> int:
    """``Q^T - (T-1) Q^2 + sign (T-2) Q``.

    With ``sign=+1`` this equals :func:`moment_count`.  The ``sign=-1``
    variant does not, and is kept only for comparison.
    """
    _check_qt(Q, T)
    return Q**T - (T - 1) * Q**2 + sign * (T - 2) * Q


def format_index_listing(family) -> str:
    """One index per line, for diagnostics."""
    return "\n".join(idx.label() for idx in family) + "\n"
