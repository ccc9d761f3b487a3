"""GMM estimation from fixed-effect-free conditional moments.

Unconditional moments are products of conditional moment functions with
instrument features ``g(Y_0, X)``.  With ``blocks="per_y0"`` each feature is
interacted separately with the functions of every initial condition; with
``blocks="pooled"`` the function of the unit's own initial condition is used
and the same feature column is shared across initial conditions.

Column means are computed without materializing the ``n x M`` stack: for a
Kronecker instrument each mean is ``(1/n) sum_i 1{cell_i} g_ik m_ib``, which
is one matrix product between the (n, cells x features) instrument array and
the (n, bases) moment array.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, stats

from .errors import EstimationError
from .model import IndexSpec, PanelDataset, Params
from .moments import FamilyEvaluator, enumerate_indices
from .paramspace import ParamSpace
from .reduced_form import efficient_instruments, ordered_logit_mle

__all__ = [
    "InstrumentSpec",
    "MomentStack",
    "GmmOptions",
    "StageResult",
    "GmmEstimate",
    "JTest",
    "difference_features",
    "build_moment_stack",
    "gmm_estimate",
    "sandwich_variance",
    "j_statistic",
    "fd_jacobian",
]

log = logging.getLogger(__name__)


def difference_features(x) -> np.ndarray:
    """``(1, X_a - X_b for all a < b)`` per unit, shape (n, 1 + K T(T-1)/2)."""
    x = np.asarray(x, dtype=float)
    n, T, K = x.shape
    cols = [np.ones((n, 1))]
    for a in range(T):
        for b in range(a + 1, T):
            cols.append(x[:, a] - x[:, b])
    return np.column_stack(cols)


@dataclass(frozen=True)
class InstrumentSpec:
    """How conditional moments become unconditional ones.

    ``kind``:
      * ``"paper-differences"``: features from :func:`difference_features`.
      * ``"initial-condition-indicators"``: the constant only, so each column is
        a conditional moment times an indicator of the initial condition.
      * ``"efficient"``: reduced-form approximation of the optimal instrument,
        giving exactly one moment per free parameter.
      * ``"custom"``: ``features(dataset) -> (n, G)``.

    ``rescale=True`` divides every conditional moment by its largest absolute
    value over outcomes (:meth:`FamilyEvaluator.base_scales`), evaluated at
    the previous stage's estimate.  The divisor depends on ``(Y_0, X)`` only,
    so validity is unaffected; it tames the exponential tails of the raw
    functions.  Ignored for ``"efficient"``, which is invariant to such
    rescaling.

    ``preliminary`` fixes the point at which efficient instruments are
    built; when absent it is estimated with rescaled difference instruments.
    """

    kind: str = "paper-differences"
    blocks: str = "per_y0"
    features: object = None
    preliminary: Params | None = None
    rescale: bool = False

    def __post_init__(self):
        if self.kind not in ("paper-differences", "initial-condition-indicators", "efficient", "custom"):
            raise ValueError(f"unknown instrument kind {self.kind!r}")
        if self.blocks not in ("per_y0", "pooled"):
            raise ValueError("blocks must be 'per_y0' or 'pooled'")
        if self.kind == "custom" and not callable(self.features):
            raise ValueError("custom instruments need a features callable")

    def feature_matrix(self, dataset: PanelDataset) -> np.ndarray:
        if self.kind == "paper-differences":
            g = difference_features(dataset.x)
        elif self.kind == "initial-condition-indicators":
            g = np.ones((dataset.n, 1))
        elif self.kind == "custom":
            g = np.asarray(self.features(dataset), dtype=float).reshape(dataset.n, -1)
        else:
            raise ValueError("efficient instruments have no feature matrix")
        if not np.all(np.isfinite(g)):
            raise ValueError("instrument features must be finite")
        return g


class MomentStack:
    """Unconditional moments for fixed data, evaluated at varying parameters."""

    def __init__(self, dataset: PanelDataset, family, inst: InstrumentSpec,
                 spec: IndexSpec = IndexSpec.LINEAR, weights=None):
        family = list(family)
        if max(idx.r for idx in family) > dataset.T:
            raise ValueError("moment family uses more periods than the data have")
        self.dataset = dataset
        self.inst = inst
        self.ev = FamilyEvaluator(family, dataset.y0, dataset.y, dataset.x, dataset.Q, spec)
        self.n = dataset.n
        self._scale = None
        if inst.kind == "efficient":
            if weights is None:
                raise ValueError("efficient instruments need per-unit weights")
            # weights (n, p, L) -> per-unit weights on bases (n, U, p)
            W = np.asarray(weights) * self.ev.cell_members[:, None, self.ev.col_cell]
            U = len(self.ev.base_list)
            agg = np.zeros((U, len(family)))
            agg[self.ev.col_base, np.arange(len(family))] = 1.0
            self._unit_weights = np.einsum("ipl,ul->iup", W, agg)
            self.dim = self._unit_weights.shape[2]
            self.labels = [f"efficient[{k}]" for k in range(self.dim)]
            return
        g = inst.feature_matrix(dataset)
        G = g.shape[1]
        members = self.ev.cell_members
        cells = self.ev.cell_list
        if inst.blocks == "pooled":
            pooled_keys: dict = {}
            remap = np.array([pooled_keys.setdefault(c[1:], len(pooled_keys)) for c in cells])
            pooled = np.zeros((self.n, len(pooled_keys)))
            np.add.at(pooled.T, remap, members.T)
            members, cell_of = pooled, remap
        else:
            cell_of = np.arange(len(cells))
        self._H = (members[:, :, None] * g[:, None, :]).reshape(self.n, -1)
        cols, seen, labels = [], set(), []
        for j, idx in enumerate(family):
            c = cell_of[self.ev.col_cell[j]]
            b = self.ev.col_base[j]
            for k in range(G):
                key = (c * G + k, b)
                if key not in seen:
                    seen.add(key)
                    cols.append(key)
                    prefix = idx.label() if inst.blocks == "per_y0" else idx.label().split(" ", 1)[1]
                    labels.append(f"{prefix} g{k}")
        cols = np.array(cols)
        self._row, self._base = cols[:, 0], cols[:, 1]
        self.dim = len(cols)
        self.labels = labels

    def set_scale(self, params: Params | None) -> None:
        """Fix the per-unit divisors of the conditional moments at ``params`` (``None`` clears)."""
        self._scale = None if params is None else self.ev.base_scales(params)

    def _bases(self, params):
        B = self.ev.bases(params)
        return B if self._scale is None else B / self._scale

    def full(self, params: Params) -> np.ndarray:
        """Per-unit moment vectors, shape (n, M)."""
        B = self._bases(params)
        if self.inst.kind == "efficient":
            return np.einsum("iup,iu->ip", self._unit_weights, B)
        return B[:, self._base] * self._H[:, self._row]

    def mean(self, params: Params) -> np.ndarray:
        """Column means, shape (M,)."""
        B = self._bases(params)
        if self.inst.kind == "efficient":
            return np.einsum("iup,iu->p", self._unit_weights, B) / self.n
        return (self._H.T @ B)[self._row, self._base] / self.n


def build_moment_stack(dataset: PanelDataset, params: Params, inst: InstrumentSpec, family,
                       spec: IndexSpec = IndexSpec.LINEAR) -> np.ndarray:
    """``n x M`` matrix with rows ``g(Y_i0, X_i) (x) m_{Y_i0}(Y_i, X_i, theta)``."""
    return MomentStack(dataset, family, inst, spec).full(params)


@dataclass(frozen=True)
class GmmOptions:
    """Estimator settings.  ``seed`` drives the multistart perturbations only.

    ``rescale_rounds`` caps the repetitions of stage 2 when instruments are
    rescaled; each round refreshes divisors and diagonal weights at the
    latest estimate and stops early once no coordinate moves by more than
    ``rescale_tol``.

    ``efficient_rounds`` is the number of times efficient instruments are
    built, each at the previous solution.  A round counts as solved when its
    minimized objective is below ``root_tol``; the estimate comes from the
    last solved round, or from the preliminary fit if none was solved.
    """

    gamma_norm: int = 1
    lambda_norm: int = 1
    multistart: int = 5
    start_scale: float = 0.5
    seed: int = 0
    inflation: float = 0.1
    gtol: float = 1e-6
    maxiter: int = 2000
    fd_rel: float = 1e-5
    rescale_rounds: int = 6
    rescale_tol: float = 5e-3
    efficient_rounds: int = 2
    root_tol: float = 1e-2


@dataclass
class StageResult:
    stage: int
    theta: np.ndarray
    objective: float
    converged: bool
    iterations: int
    weight: np.ndarray | None = None
    message: str = ""


@dataclass(frozen=True)
class JTest:
    J: float | None
    dof: int
    p_value: float | None
    available: bool
    reason: str = ""


@dataclass
class GmmEstimate:
    """Final estimate with its weighting history.

    ``vcov`` is in the full ``(beta, gamma, lambda)`` layout with zero rows and
    columns for pinned entries.  ``moment_dim`` counts moment columns after
    dropping zero-variance ones.
    """

    theta_hat: Params
    vcov: np.ndarray
    names: list
    weighting_trace: list
    moment_dim: int
    J: float | None
    J_dof: int
    J_pvalue: float | None
    n: int
    dropped: int = 0
    converged: bool = True
    notes: list = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None))


def fd_jacobian(fun, theta, rel: float = 1e-5) -> np.ndarray:
    """Central differences with step ``max(rel, rel |theta_k|)``."""
    theta = np.asarray(theta, dtype=float)
    f0 = np.asarray(fun(theta))
    J = np.empty((f0.size, theta.size))
    for k in range(theta.size):
        h = max(rel, rel * abs(theta[k]))
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        J[:, k] = (np.asarray(fun(up)) - np.asarray(fun(dn))) / (2 * h)
    return J


def _covariance(m):
    c = m - m.mean(axis=0)
    return c.T @ c / m.shape[0]


def _diag_weight(m, stage):
    var = m.var(axis=0)
    keep = var > 1e-14 * max(1.0, float(var.max()))
    if not keep.all():
        log.warning("stage %d: %d moment columns with zero variance get weight 0", stage, int((~keep).sum()))
    w = np.zeros_like(var)
    w[keep] = 1.0 / var[keep]
    return w, keep


class _Objective:
    """``n gbar' W gbar`` over optimizer coordinates, on the kept columns."""

    def __init__(self, stack, space, keep, W, rel):
        self.stack, self.space, self.keep, self.rel = stack, space, keep, rel
        self.W = W
        self.n = stack.n

    def gbar(self, u):
        # line searches probe extreme points; overflow there just means "reject"
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                p = self.space.opt_to_params(u)
                g = self.stack.mean(p)[self.keep]
            except (ValueError, ArithmeticError):
                return None
        return g if np.all(np.isfinite(g)) else None

    def __call__(self, u):
        g = self.gbar(u)
        if g is None:
            return 1e300
        with np.errstate(over="ignore", invalid="ignore"):
            Wg = self.W * g if self.W.ndim == 1 else self.W @ g
            f = float(self.n * g @ Wg)
        return f if np.isfinite(f) else 1e300

    def grad(self, u):
        u = np.asarray(u, dtype=float)
        out = np.empty_like(u)
        for k in range(u.size):
            h = max(self.rel, self.rel * abs(u[k]))
            up, dn = u.copy(), u.copy()
            up[k] += h
            dn[k] -= h
            out[k] = (self(up) - self(dn)) / (2 * h)
        return out


def _minimize(obj, u0, opts):
    res = optimize.minimize(obj, u0, jac=obj.grad, method="BFGS",
                            options={"gtol": opts.gtol, "maxiter": opts.maxiter})
    # precision loss near the optimum with a numerical gradient is not a failure
    ok = bool(res.success) or (res.status == 2 and np.max(np.abs(res.jac)) < 1e-3)
    return res.x, float(res.fun), ok, int(res.nit), str(res.message)


def stage0_params(dataset: PanelDataset, space: ParamSpace) -> Params:
    """Zero slopes and state dependence; thresholds from the pooled reduced form."""
    tau = ordered_logit_mle(dataset, "thresholds").thresholds
    lam = tau - tau[space.lambda_norm - 1]
    lam[space.lambda_norm - 1] = 0.0
    return Params(np.zeros(space.K), np.zeros(space.Q), lam, None, space.gamma_norm, space.lambda_norm)


def sandwich_variance(stack: MomentStack, theta_hat: Params, W, keep=None, rel: float = 1e-5):
    """``(G'WG)^{-1} G'WSWG (G'WG)^{-1} / n`` in natural free coordinates.

    Returns ``(vcov_free, S, Gamma)``.  Raises :class:`EstimationError` naming
    the parameter directions along which ``G'WG`` is rank deficient.
    """
    space = ParamSpace.for_params(theta_hat)
    theta = space.from_params(theta_hat)
    if keep is None:
        keep = np.ones(stack.dim, dtype=bool)
    Gam = fd_jacobian(lambda th: stack.mean(space.to_params(th))[keep], theta, rel)
    m = stack.full(theta_hat)[:, keep]
    S = _covariance(m)
    W = np.diag(W) if np.ndim(W) == 1 else np.asarray(W)
    A = Gam.T @ W @ Gam
    evals, evecs = np.linalg.eigh(A)
    if evals[0] <= 1e-10 * max(evals[-1], 1e-300):
        names = space.names()
        bad = evecs[:, evals <= 1e-10 * max(evals[-1], 1e-300)]
        desc = []
        for col in bad.T:
            top = np.argsort(-np.abs(col))[:3]
            desc.append(" + ".join(f"{col[k]:+.2f}*{names[k]}" for k in top))
        raise EstimationError("moment Jacobian is rank deficient along: " + "; ".join(desc))
    Ainv = np.linalg.inv(A)
    meat = Gam.T @ W @ S @ W @ Gam
    V = Ainv @ meat @ Ainv / stack.n
    return 0.5 * (V + V.T), S, Gam


def j_statistic(est: GmmEstimate, n: int | None = None) -> JTest:
    """Overidentification test ``n gbar' S^{-1} gbar`` against chi-square(M - p)."""
    if est.J_dof <= 0:
        return JTest(None, est.J_dof, None, False, "no overidentifying restrictions: moment rank does not exceed the free parameters")
    if est.J is None:
        return JTest(None, est.J_dof, None, False, "moment covariance is singular")
    J = est.J if n is None or n == est.n else est.J * n / est.n
    return JTest(J, est.J_dof, float(stats.chi2.sf(J, est.J_dof)), True)


def _j_from(stack, theta_hat, keep, S, p, rtol=1e-9):
    """``n g'S^+ g`` on the column space of ``S`` and its degrees of freedom.

    Instrument sets such as the three pairwise covariate differences are
    linearly dependent, which makes ``S`` singular by construction; the
    dependent directions carry no information about the fit, so they are
    projected out and ``dof`` counts only the rank.
    """
    g = stack.mean(theta_hat)[keep]
    evals, evecs = np.linalg.eigh(S)
    top = max(float(evals[-1]), 1e-300)
    live = evals > rtol * top
    dof = int(live.sum()) - p
    if dof <= 0:
        return None, dof
    proj = evecs[:, live].T @ g
    return float(stack.n * np.sum(proj**2 / evals[live])), dof


def gmm_estimate(dataset: PanelDataset, family=None, inst: InstrumentSpec | None = None,
                 options: GmmOptions | None = None, spec: IndexSpec = IndexSpec.LINEAR) -> GmmEstimate:
    """Three-stage GMM, or a just-identified solve with efficient instruments.

    Stage 0 sets ``beta = gamma = 0`` and takes thresholds from the pooled
    reduced form.  Stages 1 and 2 use inverse moment variances evaluated at the
    previous stage as diagonal weights; stage 1 is multistarted.  Stage 3
    weights by the inverse of the moment covariance with its diagonal inflated
    by ``options.inflation``.

    With ``inst.kind == "efficient"`` the instruments are built at a
    preliminary estimate and the resulting exactly identified system is solved
    starting from that estimate.
    """
    if spec is not IndexSpec.LINEAR:
        raise ValueError("estimation is implemented for the linear index only")
    opts = options or GmmOptions()
    inst = inst or InstrumentSpec()
    if dataset.T < 3:
        raise ValueError("estimation needs T >= 3")
    if family is None:
        family = enumerate_indices(dataset.Q, dataset.T)
    family = list(family)
    space = ParamSpace(dataset.Q, dataset.K, opts.gamma_norm, opts.lambda_norm)
    if inst.kind == "efficient":
        return _efficient_estimate(dataset, family, inst, opts, spec, space)

    stack = MomentStack(dataset, family, inst, spec)
    rescale = inst.rescale
    p0 = stage0_params(dataset, space)
    u0 = space.natural_to_opt(space.from_params(p0))
    trace = [StageResult(0, space.from_params(p0), float("nan"), True, 0)]
    converged = True

    # stage 1: diagonal weights at the stage-0 point, multistart
    if rescale:
        stack.set_scale(p0)
    w1, keep1 = _diag_weight(stack.full(p0), 1)
    obj = _Objective(stack, space, keep1, w1[keep1], opts.fd_rel)
    rng = np.random.default_rng(opts.seed)
    starts = [u0] + [u0 + opts.start_scale * rng.standard_normal(u0.size) for _ in range(opts.multistart - 1)]
    best = None
    for s in starts:
        out = _minimize(obj, s, opts)
        if best is None or out[1] < best[1]:
            best = out
    u, f, ok, it, msg = best
    converged &= ok
    trace.append(StageResult(1, space.opt_to_natural(u), f, ok, it, w1, msg))

    # stage 2: diagonal weights (and divisors) at the latest estimate
    keep = keep1
    for _ in range(opts.rescale_rounds if rescale else 1):
        prev = space.opt_to_params(u)
        if rescale:
            stack.set_scale(prev)
        w2, keep2 = _diag_weight(stack.full(prev), 2)
        keep = keep1 & keep2
        obj = _Objective(stack, space, keep, w2[keep], opts.fd_rel)
        u_new, f, ok, it, msg = _minimize(obj, u, opts)
        converged &= ok
        moved = float(np.max(np.abs(space.opt_to_natural(u_new) - space.opt_to_natural(u))))
        u = u_new
        trace.append(StageResult(2, space.opt_to_natural(u), f, ok, it, w2, msg))
        if moved < opts.rescale_tol:
            break

    # stage 3: inflated covariance at the stage-2 estimate
    p2 = space.opt_to_params(u)
    if rescale:
        stack.set_scale(p2)
    S2 = _covariance(stack.full(p2)[:, keep])
    S2 = S2 + opts.inflation * np.diag(np.diag(S2))
    try:
        W3 = np.linalg.inv(S2)
    except np.linalg.LinAlgError:
        raise EstimationError("stage-3 weight matrix is singular after inflation") from None
    if not np.all(np.isfinite(W3)):
        raise EstimationError("stage-3 weight matrix is singular after inflation")
    obj = _Objective(stack, space, keep, W3, opts.fd_rel)
    u, f, ok, it, msg = _minimize(obj, u, opts)
    converged &= ok
    trace.append(StageResult(3, space.opt_to_natural(u), f, ok, it, W3, msg))
    return _finish(dataset, stack, space, u, W3, keep, trace, converged, [], opts)


def _efficient_estimate(dataset, family, inst, opts, spec, space):
    notes = []
    prelim, prelim_est = inst.preliminary, None
    if prelim is None:
        notes.append("preliminary estimate from rescaled difference instruments")
        prelim_est = gmm_estimate(dataset, family, InstrumentSpec("paper-differences", "pooled", rescale=True),
                                  opts, spec)
        prelim = prelim_est.theta_hat
    prelim = prelim.normalized(space.gamma_norm, space.lambda_norm)
    rf = ordered_logit_mle(dataset, "per_period")
    trace = [StageResult(0, space.from_params(prelim), float("nan"), True, 0)]
    point, ok_all, solved = prelim, True, None
    for _ in range(max(1, opts.efficient_rounds)):
        weights = efficient_instruments(dataset, rf, point, family, spec)
        stack = MomentStack(dataset, family, inst, spec, weights)
        # weights only matter through conditioning here: the system is exactly identified
        w, keep = _diag_weight(stack.full(point), 1)
        obj = _Objective(stack, space, keep, w[keep], opts.fd_rel)
        u, f, ok, it, msg = _minimize(obj, space.natural_to_opt(space.from_params(point)), opts)
        trace.append(StageResult(len(trace), space.opt_to_natural(u), f, ok, it, w, msg))
        if f < opts.root_tol:
            solved = (stack, u, w, keep)
            ok_all &= ok
        else:
            notes.append(f"round {len(trace) - 1}: exactly identified system has no root (objective {f:.3g})")
        # instruments built at any point are valid, so later rounds may still find a root
        point = space.opt_to_params(u)
    if solved is not None:
        stack, u, w, keep = solved
        return _finish(dataset, stack, space, u, w[keep], keep, trace, ok_all, notes, opts)
    notes.append("no round was solved; reporting the preliminary estimate")
    if prelim_est is not None:
        return replace(prelim_est, weighting_trace=prelim_est.weighting_trace + trace[1:],
                       notes=prelim_est.notes + notes)
    nan = space.embed(np.full((space.size, space.size), np.nan))
    return GmmEstimate(theta_hat=prelim, vcov=nan, names=prelim.names(), weighting_trace=trace,
                       moment_dim=int(keep.sum()), J=None, J_dof=0, J_pvalue=None, n=dataset.n,
                       dropped=int(stack.dim - keep.sum()), converged=False, notes=notes)


def _finish(dataset, stack, space, u, W, keep, trace, converged, notes, opts):
    theta_hat = space.opt_to_params(u)
    try:
        vfree, S, _ = sandwich_variance(stack, theta_hat, W, keep, opts.fd_rel)
        vcov = space.embed(vfree)
    except EstimationError as exc:
        notes.append(f"variance unavailable: {exc}")
        log.warning("variance unavailable: %s", exc)
        S = _covariance(stack.full(theta_hat)[:, keep])
        vcov = space.embed(np.full((space.size, space.size), np.nan))
    M = int(keep.sum())
    J, dof = _j_from(stack, theta_hat, keep, S, space.size)
    pval = float(stats.chi2.sf(J, dof)) if J is not None else None
    if not converged:
        notes.append("optimizer reported non-convergence in at least one stage")
    return GmmEstimate(
        theta_hat=theta_hat, vcov=vcov, names=theta_hat.names(), weighting_trace=trace,
        moment_dim=M, J=J, J_dof=dof, J_pvalue=pval, n=dataset.n, dropped=int(stack.dim - M),
        converged=bool(converged), notes=notes,
    )
