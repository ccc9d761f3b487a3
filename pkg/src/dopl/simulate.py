"""Data-generating processes for the dynamic ordered logit model.

Randomness is drawn per unit from ``SeedSequence(seed, spawn_key=(i,))`` in
a fixed order, so unit ``i`` gets the same draws whatever ``n`` is and
however units are partitioned across workers.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logit, ndtri

from .errors import DataError
from .model import IndexSpec, PanelDataset, Params

__all__ = [
    "DgpConfig",
    "reference_design",
    "gen_covariates",
    "gen_errors",
    "gen_panel",
    "load_dgp_config",
    "dump_dgp_config",
]

SQRT3 = math.sqrt(3.0)


@dataclass(frozen=True)
class DgpConfig:
    """Full description of a simulated panel.

    ``heterogeneity`` is ``"none"``, ``"correlated"`` (``A_i = sqrt(3) Z_i`` with
    the same ``Z_i`` that enters the first covariate), ``"point:<v>"``
    (``v`` may be ``-inf`` or ``inf``) or ``"normal:<mean>,<sd>"``.

    ``y_init`` is ``"zero_state"`` (``Y_0`` drawn from the model with no lag
    contribution) or a fixed level ``1..Q``.

    ``error_dist="normal"`` replaces the logistic shocks by normal ones with
    the same variance.  It exists to generate misspecified data.
    """

    n: int
    T: int
    params: Params
    heterogeneity: str = "none"
    y_init: object = "zero_state"
    seed: int = 0
    spec: IndexSpec = IndexSpec.LINEAR
    error_dist: str = "logistic"

    def __post_init__(self):
        if self.n < 1 or self.T < 1:
            raise ValueError("n and T must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        _parse_heterogeneity(self.heterogeneity)
        if self.y_init != "zero_state":
            if not (isinstance(self.y_init, (int, np.integer)) and 1 <= self.y_init <= self.Q):
                raise ValueError(f"y_init must be 'zero_state' or a level in 1..{self.Q}")
        if self.error_dist not in ("logistic", "normal"):
            raise ValueError("error_dist must be 'logistic' or 'normal'")
        if self.spec is IndexSpec.INTERACTED and self.params.delta is None:
            raise ValueError("interacted index requires delta")

    @property
    def Q(self) -> int:
        return self.params.Q

    @property
    def K(self) -> int:
        return self.params.K

    def with_seed(self, seed: int) -> "DgpConfig":
        return replace(self, seed=seed)


def reference_design(n: int, heterogeneity: bool = False, seed: int = 0, K: int = 3) -> DgpConfig:
    """Four-level, three-period design with ``beta = e_1``, ``gamma=(-1,0,0,1)``, ``lambda=(-2,0,2)``."""
    beta = np.zeros(K)
    beta[0] = 1.0
    params = Params(beta, [-1.0, 0.0, 0.0, 1.0], [-2.0, 0.0, 2.0], gamma_norm=2, lambda_norm=2)
    return DgpConfig(n=n, T=3, params=params, heterogeneity="correlated" if heterogeneity else "none",
                     y_init="zero_state", seed=seed)


def _parse_heterogeneity(text):
    if text in ("none", "correlated"):
        return (text,)
    kind, _, rest = str(text).partition(":")
    try:
        if kind == "point":
            return ("point", float(rest))
        if kind == "normal":
            mean, sd = (float(v) for v in rest.split(","))
            if sd < 0 or not math.isfinite(mean):
                raise ValueError
            return ("normal", mean, sd)
    except ValueError:
        pass
    raise ValueError(f"unrecognized heterogeneity spec {text!r}")


def _unit_draws(cfg: DgpConfig):
    """All random inputs, drawn unit by unit in a fixed order."""
    n, P, K = cfg.n, cfg.T + 1, cfg.K
    z_unit = np.empty(n)
    z_cov = np.empty((n, P, K))
    z_het = np.empty(n)
    u = np.empty((n, P))
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed), spawn_key=(i,)))
        z_unit[i] = rng.standard_normal()
        z_cov[i] = rng.standard_normal((P, K))
        z_het[i] = rng.standard_normal()
        u[i] = rng.random(P)
    return z_unit, z_cov, z_het, u


def _covariates(z_unit, z_cov):
    x = np.empty_like(z_cov)
    common = z_cov[:, :, 0]
    x[:, :, 0] = SQRT3 * (z_unit[:, None] + common) / math.sqrt(2.0)
    x[:, :, 1:] = SQRT3 * (z_cov[:, :, 1:] + common[:, :, None]) / math.sqrt(2.0)
    return x


def _shocks(u, error_dist):
    # 0 < u < 1 almost surely; guard the open interval anyway
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    if error_dist == "normal":
        return ndtri(u) * math.pi / SQRT3
    return logit(u)


def gen_covariates(cfg: DgpConfig) -> np.ndarray:
    """Covariates for periods ``0..T``, shape (n, T+1, K)."""
    z_unit, z_cov, _, _ = _unit_draws(cfg)
    return _covariates(z_unit, z_cov)


def gen_errors(cfg: DgpConfig) -> np.ndarray:
    """Latent shocks for periods ``0..T``, shape (n, T+1)."""
    return _shocks(_unit_draws(cfg)[3], cfg.error_dist)


def _heterogeneity(cfg, z_unit, z_het):
    spec = _parse_heterogeneity(cfg.heterogeneity)
    if spec[0] == "none":
        return np.zeros(cfg.n)
    if spec[0] == "correlated":
        return SQRT3 * z_unit
    if spec[0] == "point":
        return np.full(cfg.n, spec[1])
    return spec[1] + spec[2] * z_het


def _levels(ystar, lam):
    # level = 1 + number of thresholds strictly below the latent value
    return 1 + (ystar[..., None] > lam).sum(axis=-1)


def gen_panel(cfg: DgpConfig, return_x0: bool = False):
    """Simulate a balanced panel.  ``return_x0`` also returns period-0 covariates."""
    z_unit, z_cov, z_het, u = _unit_draws(cfg)
    x = _covariates(z_unit, z_cov)
    eps = _shocks(u, cfg.error_dist)
    alpha = _heterogeneity(cfg, z_unit, z_het)
    p = cfg.params
    lam = np.asarray(p.lam)
    n, T = cfg.n, cfg.T

    with np.errstate(invalid="ignore"):
        if cfg.y_init == "zero_state":
            y0 = _levels(x[:, 0] @ p.beta + alpha + eps[:, 0], lam)
        else:
            y0 = np.full(n, int(cfg.y_init))
        y = np.empty((n, T), dtype=int)
        prev = y0
        for t in range(1, T + 1):
            xt = x[:, t]
            g = p.gamma[prev - 1]
            if cfg.spec is IndexSpec.INTERACTED:
                g = g * (1.0 + np.einsum("nk,nk->n", xt, p.delta[prev - 1]))
            y[:, t - 1] = _levels(xt @ p.beta + g + alpha + eps[:, t], lam)
            prev = y[:, t - 1]
    data = PanelDataset(y0, y, x[:, 1:], p.Q)
    return (data, x[:, 0]) if return_x0 else data


# -- config files ----------------------------------------------------------------

_KEYS = {"n", "T", "Q", "K", "beta", "gamma", "lambda", "delta", "gamma_norm", "lambda_norm",
         "heterogeneity", "y_init", "seed", "error_dist", "index"}


def _floats(text):
    return [float(v) for v in text.replace(",", " ").split()]


def load_dgp_config(path, seed: int | None = None) -> DgpConfig:
    """Read ``key = value`` lines (no section header needed).

    Required: ``n``, ``T``, ``beta``, ``gamma``, ``lambda``.  ``Q`` and ``K``
    are optional consistency checks.  A ``seed`` argument overrides the file.
    """
    with open(path) as fh:
        text = fh.read()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[dgp]\n" + text)
    except configparser.Error as exc:
        raise DataError(f"cannot parse config: {exc}") from None
    kv = dict(parser["dgp"])
    unknown = set(kv) - _KEYS
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    try:
        for req in ("n", "T", "beta", "gamma", "lambda"):
            if req not in kv:
                raise DataError(f"missing config key {req!r}")
        beta, gamma, lam = _floats(kv["beta"]), _floats(kv["gamma"]), _floats(kv["lambda"])
        delta = None
        if "delta" in kv:
            delta = np.array(_floats(kv["delta"])).reshape(len(gamma), len(beta))
        gnorm = int(kv["gamma_norm"]) if "gamma_norm" in kv else None
        lnorm = int(kv["lambda_norm"]) if "lambda_norm" in kv else None
        params = Params(beta, gamma, lam, delta)
        if gnorm is not None or lnorm is not None:
            params = params.normalized(gnorm, lnorm)
        if "Q" in kv and int(kv["Q"]) != params.Q:
            raise DataError(f"Q={kv['Q']} disagrees with gamma of length {params.Q}")
        if "K" in kv and int(kv["K"]) != params.K:
            raise DataError(f"K={kv['K']} disagrees with beta of length {params.K}")
        y_init = kv.get("y_init", "zero_state")
        if y_init != "zero_state":
            y_init = int(y_init)
        if seed is None:
            seed = int(kv.get("seed", 0))
        return DgpConfig(
            n=int(kv["n"]), T=int(kv["T"]), params=params,
            heterogeneity=kv.get("heterogeneity", "none"), y_init=y_init, seed=seed,
            spec=IndexSpec(kv.get("index", "linear")), error_dist=kv.get("error_dist", "logistic"),
        )
    except DataError:
        raise
    except ValueError as exc:
        raise DataError(f"invalid config: {exc}") from None


def _fmt(values):
    return " ".join(repr(float(v)) for v in np.ravel(values))


def dump_dgp_config(cfg: DgpConfig) -> str:
    """Serialize ``cfg`` in the format read by :func:`load_dgp_config`."""
    p = cfg.params
    lines = [
        f"n = {cfg.n}", f"T = {cfg.T}", f"Q = {p.Q}", f"K = {p.K}",
        f"beta = {_fmt(p.beta)}", f"gamma = {_fmt(p.gamma)}", f"lambda = {_fmt(p.lam)}",
    ]
    if p.delta is not None:
        lines.append(f"delta = {_fmt(p.delta)}")
    if p.gamma_norm is not None:
        lines.append(f"gamma_norm = {p.gamma_norm}")
    if p.lambda_norm is not None:
        lines.append(f"lambda_norm = {p.lambda_norm}")
    lines += [
        f"heterogeneity = {cfg.heterogeneity}", f"y_init = {cfg.y_init}", f"seed = {cfg.seed}",
        f"index = {cfg.spec.value}", f"error_dist = {cfg.error_dist}",
    ]
    return "\n".join(lines) + "\n"
