"""Free-coordinate bookkeeping for normalized parameters.

Two coordinate systems are used.  *Natural* free coordinates are the
non-pinned entries of ``(beta, gamma, lambda)``; derivatives and variances
are reported in these.  *Optimizer* coordinates replace the free thresholds
by log gaps relative to the pinned one, so every real vector maps to
strictly increasing thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Params

__all__ = ["ParamSpace"]


@dataclass(frozen=True)
class ParamSpace:
    """Layout of ``theta = (beta, gamma, lambda)`` with one gamma and one lambda pinned to 0."""

    Q: int
    K: int
    gamma_norm: int
    lambda_norm: int

    def __post_init__(self):
        if not 1 <= self.gamma_norm <= self.Q:
            raise ValueError(f"gamma_norm must be in 1..{self.Q}")
        if not 1 <= self.lambda_norm <= self.Q - 1:
            raise ValueError(f"lambda_norm must be in 1..{self.Q - 1}")

    @classmethod
    def for_params(cls, params: Params) -> "ParamSpace":
        if params.gamma_norm is None or params.lambda_norm is None:
            raise ValueError("params must carry gamma and lambda normalizations")
        return cls(params.Q, params.K, params.gamma_norm, params.lambda_norm)

    @property
    def size(self) -> int:
        """Number of free parameters."""
        return self.K + (self.Q - 1) + (self.Q - 2)

    @property
    def full_size(self) -> int:
        return self.K + self.Q + self.Q - 1

    def gamma_free(self) -> np.ndarray:
        return np.array([q for q in range(self.Q) if q != self.gamma_norm - 1], dtype=int)

    def lambda_free(self) -> np.ndarray:
        return np.array([q for q in range(self.Q - 1) if q != self.lambda_norm - 1], dtype=int)

    def free_positions(self) -> np.ndarray:
        """Positions of free coordinates inside the full stacked vector."""
        K, Q = self.K, self.Q
        return np.concatenate([np.arange(K), K + self.gamma_free(), K + Q + self.lambda_free()])

    def names(self) -> list[str]:
        return [f"beta{k + 1}" for k in range(self.K)] + [f"gamma{q + 1}" for q in self.gamma_free()] + [
            f"lambda{q + 1}" for q in self.lambda_free()
        ]

    # natural coordinates -------------------------------------------------

    def to_params(self, theta, delta=None) -> Params:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.size:
            raise ValueError(f"expected {self.size} free coordinates, got {theta.size}")
        K = self.K
        beta = theta[:K]
        gamma = np.zeros(self.Q)
        gamma[self.gamma_free()] = theta[K: K + self.Q - 1]
        lam = np.zeros(self.Q - 1)
        lam[self.lambda_free()] = theta[K + self.Q - 1:]
        return Params(beta, gamma, lam, delta, self.gamma_norm, self.lambda_norm)

    def from_params(self, params: Params) -> np.ndarray:
        p = params.normalized(self.gamma_norm, self.lambda_norm)
        return np.concatenate([p.beta, p.gamma[self.gamma_free()], p.lam[self.lambda_free()]])

    # optimizer coordinates -----------------------------------------------

    def natural_to_opt(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        head = theta[: self.K + self.Q - 1]
        lam = np.zeros(self.Q - 1)
        lam[self.lambda_free()] = theta[self.K + self.Q - 1:]
        j = self.lambda_norm - 1
        if np.any(np.diff(lam) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        gaps = [np.log(lam[q] - lam[q - 1]) if q > j else np.log(lam[q + 1] - lam[q])
                for q in self.lambda_free()]
        return np.concatenate([head, gaps])

    def opt_to_natural(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        head = u[: self.K + self.Q - 1]
        logs = np.zeros(self.Q - 1)
        logs[self.lambda_free()] = u[self.K + self.Q - 1:]
        j = self.lambda_norm - 1
        lam = np.zeros(self.Q - 1)
        for q in range(j + 1, self.Q - 1):
            lam[q] = lam[q - 1] + np.exp(logs[q])
        for q in range(j - 1, -1, -1):
            lam[q] = lam[q + 1] - np.exp(logs[q])
        return np.concatenate([head, lam[self.lambda_free()]])

    def opt_to_params(self, u, delta=None) -> Params:
        return self.to_params(self.opt_to_natural(u), delta)

    def embed(self, free_matrix) -> np.ndarray:
        """Place a free-coordinate square matrix into the full layout with zero pinned rows."""
        out = np.zeros((self.full_size, self.full_size))
        pos = self.free_positions()
        out[np.ix_(pos, pos)] = free_matrix
        return out
