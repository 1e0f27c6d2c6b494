"""Constraint sets: whole space, halfspace polytopes and ellipsoids."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class Unconstrained:
    """The whole space."""

    bounded = False

    def contains(self, x, tol: float = 1e-8) -> bool:
        return True

    def violation(self, x) -> float:
        return 0.0

    def __repr__(self):
        return "Unconstrained()"


UNCONSTRAINED = Unconstrained()


@dataclass(frozen=True, eq=False)
class Polytope:
    """``{x : H x <= h}``."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        h = np.asarray(self.h, dtype=float).reshape(-1)
        if H.shape[0] != h.size:
            raise ValueError("H and h disagree on the number of halfspaces")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @classmethod
    def box(cls, lower, upper):
        lower = np.asarray(lower, dtype=float).reshape(-1)
        upper = np.asarray(upper, dtype=float).reshape(-1)
        I = np.eye(lower.size)
        return cls(np.vstack([I, -I]), np.concatenate([upper, -lower]))

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    def residual(self, x) -> np.ndarray:
        """``H x - h``; positive entries are violated halfspaces. ``x`` may be batched."""
        return np.asarray(x) @ self.H.T - self.h

    def violation(self, x) -> float:
        return float(max(0.0, np.max(self.residual(x))))

    def contains(self, x, tol: float = 1e-8) -> bool:
        return bool(np.all(self.residual(x) <= tol))


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    """``{x : x^T P x <= level}``; ``level = 0`` is the origin alone."""

    P: np.ndarray
    level: float

    def __post_init__(self):
        object.__setattr__(self, "P", np.asarray(self.P, dtype=float))
        if self.level < 0:
            raise ValueError("ellipsoid level must be nonnegative")

    @property
    def dim(self) -> int:
        return self.P.shape[0]

    def value(self, x) -> np.ndarray:
        x = np.asarray(x)
        return np.einsum("...i,ij,...j->...", x, self.P, x)

    def violation(self, x) -> float:
        return float(max(0.0, np.max(self.value(x) - self.level)))

    def contains(self, x, tol: float = 1e-8) -> bool:
        return bool(np.all(self.value(x) <= self.level + tol * max(1.0, self.level)))

    def support(self, d) -> np.ndarray:
        """``max_{x in E} d^T x`` for each row of ``d``."""
        d = np.atleast_2d(d)
        Pinv_d = np.linalg.solve(self.P, d.T)
        return np.sqrt(self.level * np.maximum(np.einsum("ij,ji->i", d, Pinv_d), 0.0))

    def boundary_samples(self, count: int, rng) -> np.ndarray:
        u = rng.standard_normal((count, self.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        Lc = np.linalg.cholesky(self.P)
        # x = sqrt(level) L^{-T} u satisfies x^T P x = level
        return np.sqrt(self.level) * np.linalg.solve(Lc.T, u.T).T


def is_unconstrained(s) -> bool:
    return isinstance(s, Unconstrained)
