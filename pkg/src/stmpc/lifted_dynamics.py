"""Plant model, held-input lifting and the networked-control transition map.

The overall state of the networked loop is ``xi = (x, w, beta)``: plant state,
input currently held by the actuator, and token-bucket level. A packet carries
a control update ``v`` and the number of steps ``delta`` until the next
sampling instant.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy import linalg

ATOL = 1e-9
RTOL = 1e-9
COND_WARN = 1e12


def _as_matrix(a, name):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix")
    return a


@dataclass(frozen=True, eq=False)
class PlantModel:
    """Discrete-time LTI plant ``x+ = A x + B u`` with stage cost weights.

    Parameters
    ----------
    A : (n, n) array_like
    B : (n, m) array_like
    Q : (n, n) array_like
        State weight, symmetric positive definite.
    R : (m, m) array_like
        Input weight, symmetric positive definite.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    tol: float = 1e-12

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        Q = _as_matrix(self.Q, "Q")
        R = _as_matrix(self.R, "R")
        n, m = A.shape[0], B.shape[1]
        if A.shape != (n, n):
            raise ValueError("A must be square")
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
        if Q.shape != (n, n) or R.shape != (m, m):
            raise ValueError("Q must be n x n and R must be m x m")
        for name, W in (("Q", Q), ("R", R)):
            if not np.allclose(W, W.T, atol=1e-12, rtol=0):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(W).min() <= self.tol:
                raise ValueError(f"{name} must be positive definite")
        for name, val in (("A", A), ("B", B), ("Q", Q), ("R", R)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True, eq=False)
class OverallState:
    """Networked state: plant state ``x``, held input ``w``, bucket level ``beta``."""

    x: np.ndarray
    w: np.ndarray
    beta: int

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(-1))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).reshape(-1))
        object.__setattr__(self, "beta", int(self.beta))

    def validate(self, bucket) -> None:
        if not 0 <= self.beta <= bucket.b:
            raise ValueError(f"bucket level {self.beta} outside [0, {bucket.b}]")


@dataclass(frozen=True, eq=False)
class ControlPacket:
    """Control update ``v`` and the sampling interval ``delta`` it is held for."""

    v: np.ndarray
    delta: int

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(-1))
        object.__setattr__(self, "delta", int(self.delta))
        if self.delta < 1:
            raise ValueError("sampling interval must be >= 1")

    def validate(self, delta_max: int) -> None:
        if not 1 <= self.delta <= delta_max:
            raise ValueError(f"sampling interval {self.delta} outside [1, {delta_max}]")


@dataclass(frozen=True, eq=False)
class LiftedMatrices:
    """Dynamics and cost of holding one input for ``j`` steps.

    ``x(j) = A_j x + B_j u`` and the accumulated stage cost over the ``j``
    steps is ``[x; u]^T [[Q_j, S_j], [S_j^T, R_j]] [x; u]``. The ``*_inv``
    blocks partition the inverse of that block matrix.
    """

    j: int
    A_j: np.ndarray
    B_j: np.ndarray
    Q_j: np.ndarray
    S_j: np.ndarray
    R_j: np.ndarray
    Q_inv: np.ndarray = field(repr=False)
    S_inv: np.ndarray = field(repr=False)
    R_inv: np.ndarray = field(repr=False)

    @cached_property
    def cost_matrix(self) -> np.ndarray:
        return np.block([[self.Q_j, self.S_j], [self.S_j.T, self.R_j]])

    @cached_property
    def inverse_cost_matrix(self) -> np.ndarray:
        return np.block([[self.Q_inv, self.S_inv], [self.S_inv.T, self.R_inv]])


def _sym(a):
    return 0.5 * (a + a.T)


def lift_range(plant: PlantModel, jmax: int) -> list[LiftedMatrices]:
    """Lifted matrices for every hold length ``1..jmax`` (index 0 is ``j = 1``)."""
    if jmax < 1:
        raise ValueError("hold length must be >= 1")
    A, B, Q, R = plant.A, plant.B, plant.Q, plant.R
    n, m = plant.n, plant.m
    # running sums over i = 0..j-1 with A_0 = I, B_0 = 0
    Ai, Bi = np.eye(n), np.zeros((n, m))
    Qs, Ss, Rs = np.zeros((n, n)), np.zeros((n, m)), np.zeros((m, m))
    out = []
    for j in range(1, jmax + 1):
        Qs = Qs + Ai.T @ Q @ Ai
        Ss = Ss + Ai.T @ Q @ Bi
        Rs = Rs + R + Bi.T @ Q @ Bi
        Ai, Bi = A @ Ai, A @ Bi + B
        W = np.block([[_sym(Qs), Ss], [Ss.T, _sym(Rs)]])
        Winv = _spd_inverse(W)
        out.append(LiftedMatrices(
            j=j, A_j=Ai.copy(), B_j=Bi.copy(), Q_j=_sym(Qs), S_j=Ss.copy(), R_j=_sym(Rs),
            Q_inv=Winv[:n, :n], S_inv=Winv[:n, n:], R_inv=Winv[n:, n:],
        ))
    return out


def lift(plant: PlantModel, j: int) -> LiftedMatrices:
    """Lifted dynamics and cost blocks for an input held ``j`` steps."""
    return lift_range(plant, j)[-1]


@lru_cache(maxsize=64)
def _cached_table(plant: PlantModel, jmax: int) -> tuple:
    return tuple(lift_range(plant, jmax))


def lift_table(plant: PlantModel, jmax: int) -> tuple:
    """Cached ``lift_range``; plants are immutable so identity keys are safe."""
    return _cached_table(plant, int(jmax))


def _spd_inverse(W):
    try:
        c, low = linalg.cho_factor(W)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("lifted cost block is not positive definite") from exc
    cond = np.linalg.cond(W)
    if cond > COND_WARN:
        warnings.warn(f"lifted cost block is ill-conditioned (cond={cond:.2e})", RuntimeWarning)
    Winv = linalg.cho_solve((c, low), np.eye(W.shape[0]))
    return _sym(Winv)


def stage_cost(state: OverallState, packet: ControlPacket, sigma: int, plant: PlantModel) -> float:
    x, w, v = state.x, state.w, packet.v
    return float(x @ plant.Q @ x + (1 - sigma) * (w @ plant.R @ w) + sigma * (v @ plant.R @ v))


def applied_input(state: OverallState, v, sigma: int) -> np.ndarray:
    """Input held by the actuator after the decision at a sampling instant."""
    return sigma * np.asarray(v, dtype=float) + (1 - sigma) * state.w


def ncs_step(state: OverallState, v, j: int, sigma: int, plant: PlantModel, bucket) -> OverallState:
    """Overall state ``j`` steps after sending ``v`` with delivery outcome ``sigma``.

    The bucket level is returned unclamped from below; a negative value marks
    an inadmissible schedule and is left for the caller to reject.
    """
    if j < 1:
        raise ValueError("hold length must be >= 1")
    if j == 1:
        A_j, B_j = plant.A, plant.B
    else:
        L = lift_table(plant, j)[j - 1]
        A_j, B_j = L.A_j, L.B_j
    u = applied_input(state, v, sigma)
    x = A_j @ state.x + B_j @ u
    beta = min(state.beta + j * bucket.g - bucket.c, bucket.b)
    return OverallState(x, u, beta)


def interval_cost_stepwise(state, packet, sigma, plant, bucket) -> float:
    """Cost accumulated over a sampling interval, summed one step at a time."""
    total = stage_cost(state, packet, sigma, plant)
    for j in range(1, packet.delta):
        total += stage_cost(ncs_step(state, packet.v, j, sigma, plant, bucket), packet, sigma, plant)
    return total


def interval_cost(state: OverallState, packet: ControlPacket, sigma: int, plant: PlantModel,
                  bucket=None, check: bool = False) -> float:
    """Cost accumulated over a sampling interval, via the lifted quadratic form.

    With ``check=True`` the value is recomputed step by step and the two
    must agree to ``RTOL``/``ATOL``.
    """
    L = lift_table(plant, packet.delta)[packet.delta - 1]
    z = np.concatenate([state.x, applied_input(state, packet.v, sigma)])
    value = float(z @ L.cost_matrix @ z)
    if check:
        if bucket is None:
            raise ValueError("bucket is needed for the stepwise cross-check")
        ref = interval_cost_stepwise(state, packet, sigma, plant, bucket)
        if not np.isclose(value, ref, rtol=RTOL, atol=ATOL):
            raise AssertionError(f"lifted interval cost {value} != stepwise {ref}")
    return value


def terminal_rollout(state: OverallState, p: int, terminal, plant: PlantModel, bucket) -> OverallState:
    """State after ``p`` instants of the terminal law with outcomes ``1, 0, ..., 0``.

    ``terminal`` needs ``K_f`` and ``M`` attributes.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    v = terminal.K_f @ state.x
    xi = ncs_step(state, v, terminal.M, 1, plant, bucket)
    for _ in range(p - 1):
        # lost packets: the payload is irrelevant
        xi = ncs_step(xi, terminal.K_f @ xi.x, terminal.M, 0, plant, bucket)
    return xi
