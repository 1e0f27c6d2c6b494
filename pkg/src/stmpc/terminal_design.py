"""Terminal gain, cost and set for the last ``P + 1`` predicted instants.

The terminal law sends ``K_f x`` every ``M`` steps. ``synthesize`` finds
``X > 0`` and ``Y`` satisfying, for every ``p = 1..P+1``, the LMI

    [ X   0      0      A_pM X + B_pM Y ]
    [ .   Qinv   Sinv   X               ]  >= 0
    [ .   .      Rinv   Y               ]
    [ .   .      .      X               ]

(inverse lifted cost blocks at hold length ``pM``) and returns
``P_f = X^-1``, ``K_f = Y X^-1``. The Schur complement of this LMI is the
matrix inequality checked by ``verify_qmi``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import sdp
from .lifted_dynamics import (
    ControlPacket, OverallState, PlantModel, interval_cost, lift_table, ncs_step, terminal_rollout,
)
from .network import TokenBucketSpec
from .sets import UNCONSTRAINED, Ellipsoid, Polytope, Unconstrained, is_unconstrained

log = logging.getLogger(__name__)

QMI_TOL = 1e-8
DECREASE_TOL = 1e-7
SYNTH_MARGIN = 1e-6
AUDIT_SEED = 20240601


class InfeasibleTerminalLMI(RuntimeError):
    """No ``(X, Y)`` satisfies the terminal LMI family."""

    def __init__(self, message, p_index=None, min_eig=None):
        super().__init__(message)
        self.p_index = p_index
        self.min_eig = min_eig


@dataclass(frozen=True, eq=False)
class TerminalIngredients:
    K_f: np.ndarray
    P_f: np.ndarray
    M: int
    terminal_set: object = UNCONSTRAINED
    P: int = 0

    def __post_init__(self):
        object.__setattr__(self, "K_f", np.atleast_2d(np.asarray(self.K_f, dtype=float)))
        P_f = np.atleast_2d(np.asarray(self.P_f, dtype=float))
        if not np.allclose(P_f, P_f.T, atol=1e-10 * max(1.0, np.abs(P_f).max())):
            raise ValueError("P_f must be symmetric")
        P_f = 0.5 * (P_f + P_f.T)
        if np.linalg.eigvalsh(P_f).min() <= 0:
            raise ValueError("P_f must be positive definite")
        object.__setattr__(self, "P_f", P_f)

    def cost(self, x) -> float:
        x = np.asarray(x)
        return float(x @ self.P_f @ x)

    def law(self, state: OverallState):
        return self.K_f @ state.x, self.M


def _lmi_blocks(plant: PlantModel, M: int, P: int):
    """Affine generators of the LMI family in ``z = (svec X, vec Y)``."""
    n, m = plant.n, plant.m
    table = lift_table(plant, (P + 1) * M)
    iu = np.triu_indices(n)
    nx = len(iu[0])
    d = nx + m * n
    k = 3 * n + m

    def X_of(z):
        X = np.zeros((n, n))
        X[iu] = z[:nx]
        return X + np.triu(X, 1).T

    def Y_of(z):
        return z[nx:].reshape(m, n)

    blocks = []
    for p in range(1, P + 2):
        L = table[p * M - 1]
        F = np.zeros((d + 1, k, k))
        # constant part
        F[0, n:2 * n, n:2 * n] = L.Q_inv
        F[0, n:2 * n, 2 * n:2 * n + m] = L.S_inv
        F[0, 2 * n:2 * n + m, n:2 * n] = L.S_inv.T
        F[0, 2 * n:2 * n + m, 2 * n:2 * n + m] = L.R_inv
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1.0
            X, Y = X_of(e), Y_of(e)
            G = F[i + 1]
            top = L.A_j @ X + L.B_j @ Y
            G[:n, :n] = X
            G[:n, 2 * n + m:] = top
            G[2 * n + m:, :n] = top.T
            G[n:2 * n, 2 * n + m:] = X
            G[2 * n + m:, n:2 * n] = X
            G[2 * n:2 * n + m, 2 * n + m:] = Y
            G[2 * n + m:, 2 * n:2 * n + m] = Y.T
            G[2 * n + m:, 2 * n + m:] = X
        blocks.append(F)
    Xblock = np.zeros((d + 1, n, n))
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        Xblock[i + 1] = X_of(e)

    def pack(X, Y):
        return np.concatenate([X[iu], np.asarray(Y).reshape(-1)])

    return blocks, Xblock, pack, X_of, Y_of


def lmi_matrix(plant: PlantModel, M: int, p: int, X, Y) -> np.ndarray:
    """The terminal LMI at index ``p`` evaluated at ``(X, Y)``."""
    blocks, _, pack, _, _ = _lmi_blocks(plant, M, p - 1)
    return sdp.evaluate(blocks[p - 1], pack(np.asarray(X), np.asarray(Y)))


def _lqr_warm_start(plant, M):
    L = lift_table(plant, M)[M - 1]
    try:
        Pr = linalg.solve_discrete_are(L.A_j, L.B_j, L.Q_j, L.R_j, s=L.S_j)
        K = -np.linalg.solve(L.R_j + L.B_j.T @ Pr @ L.B_j, L.B_j.T @ Pr @ L.A_j + L.S_j.T)
        X = np.linalg.inv(Pr)
        return 0.5 * (X + X.T), K @ X
    except (np.linalg.LinAlgError, ValueError):
        return np.eye(plant.n), np.zeros((plant.m, plant.n))


def synthesize(plant: PlantModel, spec: TokenBucketSpec, P: int, margin: float = SYNTH_MARGIN):
    """Terminal gain and cost matrix ``(K_f, P_f)`` valid for up to ``P`` consecutive losses.

    Among feasible points the barrier solver maximizes ``logdet X``, which
    keeps ``P_f`` small. The result is checked with ``verify_qmi`` before it
    is returned.

    Raises
    ------
    InfeasibleTerminalLMI
        If no strictly feasible ``(X, Y)`` was found.
    """
    M = spec.M
    blocks, Xblock, pack, X_of, Y_of = _lmi_blocks(plant, M, P)
    X0, Y0 = _lqr_warm_start(plant, M)
    z0 = pack(X0, Y0)
    z, s = sdp.find_feasible(blocks + [Xblock], z0, margin)
    if s <= 0:
        eigs = [np.linalg.eigvalsh(sdp.evaluate(B, z)).min() for B in blocks]
        worst = int(np.argmin(eigs)) + 1
        raise InfeasibleTerminalLMI(
            f"terminal LMI infeasible (best margin {s:.3e}, most violated at p={worst}); "
            f"(A, B, M={M}, P={P}) does not admit a terminal law",
            p_index=worst, min_eig=float(min(eigs)))
    eps = min(margin, 0.5 * s)
    shifted = []
    for B in blocks:
        Bs = B.copy()
        Bs[0] -= eps * np.eye(B.shape[1])
        shifted.append(Bs)
    try:
        z = sdp.maximize_logdet(shifted, Xblock, z)
    except sdp.SdpFailure:
        log.warning("log-det refinement failed; keeping the phase-one point")
    X, Y = X_of(z), Y_of(z)
    P_f = np.linalg.inv(X)
    P_f = 0.5 * (P_f + P_f.T)
    K_f = Y @ P_f
    report = verify_qmi(K_f, P_f, plant, M, P)
    if not report.passed:
        raise InfeasibleTerminalLMI(
            f"synthesized terminal law fails the QMI check (max eigenvalue {report.worst:.3e})",
            p_index=report.worst_p, min_eig=-report.worst)
    return K_f, P_f


def qmi_matrix(K_f, P_f, plant: PlantModel, M: int, p: int) -> np.ndarray:
    L = lift_table(plant, p * M)[p * M - 1]
    Acl = L.A_j + L.B_j @ K_f
    IK = np.vstack([np.eye(plant.n), K_f])
    Z = Acl.T @ P_f @ Acl - P_f + IK.T @ L.cost_matrix @ IK
    return 0.5 * (Z + Z.T)


@dataclass
class QmiReport:
    max_eigs: dict
    tol: float = QMI_TOL

    @property
    def worst_p(self) -> int:
        return max(self.max_eigs, key=self.max_eigs.get)

    @property
    def worst(self) -> float:
        return self.max_eigs[self.worst_p]

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.max_eigs.values())

    def lines(self):
        for p, v in sorted(self.max_eigs.items()):
            yield f"qmi p={p} max_eig={v:.6e} {'PASS' if v <= self.tol else 'FAIL'}"


def verify_qmi(K_f, P_f, plant: PlantModel, M: int, P: int, tol: float = QMI_TOL) -> QmiReport:
    K_f = np.atleast_2d(np.asarray(K_f, dtype=float))
    P_f = np.atleast_2d(np.asarray(P_f, dtype=float))
    eigs = {p: float(np.linalg.eigvalsh(qmi_matrix(K_f, P_f, plant, M, p)).max())
            for p in range(1, P + 2)}
    return QmiReport(eigs, tol)


def decrease_rhs(state: OverallState, p: int, terminal: TerminalIngredients, plant, spec) -> float:
    """Cost the terminal law accumulates over ``p`` instants with outcomes ``1, 0, ..., 0``."""
    v, M = terminal.law(state)
    packet = ControlPacket(v, M)
    total = interval_cost(state, packet, 1, plant)
    for i in range(1, p):
        total += interval_cost(terminal_rollout(state, i, terminal, plant, spec), packet, 0, plant)
    return total


def _sample_directions(terminal_set, n, count, rng):
    if isinstance(terminal_set, Ellipsoid):
        if terminal_set.level == 0:
            return np.zeros((count, n))
        return terminal_set.boundary_samples(count, rng)
    u = rng.standard_normal((count, n))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    if isinstance(terminal_set, Polytope):
        Hu = u @ terminal_set.H.T
        with np.errstate(divide="ignore"):
            t = np.where(Hu > 0, terminal_set.h / np.where(Hu > 0, Hu, 1.0), np.inf)
        scale = t.min(axis=1)
        scale[~np.isfinite(scale)] = 1.0
        return u * scale[:, None]
    return u


def _in_xi(state, X, U, spec, beta_min=0, tol=1e-8):
    return (X.contains(state.x, tol) and U.contains(state.w, tol)
            and beta_min <= state.beta <= spec.b)


@dataclass
class DecreaseReport:
    samples: int
    seed: int
    worst_margin: float
    decrease_violations: list = field(default_factory=list)
    containment_violations: list = field(default_factory=list)
    intersample_violations: list = field(default_factory=list)
    input_violations: list = field(default_factory=list)
    tol: float = DECREASE_TOL

    @property
    def passed(self) -> bool:
        return not (self.decrease_violations or self.containment_violations
                    or self.intersample_violations or self.input_violations)

    def lines(self):
        yield (f"decrease samples={self.samples} seed={self.seed} worst_margin={self.worst_margin:.6e} "
               f"{'PASS' if not self.decrease_violations else 'FAIL'}")
        yield f"containment {'PASS' if not self.containment_violations else 'FAIL'}"
        yield f"intersample {'PASS' if not self.intersample_violations else 'FAIL'}"
        yield f"terminal_input {'PASS' if not self.input_violations else 'FAIL'}"


def verify_decrease(terminal: TerminalIngredients, plant: PlantModel, spec: TokenBucketSpec,
                    P: int | None = None, samples: int = 1000, X=UNCONSTRAINED, U=UNCONSTRAINED,
                    delta_max: int | None = None, seed: int = AUDIT_SEED,
                    tol: float = DECREASE_TOL) -> DecreaseReport:
    """Sampled audit of the terminal decrease inequality and set containments.

    For each sampled terminal state and each ``p = 1..P+1`` checks
    ``V_f(x_p) - V_f(x) <= -(cost of the p terminal intervals)`` with the
    margin ``lhs - rhs <= tol``, that the rollout stays in the terminal set
    and that inter-sample states stay in the constraint set.
    """
    P = terminal.P if P is None else P
    rng = np.random.default_rng(seed)
    xs = _sample_directions(terminal.terminal_set, plant.n, samples, rng)
    betas = rng.integers(spec.min_level, spec.b + 1, size=samples)
    Xf = terminal.terminal_set
    rep = DecreaseReport(samples, seed, -np.inf, tol=tol)
    for x, beta in zip(xs, betas):
        xi = OverallState(x, terminal.K_f @ x, beta)
        v, M = terminal.law(xi)
        if not U.contains(v) or (delta_max is not None and M > delta_max):
            rep.input_violations.append(xi)
        Vf0 = terminal.cost(x)
        # inter-sample states after the first (delivered) packet
        for j in range(1, M):
            if not _in_xi(ncs_step(xi, v, j, 1, plant, spec), X, U, spec):
                rep.intersample_violations.append((xi, 0, j))
        for p in range(1, P + 2):
            xp = terminal_rollout(xi, p, terminal, plant, spec)
            margin = terminal.cost(xp.x) - Vf0 + decrease_rhs(xi, p, terminal, plant, spec)
            rep.worst_margin = max(rep.worst_margin, margin)
            if margin > tol:
                rep.decrease_violations.append((xi, p, margin))
            if not (Xf.contains(xp.x) and U.contains(xp.w) and spec.min_level <= xp.beta <= spec.b):
                rep.containment_violations.append((xi, p))
            if p <= P:
                for j in range(1, M):
                    if not _in_xi(ncs_step(xp, v, j, 0, plant, spec), X, U, spec):
                        rep.intersample_violations.append((xi, p, j))
    return rep


def _closed_loop_maps(K_f, plant, M, P):
    table = lift_table(plant, (P + 1) * M + M)
    inv = [table[p * M - 1].A_j + table[p * M - 1].B_j @ K_f for p in range(1, P + 2)]
    inter = [table[p * M + j - 1].A_j + table[p * M + j - 1].B_j @ K_f
             for p in range(0, P + 1) for j in range(1, M)]
    return inv, inter


def construct_terminal_set(K_f, P_f, plant: PlantModel, X=UNCONSTRAINED, U=UNCONSTRAINED,
                           M: int = 1, P: int = 0):
    """Largest sublevel set of ``x^T P_f x`` satisfying the terminal-set requirements.

    Sublevel sets of ``P_f`` are invariant under every ``p``-step terminal
    closed loop once the QMI holds, so only containments are left: the set
    itself, ``K_f`` times it, and every inter-sample image must fit inside
    ``X`` and ``U``. Each halfspace bounds the level through the support
    function of the ellipsoid.
    """
    K_f = np.atleast_2d(np.asarray(K_f, dtype=float))
    if is_unconstrained(X) and is_unconstrained(U):
        return UNCONSTRAINED
    P_inv = np.linalg.inv(P_f)
    level = np.inf

    def bound(H, h, Phi):
        nonlocal level
        D = H @ Phi
        s2 = np.einsum("ij,jk,ik->i", D, P_inv, D)
        for s, d in zip(s2, h):
            if s <= 0:
                if d < 0:
                    level = 0.0
                continue
            level = min(level, max(d, 0.0) ** 2 / s)

    if isinstance(U, Polytope):
        bound(U.H, U.h, K_f)
    if isinstance(X, Polytope):
        inv, inter = _closed_loop_maps(K_f, plant, M, P)
        bound(X.H, X.h, np.eye(plant.n))
        for Phi in inter:
            bound(X.H, X.h, Phi)
    if not np.isfinite(level):
        # no halfspace constrains the ellipsoid direction; any level works
        level = 1.0
    if level <= 0:
        warnings.warn("terminal set collapsed to the origin", RuntimeWarning)
        level = 0.0
    return Ellipsoid(P_f, float(level))


@dataclass
class SetAuditReport:
    samples: int
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def audit_terminal_set(terminal_set, K_f, plant, X=UNCONSTRAINED, U=UNCONSTRAINED, M=1, P=0,
                       samples=1000, seed=AUDIT_SEED) -> SetAuditReport:
    """Sampled check of the terminal-set requirements on boundary states."""
    rng = np.random.default_rng(seed)
    xs = _sample_directions(terminal_set, plant.n, samples, rng)
    inv, inter = _closed_loop_maps(np.atleast_2d(K_f), plant, M, P)
    rep = SetAuditReport(samples)
    for x in xs:
        if not X.contains(x):
            rep.violations.append(("state", x))
        if not U.contains(K_f @ x):
            rep.violations.append(("input", x))
        for p, Phi in enumerate(inv, start=1):
            if not terminal_set.contains(Phi @ x):
                rep.violations.append((f"invariance p={p}", x))
        for Phi in inter:
            if not X.contains(Phi @ x):
                rep.violations.append(("intersample", x))
    return rep


def design_terminal(plant: PlantModel, spec: TokenBucketSpec, P: int, X=UNCONSTRAINED,
                    U=UNCONSTRAINED) -> TerminalIngredients:
    """Synthesize gain and cost, then size the terminal set for ``X`` and ``U``."""
    K_f, P_f = synthesize(plant, spec, P)
    Xf = construct_terminal_set(K_f, P_f, plant, X, U, spec.M, P)
    return TerminalIngredients(K_f, P_f, spec.M, Xf, P)
