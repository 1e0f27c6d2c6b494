"""Self-triggered min-max MPC over a lossy, token-bucket-shaped channel.

At every sampling instant the controller picks a feedback policy, i.e. ``N``
gains ``K(i)`` and sampling intervals ``Delta(i)``, minimizing the worst-case
predicted cost over every admissible loss word of length ``N + P``. The last
``P`` predicted instants run the terminal law. Only ``K(0) x`` and
``Delta(0)`` are applied.

Solving strategy
----------------
The problem is nonconvex in the gains, so the search is organized as
branch and bound over interval words:

* a lower bound per word is the largest single-scenario LQ optimum over a
  subset of loss words (min-max is at least max-min, and feedback over one
  fixed scenario is no better than open loop);
* words are visited in bound order and their gains are optimized locally
  (SLSQP on the epigraph of the scenario maximum, exact adjoint gradients);
* the shifted previous solution is always evaluated and kept as the
  incumbent, so the adopted worst-case value never exceeds it. This is what
  makes the closed-loop cost decrease certifiable with a local solver.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .lifted_dynamics import (
    ControlPacket, OverallState, PlantModel, interval_cost, lift_table, ncs_step,
)
from .network import (
    AdmissibleSet, LossHistory, LossSequence, TokenBucketSpec, enumerate_admissible,
    update_counter,
)
from .sets import UNCONSTRAINED, Ellipsoid, Polytope, is_unconstrained
from .terminal_design import TerminalIngredients

log = logging.getLogger(__name__)

OPTIMIZED = "optimized"
FALLBACK = "fallback-candidate"


class InfeasibleProblem(RuntimeError):
    """No interval word and gains satisfy the constraints for every loss word."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, constraint sets and solver knobs.

    ``max_words`` caps how many interval words get their gains optimized per
    solve; ``bound_scenarios`` is the number of loss words used for the
    per-word lower bounds.
    """

    N: int
    P: int
    delta_max: int
    X: object = UNCONSTRAINED
    U: object = UNCONSTRAINED
    max_words: int = 8
    bound_scenarios: int = 16
    exhaustive_limit: int = 20000
    beam_width: int = 256
    maxiter: int = 20
    smoothing: tuple = (0.3, 0.03, 0.003)
    smooth_maxiter: int = 50
    ftol: float = 1e-11
    penalty: float = 1e3
    penalty_rounds: int = 4
    penalty_growth: float = 10.0
    feas_tol: float = 1e-8
    tie_rtol: float = 1e-9

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.P < 0:
            raise ValueError("P must be >= 0")
        if self.delta_max < 1:
            raise ValueError("delta_max must be >= 1")

    def validate(self, spec: TokenBucketSpec) -> None:
        if self.delta_max < spec.M:
            raise ValueError(f"delta_max={self.delta_max} must be >= base period M={spec.M}")


@dataclass(frozen=True, eq=False)
class FeedbackPolicy:
    gains: np.ndarray
    intervals: tuple

    def __post_init__(self):
        gains = np.asarray(self.gains, dtype=float)
        if gains.ndim != 3 or gains.shape[0] != len(self.intervals):
            raise ValueError("need one (m, n) gain per interval")
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "intervals", tuple(int(d) for d in self.intervals))

    @property
    def N(self) -> int:
        return len(self.intervals)

    def first_packet(self, x) -> ControlPacket:
        return ControlPacket(self.gains[0] @ np.asarray(x, dtype=float), self.intervals[0])


@dataclass
class PolicyEvaluation:
    value: float
    trajectory: list
    packets: list
    violations: list

    @property
    def feasible(self) -> bool:
        return not self.violations


@dataclass
class Solution:
    policy: FeedbackPolicy
    worst_value: float
    worst_sequence: LossSequence | None
    trajectories: list
    feasible: bool
    provenance: str = OPTIMIZED
    values: np.ndarray | None = None
    admissible: AdmissibleSet | None = None
    words_explored: int = 0
    words_feasible: int = 0
    violations: dict = field(default_factory=dict)

    @property
    def intervals(self) -> tuple:
        return self.policy.intervals


def _in_xi(state: OverallState, config: MpcConfig, spec: TokenBucketSpec, tol: float) -> list:
    bad = []
    if not config.X.contains(state.x, tol):
        bad.append("state")
    if not config.U.contains(state.w, tol):
        bad.append("held-input")
    if not 0 <= state.beta <= spec.b:
        bad.append("bucket")
    return bad


def evaluate_policy(policy: FeedbackPolicy, xi0: OverallState, sequence, terminal: TerminalIngredients,
                    plant: PlantModel, spec: TokenBucketSpec, config: MpcConfig) -> PolicyEvaluation:
    """Roll out ``policy`` under one loss word and accumulate the predicted cost.

    Infeasibility is reported, not raised: ``violations`` lists
    ``(kind, i, j)`` for every violated constraint, with ``j`` the
    inter-sample offset (0 at sampling instants).
    """
    bits = sequence.bits if isinstance(sequence, LossSequence) else tuple(sequence)
    N, P = policy.N, len(bits) - policy.N
    tol = config.feas_tol
    Xf = terminal.terminal_set
    xi = xi0
    value = 0.0
    trajectory, packets, violations = [xi0], [], []
    for i, sigma in enumerate(bits):
        if i < N:
            v = policy.gains[i] @ xi.x
            delta = policy.intervals[i]
            violations += [(kind, i, 0) for kind in _in_xi(xi, config, spec, tol)]
            if not config.U.contains(v, tol):
                violations.append(("input", i, 0))
            if not 1 <= delta <= config.delta_max:
                violations.append(("interval", i, 0))
            for j in range(1, delta):
                inter = ncs_step(xi, v, j, sigma, plant, spec)
                violations += [(kind, i, j) for kind in _in_xi(inter, config, spec, tol)]
        else:
            v, delta = terminal.law(xi)
            violations += [(kind, i, 0) for kind in _terminal_violations(xi, Xf, config, spec, tol)]
        packet = ControlPacket(v, delta)
        packets.append(packet)
        value += interval_cost(xi, packet, sigma, plant)
        xi = ncs_step(xi, v, delta, sigma, plant, spec)
        trajectory.append(xi)
    violations += [(kind, N + P, 0) for kind in _terminal_violations(xi, Xf, config, spec, tol)]
    value += terminal.cost(xi.x)
    return PolicyEvaluation(value, trajectory, packets, violations)


def _terminal_violations(xi, Xf, config, spec, tol):
    bad = []
    if not Xf.contains(xi.x, tol):
        bad.append("terminal-state")
    if not config.U.contains(xi.w, tol):
        bad.append("terminal-held-input")
    if not spec.min_level <= xi.beta <= spec.b:
        bad.append("terminal-bucket")
    return bad


def inner_max(policy: FeedbackPolicy, xi0: OverallState, admissible, terminal, plant, spec, config):
    """Worst case of ``policy`` over every admissible loss word.

    Returns ``(value, sequence, evaluations, feasible)``; ties go to the
    lexicographically first word. The policy is feasible only if it is
    feasible under every word.
    """
    if len(admissible) == 0:
        raise ValueError("admissible loss set is empty")
    evals = [evaluate_policy(policy, xi0, seq, terminal, plant, spec, config) for seq in admissible]
    values = np.array([e.value for e in evals])
    k = int(np.argmax(values))
    feasible = all(e.feasible for e in evals)
    return float(values[k]), admissible[k], evals, feasible


def shifted_candidate(previous: Solution | FeedbackPolicy, terminal: TerminalIngredients) -> FeedbackPolicy:
    """Previous policy shifted by one instant with the terminal law appended."""
    policy = previous.policy if isinstance(previous, Solution) else previous
    gains = np.concatenate([policy.gains[1:], terminal.K_f[None]], axis=0)
    return FeedbackPolicy(gains, policy.intervals[1:] + (terminal.M,))


# ---------------------------------------------------------------------------
# vectorized machinery used by the search


class _Context:
    """Everything about the problem that does not change between instants."""

    def __init__(self, plant, spec, terminal, config):
        config.validate(spec)
        self.plant, self.spec, self.terminal, self.config = plant, spec, terminal, config
        self.n, self.m = plant.n, plant.m
        self.k = self.n + self.m
        self.N, self.P, self.M = config.N, config.P, spec.M
        self.table = lift_table(plant, max(config.delta_max, spec.M))
        self.D = config.delta_max
        self.constrained = not (is_unconstrained(config.X) and is_unconstrained(config.U)
                                and is_unconstrained(terminal.terminal_set))
        self._bound_cache = {}
        self._word_cache = {}

    def G(self, L):
        G = np.zeros((self.k, self.k))
        G[:self.n, :self.n] = L.A_j
        G[:self.n, self.n:] = L.B_j
        G[self.n:, self.n:] = np.eye(self.m)
        return G

    # -- interval words ----------------------------------------------------

    def all_words(self) -> np.ndarray:
        if "all" not in self._word_cache:
            words = np.array(list(itertools.product(range(1, self.D + 1), repeat=self.N)), dtype=np.int64)
            self._word_cache["all"] = words
        return self._word_cache["all"]

    def bucket_feasible(self, words: np.ndarray, beta0: int) -> np.ndarray:
        return _bucket_mask(np.asarray(words, dtype=np.int64), beta0, self.spec)

    # -- lower bounds ------------------------------------------------------

    def bound_scenarios(self, admissible: AdmissibleSet) -> np.ndarray:
        bits = admissible.bits
        ones = bits.sum(axis=1)
        order = sorted(range(len(bits)), key=lambda s: (ones[s], tuple(bits[s])))
        pick = [int(np.argmax(ones))] + [s for s in order if s != int(np.argmax(ones))]
        return bits[pick[: self.config.bound_scenarios]]

    def value_matrices(self, words: np.ndarray, scen: np.ndarray, chunk: int = 2048) -> np.ndarray:
        """``Pi[s, w]``: optimal single-scenario cost-to-go from stage 0, ``z0^T Pi z0``."""
        out = np.empty((len(scen), len(words), self.k, self.k))
        for a in range(0, len(words), chunk):
            out[:, a:a + chunk] = self._riccati(words[a:a + chunk], scen)[0]
        return out

    def _riccati(self, words, scen, want_gains=False):
        n, m, k = self.n, self.m, self.k
        S, Wn, L = len(scen), len(words), self.N + self.P
        Kf = self.terminal.K_f
        Pi = np.zeros((S, Wn, k, k))
        Pi[:, :, :n, :n] = self.terminal.P_f
        gains = np.zeros((S, Wn, self.N, m, n)) if want_gains else None
        Gs = [self.G(Lm) for Lm in self.table]
        Ws = [Lm.cost_matrix for Lm in self.table]
        for i in range(L - 1, -1, -1):
            sig = scen[:, i].astype(bool)
            if i >= self.N:
                Lm = self.table[self.M - 1]
                G, W = Gs[self.M - 1], Ws[self.M - 1]
                H = W + G.T @ Pi @ G
                for s in range(S):
                    T = np.eye(k)
                    if sig[s]:
                        T[n:, :n] = Kf
                        T[n:, n:] = 0.0
                    Pi[s] = T.T @ H[s] @ T
                continue
            d = words[:, i] - 1
            G = np.stack(Gs)[d]
            W = np.stack(Ws)[d]
            H = W[None] + np.swapaxes(G, -1, -2)[None] @ Pi @ G[None]
            Huu = H[..., n:, n:]
            Hux = H[..., n:, :n]
            Kopt = -np.linalg.solve(Huu, Hux)
            red = np.zeros_like(H)
            red[..., :n, :n] = H[..., :n, :n] + (np.swapaxes(Hux, -1, -2) @ Kopt)
            Pi = np.where(sig[:, None, None, None], red, H)
            Pi = 0.5 * (Pi + np.swapaxes(Pi, -1, -2))
            if want_gains:
                gains[:, :, i] = Kopt
        return Pi, gains

    def cached_bounds(self, r: int, admissible: AdmissibleSet):
        if r not in self._bound_cache:
            scen = self.bound_scenarios(admissible)
            words = self.all_words()
            self._bound_cache[r] = (scen, self.value_matrices(words, scen))
        return self._bound_cache[r]

    def closed_loop_maps(self, K):
        """Per (interval, delivery bit): transition and stage-cost matrices on ``z = [x; w]`` under ``v = K x``."""
        n, k = self.n, self.k
        Phi = np.empty((len(self.table), 2, k, k))
        C = np.empty_like(Phi)
        for d, Lm in enumerate(self.table):
            for s in (0, 1):
                T = np.eye(k)
                T[n:, :n] = s * K
                T[n:, n:] *= 1 - s
                Phi[d, s] = self.G(Lm) @ T
                C[d, s] = T.T @ Lm.cost_matrix @ T
        return Phi, C

    def fixed_gain_values(self, z0, bits: np.ndarray, K=None) -> np.ndarray:
        """Cost of every interval word under every loss word when ``v = K x`` at every stage.

        Rows follow ``all_words()``. Interval prefixes and loss prefixes are
        both shared in a tree, so each distinct pair is rolled out once.
        """
        K = self.terminal.K_f if K is None else K
        Phi, C = self.closed_loop_maps(K)
        Kf_Phi, Kf_C = self.closed_loop_maps(self.terminal.K_f)
        bits = np.asarray(bits, dtype=np.int64)
        N, D, k = self.N, self.D, self.k
        # terminal phase: one quadratic per distinct tail pattern
        tails, tail_of = np.unique(bits[:, N:], axis=0, return_inverse=True)
        T = np.zeros((len(tails), k, k))
        T[:, :self.n, :self.n] = self.terminal.P_f
        for i in range(tails.shape[1] - 1, -1, -1):
            F, Cm = Kf_Phi[self.M - 1, tails[:, i]], Kf_C[self.M - 1, tails[:, i]]
            T = Cm + np.swapaxes(F, -1, -2) @ T @ F
        Z = np.asarray(z0, dtype=float).reshape(1, 1, k)
        V = np.zeros((1, 1))
        heads = [()]
        for i in range(N):
            nxt = sorted({tuple(row[:i + 1]) for row in bits})
            parent = np.array([heads.index(h[:-1]) for h in nxt])
            last = np.array([h[-1] for h in nxt])
            npre = Z.shape[0]
            Znew = np.empty((npre, D, len(nxt), k))
            Vnew = np.empty((npre, D, len(nxt)))
            for s in (0, 1):
                cols = np.nonzero(last == s)[0]
                if not len(cols):
                    continue
                Zs, Vs = Z[:, parent[cols]], V[:, parent[cols]]
                for d in range(D):
                    Vnew[:, d, cols] = Vs + ((Zs @ C[d, s]) * Zs).sum(-1)
                    Znew[:, d, cols] = Zs @ Phi[d, s].T
            Z = Znew.reshape(npre * D, len(nxt), k)
            V = Vnew.reshape(npre * D, len(nxt))
            heads = nxt
        tailcost = np.stack([((Z @ Tt) * Z).sum(-1) for Tt in T], axis=-1)
        head_of = np.array([heads.index(tuple(row[:N])) for row in bits])
        return V[:, head_of] + tailcost[:, head_of, tail_of]


_CONTEXTS: dict = {}


def shared_context(plant, spec, terminal, config) -> _Context:
    """Context reused across controllers built from the same objects (bound tables are costly)."""
    key = (id(plant), id(spec), id(terminal), config)
    hit = _CONTEXTS.get(key)
    if hit is None or hit[0] is not plant or hit[1] is not spec or hit[2] is not terminal:
        if len(_CONTEXTS) >= 8:
            _CONTEXTS.pop(next(iter(_CONTEXTS)))
        hit = (plant, spec, terminal, _Context(plant, spec, terminal, config))
        _CONTEXTS[key] = hit
    return hit[3]


class _Engine:
    """Rollout of one interval word under every loss word, with adjoint gradients."""

    def __init__(self, ctx: _Context, word, bits: np.ndarray, z0: np.ndarray):
        self.ctx = ctx
        n, m, k = ctx.n, ctx.m, ctx.k
        self.word = tuple(int(d) for d in word)
        deltas = list(self.word) + [ctx.M] * ctx.P
        self.stages = [ctx.table[d - 1] for d in deltas]
        self.W = [Ls.cost_matrix for Ls in self.stages]
        self.G = [ctx.G(Ls) for Ls in self.stages]
        self.sig = np.asarray(bits, dtype=float)
        self.S, self.L = self.sig.shape
        self.z0 = np.asarray(z0, dtype=float)
        cfg, term = ctx.config, ctx.terminal
        # constraint rows acting on y = [x; u] at free stages
        self.rows = []
        for i in range(ctx.N):
            C, d = [], []
            if isinstance(cfg.X, Polytope):
                HX, hX = cfg.X.H, cfg.X.h
                C.append(np.hstack([HX, np.zeros((HX.shape[0], m))]))
                d.append(hX)
                for j in range(1, self.stages[i].j):
                    Lj = ctx.table[j - 1]
                    C.append(HX @ np.hstack([Lj.A_j, Lj.B_j]))
                    d.append(hX)
            self.rows.append((np.vstack(C), np.concatenate(d)) if C else None)
        self.U = cfg.U if isinstance(cfg.U, Polytope) else None
        self.Xf = term.terminal_set if not is_unconstrained(term.terminal_set) else None
        # without a terminal set the terminal phase is a fixed quadratic per scenario
        self.tail = None
        self.free = self.L
        if self.Xf is None:
            Phi, Cm = ctx.closed_loop_maps(term.K_f)
            bits_i = np.asarray(bits, dtype=np.int64)
            T = np.zeros((self.S, k, k))
            T[:, :n, :n] = term.P_f
            for i in range(self.L - 1, ctx.N - 1, -1):
                F = Phi[ctx.M - 1, bits_i[:, i]]
                T = Cm[ctx.M - 1, bits_i[:, i]] + np.swapaxes(F, -1, -2) @ T @ F
            self.tail = T
            self.free = ctx.N

    def _set_pen(self, x):
        """Penalty and gradient for terminal-set membership of rows of ``x``."""
        Xf = self.Xf
        if isinstance(Xf, Ellipsoid):
            Px = x @ Xf.P
            q = np.maximum(np.einsum("si,si->s", x, Px) - Xf.level, 0.0)
            return q ** 2, (4.0 * q)[:, None] * Px, q
        r = np.maximum(x @ Xf.H.T - Xf.h, 0.0)
        return (r ** 2).sum(axis=1), 2.0 * r @ Xf.H, r.max(axis=1)

    def run(self, gains, rho: float = 0.0, grad: bool = False):
        """Per-scenario cost, penalty, constraint violation and cost gradient."""
        ctx = self.ctx
        n, N, S, k = ctx.n, ctx.N, self.S, ctx.k
        Kf = ctx.terminal.K_f
        z = np.broadcast_to(self.z0, (S, k))
        vals = np.zeros(S)
        pen = np.zeros(S)
        viol = np.zeros(S)
        tape = []
        for i in range(self.free):
            K = gains[i] if i < N else Kf
            sig = self.sig[:, i:i + 1]
            y = z.copy()
            y[:, n:] += sig * (z[:, :n] @ K.T - z[:, n:])
            Wy = y @ self.W[i]
            vals += (y * Wy).sum(axis=1)
            gy_pen = gv_pen = gx_pen = None
            if i < N:
                if self.rows[i] is not None:
                    C, d = self.rows[i]
                    res = y @ C.T - d
                    viol = np.maximum(viol, res.max(axis=1))
                    rp = np.maximum(res, 0.0)
                    pen += (rp ** 2).sum(axis=1)
                    gy_pen = 2.0 * rp @ C
                if self.U is not None:
                    res = z[:, :n] @ K.T @ self.U.H.T - self.U.h
                    viol = np.maximum(viol, res.max(axis=1))
                    rp = np.maximum(res, 0.0)
                    pen += (rp ** 2).sum(axis=1)
                    gv_pen = 2.0 * rp @ self.U.H
            elif self.Xf is not None:
                p, gx_pen, q = self._set_pen(z[:, :n])
                pen += p
                viol = np.maximum(viol, q)
            tape.append((z[:, :n], sig, Wy, K, gy_pen, gv_pen, gx_pen))
            z = y @ self.G[i].T
        if self.tail is not None:
            Tz = np.einsum("sij,sj->si", self.tail, z)
            vals += (z * Tz).sum(axis=1)
            mu = 2.0 * Tz
        else:
            xL = z[:, :n]
            PxL = xL @ ctx.terminal.P_f
            vals += (xL * PxL).sum(axis=1)
            mu = np.zeros_like(z)
            mu[:, :n] = 2.0 * PxL
            p, gx, q = self._set_pen(xL)
            pen += p
            viol = np.maximum(viol, q)
            mu[:, :n] += rho * gx
        if not grad:
            return vals, pen, viol, None
        g = np.empty((S, N, ctx.m, n))
        for i in range(self.free - 1, -1, -1):
            x, sig, Wy, K, gy_pen, gv_pen, gx_pen = tape[i]
            gy = 2.0 * Wy + mu @ self.G[i]
            if gy_pen is not None:
                gy += rho * gy_pen
            gu = gy[:, n:]
            gv = sig * gu
            if gv_pen is not None:
                gv = gv + rho * gv_pen
            if i < N:
                g[:, i] = gv[:, :, None] * x[:, None, :]
            mu = np.empty_like(gy)
            mu[:, :n] = gy[:, :n] + gv @ K
            if gx_pen is not None:
                mu[:, :n] += rho * gx_pen
            mu[:, n:] = gu - sig * gu
        return vals, pen, viol, g


def _bucket_mask(words: np.ndarray, beta0: int, spec: TokenBucketSpec) -> np.ndarray:
    """Words whose bucket stays admissible, including the terminal requirement."""
    g, c, b, lo = spec.g, spec.c, spec.b, spec.min_level
    beta = np.full(len(words), beta0, dtype=np.int64)
    ok = np.full(len(words), 0 <= beta0 <= b)
    for i in range(words.shape[1]):
        # lowest level inside the interval is right after the transmission
        ok &= beta + g - c >= 0
        beta = np.minimum(beta + words[:, i] * g - c, b)
    ok &= beta >= lo
    return ok


def bucket_admissible_words(spec: TokenBucketSpec, N: int, delta_max: int, beta0: int) -> list:
    """Interval words of length ``N`` the bucket can serve from level ``beta0``, in lexicographic order.

    A word qualifies when every transmission leaves a nonnegative level and
    the level after the last interval still allows periodic sending.
    """
    words = np.array(list(itertools.product(range(1, delta_max + 1), repeat=N)), dtype=np.int64)
    ok = _bucket_mask(words, beta0, spec)
    return [tuple(int(d) for d in w) for w in words[ok]]


def _tie_key(word):
    return (word[0], tuple(word))


class _Incumbent:
    def __init__(self, rtol):
        self.rtol = rtol
        self.value = math.inf
        self.word = None
        self.gains = None
        self.provenance = None

    def better(self, value, word) -> bool:
        if self.word is None:
            return True
        tol = self.rtol * max(abs(self.value), abs(value), 1e-300)
        if value < self.value - tol:
            return True
        if value > self.value + tol:
            return False
        return _tie_key(word) < _tie_key(self.word)

    def offer(self, value, word, gains, provenance):
        if self.better(value, word):
            self.value, self.word, self.gains, self.provenance = value, tuple(word), gains, provenance
            return True
        return False


def _optimize_word(ctx: _Context, engine: _Engine, starts, scale: float):
    """Local min-max over the gains of one word; returns ``(value, gains, feasible)``.

    Each start is first relaxed on a soft maximum of the log scenario costs
    (cheap, smooth, scale free), then polished on the exact maximum.
    """
    cfg = ctx.config
    N, m, n = ctx.N, ctx.m, ctx.n
    best = None

    def consider(gains):
        nonlocal best
        vals, _, viol, _ = engine.run(gains)
        feasible = bool(np.all(viol <= cfg.feas_tol))
        value = float(vals.max())
        key = (not feasible, value)
        if best is None or key < best[0]:
            best = (key, value, gains.copy(), feasible)
        return feasible

    for g0 in starts:
        g0 = np.asarray(g0, dtype=float).reshape(N, m, n)
        consider(g0)
        if not np.any(engine.z0):
            continue
        rho = cfg.penalty if ctx.constrained else 0.0
        gains = _smooth(engine, g0, rho, cfg)
        consider(gains)
        for _ in range(cfg.penalty_rounds if ctx.constrained else 1):
            gains = _slsqp(engine, gains, rho, scale, cfg)
            if consider(gains):
                break
            rho *= cfg.penalty_growth
    _, value, gains, feasible = best
    return value, gains, feasible


def _smooth(engine: _Engine, gains, rho, cfg):
    shape = gains.shape
    theta = gains.reshape(-1)
    for temp in cfg.smoothing:
        def f(th):
            vals, pen, _, g = engine.run(th.reshape(shape), rho, grad=True)
            tot = np.maximum(vals + rho * pen, 1e-300)
            lv = np.log(tot) / temp
            top = lv.max()
            e = np.exp(lv - top)
            wsum = e.sum()
            weights = e / wsum / tot
            return temp * (top + np.log(wsum)), weights @ g.reshape(len(vals), -1)
        res = minimize(f, theta, jac=True, method="L-BFGS-B", options={"maxiter": cfg.smooth_maxiter})
        theta = res.x
    return theta.reshape(shape)


def _slsqp(engine: _Engine, gains, rho, scale, cfg):
    N, m, n = gains.shape
    nk = N * m * n
    cache = {}

    def evaluate(theta):
        key = theta[:nk].tobytes()
        if key not in cache:
            cache.clear()
            vals, pen, _, g = engine.run(theta[:nk].reshape(N, m, n), rho, grad=True)
            f = (vals + rho * pen) / scale
            J = g.reshape(len(vals), nk) / scale
            cache[key] = (f, J)
        return cache[key]

    def cons(theta):
        f, _ = evaluate(theta)
        return theta[-1] - f

    def cons_jac(theta):
        _, J = evaluate(theta)
        out = np.empty((J.shape[0], nk + 1))
        out[:, :nk] = -J
        out[:, -1] = 1.0
        return out

    obj_grad = np.zeros(nk + 1)
    obj_grad[-1] = 1.0
    f0, _ = evaluate(np.append(gains.reshape(-1), 0.0))
    theta0 = np.append(gains.reshape(-1), f0.max())
    res = minimize(lambda th: th[-1], theta0, jac=lambda th: obj_grad, method="SLSQP",
                   constraints=[{"type": "ineq", "fun": cons, "jac": cons_jac}],
                   options={"maxiter": cfg.maxiter, "ftol": cfg.ftol})
    return np.asarray(res.x[:nk]).reshape(N, m, n)


def _beam_words(ctx: _Context, z0, beta0, scen):
    """Interval words by beam search when the full word space is too large."""
    cfg = ctx.config
    prefixes = [()]
    for depth in range(ctx.N):
        cands = [p + (d,) for p in prefixes for d in range(1, ctx.D + 1)]
        full = np.array([c + (ctx.M,) * (ctx.N - depth - 1) for c in cands], dtype=np.int64)
        ok = ctx.bucket_feasible(full, beta0)
        if not ok.any():
            return np.zeros((0, ctx.N), dtype=np.int64)
        full, cands = full[ok], [c for c, o in zip(cands, ok) if o]
        Pi = ctx.value_matrices(full, scen)
        lb = np.einsum("i,swij,j->sw", z0, Pi, z0).max(axis=0)
        order = sorted(range(len(cands)), key=lambda a: (lb[a], cands[a]))
        prefixes = [cands[a] for a in order[: cfg.beam_width]]
    return np.array(prefixes, dtype=np.int64)


def outer_min(xi0: OverallState, r: int, terminal: TerminalIngredients, plant: PlantModel,
              spec: TokenBucketSpec, config: MpcConfig, candidate: FeedbackPolicy | None = None,
              context: _Context | None = None) -> Solution:
    """Best feasible policy found for the min-max problem at ``xi0`` with counter ``r``.

    ``candidate`` (normally the shifted previous solution) seeds the search
    and is returned, marked as fallback, if nothing better is found.

    Raises
    ------
    InfeasibleProblem
        If no explored policy is feasible for every admissible loss word.
    """
    ctx = context or _Context(plant, spec, terminal, config)
    if not 0 <= r <= config.P:
        raise ValueError(f"counter r={r} outside [0, {config.P}]")
    admissible = enumerate_admissible(config.N, config.P, r)
    z0 = np.concatenate([xi0.x, xi0.w])
    scale = float(z0 @ z0)
    if scale == 0.0:
        scale = 1.0

    if config.delta_max ** config.N <= config.exhaustive_limit:
        _, Pi = ctx.cached_bounds(r, admissible)
        words = ctx.all_words()
        ok = ctx.bucket_feasible(words, xi0.beta)
        lb = np.einsum("i,swij,j->sw", z0, Pi[:, ok], z0).max(axis=0)
        rank = ctx.fixed_gain_values(z0, admissible.bits)[ok].max(axis=1)
        words = words[ok]
    else:
        scen = ctx.bound_scenarios(admissible)
        words = _beam_words(ctx, z0, xi0.beta, scen)
        Pi = ctx.value_matrices(words, scen) if len(words) else np.zeros((len(scen), 0, ctx.k, ctx.k))
        lb = np.einsum("i,swij,j->sw", z0, Pi, z0).max(axis=0)
        rank = lb

    terminal_gains = np.repeat(terminal.K_f[None], config.N, axis=0)
    inc = _Incumbent(config.tie_rtol)
    explored = 0
    shifted = None
    if candidate is not None and ctx.bucket_feasible(np.asarray([candidate.intervals]), xi0.beta)[0]:
        shifted = candidate.gains
        cand_word = candidate.intervals
        engine = _Engine(ctx, cand_word, admissible.bits, z0)
        vals, _, viol, _ = engine.run(shifted)
        if np.all(viol <= config.feas_tol):
            inc.offer(float(vals.max()), cand_word, shifted.copy(), FALLBACK)
        value, gains, feasible = _optimize_word(ctx, engine, [shifted, terminal_gains], scale)
        explored += 1
        if feasible and value < inc.value:
            inc.offer(value, cand_word, gains, OPTIMIZED)

    order = sorted(range(len(words)), key=lambda a: (rank[a], words[a][0], tuple(words[a])))
    for a in order:
        if explored >= config.max_words:
            break
        word = tuple(int(d) for d in words[a])
        if shifted is not None and word == candidate.intervals:
            continue
        if inc.word is not None:
            # the bound says this word cannot win, not even on the tie-break
            tol = config.tie_rtol * max(abs(inc.value), 1e-300)
            if lb[a] > inc.value + tol or (lb[a] >= inc.value - tol and not inc.better(lb[a], word)):
                continue
        engine = _Engine(ctx, word, admissible.bits, z0)
        value, gains, feasible = _optimize_word(ctx, engine, [terminal_gains], scale)
        explored += 1
        if feasible:
            inc.offer(value, word, gains, OPTIMIZED)

    if inc.word is None:
        raise InfeasibleProblem(
            f"no feasible policy among {explored} explored interval words "
            f"({len(words)} bucket-admissible) at r={r}",
            report={"explored": explored, "bucket_admissible": int(len(words))})
    policy = FeedbackPolicy(inc.gains, inc.word)
    sol = solve_report(policy, xi0, admissible, terminal, plant, spec, config)
    sol.provenance = inc.provenance
    sol.words_explored = explored
    sol.words_feasible = int(len(words))
    if not sol.feasible:
        raise InfeasibleProblem("selected policy failed the exact feasibility check", report=sol.violations)
    if not np.isclose(sol.worst_value, inc.value, rtol=1e-7, atol=1e-9 * scale):
        raise AssertionError(f"fast rollout value {inc.value} disagrees with exact value {sol.worst_value}")
    return sol


def solve_report(policy, xi0, admissible, terminal, plant, spec, config) -> Solution:
    """Exact evaluation of ``policy`` over the admissible set, packaged as a Solution."""
    value, seq, evals, feasible = inner_max(policy, xi0, admissible, terminal, plant, spec, config)
    return Solution(
        policy=policy, worst_value=value, worst_sequence=seq,
        trajectories=[e.trajectory for e in evals], feasible=feasible,
        values=np.array([e.value for e in evals]), admissible=admissible,
        violations={str(admissible[s]): e.violations for s, e in enumerate(evals) if e.violations},
    )


@dataclass
class Diagnostic:
    k: int
    t: int
    r: int
    n_scenarios: int
    words_explored: int
    provenance: str
    worst_value: float


class SelfTriggeredMPC:
    """Stateful controller running the sampling-instant loop.

    In nominal mode the controller plans with ``P = 0`` (a single scenario in
    which every packet arrives) and ignores acknowledgments.
    """

    def __init__(self, plant: PlantModel, spec: TokenBucketSpec, terminal: TerminalIngredients,
                 config: MpcConfig, nominal: bool = False):
        if nominal and config.P != 0:
            config = replace(config, P=0)
        self.plant, self.spec, self.terminal, self.config = plant, spec, terminal, config
        self.nominal = nominal
        self.context = shared_context(plant, spec, terminal, config)
        self.history = LossHistory()
        self.k = 0
        self.t = 0
        self.solution: Solution | None = None
        self.previous: Solution | None = None
        self.candidate: FeedbackPolicy | None = None
        self.diagnostics: list[Diagnostic] = []

    @property
    def r(self) -> int:
        return self.history.r

    def control_step(self, xi: OverallState, ack: int | None = None) -> ControlPacket:
        """Collect the acknowledgment, solve, and return the packet to send.

        Raises ``AssumptionViolation`` if the acknowledgments imply more than
        ``P`` consecutive losses and ``InfeasibleProblem`` if the first
        problem has no solution.
        """
        if self.k >= 1 and not self.nominal:
            self.history = update_counter(self.history, 1 if ack is None else int(ack), self.config.P)
        candidate = None
        if self.solution is not None and self.solution.feasible:
            candidate = shifted_candidate(self.solution, self.terminal)
        sol = outer_min(xi, self.r, self.terminal, self.plant, self.spec, self.config,
                        candidate=candidate, context=self.context)
        if candidate is not None and sol.provenance != FALLBACK:
            # guard against a local-solver shortfall
            admissible = sol.admissible
            engine = _Engine(self.context, candidate.intervals, admissible.bits,
                             np.concatenate([xi.x, xi.w]))
            vals, _, viol, _ = engine.run(candidate.gains)
            if np.all(viol <= self.config.feas_tol) and vals.max() < sol.worst_value:
                sol = solve_report(candidate, xi, admissible, self.terminal, self.plant, self.spec, self.config)
                sol.provenance = FALLBACK
        self.previous, self.solution, self.candidate = self.solution, sol, candidate
        packet = sol.policy.first_packet(xi.x)
        self.diagnostics.append(Diagnostic(self.k, self.t, self.r, len(sol.admissible),
                                           sol.words_explored, sol.provenance, sol.worst_value))
        self.k += 1
        self.t += packet.delta
        return packet


DIAGNOSTIC_COLUMNS = ("k", "t_k", "r", "n_scenarios", "words_explored", "provenance", "worst_value")


def write_diagnostics(diagnostics, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIAGNOSTIC_COLUMNS)
        for d in diagnostics:
            w.writerow([d.k, d.t, d.r, d.n_scenarios, d.words_explored, d.provenance, repr(d.worst_value)])
