"""Closed-loop simulation of plant, zero-order-hold actuator, lossy channel and controller."""
from __future__ import annotations

import csv
import logging
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .minmax_controller import (
    FALLBACK, InfeasibleProblem, MpcConfig, SelfTriggeredMPC, solve_report,
)
from .lifted_dynamics import OverallState, PlantModel
from .network import AssumptionViolation, LossModel, TokenBucketSpec, bucket_step, enumerate_admissible
from .terminal_design import TerminalIngredients, design_terminal

log = logging.getLogger(__name__)

BLOWUP = 1e6
DECREASE_TOL = 1e-6
CONVERGED = 1e-2


@dataclass
class SimConfig:
    plant: PlantModel
    spec: TokenBucketSpec
    mpc: MpcConfig
    loss: LossModel
    x0: np.ndarray
    w0: np.ndarray | None = None
    beta0: int = 0
    T: int = 100
    terminal: TerminalIngredients | None = None
    nominal: bool = False
    seed: int | None = None
    audit: bool = True
    tail_start: int = 60

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        self.w0 = np.zeros(self.plant.m) if self.w0 is None else np.asarray(self.w0, dtype=float).reshape(-1)
        if self.x0.size != self.plant.n or self.w0.size != self.plant.m:
            raise ValueError("initial state dimensions do not match the plant")
        if not 0 <= self.beta0 <= self.spec.b:
            raise ValueError(f"beta0={self.beta0} outside [0, {self.spec.b}]")
        if self.T < 1:
            raise ValueError("horizon T must be >= 1")


@dataclass
class TraceRecord:
    """State at time ``t`` and the input applied over ``[t, t+1)``.

    Event fields are filled only at sampling instants.
    """

    t: int
    x: np.ndarray
    u: np.ndarray | None
    beta: int
    k: int | None = None
    delta: int | None = None
    v: np.ndarray | None = None
    sigma: int | None = None
    ack: int | None = None
    r: int | None = None
    worst_value: float | None = None
    provenance: str | None = None

    @property
    def is_event(self) -> bool:
        return self.k is not None


@dataclass
class SimResult:
    trace: list
    summary: dict
    margins: list = field(default_factory=list)
    candidate_feasible: list = field(default_factory=list)
    tree_match: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    config: SimConfig | None = None

    @property
    def events(self) -> list:
        return [rec for rec in self.trace if rec.is_event]


def _stack(traj) -> np.ndarray:
    return np.array([np.r_[s.x, s.w, s.beta] for s in traj])


def _tree_match(prev_sol, cand_sol, tol=1e-9) -> bool:
    """Every candidate scenario trajectory is the one-step shift of some previous one."""
    prev = np.array([_stack(traj)[1:] for traj in prev_sol.trajectories])
    cur = np.array([_stack(traj)[:-1] for traj in cand_sol.trajectories])
    scale = max(1.0, np.abs(cur).max())
    gap = np.abs(cur[:, None] - prev[None]).max(axis=(2, 3))
    return bool(np.all(gap.min(axis=1) <= tol * scale))


def run(config: SimConfig) -> SimResult:
    """Simulate ``config.T`` steps of the sampled loop.

    Raises
    ------
    AssumptionViolation
        If the channel loses more than ``P`` consecutive packets.
    InfeasibleProblem
        If the robust controller has no solution at the first instant.
    """
    plant, spec, mpc = config.plant, config.spec, config.mpc
    terminal = config.terminal
    if terminal is None:
        terminal = design_terminal(plant, spec, mpc.P, mpc.X, mpc.U)
    ctrl = SelfTriggeredMPC(plant, spec, terminal, mpc, nominal=config.nominal)
    P_channel = mpc.P
    started = time.perf_counter()

    x, w, beta = config.x0.copy(), config.w0.copy(), int(config.beta0)
    t, k = 0, 0
    run_losses = 0
    last_sigma = None
    prev_value, prev_x = None, None
    trace, margins, cand_ok, tree_ok = [], [], [], []
    diverged = False
    infeasible_holds = 0

    while t < config.T:
        xi = OverallState(x.copy(), w.copy(), beta)
        ack = last_sigma
        r_channel = run_losses
        prev_solution = ctrl.solution
        try:
            packet = ctrl.control_step(xi, ack)
            sol = ctrl.solution
            v, delta, transmit = packet.v, packet.delta, True
        except InfeasibleProblem:
            if not config.nominal:
                raise
            # nominal baseline: no packet this step, the actuator keeps its input
            sol, v, delta, transmit = None, None, 1, False
            infeasible_holds += 1
            ctrl.solution = None
        if transmit:
            sigma = int(config.loss.draw(r_channel, sol))
            run_losses = 0 if sigma else run_losses + 1
            if run_losses > P_channel:
                raise AssumptionViolation(
                    f"loss model dropped {run_losses} consecutive packets at t={t}, bound P={P_channel}")
            last_sigma = sigma
        else:
            sigma = None
        if sol is not None and not config.nominal:
            if prev_value is not None:
                margins.append(prev_value - sol.worst_value - float(prev_x @ plant.Q @ prev_x))
            prev_value, prev_x = sol.worst_value, x.copy()
            if config.audit and ctrl.candidate is not None:
                cand = _candidate_report(ctrl, xi)
                cand_ok.append(cand.feasible)
                tree_ok.append(_tree_match(prev_solution, cand))

        u = w if not transmit else (v if sigma else w)
        steps = min(delta, config.T - t)
        for j in range(steps):
            rec = TraceRecord(t, x.copy(), u.copy(), beta)
            if j == 0:
                rec.k, rec.delta, rec.ack, rec.r = k, delta, ack, (ctrl.r if not config.nominal else r_channel)
                if transmit:
                    rec.v, rec.sigma = np.asarray(v).copy(), sigma
                    rec.worst_value, rec.provenance = sol.worst_value, sol.provenance
                else:
                    rec.provenance = "infeasible-hold"
            trace.append(rec)
            x = plant.A @ x + plant.B @ u
            beta = bucket_step(beta, transmit and j == 0, spec)
            t += 1
            if not np.all(np.isfinite(x)) or np.abs(x).max() > BLOWUP:
                diverged = True
                break
        w = u
        k += 1
        if diverged:
            break
    trace.append(TraceRecord(t, x.copy(), None, beta))

    summary = _summarize(trace, config, ctrl, margins, cand_ok, tree_ok, diverged, infeasible_holds)
    summary["runtime_s"] = round(time.perf_counter() - started, 3)
    return SimResult(trace, summary, margins, cand_ok, tree_ok, ctrl.diagnostics, config)


def _candidate_report(ctrl: SelfTriggeredMPC, xi):
    adm = enumerate_admissible(ctrl.config.N, ctrl.config.P, ctrl.r)
    return solve_report(ctrl.candidate, xi, adm, ctrl.terminal, ctrl.plant, ctrl.spec, ctrl.config)


def _summarize(trace, config, ctrl, margins, cand_ok, tree_ok, diverged, holds) -> dict:
    xs = np.array([rec.x for rec in trace])
    ts = np.array([rec.t for rec in trace])
    norms = np.abs(xs).max(axis=1)
    tail = norms[ts >= config.tail_start]
    above = np.nonzero(norms > CONVERGED)[0]
    if len(above) == 0:
        settle = 0
    elif above[-1] + 1 < len(ts):
        settle = int(ts[above[-1] + 1])
    else:
        settle = None
    events = [rec for rec in trace if rec.is_event]
    x1_30 = float(xs[ts == 30, 0][0]) if np.any(ts == 30) else None
    return {
        "mode": "nominal" if config.nominal else "robust",
        "T": config.T,
        "final_t": int(ts[-1]),
        "instants": len(events),
        "transmissions_lost": sum(1 for e in events if e.sigma == 0),
        "tail_start": config.tail_start,
        "tail_max_abs_x": float(tail.max()) if tail.size else None,
        "time_to_threshold": settle,
        "x1_at_30": x1_30,
        "beta_min": min(rec.beta for rec in trace),
        "beta_max": max(rec.beta for rec in trace),
        "fallback_count": sum(1 for e in events if e.provenance == FALLBACK),
        "infeasible_holds": holds,
        "min_decrease_margin": min(margins) if margins else None,
        "candidate_always_feasible": all(cand_ok) if cand_ok else None,
        "scenario_tree_match": all(tree_ok) if tree_ok else None,
        "diverged": diverged,
        "last_intervals": " ".join(str(d) for d in sampling_interval_summary(trace)["tail"]),
    }


@dataclass
class InvariantReport:
    checks: dict

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.checks.values())

    def lines(self):
        for name, (ok, detail) in self.checks.items():
            yield f"{name}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")


def assert_runtime_invariants(result: SimResult, spec: TokenBucketSpec | None = None,
                              config: MpcConfig | None = None, tol: float = 1e-8) -> InvariantReport:
    """Audit a finished robust run record by record; never raises."""
    cfg = result.config
    spec = spec or cfg.spec
    mpc = config or cfg.mpc
    trace = result.trace
    checks = {}

    def first(pred):
        for rec in trace:
            if pred(rec):
                return rec.t
        return None

    bad = first(lambda rec: not mpc.X.contains(rec.x, tol))
    checks["state in X"] = (bad is None, f"t={bad}" if bad is not None else "")
    bad = first(lambda rec: not 0 <= rec.beta <= spec.b)
    checks["bucket in [0, b]"] = (bad is None, f"t={bad}" if bad is not None else "")
    bad = first(lambda rec: rec.u is not None and not mpc.U.contains(rec.u, tol))
    checks["input in U"] = (bad is None, f"t={bad}" if bad is not None else "")
    bad = first(lambda rec: rec.is_event and rec.v is not None
                and (not mpc.U.contains(rec.v, tol) or not 1 <= rec.delta <= mpc.delta_max))
    checks["packet in Pi"] = (bad is None, f"t={bad}" if bad is not None else "")

    # bucket recursion replayed from the event list
    bad = None
    for prev, rec in zip(trace, trace[1:]):
        expect = bucket_step(prev.beta, prev.is_event and prev.sigma is not None, spec)
        if rec.beta != expect:
            bad = rec.t
            break
    checks["bucket recursion"] = (bad is None, f"t={bad}" if bad is not None else "")

    # zero-order hold: input changes only at sampling instants
    bad = None
    for prev, rec in zip(trace, trace[1:]):
        if rec.u is not None and not rec.is_event and not np.array_equal(rec.u, prev.u):
            bad = rec.t
            break
    checks["held input"] = (bad is None, f"t={bad}" if bad is not None else "")

    events = [rec for rec in trace if rec.is_event]
    bad = None
    for prev, rec in zip(events, events[1:]):
        if rec.ack is not None and prev.sigma is not None and rec.ack != prev.sigma:
            bad = rec.t
            break
    checks["ack equals previous delivery"] = (bad is None, f"t={bad}" if bad is not None else "")

    run, bad = 0, None
    for rec in events:
        if rec.sigma is None:
            continue
        run = 0 if rec.sigma else run + 1
        if run > mpc.P and bad is None:
            bad = rec.t
    checks["loss bound"] = (bad is None, f"t={bad}" if bad is not None else "")

    m = min(result.margins) if result.margins else 0.0
    checks["certified decrease"] = (m >= -DECREASE_TOL, f"min margin {m:.3e}")
    if result.candidate_feasible:
        checks["shifted candidate feasible"] = (all(result.candidate_feasible), "")
    if result.tree_match:
        checks["scenario tree match"] = (all(result.tree_match), "")
    return InvariantReport(checks)


def sampling_interval_summary(trace) -> dict:
    """Per-instant ``(t_k, delta, sigma)``, the interval histogram and the last five intervals."""
    events = [(rec.t, rec.delta, rec.sigma) for rec in trace if rec.is_event]
    hist = Counter(d for _, d, _ in events)
    return {"events": events, "histogram": dict(sorted(hist.items())),
            "tail": [d for _, d, _ in events[-5:]]}


def trace_columns(n: int, m: int) -> list:
    return (["t", "k"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)]
            + ["beta", "delta", "sigma", "ack", "r", "worst_value", "provenance"])


def write_trace(trace, path, n: int, m: int) -> None:
    def opt(v):
        return "" if v is None else v

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace_columns(n, m))
        for rec in trace:
            u = [repr(float(c)) for c in rec.u] if rec.u is not None else [""] * m
            w.writerow([rec.t, opt(rec.k)] + [repr(float(c)) for c in rec.x] + u
                       + [rec.beta, opt(rec.delta), opt(rec.sigma), opt(rec.ack), opt(rec.r),
                          "" if rec.worst_value is None else repr(rec.worst_value), opt(rec.provenance)])


def read_trace(path) -> list:
    """Rows of a trace CSV as dicts of strings."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def format_summary(summary: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in summary.items())
