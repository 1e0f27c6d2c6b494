"""Command-line front end: ``stmpc {synth, verify, simulate, reproduce}``.

Exit codes
----------
0 success; 1 configuration or I/O error; 2 terminal LMI infeasible or
verification failure; 3 controller infeasible at the first instant;
4 loss realization exceeds the loss bound; 5 reproduction criteria failed.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import closed_loop_sim as sim
from .config import (
    ConfigError, Experiment, bundled_path, load, make_loss, read_ingredients, write_ingredients,
)
from .minmax_controller import InfeasibleProblem, write_diagnostics
from .network import AssumptionViolation, BoundedRandomLoss, ScriptedLoss
from .terminal_design import (
    InfeasibleTerminalLMI, TerminalIngredients, construct_terminal_set, synthesize, verify_decrease,
    verify_qmi,
)

log = logging.getLogger("stmpc")

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_INFEASIBLE, EXIT_ASSUMPTION, EXIT_REPRODUCE = range(6)

SWEEP_LOSS_PROBABILITY = 0.4
SWEEP_T = 30
SWEEP_MAX_WORDS = 3


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _threads() -> int:
    raw = os.environ.get("STMPC_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"STMPC_THREADS={raw!r} is not an integer")
    if value < 1:
        raise CliError(EXIT_CONFIG, "STMPC_THREADS must be >= 1")
    return value


def _load(path) -> Experiment:
    try:
        return load(path)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}")


def _with_p(ex: Experiment, p):
    if p is None:
        return ex
    if p < 0:
        raise CliError(EXIT_CONFIG, "--p must be >= 0")
    return replace(ex, mpc=replace(ex.mpc, P=p))


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot create {out}: {exc}")
    return out


# -- synth / verify ---------------------------------------------------------


def design(ex: Experiment) -> tuple:
    """Synthesize and fully verify terminal ingredients; returns ``(terminal, lines, passed)``."""
    try:
        K_f, P_f = synthesize(ex.plant, ex.spec, ex.mpc.P)
    except InfeasibleTerminalLMI as exc:
        raise CliError(EXIT_VERIFY, f"terminal LMI infeasible: {exc}")
    Xf = construct_terminal_set(K_f, P_f, ex.plant, ex.mpc.X, ex.mpc.U, ex.spec.M, ex.mpc.P)
    terminal = TerminalIngredients(K_f, P_f, ex.spec.M, Xf, ex.mpc.P)
    lines, passed = verification_lines(terminal, ex)
    return terminal, lines, passed


def verification_lines(terminal: TerminalIngredients, ex: Experiment) -> tuple:
    qmi = verify_qmi(terminal.K_f, terminal.P_f, ex.plant, terminal.M, ex.mpc.P)
    dec = verify_decrease(terminal, ex.plant, ex.spec, P=ex.mpc.P, X=ex.mpc.X, U=ex.mpc.U,
                          delta_max=ex.mpc.delta_max)
    lines = list(qmi.lines()) + [f"worst qmi residual {qmi.worst:+.6e} at p={qmi.worst_p}"] + list(dec.lines())
    passed = qmi.passed and dec.passed
    lines.append(f"overall: {'PASS' if passed else 'FAIL'}")
    return lines, passed


def cmd_synth(args) -> int:
    ex = _with_p(_load(args.config), args.p)
    out = Path(args.out or ex.paths.get("ingredients", "ingredients.txt"))
    if out.suffix == "" or out.is_dir():
        out = _outdir(out) / "ingredients.txt"
    terminal, lines, passed = design(ex)
    try:
        write_ingredients(out, terminal, lines)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot write {out}: {exc}")
    print("\n".join(lines))
    print(f"ingredients written to {out}")
    return EXIT_OK if passed else EXIT_VERIFY


def cmd_verify(args) -> int:
    ex = _with_p(_load(args.config), args.p)
    try:
        terminal = read_ingredients(args.ingredients, ex.plant)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"ingredients error: {exc}")
    if terminal.M != ex.spec.M:
        raise CliError(EXIT_CONFIG, f"ingredients use period M={terminal.M}, config implies M={ex.spec.M}")
    lines, passed = verification_lines(terminal, ex)
    print("\n".join(lines))
    return EXIT_OK if passed else EXIT_VERIFY


# -- simulate ---------------------------------------------------------------


def _terminal_for(ex: Experiment, args) -> TerminalIngredients:
    path = getattr(args, "ingredients", None) or ex.paths.get("ingredients")
    if path and Path(path).exists():
        try:
            return read_ingredients(path, ex.plant)
        except ConfigError as exc:
            raise CliError(EXIT_CONFIG, f"ingredients error: {exc}")
    terminal, lines, passed = design(ex)
    if not passed:
        raise CliError(EXIT_VERIFY, "terminal ingredients failed verification:\n" + "\n".join(lines))
    return terminal


def simulate(ex: Experiment, terminal, loss, nominal: bool, T=None, audit=True) -> sim.SimResult:
    cfg = sim.SimConfig(ex.plant, ex.spec, ex.mpc, loss, ex.sim["x0"], ex.sim["w0"], ex.sim["beta0"],
                        T or ex.sim["T"], terminal, nominal, ex.sim["seed"], audit, ex.sim["tail_start"])
    try:
        return sim.run(cfg)
    except InfeasibleProblem as exc:
        raise CliError(EXIT_INFEASIBLE, f"controller infeasible: {exc}")
    except AssumptionViolation as exc:
        raise CliError(EXIT_ASSUMPTION, f"loss bound violated: {exc}")


def write_outputs(result: sim.SimResult, out: Path, stem: str, ex: Experiment) -> None:
    n, m = ex.plant.n, ex.plant.m
    sim.write_trace(result.trace, out / f"{stem}.csv", n, m)
    write_diagnostics(result.diagnostics, out / f"{stem}_diagnostics.csv")
    (out / f"{stem}_summary.txt").write_text(sim.format_summary(result.summary))
    (out / f"{stem}.gp").write_text(plot_script([f"{stem}.csv"], f"{stem}.png"))


def plot_script(csv_names, png: str) -> str:
    """gnuplot script drawing the first state and the sampling intervals from trace CSVs only."""
    first = csv_names[0]
    state_plots = ", ".join(f"'{c}' using 't':'x_1' with lines title '{Path(c).stem}'" for c in csv_names)
    return f"""# Generated plot script; reads only the trace CSV files.
set datafile separator ','
set datafile missing ''
set terminal pngcairo size 900,700
set output '{png}'
set multiplot layout 2,1
set xlabel 't'
set ylabel 'x_1'
plot {state_plots}
set ylabel 'sampling interval'
set yrange [0:*]
plot '{first}' using 't':(stringcolumn('sigma') eq '1' ? column('delta') : 1/0) with impulses lw 2 title 'delivered', \\
     '{first}' using 't':(stringcolumn('sigma') eq '0' ? column('delta') : 1/0) with points pt 6 title 'lost'
unset multiplot
"""


def cmd_simulate(args) -> int:
    ex = _with_p(_load(args.config), args.p)
    out = _outdir(args.out or ex.paths.get("out", "out"))
    loss_text = args.loss or ex.sim["loss"]
    try:
        loss = make_loss(loss_text, ex.mpc.P, ex.sim["seed"])
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    terminal = _terminal_for(ex, args)
    nominal = args.nominal or ex.sim["nominal"]
    result = simulate(ex, terminal, loss, nominal)
    stem = "nominal" if nominal else "trace"
    write_outputs(result, out, stem, ex)
    print(sim.format_summary(result.summary), end="")
    if not nominal:
        print("\n".join(sim.assert_runtime_invariants(result).lines()))
    return EXIT_OK


# -- reproduce --------------------------------------------------------------


def _sweep_one(args):
    ex, terminal, seed = args
    ex = replace(ex, mpc=replace(ex.mpc, max_words=min(ex.mpc.max_words, SWEEP_MAX_WORDS)))
    result = simulate(ex, terminal, BoundedRandomLoss(SWEEP_LOSS_PROBABILITY, ex.mpc.P, seed), False, T=SWEEP_T)
    report = sim.assert_runtime_invariants(result)
    return seed, result.summary, report.passed, list(report.lines()), result.margins


def seed_sweep(ex, terminal, seeds, workers=1) -> list:
    jobs = [(ex, terminal, s) for s in seeds]
    if workers <= 1:
        return [_sweep_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_one, jobs))


def reproduction_criteria(robust, nominal, sweep=()) -> list:
    """``(name, passed, detail)`` for every reproducible claim of the experiment."""
    s, nm = robust.summary, nominal.summary
    checks = []
    tail = s["tail_max_abs_x"]
    checks.append(("robust run converges (max |x|_inf <= 1e-2 for t >= 60)",
                   tail is not None and tail <= 1e-2, f"tail max {tail}"))
    checks.append(("robust run keeps the bucket in [0, 14]",
                   0 <= s["beta_min"] and s["beta_max"] <= robust.config.spec.b,
                   f"beta in [{s['beta_min']}, {s['beta_max']}]"))
    x1 = nm["x1_at_30"]
    checks.append(("nominal run fails (|x_1(30)| > 1e2)", x1 is None and nm["diverged"] or
                   x1 is not None and abs(x1) > 1e2, f"x_1(30) = {x1}"))
    last = sim.sampling_interval_summary(robust.trace)["tail"]
    M = robust.config.spec.M
    checks.append((f"periodic tail (last 5 intervals equal {M})", len(last) == 5 and all(d == M for d in last),
                   f"last intervals {last}"))
    margins = list(robust.margins) + [m for *_, ms in sweep for m in ms]
    worst = min(margins) if margins else 0.0
    checks.append(("certified decrease (margin >= -1e-6)", worst >= -sim.DECREASE_TOL, f"min margin {worst:.3e}"))
    inv = sim.assert_runtime_invariants(robust)
    checks.append(("robust runtime invariants", inv.passed, "; ".join(inv.lines())))
    if sweep:
        bad = [seed for seed, _, ok, _, _ in sweep if not ok]
        checks.append((f"bounded-random sweep ({len(sweep)} seeds) feasible with invariants", not bad,
                       f"failing seeds {bad}" if bad else "all seeds pass"))
    return checks


def cmd_reproduce(args) -> int:
    ex = _with_p(_load(args.config or bundled_path()), args.p)
    out = _outdir(args.out or "reproduce")
    workers = _threads()
    terminal, lines, passed = design(ex)
    write_ingredients(out / "ingredients.txt", terminal, lines)
    if not passed:
        raise CliError(EXIT_VERIFY, "terminal ingredients failed verification")
    if ex.mpc.P == 0:
        # no losses admissible: both controllers face a loss-free channel
        loss_robust, loss_nominal = ScriptedLoss([1]), ScriptedLoss([1])
    else:
        loss_robust, loss_nominal = make_loss(ex.sim["loss"], ex.mpc.P), make_loss(ex.sim["loss"], ex.mpc.P)
    robust = simulate(ex, terminal, loss_robust, False)
    nominal = simulate(ex, terminal, loss_nominal, True)
    write_outputs(robust, out, "robust", ex)
    write_outputs(nominal, out, "nominal", ex)
    (out / "comparison.gp").write_text(plot_script(["robust.csv", "nominal.csv"], "comparison.png"))
    sweep = seed_sweep(ex, terminal, range(args.seed_sweep), workers) if args.seed_sweep else []
    checks = reproduction_criteria(robust, nominal, sweep)
    text = ["[robust]", sim.format_summary(robust.summary), "[nominal]", sim.format_summary(nominal.summary)]
    for seed, summary, ok, inv, _ in sweep:
        text.append(f"[sweep seed={seed}] {'PASS' if ok else 'FAIL'} instants={summary['instants']} "
                    f"lost={summary['transmissions_lost']} min_margin={summary['min_decrease_margin']}")
    text.append("[criteria]")
    text += [f"{'PASS' if ok else 'FAIL'}: {name} ({detail})" for name, ok, detail in checks]
    if ex.mpc.P == 0:
        same = _identical(robust, nominal)
        text.append(f"{'PASS' if same else 'FAIL'}: robust and nominal traces identical on a loss-free channel")
        checks.append(("identical traces", same, ""))
    (out / "summary.txt").write_text("\n".join(text) + "\n")
    print("\n".join(text))
    failed = [name for name, ok, _ in checks if not ok]
    if failed:
        print("failed criteria: " + "; ".join(failed), file=sys.stderr)
        return EXIT_REPRODUCE
    return EXIT_OK


def _identical(a: sim.SimResult, b: sim.SimResult) -> bool:
    if len(a.trace) != len(b.trace):
        return False
    return all(ra.t == rb.t and np.array_equal(ra.x, rb.x) and ra.beta == rb.beta and ra.delta == rb.delta
               for ra, rb in zip(a.trace, b.trace))


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stmpc", description="Self-triggered min-max MPC over a lossy, shaped channel.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize and verify terminal ingredients")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="ingredients file or directory")
    s.add_argument("--p", type=int, help="override the loss bound P")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("verify", help="re-verify an ingredients file against a config")
    s.add_argument("ingredients")
    s.add_argument("--config", required=True)
    s.add_argument("--p", type=int, help="override the loss bound P")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("simulate", help="run the closed loop and write a trace")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory")
    s.add_argument("--loss", help="script:<bits> | random:<p>,<seed> | adversarial | file:<path>")
    s.add_argument("--nominal", action="store_true", help="plan as if no packet were ever lost")
    s.add_argument("--ingredients", help="use these terminal ingredients instead of synthesizing")
    s.add_argument("--p", type=int, help="override the loss bound P")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("reproduce", help="batch-reactor experiment: robust vs nominal")
    s.add_argument("--config", help="defaults to the bundled batch reactor")
    s.add_argument("--out", help="output directory (default ./reproduce)")
    s.add_argument("--seed-sweep", type=int, default=0, metavar="K", help="add K bounded-random loss runs")
    s.add_argument("--p", type=int, help="override the loss bound P")
    s.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
