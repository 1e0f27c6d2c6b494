"""Sectioned ``key = value`` configuration files.

Matrices are written row-major in brackets with rows separated by ``;``,
e.g. ``A = [1 2; 3 4]``; a bracketed value may span several lines. Scalars
are plain numbers and vectors are one-row matrices. ``#`` starts a comment.
Unknown sections and keys are rejected.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .lifted_dynamics import PlantModel
from .minmax_controller import MpcConfig
from .network import (
    AdversarialLoss, BoundedRandomLoss, ScriptedLoss, TokenBucketSpec, read_loss_trace,
)
from .sets import UNCONSTRAINED, Ellipsoid, Polytope
from .terminal_design import TerminalIngredients


class ConfigError(ValueError):
    """Malformed, inconsistent or incomplete configuration."""


SCHEMA = {
    "plant": {"A", "B", "name"},
    "cost": {"Q", "R"},
    "network": {"g", "c", "b"},
    "mpc": {"N", "P", "delta_max", "X_H", "X_h", "X_lower", "X_upper", "U_H", "U_h", "U_lower",
            "U_upper", "max_words", "bound_scenarios", "exhaustive_limit", "beam_width", "maxiter",
            "smooth_maxiter", "feas_tol", "penalty", "tie_rtol"},
    "sim": {"x0", "w0", "beta0", "T", "seed", "loss", "tail_start", "nominal"},
    "paths": {"out", "ingredients", "loss_trace"},
    "terminal": {"M", "P", "K_f", "P_f", "set", "level", "H", "h"},
    "report": None,  # free-form, written by synth
}

_INT_KEYS = {"N", "P", "delta_max", "max_words", "bound_scenarios", "exhaustive_limit", "beam_width",
             "maxiter", "smooth_maxiter", "g", "c", "b", "beta0", "T", "seed", "tail_start", "M"}


def parse_matrix(text: str) -> np.ndarray:
    body = text.strip()
    if not (body.startswith("[") and body.endswith("]")):
        raise ConfigError(f"matrix must be bracketed: {text!r}")
    rows = [r.split() for r in body[1:-1].replace(",", " ").split(";")]
    rows = [r for r in rows if r]
    if not rows:
        return np.zeros((0, 0))
    if len({len(r) for r in rows}) != 1:
        raise ConfigError(f"ragged matrix rows in {text!r}")
    try:
        return np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise ConfigError(f"bad number in matrix {text!r}") from exc


def format_matrix(M) -> str:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return "[" + "; ".join(" ".join(repr(float(v)) for v in row) for row in M) + "]"


def parse_text(text: str, allowed: dict = SCHEMA) -> dict:
    """``{section: {key: raw string}}`` with brackets joined across lines."""
    out: dict = {}
    section = None
    pending = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if pending is not None:
            key, buf = pending
            buf += " " + line
            if buf.count("[") == buf.count("]"):
                out[section][key] = buf.strip()
                pending = None
            else:
                pending = (key, buf)
            continue
        if not line:
            continue
        m = re.fullmatch(r"\[(\w+)\]", line)
        if m:
            section = m.group(1)
            if section not in allowed:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            if section in out:
                raise ConfigError(f"line {lineno}: duplicate section [{section}]")
            out[section] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, value = (s.strip() for s in line.split("=", 1))
        keys = allowed[section]
        if keys is not None and key not in keys:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        if key in out[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if value.count("[") != value.count("]"):
            pending = (key, value)
        else:
            out[section][key] = value
    if pending is not None:
        raise ConfigError(f"unterminated bracket for key {pending[0]!r}")
    return out


def read_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_text(text)


def _scalar(raw, key):
    try:
        if key in _INT_KEYS:
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key} = {raw!r} is not a valid {'integer' if key in _INT_KEYS else 'number'}") from exc


def _vector(raw, key, size=None) -> np.ndarray:
    v = parse_matrix(raw).reshape(-1)
    if size is not None and v.size != size:
        raise ConfigError(f"{key} has {v.size} entries, expected {size}")
    return v


def _require(sec: dict, name: str, section: str):
    if name not in sec:
        raise ConfigError(f"missing [{section}] {name}")
    return sec[name]


def _set(sec: dict, prefix: str, dim: int):
    keys = {k for k in sec if k.startswith(prefix + "_")}
    if not keys:
        return UNCONSTRAINED
    if keys <= {f"{prefix}_H", f"{prefix}_h"} and len(keys) == 2:
        H = parse_matrix(sec[f"{prefix}_H"])
        h = _vector(sec[f"{prefix}_h"], f"{prefix}_h", H.shape[0])
        if H.shape[1] != dim:
            raise ConfigError(f"{prefix}_H has {H.shape[1]} columns, expected {dim}")
        return Polytope(H, h)
    if keys <= {f"{prefix}_lower", f"{prefix}_upper"} and len(keys) == 2:
        return Polytope.box(_vector(sec[f"{prefix}_lower"], f"{prefix}_lower", dim),
                            _vector(sec[f"{prefix}_upper"], f"{prefix}_upper", dim))
    raise ConfigError(f"{prefix} needs either {prefix}_H and {prefix}_h or {prefix}_lower and {prefix}_upper")


@dataclass
class Experiment:
    """Everything a config file defines, validated."""

    plant: PlantModel
    spec: TokenBucketSpec
    mpc: MpcConfig
    sim: dict
    paths: dict
    name: str = ""


def build(raw: dict, base: Path | None = None) -> Experiment:
    try:
        plant_sec, cost = _require(raw, "plant", "plant"), raw.get("cost", {})
        A = parse_matrix(_require(plant_sec, "A", "plant"))
        B = parse_matrix(_require(plant_sec, "B", "plant"))
        n, m = A.shape[0], B.shape[1]
        Q = parse_matrix(cost["Q"]) if "Q" in cost else np.eye(n)
        R = parse_matrix(cost["R"]) if "R" in cost else np.eye(m)
        plant = PlantModel(A, B, Q, R)
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid plant: {exc}") from exc

    net = _require(raw, "network", "network")
    try:
        spec = TokenBucketSpec(*(_scalar(_require(net, k, "network"), k) for k in ("g", "c", "b")))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    sec = _require(raw, "mpc", "mpc")
    opts = {}
    for key in ("max_words", "bound_scenarios", "exhaustive_limit", "beam_width", "maxiter",
                "smooth_maxiter", "feas_tol", "penalty", "tie_rtol"):
        if key in sec:
            opts[key] = _scalar(sec[key], key)
    try:
        mpc = MpcConfig(N=_scalar(_require(sec, "N", "mpc"), "N"), P=_scalar(_require(sec, "P", "mpc"), "P"),
                        delta_max=_scalar(_require(sec, "delta_max", "mpc"), "delta_max"),
                        X=_set(sec, "X", n), U=_set(sec, "U", m), **opts)
        mpc.validate(spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    s = raw.get("sim", {})
    sim = {
        "x0": _vector(s["x0"], "x0", n) if "x0" in s else np.zeros(n),
        "w0": _vector(s["w0"], "w0", m) if "w0" in s else np.zeros(m),
        "beta0": _scalar(s["beta0"], "beta0") if "beta0" in s else spec.b,
        "T": _scalar(s["T"], "T") if "T" in s else 100,
        "seed": _scalar(s["seed"], "seed") if "seed" in s else 0,
        "loss": s.get("loss", "script:1"),
        "tail_start": _scalar(s["tail_start"], "tail_start") if "tail_start" in s else 60,
        "nominal": s.get("nominal", "false").lower() in ("1", "true", "yes"),
    }
    if sim["T"] < 1:
        raise ConfigError("[sim] T must be >= 1")
    if not 0 <= sim["beta0"] <= spec.b:
        raise ConfigError(f"[sim] beta0 must lie in [0, {spec.b}]")
    paths = dict(raw.get("paths", {}))
    if base is not None:
        paths = {k: str((base / v).resolve()) if not Path(v).is_absolute() else v for k, v in paths.items()}
    return Experiment(plant, spec, mpc, sim, paths, plant_sec.get("name", ""))


def load(path) -> Experiment:
    path = Path(path)
    return build(read_file(path), base=path.parent)


def bundled_path(name: str = "batch_reactor.cfg") -> Path:
    return Path(str(resources.files("stmpc") / "data" / name))


def load_bundled(name: str = "batch_reactor.cfg") -> Experiment:
    return load(bundled_path(name))


def make_loss(text: str, P: int, seed: int | None = None):
    """Loss model from ``script:<bits>``, ``random:<p>,<seed>``, ``adversarial`` or ``file:<path>``."""
    kind, _, arg = text.partition(":")
    if kind == "script":
        bits = [c for c in arg if c in "01"]
        if not bits or len(bits) != len(arg.replace(",", "").replace(" ", "").rstrip(".…")):
            raise ConfigError(f"bad scripted loss word {arg!r}")
        return ScriptedLoss([int(c) for c in bits])
    if kind == "random":
        p, _, s = arg.partition(",")
        try:
            return BoundedRandomLoss(float(p), P, int(s) if s else seed)
        except ValueError as exc:
            raise ConfigError(f"bad random loss spec {arg!r}") from exc
    if kind == "adversarial" and not arg:
        return AdversarialLoss(P)
    if kind == "file":
        try:
            return ScriptedLoss(read_loss_trace(arg), repeat=False)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"bad loss trace file {arg!r}: {exc}") from exc
    raise ConfigError(f"unknown loss model {text!r}")


# -- terminal ingredients files --------------------------------------------


def write_ingredients(path, terminal: TerminalIngredients, report_lines=()) -> None:
    lines = ["[terminal]", f"M = {terminal.M}", f"P = {terminal.P}",
             f"K_f = {format_matrix(terminal.K_f)}", f"P_f = {format_matrix(terminal.P_f)}"]
    ts = terminal.terminal_set
    if isinstance(ts, Ellipsoid):
        lines += ["set = ellipsoid", f"level = {ts.level!r}"]
    elif isinstance(ts, Polytope):
        lines += ["set = polytope", f"H = {format_matrix(ts.H)}", f"h = {format_matrix(ts.h)}"]
    else:
        lines.append("set = unconstrained")
    lines += ["", "[report]"]
    lines += [f"line{i} = {text}" for i, text in enumerate(report_lines)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ingredients(path, plant: PlantModel | None = None) -> TerminalIngredients:
    raw = read_file(path)
    sec = _require(raw, "terminal", "terminal")
    K = parse_matrix(_require(sec, "K_f", "terminal"))
    Pf = parse_matrix(_require(sec, "P_f", "terminal"))
    if plant is not None and (K.shape != (plant.m, plant.n) or Pf.shape != (plant.n, plant.n)):
        raise ConfigError(f"ingredient dimensions K_f {K.shape}, P_f {Pf.shape} do not match the plant")
    kind = sec.get("set", "unconstrained")
    if kind == "ellipsoid":
        ts = Ellipsoid(Pf, _scalar(_require(sec, "level", "terminal"), "level"))
    elif kind == "polytope":
        ts = Polytope(parse_matrix(sec["H"]), _vector(sec["h"], "h"))
    elif kind == "unconstrained":
        ts = UNCONSTRAINED
    else:
        raise ConfigError(f"unknown terminal set {kind!r}")
    try:
        return TerminalIngredients(K, Pf, _scalar(_require(sec, "M", "terminal"), "M"), ts,
                                   _scalar(sec.get("P", "0"), "P"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
