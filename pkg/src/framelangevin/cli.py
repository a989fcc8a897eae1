"""Command-line runner: configuration parsing, experiment dispatch and file output.

Configuration files use TOML.  Every key may appear at the top level or in
its section (``[run]``, ``[model]``, ``[ensemble]``, ``[experiment]``);
model parameters live in ``[params]`` (or ``[model.params]``).  Command-line
flags mirror the keys (``--n-paths 500``) and override the file.

Exit codes: 0 success, 1 configuration error, 2 model validation failure,
3 infeasible time-step budget.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import re
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from . import __version__
from .drift import noise_induced_drift
from .engine import (
    BudgetError,
    ConfigError,
    IntegratorConfig,
    sample_wiener,
    simulate_limit_path,
    simulate_mass_path,
)
from .experiments import (
    EnsembleSpec,
    QUAD_FUNCTIONS,
    _plan,
    bm_drift_check,
    momentum_pointwise_moment,
    momentum_sup_moment,
    pathwise_convergence,
    quad_integral_check,
    vertical_drift_position_test,
)
from .fields import ModelValidationError, PRESETS, quasi_random_points, validate_drag_bound
from .geometry import FrameBundlePoint, MANIFOLDS

EXPERIMENTS = ("simulate", "momentum", "momentum-pointwise", "quad-check", "converge", "drift",
               "bm-check", "vertical-check", "validate")

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_BUDGET = 0, 1, 2, 3


@dataclass(frozen=True)
class Key:
    section: str
    kind: str                  # "str", "int", "float", "bool", "floats", "optfloat", "optint"
    default: Any
    help: str


KEYS: Dict[str, Key] = {
    "experiment": Key("run", "str", "simulate", "experiment to run"),
    "out": Key("run", "str", "results", "output directory"),
    "seed": Key("run", "int", 0, "master seed"),
    "threads": Key("run", "int", 0, "worker threads (0: environment override or CPU count)"),
    "model": Key("model", "str", "bm", f"model preset, one of {sorted(PRESETS)}"),
    "manifold": Key("model", "str", "circle", "circle, torus2 or sphere2"),
    "masses": Key("ensemble", "floats", [1e-1, 3e-2, 1e-2, 3e-3, 1e-3], "mass values"),
    "T": Key("ensemble", "float", 1.0, "time horizon"),
    "dt": Key("ensemble", "float", 1e-3, "base time step"),
    "dt_ratio": Key("ensemble", "optfloat", None, "exp_ou mass step cap dt_ratio * m"),
    "noise_dt": Key("ensemble", "optfloat", None, "explicit fine noise grid dt / 2^J"),
    "n_paths": Key("ensemble", "int", 2000, "number of paths"),
    "order": Key("ensemble", "float", 2.0, "moment order p or q"),
    "scheme": Key("ensemble", "str", "exp_ou", "mass integrator: exp_ou or em"),
    "chart": Key("ensemble", "optint", None, "initial chart (default: manifold default)"),
    "x0": Key("ensemble", "floats", None, "initial chart coordinates"),
    "h_angle": Key("ensemble", "float", 0.0, "rotation angle of the initial frame"),
    "v0": Key("ensemble", "floats", None, "initial frame velocity"),
    "block_size": Key("ensemble", "int", 500, "paths per work unit"),
    "thin": Key("ensemble", "int", 1, "simulate: keep every thin-th base step"),
    "mass": Key("experiment", "optfloat", None, "simulate/bm-check: mass (unset: limit system)"),
    "path_index": Key("experiment", "int", 0, "simulate: path index within the seed"),
    "quad_function": Key("experiment", "str", "sin_x1", f"quad-check integrand, one of {sorted(QUAD_FUNCTIONS)}"),
    "alpha": Key("experiment", "int", 0, "quad-check first momentum component"),
    "beta": Key("experiment", "int", 0, "quad-check second momentum component"),
    "corrupt": Key("experiment", "float", 10.0, "vertical-check control multiplier of S^v"),
    "grid_points": Key("experiment", "int", 100, "drift: number of quasi-random grid points"),
    "dt_check": Key("experiment", "bool", False, "converge: rerun with halved steps and report changes"),
    "validate_samples": Key("experiment", "int", 1000, "sample points of the drag-bound check"),
}
SECTIONS = ("run", "model", "ensemble", "experiment")


@dataclass
class RunConfig:
    values: Dict[str, Any]
    params: Dict[str, Any] = field(default_factory=dict)
    source: Optional[str] = None

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def resolved(self):
        """Fully-resolved configuration as plain JSON-able data (provenance).

        The output directory and thread count are left out: they do not
        affect any number, and outputs must not depend on them.
        """
        out = {k: self.values[k] for k in KEYS if k not in ("out", "threads")}
        out["params"] = dict(sorted(self.params.items()))
        out["version"] = __version__
        return out

    def ensemble(self) -> EnsembleSpec:
        v = self.values
        return EnsembleSpec(
            model=v["model"], manifold=v["manifold"], params=dict(self.params),
            masses=tuple(v["masses"]), T=v["T"], n_paths=v["n_paths"], seed=v["seed"],
            order=v["order"], dt=v["dt"], dt_ratio=v["dt_ratio"], scheme=v["scheme"],
            chart=v["chart"], x0=None if v["x0"] is None else tuple(v["x0"]), h_angle=v["h_angle"],
            v0=None if v["v0"] is None else tuple(v["v0"]), noise_dt=v["noise_dt"],
            threads=v["threads"], block_size=v["block_size"])


# ---------------------------------------------------------------------------
# parsing


def _valid_keys_text():
    return ", ".join(f"{KEYS[k].section}.{k}" for k in KEYS) + ", params.<name>"


def _coerce(key, kind, value):
    """Check/convert ``value`` to ``kind``; raises ``TypeError`` on mismatch."""
    if kind in ("optfloat", "optint") and value is None:
        return None
    if kind == "str":
        if not isinstance(value, str):
            raise TypeError("string")
        return value
    if kind == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise TypeError("boolean")
    if kind in ("int", "optint"):
        if isinstance(value, str):
            try:
                value = int(value)
            except ValueError:
                raise TypeError("integer") from None
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError("integer")
        return int(value)
    if kind in ("float", "optfloat"):
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                raise TypeError("number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError("number")
        value = float(value)
        if not math.isfinite(value):
            raise TypeError("finite number")
        return value
    if kind == "floats":
        if value is None:
            return None
        if isinstance(value, str):
            value = [s for s in re.split(r"[,\s]+", value.strip("[] ")) if s]
        if not isinstance(value, (list, tuple)):
            raise TypeError("list of numbers")
        return [_coerce(key, "float", x) for x in value]
    raise AssertionError(kind)


def _line_of(text, key):
    """1-based line of the first assignment to ``key`` (plain or dotted) in ``text``."""
    pat = re.compile(r"^\s*(?:[A-Za-z_]+\.)*" + re.escape(key) + r"\s*=")
    for i, line in enumerate(text.splitlines(), 1):
        if pat.match(line):
            return i
    return None


def _flatten(d, prefix=()):
    for k, v in d.items():
        path = prefix + (k,)
        if isinstance(v, dict):
            yield from _flatten(v, path)
        else:
            yield path, v


def _load_file(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    text = raw.decode("utf-8")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        where = f"{path}:{m.group(1)}" if m else path
        key = ""
        if m:
            line = text.splitlines()[int(m.group(1)) - 1] if int(m.group(1)) <= len(text.splitlines()) else ""
            if "=" in line:
                key = f" in value of key {line.split('=', 1)[0].strip()!r}"
        raise ConfigError(f"{where}: malformed config{key}: {exc}") from None
    values, params = {}, {}
    for path_keys, value in _flatten(data):
        dotted = ".".join(path_keys)
        line = _line_of(text, path_keys[-1])
        where = f"{path}:{line}" if line else path
        if path_keys[0] == "tool" and len(path_keys) > 1:
            path_keys = path_keys[1:]
        if path_keys[0] == "model" and len(path_keys) > 2 and path_keys[1] == "params":
            path_keys = path_keys[1:]
        if path_keys[0] == "params" and len(path_keys) == 2:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}: key {dotted!r} expects a number, got {value!r}")
            params[path_keys[1]] = value
            continue
        name = path_keys[-1]
        ok = name in KEYS and (len(path_keys) == 1 or (len(path_keys) == 2 and path_keys[0] == KEYS[name].section))
        if not ok:
            raise ConfigError(f"{where}: unknown key {dotted!r}; valid keys: {_valid_keys_text()}")
        try:
            values[name] = _coerce(name, KEYS[name].kind, value)
        except TypeError as exc:
            raise ConfigError(f"{where}: key {dotted!r} expects {exc}, got {value!r}") from None
    return values, params


def build_parser():
    p = argparse.ArgumentParser(prog="framelangevin",
                                description="Small-mass Langevin dynamics on frame bundles.")
    p.add_argument("experiment", nargs="?", choices=EXPERIMENTS)
    p.add_argument("--config", help="TOML configuration file")
    for name, key in KEYS.items():
        if name == "experiment":
            continue
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar="VALUE",
                       help=f"{key.help} (default: {key.default})")
    p.add_argument("--param", action="append", default=[], metavar="NAME=VALUE",
                   help="model parameter override (repeatable)")
    return p


def parse_config(argv=None, path=None) -> RunConfig:
    """Resolve a run configuration from a file and/or command-line flags.

    Flags override file values; unset keys take their documented defaults.

    Raises
    ------
    ConfigError
        On unknown keys (the message lists the valid ones), type mismatches
        (with the file line where available) or malformed files.
    """
    args = build_parser().parse_args([] if argv is None else list(argv))
    path = args.config or path
    values, params = ({}, {}) if path is None else _load_file(path)
    if args.experiment:
        values["experiment"] = args.experiment
    for name, key in KEYS.items():
        raw = getattr(args, name, None)
        if name == "experiment" or raw is None:
            continue
        try:
            values[name] = _coerce(name, key.kind, None if raw.lower() == "none" and key.kind.startswith("opt") else raw)
        except TypeError as exc:
            raise ConfigError(f"flag --{name.replace('_', '-')} expects {exc}, got {raw!r}") from None
    for item in args.param:
        if "=" not in item:
            raise ConfigError(f"--param expects NAME=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        try:
            params[k.strip()] = float(v)
        except ValueError:
            raise ConfigError(f"--param {k.strip()!r} expects a number, got {v!r}") from None
    for name, key in KEYS.items():
        if name not in values:
            values[name] = list(key.default) if isinstance(key.default, list) else key.default
    if values["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {values['experiment']!r}; choose from {list(EXPERIMENTS)}")
    if values["manifold"] not in MANIFOLDS:
        raise ConfigError(f"unknown manifold {values['manifold']!r}; choose from {sorted(MANIFOLDS)}")
    if values["model"] not in PRESETS:
        raise ConfigError(f"unknown model {values['model']!r}; choose from {sorted(PRESETS)}")
    params = {k: (int(v) if k == "axis" else v) for k, v in params.items()}
    return RunConfig(values, params, path)


# ---------------------------------------------------------------------------
# output


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _dumps(obj):
    return json.dumps(_jsonable(obj), allow_nan=True, separators=(", ", ": "))


def _write(cfg: RunConfig, name, text):
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, name)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _write_jsonl(cfg: RunConfig, records, summary):
    lines = [_dumps({"provenance": cfg.resolved()})]
    lines += [_dumps(r) for r in records]
    lines.append(_dumps(summary))
    return _write(cfg, f"{cfg.experiment}.jsonl", "\n".join(lines) + "\n")


def _header(cfg: RunConfig):
    return ["framelangevin " + __version__, "config " + _dumps(cfg.resolved())]


# ---------------------------------------------------------------------------
# experiments


def _model_for(cfg: RunConfig, mass=1.0):
    return cfg.ensemble().build(mass)


def _run_simulate(cfg: RunConfig):
    spec = cfg.ensemble()
    model = spec.build(1.0 if cfg.mass is None else cfg.mass)
    M = model.manifold
    mass_models = [] if cfg.mass is None else [model]
    levels, jmax, fine_dt = _plan(EnsembleSpec(**{**spec.__dict__, "n_paths": 2}), mass_models, cfg.mass is None)
    n_fine = spec.n_base_steps * 2 ** jmax
    aux = M.dim if (mass_models and spec.scheme == "exp_ou") else 0
    wiener = sample_wiener(spec.seed, cfg.path_index, fine_dt, n_fine, model.k, aux)
    init = spec.initial_state(M, 1)
    if mass_models:
        sub = 2 ** levels[0]
        icfg = IntegratorConfig(scheme=spec.scheme, dt=spec.dt / sub, n_steps=spec.n_base_steps * sub,
                                thin=cfg.thin * sub)
        traj = simulate_mass_path(M, model, init, wiener, icfg)
    else:
        icfg = IntegratorConfig(scheme="heun", dt=spec.dt, n_steps=spec.n_base_steps, thin=cfg.thin)
        traj = simulate_limit_path(M, model, init.u, wiener, icfg)
    path = _write(cfg, "simulate.csv", traj.to_csv(_header(cfg)))
    system = "limit system" if cfg.mass is None else f"mass system m={cfg.mass}"
    return f"simulate: {len(traj)} rows of the {system} -> {path}"


def _fit_summary(fit):
    if fit is None:
        return {"fit": None}
    return {"fit": fit.as_dict()}


def _fit_line(name, fit, path):
    if fit is None:
        return f"{name}: fewer than 3 masses, no slope fit -> {path}"
    lo, hi = fit.band
    return f"{name}: slope {fit.slope:.4f} +- {fit.slope_se:.4f} (95% band [{lo:.4f}, {hi:.4f}]) -> {path}"


def _run_curve(cfg: RunConfig):
    spec = cfg.ensemble()
    extra = {}
    if cfg.experiment == "momentum":
        curve, fit = momentum_sup_moment(spec)
    elif cfg.experiment == "momentum-pointwise":
        curve, fit = momentum_pointwise_moment(spec)
    elif cfg.experiment == "quad-check":
        curve, fit, res = quad_integral_check(spec, cfg.quad_function, cfg.alpha, cfg.beta)
    else:
        curve, fit, per_path = pathwise_convergence(spec)
        if cfg.dt_check:
            half = EnsembleSpec(**{**spec.__dict__, "dt": spec.dt / 2,
                                   "dt_ratio": None if spec.dt_ratio is None else spec.dt_ratio / 2,
                                   "noise_dt": None if spec.noise_dt is None else spec.noise_dt / 2})
            c2, _, _ = pathwise_convergence(half)
            change = np.abs(c2.estimates - curve.estimates) / curve.estimates
            extra = {"dt_halving": {"estimates": c2.estimates, "relative_change": change,
                                    "max_relative_change": float(change.max())}}
    records = curve.records(cfg.experiment, spec)
    summary = {**_fit_summary(fit), **extra}
    path = _write_jsonl(cfg, records, summary)
    return _fit_line(cfg.experiment, fit, path)


def _run_drift(cfg: RunConfig):
    model = _model_for(cfg)
    M = model.manifold
    n = M.dim
    c, s = math.cos(cfg.h_angle), math.sin(cfg.h_angle)
    h0 = np.array([[1.0]]) if n == 1 else np.array([[c, -s], [s, c]])
    cols = ["chart"] + [f"x{i + 1}" for i in range(n)]
    cols += [f"sh_dx{i + 1}" for i in range(n)] + [f"sh_dh{a + 1}{b + 1}" for a in range(n) for b in range(n)]
    cols += [f"sv_dx{i + 1}" for i in range(n)] + [f"sv_dh{a + 1}{b + 1}" for a in range(n) for b in range(n)]
    lines = [f"# {h}" for h in _header(cfg)] + [",".join(cols)]
    count = 0
    for chart, x in quasi_random_points(M, cfg.grid_points, cfg.seed):
        if not len(x):
            continue
        u = FrameBundlePoint(chart, x, np.broadcast_to(h0, (len(x), n, n)).copy())
        rep = noise_induced_drift(M, model, u)
        for j in range(len(x)):
            row = [str(int(chart[j]))] + [repr(float(a)) for a in x[j]]
            for part in (rep.sh_part, rep.sv_part):
                row += [repr(float(a)) for a in part.dx[j]] + [repr(float(a)) for a in part.dh[j].ravel()]
            lines.append(",".join(row))
            count += 1
    path = _write(cfg, "drift.csv", "\n".join(lines) + "\n")
    return f"drift: S^h and S^v at {count} points -> {path}"


def _run_bm_check(cfg: RunConfig):
    spec = cfg.ensemble()
    report = bm_drift_check(spec, mass=cfg.mass)
    records = [{"experiment": "bm-check", "model": spec.model, "m": cfg.mass, "n_paths": spec.n_paths,
                "dt": spec.dt, "seed": spec.seed, **r} for r in report]
    ok = all(r["pass"] for r in report)
    path = _write_jsonl(cfg, records, {"verdict": "pass" if ok else "fail"})
    worst = max(abs(r["z"]) for r in report)
    return f"bm-check: {'PASS' if ok else 'FAIL'} (max |z| = {worst:.2f}) -> {path}"


def _run_vertical(cfg: RunConfig):
    spec = cfg.ensemble()
    rep = vertical_drift_position_test(spec, corrupt=cfg.corrupt)
    record = {"experiment": "vertical-check", "model": spec.model, "n_paths": spec.n_paths,
              "dt": spec.dt, "seed": spec.seed, **rep}
    ok = rep["pass"]
    path = _write_jsonl(cfg, [record], {"verdict": "pass" if ok else "fail",
                                        "control_detected": rep.get("control_detected")})
    return (f"vertical-check: {'PASS' if ok else 'FAIL'} (min p = {min(rep['pvalues']):.4g}; "
            f"control detected: {rep.get('control_detected')}) -> {path}")


def _run_validate(cfg: RunConfig, bound):
    path = _write_jsonl(cfg, [{"experiment": "validate", "model": cfg.model, "manifold": cfg.manifold,
                               "drag_bound": bound, "samples": cfg.validate_samples}],
                        {"verdict": "pass"})
    return f"validate: sampled drag bound {bound:.6g} > 0 -> {path}"


def run(cfg: RunConfig, stream=None) -> int:
    """Dispatch ``cfg`` to its experiment and write outputs; returns the exit code."""
    stream = sys.stdout if stream is None else stream
    err = sys.stderr if stream is sys.stdout else stream
    try:
        model = _model_for(cfg)
        bound = validate_drag_bound(model.manifold, model, cfg.validate_samples, seed=cfg.seed)
        if cfg.experiment == "simulate":
            line = _run_simulate(cfg)
        elif cfg.experiment in ("momentum", "momentum-pointwise", "quad-check", "converge"):
            line = _run_curve(cfg)
        elif cfg.experiment == "drift":
            line = _run_drift(cfg)
        elif cfg.experiment == "bm-check":
            line = _run_bm_check(cfg)
        elif cfg.experiment == "vertical-check":
            line = _run_vertical(cfg)
        else:
            line = _run_validate(cfg, bound)
    except ModelValidationError as exc:
        print(f"model validation failed: {exc}", file=err)
        return EXIT_VALIDATION
    except BudgetError as exc:
        print(f"{exc}; required steps: {exc.required}", file=err)
        return EXIT_BUDGET
    except (ConfigError, TypeError, KeyError, ValueError) as exc:
        print(f"configuration error: {exc}", file=err)
        return EXIT_CONFIG
    print(line, file=stream)
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
