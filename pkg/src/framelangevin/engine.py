"""Time integration of the mass-m system and of the zero-mass limiting SDE.

The mass system, written in frame components ``v`` of the velocity, is

    du = H_v(u) dt,     m dv = (F(u) - gamma(u) v) dt + sigma(u) dW.

Randomness is a pure function of ``(master_seed, path_index)``: each path
owns a counter-based Philox stream, so results do not depend on how paths
are grouped into blocks or scheduled on threads.
"""
from __future__ import annotations

import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .drift import LocalData, limit_vector_fields
from .geometry import (
    DomainError,
    FrameBundlePoint,
    FrameTangent,
    Manifold,
    chart_transition,
    horizontal_field,
    reorthonormalize,
)
from .fields import ModelSpec
from .linalg import lyapunov_solve, matrix_exp, min_sym_eig, spd_sqrt

__all__ = [
    "ConfigError",
    "BudgetError",
    "MAX_STEPS",
    "WienerGrid",
    "MassState",
    "IntegratorConfig",
    "Trajectory",
    "path_generator",
    "sample_wiener",
    "NoiseBlock",
    "step_mass_system",
    "step_limit_system",
    "simulate_mass_path",
    "simulate_limit_path",
    "coupled_family",
    "run_blocks",
    "thread_count",
]

MAX_STEPS = 10**8
WIENER_STREAM, AUX_STREAM = 0, 1
THREADS_ENV = "FRAMELANGEVIN_THREADS"


class ConfigError(ValueError):
    pass


class BudgetError(RuntimeError):
    """Raised when a requested run needs more than ``MAX_STEPS`` time steps."""

    def __init__(self, required):
        super().__init__(f"infeasible time-step budget: {required} steps required (limit {MAX_STEPS})")
        self.required = int(required)


# ---------------------------------------------------------------------------
# noise


def path_generator(master_seed, path_index, stream=WIENER_STREAM):
    """Philox generator keyed by ``(master_seed, path_index, stream)``."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(path_index), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class WienerGrid:
    dt: float
    n_steps: int
    k: int
    increments: np.ndarray
    master_seed: int
    path_index: int
    aux: Optional[np.ndarray] = None

    def aggregate(self, r):
        """Grid with ``r`` consecutive steps merged (aux normals merged as sum / sqrt(r))."""
        if r == 1:
            return self
        if self.n_steps % r:
            raise ConfigError(f"cannot aggregate {self.n_steps} steps by {r}")
        inc = self.increments.reshape(-1, r, self.k).sum(axis=1)
        aux = None
        if self.aux is not None:
            aux = self.aux.reshape(-1, r, self.aux.shape[-1]).sum(axis=1) / math.sqrt(r)
        return WienerGrid(self.dt * r, self.n_steps // r, self.k, inc, self.master_seed,
                          self.path_index, aux)


def sample_wiener(master_seed, path_index, dt, n_steps, k, aux_dim=0) -> WienerGrid:
    """Brownian increments ``N(0, dt)`` for one path.

    ``aux_dim`` extra standard normals per step are drawn from an independent
    stream; the exponential mass integrator needs them for the part of the
    velocity noise that is not determined by the increments.
    """
    if n_steps < 0:
        raise ConfigError("n_steps must be >= 0")
    if not dt > 0:
        raise ConfigError("dt must be positive")
    inc = path_generator(master_seed, path_index).standard_normal((n_steps, k)) * math.sqrt(dt)
    aux = None
    if aux_dim:
        aux = path_generator(master_seed, path_index, AUX_STREAM).standard_normal((n_steps, aux_dim))
    return WienerGrid(float(dt), int(n_steps), int(k), inc, int(master_seed), int(path_index), aux)


class NoiseBlock:
    """Chunked noise for a block of paths on a fine grid.

    Draws for path ``i`` come from its own generator in time order, so the
    concatenation of chunks equals :func:`sample_wiener` for that path.
    """

    def __init__(self, master_seed, path_indices, dt, k, aux_dim=0):
        self.dt, self.k, self.aux_dim = float(dt), int(k), int(aux_dim)
        self._gens = [path_generator(master_seed, i) for i in path_indices]
        self._aux = [path_generator(master_seed, i, AUX_STREAM) for i in path_indices] if aux_dim else []

    def draw(self, n_steps):
        """Return ``(dW, Z)`` with shapes (n_steps, B, k) and (n_steps, B, aux_dim)."""
        sq = math.sqrt(self.dt)
        dw = np.stack([g.standard_normal((n_steps, self.k)) for g in self._gens], axis=1) * sq
        z = None
        if self.aux_dim:
            z = np.stack([g.standard_normal((n_steps, self.aux_dim)) for g in self._aux], axis=1)
        return dw, z


def aggregate_chunk(dw, z, r):
    """Sum fine increments in groups of ``r`` along the time axis."""
    if r == 1:
        return dw, z
    dw = dw.reshape((-1, r) + dw.shape[1:]).sum(axis=1)
    if z is not None:
        z = z.reshape((-1, r) + z.shape[1:]).sum(axis=1) / math.sqrt(r)
    return dw, z


# ---------------------------------------------------------------------------
# states and configuration


@dataclass
class MassState:
    u: FrameBundlePoint
    v: np.ndarray

    def momentum(self, mass):
        return mass * self.v

    def __getitem__(self, idx):
        return MassState(self.u[idx], self.v[idx])


@dataclass
class IntegratorConfig:
    scheme: str = "exp_ou"
    dt: float = 1e-3
    n_steps: int = 1000
    reortho_every: int = 1
    chart_switch_threshold: Optional[float] = None
    thin: int = 1
    sv_scale: float = 1.0

    def __post_init__(self):
        if self.scheme not in ("em", "exp_ou", "heun"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.n_steps < 0:
            raise ConfigError("n_steps must be >= 0")
        if self.reortho_every < 1 or self.thin < 1:
            raise ConfigError("reortho_every and thin must be >= 1")

    def check_mass(self, model: ModelSpec):
        if self.scheme == "heun":
            raise ConfigError("scheme 'heun' integrates the limit system, not the mass system")
        if self.scheme == "em" and self.dt > 0.05 * model.mass / model.gamma1 * (1 + 1e-12):
            raise ConfigError(
                f"'em' needs dt <= 0.05 m / gamma1 = {0.05 * model.mass / model.gamma1:.3g}, got {self.dt:.3g}")


@dataclass
class Trajectory:
    t: np.ndarray
    chart: np.ndarray
    x: np.ndarray
    h: np.ndarray
    v: Optional[np.ndarray] = None
    thin: int = 1

    def __len__(self):
        return len(self.t)

    def point(self, i) -> FrameBundlePoint:
        return FrameBundlePoint(self.chart[i], self.x[i], self.h[i])

    @property
    def points(self) -> FrameBundlePoint:
        return FrameBundlePoint(self.chart, self.x, self.h)

    def to_csv(self, header_lines=()) -> str:
        n = self.x.shape[-1]
        cols = ["t", "chart"] + [f"x{i + 1}" for i in range(n)]
        cols += [f"h{a + 1}{b + 1}" for a in range(n) for b in range(n)]
        if self.v is not None:
            cols += [f"v{i + 1}" for i in range(n)]
        out = io.StringIO()
        for line in header_lines:
            out.write(f"# {line}\n")
        out.write(",".join(cols) + "\n")
        for i in range(len(self.t)):
            row = [repr(float(self.t[i])), str(int(self.chart[i]))]
            row += [repr(float(c)) for c in self.x[i]]
            row += [repr(float(c)) for c in self.h[i].ravel()]
            if self.v is not None:
                row += [repr(float(c)) for c in self.v[i]]
            out.write(",".join(row) + "\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text) -> "Trajectory":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        cols = lines[0].split(",")
        data = np.array([[float(c) for c in ln.split(",")] for ln in lines[1:]]).reshape(-1, len(cols))
        n = sum(1 for c in cols if c.startswith("x"))
        x = data[:, 2: 2 + n]
        h = data[:, 2 + n: 2 + n + n * n].reshape(-1, n, n)
        v = data[:, 2 + n + n * n:] if any(c.startswith("v") for c in cols) else None
        return cls(data[:, 0], data[:, 1].astype(int), x, h, v)


# ---------------------------------------------------------------------------
# stepping helpers


def _mv(a, v):
    """Batched matrix-vector product."""
    return (a @ v[..., None])[..., 0]


def _finish_step(M: Manifold, u: FrameBundlePoint, reortho, threshold):
    """Re-orthonormalize, wrap periodic coordinates and switch charts where needed."""
    h = reorthonormalize(u.h) if reortho else u.h
    chart = u.chart
    x = M.wrap(chart, u.x)
    u = FrameBundlePoint(chart, x, h)
    switch = M.needs_switch(chart, x, threshold)
    if np.any(switch):
        target = M.switch_target(chart[switch], x[switch])
        moved = chart_transition(M, u[switch], target)
        chart = chart.copy()
        x, h = x.copy(), h.copy()
        chart[switch], x[switch], h[switch] = moved.chart, moved.x, moved.h
        u = FrameBundlePoint(chart, x, h)
    if not np.all(M.in_domain(u.chart, u.x)):
        raise DomainError(f"{M.name}: a path left its chart domain; reduce dt")
    return u


def _advance(u: FrameBundlePoint, t: FrameTangent, c):
    return FrameBundlePoint(u.chart, u.x + c * t.dx, u.h + c * t.dh)


def _transport(M, u, vbar, dt):
    """Midpoint rule for the flow of ``H_vbar`` over one step."""
    k1 = horizontal_field(M, u, vbar, geometry=(M.inv_lam(u.chart, u.x), M.conn(u.chart, u.x)))
    mid = _advance(u, k1, 0.5 * dt)
    k2 = horizontal_field(M, mid, vbar, geometry=(M.inv_lam(mid.chart, mid.x), M.conn(mid.chart, mid.x)))
    return _advance(u, k2, dt)


def _mass_coefficients(M, model, u):
    data = LocalData(M, model, u, check=False)
    return data.force, data.gamma, data.sigma


def step_mass_batch(M, model: ModelSpec, state: MassState, dw, z, dt, scheme="exp_ou",
                    reortho=True, threshold=None) -> MassState:
    """One step of the mass system for a batch of paths.

    ``dw`` has shape (B, k); ``z`` (B, n) auxiliary standard normals (used by
    ``exp_ou`` only).
    """
    m = model.mass
    u, v = state.u, state.v
    F, gam, sig = _mass_coefficients(M, model, u)
    noise = _mv(sig, dw)
    if scheme == "em":
        v_new = v + (F - _mv(gam, v)) * (dt / m) + noise / m
        vbar = 0.5 * (v + v_new)
    elif scheme == "exp_ou":
        if z is None:
            raise ConfigError("exp_ou needs auxiliary normals")
        E = matrix_exp(-gam * (dt / m))
        ginv = np.linalg.inv(gam)
        eye = np.eye(M.dim)
        J = lyapunov_solve(gam, sig @ np.swapaxes(sig, -1, -2), check=False)
        Q = (J - E @ J @ np.swapaxes(E, -1, -2)) / m
        C = ginv @ (eye - E) @ sig
        cond = Q - C @ np.swapaxes(C, -1, -2) / dt
        xi = _mv(C, dw) / dt + _mv(spd_sqrt(cond), z)
        v_new = (_mv(E, v)
                 + _mv((eye - E) @ ginv, F) + xi)
        # exact time integral of v under the frozen coefficients
        vbar = _mv(ginv, F * dt + noise - m * (v_new - v)) / dt
    else:
        raise ConfigError(f"scheme {scheme!r} is not a mass-system scheme")
    u_new = _finish_step(M, _transport(M, u, vbar, dt), reortho, threshold)
    return MassState(u_new, v_new)


def step_limit_batch(M, model: ModelSpec, u: FrameBundlePoint, dw, dt, sv_scale=1.0,
                     reortho=True, threshold=None, sh_scale=1.0) -> FrameBundlePoint:
    """Stratonovich Heun step of the limiting SDE for a batch of paths.

    ``sv_scale`` and ``sh_scale`` multiply the vertical and horizontal
    noise-induced drifts (1 is the limiting equation itself).
    """
    def incr(p):
        drift, bx, bh = limit_vector_fields(M, model, p, sv_scale, sh_scale=sh_scale)
        return FrameTangent(drift.dx * dt + _mv(bx, dw),
                            drift.dh * dt + (dw[..., :, None, None] * bh).sum(axis=-3))

    a = incr(u)
    pred = _advance(u, a, 1.0)
    b = incr(pred)
    out = FrameBundlePoint(u.chart, u.x + 0.5 * (a.dx + b.dx), u.h + 0.5 * (a.dh + b.dh))
    return _finish_step(M, out, reortho, threshold)


def _batch_state(state: MassState):
    u = state.u
    if u.x.ndim == 1:
        return MassState(FrameBundlePoint(np.atleast_1d(u.chart), u.x[None], u.h[None]),
                         np.asarray(state.v, dtype=float)[None]), True
    return state, False


def step_mass_system(M, model, state: MassState, dW, cfg: IntegratorConfig, aux=None) -> MassState:
    """Advance a single path (or a batch) of the mass system by one step."""
    cfg.check_mass(model)
    st, single = _batch_state(state)
    dW = np.atleast_2d(dW)
    aux = None if aux is None else np.atleast_2d(aux)
    out = step_mass_batch(M, model, st, dW, aux, cfg.dt, cfg.scheme, True, cfg.chart_switch_threshold)
    return out[0] if single else out


def step_limit_system(M, model, u: FrameBundlePoint, dW, cfg: IntegratorConfig) -> FrameBundlePoint:
    if cfg.scheme != "heun":
        raise ConfigError("the limit system is integrated with scheme 'heun'")
    single = u.x.ndim == 1
    if single:
        u = FrameBundlePoint(np.atleast_1d(u.chart), u.x[None], u.h[None])
    out = step_limit_batch(M, model, u, np.atleast_2d(dW), cfg.dt, cfg.sv_scale, True,
                           cfg.chart_switch_threshold)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# single-path simulation


def _record(buf, t, u, v=None):
    buf["t"].append(t)
    buf["chart"].append(int(np.asarray(u.chart).reshape(-1)[0]))
    buf["x"].append(np.array(u.x).reshape(-1))
    buf["h"].append(np.array(u.h).reshape(u.h.shape[-2:]))
    if v is not None:
        buf["v"].append(np.array(v).reshape(-1))


def _trajectory(buf, thin):
    v = np.array(buf["v"]) if buf["v"] else None
    return Trajectory(np.array(buf["t"]), np.array(buf["chart"], dtype=int), np.array(buf["x"]),
                      np.array(buf["h"]), v, thin)


def _check_budget(n_steps):
    if n_steps > MAX_STEPS:
        raise BudgetError(n_steps)


def _steps_for(cfg, wiener: WienerGrid):
    r = int(round(cfg.dt / wiener.dt))
    if r < 1 or abs(r * wiener.dt - cfg.dt) > 1e-9 * cfg.dt:
        raise ConfigError(f"dt={cfg.dt} is not a multiple of the noise grid dt={wiener.dt}")
    return wiener.aggregate(r)


def simulate_mass_path(M, model, init: MassState, wiener: WienerGrid, cfg: IntegratorConfig) -> Trajectory:
    """Integrate one path of the mass system over the whole noise grid."""
    cfg.check_mass(model)
    grid = _steps_for(cfg, wiener)
    _check_budget(grid.n_steps)
    if cfg.scheme == "exp_ou" and (grid.aux is None or grid.aux.shape[-1] != M.dim) and grid.n_steps:
        raise ConfigError("exp_ou needs a WienerGrid sampled with aux_dim = manifold dimension")
    st, _ = _batch_state(init)
    buf = {"t": [], "chart": [], "x": [], "h": [], "v": []}
    _record(buf, 0.0, st.u, st.v)
    for i in range(grid.n_steps):
        z = None if grid.aux is None else grid.aux[i][None]
        st = step_mass_batch(M, model, st, grid.increments[i][None], z, grid.dt, cfg.scheme,
                             (i + 1) % cfg.reortho_every == 0, cfg.chart_switch_threshold)
        if (i + 1) % cfg.thin == 0:
            _record(buf, (i + 1) * grid.dt, st.u, st.v)
    return _trajectory(buf, cfg.thin)


def simulate_limit_path(M, model, init: FrameBundlePoint, wiener: WienerGrid, cfg: IntegratorConfig) -> Trajectory:
    """Integrate one path of the limiting SDE (Stratonovich Heun)."""
    if cfg.scheme != "heun":
        raise ConfigError("the limit system is integrated with scheme 'heun'")
    grid = _steps_for(cfg, wiener)
    _check_budget(grid.n_steps)
    u = init
    if u.x.ndim == 1:
        u = FrameBundlePoint(np.atleast_1d(u.chart), u.x[None], u.h[None])
    buf = {"t": [], "chart": [], "x": [], "h": [], "v": []}
    _record(buf, 0.0, u)
    for i in range(grid.n_steps):
        u = step_limit_batch(M, model, u, grid.increments[i][None], grid.dt, cfg.sv_scale,
                             (i + 1) % cfg.reortho_every == 0, cfg.chart_switch_threshold)
        if (i + 1) % cfg.thin == 0:
            _record(buf, (i + 1) * grid.dt, u)
    return _trajectory(buf, cfg.thin)


def coupled_family(M, model_base: ModelSpec, masses: Sequence[float], init: MassState,
                   wiener: WienerGrid, cfg: IntegratorConfig, limit_dt=None):
    """Mass paths for several masses plus the limit path, all driven by one noise grid.

    Each integrator runs at ``cfg.dt`` (mass paths) or ``limit_dt`` (limit
    path, default ``cfg.dt``); both must be multiples of ``wiener.dt``, and
    coarser integrators consume summed increments.
    """
    total = wiener.n_steps * (len(masses) + 1)
    _check_budget(total)
    trajs = []
    for m in masses:
        trajs.append(simulate_mass_path(M, model_base.with_mass(m), init, wiener, cfg))
    lcfg = replace(cfg, scheme="heun", dt=limit_dt or cfg.dt)
    limit = simulate_limit_path(M, model_base, init.u, wiener, lcfg)
    return trajs, limit


# ---------------------------------------------------------------------------
# parallel ensembles


def thread_count(requested=0):
    """Worker threads: explicit request, else the environment override, else the CPU count."""
    if requested and requested > 0:
        return int(requested)
    env = os.environ.get(THREADS_ENV, "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        if n > 0:
            return n
    return os.cpu_count() or 1


def run_blocks(fn: Callable, n_paths, block_size=256, threads=0):
    """Evaluate ``fn(path_indices)`` on fixed blocks of paths and concatenate in path order.

    ``fn`` returns a dict of arrays whose first axis indexes the paths of the
    block.  Block boundaries do not depend on the thread count, so the result
    is bit-identical for any number of workers.
    """
    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    blocks = [np.arange(s, min(s + block_size, n_paths)) for s in range(0, n_paths, block_size)]
    nt = min(thread_count(threads), len(blocks))
    if nt <= 1:
        parts = [fn(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=nt) as pool:
            parts = list(pool.map(fn, blocks))
    return {key: np.concatenate([p[key] for p in parts], axis=0) for key in parts[0]}
