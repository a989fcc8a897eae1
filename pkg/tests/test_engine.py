import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_orthogonal
from framelangevin.drift import ito_generator_apply
from framelangevin.engine import (
    MAX_STEPS,
    BudgetError,
    ConfigError,
    IntegratorConfig,
    MassState,
    NoiseBlock,
    Trajectory,
    WienerGrid,
    aggregate_chunk,
    coupled_family,
    run_blocks,
    sample_wiener,
    simulate_limit_path,
    simulate_mass_path,
    step_limit_batch,
    step_limit_system,
    step_mass_batch,
    step_mass_system,
    thread_count,
)
from framelangevin.fields import Constant, ModelSpec, ScalarTensor, TensorNoise, ZeroVector, make_model
from framelangevin.geometry import FrameBundlePoint, frame_distance, get_manifold


def batch_point(x0, B, chart=0, h=None):
    n = len(x0)
    h = np.tile(np.eye(n), (B, 1, 1)) if h is None else h
    return FrameBundlePoint(np.full(B, chart), np.tile(np.asarray(x0, float), (B, 1)), h)


# noise ----------------------------------------------------------------------------

def test_wiener_reproducible_and_split():
    a = sample_wiener(7, 3, 1e-3, 50, 2, aux_dim=2)
    b = sample_wiener(7, 3, 1e-3, 50, 2, aux_dim=2)
    assert np.array_equal(a.increments, b.increments) and np.array_equal(a.aux, b.aux)
    c = sample_wiener(7, 4, 1e-3, 50, 2)
    assert np.all(a.increments.ravel()[:8] != c.increments.ravel()[:8])
    assert np.array_equal(c.increments, a.increments * 0 + sample_wiener(7, 4, 1e-3, 50, 2).increments)
    assert not np.array_equal(sample_wiener(8, 3, 1e-3, 50, 2).increments, a.increments)


def test_wiener_moments():
    dt, n = 1e-3, 10**6
    w = sample_wiener(11, 0, dt, n, 1).increments[:, 0]
    assert abs(w.mean()) <= 5 * math.sqrt(dt / n)
    # sample variance of N(0, dt) has standard error dt sqrt(2 / n)
    assert abs(w.var() - dt) <= 5 * dt * math.sqrt(2.0 / n)


def test_noise_block_chunks_equal_single_path_draws():
    nb = NoiseBlock(5, [2, 9, 4], 1e-3, 2, aux_dim=2)
    parts = [nb.draw(k) for k in (3, 10, 7)]
    dw = np.concatenate([p[0] for p in parts])
    z = np.concatenate([p[1] for p in parts])
    for j, idx in enumerate((2, 9, 4)):
        ref = sample_wiener(5, idx, 1e-3, 20, 2, aux_dim=2)
        assert np.array_equal(dw[:, j], ref.increments) and np.array_equal(z[:, j], ref.aux)


def test_aggregation():
    w = sample_wiener(1, 0, 1e-3, 12, 2, aux_dim=2)
    g = w.aggregate(4)
    assert g.n_steps == 3 and g.dt == pytest.approx(4e-3)
    assert np.allclose(g.increments, w.increments.reshape(3, 4, 2).sum(1), atol=1e-15)
    assert np.allclose(g.aux, w.aux.reshape(3, 4, 2).sum(1) / 2.0, atol=1e-15)
    dw, z = aggregate_chunk(w.increments[:, None], w.aux[:, None], 4)
    assert np.array_equal(dw[:, 0], g.increments) and np.array_equal(z[:, 0], g.aux)
    with pytest.raises(ConfigError):
        w.aggregate(5)


# mass system ---------------------------------------------------------------------

def test_exact_relaxation_torus():
    T = get_manifold("torus2")
    model = make_model("bm", T, mass=0.1, sigma=0.0, gamma=2.0)
    init = MassState(FrameBundlePoint.make(0, np.array([1.0, 2.0])), np.array([1.0, -0.5]))
    w = sample_wiener(0, 0, 1e-3, 500, 2, aux_dim=2)
    tr = simulate_mass_path(T, model, init, w, IntegratorConfig("exp_ou", 1e-3, 500))
    assert np.abs(tr.v - np.exp(-2.0 * tr.t / 0.1)[:, None] * init.v).max() <= 1e-12


def test_damped_great_circle_sphere():
    S = get_manifold("sphere2")
    gamma, mass = 1.5, 0.5
    model = ModelSpec(S, ZeroVector(), ScalarTensor(Constant(gamma)), TensorNoise(ScalarTensor(Constant(0.0))),
                      mass=mass, gamma1=gamma)
    v0 = np.array([1.2, -0.7])
    u0 = FrameBundlePoint.make(2, np.array([1.1, 0.4]))
    n, dt = 2000, 5e-4
    w = sample_wiener(0, 0, dt, n, 2, aux_dim=2)
    tr = simulate_mass_path(S, model, MassState(u0, v0), w, IntegratorConfig("exp_ou", dt, n))
    speed = np.linalg.norm(tr.v, axis=1)
    assert np.all(np.diff(speed) < 0)
    # frame components relax in place, so the path is the geodesic with arclength
    # |v0| m / gamma (1 - exp(-gamma t / m))
    X0 = S.embed(u0.chart, u0.x)
    E0 = S.frame_vectors(u0.chart, u0.x) @ u0.h
    T0 = E0 @ v0 / np.linalg.norm(v0)
    s = np.linalg.norm(v0) * mass / gamma * (1 - np.exp(-gamma * tr.t / mass))
    ref = np.cos(s)[:, None] * X0 + np.sin(s)[:, None] * T0
    assert np.abs(S.embed(tr.chart, tr.x) - ref).max() <= 1e-5


def test_ou_stationary_momentum_variance():
    C = get_manifold("circle")
    m, B = 0.01, 4000
    model = make_model("bm", C, mass=m)
    nb = NoiseBlock(21, range(B), 1e-3, 1, aux_dim=1)
    dw, z = nb.draw(200)
    st = MassState(batch_point([0.0], B), np.zeros((B, 1)))
    for i in range(200):
        st = step_mass_batch(C, model, st, dw[i], z[i], 1e-3)
    p2 = (m * st.v[:, 0]) ** 2
    assert abs(p2.mean() - m / 2) <= 3 * p2.std(ddof=1) / math.sqrt(B)


def test_em_and_exp_ou_agree_for_small_steps():
    S = get_manifold("sphere2")
    model = make_model("anisotropic_drag", S, sigma_amp=0.3, mass=0.05)
    w = sample_wiener(2, 0, 2.5e-5, 4000, 2, aux_dim=2)
    init = MassState(FrameBundlePoint.make(0, np.array([0.4, -0.3])), np.array([0.5, 0.1]))
    a = simulate_mass_path(S, model, init, w, IntegratorConfig("em", 2.5e-5, 4000, thin=400))
    b = simulate_mass_path(S, model, init, w, IntegratorConfig("exp_ou", 2.5e-5, 4000, thin=400))
    assert np.abs(S.embed(a.chart, a.x) - S.embed(b.chart, b.x)).max() <= 2e-3


# limit system ---------------------------------------------------------------------

def test_torus_bm_limit_exact():
    T = get_manifold("torus2")
    th = 0.7
    h0 = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    u0 = FrameBundlePoint.make(0, np.array([1.0, 2.0]), h0)
    w = sample_wiener(0, 0, 1e-3, 500, 2)
    tr = simulate_limit_path(T, make_model("bm", T), u0, w, IntegratorConfig("heun", 1e-3, 500))
    expected = np.mod(u0.x + h0 @ w.increments.sum(0), 2 * np.pi)
    d = np.abs(tr.x[-1] - expected)
    assert np.minimum(d, 2 * np.pi - d).max() <= 1e-12
    assert np.abs(tr.h - h0).max() == 0.0


def test_heun_deterministic_order_two():
    S = get_manifold("sphere2")
    model = make_model("scalar_drag_noise", S, gamma0=1.3, sigma0=0.0, sigma_amp=0.0, force_amp=0.8)
    u0 = FrameBundlePoint.make(2, np.array([0.9, 0.3]), random_orthogonal(np.random.default_rng(0), 2))

    def run(dt, T=1.0):
        u = FrameBundlePoint(np.atleast_1d(u0.chart), u0.x[None], u0.h[None])
        for _ in range(int(round(T / dt))):
            u = step_limit_batch(S, model, u, np.zeros((1, 2)), dt)
        return S.embed(u.chart, u.x)[0], u.h[0]

    ref = run(0.04 / 32)
    e1 = [np.abs(run(dt)[0] - ref[0]).max() for dt in (0.04, 0.02)]
    assert 4 * 0.8 <= e1[0] / e1[1] <= 4 * 1.2


def test_limit_refinement_with_aggregated_noise():
    """Limit paths from one fine noise grid get closer as dt shrinks (RMS over paths)."""
    T = get_manifold("torus2")
    model = make_model("scalar_drag_noise", T, sigma_amp=0.5, gamma_amp=0.3)
    B, fine, n_fine = 200, 2.5e-4, 400
    dw_fine, _ = NoiseBlock(3, range(B), fine, 2).draw(n_fine)
    ends = {}
    for r in (4, 2, 1):
        dw, _ = aggregate_chunk(dw_fine, None, r)
        u = batch_point([0.5, 0.2], B)
        for i in range(len(dw)):
            u = step_limit_batch(T, model, u, dw[i], fine * r)
        ends[r] = T.embed(u.chart, u.x)
    d1 = np.sqrt(((ends[4] - ends[2]) ** 2).sum(-1).mean())
    d2 = np.sqrt(((ends[2] - ends[1]) ** 2).sum(-1).mean())
    assert d2 < d1 <= 5 * 1e-3


def test_ito_drift_matches_ensemble():
    """Short-time mean increments of x^i under the Heun scheme match the Ito generator (3 SE)."""
    B, dt, n = 10000, 5e-4, 20
    rng = np.random.default_rng(4)
    for mname, kw in (("sphere2", dict(sigma_amp=0.4)), ("torus2", dict(sigma_amp=0.4))):
        M = get_manifold(mname)
        model = make_model("anisotropic_drag", M, **kw)
        pts = M.sample_points(rng, 5, chart=0)
        for j in range(5):
            h0 = random_orthogonal(rng, 2)
            u0 = FrameBundlePoint(np.array([pts.chart[j]]), pts.coords[j][None], h0[None])
            dw, _ = NoiseBlock(100 + j, range(B), dt, 2).draw(n)
            u = batch_point(pts.coords[j], B, pts.chart[j], np.tile(h0, (B, 1, 1)))
            for i in range(n):
                u = step_limit_batch(M, model, u, dw[i], dt, threshold=np.inf)
            incr = (u.x - u0.x) / (n * dt)
            for i in range(2):
                want = ito_generator_apply(M, model, ("x", i), u0)[0]
                se = incr[:, i].std(ddof=1) / math.sqrt(B)
                assert abs(incr[:, i].mean() - want) <= 3 * se, (mname, j, i)


# trajectories and families ----------------------------------------------------------

def test_zero_steps_and_repeatability():
    S = get_manifold("sphere2")
    model = make_model("anisotropic_drag", S, mass=0.1)
    init = MassState(FrameBundlePoint.make(0, np.array([0.2, 0.1])), np.zeros(2))
    empty = sample_wiener(0, 0, 1e-3, 0, 2, aux_dim=2)
    tr = simulate_mass_path(S, model, init, empty, IntegratorConfig("exp_ou", 1e-3, 0))
    assert len(tr) == 1 and np.array_equal(tr.x[0], init.u.x)
    w = sample_wiener(0, 0, 1e-3, 30, 2, aux_dim=2)
    a = simulate_mass_path(S, model, init, w, IntegratorConfig("exp_ou", 1e-3, 30))
    b = simulate_mass_path(S, model, init, w, IntegratorConfig("exp_ou", 1e-3, 30))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.h, b.h) and np.array_equal(a.v, b.v)


def test_csv_round_trip():
    S = get_manifold("sphere2")
    model = make_model("anisotropic_drag", S, mass=0.1)
    init = MassState(FrameBundlePoint.make(0, np.array([0.2, 0.1])), np.array([0.3, 0.0]))
    tr = simulate_mass_path(S, model, init, sample_wiener(0, 0, 1e-3, 40, 2, aux_dim=2),
                            IntegratorConfig("exp_ou", 1e-3, 40, thin=4))
    back = Trajectory.from_csv(tr.to_csv(["seed=0"]))
    for name in ("t", "chart", "x", "h", "v"):
        assert np.array_equal(getattr(back, name), getattr(tr, name))
    assert len(tr) == 11


def test_coupled_family_duplicates_and_small_mass():
    T = get_manifold("torus2")
    model = make_model("scalar_drag_noise", T, sigma_amp=0.5)
    init = MassState(FrameBundlePoint.make(0, np.array([1.0, 1.0])), np.zeros(2))
    w = sample_wiener(2, 0, 1e-4, 2000, 2, aux_dim=2)
    trajs, limit = coupled_family(T, model, [1e-4, 1e-4, 0.3], init, w, IntegratorConfig("exp_ou", 1e-4, 2000))
    assert np.array_equal(trajs[0].x, trajs[1].x)
    d_small = frame_distance(T, trajs[0].point(-1), limit.point(-1))
    d_large = frame_distance(T, trajs[2].point(-1), limit.point(-1))
    assert d_small < 0.05 and d_small < d_large


def test_budget_error_reports_steps():
    T = get_manifold("torus2")
    model = make_model("bm", T)
    w = WienerGrid(1e-9, MAX_STEPS, 2, np.zeros((0, 2)), 0, 0)
    init = MassState(FrameBundlePoint.make(0, np.zeros(2)), np.zeros(2))
    with pytest.raises(BudgetError) as err:
        coupled_family(T, model, [1e-3, 1e-4], init, w, IntegratorConfig("exp_ou", 1e-9, MAX_STEPS))
    assert err.value.required == 3 * MAX_STEPS and str(3 * MAX_STEPS) in str(err.value)


def test_config_errors():
    T = get_manifold("torus2")
    model = make_model("bm", T, mass=0.01)
    init = MassState(FrameBundlePoint.make(0, np.zeros(2)), np.zeros(2))
    w = sample_wiener(0, 0, 1e-3, 10, 2)
    with pytest.raises(ConfigError):
        IntegratorConfig("rk4")
    with pytest.raises(ConfigError):
        IntegratorConfig("em", dt=-1.0)
    with pytest.raises(ConfigError):
        simulate_mass_path(T, model, init, w, IntegratorConfig("em", 1e-3, 10))
    with pytest.raises(ConfigError):
        simulate_mass_path(T, model, init, w, IntegratorConfig("heun", 1e-3, 10))
    with pytest.raises(ConfigError):
        simulate_mass_path(T, model, init, w, IntegratorConfig("exp_ou", 1e-3, 10))
    with pytest.raises(ConfigError):
        simulate_limit_path(T, model, init.u, w, IntegratorConfig("heun", 1.5e-3, 10))
    with pytest.raises(ConfigError):
        simulate_limit_path(T, model, init.u, w, IntegratorConfig("exp_ou", 1e-3, 10))
    with pytest.raises(ConfigError):
        sample_wiener(0, 0, 0.0, 10, 2)


def test_single_step_wrappers_match_batch():
    S = get_manifold("sphere2")
    model = make_model("anisotropic_drag", S, mass=0.1, sigma_amp=0.3)
    u = FrameBundlePoint.make(0, np.array([0.3, -0.2]))
    dw, z = np.array([0.01, -0.02]), np.array([0.3, 1.1])
    one = step_mass_system(S, model, MassState(u, np.array([0.2, 0.1])), dw, IntegratorConfig("exp_ou", 1e-3), z)
    bat = step_mass_batch(S, model, MassState(batch_point(u.x, 1, 0), np.array([[0.2, 0.1]])), dw[None], z[None], 1e-3)
    assert np.array_equal(one.u.x, bat.u.x[0]) and np.array_equal(one.v, bat.v[0])
    lim = step_limit_system(S, model, u, dw, IntegratorConfig("heun", 1e-3))
    assert np.array_equal(lim.x, step_limit_batch(S, model, batch_point(u.x, 1, 0), dw[None], 1e-3).x[0])


# invariants -------------------------------------------------------------------------

def _right_translated_runs(scheme, g, n=200, dt=1e-3):
    S = get_manifold("sphere2")
    model = make_model("anisotropic_drag", S, mass=0.05, sigma_amp=0.4)
    # start just inside the switch radius so that the path changes chart
    u0 = FrameBundlePoint.make(0, np.array([-1.9, 0.5]), random_orthogonal(np.random.default_rng(1), 2))
    v0 = np.array([0.3, -0.2])
    if scheme == "em":
        dt = 5e-4
    w = sample_wiener(1, 0, dt, n, 2, aux_dim=2)
    # rows are increments, so g^{-1} dW becomes dW @ g
    wg = WienerGrid(w.dt, w.n_steps, 2, w.increments @ g, 1, 0, w.aux @ g)
    ug = FrameBundlePoint(u0.chart, u0.x, u0.h @ g)
    cfg = IntegratorConfig(scheme, dt, n)
    if scheme == "heun":
        return S, simulate_limit_path(S, model, u0, w, cfg), simulate_limit_path(S, model, ug, wg, cfg)
    a = simulate_mass_path(S, model, MassState(u0, v0), w, cfg)
    b = simulate_mass_path(S, model, MassState(ug, g.T @ v0), wg, cfg)
    return S, a, b


@pytest.mark.parametrize("scheme", ["exp_ou", "em", "heun"])
def test_right_translation_equivariance(scheme):
    g = random_orthogonal(np.random.default_rng(9), 2)
    S, a, b = _right_translated_runs(scheme, g)
    assert len(set(a.chart)) == 2  # the path crosses charts
    assert np.array_equal(a.chart, b.chart)
    assert np.abs(a.x - b.x).max() <= 1e-10
    assert np.abs(a.h @ g - b.h).max() <= 1e-10
    if a.v is not None:
        assert np.abs(a.v @ g - b.v).max() <= 1e-10


def test_frame_orthogonality_maintained():
    S = get_manifold("sphere2")
    model = make_model("anisotropic_drag", S, sigma_amp=0.4)
    u0 = FrameBundlePoint.make(0, np.array([1.6, 1.1]))
    w = sample_wiener(4, 0, 1e-3, 300, 2, aux_dim=2)
    runs = [simulate_limit_path(S, model, u0, w, IntegratorConfig("heun", 1e-3, 300))]
    for scheme, mass in (("exp_ou", 0.05), ("em", 1.0)):
        init = MassState(u0, np.array([0.5, -0.4]))
        runs.append(simulate_mass_path(S, model.with_mass(mass), init, w, IntegratorConfig(scheme, 1e-3, 300)))
    for tr in runs:
        err = np.linalg.norm(np.swapaxes(tr.h, -1, -2) @ tr.h - np.eye(2), axis=(1, 2))
        assert err.max() <= 1e-14


def _switch_runs(scheme, dt, n, thresholds=(2.0, 2.9)):
    S = get_manifold("sphere2")
    z0 = np.array([1.7, 0.3])
    out = []
    for thr in thresholds:
        w = sample_wiener(5, 0, dt, n, 2, aux_dim=2)
        cfg = IntegratorConfig(scheme, dt, n, chart_switch_threshold=thr)
        if scheme == "heun":
            model = make_model("anisotropic_drag", S, sigma_amp=0.4)
            tr = simulate_limit_path(S, model, FrameBundlePoint.make(0, z0), w, cfg)
        else:
            model = make_model("anisotropic_drag", S, sigma_amp=0.4, mass=1.0)
            tr = simulate_mass_path(S, model, MassState(FrameBundlePoint.make(0, z0), np.array([2.0, 0.5])), w, cfg)
        out.append(tr)
    return S, out


def test_chart_invariance_mass_system():
    S, (a, b) = _switch_runs("exp_ou", 1e-4, 5000)
    assert (a.chart != b.chart).sum() > 100
    assert np.abs(S.embed(a.chart, a.x) - S.embed(b.chart, b.x)).max() <= 1e-8


def test_chart_dependence_of_heun_is_discretization_error():
    S, (a1, b1) = _switch_runs("heun", 1e-3, 300)
    S, (a2, b2) = _switch_runs("heun", 2.5e-4, 1200)
    d1 = np.abs(S.embed(a1.chart, a1.x) - S.embed(b1.chart, b1.x)).max()
    d2 = np.abs(S.embed(a2.chart, a2.x) - S.embed(b2.chart, b2.x)).max()
    assert d2 < d1 / 2


# parallel ensembles -------------------------------------------------------------------

def _block_fn(idx):
    S = get_manifold("sphere2")
    model = make_model("anisotropic_drag", S, sigma_amp=0.4)
    dw, _ = NoiseBlock(17, idx, 1e-3, 2).draw(20)
    u = batch_point([0.3, 0.4], len(idx))
    for i in range(20):
        u = step_limit_batch(S, model, u, dw[i], 1e-3)
    return {"x": S.embed(u.chart, u.x), "idx": np.asarray(idx)}


def test_run_blocks_deterministic_across_threads():
    ref = run_blocks(_block_fn, 37, block_size=8, threads=1)
    assert np.array_equal(ref["idx"], np.arange(37))
    for threads in (4, 8):
        out = run_blocks(_block_fn, 37, block_size=8, threads=threads)
        assert out["x"].tobytes() == ref["x"].tobytes()
    # paths do not depend on the block they were simulated in
    other = run_blocks(_block_fn, 37, block_size=5, threads=3)
    assert np.abs(other["x"] - ref["x"]).max() <= 1e-15
    with pytest.raises(ConfigError):
        run_blocks(_block_fn, 0)


def test_thread_count(monkeypatch):
    monkeypatch.setenv("FRAMELANGEVIN_THREADS", "3")
    assert thread_count() == 3 and thread_count(5) == 5
    monkeypatch.setenv("FRAMELANGEVIN_THREADS", "many")
    with pytest.raises(ConfigError):
        thread_count()
    monkeypatch.delenv("FRAMELANGEVIN_THREADS")
    assert thread_count() == (os.cpu_count() or 1)


@settings(max_examples=15)
@given(st.floats(-np.pi, np.pi), st.booleans())
def test_property_mass_step_equivariant(angle, reflect):
    g = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    if reflect:
        g = g @ np.diag([1.0, -1.0])
    S, a, b = _right_translated_runs("exp_ou", g, n=20)
    assert np.abs(a.x - b.x).max() <= 1e-10 and np.abs(a.h @ g - b.h).max() <= 1e-10
