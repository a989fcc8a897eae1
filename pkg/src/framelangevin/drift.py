"""Coefficients of the zero-mass limiting SDE on the frame bundle.

The limiting equation in Stratonovich form reads

    du = (gamma^{-1} F)^h dt + S^h dt + S^v dt + H_{gamma^{-1} sigma} o dW

with the noise-induced drift ``S^h`` (horizontal) and the vertical drift
``S^v``.  Everything here is evaluated pointwise and batched over paths.
Derivatives along the basic horizontal fields ``H_xi`` are obtained by the
chain rule from the analytic chart data and the analytic field derivatives.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import List

import numpy as np

from .fields import (
    TensorNoise,
    drag_frame_components,
    force_frame_components,
    noise_frame_components,
)
from .geometry import FrameBundlePoint, FrameTangent, Manifold
from .linalg import LinalgError, lyapunov_solve

__all__ = [
    "UnregisteredFunctionError",
    "LocalData",
    "DriftReport",
    "registered_function",
    "h_directional_derivative",
    "h_directional_derivative_fd",
    "k_f_coefficients",
    "lie_bracket_h",
    "noise_induced_drift",
    "limiting_coefficients",
    "limit_vector_fields",
    "ito_generator_apply",
]


class UnregisteredFunctionError(LookupError):
    pass


def _t(a):
    return np.swapaxes(a, -1, -2)


def _contract_middle(w, t):
    """``out[..., x, a, c] = sum_b w[..., b, x] t[..., a, b, c]`` via one batched matmul."""
    a, b, c = t.shape[-3:]
    tr = np.swapaxes(t, -3, -2).reshape(t.shape[:-3] + (b, a * c))
    out = _t(w) @ tr
    return out.reshape(out.shape[:-1] + (a, c))


def _apply_last(t, m, core):
    """``t[..., *core_axes, i] m[..., i, x]`` where ``t`` has ``core`` axes between batch and ``i``."""
    lead = t.shape[t.ndim - 1 - core:-1]
    tr = t.reshape(t.shape[:t.ndim - 1 - core] + (-1, t.shape[-1]))
    out = tr @ m
    return out.reshape(out.shape[:-2] + lead + (m.shape[-1],))


def _apply_first(v, t):
    """Contract ``v`` (vector or matrix) with the axis of ``t`` preceding its trailing pair."""
    a, c = t.shape[-2:]
    tr = t.reshape(t.shape[:-2] + (a * c,))
    if v.ndim == tr.ndim - 1:
        out = (v[..., None, :] @ tr)[..., 0, :]
    else:
        out = v @ tr
    return out.reshape(out.shape[:-1] + (a, c))


class LocalData:
    """Chart data, field components and their H-derivatives at a batch of points.

    Attributes are computed lazily.  The derivative axis ``xi`` (direction
    ``H_xi``) is always the last one for model components.
    """

    def __init__(self, M: Manifold, model, u: FrameBundlePoint, check=True):
        if check:
            M.check_domain(u.chart, u.x)
        self.M, self.model, self.u = M, model, u
        self.n = M.dim

    # chart data ---------------------------------------------------------
    @cached_property
    def li(self):
        return self.M.inv_lam(self.u.chart, self.u.x)

    @cached_property
    def conn(self):
        return self.M.conn(self.u.chart, self.u.x)

    @cached_property
    def dconn(self):
        return self.M.dconn(self.u.chart, self.u.x)

    @cached_property
    def dlam(self):
        return self.M.dlam(self.u.chart, self.u.x)

    @cached_property
    def hx(self):
        """``H_mu[x^i]``, shape (..., i, mu)."""
        return self.li @ self.u.h

    @cached_property
    def omega(self):
        """Frame rotation generators ``Omega_xi``, shape (..., xi, a, c)."""
        h = self.u.h
        if self.M.flat:
            return np.zeros(h.shape + (self.n,))
        return -_contract_middle(h, self.conn)

    @cached_property
    def hh(self):
        """``H_mu[h]``, shape (..., mu, a, c)."""
        return self.omega @ self.u.h[..., None, :, :]

    # model components ------------------------------------------------------
    @cached_property
    def force_e(self):
        return self.model.force.frame(self.M, self.u.chart, self.u.x)

    @cached_property
    def force(self):
        return force_frame_components(self.M, self.model, self.u)

    @cached_property
    def dforce(self):
        """``H_xi[F^a]``, shape (..., a, xi)."""
        dfe = self.model.force.frame_derivative(self.M, self.u.chart, self.u.x)
        d = dfe @ self.hx
        if not self.M.flat:
            d = d - _t((self.omega @ self.force_e[..., None, :, None])[..., 0])
        return _t(self.u.h) @ d

    @cached_property
    def gamma_e(self):
        return self.model.drag.frame(self.M, self.u.chart, self.u.x)

    @cached_property
    def gamma(self):
        return drag_frame_components(self.M, self.model, self.u)

    @cached_property
    def ginv(self):
        try:
            return np.linalg.inv(self.gamma)
        except np.linalg.LinAlgError as exc:
            raise LinalgError("singular drag matrix") from exc

    def _tensor_derivative(self, te, dte):
        """H-derivative of ``h^T T_E h``, shape (..., a, b, xi)."""
        d = np.moveaxis(_apply_last(dte, self.hx, 2), -1, -3)
        if not self.M.flat:
            d = d + te[..., None, :, :] @ self.omega - self.omega @ te[..., None, :, :]
        h = self.u.h[..., None, :, :]
        return np.moveaxis(_t(h) @ d @ h, -3, -1)

    @cached_property
    def dgamma(self):
        dte = self.model.drag.frame_derivative(self.M, self.u.chart, self.u.x)
        return self._tensor_derivative(self.gamma_e, dte)

    @cached_property
    def dginv(self):
        """``H_xi[(gamma^{-1})[a, b]]``, shape (..., a, b, xi)."""
        g = self.ginv[..., None, :, :]
        d = -g @ np.moveaxis(self.dgamma, -1, -3) @ g
        return np.moveaxis(d, -3, -1)

    @cached_property
    def sigma_e(self):
        return self.model.noise.frame(self.M, self.u.chart, self.u.x)

    @cached_property
    def sigma(self):
        return noise_frame_components(self.M, self.model, self.u)

    @cached_property
    def dsigma(self):
        """``H_xi[sigma[a, alpha]]``, shape (..., a, alpha, xi)."""
        dse = self.model.noise.frame_derivative(self.M, self.u.chart, self.u.x)
        if isinstance(self.model.noise, TensorNoise):
            return self._tensor_derivative(self.sigma_e, dse)
        d = np.moveaxis(_apply_last(dse, self.hx, 2), -1, -3)
        if not self.M.flat:
            d = d - self.omega @ self.sigma_e[..., None, :, :]
        return np.moveaxis(_t(self.u.h)[..., None, :, :] @ d, -3, -1)

    @cached_property
    def big_sigma(self):
        return self.sigma @ _t(self.sigma)

    @cached_property
    def J(self):
        return lyapunov_solve(self.gamma, self.big_sigma)

    # second derivatives of the coordinate functions ------------------------
    @cached_property
    def hhx(self):
        """``H_xi[H_mu[x^i]]``, shape (..., i, xi, mu)."""
        li, h = self.li, self.u.h
        n = self.n
        if self.M.flat:
            return np.zeros(h.shape[:-2] + (n, n, n))
        # d(Lambda^{-1}) along coordinate i, stacked as (..., i, k, a)
        dli = -li[..., None, :, :] @ np.moveaxis(self.dlam, -1, -3) @ li[..., None, :, :]
        dli_x = _t(self.hx) @ dli.reshape(dli.shape[:-2] + (n * n,))
        dli_x = dli_x.reshape(dli_x.shape[:-1] + (n, n))
        t = dli_x @ h[..., None, :, :] + li[..., None, :, :] @ self.omega @ h[..., None, :, :]
        return np.moveaxis(t, -3, -2)

    @cached_property
    def hhh(self):
        """``H_xi[H_mu[h]]``, shape (..., xi, mu, a, c)."""
        h = self.u.h
        if self.M.flat:
            return np.zeros(h.shape[:-2] + (self.n,) * 4)
        oh = self.omega @ h[..., None, :, :]           # (..., xi, b, c):  H_xi[h]
        # H_xi[Omega_mu][a, c] = -(Omega_xi h)[b, mu] conn[a,b,c] - h[b, mu] dconn[a,b,c,i] hx[i, xi]
        t1 = -_contract_middle(oh, self.conn[..., None, :, :, :])
        dconn_x = np.moveaxis(_apply_last(self.dconn, self.hx, 3), -1, -4)
        t2 = -_contract_middle(h[..., None, :, :], dconn_x)
        dom = t1 + t2
        return dom @ h[..., None, None, :, :] + self.omega[..., None, :, :, :] @ oh[..., :, None, :, :]

    @cached_property
    def bracket(self):
        """``[H_eta, H_xi]`` as ``(dx, dh)`` of shapes (..., i, eta, xi), (..., eta, xi, a, c)."""
        bx = self.hhx - np.swapaxes(self.hhx, -1, -2)
        bh = self.hhh - np.swapaxes(self.hhh, -3, -4)
        return bx, bh

    def horizontal(self, v):
        """``H_v`` at the stored points for a batch of frame vectors ``v``."""
        v = np.asarray(v, dtype=float)
        dx = (self.hx @ v[..., None])[..., 0]
        if self.M.flat:
            return FrameTangent(dx, np.zeros(dx.shape + (self.n,)))
        return FrameTangent(dx, _apply_first(v, self.hh))


# ---------------------------------------------------------------------------
# registered functions


@dataclass(frozen=True)
class _Registered:
    kind: str
    idx: tuple

    @property
    def second_order(self):
        return self.kind in ("x", "h")


_KINDS = {"x": 1, "h": 2, "gamma": 2, "ginv": 2, "sigma": 2, "force": 1}


def registered_function(kind, *idx):
    """Handle for a function with analytic H-derivatives.

    ``kind`` is one of ``"x"`` (chart coordinate), ``"h"`` (frame entry),
    ``"gamma"``, ``"ginv"``, ``"sigma"`` or ``"force"`` (model frame
    components).  Only ``"x"`` and ``"h"`` carry second derivatives.
    """
    if kind not in _KINDS or len(idx) != _KINDS[kind]:
        raise UnregisteredFunctionError(f"no registered function {kind}{list(idx)}")
    return _Registered(kind, tuple(int(i) for i in idx))


def _as_registered(f):
    if isinstance(f, _Registered):
        return f
    if isinstance(f, tuple) and f and isinstance(f[0], str):
        return registered_function(f[0], *f[1:])
    raise UnregisteredFunctionError(f"{f!r} is not a registered function")


def _value_and_h(data: LocalData, f: _Registered):
    """Value and all first H-derivatives (last axis xi)."""
    i = f.idx
    if f.kind == "x":
        return data.u.x[..., i[0]], data.hx[..., i[0], :]
    if f.kind == "h":
        return data.u.h[..., i[0], i[1]], data.hh[..., :, i[0], i[1]]
    if f.kind == "gamma":
        return data.gamma[..., i[0], i[1]], data.dgamma[..., i[0], i[1], :]
    if f.kind == "ginv":
        return data.ginv[..., i[0], i[1]], data.dginv[..., i[0], i[1], :]
    if f.kind == "sigma":
        return data.sigma[..., i[0], i[1]], data.dsigma[..., i[0], i[1], :]
    return data.force[..., i[0]], data.dforce[..., i[0], :]


def _first_second(data: LocalData, f: _Registered):
    """``H_mu[f]`` (..., mu) and ``H_xi[H_mu[f]]`` (..., xi, mu) for coordinate functions."""
    if not f.second_order:
        raise UnregisteredFunctionError(f"{f.kind} has no registered second derivatives")
    if f.kind == "x":
        return data.hx[..., f.idx[0], :], data.hhx[..., f.idx[0], :, :]
    a, c = f.idx
    return data.hh[..., :, a, c], data.hhh[..., :, :, a, c]


def h_directional_derivative(M, model, component_fn, u, eta_index, data=None):
    """Derivative of a registered component function along ``H_{e_eta}`` at ``u``."""
    f = _as_registered(component_fn)
    data = data or LocalData(M, model, u)
    return _value_and_h(data, f)[1][..., eta_index]


def h_directional_derivative_fd(M, fn, u: FrameBundlePoint, eta_index, step=1e-5):
    """Central finite difference of ``fn(u)`` along ``H_{e_eta}``.

    ``fn`` maps a :class:`FrameBundlePoint` to an array; ``h`` is not
    re-orthonormalized, which is harmless at first order.
    """
    e = np.zeros(M.dim)
    e[eta_index] = 1.0
    from .geometry import horizontal_field

    t = horizontal_field(M, u, np.broadcast_to(e, u.x.shape))
    up = FrameBundlePoint(u.chart, u.x + step * t.dx, u.h + step * t.dh)
    um = FrameBundlePoint(u.chart, u.x - step * t.dx, u.h - step * t.dh)
    return (np.asarray(fn(up)) - np.asarray(fn(um))) / (2.0 * step)


def k_f_coefficients(M, model, f, u, data=None):
    """``K^f[nu, xi] = H_xi[ginv[mu, nu]] H_mu[f] + ginv[mu, nu] H_xi[H_mu[f]]``."""
    f = _as_registered(f)
    data = data or LocalData(M, model, u)
    hf, hhf = _first_second(data, f)
    return ((hf[..., :, None, None] * data.dginv).sum(axis=-3)
            + _t(hhf @ data.ginv))


def lie_bracket_h(M, u, eta_index, xi_index, data=None) -> FrameTangent:
    """``[H_eta, H_xi]`` at ``u`` from analytic derivatives of the coordinate expressions."""
    data = data or LocalData(M, None, u)
    bx, bh = data.bracket
    return FrameTangent(bx[..., :, eta_index, xi_index], bh[..., eta_index, xi_index, :, :])


@dataclass
class DriftReport:
    lift_part: FrameTangent
    sh_part: FrameTangent
    sv_part: FrameTangent
    diffusion_columns: List[FrameTangent]
    J: np.ndarray

    @property
    def drift(self) -> FrameTangent:
        return self.lift_part + self.sh_part + self.sv_part


def _sh_coefficients(data: LocalData):
    """Frame components ``c`` with ``S^h = H_c``."""
    ginv = data.ginv
    gs = ginv @ data.sigma
    w = (data.dsigma * _t(gs)[..., None, :, :]).sum(axis=(-2, -1))
    t1 = (ginv @ w[..., None])[..., 0]
    lm = ginv @ data.J @ _t(data.gamma) - data.J
    t2 = (data.dginv * _t(lm)[..., None, :, :]).sum(axis=(-2, -1))
    return -0.5 * (t1 + t2)


def _sv(data: LocalData):
    n = data.n
    if data.M.flat:
        shape = data.u.x.shape
        return FrameTangent(np.zeros(shape), np.zeros(shape + (n,)))
    bx, bh = data.bracket
    coef = -0.5 * (data.ginv @ data.J)
    dx = (bx * coef[..., None, :, :]).sum(axis=(-2, -1))
    flat_coef = coef.reshape(coef.shape[:-2] + (n * n,))
    dh = _apply_first(flat_coef, bh.reshape(bh.shape[:-4] + (n * n, n, n)))
    return FrameTangent(dx, dh)


def noise_induced_drift(M, model, u, data=None) -> DriftReport:
    """``S^h`` and ``S^v`` at ``u`` (other report fields left empty)."""
    data = data or LocalData(M, model, u)
    sh = data.horizontal(_sh_coefficients(data))
    empty = FrameTangent(np.zeros_like(sh.dx), np.zeros_like(sh.dh))
    return DriftReport(empty, sh, _sv(data), [], data.J)


def limiting_coefficients(M, model, u, data=None) -> DriftReport:
    data = data or LocalData(M, model, u)
    rep = noise_induced_drift(M, model, u, data)
    rep.lift_part = data.horizontal((data.ginv @ data.force[..., None])[..., 0])
    gs = data.ginv @ data.sigma
    rep.diffusion_columns = [data.horizontal(gs[..., :, a]) for a in range(gs.shape[-1])]
    return rep


def limit_vector_fields(M, model, u, sv_scale=1.0, data=None, sh_scale=1.0):
    """Drift and diffusion fields in array form for the integrator.

    Returns ``(drift, diff_dx, diff_dh)``; ``diff_dx`` has shape
    (..., n, k) and ``diff_dh`` (..., k, n, n).  ``sv_scale`` multiplies the
    vertical drift (0 drops it); ``sh_scale`` does the same for ``S^h``.
    """
    data = data or LocalData(M, model, u, check=False)
    c = (data.ginv @ data.force[..., None])[..., 0]
    if sh_scale != 0.0:
        c = c + sh_scale * _sh_coefficients(data)
    drift = data.horizontal(c)
    if sv_scale != 0.0:
        sv = _sv(data)
        drift = FrameTangent(drift.dx + sv_scale * sv.dx, drift.dh + sv_scale * sv.dh)
    gs = data.ginv @ data.sigma
    diff_dx = data.hx @ gs
    if M.flat:
        diff_dh = np.zeros(gs.shape[:-2] + (gs.shape[-1],) + data.u.h.shape[-2:])
    else:
        diff_dh = _apply_first(_t(gs), data.hh)
    return drift, diff_dx, diff_dh


def ito_generator_apply(M, model, f, u, data=None):
    """Ito drift ``H_{gamma^{-1} F}[f] + J[b, a] K^f[b, a]`` of a coordinate function."""
    f = _as_registered(f)
    data = data or LocalData(M, model, u)
    hf, _ = _first_second(data, f)
    k = k_f_coefficients(M, model, f, u, data)
    lift = (hf * (data.ginv @ data.force[..., None])[..., 0]).sum(axis=-1)
    return lift + (data.J * k).sum(axis=(-2, -1))
