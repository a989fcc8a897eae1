"""Physical model data: force F, drag gamma and noise sigma.

Fields are evaluated in the orthonormal frame ``E`` of a chart together with
their coordinate derivatives; frame-bundle components (``F(u) = u^{-1} F``,
``gamma(u) = u^{-1} gamma u`` ...) follow by conjugation with ``h``.

Two families of fields exist.  Ambient fields are written in terms of the
isometric embedding ``X`` and are therefore chart-consistent on every
manifold.  Coordinate fields are closures of the chart coordinates and are
only allowed on single-chart manifolds (circle, flat torus).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .geometry import FrameBundlePoint, Manifold, TWO_PI
from .linalg import lyapunov_solve, min_sym_eig, spd_sqrt

__all__ = [
    "ModelValidationError",
    "Constant",
    "AmbientAffine",
    "CoordinateFunction",
    "ZeroVector",
    "CoordinateVector",
    "AmbientLinearVector",
    "GradientField",
    "ScalarTensor",
    "FrameConstantTensor",
    "CoordinateTensor",
    "AmbientTensor",
    "SqrtTensor",
    "TensorNoise",
    "VectorListNoise",
    "ModelSpec",
    "fluctuation_dissipation_noise",
    "force_frame_components",
    "drag_frame_components",
    "noise_frame_components",
    "validate_drag_bound",
    "quasi_random_points",
    "PRESETS",
    "make_model",
]


class ModelValidationError(ValueError):
    pass


def _single_chart(M: Manifold, what):
    if len(M.charts) != 1:
        raise ModelValidationError(f"{what} needs a single-chart manifold, not {M.name}")


# ---------------------------------------------------------------------------
# scalar functions on M:  value, coordinate gradient, coordinate Hessian


@dataclass(frozen=True)
class Constant:
    c: float

    def value(self, M, chart, x):
        return np.full(x.shape[:-1], float(self.c))

    def grad(self, M, chart, x):
        return np.zeros(x.shape)

    def hess(self, M, chart, x):
        return np.zeros(x.shape + x.shape[-1:])


@dataclass(frozen=True)
class AmbientAffine:
    """``c0 + coeffs . X`` in terms of the embedding ``X``."""

    c0: float
    coeffs: tuple

    def _c(self, M):
        c = np.zeros(M.embed_dim)
        c[: len(self.coeffs)] = self.coeffs
        return c

    def value(self, M, chart, x):
        return self.c0 + M.embed(chart, x) @ self._c(M)

    def grad(self, M, chart, x):
        return np.einsum("d,...di->...i", self._c(M), M.embed_jacobian(chart, x))

    def hess(self, M, chart, x):
        return np.einsum("d,...dij->...ij", self._c(M), M.embed_hessian(chart, x))


@dataclass(frozen=True)
class CoordinateFunction:
    """Scalar given by closures of the chart coordinates (single-chart manifolds)."""

    f: Callable
    df: Callable
    d2f: Optional[Callable] = None

    def value(self, M, chart, x):
        _single_chart(M, "CoordinateFunction")
        return np.asarray(self.f(x), dtype=float)

    def grad(self, M, chart, x):
        return np.asarray(self.df(x), dtype=float)

    def hess(self, M, chart, x):
        if self.d2f is None:
            raise ModelValidationError("CoordinateFunction without second derivative")
        return np.asarray(self.d2f(x), dtype=float)


# ---------------------------------------------------------------------------
# vector fields: frame components (..., n) and derivative (..., n, i)


class ZeroVector:
    def frame(self, M, chart, x):
        return np.zeros(x.shape)

    def frame_derivative(self, M, chart, x):
        return np.zeros(x.shape + x.shape[-1:])


@dataclass(frozen=True)
class CoordinateVector:
    """Coordinate components ``F^i(x)`` with Jacobian ``dF^i/dx^j``."""

    f: Callable
    df: Callable

    def frame(self, M, chart, x):
        _single_chart(M, "CoordinateVector")
        return np.einsum("...ai,...i->...a", M.lam(chart, x), np.asarray(self.f(x), dtype=float))

    def frame_derivative(self, M, chart, x):
        lam, dlam = M.lam(chart, x), M.dlam(chart, x)
        fx, dfx = np.asarray(self.f(x), dtype=float), np.asarray(self.df(x), dtype=float)
        return (np.einsum("...aki,...k->...ai", dlam, fx)
                + np.einsum("...ak,...ki->...ai", lam, dfx))


@dataclass(frozen=True)
class AmbientLinearVector:
    """Tangential part of ``L X + b``."""

    L: np.ndarray
    b: Optional[np.ndarray] = None

    def _amb(self, X):
        out = X @ np.asarray(self.L, dtype=float).T
        return out if self.b is None else out + self.b

    def frame(self, M, chart, x):
        E = M.frame_vectors(chart, x)
        return np.einsum("...da,...d->...a", E, self._amb(M.embed(chart, x)))

    def frame_derivative(self, M, chart, x):
        E = M.frame_vectors(chart, x)
        dE = M.frame_vectors_derivative(chart, x)
        V = self._amb(M.embed(chart, x))
        dV = np.einsum("ed,...di->...ei", np.asarray(self.L, dtype=float), M.embed_jacobian(chart, x))
        return np.einsum("...dai,...d->...ai", dE, V) + np.einsum("...da,...di->...ai", E, dV)


@dataclass(frozen=True)
class GradientField:
    """Riemannian gradient of a scalar potential, times ``scale``."""

    potential: object
    scale: float = 1.0

    def frame(self, M, chart, x):
        li = M.inv_lam(chart, x)
        return self.scale * np.einsum("...ia,...i->...a", li, self.potential.grad(M, chart, x))

    def frame_derivative(self, M, chart, x):
        li = M.inv_lam(chart, x)
        dlam = M.dlam(chart, x)
        g = self.potential.grad(M, chart, x)
        hs = self.potential.hess(M, chart, x)
        # d(li^T g) = (d li)^T g + li^T dg,  d li = -li dlam li
        dli = -np.einsum("...kb,...bci,...ca->...kai", li, dlam, li)
        return self.scale * (np.einsum("...kai,...k->...ai", dli, g)
                             + np.einsum("...ka,...ki->...ai", li, hs))


# ---------------------------------------------------------------------------
# (1,1) tensor fields: frame matrix (..., n, n) and derivative (..., n, n, i)


@dataclass(frozen=True)
class ScalarTensor:
    scalar: object

    symmetric = True

    def frame(self, M, chart, x):
        return self.scalar.value(M, chart, x)[..., None, None] * np.eye(M.dim)

    def frame_derivative(self, M, chart, x):
        return np.einsum("ab,...i->...abi", np.eye(M.dim), self.scalar.grad(M, chart, x))


@dataclass(frozen=True)
class FrameConstantTensor:
    """Constant components in the global parallel frame of a flat single-chart manifold."""

    matrix: np.ndarray

    @property
    def symmetric(self):
        m = np.asarray(self.matrix)
        return bool(np.allclose(m, m.T))

    def frame(self, M, chart, x):
        _single_chart(M, "FrameConstantTensor")
        return np.broadcast_to(np.asarray(self.matrix, dtype=float), x.shape[:-1] + (M.dim, M.dim)).copy()

    def frame_derivative(self, M, chart, x):
        return np.zeros(x.shape[:-1] + (M.dim, M.dim, M.dim))


@dataclass(frozen=True)
class CoordinateTensor:
    """Coordinate components ``T^i_j(x)`` with derivative ``d/dx^k`` appended last."""

    f: Callable
    df: Callable
    symmetric: bool = False

    def frame(self, M, chart, x):
        _single_chart(M, "CoordinateTensor")
        lam, li = M.lam(chart, x), M.inv_lam(chart, x)
        return lam @ np.asarray(self.f(x), dtype=float) @ li

    def frame_derivative(self, M, chart, x):
        lam, li, dlam = M.lam(chart, x), M.inv_lam(chart, x), M.dlam(chart, x)
        t, dt = np.asarray(self.f(x), dtype=float), np.asarray(self.df(x), dtype=float)
        dli = -np.einsum("...kb,...bci,...ca->...kai", li, dlam, li)
        return (np.einsum("...aki,...kl,...lb->...abi", dlam, t, li)
                + np.einsum("...ak,...kli,...lb->...abi", lam, dt, li)
                + np.einsum("...ak,...kl,...lbi->...abi", lam, t, dli))


@dataclass(frozen=True)
class AmbientTensor:
    """Tangential compression ``E^T A(X) E`` of an ambient matrix field.

    ``A(X) = base + sum_i s_i(X) mats_i`` with scalar functions ``s_i``
    (e.g. :class:`AmbientAffine`).
    """

    base: np.ndarray
    terms: tuple = ()

    @property
    def symmetric(self):
        mats = [np.asarray(self.base)] + [np.asarray(m) for _, m in self.terms]
        return all(np.allclose(m, m.T) for m in mats)

    def _amb(self, M, chart, x):
        A = np.broadcast_to(np.asarray(self.base, dtype=float), x.shape[:-1] + (M.embed_dim,) * 2)
        for s, m in self.terms:
            A = A + s.value(M, chart, x)[..., None, None] * np.asarray(m, dtype=float)
        return A

    def frame(self, M, chart, x):
        E = M.frame_vectors(chart, x)
        return np.swapaxes(E, -1, -2) @ self._amb(M, chart, x) @ E

    def frame_derivative(self, M, chart, x):
        E = M.frame_vectors(chart, x)
        dE = M.frame_vectors_derivative(chart, x)
        A = self._amb(M, chart, x)
        Et = np.swapaxes(E, -1, -2)
        dEi = np.moveaxis(dE, -1, -3)               # (..., i, d, a)
        out = np.swapaxes(dEi, -1, -2) @ (A @ E)[..., None, :, :]
        out = out + (Et @ A)[..., None, :, :] @ dEi
        for s, m in self.terms:
            mE = Et @ np.asarray(m, dtype=float) @ E
            out = out + s.grad(M, chart, x)[..., :, None, None] * mE[..., None, :, :]
        return np.moveaxis(out, -3, -1)


@dataclass(frozen=True)
class SqrtTensor:
    """Symmetric positive square root of ``scale * tensor`` (tensor must be symmetric)."""

    tensor: object
    scale: float = 1.0

    symmetric = True

    def frame(self, M, chart, x):
        return spd_sqrt(self.scale * self.tensor.frame(M, chart, x), clip=False)

    def frame_derivative(self, M, chart, x):
        root = self.frame(M, chart, x)
        d = self.scale * self.tensor.frame_derivative(M, chart, x)
        # root dR + dR root = d(scale * tensor)
        rhs = np.moveaxis(d, -1, -3)
        sol = lyapunov_solve(root[..., None, :, :], rhs, check=False)
        return np.moveaxis(sol, -3, -1)


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class TensorNoise:
    """``sigma(u) = u^{-1} sigma(x) u`` with ``k = n``."""

    tensor: object

    def k(self, M):
        return M.dim

    def frame(self, M, chart, x):
        return self.tensor.frame(M, chart, x)

    def frame_derivative(self, M, chart, x):
        return self.tensor.frame_derivative(M, chart, x)


@dataclass(frozen=True)
class VectorListNoise:
    """``sigma(u) e_a = u^{-1} sigma_a(x)`` for ``k`` vector fields."""

    fields: tuple

    def k(self, M):
        return len(self.fields)

    def frame(self, M, chart, x):
        return np.stack([f.frame(M, chart, x) for f in self.fields], axis=-1)

    def frame_derivative(self, M, chart, x):
        return np.stack([f.frame_derivative(M, chart, x) for f in self.fields], axis=-2)


def fluctuation_dissipation_noise(drag, kT):
    """Noise with ``Sigma = 2 kT gamma`` built from a symmetric drag tensor."""
    if not getattr(drag, "symmetric", False):
        raise ModelValidationError("fluctuation-dissipation construction needs a symmetric drag")
    if kT <= 0:
        raise ModelValidationError("kT must be positive")
    return TensorNoise(SqrtTensor(drag, 2.0 * kT))


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ModelSpec:
    manifold: Manifold
    force: object
    drag: object
    noise: object
    mass: float = 1.0
    gamma1: float = 0.0
    kT: Optional[float] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.mass > 0:
            raise ModelValidationError(f"mass must be positive, got {self.mass}")

    @property
    def k(self):
        return self.noise.k(self.manifold)

    @property
    def tensor_noise(self):
        return isinstance(self.noise, TensorNoise)

    def with_mass(self, mass):
        return replace(self, mass=float(mass))


def _ht(h):
    return np.swapaxes(h, -1, -2)


def force_frame_components(M, model, u: FrameBundlePoint):
    """``F(u) = h^T F_E(x)``."""
    fe = model.force.frame(M, u.chart, u.x)
    return (np.swapaxes(u.h, -1, -2) @ fe[..., None])[..., 0]


def drag_frame_components(M, model, u: FrameBundlePoint, check=False):
    """``gamma(u) = h^T gamma_E(x) h``."""
    g = _ht(u.h) @ model.drag.frame(M, u.chart, u.x) @ u.h
    if check:
        lam = min_sym_eig(g)
        if np.any(lam < model.gamma1 - 1e-12) or np.any(lam <= 0):
            raise ModelValidationError(f"drag ellipticity violated (min eigenvalue {lam.min():.4g})")
    return g


def noise_frame_components(M, model, u: FrameBundlePoint):
    """``sigma(u)``: ``h^T sigma_E h`` (tensor form) or ``h^T S_E`` (vector list)."""
    s = model.noise.frame(M, u.chart, u.x)
    if isinstance(model.noise, TensorNoise):
        return _ht(u.h) @ s @ u.h
    return _ht(u.h) @ s


def quasi_random_points(M: Manifold, n_samples, seed=0):
    """Scrambled Halton points mapped onto ``M``, returned per chart used by the atlas."""
    sampler = qmc.Halton(d=max(M.dim, 2), scramble=True, seed=seed)
    pts = sampler.random(n_samples)
    out = []
    if M.name == "sphere2":
        z = 2.0 * pts[:, 0] - 1.0
        ph = TWO_PI * pts[:, 1]
        r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
        X = np.stack([r * np.cos(ph), r * np.sin(ph), z], axis=-1)
        for c in (0, 1):
            sel = (1.0 - M.charts[c].sign * X[:, 2]) > 0.2
            ch = np.full(int(sel.sum()), c)
            out.append((ch, M.coords_from_embedded(ch, X[sel])))
    else:
        x = TWO_PI * pts[:, : M.dim]
        out.append((np.zeros(n_samples, dtype=int), x))
    return out


def validate_drag_bound(M, model, n_samples=1000, seed=0):
    """Statistically certify the drag ellipticity bound.

    Returns the minimum, over quasi-random sample points of every chart, of
    the smallest eigenvalue of the symmetric part of the drag in an
    orthonormal frame.  This is a sampled certificate, not a proof.

    Raises
    ------
    ModelValidationError
        If the sampled bound is not positive or falls below the model's
        declared ``gamma1``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    lo = np.inf
    for chart, x in quasi_random_points(M, n_samples, seed):
        if len(x):
            lo = min(lo, float(np.min(min_sym_eig(model.drag.frame(M, chart, x)))))
    if not lo > 0:
        raise ModelValidationError(f"drag is not uniformly elliptic: sampled bound {lo:.4g}")
    if lo < model.gamma1 - 1e-12:
        raise ModelValidationError(f"sampled bound {lo:.4g} is below declared gamma1={model.gamma1}")
    return lo


# ---------------------------------------------------------------------------
# presets


def _axis_vec(M, axis, amp):
    c = [0.0] * M.embed_dim
    c[axis % M.embed_dim] = amp
    return tuple(c)


def _bm(M, gamma=1.0, sigma=1.0, mass=1.0):
    """``gamma = sigma = const``, ``F = 0``."""
    return ModelSpec(M, ZeroVector(), ScalarTensor(Constant(gamma)), TensorNoise(ScalarTensor(Constant(sigma))),
                     mass=mass, gamma1=float(gamma), name="bm")


def _scalar_drag_noise(M, gamma0=1.0, gamma_amp=0.0, sigma0=1.0, sigma_amp=0.5, force_amp=0.0,
                       axis=1, mass=1.0):
    """Scalar ``gamma = gamma0 + gamma_amp X[axis]``, ``sigma = sigma0 + sigma_amp X[axis]``,
    ``F = force_amp grad X[-1]``.  On the circle/torus ``X[1] = sin x_1``."""
    if gamma0 - abs(gamma_amp) <= 0:
        raise ModelValidationError("scalar_drag_noise: gamma0 - |gamma_amp| must be positive")
    force = ZeroVector() if force_amp == 0 else GradientField(
        AmbientAffine(0.0, _axis_vec(M, -1, 1.0)), force_amp)
    return ModelSpec(
        M, force,
        ScalarTensor(AmbientAffine(gamma0, _axis_vec(M, axis, gamma_amp))),
        TensorNoise(ScalarTensor(AmbientAffine(sigma0, _axis_vec(M, axis, sigma_amp)))),
        mass=mass, gamma1=gamma0 - abs(gamma_amp), name="scalar_drag_noise",
    )


def _aniso_mats(M, aniso):
    d = M.embed_dim
    return np.diag(aniso * np.arange(1, d + 1) / d)


def _fd_particle(M, kT=0.5, gamma0=1.0, aniso=1.0, mod=0.5, axis=1, force_amp=0.0, mass=1.0):
    """Symmetric state-dependent drag ``E^T (gamma0 I + (1 + mod X[axis]) D) E`` with
    ``D = aniso diag(1..d)/d`` and noise ``sigma = sqrt(2 kT gamma)``."""
    if not 0 <= abs(mod) < 1:
        raise ModelValidationError("fd_particle: need |mod| < 1")
    d = M.embed_dim
    drag = AmbientTensor(gamma0 * np.eye(d) + _aniso_mats(M, aniso),
                         ((AmbientAffine(0.0, _axis_vec(M, axis, mod)), _aniso_mats(M, aniso)),))
    force = ZeroVector() if force_amp == 0 else GradientField(
        AmbientAffine(0.0, _axis_vec(M, -1, 1.0)), force_amp)
    return ModelSpec(M, force, drag, fluctuation_dissipation_noise(drag, kT), mass=mass,
                     gamma1=float(gamma0), kT=float(kT), name="fd_particle")


def _anisotropic_drag(M, gamma0=1.0, aniso=1.0, mod=0.5, skew=0.5, sigma0=1.0, sigma_amp=0.0,
                      axis=1, mass=1.0):
    """Non-symmetric drag ``E^T (gamma0 I + (1 + mod X[axis]) D + skew K) E`` with an
    antisymmetric ``K``, and scalar tensor noise ``sigma0 + sigma_amp X[axis]``."""
    if not 0 <= abs(mod) < 1:
        raise ModelValidationError("anisotropic_drag: need |mod| < 1")
    d = M.embed_dim
    K = np.zeros((d, d))
    K[np.triu_indices(d, 1)] = 1.0
    K = K - K.T
    drag = AmbientTensor(gamma0 * np.eye(d) + _aniso_mats(M, aniso) + skew * K,
                         ((AmbientAffine(0.0, _axis_vec(M, axis, mod)), _aniso_mats(M, aniso)),))
    noise = TensorNoise(ScalarTensor(AmbientAffine(sigma0, _axis_vec(M, axis, sigma_amp))))
    return ModelSpec(M, ZeroVector(), drag, noise, mass=mass, gamma1=float(gamma0),
                     name="anisotropic_drag")


PRESETS = {
    "bm": _bm,
    "scalar_drag_noise": _scalar_drag_noise,
    "fd_particle": _fd_particle,
    "anisotropic_drag": _anisotropic_drag,
}


def make_model(name, manifold, **params) -> ModelSpec:
    """Build a preset model by name; unknown parameters raise ``TypeError``."""
    from .geometry import get_manifold

    if isinstance(manifold, str):
        manifold = get_manifold(manifold)
    try:
        builder = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    model = builder(manifold, **params)
    return replace(model, params=dict(params))
