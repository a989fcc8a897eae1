"""Manifold catalogue and the horizontal vector fields on the orthonormal frame bundle.

Conventions
-----------
A frame-bundle point is stored in a chart as ``(chart, x, h)``: ``x`` are the
chart coordinates and ``h`` is the orthogonal matrix with ``u = psi(x) h``,
where ``psi`` is the chart's orthonormal frame ``E_alpha``.  So column ``a``
of ``h`` holds the components of the frame vector ``u(e_a)`` in the basis
``E``.

Per chart, each manifold supplies

* ``lam[alpha, i]``      : ``d_i = lam[alpha, i] E_alpha``
* ``dlam[alpha, k, i]``  : ``d/dx^i lam[alpha, k]``
* ``conn[a, b, c]``      : ``nabla_{E_b} E_c = conn[a, b, c] E_a``
* ``dconn[a, b, c, i]``  : ``d/dx^i conn[a, b, c]``
* ``christoffel[i, j, k]``
* an isometric embedding into R^d with its Jacobian and Hessian.

All evaluation routines are batched over leading axes; points of one batch
may sit in different charts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DomainError",
    "ChartPoint",
    "FrameBundlePoint",
    "FrameTangent",
    "Chart",
    "Manifold",
    "Circle",
    "FlatTorus",
    "Sphere",
    "get_manifold",
    "MANIFOLDS",
    "orthonormalize",
    "reorthonormalize",
    "horizontal_field",
    "horizontal_frame",
    "chart_transition",
    "geodesic_distance",
    "frame_distance",
    "embed_frame",
    "right_translate",
    "central_difference",
]

TWO_PI = 2.0 * np.pi


class DomainError(ValueError):
    """A point is outside the domain of its chart (or of a chart overlap)."""


@dataclass(frozen=True)
class ChartPoint:
    chart: np.ndarray
    coords: np.ndarray


@dataclass(frozen=True)
class FrameBundlePoint:
    """A batch of orthonormal frames ``u`` given in chart form.

    ``chart`` has shape ``batch``, ``x`` shape ``batch + (n,)`` and ``h``
    shape ``batch + (n, n)``.
    """

    chart: np.ndarray
    x: np.ndarray
    h: np.ndarray

    @classmethod
    def make(cls, chart, x, h=None):
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        if h is None:
            h = np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)).copy()
        h = np.asarray(h, dtype=float)
        chart = np.broadcast_to(np.asarray(chart, dtype=int), x.shape[:-1]).copy()
        return cls(chart, x, h)

    @property
    def base(self) -> ChartPoint:
        return ChartPoint(self.chart, self.x)

    @property
    def batch_shape(self):
        return self.x.shape[:-1]

    def __getitem__(self, idx):
        return FrameBundlePoint(self.chart[idx], self.x[idx], self.h[idx])

    def copy(self):
        return FrameBundlePoint(self.chart.copy(), self.x.copy(), self.h.copy())


@dataclass(frozen=True)
class FrameTangent:
    dx: np.ndarray
    dh: np.ndarray

    def __add__(self, other):
        return FrameTangent(self.dx + other.dx, self.dh + other.dh)

    def __sub__(self, other):
        return FrameTangent(self.dx - other.dx, self.dh - other.dh)

    def scale(self, c):
        c = np.asarray(c, dtype=float)
        return FrameTangent(self.dx * c[..., None], self.dh * c[..., None, None])


# ---------------------------------------------------------------------------
# charts


class Chart:
    """One chart of a manifold.  Subclasses implement the per-chart formulas."""

    dim: int
    embed_dim: int
    periodic: tuple = ()

    def in_domain(self, x):
        return np.all(np.isfinite(x), axis=-1)

    def needs_switch(self, x, threshold):
        return np.zeros(x.shape[:-1], dtype=bool)

    def switch_target(self, x):
        raise NotImplementedError

    def wrap(self, x):
        if not self.periodic:
            return x
        x = x.copy()
        for i in self.periodic:
            x[..., i] = np.mod(x[..., i], TWO_PI)
        return x

    def inv_lam(self, x):
        return np.linalg.inv(self.lam(x))

    def metric(self, x):
        lam = self.lam(x)
        return np.swapaxes(lam, -1, -2) @ lam


class AngleChart(Chart):
    """Product of ``n`` angle coordinates with the flat metric (circle, Clifford torus)."""

    def __init__(self, n):
        self.dim = n
        self.embed_dim = 2 * n
        self.periodic = tuple(range(n))

    def _zeros(self, x, *tail):
        return np.zeros(x.shape[:-1] + tail)

    def lam(self, x):
        return np.broadcast_to(np.eye(self.dim), x.shape[:-1] + (self.dim, self.dim)).copy()

    inv_lam = lam

    def dlam(self, x):
        n = self.dim
        return self._zeros(x, n, n, n)

    def conn(self, x):
        n = self.dim
        return self._zeros(x, n, n, n)

    def dconn(self, x):
        n = self.dim
        return self._zeros(x, n, n, n, n)

    def christoffel(self, x):
        n = self.dim
        return self._zeros(x, n, n, n)

    def embed(self, x):
        out = self._zeros(x, self.embed_dim)
        out[..., 0::2] = np.cos(x)
        out[..., 1::2] = np.sin(x)
        return out

    def jac(self, x):
        n = self.dim
        out = self._zeros(x, 2 * n, n)
        for i in range(n):
            out[..., 2 * i, i] = -np.sin(x[..., i])
            out[..., 2 * i + 1, i] = np.cos(x[..., i])
        return out

    def hess(self, x):
        n = self.dim
        out = self._zeros(x, 2 * n, n, n)
        for i in range(n):
            out[..., 2 * i, i, i] = -np.cos(x[..., i])
            out[..., 2 * i + 1, i, i] = -np.sin(x[..., i])
        return out

    def coords(self, X):
        return np.mod(np.arctan2(X[..., 1::2], X[..., 0::2]), TWO_PI)


class StereographicChart(Chart):
    """Stereographic chart of the unit sphere.

    ``sign=+1`` projects from the north pole (south pole at the origin),
    ``sign=-1`` from the south pole.  Metric ``4 delta / (1 + |z|^2)^2``,
    frame ``E_a = ((1 + |z|^2) / 2) d_a``.
    """

    dim = 2
    embed_dim = 3
    radius = 3.0

    def __init__(self, sign, other):
        self.sign = float(sign)
        self.other = other

    def in_domain(self, x):
        r2 = np.sum(x * x, axis=-1)
        return np.isfinite(r2) & (r2 < self.radius ** 2)

    def needs_switch(self, x, threshold):
        return np.sum(x * x, axis=-1) > threshold ** 2

    def switch_target(self, x):
        return np.full(x.shape[:-1], self.other)

    def _phi(self, x):
        return 2.0 / (1.0 + np.sum(x * x, axis=-1))

    def lam(self, x):
        return self._phi(x)[..., None, None] * np.eye(2)

    def inv_lam(self, x):
        return (1.0 / self._phi(x))[..., None, None] * np.eye(2)

    def dlam(self, x):
        phi = self._phi(x)
        dphi = -(phi * phi)[..., None] * x
        return np.einsum("ak,...i->...aki", np.eye(2), dphi)

    def conn(self, x):
        eye = np.eye(2)
        # A[a,b,c] = delta_bc z_a - delta_ab z_c
        return (np.einsum("bc,...a->...abc", eye, x)
                - np.einsum("ab,...c->...abc", eye, x))

    def dconn(self, x):
        eye = np.eye(2)
        d = np.einsum("bc,ai->abci", eye, eye) - np.einsum("ab,ci->abci", eye, eye)
        return np.broadcast_to(d, x.shape[:-1] + (2, 2, 2, 2)).copy()

    def christoffel(self, x):
        eye = np.eye(2)
        df = -self._phi(x)[..., None] * x
        return (np.einsum("ij,...k->...ijk", eye, df)
                + np.einsum("ik,...j->...ijk", eye, df)
                - np.einsum("jk,...i->...ijk", eye, df))

    def embed(self, x):
        q = 1.0 + np.sum(x * x, axis=-1)
        out = np.empty(x.shape[:-1] + (3,))
        out[..., :2] = 2.0 * x / q[..., None]
        out[..., 2] = self.sign * (1.0 - 2.0 / q)
        return out

    def jac(self, x):
        q = (1.0 + np.sum(x * x, axis=-1))[..., None, None]
        out = np.empty(x.shape[:-1] + (3, 2))
        out[..., :2, :] = 2.0 * np.eye(2) / q - 4.0 * x[..., :, None] * x[..., None, :] / q ** 2
        out[..., 2, :] = self.sign * 4.0 * x / q[..., 0] ** 2
        return out

    def hess(self, x):
        eye = np.eye(2)
        q = 1.0 + np.sum(x * x, axis=-1)
        q2 = (q ** 2)[..., None, None, None]
        q3 = (q ** 3)[..., None, None, None]
        zzz = x[..., :, None, None] * x[..., None, :, None] * x[..., None, None, :]
        t = (eye[:, :, None] * x[..., None, None, :] + eye[:, None, :] * x[..., None, :, None]
             + eye * x[..., :, None, None])
        out = np.empty(x.shape[:-1] + (3, 2, 2))
        out[..., :2, :, :] = -4.0 * t / q2 + 16.0 * zzz / q3
        zz = x[..., :, None] * x[..., None, :]
        out[..., 2, :, :] = self.sign * (4.0 * eye / q2[..., 0] - 16.0 * zz / q3[..., 0])
        return out

    def coords(self, X):
        return X[..., :2] / (1.0 - self.sign * X[..., 2])[..., None]


class PolarChart(Chart):
    """Spherical polar chart ``(theta, phi)`` with frame ``(d_theta, d_phi / sin theta)``."""

    dim = 2
    embed_dim = 3
    periodic = (1,)

    def __init__(self, north_target, south_target, min_sin=0.1):
        self.north_target = north_target
        self.south_target = south_target
        self.min_sin = min_sin

    def in_domain(self, x):
        th = x[..., 0]
        return np.isfinite(th) & np.isfinite(x[..., 1]) & (th > 0.0) & (th < np.pi)

    def needs_switch(self, x, threshold):
        return np.sin(x[..., 0]) < self.min_sin

    def switch_target(self, x):
        # near the north pole use the chart that maps it to the origin
        return np.where(x[..., 0] < 0.5 * np.pi, self.north_target, self.south_target)

    def lam(self, x):
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = np.sin(x[..., 0])
        return out

    def inv_lam(self, x):
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = 1.0 / np.sin(x[..., 0])
        return out

    def dlam(self, x):
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 1, 1, 0] = np.cos(x[..., 0])
        return out

    def conn(self, x):
        cot = 1.0 / np.tan(x[..., 0])
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, 1, 1] = -cot
        out[..., 1, 1, 0] = cot
        return out

    def dconn(self, x):
        csc2 = 1.0 / np.sin(x[..., 0]) ** 2
        out = np.zeros(x.shape[:-1] + (2, 2, 2, 2))
        out[..., 0, 1, 1, 0] = csc2
        out[..., 1, 1, 0, 0] = -csc2
        return out

    def christoffel(self, x):
        s, c = np.sin(x[..., 0]), np.cos(x[..., 0])
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, 1, 1] = -s * c
        out[..., 1, 0, 1] = c / s
        out[..., 1, 1, 0] = c / s
        return out

    def embed(self, x):
        th, ph = x[..., 0], x[..., 1]
        st = np.sin(th)
        return np.stack([st * np.cos(ph), st * np.sin(ph), np.cos(th)], axis=-1)

    def jac(self, x):
        th, ph = x[..., 0], x[..., 1]
        st, ct, sp, cp = np.sin(th), np.cos(th), np.sin(ph), np.cos(ph)
        out = np.zeros(x.shape[:-1] + (3, 2))
        out[..., 0, 0], out[..., 1, 0], out[..., 2, 0] = ct * cp, ct * sp, -st
        out[..., 0, 1], out[..., 1, 1] = -st * sp, st * cp
        return out

    def hess(self, x):
        th, ph = x[..., 0], x[..., 1]
        st, ct, sp, cp = np.sin(th), np.cos(th), np.sin(ph), np.cos(ph)
        out = np.zeros(x.shape[:-1] + (3, 2, 2))
        out[..., 0, 0, 0], out[..., 1, 0, 0], out[..., 2, 0, 0] = -st * cp, -st * sp, -ct
        out[..., 0, 0, 1] = out[..., 0, 1, 0] = -ct * sp
        out[..., 1, 0, 1] = out[..., 1, 1, 0] = ct * cp
        out[..., 0, 1, 1], out[..., 1, 1, 1] = -st * cp, -st * sp
        return out

    def coords(self, X):
        th = np.arctan2(np.hypot(X[..., 0], X[..., 1]), X[..., 2])
        ph = np.mod(np.arctan2(X[..., 1], X[..., 0]), TWO_PI)
        return np.stack([th, ph], axis=-1)


# ---------------------------------------------------------------------------
# manifolds


class Manifold:
    """A compact Riemannian manifold given by an atlas of :class:`Chart` objects.

    Instances are immutable after construction.
    """

    name: str = ""
    charts: tuple = ()
    default_chart: int = 0
    switch_threshold: float = np.inf
    flat: bool = False

    @property
    def dim(self):
        return self.charts[0].dim

    @property
    def embed_dim(self):
        return self.charts[0].embed_dim

    def _eval(self, method, chart, x):
        chart = np.asarray(chart)
        x = np.asarray(x, dtype=float)
        if len(self.charts) == 1:
            return getattr(self.charts[0], method)(x)
        ids = np.unique(chart)
        if ids.size == 1:
            return getattr(self.charts[int(ids[0])], method)(x)
        out = None
        for c in ids:
            mask = chart == c
            val = getattr(self.charts[int(c)], method)(x[mask])
            if out is None:
                out = np.empty(x.shape[:-1] + val.shape[1:], dtype=val.dtype)
            out[mask] = val
        return out

    # per-chart quantities -------------------------------------------------
    def lam(self, chart, x):
        return self._eval("lam", chart, x)

    def inv_lam(self, chart, x):
        return self._eval("inv_lam", chart, x)

    def dlam(self, chart, x):
        return self._eval("dlam", chart, x)

    def conn(self, chart, x):
        return self._eval("conn", chart, x)

    def dconn(self, chart, x):
        return self._eval("dconn", chart, x)

    def christoffel(self, chart, x):
        return self._eval("christoffel", chart, x)

    def metric(self, chart, x):
        return self._eval("metric", chart, x)

    def inverse_metric(self, chart, x):
        return np.linalg.inv(self.metric(chart, x))

    def embed(self, chart, x):
        return self._eval("embed", chart, x)

    def embed_jacobian(self, chart, x):
        return self._eval("jac", chart, x)

    def embed_hessian(self, chart, x):
        return self._eval("hess", chart, x)

    def in_domain(self, chart, x):
        return self._eval("in_domain", chart, x)

    def wrap(self, chart, x):
        return self._eval("wrap", chart, x)

    def frame_vectors(self, chart, x):
        """Embedded orthonormal chart frame, shape ``(..., d, n)``; column ``a`` is ``E_a``."""
        return self.embed_jacobian(chart, x) @ self.inv_lam(chart, x)

    def frame_vectors_derivative(self, chart, x):
        """``d/dx^i`` of the embedded chart frame, shape ``(..., d, n, i)``."""
        jac = self.embed_jacobian(chart, x)
        hess = self.embed_hessian(chart, x)
        li = self.inv_lam(chart, x)
        dl = self.dlam(chart, x)
        # d(J L^-1) = H L^-1 - J L^-1 dL L^-1
        li_ = li[..., None, :, :]
        t1 = np.moveaxis(hess, -1, -3) @ li_
        dli = -li_ @ np.moveaxis(dl, -1, -3) @ li_
        return np.moveaxis(t1 + jac[..., None, :, :] @ dli, -3, -1)

    def coords_from_embedded(self, chart, X):
        return self._eval("coords", chart, X)

    def check_domain(self, chart, x):
        ok = self.in_domain(chart, x)
        if not np.all(ok):
            raise DomainError(f"{self.name}: point outside chart domain")

    def needs_switch(self, chart, x, threshold=None):
        threshold = self.switch_threshold if threshold is None else threshold
        chart = np.asarray(chart)
        out = np.zeros(chart.shape, dtype=bool)
        for c in np.unique(chart):
            mask = chart == c
            out[mask] = self.charts[int(c)].needs_switch(x[mask], threshold)
        return out

    def switch_target(self, chart, x):
        return self._eval("switch_target", chart, x)

    def distance(self, X1, X2):
        raise NotImplementedError

    def sample_points(self, rng, size, chart=None):
        """Random chart points (embedding-uniform where convenient)."""
        raise NotImplementedError


class Circle(Manifold):
    name = "circle"
    flat = True

    def __init__(self):
        self.charts = (AngleChart(1),)

    def distance(self, X1, X2):
        a1 = np.arctan2(X1[..., 1], X1[..., 0])
        a2 = np.arctan2(X2[..., 1], X2[..., 0])
        return np.abs(np.mod(a1 - a2 + np.pi, TWO_PI) - np.pi)

    def sample_points(self, rng, size, chart=0):
        x = rng.uniform(0.0, TWO_PI, size=(size, 1))
        return ChartPoint(np.zeros(size, dtype=int), x)


class FlatTorus(Manifold):
    """Flat 2-torus ``[0, 2 pi)^2``, embedded isometrically (Clifford torus in R^4)."""

    name = "torus2"
    flat = True

    def __init__(self):
        self.charts = (AngleChart(2),)

    def distance(self, X1, X2):
        a1 = np.arctan2(X1[..., 1::2], X1[..., 0::2])
        a2 = np.arctan2(X2[..., 1::2], X2[..., 0::2])
        d = np.abs(np.mod(a1 - a2 + np.pi, TWO_PI) - np.pi)
        return np.sqrt(np.sum(d * d, axis=-1))

    def sample_points(self, rng, size, chart=0):
        x = rng.uniform(0.0, TWO_PI, size=(size, 2))
        return ChartPoint(np.zeros(size, dtype=int), x)


class Sphere(Manifold):
    """Unit 2-sphere.

    Charts: 0 and 1 are stereographic projections from the north and south
    pole (switching when ``|z| > switch_threshold``), 2 is spherical polar
    ``(theta, phi)``, used on request and left for a stereographic chart
    near the poles.
    """

    name = "sphere2"
    NORTH, SOUTH, POLAR = 0, 1, 2

    def __init__(self, switch_threshold=2.0):
        self.switch_threshold = float(switch_threshold)
        self.charts = (StereographicChart(+1, 1), StereographicChart(-1, 0),
                       PolarChart(north_target=1, south_target=0))

    def distance(self, X1, X2):
        return np.arccos(np.clip(np.sum(X1 * X2, axis=-1), -1.0, 1.0))

    def sample_points(self, rng, size, chart=0):
        X = rng.standard_normal((size, 3))
        X /= np.linalg.norm(X, axis=-1, keepdims=True)
        charts = np.full(size, chart)
        if chart in (self.NORTH, self.SOUTH):
            # keep samples inside the switching radius of the requested chart
            bad = (1.0 - self.charts[chart].sign * X[:, 2]) < 0.2
            X[bad, 2] *= -1.0
        elif chart == self.POLAR:
            bad = np.hypot(X[:, 0], X[:, 1]) < 0.2
            X[bad] = np.array([1.0, 0.0, 0.0])
        return ChartPoint(charts, self.coords_from_embedded(charts, X))


MANIFOLDS = {"circle": Circle, "torus2": FlatTorus, "sphere2": Sphere}


def get_manifold(name, **kwargs) -> Manifold:
    try:
        return MANIFOLDS[name](**kwargs)
    except KeyError:
        raise KeyError(f"unknown manifold {name!r}; choose from {sorted(MANIFOLDS)}") from None


# ---------------------------------------------------------------------------
# operations


def orthonormalize(h):
    """Nearest orthogonal matrix (polar factor) of ``h``, batched."""
    h = np.asarray(h, dtype=float)
    u, s, vt = np.linalg.svd(h)
    if np.any(s[..., -1] <= 1e-12 * np.maximum(s[..., 0], 1e-300)):
        raise np.linalg.LinAlgError("orthonormalize: singular frame matrix")
    return u @ vt


def reorthonormalize(h, tol=1e-15, max_iter=6):
    """Polar factor of a nearly orthogonal ``h`` by Newton-Schulz iteration.

    Each iteration ``h <- h (3 I - h^T h) / 2`` commutes with right
    multiplication by orthogonal matrices.  Falls back to
    :func:`orthonormalize` if the iteration has not converged.
    """
    h = np.asarray(h, dtype=float)
    eye = np.eye(h.shape[-1])
    for _ in range(max_iter):
        err = np.swapaxes(h, -1, -2) @ h - eye
        if np.max(np.abs(err), initial=0.0) <= tol:
            return h
        if np.max(np.abs(err)) > 0.5:
            break
        h = h - 0.5 * h @ err
    err = np.swapaxes(h, -1, -2) @ h - eye
    if np.max(np.abs(err), initial=0.0) <= 1e-14:
        return h
    return orthonormalize(h)


def _omega(conn, w):
    """Rotation generator ``Omega[a, c] = -w^b conn[a, b, c]`` of the frame along ``w``."""
    n = w.shape[-1]
    cr = np.swapaxes(conn, -3, -2).reshape(conn.shape[:-3] + (n, n * n))
    return -(w[..., None, :] @ cr).reshape(w.shape[:-1] + (n, n))


def horizontal_field(M: Manifold, u: FrameBundlePoint, v, geometry=None) -> FrameTangent:
    """Evaluate ``H_v(u)`` in chart form.

    ``dx = lam^{-1} h v`` and ``dh = Omega h`` with
    ``Omega[a, c] = -(h v)^b conn[a, b, c]``.  ``v`` has shape
    ``batch + (n,)`` (or broadcastable to it).
    """
    if geometry is None:
        M.check_domain(u.chart, u.x)
        li, conn = M.inv_lam(u.chart, u.x), M.conn(u.chart, u.x)
    else:
        li, conn = geometry
    v = np.asarray(v, dtype=float)
    w = (u.h @ v[..., None])[..., 0]
    dx = (li @ w[..., None])[..., 0]
    dh = _omega(conn, w) @ u.h
    return FrameTangent(dx, dh)


def horizontal_frame(M: Manifold, u: FrameBundlePoint, geometry=None):
    """All basis fields ``H_xi(u)`` at once.

    Returns ``(dx, dh)`` with shapes ``batch + (n, n)`` and
    ``batch + (n, n, n)``; the last axis of ``dx`` and the first
    non-batch axis of ``dh`` index ``xi``.
    """
    if geometry is None:
        li, conn = M.inv_lam(u.chart, u.x), M.conn(u.chart, u.x)
    else:
        li, conn = geometry
    dx = li @ u.h
    # Omega_xi[a, c] = -h[b, xi] conn[a, b, c]
    om = -np.einsum("...bx,...abc->...xac", u.h, conn)
    dh = om @ u.h[..., None, :, :]
    return dx, dh


def right_translate(u: FrameBundlePoint, g) -> FrameBundlePoint:
    return FrameBundlePoint(u.chart, u.x, u.h @ g)


def chart_transition(M: Manifold, u: FrameBundlePoint, target) -> FrameBundlePoint:
    """Re-express ``u`` in chart ``target`` (broadcast over the batch)."""
    target = np.broadcast_to(np.asarray(target, dtype=int), u.chart.shape)
    M.check_domain(u.chart, u.x)
    X = M.embed(u.chart, u.x)
    x_new = M.coords_from_embedded(target, X)
    if not np.all(M.in_domain(target, x_new)):
        raise DomainError(f"{M.name}: point is not in the overlap with the target chart")
    e_old = M.frame_vectors(u.chart, u.x)
    e_new = M.frame_vectors(target, x_new)
    rot = np.swapaxes(e_new, -1, -2) @ e_old
    return FrameBundlePoint(target.copy(), x_new, rot @ u.h)


def transition_differential(M: Manifold, u: FrameBundlePoint, target, t: FrameTangent):
    """Push a tangent vector at ``u`` through the chart change to ``target``."""
    target = np.broadcast_to(np.asarray(target, dtype=int), u.chart.shape)
    X = M.embed(u.chart, u.x)
    x_new = M.coords_from_embedded(target, X)
    jac_old = M.embed_jacobian(u.chart, u.x)
    jac_new = M.embed_jacobian(target, x_new)
    dX = np.einsum("...di,...i->...d", jac_old, t.dx)
    # jac_new is injective; coordinate velocity by least squares (exact for tangent dX)
    dx_new = np.einsum("...id,...d->...i", np.linalg.pinv(jac_new), dX)
    e_old = M.frame_vectors(u.chart, u.x)
    e_new = M.frame_vectors(target, x_new)
    de_old = np.einsum("...dai,...i->...da", M.frame_vectors_derivative(u.chart, u.x), t.dx)
    de_new = np.einsum("...dai,...i->...da", M.frame_vectors_derivative(target, x_new), dx_new)
    rot = np.swapaxes(e_new, -1, -2) @ e_old
    drot = np.swapaxes(de_new, -1, -2) @ e_old + np.swapaxes(e_new, -1, -2) @ de_old
    return FrameTangent(dx_new, drot @ u.h + rot @ t.dh)


def embed_frame(M: Manifold, u: FrameBundlePoint):
    """Embedding of F_O(M) used for distances: position then frame vectors ``u(e_a)``."""
    X = M.embed(u.chart, u.x)
    frame = M.frame_vectors(u.chart, u.x) @ u.h
    flat = np.swapaxes(frame, -1, -2).reshape(frame.shape[:-2] + (-1,))
    return np.concatenate([X, flat], axis=-1)


def frame_distance(M: Manifold, u1: FrameBundlePoint, u2: FrameBundlePoint):
    """Chordal distance between frame-bundle points through :func:`embed_frame`."""
    return np.linalg.norm(embed_frame(M, u1) - embed_frame(M, u2), axis=-1)


def geodesic_distance(M: Manifold, x1: ChartPoint, x2: ChartPoint):
    M.check_domain(x1.chart, x1.coords)
    M.check_domain(x2.chart, x2.coords)
    return M.distance(M.embed(x1.chart, x1.coords), M.embed(x2.chart, x2.coords))


def central_difference(fn, x, step=None):
    """Central finite-difference Jacobian of ``fn`` w.r.t. the last axis of ``x``.

    The derivative index is appended as the last output axis.  Default step
    is ``1e-5 * (1 + |x|)``.
    """
    x = np.asarray(x, dtype=float)
    if step is None:
        step = 1e-5 * (1.0 + np.linalg.norm(x, axis=-1))
    step = np.asarray(step, dtype=float)
    cols = []
    for i in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[i] = 1.0
        dxv = step[..., None] * e
        fp, fm = fn(x + dxv), fn(x - dxv)
        s = step.reshape(step.shape + (1,) * (np.ndim(fp) - step.ndim))
        cols.append((fp - fm) / (2.0 * s))
    return np.stack(cols, axis=-1)
