"""Small dense matrix kernels: matrix exponential, Lyapunov solve, G kernel.

Every routine accepts a single ``(n, n)`` matrix or a stack ``(..., n, n)``
and works entry-wise over the leading axes, so a whole ensemble of paths can
be handled with one call.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "LinalgError",
    "StabilityError",
    "matrix_exp",
    "lyapunov_solve",
    "g_kernel",
    "g_contract",
    "l_matrix",
    "sym_part",
    "min_sym_eig",
    "spd_sqrt",
]


class LinalgError(ValueError):
    pass


class StabilityError(LinalgError):
    """Raised when the symmetric part of a drag matrix is not positive definite."""


# Higham (2005) degree-13 Pade coefficients and its scaling threshold.
_PADE13 = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
])
_THETA13 = 5.371920351148152


def sym_part(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def min_sym_eig(a):
    """Smallest eigenvalue of the symmetric part of ``a`` (batched)."""
    return np.linalg.eigvalsh(sym_part(np.asarray(a, dtype=float)))[..., 0]


def matrix_exp(a):
    """Matrix exponential by scaling and squaring around a [13/13] Pade core.

    Parameters
    ----------
    a : array_like, shape (..., n, n)

    Returns
    -------
    ndarray of the same shape.

    Raises
    ------
    LinalgError
        If the input is not finite or the result overflows.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise LinalgError(f"matrix_exp needs square matrices, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise LinalgError("matrix_exp: non-finite input")
    n = a.shape[-1]
    norm1 = np.abs(a).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        s = np.where(norm1 > _THETA13, np.ceil(np.log2(norm1 / _THETA13)), 0.0)
    s = s.astype(int)
    a = a / (2.0 ** s)[..., None, None]

    b = _PADE13 / _PADE13[0]          # b[0] = 1 keeps exp(0) exactly I
    eye = np.broadcast_to(np.eye(n), a.shape)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
             + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * eye)
    v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
         + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * eye)
    r = np.linalg.solve(v - u, v + u)

    smax = int(s.max()) if s.size else int(s)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(smax):
            mask = s > k
            if r.ndim == 2:
                r = r @ r
            else:
                r[mask] = r[mask] @ r[mask]
    if not np.all(np.isfinite(r)):
        raise LinalgError("matrix_exp: overflow")
    return r


def _kron_sum(gamma):
    """The operator J -> gamma J + J gamma^T as an (n^2, n^2) matrix (row-major vec)."""
    n = gamma.shape[-1]
    eye = np.eye(n)
    # (gamma J)[a,b] = gamma[a,c] J[c,b];  (J gamma^T)[a,b] = J[a,d] gamma[b,d]
    left = gamma[..., :, None, :, None] * eye[:, None, :]
    right = eye[:, None, :, None] * gamma[..., None, :, None, :]
    return (left + right).reshape(gamma.shape[:-2] + (n * n, n * n))


def _check_stable(gamma):
    lam = min_sym_eig(gamma)
    if np.any(lam <= 0.0):
        raise StabilityError(
            f"symmetric part of gamma is not positive definite (min eigenvalue {np.min(lam):.3g})")


def lyapunov_solve(gamma, sigma, check=True):
    """Solve ``gamma J + J gamma^T = Sigma`` for ``J``.

    The system has at most nine unknowns in this package, so the Kronecker
    form is solved directly.

    Parameters
    ----------
    gamma : array_like, shape (..., n, n)
        Drag matrix whose symmetric part must be positive definite.
    sigma : array_like, shape (..., n, n)
        Right-hand side; symmetric in all intended uses.
    check : bool
        Verify the stability precondition first.

    Returns
    -------
    J : ndarray, shape (..., n, n)
    """
    gamma = np.asarray(gamma, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if check:
        _check_stable(gamma)
    n = gamma.shape[-1]
    shape = np.broadcast_shapes(gamma.shape, sigma.shape)
    gamma = np.broadcast_to(gamma, shape)
    rhs = np.broadcast_to(sigma, shape).reshape(shape[:-2] + (n * n, 1))
    j = np.linalg.solve(_kron_sum(gamma), rhs).reshape(shape)
    if np.allclose(sigma, np.swapaxes(sigma, -1, -2), rtol=0, atol=0):
        j = sym_part(j)
    return j


def g_kernel(gamma, check=True):
    """Four-index kernel ``G[nu, mu, eta, xi] = int_0^inf e^{-y gamma}[nu, eta] e^{-y gamma}[mu, xi] dy``.

    Contracting the last two indices against a matrix ``X`` gives the
    Lyapunov solution with right-hand side ``X``.
    """
    gamma = np.asarray(gamma, dtype=float)
    if check:
        _check_stable(gamma)
    n = gamma.shape[-1]
    g = np.linalg.inv(_kron_sum(gamma))
    return g.reshape(gamma.shape[:-2] + (n, n, n, n))


def g_contract(g, x):
    """``(G x)^{nu mu} = G^{nu mu}_{eta xi} x^{eta xi}``."""
    n = g.shape[-1]
    flat = g.reshape(g.shape[:-4] + (n * n, n * n)) @ x.reshape(x.shape[:-2] + (n * n, 1))
    return flat.reshape(flat.shape[:-2] + (n, n))


def l_matrix(gamma, j):
    """``L = gamma^{-1} J gamma^T``."""
    gamma = np.asarray(gamma, dtype=float)
    try:
        ginv = np.linalg.inv(gamma)
    except np.linalg.LinAlgError as exc:
        raise LinalgError("l_matrix: singular gamma") from exc
    return ginv @ j @ np.swapaxes(gamma, -1, -2)


def spd_sqrt(a, clip=True):
    """Symmetric square root of a symmetric positive semi-definite matrix.

    Small negative eigenvalues produced by cancellation are clipped to zero
    when ``clip`` is set.
    """
    a = sym_part(np.asarray(a, dtype=float))
    w, q = np.linalg.eigh(a)
    if clip:
        w = np.clip(w, 0.0, None)
    elif np.any(w < 0):
        raise LinalgError("spd_sqrt: matrix is not positive semi-definite")
    return (q * np.sqrt(w)[..., None, :]) @ np.swapaxes(q, -1, -2)
