"""Closed-form linear algebra for 2x2 real matrices.

Everything here works on plain ``(2, 2)`` arrays and avoids LAPACK so the
results are exact up to rounding of a handful of flops. ``numpy.linalg``
is used only by the tests, as an independent oracle.
"""

import math

import numpy as np


def sym_eigvals(a, b, d):
    """Eigenvalues ``(lo, hi)`` of the symmetric matrix ``[[a, b], [b, d]]``."""
    mean = 0.5 * (a + d)
    radius = math.hypot(0.5 * (a - d), b)
    return mean - radius, mean + radius


def gram_eigvals(M):
    """Eigenvalues of ``M.T @ M`` in ascending order."""
    (m11, m12), (m21, m22) = M
    a = m11 * m11 + m21 * m21
    b = m11 * m12 + m21 * m22
    d = m12 * m12 + m22 * m22
    return sym_eigvals(a, b, d)


def singular_values(M):
    """Singular values ``(s_max, s_min)`` of a 2x2 matrix.

    Splits M into a scaled rotation plus a scaled reflection; with
    e=(m11+m22)/2, f=(m11-m22)/2, g=(m21+m12)/2, h=(m21-m12)/2 the singular
    values are hypot(e, h) + hypot(f, g) and |hypot(e, h) - hypot(f, g)|.
    """
    (m11, m12), (m21, m22) = M
    e = 0.5 * (m11 + m22)
    f = 0.5 * (m11 - m22)
    g = 0.5 * (m21 + m12)
    h = 0.5 * (m21 - m12)
    q = math.hypot(e, h)
    r = math.hypot(f, g)
    return q + r, abs(q - r)


def spectral_norm(M):
    return singular_values(M)[0]


def svd(M):
    """Full SVD ``M = U @ diag(s) @ Vt`` with ``s`` descending.

    U and Vt are orthogonal (possibly reflections); s is non-negative.
    """
    (m11, m12), (m21, m22) = M
    e = 0.5 * (m11 + m22)
    f = 0.5 * (m11 - m22)
    g = 0.5 * (m21 + m12)
    h = 0.5 * (m21 - m12)
    q = math.hypot(e, h)
    r = math.hypot(f, g)
    a1 = math.atan2(g, f)
    a2 = math.atan2(h, e)
    theta = 0.5 * (a2 - a1)
    phi = 0.5 * (a2 + a1)
    s1 = q + r
    s2 = q - r
    sign = 1.0
    if s2 < 0.0:
        s2 = -s2
        sign = -1.0
    cp, sp = math.cos(phi), math.sin(phi)
    ct, st = math.cos(theta), math.sin(theta)
    U = np.array([[cp, -sp], [sp, cp]])
    Vt = np.array([[ct, -st], [sign * st, sign * ct]])
    return U, np.array([s1, s2]), Vt


def project_spectral_ball(M, radius):
    """Frobenius-nearest matrix with spectral norm at most ``radius``.

    Clips the singular values; returns ``M`` unchanged (same values) when it
    is already inside the ball.
    """
    M = np.asarray(M, dtype=float)
    if spectral_norm(M) <= radius:
        return M.copy()
    U, s, Vt = svd(M)
    s = np.minimum(s, radius)
    return (U * s) @ Vt


def is_positive_definite(S, tol=0.0):
    """Cholesky test for a symmetric matrix of any size.

    Returns False on the first pivot that is not greater than ``tol``.
    """
    S = np.array(S, dtype=float)
    n = S.shape[0]
    Lc = np.zeros_like(S)
    for j in range(n):
        pivot = S[j, j] - Lc[j, :j] @ Lc[j, :j]
        if not pivot > tol:
            return False
        Lc[j, j] = math.sqrt(pivot)
        for i in range(j + 1, n):
            Lc[i, j] = (S[i, j] - Lc[i, :j] @ Lc[j, :j]) / Lc[j, j]
    return True
