"""Independent reference solutions used to validate the solvers.

Everything here is derived by separation of variables or brute-force
quadrature, deliberately sharing no code path with the package internals.
"""

from __future__ import annotations

import numpy as np
from scipy import special as sp

# 2D far-field conventions, restated independently:
#   outgoing mode H^(1)_n(kr) e^{in phi}  ->  gamma_n e^{in phi},
#   gamma_n = sqrt(2/(pi k)) e^{-i(n pi/2 + pi/4)}


def mode_gamma(n, k):
    return np.sqrt(2.0 / (np.pi * k)) * np.exp(-1j * (abs(n) * np.pi / 2 + np.pi / 4))


def _orders(k, radius, extra=25):
    return int(np.ceil(k * radius)) + extra


def _polar(points, center=(0.0, 0.0)):
    pts = np.atleast_2d(np.asarray(points, float)) - np.asarray(center, float)
    return np.hypot(pts[:, 0], pts[:, 1]), np.arctan2(pts[:, 1], pts[:, 0])


def _mie_coeffs(k, a, kind, eta=None, nmax=None):
    """Scattering coefficients c_n so that
    u^s = sum_n c_n i^n H_n(k r) e^{i n (theta - theta_d)}."""
    if nmax is None:
        nmax = _orders(k, a)
    n = np.arange(0, nmax + 1)
    ka = k * a
    jn = sp.jv(n, ka)
    jnp = sp.jvp(n, ka)
    hn = sp.hankel1(n, ka)
    hnp = sp.h1vp(n, ka)
    if kind == "soft":
        c = -jn / hn
    elif kind == "hard":
        c = -jnp / hnp
    elif kind == "impedance":
        c = -(k * jnp + eta * jn) / (k * hnp + eta * hn)
    else:
        raise ValueError(kind)
    return c  # index 0..nmax; use symmetry c_{-n} = c_n


def mie_scattered(k, a, points, d_angle, kind="soft", eta=None, center=(0.0, 0.0)):
    """Scattered field of a plane wave e^{ik x.d} by a circle of radius a."""
    c = _mie_coeffs(k, a, kind, eta)
    r, th = _polar(points, center)
    rel = th - d_angle
    out = c[0] * sp.hankel1(0, k * r)
    for n in range(1, len(c)):
        out = out + c[n] * (1j**n) * sp.hankel1(n, k * r) * 2.0 * np.cos(n * rel)
    if center != (0.0, 0.0):
        d = np.array([np.cos(d_angle), np.sin(d_angle)])
        out = out * np.exp(1j * k * (np.asarray(center) @ d))
    return out


def mie_total(k, a, points, d_angle, kind="soft", eta=None, center=(0.0, 0.0)):
    pts = np.atleast_2d(np.asarray(points, float))
    d = np.array([np.cos(d_angle), np.sin(d_angle)])
    return np.exp(1j * k * (pts @ d)) + mie_scattered(k, a, points, d_angle, kind, eta, center)


def mie_farfield(k, a, angles, d_angle, kind="soft", eta=None, center=(0.0, 0.0)):
    """Far field of the Mie series, u_inf(phi) with the sqrt(|x|) convention."""
    c = _mie_coeffs(k, a, kind, eta)
    angles = np.atleast_1d(np.asarray(angles, float))
    rel = angles - d_angle
    out = c[0] * mode_gamma(0, k) * np.ones_like(rel, dtype=complex)
    for n in range(1, len(c)):
        out = out + c[n] * (1j**n) * mode_gamma(n, k) * 2.0 * np.cos(n * rel)
    if center != (0.0, 0.0):
        z = np.asarray(center, float)
        d = np.array([np.cos(d_angle), np.sin(d_angle)])
        xh = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        out = out * np.exp(1j * k * (z @ d)) * np.exp(-1j * k * (xh @ z))
    return out


def mie_point_source_total_farfield(k, a, angles, source, kind="soft"):
    """Far field of the total field w(., y) = Phi(., y) + w^s(., y) for a
    point source at y scattering off the circle of radius a at the origin.

    Phi(x, y) = (i/4) sum_n H_n(k r_>) J_n(k r_<) e^{in(phi_x - phi_y)} gives the
    incident modes; the sound-soft circle reflects with -J_n(ka)/H_n(ka).
    """
    angles = np.atleast_1d(np.asarray(angles, float))
    ry, phiy = _polar([source])
    ry, phiy = ry[0], phiy[0]
    c = _mie_coeffs(k, a, kind)
    nmax = len(c) - 1
    gamma = np.exp(1j * np.pi / 4) / np.sqrt(8 * np.pi * k)
    xh = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    out = gamma * np.exp(-1j * k * (xh @ np.asarray(source, float)))
    for n in range(-nmax, nmax + 1):
        amp = 0.25j * sp.hankel1(abs(n), k * ry) * c[abs(n)]
        out = out + amp * mode_gamma(n, k) * np.exp(1j * n * (angles - phiy))
    return out


def transmission_disk_coeffs(k, a, n0, nmax=None):
    """Exterior coefficients b_n for the penetrable disk (index n0 inside r<a):
    u_out = sum i^n [J_n(kr) + b_n H_n(kr)] e^{in th_rel}, continuity of u, u_r."""
    if nmax is None:
        nmax = _orders(k, a)
    k1 = k * np.sqrt(n0)
    n = np.arange(0, nmax + 1)
    jn_k = sp.jv(n, k * a)
    jnp_k = sp.jvp(n, k * a)
    hn_k = sp.hankel1(n, k * a)
    hnp_k = sp.h1vp(n, k * a)
    jn_k1 = sp.jv(n, k1 * a)
    jnp_k1 = sp.jvp(n, k1 * a)
    # [H_n(ka), -J_n(k1 a); k H'_n(ka), -k1 J'_n(k1 a)] [b_n; a_n] = -[J_n, k J'_n]
    det = hn_k * (-k1 * jnp_k1) - (-jn_k1) * k * hnp_k
    b = (-jn_k * (-k1 * jnp_k1) - (-jn_k1) * (-k * jnp_k)) / det
    return b


def transmission_disk_farfield(k, a, n0, angles, d_angle):
    b = transmission_disk_coeffs(k, a, n0)
    angles = np.atleast_1d(np.asarray(angles, float))
    rel = angles - d_angle
    out = b[0] * mode_gamma(0, k) * np.ones_like(rel, dtype=complex)
    for n in range(1, len(b)):
        out = out + b[n] * (1j**n) * mode_gamma(n, k) * 2.0 * np.cos(n * rel)
    return out


def transmission_disk_total(k, a, n0, points, d_angle):
    """Total field of the penetrable disk, valid inside and outside r = a."""
    b = transmission_disk_coeffs(k, a, n0)
    k1 = k * np.sqrt(n0)
    nmax = len(b) - 1
    n = np.arange(0, nmax + 1)
    a_int = (sp.jv(n, k * a) + b * sp.hankel1(n, k * a)) / sp.jv(n, k1 * a)
    r, th = _polar(points)
    rel = th - d_angle
    out = np.zeros(r.shape, dtype=complex)
    inside = r < a
    for m in range(0, nmax + 1):
        mult = 1.0 if m == 0 else 2.0 * np.cos(m * rel)
        term = np.where(inside,
                        a_int[m] * sp.jv(m, k1 * r),
                        sp.jv(m, k * r) + b[m] * sp.hankel1(m, k * r))
        out = out + (1j**m) * mult * term
    return out


def born_scattered(medium, k, d_angle, points):
    """First Born approximation k^2 int Phi(x,y) (n-1) u^i(y) dy by midpoint
    quadrature over the medium grid; a coinciding cell is integrated over the
    equal-area disk (int_0^R H0(kr) r dr = [R H1(kR) + 2i/(pi k)] / k)."""
    X, Y = medium.cell_centers()
    m = medium.contrast().ravel()
    centers = np.stack([X.ravel(), Y.ravel()], axis=-1)
    d = np.array([np.cos(d_angle), np.sin(d_angle)])
    ui = np.exp(1j * k * (centers @ d))
    pts = np.atleast_2d(np.asarray(points, float))
    r = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=-1)
    self_cell = r < medium.cell / 4.0
    phi = 0.25j * sp.hankel1(0, k * np.where(self_cell, 1.0, r)) * medium.cell**2
    r_eq = medium.cell / np.sqrt(np.pi)
    phi[self_cell] = 0.25j * 2 * np.pi * (r_eq * sp.hankel1(1, k * r_eq)
                                          + 2j / (np.pi * k)) / k
    return k**2 * phi @ (m * ui)


def curve_self_intersects(curve, samples=2048):
    """Brute-force pairwise segment intersection scan of the sampled curve."""
    t = np.linspace(0, 2 * np.pi, samples, endpoint=False)
    p = curve.point(t)
    q = np.roll(p, -1, axis=0)
    for i in range(samples):
        a, b = p[i], q[i]
        js = np.arange(samples)
        keep = (js != i) & (js != (i - 1) % samples) & (js != (i + 1) % samples)
        c, d = p[keep], q[keep]
        d1 = _cross(b - a, c - a) * _cross(b - a, d - a)
        d2 = (_cross(d - c, a - c) * _cross(d - c, b - c))
        if np.any((d1 < 0) & (d2 < 0)):
            return True
    return False


def _cross(u, v):
    u = np.atleast_2d(u)
    v = np.atleast_2d(v)
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def bessel_j_series(order, x, terms=50, dps=40):
    """Power-series evaluation of J_order(x) in arbitrary precision (mpmath)."""
    import mpmath as mp
    with mp.workdps(dps):
        x = mp.mpf(x)
        total = mp.mpf(0)
        for m in range(terms):
            total += (-1) ** m * (x / 2) ** (2 * m + order) / (
                mp.factorial(m) * mp.factorial(m + order))
        return float(total)


def first_j0_zero(lo=2.0, hi=3.0, tol=1e-13):
    """First positive zero of J0 by bisection on the series oracle."""
    flo = bessel_j_series(0, lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fmid = bessel_j_series(0, mid)
        if flo * fmid <= 0:
            hi = mid
        else:
            lo, flo = mid, fmid
    return 0.5 * (lo + hi)
