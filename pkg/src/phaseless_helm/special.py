"""Bessel/Hankel evaluations and the 2D outgoing-wave conventions.

Every kernel in the workbench is expressed through the functions here:

    fundamental solution   Phi(x, y) = (i/4) H0^(1)(k|x - y|)
    far-field normalizer   gamma(k)  = e^{i pi/4} / sqrt(8 pi k)
    outgoing-mode pattern  H_|n|^(1)(kr) e^{i n phi}  ->  gamma_n(k) e^{i n phi}
                           with gamma_n(k) = sqrt(2/(pi k)) e^{-i(|n| pi/2 + pi/4)}

so that any radiating field behaves as

    u^s(x) = (e^{ik|x|} / sqrt(|x|)) (u_inf(x_hat) + O(1/|x|)).

Scalar wrappers validate the supported argument range; vectorized code in the
solver modules calls scipy.special directly under the same conventions.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp

from .errors import DomainError, SingularityError

EULER_GAMMA = 0.5772156649015328606

MAX_ORDER = 60
MAX_ARGUMENT = 1.0e4


def _check_order(order) -> int:
    if not float(order).is_integer():
        raise DomainError(f"order must be an integer, got {order!r}")
    order = int(order)
    if order < 0 or order > MAX_ORDER:
        raise DomainError(f"order {order} outside supported range [0, {MAX_ORDER}]")
    return order


def bessel_j(order: int, x: float) -> float:
    """Bessel function of the first kind J_order(x), order in [0, 60], x in [0, 1e4]."""
    order = _check_order(order)
    x = float(x)
    if x < 0.0 or x > MAX_ARGUMENT:
        raise DomainError(f"argument {x} outside supported range [0, {MAX_ARGUMENT}]")
    return float(_sp.jv(order, x))


def bessel_y(order: int, x: float) -> float:
    """Bessel function of the second kind Y_order(x), x in (0, 1e4]."""
    order = _check_order(order)
    x = float(x)
    if x <= 0.0:
        raise DomainError(f"Y_{order} has a logarithmic singularity at 0; got x={x}")
    if x > MAX_ARGUMENT:
        raise DomainError(f"argument {x} outside supported range (0, {MAX_ARGUMENT}]")
    return float(_sp.yv(order, x))


def hankel1(order: int, x: float) -> complex:
    """Hankel function of the first kind H^(1)_order(x) = J_order(x) + i Y_order(x)."""
    order = _check_order(order)
    x = float(x)
    if x <= 0.0:
        raise DomainError(f"H^(1)_{order} requires x > 0; got x={x}")
    if x > MAX_ARGUMENT:
        raise DomainError(f"argument {x} outside supported range (0, {MAX_ARGUMENT}]")
    return complex(_sp.hankel1(order, x))


def fundamental_solution(k: float, x, y) -> complex:
    """Outgoing 2D fundamental solution Phi(x, y) = (i/4) H0^(1)(k|x - y|).

    Satisfies (Delta + k^2) Phi(., y) = 0 away from y and the outgoing
    radiation condition. Raises SingularityError when x == y.
    """
    if k <= 0.0:
        raise DomainError(f"wavenumber must be positive, got {k}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = float(np.hypot(*(x - y)))
    if r == 0.0:
        raise SingularityError("fundamental solution evaluated at x = y")
    return 0.25j * complex(_sp.hankel1(0, k * r))


def farfield_gamma(k: float) -> complex:
    """2D far-field normalizer gamma(k) = e^{i pi/4} / sqrt(8 pi k).

    The far field of the point source Phi(., y) is gamma(k) e^{-ik x_hat . y};
    the same constant appears in the mixed reciprocity relation
    w_inf(-d, z) = gamma(k) u(z, d).
    """
    if k <= 0.0:
        raise DomainError(f"wavenumber must be positive, got {k}")
    return np.exp(0.25j * np.pi) / np.sqrt(8.0 * np.pi * k)


def mode_farfield_coeff(n: int, k: float) -> complex:
    """Far-field coefficient gamma_n of the outgoing mode H^(1)_|n|(kr) e^{in phi}."""
    if k <= 0.0:
        raise DomainError(f"wavenumber must be positive, got {k}")
    return np.sqrt(2.0 / (np.pi * k)) * np.exp(-1j * (abs(int(n)) * np.pi / 2.0 + np.pi / 4.0))
