"""Real spherical harmonics and rigid-sphere radial functions.

Conventions used throughout the package:

* real-valued, fully orthonormal spherical harmonics ("N3D" scaling),
  Condon-Shortley phase omitted,
* ACN channel ordering, acn = n^2 + n + m,
* directions given as (azimuth, elevation) in radians, with the unit
  vector (x, y, z) = (cos el * cos az, cos el * sin az, sin el).

Spherical Bessel functions use closed forms for n <= 2 and stable
recurrences (downward for j when x < n) above, with a power series for
small arguments.  Target accuracy is 1e-10 on [1e-6, 50].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_SQRT_PI = 2.0 * math.sqrt(math.pi)

# Below this argument the power series is used for j_n (closed forms
# cancel catastrophically as x -> 0).
_SERIES_CUTOFF = 0.5


class DomainError(ValueError):
    """Argument outside the mathematical domain of a special function."""


@dataclass(frozen=True)
class SphericalDirection:
    """Direction on the unit sphere; azimuth in (-pi, pi], elevation in [-pi/2, pi/2]."""

    azimuth: float
    elevation: float

    def __post_init__(self):
        if not (-math.pi < self.azimuth <= math.pi):
            raise ValueError(f"azimuth {self.azimuth} outside (-pi, pi]")
        if not (-math.pi / 2 <= self.elevation <= math.pi / 2):
            raise ValueError(f"elevation {self.elevation} outside [-pi/2, pi/2]")

    @classmethod
    def from_degrees(cls, azimuth_deg: float, elevation_deg: float) -> "SphericalDirection":
        return cls(wrap_azimuth(math.radians(azimuth_deg)), math.radians(elevation_deg))

    @classmethod
    def from_unit_vector(cls, v) -> "SphericalDirection":
        x, y, z = float(v[0]), float(v[1]), float(v[2])
        r = math.sqrt(x * x + y * y + z * z)
        if r == 0.0:
            raise ValueError("zero vector has no direction")
        az = math.atan2(y, x)
        el = math.asin(max(-1.0, min(1.0, z / r)))
        return cls(wrap_azimuth(az), el)

    def unit_vector(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return np.array(
            [
                ce * math.cos(self.azimuth),
                ce * math.sin(self.azimuth),
                math.sin(self.elevation),
            ]
        )


def wrap_azimuth(az: float) -> float:
    """Wrap an angle in radians into (-pi, pi]."""
    az = math.fmod(az, 2.0 * math.pi)
    if az > math.pi:
        az -= 2.0 * math.pi
    elif az <= -math.pi:
        az += 2.0 * math.pi
    return az


@dataclass(frozen=True)
class SHIndex:
    """Spherical-harmonic order/mode pair with |m| <= n."""

    n: int
    m: int

    def __post_init__(self):
        if self.n < 0:
            raise ValueError(f"order n must be >= 0, got {self.n}")
        if abs(self.m) > self.n:
            raise ValueError(f"|m| <= n violated: n={self.n}, m={self.m}")

    @property
    def acn(self) -> int:
        return self.n * self.n + self.n + self.m

    @classmethod
    def from_acn(cls, acn: int) -> "SHIndex":
        if acn < 0:
            raise ValueError(f"acn must be >= 0, got {acn}")
        n = int(math.isqrt(acn))
        return cls(n, acn - n * n - n)


def num_channels(order: int) -> int:
    """Number of ambisonics channels for a given truncation order."""
    return (order + 1) * (order + 1)


def _assoc_legendre(n: int, m: int, t: np.ndarray) -> np.ndarray:
    """Associated Legendre P_n^m(t) for m >= 0, Condon-Shortley phase omitted.

    Vectorized over t; uses the standard (n-m) P_n^m = t(2n-1) P_{n-1}^m
    - (n+m-1) P_{n-2}^m upward recurrence, which is stable on [-1, 1].
    """
    t = np.asarray(t, dtype=float)
    s = np.sqrt(np.maximum(0.0, 1.0 - t * t))
    # P_m^m = (2m-1)!! * s^m
    pmm = np.ones_like(t)
    for k in range(1, m + 1):
        pmm = pmm * (2 * k - 1) * s
    if n == m:
        return pmm
    pm1 = t * (2 * m + 1) * pmm  # P_{m+1}^m
    if n == m + 1:
        return pm1
    for nn in range(m + 2, n + 1):
        pm2 = (t * (2 * nn - 1) * pm1 - (nn + m - 1) * pmm) / (nn - m)
        pmm, pm1 = pm1, pm2
    return pm1


def real_sph_harm(idx: SHIndex, direction: SphericalDirection) -> float:
    """Orthonormal real spherical harmonic Y_n^m evaluated at one direction."""
    n, m = idx.n, idx.m
    am = abs(m)
    norm = math.sqrt(
        (2 * n + 1) / (4.0 * math.pi) * math.factorial(n - am) / math.factorial(n + am)
    )
    if m != 0:
        norm *= math.sqrt(2.0)
    p = float(_assoc_legendre(n, am, np.asarray(math.sin(direction.elevation))))
    if m > 0:
        return norm * p * math.cos(m * direction.azimuth)
    if m < 0:
        return norm * p * math.sin(am * direction.azimuth)
    return norm * p


def sh_matrix(azimuths, elevations, max_order: int) -> np.ndarray:
    """Matrix of real spherical harmonics, one row per direction, ACN columns.

    Args:
        azimuths, elevations: array-like of angles in radians.
        max_order: highest order N; output has (N+1)^2 columns.
    """
    az = np.asarray(azimuths, dtype=float).ravel()
    el = np.asarray(elevations, dtype=float).ravel()
    if az.shape != el.shape:
        raise ValueError("azimuths and elevations must have equal length")
    t = np.sin(el)
    cols = []
    for n in range(max_order + 1):
        for m in range(-n, n + 1):
            am = abs(m)
            norm = math.sqrt(
                (2 * n + 1) / (4.0 * math.pi) * math.factorial(n - am) / math.factorial(n + am)
            )
            if m != 0:
                norm *= math.sqrt(2.0)
            p = _assoc_legendre(n, am, t)
            if m > 0:
                cols.append(norm * p * np.cos(m * az))
            elif m < 0:
                cols.append(norm * p * np.sin(am * az))
            else:
                cols.append(norm * p * np.ones_like(az))
    return np.stack(cols, axis=1)


def _sph_jn_series(n: int, x: float) -> float:
    # j_n(x) = x^n sum_k (-x^2/2)^k / (k! (2n+2k+1)!!)
    dfact = 1.0
    for k in range(1, 2 * n + 2, 2):
        dfact *= k
    term = x**n / dfact
    total = term
    k = 0
    x2 = x * x
    while abs(term) > 1e-18 * abs(total) + 1e-300:
        k += 1
        term *= -x2 / (2.0 * k * (2 * n + 2 * k + 1))
        total += term
        if k > 60:
            break
    return total


def sph_bessel_j(n: int, x: float) -> float:
    """Spherical Bessel function of the first kind j_n(x) for x >= 0."""
    if n < 0:
        raise DomainError(f"order must be >= 0, got {n}")
    if x < 0:
        raise DomainError(f"argument must be >= 0, got {x}")
    if x < _SERIES_CUTOFF:
        return _sph_jn_series(n, x)
    if n == 0:
        return math.sin(x) / x
    if n == 1:
        return math.sin(x) / (x * x) - math.cos(x) / x
    if n == 2:
        return (3.0 / (x * x * x) - 1.0 / x) * math.sin(x) - 3.0 / (x * x) * math.cos(x)
    if x > n:
        # upward recurrence is stable once x exceeds the order
        jm, j = math.sin(x) / x, math.sin(x) / (x * x) - math.cos(x) / x
        for k in range(1, n):
            jm, j = j, (2 * k + 1) / x * j - jm
        return j
    # downward (Miller) recurrence, normalized against j_0
    start = n + int(x) + 24
    jp, j = 0.0, 1e-30  # trial j_{start+1}, j_{start}
    jn = 0.0
    for k in range(start, 0, -1):
        jm = (2 * k + 1) / x * j - jp  # j_{k-1}
        jp, j = j, jm
        if k - 1 == n:
            jn = j
        # rescale to avoid overflow
        if abs(j) > 1e250:
            j *= 1e-250
            jp *= 1e-250
            jn *= 1e-250
    return jn * (math.sin(x) / x) / j


def sph_bessel_y(n: int, x: float) -> float:
    """Spherical Bessel function of the second kind y_n(x) for x > 0."""
    if n < 0:
        raise DomainError(f"order must be >= 0, got {n}")
    if x <= 0:
        raise DomainError(f"argument must be > 0, got {x}")
    ym = -math.cos(x) / x
    if n == 0:
        return ym
    y = -math.cos(x) / (x * x) - math.sin(x) / x
    # upward recurrence is stable for y_n (the dominant solution)
    for k in range(1, n):
        ym, y = y, (2 * k + 1) / x * y - ym
    return y


def sph_hankel_h1(n: int, x: float) -> complex:
    """Spherical Hankel function of the first kind, h_n = j_n + i y_n; x > 0."""
    if x <= 0:
        raise DomainError(f"Hankel argument must be > 0, got {x}")
    return complex(sph_bessel_j(n, x), sph_bessel_y(n, x))


def sph_bessel_j_prime(n: int, x: float) -> float:
    """First derivative of j_n via f'_n = f_{n-1} - (n+1)/x f_n."""
    if n == 0:
        return -sph_bessel_j(1, x)
    if x == 0.0:
        # series: j_n'(0) = 1/3 for n = 1, else 0
        return 1.0 / 3.0 if n == 1 else 0.0
    return sph_bessel_j(n - 1, x) - (n + 1) / x * sph_bessel_j(n, x)


def sph_hankel_h1_prime(n: int, x: float) -> complex:
    """First derivative of h_n^(1); x > 0."""
    if x <= 0:
        raise DomainError(f"Hankel argument must be > 0, got {x}")
    if n == 0:
        return -sph_hankel_h1(1, x)
    return sph_hankel_h1(n - 1, x) - (n + 1) / x * sph_hankel_h1(n, x)


def radial_function_rigid(n: int, kr: float, kr0: float) -> complex:
    """Per-order radial weight b_n relating sound-field coefficients to
    pressure on a rigid sphere of nondimensional radius kr0, evaluated at kr.

    b_n(kr) = 4 pi i^n [ j_n(kr) - (j_n'(kr0) / h_n'(kr0)) h_n(kr) ]
    """
    if kr0 <= 0:
        raise DomainError(f"kr0 must be > 0, got {kr0}")
    if kr < kr0:
        raise DomainError(f"kr must be >= kr0 (field point inside sphere): kr={kr}, kr0={kr0}")
    scatter = sph_bessel_j_prime(n, kr0) / sph_hankel_h1_prime(n, kr0)
    val = sph_bessel_j(n, kr) - scatter * sph_hankel_h1(n, kr)
    return 4.0 * math.pi * (1j**n) * val
