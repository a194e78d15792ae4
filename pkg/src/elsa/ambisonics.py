"""Ambisonics encoding, analytic plane-wave synthesis, and grid decoding.

Channel order is ACN throughout; at first order the four channels are
(W, Y, Z, X).  Plane-wave synthesis is analytic (coefficients are the
real spherical harmonics of the source direction), microphone encoding
solves the rigid-sphere forward model by least squares with per-order
radial equalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .sphmath import (
    SphericalDirection,
    num_channels,
    radial_function_rigid,
    sh_matrix,
)

SPEED_OF_SOUND = 343.0  # m/s

# |b_n| below this fraction of 4*pi is clamped; avoids low-frequency
# blow-up at the cost of spectral tinting below ~50 Hz for small arrays.
RADIAL_FLOOR_FRACTION = 1e-4

COND_THRESHOLD = 1e6


class IllConditionedGeometryError(ValueError):
    """Sensor layout cannot resolve the requested spherical-harmonic order."""


@dataclass(frozen=True)
class MicArrayGeometry:
    """Rigid-sphere microphone array: radius plus sensor directions."""

    radius_m: float
    sensors: tuple[SphericalDirection, ...]
    name: str = "array"

    def __post_init__(self):
        if self.radius_m <= 0:
            raise ValueError(f"radius must be > 0, got {self.radius_m}")
        if len(self.sensors) < 1:
            raise ValueError("at least one sensor required")
        seen = set()
        for s in self.sensors:
            key = (round(s.azimuth, 12), round(s.elevation, 12))
            if key in seen:
                raise ValueError(f"duplicate sensor direction {s}")
            seen.add(key)

    @property
    def num_sensors(self) -> int:
        return len(self.sensors)

    def sh_basis(self, max_order: int) -> np.ndarray:
        az = [s.azimuth for s in self.sensors]
        el = [s.elevation for s in self.sensors]
        return sh_matrix(az, el, max_order)

    @classmethod
    def tetrahedron(cls, radius_m: float = 0.042) -> "MicArrayGeometry":
        verts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / math.sqrt(3)
        sensors = tuple(SphericalDirection.from_unit_vector(v) for v in verts)
        return cls(radius_m, sensors, name="tetrahedron")

    @classmethod
    def fibonacci(cls, num_sensors: int, radius_m: float = 0.042) -> "MicArrayGeometry":
        """Golden-angle spiral layout; near-uniform for a few dozen sensors."""
        i = np.arange(num_sensors)
        z = 1.0 - (2.0 * i + 1.0) / num_sensors
        az = np.mod((math.pi * (3.0 - math.sqrt(5.0))) * i + math.pi, 2 * math.pi) - math.pi
        el = np.arcsin(np.clip(z, -1, 1))
        sensors = tuple(
            SphericalDirection(float(a), float(e)) for a, e in zip(az, el)
        )
        return cls(radius_m, sensors, name=f"fibonacci{num_sensors}")


@dataclass
class AmbisonicsSTFT:
    """Complex ambisonics spectrogram, shape (frames, bins, channels)."""

    data: np.ndarray
    sample_rate: float
    hop: int
    order: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"expected (T, F, channels), got shape {self.data.shape}")
        t, f, k = self.data.shape
        if k != num_channels(self.order):
            raise ValueError(
                f"channel count {k} != (N+1)^2 = {num_channels(self.order)} for order {self.order}"
            )
        if t < 1 or f < 1:
            raise ValueError(f"empty spectrogram shape {self.data.shape}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_bins(self) -> int:
        return self.data.shape[1]

    @property
    def omni(self) -> np.ndarray:
        return self.data[:, :, 0]


@dataclass
class FOASignal:
    """First-order ambisonics time signal, ACN channels (W, Y, Z, X)."""

    channels: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=float)
        if self.channels.ndim != 2 or self.channels.shape[0] != 4:
            raise ValueError(f"FOA needs shape (4, samples), got {self.channels.shape}")
        if not np.all(np.isfinite(self.channels)):
            raise ValueError("non-finite samples in FOA signal")

    @property
    def num_samples(self) -> int:
        return self.channels.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate


def planewave_foa(
    direction: SphericalDirection, source: np.ndarray, sample_rate: float
) -> FOASignal:
    """Analytic FOA coefficients of a unit plane-wave density carrying `source`.

    Channel acn(n, m) is source(t) * Y_n^m(direction).
    """
    source = np.asarray(source, dtype=float).ravel()
    if not np.all(np.isfinite(source)):
        raise ValueError("source signal must be finite")
    y = sh_matrix([direction.azimuth], [direction.elevation], 1)[0]
    return FOASignal(np.outer(y, source), sample_rate)


def _radial_vector(
    geom: MicArrayGeometry, k: float, max_order: int, floored: bool
) -> np.ndarray:
    """b_n per ACN channel at spatial frequency k.

    The magnitude floor is applied only on the encoding (division) side;
    forward synthesis uses the raw radial function.
    """
    kr0 = max(k * geom.radius_m, 1e-6)
    floor = RADIAL_FLOOR_FRACTION * 4.0 * math.pi
    b = np.empty(num_channels(max_order), dtype=complex)
    for n in range(max_order + 1):
        bn = radial_function_rigid(n, kr0, kr0)
        if floored and abs(bn) < floor:
            bn = bn / abs(bn) * floor if bn != 0 else complex(floor)
        b[n * n : (n + 1) * (n + 1)] = bn
    return b


def mic_pressure_planewave(
    geom: MicArrayGeometry,
    direction: SphericalDirection,
    k: float,
    n_truncate: int = 8,
) -> np.ndarray:
    """Analytic rigid-sphere pressure at each sensor for a unit plane wave.

    Series over orders truncated at n_truncate; amplitude-1 plane-wave
    density from `direction`.
    """
    y_dir = sh_matrix([direction.azimuth], [direction.elevation], n_truncate)[0]
    y_sens = geom.sh_basis(n_truncate)
    b = _radial_vector(geom, k, n_truncate, floored=False)
    return y_sens @ (b * y_dir)


def encode_pressure(
    pressures: np.ndarray,
    geom: MicArrayGeometry,
    k: float,
    order: int,
    n_solve: int | None = None,
) -> np.ndarray:
    """Encode sensor pressures at one spatial frequency into ambisonics.

    Least-squares solve of p = Y (b * a) followed by per-order division by
    the floored radial function.  Solving above the target order (n_solve)
    absorbs high-order content that would otherwise alias into the kept
    channels; only the first (order+1)^2 coefficients are returned.

    Args:
        pressures: (..., Q) complex sensor pressures.
        k: spatial frequency 2*pi*f/c.
        order: returned ambisonics order.
        n_solve: solve order; defaults to the largest order resolvable by Q.
    """
    p = np.asarray(pressures, dtype=complex)
    q = geom.num_sensors
    if p.shape[-1] != q:
        raise ValueError(f"pressure vector length {p.shape[-1]} != Q = {q}")
    if n_solve is None:
        n_solve = max(order, int(math.isqrt(q)) - 1)
    if num_channels(n_solve) > q:
        raise IllConditionedGeometryError(
            f"{q} sensors cannot resolve order {n_solve} "
            f"({num_channels(n_solve)} channels)"
        )
    y = geom.sh_basis(n_solve)
    cond = np.linalg.cond(y)
    if cond > COND_THRESHOLD:
        raise IllConditionedGeometryError(
            f"cond(Y) = {cond:.3g} exceeds {COND_THRESHOLD:.0e} for {geom.name}"
        )
    b = _radial_vector(geom, k, n_solve, floored=True)
    flat = p.reshape(-1, q)
    ba, *_ = np.linalg.lstsq(y, flat.T, rcond=None)
    a = (ba.T / b).reshape(p.shape[:-1] + (num_channels(n_solve),))
    return a[..., : num_channels(order)]


def encode_from_mics(
    pressures: np.ndarray,
    geom: MicArrayGeometry,
    order: int,
    sample_rate: float,
    hop: int,
    n_solve: int | None = None,
    speed_of_sound: float = SPEED_OF_SOUND,
) -> AmbisonicsSTFT:
    """Encode an STFT of sensor pressures (T, F, Q) into an AmbisonicsSTFT.

    Bin f maps to spatial frequency k = 2*pi*f_hz/c with f_hz on the
    onesided rfft grid implied by F.
    """
    p = np.asarray(pressures, dtype=complex)
    if p.ndim != 3:
        raise ValueError(f"expected (T, F, Q), got {p.shape}")
    t, f, _ = p.shape
    n_fft = 2 * (f - 1)
    out = np.empty((t, f, num_channels(order)), dtype=complex)
    for fi in range(f):
        f_hz = fi * sample_rate / n_fft if n_fft > 0 else 0.0
        k = 2.0 * math.pi * f_hz / speed_of_sound
        out[:, fi, :] = encode_pressure(p[:, fi, :], geom, k, order, n_solve=n_solve)
    return AmbisonicsSTFT(out, sample_rate, hop, order)


def decode_to_grid(coefficients: np.ndarray, azimuths, elevations) -> np.ndarray:
    """Per-direction energy |sum_nm A_nm Y_n^m(dir)|^2 on a direction grid.

    Args:
        coefficients: (..., channels) ambisonics coefficients of one frame.
        azimuths, elevations: grid angles in radians, equal length G.

    Returns:
        (..., G) real energy map.
    """
    a = np.asarray(coefficients)
    az = np.asarray(azimuths, dtype=float).ravel()
    if az.size == 0:
        raise ValueError("empty direction grid")
    order = int(math.isqrt(a.shape[-1])) - 1
    if num_channels(order) != a.shape[-1]:
        raise ValueError(f"trailing dim {a.shape[-1]} is not a full SH channel count")
    y = sh_matrix(az, elevations, order)  # (G, channels)
    field = a @ y.T
    return np.abs(field) ** 2
