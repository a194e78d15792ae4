"""Shoebox room simulation producing FOA impulse responses and labels.

Image-source method up to a configurable reflection order, plus a seeded
diffuse tail whose decay rate matches the Sabine prediction, cross-faded
in at the mixing time 2*sqrt(V) ms.  All randomness is keyed to the room
seed so simulation is reproducible sample for sample.

Azimuth convention: positive azimuth is to the receiver's right, so
"left" lives at negative azimuth.  Elevation is positive upward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import fftconvolve

from .ambisonics import FOASignal, SPEED_OF_SOUND
from .sphmath import SphericalDirection, sh_matrix, wrap_azimuth

SILENCE_THRESHOLD_DBFS = -60.0
PEAK_NORM_DBFS = -3.0
MIN_PAD_SECONDS = 4.0
MIN_SOURCE_DISTANCE = 0.3
WALL_MARGIN = 0.1
# direct-path amplitudes follow 1/max(d, 0.1) so on-top sources stay finite
DISTANCE_FLOOR = 0.1
DIPOLE_TAIL_DB = -10.0
MAX_REJECTIONS = 10_000


class SilentInputError(ValueError):
    """Input audio contains no samples above the silence threshold."""


class InsufficientDecayError(ValueError):
    """Impulse response never decays far enough to measure T30."""


class SamplingExhaustedError(RuntimeError):
    """Rejection sampling failed to find an in-range room."""


@dataclass(frozen=True)
class RoomSpec:
    """Parametric shoebox room with one static source and receiver."""

    dims_m: tuple[float, float, float]
    absorption: tuple[float, float, float, float, float, float]  # x0,x1,y0,y1,z0,z1
    source_pos: tuple[float, float, float]
    receiver_pos: tuple[float, float, float]
    receiver_yaw: float
    max_image_order: int = 6
    seed: int = 0

    def __post_init__(self):
        if any(d <= 0 for d in self.dims_m):
            raise ValueError(f"room dimensions must be positive, got {self.dims_m}")
        if len(self.absorption) != 6 or any(not (0.0 < a <= 1.0) for a in self.absorption):
            raise ValueError("absorption needs 6 values in (0, 1]")
        for name, pos in (("source", self.source_pos), ("receiver", self.receiver_pos)):
            for p, d in zip(pos, self.dims_m):
                if not (0.0 < p < d):
                    raise ValueError(f"{name} position {pos} outside room {self.dims_m}")
        if self.max_image_order < 0:
            raise ValueError("max_image_order must be >= 0")
        d = math.dist(self.source_pos, self.receiver_pos)
        if d < MIN_SOURCE_DISTANCE:
            raise ValueError(f"source-receiver distance {d:.3f} < {MIN_SOURCE_DISTANCE} m")

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims_m
        return lx * ly * lz

    @property
    def floor_area(self) -> float:
        return self.dims_m[0] * self.dims_m[1]


@dataclass(frozen=True)
class SpatialAttributes:
    """Ground-truth labels of one spatialized sample."""

    azimuth_deg: float
    elevation_deg: float
    distance_m: float
    floor_area_m2: float
    t30_ms: float

    def as_dict(self) -> dict:
        return {
            "azimuth_deg": self.azimuth_deg,
            "elevation_deg": self.elevation_deg,
            "distance_m": self.distance_m,
            "floor_area_m2": self.floor_area_m2,
            "t30_ms": self.t30_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpatialAttributes":
        return cls(
            azimuth_deg=float(d["azimuth_deg"]),
            elevation_deg=float(d["elevation_deg"]),
            distance_m=float(d["distance_m"]),
            floor_area_m2=float(d["floor_area_m2"]),
            t30_ms=float(d["t30_ms"]),
        )


def sabine_t60(room: RoomSpec) -> float:
    """Sabine reverberation time 0.161 V / sum(alpha_i S_i), in seconds."""
    lx, ly, lz = room.dims_m
    surfaces = (ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly)
    absorbing = sum(a * s for a, s in zip(room.absorption, surfaces))
    return 0.161 * room.volume / absorbing


def mixing_time_ms(room: RoomSpec) -> float:
    return 2.0 * math.sqrt(room.volume)


def receiver_frame_direction(room: RoomSpec, point) -> tuple[float, float, float]:
    """(azimuth, elevation, distance) of a world point relative to the receiver.

    Positive azimuth = right of the facing direction (receiver_yaw).
    """
    rel = np.asarray(point, dtype=float) - np.asarray(room.receiver_pos, dtype=float)
    dist = float(np.linalg.norm(rel))
    cy, sy = math.cos(room.receiver_yaw), math.sin(room.receiver_yaw)
    front = rel[0] * cy + rel[1] * sy
    left = -rel[0] * sy + rel[1] * cy
    az = math.atan2(-left, front)
    el = math.atan2(rel[2], math.hypot(front, left))
    return az, el, dist


def geometric_attributes(room: RoomSpec, t30_ms: float | None = None) -> SpatialAttributes:
    """Attributes from geometry alone; t30 defaults to the Sabine prediction."""
    az, el, dist = receiver_frame_direction(room, room.source_pos)
    t30 = t30_ms if t30_ms is not None else sabine_t60(room) * 1000.0
    return SpatialAttributes(
        azimuth_deg=math.degrees(az),
        elevation_deg=math.degrees(el),
        distance_m=dist,
        floor_area_m2=room.floor_area,
        t30_ms=t30,
    )


def _image_sources(room: RoomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Positions and reflection amplitudes of all images up to max_image_order.

    Standard shoebox enumeration: image = (1-2p)*src + 2r*L per axis with
    p in {0,1}, r integer; per-axis wall hit counts are |r - p| and |r|.
    """
    order = room.max_image_order
    src = np.asarray(room.source_pos)
    dims = np.asarray(room.dims_m)
    refl = np.sqrt(np.clip(1.0 - np.asarray(room.absorption), 0.0, 1.0)).reshape(3, 2)

    rng_r = np.arange(-(order // 2 + 1), order // 2 + 2)
    p_vals = np.array([0, 1])
    r_grid = np.stack(np.meshgrid(rng_r, rng_r, rng_r, indexing="ij"), -1).reshape(-1, 3)
    p_grid = np.stack(np.meshgrid(p_vals, p_vals, p_vals, indexing="ij"), -1).reshape(-1, 3)

    r = np.repeat(r_grid, len(p_grid), axis=0)
    p = np.tile(p_grid, (len(r_grid), 1))
    hits_lo = np.abs(r - p)
    hits_hi = np.abs(r)
    total = (hits_lo + hits_hi).sum(axis=1)
    keep = total <= order
    r, p, hits_lo, hits_hi = r[keep], p[keep], hits_lo[keep], hits_hi[keep]

    pos = (1 - 2 * p) * src + 2 * r * dims
    amp = np.ones(len(pos))
    for ax in range(3):
        amp *= refl[ax, 0] ** hits_lo[:, ax] * refl[ax, 1] ** hits_hi[:, ax]
    return pos, amp


def _rir_length_samples(room: RoomSpec, sample_rate: float) -> int:
    t60 = sabine_t60(room)
    tail_end = mixing_time_ms(room) / 1000.0 + 1.3 * t60 + 0.05
    dmax = float(np.linalg.norm(room.dims_m)) * (room.max_image_order + 1)
    return int(math.ceil(max(tail_end, dmax / SPEED_OF_SOUND + 0.01) * sample_rate)) + 1


def simulate_foa_rir(room: RoomSpec, sample_rate: float) -> FOASignal:
    """FOA room impulse response: image sources plus matched diffuse tail."""
    n = _rir_length_samples(room, sample_rate)
    rir = np.zeros((4, n))

    pos, amp = _image_sources(room)
    recv = np.asarray(room.receiver_pos)
    dists = np.linalg.norm(pos - recv, axis=1)
    delays = np.rint(dists / SPEED_OF_SOUND * sample_rate).astype(int)
    gains = amp / np.maximum(dists, DISTANCE_FLOOR)

    az = np.empty(len(pos))
    el = np.empty(len(pos))
    for i, pnt in enumerate(pos):
        a, e, _ = receiver_frame_direction(room, pnt)
        az[i], el[i] = a, e
    y = sh_matrix(az, el, 1)  # (images, 4)
    valid = delays < n
    np.add.at(rir.T, delays[valid], gains[valid, None] * y[valid])

    _add_diffuse_tail(rir, room, sample_rate)
    return FOASignal(rir, sample_rate)


def _add_diffuse_tail(rir: np.ndarray, room: RoomSpec, sample_rate: float) -> None:
    t60 = sabine_t60(room)
    n = rir.shape[1]
    t_mix = mixing_time_ms(room) / 1000.0
    i_mix = int(t_mix * sample_rate)
    if i_mix >= n - 8:
        return

    # level-match against the image-source energy just past the mixing time;
    # the window mean is corrected back to the density at t_mix assuming the
    # idealized exponential profile, which keeps sparse-reflection noise down
    win = max(int(0.04 * sample_rate), 8)
    lo, hi = i_mix, min(i_mix + win, n)
    mean_density = float(np.mean(rir[0, lo:hi] ** 2))
    if mean_density <= 0.0:
        return  # no reverberant field to continue (anechoic / direct-only)
    span = (hi - lo) / sample_rate
    ratio = 6.0 * math.log(10.0) * span / t60
    correction = ratio / max(1.0 - 10.0 ** (-6.0 * span / t60), 1e-9)
    local = mean_density * correction

    rng = np.random.default_rng(np.random.SeedSequence(entropy=(room.seed, 0x7A11)))
    t = np.arange(n - i_mix) / sample_rate
    envelope = math.sqrt(local) * 10.0 ** (-3.0 * t / t60)
    noise = rng.standard_normal((4, n - i_mix))
    noise[1:] *= 10.0 ** (DIPOLE_TAIL_DB / 20.0)
    tail = noise * envelope

    fade_len = min(max(int(0.01 * sample_rate), 2), n - i_mix)
    fade = np.ones(n - i_mix)
    fade[:fade_len] = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade_len) / fade_len)
    rir[:, i_mix:] += tail * fade


def measure_t30(rir: FOASignal) -> float:
    """T30 in ms: Schroeder backward integration of the W channel, linear
    fit on the [-5, -35] dB span, doubled to estimate the 60 dB time."""
    w = rir.channels[0]
    energy = w * w
    total = energy.sum()
    if total <= 0.0:
        raise InsufficientDecayError("silent impulse response")
    sched = np.cumsum(energy[::-1])[::-1] / total
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(np.maximum(sched, 1e-300))
    below5 = np.nonzero(db <= -5.0)[0]
    below35 = np.nonzero(db <= -35.0)[0]
    if len(below35) == 0 or len(below5) == 0:
        raise InsufficientDecayError("decay curve never reaches -35 dB")
    i5, i35 = below5[0], below35[0]
    if i35 <= i5 + 1:
        raise InsufficientDecayError("decay region too short to fit")
    t = np.arange(i5, i35 + 1) / rir.sample_rate
    seg = db[i5 : i35 + 1]
    slope, _ = np.polyfit(t, seg, 1)
    if slope >= 0:
        raise InsufficientDecayError("non-decaying Schroeder curve")
    return 2.0 * (30.0 / -slope) * 1000.0


def trim_silence(audio: np.ndarray, threshold_dbfs: float = SILENCE_THRESHOLD_DBFS) -> np.ndarray:
    """Strip leading/trailing samples below the threshold (dB re full scale 1.0)."""
    x = np.asarray(audio, dtype=float).ravel()
    thr = 10.0 ** (threshold_dbfs / 20.0)
    keep = np.nonzero(np.abs(x) >= thr)[0]
    if len(keep) == 0:
        raise SilentInputError(f"no samples above {threshold_dbfs} dBFS")
    return x[keep[0] : keep[-1] + 1]


def loop_pad(audio: np.ndarray, sample_rate: float, min_seconds: float = MIN_PAD_SECONDS) -> np.ndarray:
    x = np.asarray(audio, dtype=float).ravel()
    need = int(math.ceil(min_seconds * sample_rate))
    if len(x) >= need:
        return x
    reps = int(math.ceil(need / len(x)))
    return np.tile(x, reps)[:need]


def spatialize(
    audio: np.ndarray, room: RoomSpec, sample_rate: float
) -> tuple[FOASignal, SpatialAttributes]:
    """Trim, loop-pad to >= 4 s, convolve with the room's FOA RIR, and
    peak-normalize to -3 dBFS.  Returns the signal plus ground-truth labels
    (t30 measured from the simulated RIR)."""
    x = loop_pad(trim_silence(audio), sample_rate)
    rir = simulate_foa_rir(room, sample_rate)
    out = fftconvolve(x[None, :], rir.channels, axes=1)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 10.0 ** (PEAK_NORM_DBFS / 20.0) / peak
    try:
        t30 = measure_t30(rir)
    except InsufficientDecayError:
        t30 = sabine_t60(room) * 1000.0  # direct-only RIR: report the prediction
    attrs = geometric_attributes(room, t30_ms=t30)
    return FOASignal(out, sample_rate), attrs


# Attribute ranges follow the published room statistics per split.
TRAIN_RANGES: dict[str, tuple[float, float]] = {
    "azimuth_deg": (-180.0, 180.0),
    "elevation_deg": (-47.5, 48.7),
    "distance_m": (0.5, 4.0),
    "floor_area_m2": (13.3, 277.4),
    "t30_ms": (144.5, 2671.9),
}
TEST_RANGES: dict[str, tuple[float, float]] = {
    "azimuth_deg": (-180.0, 180.0),
    "elevation_deg": (-29.8, 42.4),
    "distance_m": (0.9, 4.0),
    "floor_area_m2": (14.3, 277.4),
    "t30_ms": (167.8, 1254.8),
}

_SPLIT_SALTS = {"train": 0x7201, "val": 0x7202, "test": 0x7203}


def default_ranges(split: str) -> dict[str, tuple[float, float]]:
    return dict(TEST_RANGES if split == "test" else TRAIN_RANGES)


@dataclass
class RoomSampler:
    """Seeded per-split room sampler; draws are keyed by (seed, split, index)
    so parallel generation reproduces the serial stream exactly."""

    split: str
    seed: int
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    max_image_order: int = 6
    _counter: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.split not in _SPLIT_SALTS:
            raise ValueError(f"split must be one of {sorted(_SPLIT_SALTS)}, got {self.split}")
        merged = default_ranges(self.split)
        merged.update(self.ranges)
        self.ranges = merged

    def sample(self, target_bands: dict[str, tuple[float, float]] | None = None) -> RoomSpec:
        """Draw one RoomSpec; target_bands optionally narrows attribute ranges
        (still clipped against the split ranges)."""
        index = self._counter
        self._counter += 1
        return sample_room_indexed(
            self.split, self.seed, index, self.ranges, target_bands, self.max_image_order
        )


def _intersect(a: tuple[float, float], b: tuple[float, float]) -> tuple[float, float]:
    lo, hi = max(a[0], b[0]), min(a[1], b[1])
    if lo > hi:
        raise ValueError(f"empty attribute band: {a} vs {b}")
    return lo, hi


def sample_room_indexed(
    split: str,
    seed: int,
    index: int,
    ranges: dict[str, tuple[float, float]],
    target_bands: dict[str, tuple[float, float]] | None = None,
    max_image_order: int = 6,
    critical_distance_band: tuple[float, float] | None = None,
) -> RoomSpec:
    """Deterministic draw keyed by (seed, split, index); rejection-samples
    until every attribute lands inside its range.

    Azimuth bands may wrap past +180 (e.g. a rear wedge (155, 205)); they
    replace the split range rather than intersecting with it.

    critical_distance_band, when set, ties the reverberation target to the
    room volume so the critical distance 0.057*sqrt(V/T60) stays inside the
    band; this keeps the direct-to-reverberant ratio a consistent function
    of source distance across rooms (still clipped to the t30 range).
    """
    bands = {k: tuple(v) for k, v in ranges.items()}
    if target_bands:
        for k, v in target_bands.items():
            if k == "azimuth_deg":
                bands[k] = tuple(v)
            else:
                bands[k] = _intersect(bands[k], tuple(v))

    salt = _SPLIT_SALTS[split]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, salt, index)))
    room_seed = int(rng.integers(0, 2**63 - 1))

    for _ in range(MAX_REJECTIONS):
        area = math.exp(rng.uniform(math.log(bands["floor_area_m2"][0] + 0.5),
                                    math.log(bands["floor_area_m2"][1] - 0.5)))
        aspect = rng.uniform(0.6, 1.7)
        lx = math.sqrt(area * aspect)
        ly = area / lx
        lz = rng.uniform(2.5, 4.4)
        dims = (lx, ly, lz)

        # absorption targeting the t30 band via Sabine, then jittered
        t30_lo, t30_hi = bands["t30_ms"]
        lo_t, hi_t = t30_lo * 1.15, t30_hi * 0.85
        if lo_t >= hi_t:  # band too narrow for safety margins
            lo_t = hi_t = math.sqrt(t30_lo * t30_hi)
        volume = lx * ly * lz
        if critical_distance_band is not None:
            rc = rng.uniform(*critical_distance_band)
            t60_rc = volume * (0.057 / rc) ** 2 * 1000.0
            t60_target = min(max(t60_rc, lo_t), hi_t) / 1000.0
        else:
            t60_target = math.exp(rng.uniform(math.log(lo_t), math.log(hi_t))) / 1000.0
        total_surface = 2 * (lx * ly + lx * lz + ly * lz)
        alpha_mean = 0.161 * volume / (t60_target * total_surface)
        if not (0.01 <= alpha_mean <= 0.95):
            continue
        jitter = rng.uniform(0.85, 1.15, size=6)
        absorption = tuple(float(np.clip(alpha_mean * j, 0.01, 1.0)) for j in jitter)

        margin = WALL_MARGIN + 0.05
        rx = rng.uniform(margin, lx - margin)
        ry = rng.uniform(margin, ly - margin)
        # full-height receiver placement keeps steep elevations at long
        # distances geometrically reachable
        rz = rng.uniform(min(1.2, lz / 2), lz - margin)
        yaw = rng.uniform(-math.pi, math.pi)

        az_deg = rng.uniform(*bands["azimuth_deg"])
        el_deg = rng.uniform(*bands["elevation_deg"])
        dist = rng.uniform(*bands["distance_m"])
        az, el = math.radians(az_deg), math.radians(el_deg)
        cy, sy = math.cos(yaw), math.sin(yaw)
        # receiver frame back to world: front and left axes
        fx, fy = cy, sy
        lxv, lyv = -sy, cy
        horiz = dist * math.cos(el)
        wx = rx + horiz * (math.cos(az) * fx + (-math.sin(az)) * lxv)
        wy = ry + horiz * (math.cos(az) * fy + (-math.sin(az)) * lyv)
        wz = rz + dist * math.sin(el)
        if not (margin < wx < lx - margin and margin < wy < ly - margin and margin < wz < lz - margin):
            continue

        try:
            room = RoomSpec(
                dims_m=dims,
                absorption=absorption,
                source_pos=(wx, wy, wz),
                receiver_pos=(rx, ry, rz),
                receiver_yaw=yaw,
                max_image_order=max_image_order,
                seed=room_seed,
            )
        except ValueError:
            continue

        attrs = geometric_attributes(room)
        if _attrs_in_ranges(attrs, bands):
            return room
    raise SamplingExhaustedError(
        f"no admissible room after {MAX_REJECTIONS} rejections (bands={bands})"
    )


def _azimuth_in_band(az: float, band: tuple[float, float]) -> bool:
    lo, hi = band
    return lo <= az <= hi or lo <= az + 360.0 <= hi or lo <= az - 360.0 <= hi


def _attrs_in_ranges(attrs: SpatialAttributes, bands: dict[str, tuple[float, float]]) -> bool:
    d = attrs.as_dict()
    for k in bands:
        if k == "azimuth_deg":
            if not _azimuth_in_band(d[k], bands[k]):
                return False
        elif not (bands[k][0] <= d[k] <= bands[k][1]):
            return False
    return True
