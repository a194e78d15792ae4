"""Corpus files: 4-channel WAV, binary matrix/feature/checkpoint formats,
JSON-lines manifests, and the synthetic corpus generator.

All formats are little-endian and versioned; readers reject unknown
versions.  Corpus generation is keyed by (seed, record index) so worker
count never changes the output bytes.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .ambisonics import FOASignal
from .captions import attrs_to_descriptors, build_spatial_caption
from .roomsim import (
    RoomSpec,
    SpatialAttributes,
    default_ranges,
    loop_pad,
    sample_room_indexed,
    spatialize,
    trim_silence,
    TRAIN_RANGES,
)

MANIFEST_SCHEMA_VERSION = 1
MATRIX_MAGIC = b"ELSM"
MATRIX_VERSION = 1
FEATURE_MAGIC = b"ELSF"
FEATURE_VERSION = 1
CHECKPOINT_MAGIC = b"ELSC"
CHECKPOINT_VERSION = 1


class MalformedFileError(ValueError):
    pass


class WrongChannelCountError(MalformedFileError):
    pass


class VersionMismatchError(MalformedFileError):
    pass


# ------------------------------------------------------------------- WAV


def write_foa_wav(path, foa: FOASignal) -> None:
    """RIFF/WAVE, 4 channels, 32-bit float little-endian."""
    data = np.ascontiguousarray(foa.channels.T.astype("<f4"))
    wavfile.write(str(path), int(foa.sample_rate), data)


def read_foa_wav(path) -> FOASignal:
    try:
        rate, data = wavfile.read(str(path))
    except Exception as exc:
        raise MalformedFileError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != 4:
        got = 1 if data.ndim == 1 else data.shape[1]
        raise WrongChannelCountError(f"{path}: expected 4 channels, got {got}")
    return FOASignal(data.T.astype(np.float64), float(rate))


def write_mono_wav(path, samples: np.ndarray, sample_rate: float) -> None:
    wavfile.write(str(path), int(sample_rate), np.asarray(samples, dtype="<f4"))


def read_mono_wav(path) -> tuple[np.ndarray, float]:
    try:
        rate, data = wavfile.read(str(path))
    except Exception as exc:
        raise MalformedFileError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim != 1:
        raise WrongChannelCountError(f"{path}: expected 1 channel, got {data.shape[1]}")
    return data.astype(np.float64), float(rate)


# ---------------------------------------------------------------- matrices


def _write_matrix_record(fh, name: str, mat: np.ndarray) -> None:
    m = np.ascontiguousarray(np.asarray(mat, dtype="<f4"))
    if m.ndim != 2:
        raise ValueError(f"matrix {name!r} must be 2D, got shape {m.shape}")
    nb = name.encode("utf-8")
    fh.write(MATRIX_MAGIC)
    fh.write(struct.pack("<HH", MATRIX_VERSION, len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
    fh.write(m.tobytes())


def write_matrices(path, matrices: dict[str, np.ndarray], append: bool = False) -> None:
    mode = "ab" if append else "wb"
    with open(path, mode) as fh:
        for name, mat in matrices.items():
            _write_matrix_record(fh, name, mat)


def read_matrices(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            magic = fh.read(4)
            if not magic:
                break
            if magic != MATRIX_MAGIC:
                raise MalformedFileError(f"{path}: bad record magic {magic!r}")
            head = fh.read(4)
            if len(head) < 4:
                raise MalformedFileError(f"{path}: truncated record header")
            version, name_len = struct.unpack("<HH", head)
            if version != MATRIX_VERSION:
                raise VersionMismatchError(f"{path}: matrix version {version} unsupported")
            name = fh.read(name_len).decode("utf-8")
            dims = fh.read(8)
            if len(dims) < 8:
                raise MalformedFileError(f"{path}: truncated dims for {name!r}")
            rows, cols = struct.unpack("<II", dims)
            payload = fh.read(rows * cols * 4)
            if len(payload) < rows * cols * 4:
                raise MalformedFileError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return out


# ------------------------------------------------------------ feature cache


def write_feature_cache(path, records: dict[str, dict]) -> None:
    """records: clip_id -> {"meta": {...}, "tensors": {name: ndarray}}.

    Per-clip header carries dims and rates as JSON; payloads are f32 LE in
    header order.
    """
    with open(path, "wb") as fh:
        for clip_id in records:
            entry = records[clip_id]
            tensors = entry["tensors"]
            header = {
                "clip_id": clip_id,
                "meta": entry.get("meta", {}),
                "tensors": [[name, list(t.shape)] for name, t in tensors.items()],
            }
            hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
            fh.write(FEATURE_MAGIC)
            fh.write(struct.pack("<HI", FEATURE_VERSION, len(hb)))
            fh.write(hb)
            for _, t in tensors.items():
                fh.write(np.ascontiguousarray(np.asarray(t, dtype="<f4")).tobytes())


def read_feature_cache(path) -> dict[str, dict]:
    out: dict[str, dict] = {}
    with open(path, "rb") as fh:
        while True:
            magic = fh.read(4)
            if not magic:
                break
            if magic != FEATURE_MAGIC:
                raise MalformedFileError(f"{path}: bad feature magic {magic!r}")
            head = fh.read(6)
            if len(head) < 6:
                raise MalformedFileError(f"{path}: truncated feature header")
            version, hlen = struct.unpack("<HI", head)
            if version != FEATURE_VERSION:
                raise VersionMismatchError(f"{path}: feature version {version} unsupported")
            header = json.loads(fh.read(hlen).decode("utf-8"))
            tensors = {}
            for name, shape in header["tensors"]:
                count = int(np.prod(shape))
                payload = fh.read(count * 4)
                if len(payload) < count * 4:
                    raise MalformedFileError(f"{path}: truncated tensor {name!r}")
                tensors[name] = (
                    np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
                )
            out[header["clip_id"]] = {"meta": header["meta"], "tensors": tensors}
    return out


# -------------------------------------------------------------- checkpoints


def save_checkpoint(
    path,
    params: dict[str, np.ndarray],
    meta: dict,
    optimizer_arrays: dict[str, np.ndarray] | None = None,
    step: int = 0,
) -> None:
    """Versioned header + named parameter blobs (f32 LE) + optimizer state."""
    arrays: dict[str, np.ndarray] = dict(params)
    if optimizer_arrays:
        arrays.update(optimizer_arrays)
    header = {
        "meta": meta,
        "step": step,
        "params": sorted(params.keys()),
        "optimizer": sorted(optimizer_arrays.keys()) if optimizer_arrays else [],
        "shapes": {k: list(np.asarray(v).shape) for k, v in arrays.items()},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
        fh.write(hb)
        for name in sorted(arrays.keys()):
            fh.write(np.ascontiguousarray(np.asarray(arrays[name], dtype="<f4")).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict[str, np.ndarray], int]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise MalformedFileError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(f"{path}: checkpoint version {version} unsupported")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for name in sorted(header["shapes"].keys()):
            shape = header["shapes"][name]
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(count * 4)
            if len(payload) < count * 4:
                raise MalformedFileError(f"{path}: truncated blob {name!r}")
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    params = {k: arrays[k] for k in header["params"]}
    opt = {k: arrays[k] for k in header["optimizer"]}
    return params, header["meta"], opt, int(header["step"])


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    audio_path: str
    original_caption: str
    spatial_caption: str
    attributes: SpatialAttributes | None
    room_id: str | None
    split: str
    is_spatial: bool

    def to_json(self) -> str:
        return json.dumps(
            {
                "v": MANIFEST_SCHEMA_VERSION,
                "id": self.id,
                "audio_path": self.audio_path,
                "original_caption": self.original_caption,
                "spatial_caption": self.spatial_caption,
                "attributes": self.attributes.as_dict() if self.attributes else None,
                "room_id": self.room_id,
                "split": self.split,
                "is_spatial": self.is_spatial,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        d = json.loads(line)
        if d.get("v") != MANIFEST_SCHEMA_VERSION:
            raise VersionMismatchError(f"manifest schema {d.get('v')} unsupported")
        return cls(
            id=d["id"],
            audio_path=d["audio_path"],
            original_caption=d["original_caption"],
            spatial_caption=d["spatial_caption"],
            attributes=SpatialAttributes.from_dict(d["attributes"]) if d["attributes"] else None,
            room_id=d["room_id"],
            split=d["split"],
            is_spatial=bool(d["is_spatial"]),
        )


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(ManifestRecord.from_json(line))
    return records


def audit_manifest(records: list[ManifestRecord]) -> None:
    """Unique ids; splits disjoint by room_id."""
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate record ids in manifest")
    room_split: dict[str, str] = {}
    for r in records:
        if r.room_id is None:
            continue
        prev = room_split.setdefault(r.room_id, r.split)
        if prev != r.split:
            raise ValueError(f"room {r.room_id} appears in splits {prev} and {r.split}")


# ------------------------------------------------------- synthetic corpus

# Base caption phrases per semantic class.  None of these use descriptor
# marker tokens, so captions stay parseable.
CLASS_PHRASES: dict[str, tuple[str, ...]] = {
    "hum": (
        "a deep steady hum",
        "the drone of a steady hum",
        "a low machine hum",
    ),
    "siren": (
        "a rising siren wail",
        "the sweep of a siren",
        "a siren climbing in pitch",
    ),
    "static": (
        "a hiss of rough static",
        "the crackle of radio static",
        "a wash of static noise",
    ),
    "throb": (
        "a pulsing throb of noise",
        "a slow throbbing pulse",
        "the beat of a throbbing engine",
    ),
    "ticks": (
        "a rapid ticking clatter",
        "the tapping of quick ticks",
        "a burst of clock ticks",
    ),
    "chord": (
        "an organ like chord",
        "the swell of a held chord",
        "a rich sustained chord",
    ),
}

# Direction bins sit inside the descriptor bands with a safety margin.
DIRECTION_BINS: dict[str, tuple[float, float]] = {
    "left": (-115.0, -65.0),
    "right": (65.0, 115.0),
    "front": (-25.0, 25.0),
    "back": (155.0, 205.0),  # wraps through 180
}
DISTANCE_BINS: dict[str, tuple[float, float]] = {
    "near": (0.5, 0.75),
    "far": (2.4, 3.6),
}
ELEVATION_BANDS: tuple[tuple[str, tuple[float, float]], ...] = (
    ("level", (-28.0, 28.0)),
    ("up", (41.0, 47.0)),
    ("down", (-47.0, -41.0)),
)


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Parametric desk-scale corpus: semantic classes x direction x distance
    cells, with elevation bands cycled inside each cell."""

    classes: tuple[str, ...] = tuple(CLASS_PHRASES)
    directions: tuple[str, ...] = tuple(DIRECTION_BINS)
    distances: tuple[str, ...] = tuple(DISTANCE_BINS)
    base_clips_per_cell: dict = field(
        default_factory=lambda: {"train": 21, "val": 4, "test": 10}
    )
    train_augmentations: int = 2
    sample_rate: int = 16000
    seed: int = 0
    max_image_order: int = 6
    include_mono: bool = True
    # keeping the critical distance in a band makes the direct-to-reverberant
    # ratio track source distance instead of room luck; the area band keeps
    # the implied reverberation targets inside the sampler's t30 range
    floor_area_band: tuple[float, float] = (25.0, 120.0)
    critical_distance_band: tuple[float, float] = (0.75, 1.15)

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("need at least 2 semantic classes")
        for c in self.classes:
            if c not in CLASS_PHRASES:
                raise ValueError(f"unknown semantic class {c!r}")
        for d in self.directions:
            if d not in DIRECTION_BINS:
                raise ValueError(f"unknown direction bin {d!r}")
        for d in self.distances:
            if d not in DISTANCE_BINS:
                raise ValueError(f"unknown distance bin {d!r}")
        if self.train_augmentations < 2:
            raise ValueError("train needs >= 2 augmentations per base clip")

    def records_per_split(self, split: str) -> int:
        cells = len(self.classes) * len(self.directions) * len(self.distances)
        augs = self.train_augmentations if split == "train" else 1
        return cells * self.base_clips_per_cell[split] * augs


# --------------------------------------------------- signal synthesis


def synth_class_signal(cls: str, rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    """Seeded synthetic mono clip (1.2 - 3.0 s) for one semantic class.

    Every class carries amplitude transients (swells, bursts, attacks):
    onsets and gaps are what make source distance audible through the
    direct-to-reverberant contrast after spatialization.
    """
    dur = rng.uniform(1.2, 3.0)
    n = int(dur * sample_rate)
    t = np.arange(n) / sample_rate
    if cls == "hum":
        f0 = rng.uniform(80.0, 160.0)
        vib = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(3, 6) * t)
        x = np.sin(2 * np.pi * f0 * vib * t) + 0.4 * np.sin(2 * np.pi * 2 * f0 * t)
        x *= 0.15 + 0.85 * np.abs(np.sin(np.pi * rng.uniform(0.8, 1.6) * t))  # slow swells
    elif cls == "siren":
        f_lo, f_hi = rng.uniform(350, 500), rng.uniform(900, 1300)
        sweep = f_lo + (f_hi - f_lo) * (0.5 - 0.5 * np.cos(2 * np.pi * t / dur))
        x = np.sin(2 * np.pi * np.cumsum(sweep) / sample_rate)
        x *= 0.2 + 0.8 * np.abs(np.sin(np.pi * rng.uniform(1.0, 2.0) * t))
    elif cls == "static":
        x = rng.standard_normal(n)
        spec = np.fft.rfft(x)
        freqs = np.fft.rfftfreq(n, 1 / sample_rate)
        spec[(freqs < 1500) | (freqs > 3500)] = 0
        x = np.fft.irfft(spec, n)
        gate = np.sin(2 * np.pi * rng.uniform(1.0, 3.0) * t + rng.uniform(0, 2 * np.pi))
        x *= 0.1 + 0.9 * (0.5 + 0.5 * np.tanh(6.0 * gate))  # smoothed bursts
    elif cls == "throb":
        x = rng.standard_normal(n)
        spec = np.fft.rfft(x)
        freqs = np.fft.rfftfreq(n, 1 / sample_rate)
        spec[(freqs < 300) | (freqs > 900)] = 0
        x = np.fft.irfft(spec, n)
        x *= 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(4, 8) * t)
    elif cls == "ticks":
        x = np.zeros(n)
        period = int(sample_rate / rng.uniform(6, 12))
        for start in range(int(period * rng.uniform(0.1, 0.9)), n, period):
            click = np.hanning(64) * np.sin(2 * np.pi * rng.uniform(1800, 2600) * t[:64])
            end = min(start + 64, n)
            x[start:end] += click[: end - start]
    elif cls == "chord":
        f0 = rng.uniform(200.0, 330.0)
        x = np.zeros(n)
        for h, w in ((1, 1.0), (2, 0.6), (3, 0.45), (5, 0.3)):
            x += w * np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi))
        # repeated strums: sharp attack, exponential release
        stride = int(sample_rate * rng.uniform(0.35, 0.7))
        env = np.zeros(n)
        for start in range(0, n, stride):
            seg = np.arange(n - start) / sample_rate
            env[start:] = np.maximum(env[start:], np.exp(-seg / rng.uniform(0.12, 0.3)))
        x *= env
    else:
        raise ValueError(f"unknown class {cls!r}")
    # soft attack/release so trim behaves
    edge = min(int(0.02 * sample_rate), n // 4)
    env = np.ones(n)
    env[:edge] = np.linspace(0, 1, edge)
    env[-edge:] = np.linspace(1, 0, edge)
    x = x * env
    peak = np.max(np.abs(x))
    return 0.7 * x / peak if peak > 0 else x


def _prep_mono(signal: np.ndarray, sample_rate: int) -> np.ndarray:
    x = loop_pad(trim_silence(signal), sample_rate)
    peak = np.max(np.abs(x))
    return x * (10 ** (-3 / 20) / peak) if peak > 0 else x


# per-record task: returns the manifest record after writing its audio
def _build_record(task: dict) -> dict:
    spec: SyntheticCorpusSpec = task["spec"]
    out_dir = Path(task["out_dir"])
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(spec.seed, 0xC0, task["index"])))

    cls = task["cls"]
    phrase = CLASS_PHRASES[cls][int(rng.integers(len(CLASS_PHRASES[cls])))]
    signal = synth_class_signal(cls, rng, spec.sample_rate)

    if not task["is_spatial"]:
        mono = _prep_mono(signal, spec.sample_rate)
        rel = f"audio/{task['record_id']}.wav"
        write_mono_wav(out_dir / rel, mono, spec.sample_rate)
        return {
            "id": task["record_id"],
            "audio_path": rel,
            "original_caption": phrase,
            "spatial_caption": phrase,
            "attributes": None,
            "room_id": None,
            "split": task["split"],
            "is_spatial": False,
        }

    # one attribute table (the train ranges) for all splits: the elevation
    # and distance probe classes need both poles present in every split;
    # rooms stay split-disjoint via the per-split seed salts
    bands = {
        "azimuth_deg": task["az_band"],
        "elevation_deg": task["el_band"],
        "distance_m": task["dist_band"],
        "floor_area_m2": spec.floor_area_band,
    }
    room = sample_room_indexed(
        task["split"],
        spec.seed,
        task["index"],
        dict(TRAIN_RANGES),
        target_bands=bands,
        max_image_order=spec.max_image_order,
        critical_distance_band=spec.critical_distance_band,
    )
    foa, attrs = spatialize(signal, room, spec.sample_rate)
    caption = build_spatial_caption(phrase, attrs_to_descriptors(attrs), rng)
    rel = f"audio/{task['record_id']}.wav"
    write_foa_wav(out_dir / rel, foa)
    return {
        "id": task["record_id"],
        "audio_path": rel,
        "original_caption": phrase,
        "spatial_caption": caption,
        "attributes": attrs.as_dict(),
        "room_id": task["room_id"],
        "split": task["split"],
        "is_spatial": True,
    }


def _record_from_dict(d: dict) -> ManifestRecord:
    return ManifestRecord(
        id=d["id"],
        audio_path=d["audio_path"],
        original_caption=d["original_caption"],
        spatial_caption=d["spatial_caption"],
        attributes=SpatialAttributes.from_dict(d["attributes"]) if d["attributes"] else None,
        room_id=d["room_id"],
        split=d["split"],
        is_spatial=d["is_spatial"],
    )


def make_synthetic_corpus(
    spec: SyntheticCorpusSpec, out_dir, splits=("train", "val", "test"), workers: int = 1
) -> Path:
    """Generate audio + manifest under out_dir; returns the manifest path.

    Spatial records cover every (class, direction, distance) cell, cycling
    elevation bands inside each cell; every base clip also gets one mono
    (non-spatial) sibling record when include_mono is set.
    """
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)

    tasks = []
    index = 0
    for split in splits:
        augs = spec.train_augmentations if split == "train" else 1
        bases = spec.base_clips_per_cell[split]
        cell = 0
        for cls in spec.classes:
            for direction in spec.directions:
                for distance in spec.distances:
                    for b in range(bases):
                        for a in range(augs):
                            k = b * augs + a
                            el_name, el_band = ELEVATION_BANDS[k % len(ELEVATION_BANDS)]
                            rid = f"{split}-c{cell:03d}-b{b:03d}-a{a}"
                            tasks.append(
                                {
                                    "spec": spec,
                                    "out_dir": str(out_dir),
                                    "index": index,
                                    "record_id": rid,
                                    "split": split,
                                    "cls": cls,
                                    "is_spatial": True,
                                    "az_band": DIRECTION_BINS[direction],
                                    "dist_band": DISTANCE_BINS[distance],
                                    "el_band": el_band,
                                    "room_id": f"{split}-room-{index:06d}",
                                }
                            )
                            index += 1
                        if spec.include_mono:
                            rid = f"{split}-c{cell:03d}-b{b:03d}-mono"
                            tasks.append(
                                {
                                    "spec": spec,
                                    "out_dir": str(out_dir),
                                    "index": index,
                                    "record_id": rid,
                                    "split": split,
                                    "cls": cls,
                                    "is_spatial": False,
                                    "room_id": None,
                                }
                            )
                            index += 1
                    cell += 1

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_build_record, tasks, chunksize=8))
    else:
        results = [_build_record(t) for t in tasks]

    records = sorted((_record_from_dict(r) for r in results), key=lambda r: r.id)
    audit_manifest(records)
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, records)
    return manifest_path


# ------------------------------------------------------------- featurize


def _featurize_one(task: dict) -> tuple[str, dict]:
    from .features import (
        FeatureParams,
        foa_stft,
        intensity_vectors,
        logmel,
        reduce_to_grid,
        replicate_mono,
    )

    root = Path(task["root"])
    params = FeatureParams(**task["params"])
    if task["is_spatial"]:
        foa = read_foa_wav(root / task["audio_path"])
    else:
        mono, sr = read_mono_wav(root / task["audio_path"])
        foa = replicate_mono(mono, sr)
    A = foa_stft(foa, params)
    logmel_grid = reduce_to_grid(logmel(A, params.mel_bands), task["sem_t"])  # (sem_t, V)
    # energy-weighted block means of the unit intensity vectors: loud
    # (direct-path) bins dominate, so the per-block resultant length is a
    # direct-to-reverberant coherence cue instead of averaging away
    ivs = intensity_vectors(A)
    w = np.abs(A.omni) ** 2
    wsum = reduce_to_grid(w[:, :, None], task["spa_t"], task["spa_f"])[:, :, 0]
    iv_grid = reduce_to_grid(ivs * w[:, :, None], task["spa_t"], task["spa_f"])
    iv_grid = iv_grid / np.maximum(wsum[:, :, None], 1e-300)
    coh_active = np.linalg.norm(iv_grid[:, :, 0:3], axis=-1, keepdims=True)
    coh_reactive = np.linalg.norm(iv_grid[:, :, 3:6], axis=-1, keepdims=True)
    iv_grid = np.concatenate([iv_grid, coh_active, coh_reactive], axis=-1)
    tensors = {
        "logmel": logmel_grid.astype(np.float64),
        "ivs": np.transpose(iv_grid, (2, 0, 1)),  # (8, spa_t, spa_f)
    }
    meta = {
        "sample_rate": foa.sample_rate,
        "win": params.win,
        "hop": params.hop,
        "is_spatial": task["is_spatial"],
    }
    return task["record_id"], {"meta": meta, "tensors": tensors}


def featurize_corpus(
    corpus_dir,
    out_path,
    feature_params: dict,
    sem_time_cells: int,
    spa_time_cells: int,
    spa_freq_cells: int,
    workers: int = 1,
) -> Path:
    """Extract reduced model-input grids for every manifest record into one
    feature cache file (records ordered by id, so bytes are reproducible)."""
    corpus_dir = Path(corpus_dir)
    records = read_manifest(corpus_dir / "manifest.jsonl")
    tasks = [
        {
            "root": str(corpus_dir),
            "record_id": r.id,
            "audio_path": r.audio_path,
            "is_spatial": r.is_spatial,
            "params": feature_params,
            "sem_t": sem_time_cells,
            "spa_t": spa_time_cells,
            "spa_f": spa_freq_cells,
        }
        for r in sorted(records, key=lambda r: r.id)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_featurize_one, tasks, chunksize=16))
    else:
        results = [_featurize_one(t) for t in tasks]
    cache = dict(results)
    out_path = Path(out_path)
    write_feature_cache(out_path, cache)
    return out_path
