"""Audio front end: STFT, omni-channel log-mel, and intensity vectors.

The intensity vectors are the per-bin active/reactive 3-vectors built
from the omni and dipole ambisonics channels, each scaled to unit norm
(zeroed when silent).  Mono audio replicated across all four channels
collapses to the constant active vector (1,1,1)/sqrt(3), which is the
cue the model uses to recognize non-spatial input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ambisonics import AmbisonicsSTFT, FOASignal

LOGMEL_EPS = 1e-10
# silence gate for intensity vectors, relative to the clip's peak intensity
# magnitude so the features are invariant to any positive gain
IV_REL_EPS = 1e-9


class TooShortSignalError(ValueError):
    """Signal shorter than one analysis window."""


@dataclass(frozen=True)
class FeatureParams:
    """STFT / filterbank settings.  Defaults target 48 kHz material;
    toy corpora at lower rates scale win/hop accordingly."""

    win: int = 1024
    hop: int = 480
    mel_bands: int = 64

    def __post_init__(self):
        if not (self.win >= self.hop > 0):
            raise ValueError(f"need win >= hop > 0, got win={self.win}, hop={self.hop}")
        if self.mel_bands < 1:
            raise ValueError("mel_bands must be >= 1")


@dataclass
class FeatureSet:
    """log-mel of the omni channel plus unit-norm intensity vectors."""

    logmel: np.ndarray  # (T, V)
    ivs: np.ndarray  # (T, F, 6): active xyz then reactive xyz (ACN dipole order)
    frame_times: np.ndarray  # (T,) seconds


def hann_window(win: int) -> np.ndarray:
    # periodic form, the standard analysis window for STFT
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)


def stft(signal: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Hann-windowed onesided STFT.

    Args:
        signal: (samples,) or (channels, samples).
    Returns:
        complex (T, F) or (channels, T, F) with F = win//2 + 1.
    """
    if not (win >= hop > 0):
        raise ValueError(f"need win >= hop > 0, got win={win}, hop={hop}")
    x = np.asarray(signal, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    n = x.shape[-1]
    if n < win:
        raise TooShortSignalError(f"signal length {n} < window {win}")
    t = 1 + (n - win) // hop
    w = hann_window(win)
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    frames = x[:, idx] * w  # (C, T, win)
    spec = np.fft.rfft(frames, axis=-1)
    return spec[0] if squeeze else spec


def foa_stft(foa: FOASignal, params: FeatureParams) -> AmbisonicsSTFT:
    """STFT all four FOA channels into an AmbisonicsSTFT (T, F, 4)."""
    spec = stft(foa.channels, params.win, params.hop)  # (4, T, F)
    return AmbisonicsSTFT(np.transpose(spec, (1, 2, 0)), foa.sample_rate, params.hop, order=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(num_bins: int, sample_rate: float, mel_bands: int) -> np.ndarray:
    """Triangular HTK-style filters spanning 0 Hz to Nyquist; shape (F, V),
    peak 1 (no area normalization)."""
    nyquist = sample_rate / 2.0
    edges_hz = mel_to_hz(np.linspace(0.0, float(hz_to_mel(nyquist)), mel_bands + 2))
    bin_hz = np.linspace(0.0, nyquist, num_bins)
    fb = np.zeros((num_bins, mel_bands))
    for v in range(mel_bands):
        lo, mid, hi = edges_hz[v], edges_hz[v + 1], edges_hz[v + 2]
        up = (bin_hz - lo) / max(mid - lo, 1e-12)
        down = (hi - bin_hz) / max(hi - mid, 1e-12)
        fb[:, v] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def logmel(A: AmbisonicsSTFT, mel_bands: int | None = None) -> np.ndarray:
    """log(|omni|^2 . W_mel + eps); only the omni channel carries semantics."""
    v = mel_bands if mel_bands is not None else FeatureParams().mel_bands
    power = np.abs(A.omni) ** 2  # (T, F)
    fb = mel_filterbank(A.num_bins, A.sample_rate, v)
    return np.log(power @ fb + LOGMEL_EPS)


def intensity_vectors(A: AmbisonicsSTFT) -> np.ndarray:
    """Unit-norm active and reactive intensity vectors, shape (T, F, 6).

    active = Re[conj(W) * (Y, Z, X)], reactive = Im[...]; the active and
    reactive 3-vectors are normalized independently.  Bins whose intensity
    magnitude falls below IV_REL_EPS times the clip's peak magnitude are
    zeroed (silent, or pure roundoff as in the reactive part of an ideal
    plane wave); the relative gate keeps features gain-invariant.
    """
    if A.order < 1:
        raise ValueError("intensity vectors need order >= 1")
    w = A.data[:, :, 0]
    dip = A.data[:, :, 1:4]  # ACN: (Y, Z, X)
    cross = np.conj(w)[:, :, None] * dip
    active = np.real(cross)
    reactive = np.imag(cross)
    norm_a = np.linalg.norm(active, axis=-1, keepdims=True)
    norm_r = np.linalg.norm(reactive, axis=-1, keepdims=True)
    gate = IV_REL_EPS * max(float(norm_a.max()), float(norm_r.max()), 1e-300)
    out = np.empty(A.data.shape[:2] + (6,), dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        out[:, :, 0:3] = np.where(norm_a > gate, active / norm_a, 0.0)
        out[:, :, 3:6] = np.where(norm_r > gate, reactive / norm_r, 0.0)
    return out


def replicate_mono(signal: np.ndarray, sample_rate: float) -> FOASignal:
    """Copy a single-channel signal across all four FOA channels."""
    s = np.asarray(signal, dtype=float).ravel()
    return FOASignal(np.tile(s, (4, 1)), sample_rate)


def extract_features(foa: FOASignal, params: FeatureParams) -> FeatureSet:
    A = foa_stft(foa, params)
    lm = logmel(A, params.mel_bands)
    ivs = intensity_vectors(A)
    times = (np.arange(A.num_frames) * params.hop + params.win / 2) / foa.sample_rate
    return FeatureSet(logmel=lm, ivs=ivs, frame_times=times)


def reduce_to_grid(arr: np.ndarray, out_rows: int, out_cols: int | None = None) -> np.ndarray:
    """Block-mean a (T, ...) array down to a fixed grid for batching.

    2D input (T, V) -> (out_rows, V or out_cols); 3D input (T, F, C)
    pools rows and the middle axis, keeping channels: (out_rows, out_cols, C).
    """
    x = np.asarray(arr, dtype=float)

    def pool_axis(a: np.ndarray, size: int, axis: int) -> np.ndarray:
        n = a.shape[axis]
        if n < size:
            raise ValueError(f"cannot pool axis of {n} into {size} cells")
        bounds = (np.arange(size + 1) * n) // size
        segments = np.add.reduceat(a, bounds[:-1], axis=axis)
        counts = np.diff(bounds).reshape([-1 if i == axis else 1 for i in range(a.ndim)])
        return segments / counts

    out = pool_axis(x, out_rows, 0)
    if out_cols is not None and x.ndim >= 2:
        out = pool_axis(out, out_cols, 1)
    return out


def mean_active_direction(A: AmbisonicsSTFT) -> np.ndarray:
    """Energy-weighted mean direction of arrival as a unit (x, y, z) vector.

    Sums the raw (unnormalized) active intensity over all bins, then maps
    the (y, z, x) dipole components back to (x, y, z).
    """
    w = A.data[:, :, 0]
    dip = A.data[:, :, 1:4]
    active = np.real(np.conj(w)[:, :, None] * dip).sum(axis=(0, 1))  # (y, z, x)
    vec = np.array([active[2], active[0], active[1]])
    n = np.linalg.norm(vec)
    if n == 0:
        raise ValueError("no directional energy in signal")
    return vec / n
