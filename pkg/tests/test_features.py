import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elsa import features as ft
from elsa import sphmath as sm
from elsa.ambisonics import FOASignal, planewave_foa


def random_direction(rng):
    return sm.SphericalDirection(rng.uniform(-math.pi, math.pi), math.asin(rng.uniform(-1, 1)))


class TestSTFT:
    def test_sine_at_bin_center_concentrates(self):
        # Hann mainlobe spans the center bin +-1; >95% of the frame energy
        # lives there and the peak sits on the exact bin
        sr, win, hop = 16000, 512, 256
        bin_idx = 20
        f = bin_idx * sr / win
        t = np.arange(sr) / sr
        spec = ft.stft(np.sin(2 * np.pi * f * t), win, hop)
        frame = np.abs(spec[3]) ** 2
        assert int(np.argmax(frame)) == bin_idx
        assert frame[bin_idx - 1 : bin_idx + 2].sum() / frame.sum() > 0.95

    def test_zero_signal(self):
        spec = ft.stft(np.zeros(2048), 512, 256)
        assert np.all(spec == 0)

    def test_parseval_per_frame(self):
        rng = np.random.default_rng(0)
        win, hop = 512, 256
        x = rng.standard_normal(4096)
        spec = ft.stft(x, win, hop)
        w = ft.hann_window(win)
        for ti in range(3):
            seg = x[ti * hop : ti * hop + win] * w
            time_energy = np.sum(seg**2)
            s = np.abs(spec[ti]) ** 2
            freq_energy = (s[0] + 2 * s[1:-1].sum() + s[-1]) / win
            assert freq_energy == pytest.approx(time_energy, rel=1e-6)

    def test_too_short(self):
        with pytest.raises(ft.TooShortSignalError):
            ft.stft(np.zeros(100), 512, 256)

    def test_multichannel_shape(self):
        spec = ft.stft(np.zeros((4, 2048)), 512, 256)
        assert spec.shape == (4, 7, 257)


class TestLogMel:
    def _stft(self, signal, sr=16000):
        foa = ft.replicate_mono(signal, sr)
        return ft.foa_stft(foa, ft.FeatureParams(win=512, hop=256, mel_bands=48))

    def test_zero_audio_is_log_eps(self):
        A = self._stft(np.zeros(2048))
        lm = ft.logmel(A, 48)
        assert np.allclose(lm, math.log(1e-10))
        assert lm[0, 0] == pytest.approx(-23.03, abs=0.01)

    def test_gain_shift_log_law(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(4096)
        lm1 = ft.logmel(self._stft(x), 48)
        lm10 = ft.logmel(self._stft(10 * x), 48)
        diff = lm10 - lm1
        # bands with real signal shift by exactly 2 ln 10
        live = lm1 > math.log(1e-10) + 5
        assert np.max(np.abs(diff[live] - 2 * math.log(10))) < 1e-6

    def test_white_noise_band_mass(self):
        # average band energy tracks the filterbank mass per band; each band
        # must sit within 5 sigma of the oracle prediction (per-bin powers
        # are ~exponential, so relative std per band is sqrt(sum w^2)/sum w
        # over the frame count), and the aggregate deviation within 10%
        rng = np.random.default_rng(3)
        sr, win, v, frames = 48000, 1024, 64, 100
        x = rng.standard_normal(win * frames)
        spec = ft.stft(x, win, win)  # non-overlapping: independent frames
        power = np.abs(spec) ** 2
        fb = ft.mel_filterbank(win // 2 + 1, sr, v)
        band_energy = (power @ fb).mean(axis=0)
        mass = fb.sum(axis=0)
        ratio = band_energy / mass
        dev = np.abs(ratio / ratio.mean() - 1.0)
        sigma = np.sqrt((fb**2).sum(axis=0)) / mass / math.sqrt(frames)
        assert np.all(dev < 5.0 * sigma)
        assert float(np.mean(dev)) < 0.10

    def test_only_omni_channel_used(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(4096)
        foa1 = FOASignal(np.stack([x, np.zeros_like(x), np.zeros_like(x), np.zeros_like(x)]), 16000)
        foa2 = FOASignal(np.stack([x, x, -x, 0.5 * x]), 16000)
        p = ft.FeatureParams(win=512, hop=256, mel_bands=48)
        lm1 = ft.logmel(ft.foa_stft(foa1, p), 48)
        lm2 = ft.logmel(ft.foa_stft(foa2, p), 48)
        assert np.array_equal(lm1, lm2)


class TestIntensityVectors:
    def _features(self, foa, win=512, hop=256):
        return ft.foa_stft(foa, ft.FeatureParams(win=win, hop=hop, mel_bands=48))

    def test_plane_wave_recovers_direction(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            d = random_direction(rng)
            foa = planewave_foa(d, rng.standard_normal(4096), 16000)
            A = self._features(foa)
            v = ft.mean_active_direction(A)
            ang = math.degrees(math.acos(np.clip(np.dot(v, d.unit_vector()), -1, 1)))
            assert ang < 1.0

    def test_iv_components_are_yzx_of_direction(self):
        rng = np.random.default_rng(5)
        d = random_direction(rng)
        foa = planewave_foa(d, rng.standard_normal(4096), 16000)
        ivs = ft.intensity_vectors(self._features(foa))
        x, y, z = d.unit_vector()
        live = np.linalg.norm(ivs[:, :, :3], axis=-1) > 0.5
        active = ivs[live][:, :3]
        assert np.max(np.abs(active - np.array([y, z, x]))) < 0.02

    def test_mono_replication_constant_pattern(self):
        rng = np.random.default_rng(6)
        foa = ft.replicate_mono(rng.standard_normal(4096), 16000)
        ivs = ft.intensity_vectors(self._features(foa))
        active = ivs[:, :, :3]
        reactive = ivs[:, :, 3:]
        norms = np.linalg.norm(active, axis=-1)
        live = norms > 0.5
        expect = np.ones(3) / math.sqrt(3)
        assert np.max(np.abs(active[live] - expect)) < 1e-9
        assert np.max(np.abs(reactive[live])) < 1e-9

    def test_silent_bins_zero(self):
        foa = ft.replicate_mono(np.zeros(4096), 16000)
        ivs = ft.intensity_vectors(self._features(foa))
        assert np.all(ivs == 0)

    def test_unit_norm_invariant(self):
        rng = np.random.default_rng(7)
        d = random_direction(rng)
        foa = planewave_foa(d, rng.standard_normal(4096), 16000)
        ivs = ft.intensity_vectors(self._features(foa))
        norms = np.linalg.norm(ivs[:, :, :3], axis=-1)
        assert np.all((norms < 1 + 1e-6))

    def test_gain_invariance(self):
        rng = np.random.default_rng(8)
        d = random_direction(rng)
        s = rng.standard_normal(4096)
        for c in (0.1, 3.0, 250.0):
            iv1 = ft.intensity_vectors(self._features(planewave_foa(d, s, 16000)))
            iv2 = ft.intensity_vectors(self._features(planewave_foa(d, c * s, 16000)))
            assert np.max(np.abs(iv1 - iv2)) < 1e-9

    def test_per_frame_direction_stability(self):
        rng = np.random.default_rng(9)
        d = random_direction(rng)
        foa = planewave_foa(d, rng.standard_normal(16000), 16000)
        A = self._features(foa)
        w = A.data[:, :, 0]
        dip = A.data[:, :, 1:4]
        per_frame = np.real(np.conj(w)[:, :, None] * dip).sum(axis=1)
        per_frame /= np.linalg.norm(per_frame, axis=1, keepdims=True)
        angles = np.degrees(np.arccos(np.clip(per_frame @ per_frame[0], -1, 1)))
        assert np.std(angles) < 0.5


class TestReplicateMono:
    def test_four_identical_channels(self):
        s = np.arange(10.0)
        foa = ft.replicate_mono(s, 8000)
        assert foa.channels.shape == (4, 10)
        for ch in range(4):
            assert np.array_equal(foa.channels[ch], s)

    def test_logmel_matches_omni_only(self):
        rng = np.random.default_rng(10)
        s = rng.standard_normal(4096)
        p = ft.FeatureParams(win=512, hop=256, mel_bands=48)
        rep = ft.foa_stft(ft.replicate_mono(s, 16000), p)
        solo = FOASignal(np.stack([s, np.zeros_like(s), np.zeros_like(s), np.zeros_like(s)]), 16000)
        assert np.array_equal(ft.logmel(rep, 48), ft.logmel(ft.foa_stft(solo, p), 48))


class TestReduceToGrid:
    def test_exact_block_means(self):
        x = np.arange(12.0).reshape(6, 2)
        out = ft.reduce_to_grid(x, 3)
        assert out.shape == (3, 2)
        assert np.allclose(out[0], x[:2].mean(axis=0))

    def test_3d_pooling(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((30, 17, 6))
        out = ft.reduce_to_grid(x, 5, 4)
        assert out.shape == (5, 4, 6)
        assert out.mean() == pytest.approx(x.mean(), abs=0.08)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            ft.reduce_to_grid(np.zeros((3, 4)), 8)


class TestExtract:
    def test_deterministic(self):
        rng = np.random.default_rng(12)
        foa = ft.replicate_mono(rng.standard_normal(8192), 16000)
        p = ft.FeatureParams(win=512, hop=256, mel_bands=48)
        f1 = ft.extract_features(foa, p)
        f2 = ft.extract_features(foa, p)
        assert np.array_equal(f1.logmel, f2.logmel)
        assert np.array_equal(f1.ivs, f2.ivs)
        assert f1.logmel.shape[1] == 48
        assert f1.ivs.shape[2] == 6
