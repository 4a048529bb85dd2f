"""Tests for framing, STFT/ISTFT, cepstral transforms and the mel filterbank."""
import numpy as np
import pytest

from app.dsp import (
    dct_freq,
    dct_matrix,
    envelope_matrix,
    get_filterbank,
    hz_to_mel,
    idct_truncated,
    inverse_dct_matrix,
    istft,
    make_mel_filterbank,
    make_window,
    mel_to_hz,
    stft,
)
from app.exceptions import DomainError, ShapeError
from app.models import AudioClip, ComplexSpectrogram, WindowSpec


def naive_stft(x, spec, h):
    n_frames = (len(x) - spec.size) // spec.hop + 1
    k = np.arange(spec.size // 2 + 1)[:, None]
    m = np.arange(spec.size)[None, :]
    kernel = np.exp(-2j * np.pi * k * m / spec.size)
    out = np.zeros((spec.size // 2 + 1, n_frames), dtype=complex)
    for n in range(n_frames):
        out[:, n] = kernel @ (x[n * spec.hop:n * spec.hop + spec.size] * h)
    return out


class TestMelScale:
    def test_known_values(self):
        assert hz_to_mel(0.0) == pytest.approx(0.0)
        assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2))

    def test_round_trip(self):
        f = np.array([0.0, 100.0, 1000.0, 11025.0])
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, rtol=1e-12, atol=1e-9)

    def test_nyquist_reference_value(self):
        assert hz_to_mel(11025.0) == pytest.approx(3176.0, abs=0.5)

    def test_strictly_increasing_on_hertz_grid(self):
        mels = hz_to_mel(np.arange(0.0, 11026.0))
        assert np.all(np.diff(mels) > 0)

    def test_negative_frequency_rejected(self):
        with pytest.raises(DomainError):
            hz_to_mel(-1.0)
        with pytest.raises(DomainError):
            mel_to_hz(np.array([10.0, -5.0]))


class TestWindow:
    def test_periodic_hann(self):
        h = make_window(WindowSpec(size=8, hop=2))
        assert h[0] == 0.0
        assert h[4] == pytest.approx(1.0)
        np.testing.assert_allclose(h[1:4], h[7:4:-1])

    def test_squared_window_overlap_add_is_constant(self):
        spec = WindowSpec(size=2048, hop=256)
        h = make_window(spec)
        total = np.zeros(20 * spec.hop + spec.size)
        for n in range(21):
            total[n * spec.hop:n * spec.hop + spec.size] += h ** 2
        interior = total[spec.size:-spec.size]
        assert np.ptp(interior) < 1e-10
        assert interior[0] == pytest.approx(3.0)

    def test_degenerate_window(self):
        with pytest.raises(DomainError):
            make_window(WindowSpec(size=2, hop=1))


class TestStft:
    def test_matches_naive_dft(self, rng):
        for size in (16, 32, 64):
            spec = WindowSpec(size=size, hop=size // 4)
            x = rng.standard_normal(5 * size + 3)
            got = stft(AudioClip(samples=x, sample_rate=22050), spec)
            expected = naive_stft(x, spec, make_window(spec))
            np.testing.assert_allclose(got.complex, expected, atol=1e-10 * np.abs(expected).max())

    def test_default_framing_matches_naive_dft(self, rng):
        spec = WindowSpec(size=2048, hop=256)
        h = make_window(spec)
        kernel = np.exp(-2j * np.pi * np.outer(np.arange(1025), np.arange(2048)) / 2048)
        worst = 0.0
        for _ in range(100):
            x = rng.standard_normal(4096)
            got = stft(AudioClip(samples=x, sample_rate=22050), spec).complex
            frames = np.stack([x[n * 256:n * 256 + 2048] * h for n in range(got.shape[1])], axis=1)
            expected = kernel @ frames
            worst = max(worst, np.abs(got - expected).max() / np.abs(expected).max())
        assert worst < 1e-6

    def test_frame_count_of_ten_seconds(self):
        clip = AudioClip(samples=np.zeros(220500), sample_rate=22050)
        assert stft(clip, WindowSpec()).n_frames == 854

    def test_phase_range(self, rng):
        clip = AudioClip(samples=rng.standard_normal(4096), sample_rate=22050)
        phase = stft(clip, WindowSpec()).phase
        assert np.all(phase > -np.pi) and np.all(phase <= np.pi)

    def test_short_clip_advises_padding(self):
        clip = AudioClip(samples=np.zeros(100), sample_rate=22050)
        with pytest.raises(DomainError, match="zero-pad"):
            stft(clip, WindowSpec())

    def test_window_override_shape(self, rng):
        clip = AudioClip(samples=rng.standard_normal(4096), sample_rate=22050)
        with pytest.raises(ShapeError):
            stft(clip, WindowSpec(), window=np.ones(10))


class TestIstft:
    def test_perfect_reconstruction_interior(self, rng):
        spec = WindowSpec(size=2048, hop=256)
        x = rng.uniform(-1, 1, 22050)
        y = istft(stft(AudioClip(samples=x, sample_rate=22050), spec), spec).samples
        interior = slice(2048, len(y) - 2048)
        assert np.max(np.abs(y[interior] - x[: len(y)][interior])) < 1e-6

    def test_uncovered_edge_samples_are_zero(self, rng):
        spec = WindowSpec(size=64, hop=16)
        x = rng.uniform(-1, 1, 640)
        y = istft(stft(AudioClip(samples=x, sample_rate=22050), spec), spec).samples
        assert y[0] == 0.0

    def test_framing_mismatch(self, rng):
        spec = WindowSpec(size=64, hop=16)
        s = stft(AudioClip(samples=rng.standard_normal(640), sample_rate=22050), spec)
        with pytest.raises(ShapeError):
            istft(s, WindowSpec(size=64, hop=32))

    def test_interior_gap_raises(self):
        spec = WindowSpec(size=8, hop=8)
        window = np.array([0.0, 1, 1, 1, 1, 1, 1, 0.0])
        s = ComplexSpectrogram(
            magnitude=np.ones((5, 3)), phase=np.zeros((5, 3)), n_fft=8, hop=8, sample_rate=22050
        )
        from app.exceptions import ReconstructionError

        with pytest.raises(ReconstructionError):
            istft(s, spec, window=window)


class TestCepstrum:
    def test_dct_matches_naive_sum(self, rng):
        m = rng.uniform(0, 1, size=(12, 3))
        naive = np.zeros_like(m)
        for q in range(12):
            for f in range(12):
                naive[q] += m[f] * np.cos(np.pi / 12 * (f + 0.5) * q)
        np.testing.assert_allclose(dct_freq(m), naive, atol=1e-12)

    def test_constant_column(self):
        c = dct_freq(np.ones((8, 1)))
        assert c[0, 0] == pytest.approx(8.0)
        np.testing.assert_allclose(c[1:, 0], 0.0, atol=1e-12)

    def test_full_inverse(self, rng):
        m = rng.uniform(0, 1, size=(16, 4))
        np.testing.assert_allclose(idct_truncated(dct_freq(m), 15), m, atol=1e-12)

    def test_cutoff_out_of_range(self):
        with pytest.raises(DomainError):
            idct_truncated(np.zeros((8, 1)), 8)
        with pytest.raises(DomainError):
            envelope_matrix(8, -1)

    def test_matrices_agree_with_transforms(self, rng):
        m = rng.uniform(0, 1, size=(20, 5))
        np.testing.assert_allclose(dct_matrix(20) @ m, dct_freq(m), atol=1e-12)
        np.testing.assert_allclose(inverse_dct_matrix(20) @ dct_matrix(20), np.eye(20), atol=1e-12)
        np.testing.assert_allclose(envelope_matrix(20, 4) @ m, idct_truncated(dct_freq(m), 4), atol=1e-12)

    def test_cached_matrices_are_read_only(self):
        with pytest.raises(ValueError):
            dct_matrix(8)[0, 0] = 1.0


class TestFilterbank:
    def test_default_shape_and_peaks(self):
        fb = make_mel_filterbank(2048, 22050)
        assert fb.weights.shape == (256, 1025)
        assert np.all(fb.weights >= 0)
        np.testing.assert_allclose(fb.weights.max(axis=1), 1.0)
        assert np.all(np.count_nonzero(fb.weights, axis=1) >= 1)

    def test_edges_are_mel_spaced(self):
        fb = make_mel_filterbank(2048, 22050, n_mels=40)
        steps = np.diff(hz_to_mel(fb.edges_hz))
        np.testing.assert_allclose(steps, steps[0], rtol=1e-9)
        assert len(fb.center_frequencies) == 40

    def test_rejects_f_max_above_nyquist(self):
        with pytest.raises(DomainError):
            make_mel_filterbank(2048, 22050, f_max=12000.0)

    def test_rejects_empty_filters(self):
        with pytest.raises(DomainError, match="no FFT bin"):
            make_mel_filterbank(64, 22050, n_mels=256)

    def test_cached_filterbank_is_read_only(self):
        fb = get_filterbank()
        assert get_filterbank() is fb
        with pytest.raises(ValueError):
            fb.weights[0, 0] = 2.0
