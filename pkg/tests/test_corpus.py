"""Tests for WAV I/O, resampling, patch planning, manifests and feature extraction."""
import numpy as np
import pytest
import soundfile as sf

from app.corpus import (
    PatchPlan,
    build_manifest,
    cache_key,
    extract_corpus,
    extract_file,
    inspect_wav,
    load_wav,
    normalize_peak,
    prepare_clip,
    read_manifest,
    resample,
    segment_features,
    write_manifest,
    write_wav,
)
from app.exceptions import AudioFormatError, CorpusError, SampleRateError
from app.models import AudioClip, Domain, FeatureConfig, FeatureStack
from app.synthetic import render_clip

from tests.conftest import tone


def blank_stack(n_frames: int) -> FeatureStack:
    zeros = np.zeros((8, n_frames))
    return FeatureStack(mel=zeros, mfcc=zeros, sdiff=zeros, senv=zeros, phase=np.zeros((5, n_frames)))


def peak_hz(clip: AudioClip) -> float:
    spectrum = np.abs(np.fft.rfft(clip.samples))
    return np.argmax(spectrum) * clip.sample_rate / len(clip.samples)


class TestWav:
    def test_pcm16_full_scale(self, tmp_path):
        path = tmp_path / "max.wav"
        sf.write(str(path), np.full(100, 32767, dtype=np.int16), 22050, subtype="PCM_16")
        clip = load_wav(path)
        assert clip.sample_rate == 22050
        np.testing.assert_allclose(clip.samples, 32767 / 32768)
        assert clip.samples[0] == pytest.approx(0.99997, abs=1e-5)

    def test_stereo_is_averaged(self, tmp_path, rng):
        path = tmp_path / "stereo.wav"
        left = rng.integers(-20000, 20000, size=500).astype(np.int16)
        sf.write(str(path), np.stack([left, -left], axis=1), 44100, subtype="PCM_16")
        clip = load_wav(path)
        assert inspect_wav(path).channels == 2
        np.testing.assert_array_equal(clip.samples, np.zeros(500))

    def test_float32_file(self, tmp_path):
        path = tmp_path / "float.wav"
        sf.write(str(path), np.array([0.25, -0.5], dtype=np.float32), 48000, subtype="FLOAT")
        np.testing.assert_array_equal(load_wav(path).samples, [0.25, -0.5])

    def test_write_round_trip_is_exact(self, tmp_path, rng):
        codes = rng.integers(-32768, 32767, size=1000)
        clip = AudioClip(samples=codes / 32768.0, sample_rate=22050)
        write_wav(tmp_path / "rt.wav", clip)
        np.testing.assert_array_equal(load_wav(tmp_path / "rt.wav").samples, clip.samples)

    def test_write_clips_out_of_range(self, tmp_path):
        write_wav(tmp_path / "hot.wav", AudioClip(samples=[2.0, -2.0], sample_rate=22050))
        np.testing.assert_array_equal(load_wav(tmp_path / "hot.wav").samples, [32767 / 32768, -1.0])

    def test_unsupported_codec(self, tmp_path):
        path = tmp_path / "24.wav"
        sf.write(str(path), np.zeros(10), 22050, subtype="PCM_24")
        with pytest.raises(AudioFormatError) as info:
            load_wav(path)
        assert info.value.context["chunk"] == "fmt "

    def test_truncated_data_chunk(self, tmp_path):
        path = tmp_path / "cut.wav"
        sf.write(str(path), np.zeros(1000, dtype=np.int16), 22050, subtype="PCM_16")
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(AudioFormatError, match="truncated") as info:
            load_wav(path)
        assert info.value.context["chunk"] == "data"

    def test_not_riff(self, tmp_path):
        path = tmp_path / "junk.wav"
        path.write_bytes(b"not a wave file at all")
        with pytest.raises(AudioFormatError):
            load_wav(path)


class TestConditioning:
    def test_unsupported_rate(self):
        with pytest.raises(SampleRateError):
            resample(AudioClip(samples=np.zeros(100), sample_rate=16000))

    def test_target_rate_untouched(self, tone_clip):
        assert resample(tone_clip) is tone_clip

    def test_tone_survives_downsampling(self):
        out = resample(tone(440.0, sr=44100))
        assert out.sample_rate == 22050
        assert len(out.samples) == 22050
        assert abs(peak_hz(out) - 440.0) <= 1.0

    def test_above_new_nyquist_is_removed(self):
        source = tone(15000.0, sr=44100)
        out = resample(source)
        rms_in = np.sqrt(np.mean(source.samples ** 2))
        rms_out = np.sqrt(np.mean(out.samples ** 2))
        assert 20 * np.log10(rms_out / rms_in) <= -40.0

    def test_48k_length(self):
        assert len(resample(tone(440.0, sr=48000)).samples) == 22050

    def test_normalize_peak(self, rng):
        clip = AudioClip(samples=rng.uniform(-0.3, 0.2, 100), sample_rate=22050)
        assert np.max(np.abs(normalize_peak(clip).samples)) == pytest.approx(0.9)

    def test_silence_untouched(self):
        clip = AudioClip(samples=np.zeros(10), sample_rate=22050)
        np.testing.assert_array_equal(normalize_peak(clip).samples, clip.samples)

    def test_prepare_clip(self, tmp_path):
        write_wav(tmp_path / "t.wav", tone(440.0, sr=44100, amplitude=0.25))
        clip = prepare_clip(tmp_path / "t.wav")
        assert clip.sample_rate == 22050
        assert np.max(np.abs(clip.samples)) == pytest.approx(0.9)


class TestSegmentation:
    def test_ten_second_clip(self):
        plan = segment_features(blank_stack(854), 256)
        assert plan.patch_starts == [0, 256, 512]
        assert plan.offsets == range(599)

    def test_exactly_one_patch(self):
        plan = segment_features(blank_stack(256), 256)
        assert plan.patch_starts == [0]
        assert list(plan.offsets) == [0]

    def test_too_short(self, caplog):
        assert segment_features(blank_stack(255), 256, Domain.X) is None
        assert "Skipping clip" in caplog.text

    def test_plan_arithmetic(self):
        assert PatchPlan(n_frames=100, patch_frames=32).n_offsets == 69


class TestManifest:
    def test_build_sorted(self, fixture_corpus):
        manifest = read_manifest(fixture_corpus[Domain.X], Domain.X)
        assert manifest.paths == sorted(manifest.paths)
        assert len(manifest.entries) == 2
        assert manifest.total_duration == pytest.approx(4.0)

    def test_directory_input(self, fixture_corpus):
        directory = read_manifest(fixture_corpus[Domain.Y], Domain.Y).paths[0].parent
        assert len(build_manifest([directory], Domain.Y).entries) >= 2

    def test_relative_paths(self, tmp_path):
        write_wav(tmp_path / "a.wav", tone(440.0))
        (tmp_path / "list.txt").write_text("# clips\na.wav\n")
        manifest = read_manifest(tmp_path / "list.txt", Domain.X)
        assert manifest.paths == [tmp_path / "a.wav"]

    def test_write_then_read(self, fixture_corpus, tmp_path):
        manifest = read_manifest(fixture_corpus[Domain.X], Domain.X)
        write_manifest(manifest, tmp_path / "copy.txt")
        assert read_manifest(tmp_path / "copy.txt", Domain.X).paths == manifest.paths

    def test_missing_file(self, tmp_path):
        (tmp_path / "list.txt").write_text("absent.wav\n")
        with pytest.raises(CorpusError):
            read_manifest(tmp_path / "list.txt", Domain.X)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CorpusError):
            read_manifest(tmp_path / "nothing.txt", Domain.X)

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "list.txt").write_text("\n# nothing\n")
        with pytest.raises(CorpusError):
            read_manifest(tmp_path / "list.txt", Domain.X)


class TestExtraction:
    def test_cache_key_tracks_config(self, tmp_path):
        write_wav(tmp_path / "a.wav", tone(440.0))
        assert cache_key(tmp_path / "a.wav", FeatureConfig()) != cache_key(
            tmp_path / "a.wav", FeatureConfig(gamma=0.5)
        )

    def test_cached_extraction_is_stable(self, fixture_corpus, tmp_path, small_feature_config):
        manifest = read_manifest(fixture_corpus[Domain.X], Domain.X)
        first = extract_corpus(manifest, small_feature_config, cache_dir=tmp_path)
        assert len(list(tmp_path.glob("*.feat"))) == len(manifest.entries)
        second = extract_corpus(manifest, small_feature_config, cache_dir=tmp_path, jobs=2)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.mel, b.mel)
            np.testing.assert_array_equal(a.phase, b.phase)

    def test_parallel_matches_serial(self, fixture_corpus, small_feature_config):
        manifest = read_manifest(fixture_corpus[Domain.Y], Domain.Y)
        serial = extract_corpus(manifest, small_feature_config)
        parallel = extract_corpus(manifest, small_feature_config, jobs=2)
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.mel, b.mel)

    def test_duplicate_content_shares_one_entry(self, tmp_path, small_feature_config):
        for name in ("a.wav", "b.wav", "c.wav"):
            write_wav(tmp_path / name, tone(440.0))
        manifest = build_manifest([tmp_path / n for n in ("a.wav", "b.wav", "c.wav")], Domain.X)
        cache = tmp_path / "cache"
        stacks = extract_corpus(manifest, small_feature_config, cache_dir=cache, jobs=3)
        assert len(stacks) == 3
        assert [p.suffix for p in cache.iterdir()] == [".feat"]
        np.testing.assert_array_equal(stacks[0].mel, stacks[2].mel)

    def test_corrupt_cache_entry_is_rebuilt(self, tmp_path, small_feature_config):
        write_wav(tmp_path / "a.wav", tone(440.0))
        cache = tmp_path / "cache"
        stack = extract_file(tmp_path / "a.wav", small_feature_config, cache)
        entry = next(cache.glob("*.feat"))
        entry.write_bytes(b"garbage")
        rebuilt = extract_file(tmp_path / "a.wav", small_feature_config, cache)
        np.testing.assert_array_equal(rebuilt.mel, stack.mel)


class TestSynthetic:
    def test_render_clip(self, rng):
        for domain in Domain:
            clip = render_clip(domain, 1.0, rng)
            assert clip.sample_rate == 22050
            assert len(clip.samples) == 22050
            assert np.max(np.abs(clip.samples)) == pytest.approx(0.9)

    def test_fixture_corpus_layout(self, fixture_corpus):
        for domain, manifest in fixture_corpus.items():
            assert manifest.name == f"{domain.value}.txt"
            paths = read_manifest(manifest, domain).paths
            assert [p.name for p in paths] == ["clip_000.wav", "clip_001.wav"]
