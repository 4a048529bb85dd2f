"""
Timbre Corpus I/O.
WAV decoding and encoding, resampling, peak normalization, manifests,
training-patch planning and the cached per-clip feature extraction.
"""
import hashlib
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from math import gcd
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import soundfile as sf
from pydantic import BaseModel, Field
from scipy.signal import resample_poly

from app.checkpoint import load_feature_stack, save_feature_stack
from app.exceptions import AudioFormatError, CheckpointError, CorpusError, SampleRateError
from app.features import extract_stack
from app.metrics import get_metrics_collector
from app.models import (
    AudioClip,
    CorpusManifest,
    Domain,
    FeatureConfig,
    FeatureStack,
    ManifestEntry,
    Split,
)

logger = logging.getLogger(__name__)

SUPPORTED_RATES = (22050, 44100, 48000)
TARGET_RATE = 22050
PEAK_LEVEL = 0.9
KAISER_BETA = 5.0
PCM16_SCALE = 32768.0

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

PathLike = Union[str, Path]


# ==================== WAV ====================


class WavFormat(BaseModel):
    """Fields of the fmt chunk that decoding depends on."""
    format_tag: int
    channels: int
    sample_rate: int
    bits_per_sample: int
    data_bytes: int


def inspect_wav(path: PathLike) -> WavFormat:
    """Walk the RIFF chunks; unsupported codecs and truncation name the offending chunk."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise AudioFormatError(f"cannot read {path}: {e}", path=str(path)) from e

    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError(f"{path} is not a RIFF/WAVE file", path=str(path), chunk="RIFF")

    offset = 12
    fmt: Optional[tuple] = None
    while offset + 8 <= len(data):
        chunk_id, size = struct.unpack("<4sI", data[offset:offset + 8])
        body = data[offset + 8:offset + 8 + size]
        name = chunk_id.decode("ascii", errors="replace")
        if chunk_id == b"fmt ":
            if size < 16 or len(body) < 16:
                raise AudioFormatError(f"malformed fmt chunk in {path}", path=str(path), chunk=name)
            tag, channels, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
            if tag == WAVE_FORMAT_EXTENSIBLE and len(body) >= 26:
                tag = struct.unpack("<H", body[24:26])[0]
            fmt = (tag, channels, rate, bits)
        elif chunk_id == b"data":
            if fmt is None:
                raise AudioFormatError(f"data chunk precedes fmt chunk in {path}", path=str(path), chunk=name)
            if len(body) < size:
                raise AudioFormatError(
                    f"data chunk of {path} is truncated: {len(body)} of {size} bytes",
                    path=str(path),
                    chunk=name,
                )
            tag, channels, rate, bits = fmt
            supported = (tag == WAVE_FORMAT_PCM and bits == 16) or (
                tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32
            )
            if not supported:
                raise AudioFormatError(
                    f"unsupported codec in fmt chunk of {path}: format {tag:#06x}, {bits} bits",
                    path=str(path),
                    chunk="fmt ",
                )
            if channels not in (1, 2):
                raise AudioFormatError(
                    f"{path} has {channels} channels; 1 or 2 supported",
                    path=str(path),
                    chunk="fmt ",
                )
            return WavFormat(
                format_tag=tag,
                channels=channels,
                sample_rate=rate,
                bits_per_sample=bits,
                data_bytes=size,
            )
        offset += 8 + size + (size & 1)

    missing = "fmt " if fmt is None else "data"
    raise AudioFormatError(f"{path} has no {missing!r} chunk", path=str(path), chunk=missing)


def load_wav(path: PathLike) -> AudioClip:
    """Decode a WAV file to a mono clip scaled to [-1, 1] (channel mean)."""
    fmt = inspect_wav(path)
    try:
        if fmt.format_tag == WAVE_FORMAT_PCM:
            raw, rate = sf.read(str(path), dtype="int16", always_2d=True)
            samples = raw.astype(np.float64) / PCM16_SCALE
        else:
            samples, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except RuntimeError as e:
        raise AudioFormatError(f"cannot decode {path}: {e}", path=str(path)) from e
    return AudioClip(samples=samples.mean(axis=1), sample_rate=rate)


def write_wav(path: PathLike, clip: AudioClip) -> None:
    """16-bit PCM mono; samples are rounded to the nearest code and clipped."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    codes = np.clip(np.round(clip.samples * PCM16_SCALE), -PCM16_SCALE, PCM16_SCALE - 1)
    sf.write(str(path), codes.astype(np.int16), clip.sample_rate, subtype="PCM_16")


# ==================== Conditioning ====================


def resample(clip: AudioClip, target: int = TARGET_RATE) -> AudioClip:
    """Kaiser-windowed sinc polyphase resampling."""
    if clip.sample_rate not in SUPPORTED_RATES:
        raise SampleRateError(
            f"sample rate {clip.sample_rate} Hz not supported; convert to one of {SUPPORTED_RATES}",
            sample_rate=clip.sample_rate,
        )
    if clip.sample_rate == target:
        return clip
    g = gcd(target, clip.sample_rate)
    up, down = target // g, clip.sample_rate // g
    logger.info(f"Resampling {clip.sample_rate} Hz -> {target} Hz ({up}/{down})")
    samples = resample_poly(clip.samples, up, down, window=("kaiser", KAISER_BETA))
    return AudioClip(samples=samples, sample_rate=target)


def normalize_peak(clip: AudioClip, level: float = PEAK_LEVEL) -> AudioClip:
    peak = float(np.max(np.abs(clip.samples), initial=0.0))
    if peak == 0.0:
        return clip
    return AudioClip(samples=clip.samples * (level / peak), sample_rate=clip.sample_rate)


def prepare_clip(path: PathLike, target: int = TARGET_RATE, peak_level: float = PEAK_LEVEL) -> AudioClip:
    """load_wav -> resample -> peak normalization."""
    return normalize_peak(resample(load_wav(path), target), peak_level)


# ==================== Patches ====================


class PatchPlan(BaseModel):
    """Training patches available in one clip."""
    n_frames: int = Field(ge=0)
    patch_frames: int = Field(gt=0)

    @property
    def patch_starts(self) -> List[int]:
        """Non-overlapping patch offsets."""
        return [i * self.patch_frames for i in range(self.n_frames // self.patch_frames)]

    @property
    def n_offsets(self) -> int:
        return self.n_frames - self.patch_frames + 1

    @property
    def offsets(self) -> range:
        """All valid random-crop offsets."""
        return range(self.n_offsets)


def segment_features(
    stack: FeatureStack,
    patch_frames: int = 256,
    domain: Optional[Domain] = None,
) -> Optional[PatchPlan]:
    """Patch plan of a stack, or None (with a warning) when it is shorter than one patch."""
    if stack.n_frames < patch_frames:
        logger.warning(
            f"Skipping clip with {stack.n_frames} frames; a training patch needs {patch_frames}"
        )
        if domain is not None:
            get_metrics_collector().record_skipped_clip(domain.value)
        return None
    return PatchPlan(n_frames=stack.n_frames, patch_frames=patch_frames)


# ==================== Manifests ====================


def _entry(path: Path) -> ManifestEntry:
    if not path.is_file():
        raise CorpusError(f"audio file {path} does not exist", path=str(path))
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise AudioFormatError(f"cannot read {path}: {e}", path=str(path)) from e
    if info.frames == 0:
        raise CorpusError(f"audio file {path} is empty", path=str(path))
    return ManifestEntry(path=path, duration=info.frames / info.samplerate, sample_rate=info.samplerate)


def build_manifest(
    paths: Iterable[PathLike],
    domain: Domain,
    split: Split = Split.TRAIN,
) -> CorpusManifest:
    """Manifest over the given files or directories (recursively *.wav), sorted by path."""
    files: List[Path] = []
    for item in paths:
        item = Path(item)
        files.extend(sorted(item.rglob("*.wav")) if item.is_dir() else [item])
    entries = [_entry(p) for p in sorted(set(files))]
    return CorpusManifest(domain=domain, split=split, entries=entries)


def read_manifest(path: PathLike, domain: Domain, split: Split = Split.TRAIN) -> CorpusManifest:
    """One audio path per line; relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"manifest {path} does not exist", path=str(path))
    files = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        item = Path(line)
        files.append(item if item.is_absolute() else path.parent / item)
    if not files:
        raise CorpusError(f"manifest {path} lists no audio files", path=str(path))
    return build_manifest(files, domain, split)


def write_manifest(manifest: CorpusManifest, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [str(p) for p in sorted(manifest.paths)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ==================== Feature cache ====================


def cache_key(path: PathLike, config: FeatureConfig, peak_level: float = PEAK_LEVEL) -> str:
    """Content hash of the audio bytes and every parameter that shapes the features."""
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    digest.update(config.model_dump_json().encode("utf-8"))
    digest.update(repr(peak_level).encode("utf-8"))
    return digest.hexdigest()


def extract_file(
    path: PathLike,
    config: FeatureConfig,
    cache_dir: Optional[Path] = None,
    peak_level: float = PEAK_LEVEL,
    key: Optional[str] = None,
) -> FeatureStack:
    """
    Feature stack of one file. With a cache directory the stack is read from,
    or written to, <cache_dir>/<key>.feat and always returned as stored.
    """
    if cache_dir is None:
        return extract_stack(prepare_clip(path, config.sample_rate, peak_level), config)

    key = key or cache_key(path, config, peak_level)
    target = Path(cache_dir) / f"{key}.feat"
    if target.exists():
        try:
            return load_feature_stack(target)
        except CheckpointError as e:
            logger.warning(f"Discarding unreadable cache entry {target}: {e}")
    stack = extract_stack(prepare_clip(path, config.sample_rate, peak_level), config)
    save_feature_stack(stack, target)
    return load_feature_stack(target)


def extract_corpus(
    manifest: CorpusManifest,
    config: FeatureConfig,
    cache_dir: Optional[Path] = None,
    jobs: int = 1,
    peak_level: float = PEAK_LEVEL,
) -> List[FeatureStack]:
    """Extract every clip of a manifest, in manifest order, on `jobs` worker threads."""
    collector = get_metrics_collector()
    domain = manifest.domain.value

    # Clips with identical content share one cache entry and are extracted once.
    if cache_dir is None:
        keys = [str(path.resolve()) for path in manifest.paths]
    else:
        keys = [cache_key(path, config, peak_level) for path in manifest.paths]
    unique: Dict[str, Path] = {}
    for key, path in zip(keys, manifest.paths):
        unique.setdefault(key, path)

    def work(item: Tuple[str, Path]) -> FeatureStack:
        key, path = item
        started = time.perf_counter()
        stack = extract_file(path, config, cache_dir, peak_level, key=key if cache_dir else None)
        collector.record_extraction(domain, time.perf_counter() - started)
        return stack

    if jobs <= 1:
        extracted = [work(item) for item in unique.items()]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            extracted = list(pool.map(work, unique.items()))
    by_key = dict(zip(unique, extracted))
    stacks = [by_key[key] for key in keys]
    logger.info(f"Extracted {len(stacks)} clips for domain {domain}")
    return stacks
