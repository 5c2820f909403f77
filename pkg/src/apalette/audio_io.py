"""WAV I/O, procedural Foley-style clip synthesis, and dataset manifests."""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SAMPLE_RATE = 16000

SYNTH_KINDS = ("footsteps", "siren", "rain", "bark", "chirp")


def worker_count() -> int:
    """Worker parallelism bound, from APALETTE_THREADS (default 1)."""
    try:
        n = int(os.environ.get("APALETTE_THREADS", "1"))
    except ValueError:
        return 1
    return max(1, n)


class WavFormatError(ValueError):
    """Raised for WAV files this reader does not support."""


@dataclass
class AudioClip:
    """Mono sample buffer in [-1, 1] with its sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError(f"AudioClip is mono: expected 1-D samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be > 0, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self) -> int:
        return self.samples.size


# ---------------------------------------------------------------------------
# RIFF/WAVE reading and writing (mono PCM16 or IEEE float32 only)
# ---------------------------------------------------------------------------

_FMT_PCM = 1
_FMT_FLOAT = 3


def read_wav(path) -> AudioClip:
    """Read a mono PCM16 or float32 WAV file, normalizing samples to [-1, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            payload = body
        pos += 8 + chunk_size + (chunk_size & 1)
    if fmt is None or payload is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    audio_format, channels, rate, _byte_rate, _block_align, bits = fmt
    if channels != 1:
        raise WavFormatError(f"{path}: mono required, fmt chunk has channels={channels}")
    if audio_format == _FMT_PCM and bits == 16:
        raw = np.frombuffer(payload, dtype="<i2")
        samples = raw.astype(np.float32) / 32768.0
    elif audio_format == _FMT_FLOAT and bits == 32:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    else:
        raise WavFormatError(
            f"{path}: unsupported encoding, fmt chunk has audio_format={audio_format} bits={bits}"
        )
    return AudioClip(samples=samples, sample_rate=rate)


def write_wav(clip: AudioClip, path, encoding: str = "float32") -> None:
    """Write a mono WAV; encoding is 'pcm16' or 'float32'."""
    if encoding == "pcm16":
        fmt_tag, bits = _FMT_PCM, 16
        x = np.clip(clip.samples.astype(np.float64) * 32768.0, -32768, 32767)
        payload = np.round(x).astype("<i2").tobytes()
    elif encoding == "float32":
        fmt_tag, bits = _FMT_FLOAT, 32
        payload = clip.samples.astype("<f4").tobytes()
    else:
        raise ValueError(f"encoding must be 'pcm16' or 'float32', got {encoding!r}")
    block_align = bits // 8
    byte_rate = clip.sample_rate * block_align
    fmt_chunk = struct.pack("<HHIIHH", fmt_tag, 1, clip.sample_rate, byte_rate, block_align, bits)
    chunks = b"".join([
        b"fmt ", struct.pack("<I", len(fmt_chunk)), fmt_chunk,
        b"data", struct.pack("<I", len(payload)), payload,
        b"\x00" if len(payload) & 1 else b"",
    ])
    with open(path, "wb") as f:
        f.write(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)


# ---------------------------------------------------------------------------
# Procedural clip synthesis
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Recipe for one synthetic clip; a pure function of its fields."""

    kind: str
    duration: float
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f"duration must be > 0, got {self.duration}")
        if self.kind not in SYNTH_KINDS:
            raise ValueError(f"unknown kind {self.kind!r}, expected one of {SYNTH_KINDS}")


def _check_freq(name: str, value: float, sample_rate: int) -> float:
    nyquist = sample_rate / 2
    if not (0 < value < nyquist):
        raise ValueError(f"{name}={value} outside (0, {nyquist})")
    return float(value)


def _edge_ramp(n: int, sr: int, ms: float = 8.0) -> np.ndarray:
    k = min(n // 2, max(1, int(sr * ms / 1000)))
    env = np.ones(n)
    ramp = np.linspace(0.0, 1.0, k, endpoint=False)
    env[:k] = ramp
    env[n - k:] = ramp[::-1]
    return env


def _onepole_lowpass(x: np.ndarray, cutoff: float, sr: int) -> np.ndarray:
    from scipy.signal import lfilter
    a = float(np.exp(-2.0 * np.pi * cutoff / sr))
    return lfilter([1.0 - a], [1.0, -a], x)


def _resonator(x: np.ndarray, freq: float, sr: int, q: float = 20.0) -> np.ndarray:
    from scipy.signal import lfilter
    w = 2.0 * np.pi * freq / sr
    r = float(np.exp(-w / (2.0 * q)))
    out = lfilter([1.0], [1.0, -2.0 * r * np.cos(w), r * r], x)
    peak = np.max(np.abs(out))
    return out / peak if peak > 0 else out


def _synth_siren(n, sr, rng, params):
    f0 = _check_freq("f_start", params.get("f_start", 400.0), sr)
    f1 = _check_freq("f_end", params.get("f_end", 900.0), sr)
    t = np.arange(n) / sr
    freq = f0 + (f1 - f0) * t / (n / sr)
    phase = 2.0 * np.pi * np.cumsum(freq) / sr
    return 0.7 * np.sin(phase) * _edge_ramp(n, sr)


def _synth_footsteps(n, sr, rng, params):
    rate = float(params.get("rate", 2.5))
    decay = float(params.get("decay", 0.06))
    out = np.zeros(n)
    step = max(1, int(sr / rate))
    burst_len = min(n, int(sr * decay * 4))
    env = np.exp(-np.arange(burst_len) / (sr * decay))
    start = int(rng.uniform(0, 0.3) * step)
    while start < n:
        m = min(burst_len, n - start)
        amp = 0.5 + 0.3 * rng.random()
        out[start:start + m] += amp * env[:m] * rng.standard_normal(m)
        start += step + int(rng.integers(-step // 8, step // 8 + 1))
    return 0.8 * out / max(1e-9, np.max(np.abs(out)))


def _synth_rain(n, sr, rng, params):
    cutoff = _check_freq("cutoff", params.get("cutoff", 3000.0), sr)
    level = float(params.get("level", 0.4))
    noise = rng.standard_normal(n)
    body = _onepole_lowpass(noise, cutoff, sr)
    # slow amplitude drift so the loudness contour is not flat
    drift_pts = rng.uniform(0.6, 1.0, size=8)
    drift = np.interp(np.linspace(0, 7, n), np.arange(8), drift_pts)
    out = body * drift
    return level * out / max(1e-9, np.max(np.abs(out))) * _edge_ramp(n, sr)


def _synth_bark(n, sr, rng, params):
    f_res = _check_freq("f_res", params.get("f_res", 450.0), sr)
    n_bursts = int(params.get("n_bursts", 3))
    out = np.zeros(n)
    gap = n // max(1, n_bursts)
    burst_len = min(gap, int(0.15 * sr))
    for b in range(n_bursts):
        start = b * gap + int(rng.uniform(0, 0.2) * gap)
        if start >= n:
            break
        m = min(burst_len, n - start)
        exc = rng.standard_normal(m) * np.exp(-np.arange(m) / (0.02 * sr))
        tone = _resonator(exc, f_res * (1.0 + 0.1 * rng.standard_normal()), sr)
        env = np.exp(-np.arange(m) / (0.05 * sr))
        out[start:start + m] += tone[:m] * env
    return 0.8 * out / max(1e-9, np.max(np.abs(out)))


def _synth_chirp(n, sr, rng, params):
    f_lo = _check_freq("f_lo", params.get("f_lo", 2000.0), sr)
    f_hi = _check_freq("f_hi", params.get("f_hi", 4000.0), sr)
    n_notes = int(params.get("n_notes", 5))
    out = np.zeros(n)
    note_len = int(0.08 * sr)
    for _ in range(n_notes):
        start = int(rng.uniform(0, max(1, n - note_len)))
        m = min(note_len, n - start)
        t = np.arange(m) / sr
        f = f_lo + (f_hi - f_lo) * t / (note_len / sr)
        phase = 2.0 * np.pi * np.cumsum(f) / sr
        out[start:start + m] += 0.6 * np.sin(phase) * np.hanning(m)
    peak = np.max(np.abs(out))
    return 0.7 * out / peak if peak > 0 else out


_GENERATORS = {
    "siren": _synth_siren,
    "footsteps": _synth_footsteps,
    "rain": _synth_rain,
    "bark": _synth_bark,
    "chirp": _synth_chirp,
}


def synth_clip(spec: SynthSpec, sample_rate: int = DEFAULT_SAMPLE_RATE) -> AudioClip:
    """Render a SynthSpec; deterministic for a fixed spec (seed included)."""
    n = int(round(spec.duration * sample_rate))
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    samples = _GENERATORS[spec.kind](n, sample_rate, rng, spec.params)
    samples = np.clip(samples, -1.0, 1.0)
    return AudioClip(samples=samples.astype(np.float32), sample_rate=sample_rate)


# ---------------------------------------------------------------------------
# Dataset building
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    caption: str
    tag: str


@dataclass
class DatasetManifest:
    """Ordered (audio path, caption, class tag) records; paths relative to base_dir."""

    entries: list
    base_dir: str = "."

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")
        for e in self.entries:
            if not e.caption:
                raise ValueError(f"empty caption for {e.path}")

    def abs_path(self, entry: ManifestEntry) -> str:
        return os.path.join(self.base_dir, entry.path)

    def save(self, path) -> None:
        lines = [f"{e.path}\t{e.caption}\t{e.tag}\n" for e in self.entries]
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.writelines(lines)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        entries = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                rel, caption, tag = line.split("\t")
                entries.append(ManifestEntry(rel, caption, tag))
        return cls(entries=entries, base_dir=os.path.dirname(os.path.abspath(path)))


# Caption templates are fixed six-token sentences so every caption in a corpus
# tokenizes to the same length (lets training batch text without padding).
def _caption(kind: str, params: dict) -> str:
    if kind == "siren":
        word = "upward" if params["f_end"] >= params["f_start"] else "downward"
        return f"a siren sweeping {word} in pitch"
    if kind == "footsteps":
        word = "quick" if params["rate"] >= 3.0 else "slow"
        return f"{word} footsteps walking on hard ground"
    if kind == "rain":
        word = "heavy" if params["level"] >= 0.45 else "soft"
        return f"{word} rain pattering on a roof"
    if kind == "bark":
        word = "big" if params["f_res"] < 500.0 else "small"
        return f"a {word} dog barking short bursts"
    if kind == "chirp":
        word = "high" if params["f_hi"] >= 3000.0 else "low"
        return f"a {word} bird chirping brief notes"
    raise ValueError(f"unknown kind {kind!r}")


def _draw_spec(kind: str, duration: float, seed: int, rng) -> SynthSpec:
    if kind == "siren":
        f0 = rng.uniform(200.0, 700.0)
        f1 = f0 * rng.uniform(1.5, 3.0) if rng.random() < 0.5 else f0 * rng.uniform(0.3, 0.7)
        params = {"f_start": f0, "f_end": f1}
    elif kind == "footsteps":
        params = {"rate": rng.uniform(1.5, 5.0), "decay": rng.uniform(0.03, 0.09)}
    elif kind == "rain":
        params = {"cutoff": rng.uniform(1500.0, 5000.0), "level": rng.uniform(0.25, 0.6)}
    elif kind == "bark":
        params = {"f_res": rng.uniform(250.0, 800.0), "n_bursts": int(rng.integers(2, 5))}
    else:  # chirp
        f_lo = rng.uniform(1200.0, 2500.0)
        params = {"f_lo": f_lo, "f_hi": f_lo * rng.uniform(1.4, 2.4), "n_notes": int(rng.integers(3, 8))}
    return SynthSpec(kind=kind, duration=duration, params=params, seed=seed)


def build_dataset(n_clips: int, seed: int, out_dir,
                  sample_rate: int = DEFAULT_SAMPLE_RATE,
                  duration_range: tuple = (1.0, 4.0),
                  kinds: tuple = SYNTH_KINDS) -> DatasetManifest:
    """Synthesize n_clips WAVs under out_dir/clips plus out_dir/manifest.tsv."""
    if n_clips < 1:
        raise ValueError(f"n_clips must be >= 1, got {n_clips}")
    out_dir = str(out_dir)
    clips_dir = os.path.join(out_dir, "clips")
    os.makedirs(clips_dir, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))

    jobs = []
    entries = []
    lo, hi = duration_range
    for i in range(n_clips):
        kind = kinds[i % len(kinds)]
        duration = float(rng.uniform(lo, hi))
        clip_seed = int(rng.integers(0, 2**63 - 1))
        spec = _draw_spec(kind, duration, clip_seed, rng)
        rel = f"clips/{i:04d}.wav"
        jobs.append((spec, os.path.join(out_dir, rel)))
        entries.append(ManifestEntry(rel, _caption(kind, spec.params), kind))

    def render(job):
        spec, path = job
        write_wav(synth_clip(spec, sample_rate), path, encoding="float32")

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(render, jobs))
    else:
        for job in jobs:
            render(job)

    manifest = DatasetManifest(entries=entries, base_dir=out_dir)
    manifest.save(os.path.join(out_dir, "manifest.tsv"))
    return manifest
