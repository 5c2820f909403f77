"""Time-varying control-signal extraction and training-time transformations.

Four per-frame signals are extracted on a shared frame grid: RMS loudness,
fundamental frequency, spectral centroid, and 13 mel-cepstral coefficients.
All extractors are deterministic pure functions of (clip, grid).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np
import scipy.fft

from . import kernels
from .audio_io import AudioClip

N_MEL = 40
N_MFCC = 13
LOG_FLOOR = 1e-10
PITCH_MIN_HZ = 50.0
PITCH_MAX_HZ = 2000.0
PITCH_APERIODICITY = 0.15
N_CONTROL_CHANNELS = 3 + N_MFCC  # loudness, pitch, centroid, mfcc x13


@dataclass(frozen=True)
class FrameGrid:
    """Analysis grid: window/hop in samples at a fixed sample rate."""

    win: int = 1024
    hop: int = 256
    sample_rate: int = 16000

    def __post_init__(self):
        if not (0 < self.hop <= self.win):
            raise ValueError(f"need 0 < hop <= win, got hop={self.hop} win={self.win}")
        if self.win & (self.win - 1):
            raise ValueError(f"win must be a power of two, got {self.win}")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def n_frames(self, n_samples: int) -> int:
        return -(-n_samples // self.hop)


@dataclass
class ControlSignals:
    """Aligned per-frame loudness, pitch (0 = unvoiced), centroid, and MFCCs."""

    loudness: np.ndarray
    pitch_hz: np.ndarray
    centroid_hz: np.ndarray
    mfcc: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.loudness = np.asarray(self.loudness, dtype=np.float64)
        self.pitch_hz = np.asarray(self.pitch_hz, dtype=np.float64)
        self.centroid_hz = np.asarray(self.centroid_hz, dtype=np.float64)
        self.mfcc = np.asarray(self.mfcc, dtype=np.float64)
        n = self.loudness.shape[0]
        if not (self.pitch_hz.shape == (n,) and self.centroid_hz.shape == (n,)
                and self.mfcc.shape == (n, N_MFCC)):
            raise ValueError("control tracks must share one frame count")
        for arr in (self.loudness, self.pitch_hz, self.centroid_hz, self.mfcc):
            if not np.all(np.isfinite(arr)):
                raise ValueError("control values must be finite")

    @property
    def n_frames(self) -> int:
        return self.loudness.shape[0]

    def validate_extracted(self, sample_rate: int) -> None:
        """Physical-range invariants; hold for extractor output, not for
        normalized signals."""
        if np.any(self.loudness < 0):
            raise ValueError("loudness must be >= 0")
        if np.any((self.centroid_hz < 0) | (self.centroid_hz > sample_rate / 2)):
            raise ValueError("centroid outside [0, nyquist]")
        voiced = self.pitch_hz != 0.0
        if np.any((self.pitch_hz[voiced] < PITCH_MIN_HZ) | (self.pitch_hz[voiced] > PITCH_MAX_HZ)):
            raise ValueError("voiced pitch outside tracker range")

    def stacked(self) -> np.ndarray:
        """(n_frames, 16) array ordered loudness, pitch, centroid, mfcc x13."""
        return np.concatenate(
            [self.loudness[:, None], self.pitch_hz[:, None],
             self.centroid_hz[:, None], self.mfcc], axis=1)


def _reflect_pad(x: np.ndarray, left: int, right: int) -> np.ndarray:
    n = x.size
    if n == 1:
        return np.full(left + 1 + right, x[0], dtype=x.dtype)
    idx = np.arange(-left, n + right)
    period = 2 * n - 2
    r = np.mod(idx, period)
    r = np.where(r >= n, period - r, r)
    return x[r]


def _frames(clip: AudioClip, grid: FrameGrid, extra_right: int = 0) -> np.ndarray:
    """Centered frames (n_frames, win + extra_right) with reflection padding."""
    x = clip.samples.astype(np.float64)
    if x.size == 0:
        raise ValueError("empty clip")
    half = grid.win // 2
    n = grid.n_frames(x.size)
    # right pad covers the last center's window plus any lag lookahead
    right = half + extra_right + (n - 1) * grid.hop + 1 - x.size + half
    padded = _reflect_pad(x, half, max(right, 0))
    view = np.lib.stride_tricks.sliding_window_view(padded, grid.win + extra_right)
    return view[::grid.hop][:n]


def rms_loudness(clip: AudioClip, grid: FrameGrid) -> np.ndarray:
    """Per-frame root-mean-square amplitude."""
    f = _frames(clip, grid)
    return np.sqrt(np.mean(f * f, axis=1))


def spectral_centroid(clip: AudioClip, grid: FrameGrid) -> np.ndarray:
    """Per-frame magnitude-weighted mean frequency; 0 for all-zero frames."""
    f = _frames(clip, grid) * np.hanning(grid.win)
    mags = np.abs(np.fft.rfft(f, axis=1))
    freqs = np.fft.rfftfreq(grid.win, d=1.0 / grid.sample_rate)
    total = mags.sum(axis=1)
    with np.errstate(invalid="ignore"):
        cent = (mags @ freqs) / total
    return np.where(total > 1e-12, cent, 0.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters (peak 1) spanning [0, nyquist] on the HTK mel scale."""
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = from_mel(np.linspace(to_mel(0.0), to_mel(sample_rate / 2), n_mels + 2))
    bin_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, bin_freqs.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - bin_freqs) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, 1.0)
    return fb


def log_mel_energies(clip: AudioClip, grid: FrameGrid, n_mels: int) -> np.ndarray:
    """(n_frames, n_mels) log(power-spectrum mel energies + floor)."""
    f = _frames(clip, grid) * np.hanning(grid.win)
    power = np.abs(np.fft.rfft(f, axis=1)) ** 2
    fb = mel_filterbank(n_mels, grid.win, grid.sample_rate)
    return np.log(power @ fb.T + LOG_FLOOR)


def mfcc13(clip: AudioClip, grid: FrameGrid) -> np.ndarray:
    """First 13 coefficients of the orthonormal DCT-II of log mel energies."""
    log_e = log_mel_energies(clip, grid, N_MEL)
    return scipy.fft.dct(log_e, type=2, norm="ortho", axis=1)[:, :N_MFCC]


def pitch_track(clip: AudioClip, grid: FrameGrid,
                fmin: float = PITCH_MIN_HZ, fmax: float = PITCH_MAX_HZ,
                threshold: float = PITCH_APERIODICITY) -> np.ndarray:
    """Per-frame F0 via the cumulative-mean normalized difference function.

    Frames whose best lag stays above the aperiodicity threshold are
    reported as 0 (unvoiced). First dip below the threshold is refined to
    its local minimum and parabolically interpolated, which avoids octave
    errors on harmonics-rich tones.
    """
    sr = grid.sample_rate
    tau_min = max(2, int(sr // fmax))
    tau_max = int(np.ceil(sr / fmin))
    segs = _frames(clip, grid, extra_right=tau_max)
    d = kernels.yin_difference(segs, grid.win, tau_max)

    taus = np.arange(1, tau_max + 1)
    csum = np.cumsum(d[:, 1:], axis=1)
    cmndf = np.ones_like(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = d[:, 1:] * taus / csum
    cmndf[:, 1:] = np.where(csum > 0, ratio, 1.0)

    f0 = np.zeros(segs.shape[0])
    for i in range(segs.shape[0]):
        c = cmndf[i]
        below = np.nonzero(c[tau_min:tau_max] < threshold)[0]
        if below.size == 0:
            continue
        tau = tau_min + int(below[0])
        while tau + 1 < tau_max and c[tau + 1] < c[tau]:
            tau += 1
        shift = 0.0
        if 1 <= tau < tau_max:
            a, b, cc = c[tau - 1], c[tau], c[tau + 1]
            denom = a - 2.0 * b + cc
            if abs(denom) > 1e-12:
                shift = float(np.clip(0.5 * (a - cc) / denom, -0.5, 0.5))
        f0[i] = float(np.clip(sr / (tau + shift), fmin, fmax))
    return f0


def extract_controls(clip: AudioClip, grid: FrameGrid) -> ControlSignals:
    """All four extractors on one shared grid."""
    ctrls = ControlSignals(
        loudness=rms_loudness(clip, grid),
        pitch_hz=pitch_track(clip, grid),
        centroid_hz=spectral_centroid(clip, grid),
        mfcc=mfcc13(clip, grid),
        frame_rate=grid.frame_rate,
    )
    ctrls.validate_extracted(grid.sample_rate)
    return ctrls


# ---------------------------------------------------------------------------
# Training-time transformations
# ---------------------------------------------------------------------------

def median_filter(signal: np.ndarray, kernel: int) -> np.ndarray:
    """Sliding median with replicate padding; kernel must be odd."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    signal = np.asarray(signal, dtype=np.float64)
    if signal.size == 0:
        return signal.copy()
    return kernels.median_filter_1d(signal, kernel)


def random_median_filter(ctrls: ControlSignals, rng: np.random.Generator,
                         kernel_choices=(1, 3, 5, 7, 9, 11, 13, 15, 17, 19,
                                         21, 23, 25, 27, 29, 31)) -> ControlSignals:
    """Median-filter each track with an independently drawn kernel.

    Loudness, pitch, and centroid each draw their own kernel; the 13 MFCC
    coefficients share one kernel. Deterministic for a fixed rng state.
    """
    choices = sorted(set(int(k) for k in kernel_choices))
    if not choices:
        raise ValueError("kernel_choices must be non-empty")
    for k in choices:
        if k < 1 or k % 2 == 0:
            raise ValueError(f"kernels must be odd, got {k}")
    picks = [choices[int(rng.integers(0, len(choices)))] for _ in range(4)]
    mfcc = np.stack([median_filter(ctrls.mfcc[:, j], picks[3])
                     for j in range(ctrls.mfcc.shape[1])], axis=1)
    return ControlSignals(
        loudness=median_filter(ctrls.loudness, picks[0]),
        pitch_hz=median_filter(ctrls.pitch_hz, picks[1]),
        centroid_hz=median_filter(ctrls.centroid_hz, picks[2]),
        mfcc=mfcc,
        frame_rate=ctrls.frame_rate,
    )


def resample_controls(ctrls: ControlSignals, target_rate: float,
                      n_frames: int | None = None) -> ControlSignals:
    """Linear interpolation of every track onto a new frame rate.

    n_frames, when given, pins the output frame count (use the paired
    latent frame count; deriving it from durations is ambiguous by one or
    two frames). Positions past the last source frame clamp to it.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be > 0, got {target_rate}")
    n_src = ctrls.n_frames
    if n_frames is None:
        n_frames = max(1, int(round(n_src * target_rate / ctrls.frame_rate)))
    pos = np.arange(n_frames) * (ctrls.frame_rate / target_rate)
    src = np.arange(n_src, dtype=np.float64)

    def interp(track):
        return np.interp(pos, src, track)

    return ControlSignals(
        loudness=interp(ctrls.loudness),
        pitch_hz=interp(ctrls.pitch_hz),
        centroid_hz=interp(ctrls.centroid_hz),
        mfcc=np.stack([interp(ctrls.mfcc[:, j]) for j in range(ctrls.mfcc.shape[1])], axis=1),
        frame_rate=float(target_rate),
    )


@dataclass(frozen=True)
class NormStats:
    """Per-track affine constants: value -> (value - shift) / scale.

    Pitch is normalized in log-Hz with the 0 unvoiced sentinel preserved.
    """

    loudness_shift: float
    loudness_scale: float
    pitch_log_shift: float
    pitch_log_scale: float
    centroid_shift: float
    centroid_scale: float
    mfcc_shift: tuple
    mfcc_scale: tuple

    def __post_init__(self):
        scales = (self.loudness_scale, self.pitch_log_scale, self.centroid_scale,
                  *self.mfcc_scale)
        if any(s <= 0 for s in scales):
            raise ValueError("normalization scales must be > 0")

    def to_arrays(self):
        shift = np.array(self.mfcc_shift, dtype=np.float64)
        scale = np.array(self.mfcc_scale, dtype=np.float64)
        return shift, scale


# Frozen from the reference synthetic corpus (64 clips, seed 0, defaults);
# see tests for the corpus-statistics check that pins these within tolerance.
DEFAULT_NORM_STATS = NormStats(
    loudness_shift=0.13291, loudness_scale=0.182676,
    pitch_log_shift=6.19443, pitch_log_scale=0.741909,
    centroid_shift=1787.74, centroid_scale=1720.22,
    mfcc_shift=(-64.136, 6.6971, -0.94723, -0.075109, -1.0489, -1.4896, -0.7187,
                -0.5968, -0.2335, -0.025896, -0.0058681, -0.048168, -0.14836),
    mfcc_scale=(70.312, 18.283, 10.44, 8.1034, 6.2215, 5.3737, 4.428,
                3.4951, 3.1537, 2.923, 2.6925, 2.3836, 2.1349),
)


def normalize_controls(ctrls: ControlSignals, stats: NormStats = DEFAULT_NORM_STATS) -> ControlSignals:
    """Affine-normalize each track; pitch maps 0 -> 0, else log-Hz z-score."""
    voiced = ctrls.pitch_hz > 0
    pitch = np.zeros_like(ctrls.pitch_hz)
    pitch[voiced] = (np.log(ctrls.pitch_hz[voiced]) - stats.pitch_log_shift) / stats.pitch_log_scale
    m_shift, m_scale = stats.to_arrays()
    return ControlSignals(
        loudness=(ctrls.loudness - stats.loudness_shift) / stats.loudness_scale,
        pitch_hz=pitch,
        centroid_hz=(ctrls.centroid_hz - stats.centroid_shift) / stats.centroid_scale,
        mfcc=(ctrls.mfcc - m_shift) / m_scale,
        frame_rate=ctrls.frame_rate,
    )


def denormalize_controls(ctrls: ControlSignals, stats: NormStats = DEFAULT_NORM_STATS) -> ControlSignals:
    """Inverse of normalize_controls."""
    voiced = ctrls.pitch_hz != 0
    pitch = np.zeros_like(ctrls.pitch_hz)
    pitch[voiced] = np.exp(ctrls.pitch_hz[voiced] * stats.pitch_log_scale + stats.pitch_log_shift)
    m_shift, m_scale = stats.to_arrays()
    return ControlSignals(
        loudness=ctrls.loudness * stats.loudness_scale + stats.loudness_shift,
        pitch_hz=pitch,
        centroid_hz=ctrls.centroid_hz * stats.centroid_scale + stats.centroid_shift,
        mfcc=ctrls.mfcc * m_scale + m_shift,
        frame_rate=ctrls.frame_rate,
    )


# ---------------------------------------------------------------------------
# APCS control-signal file format
# ---------------------------------------------------------------------------

APCS_MAGIC = b"APCS"
APCS_VERSION = 1
APCS_LAYOUT = N_CONTROL_CHANNELS


def write_apcs(ctrls: ControlSignals, path) -> None:
    """Binary control file: magic, version, frame count, layout, rate, rows."""
    rows = ctrls.stacked().astype("<f4")
    header = APCS_MAGIC + struct.pack("<IIIf", APCS_VERSION, ctrls.n_frames,
                                      APCS_LAYOUT, ctrls.frame_rate)
    with open(path, "wb") as f:
        f.write(header)
        f.write(rows.tobytes())


def read_apcs(path) -> ControlSignals:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != APCS_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    version, n_frames, layout, frame_rate = struct.unpack_from("<IIIf", data, 4)
    if version != APCS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if layout != APCS_LAYOUT:
        raise ValueError(f"{path}: unsupported track layout {layout}")
    rows = np.frombuffer(data, dtype="<f4", offset=20).reshape(n_frames, layout)
    rows = rows.astype(np.float64)
    return ControlSignals(
        loudness=rows[:, 0], pitch_hz=rows[:, 1], centroid_hz=rows[:, 2],
        mfcc=rows[:, 3:], frame_rate=float(frame_rate),
    )
