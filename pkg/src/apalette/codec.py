"""Lossless block-stacking latent codec.

Wave samples are grouped into 64-sample blocks, one latent frame per block,
so encode/decode round-trips are bit-exact and downstream tests stay exact.
The interface is the seam where a learned autoencoder could be swapped in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import AudioClip

LATENT_CHANNELS = 64


@dataclass
class LatentSeq:
    """Sequence of 64-channel latent frames plus what decode needs."""

    frames: np.ndarray
    latent_rate: float
    orig_len: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[1] != LATENT_CHANNELS:
            raise ValueError(
                f"latent frames must be (n, {LATENT_CHANNELS}), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("latent frames must be finite")
        if self.orig_len > self.frames.shape[0] * LATENT_CHANNELS:
            raise ValueError("orig_len exceeds frame capacity")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def encode(clip: AudioClip) -> LatentSeq:
    """Zero-pad to a 64-sample multiple and stack blocks into latent frames."""
    x = clip.samples
    if x.size == 0:
        raise ValueError("cannot encode an empty clip")
    n_frames = -(-x.size // LATENT_CHANNELS)
    padded = np.zeros(n_frames * LATENT_CHANNELS, dtype=x.dtype)
    padded[:x.size] = x
    return LatentSeq(
        frames=padded.reshape(n_frames, LATENT_CHANNELS),
        latent_rate=clip.sample_rate / LATENT_CHANNELS,
        orig_len=x.size,
    )


def decode(latent: LatentSeq) -> AudioClip:
    """Exact inverse of encode; output clamped to the valid amplitude range."""
    flat = np.asarray(latent.frames).reshape(-1)[:latent.orig_len]
    samples = np.clip(flat, -1.0, 1.0).astype(np.float32)
    return AudioClip(samples=samples,
                     sample_rate=int(round(latent.latent_rate * LATENT_CHANNELS)))


def latent_frame_count(n_samples: int) -> int:
    return -(-n_samples // LATENT_CHANNELS)
