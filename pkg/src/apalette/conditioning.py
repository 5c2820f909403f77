"""Text embedding stand-in, control projection, fusion, and dropout masks.

The text encoder is a frozen hash: each whitespace token maps to a fixed
pseudo-random unit vector, so embeddings are deterministic with no weights.
Control signals are projected from 16 channels to the 64 latent channels by
a small trainable affine map and added onto the noisy latents.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .features import ControlSignals, N_CONTROL_CHANNELS

D_TEXT = 64
LATENT_CHANNELS = 64

_DYN_SLICE = slice(0, 3)       # loudness, pitch, centroid
_TIMBRE_SLICE = slice(3, 16)   # mfcc x13


@dataclass
class TextEmbedding:
    """Token vectors (n_tokens, d); the null embedding is one zero token."""

    tokens: np.ndarray
    null: bool = False

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(f"tokens must be (n>=1, d), got {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("token vectors must be finite")


@lru_cache(maxsize=65536)
def _token_vector(token: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    seed = int.from_bytes(digest, "little")
    g = np.random.Generator(np.random.PCG64(seed))
    v = g.standard_normal(dim)
    v /= np.linalg.norm(v)
    out = v.astype(np.float32)
    out.flags.writeable = False
    return out


def null_embedding(dim: int = D_TEXT) -> TextEmbedding:
    return TextEmbedding(tokens=np.zeros((1, dim), dtype=np.float32), null=True)


def embed_text(caption: str, dim: int = D_TEXT) -> TextEmbedding:
    """Whitespace-tokenize and map each token to its frozen unit vector."""
    tokens = caption.split()
    if not tokens:
        return null_embedding(dim)
    vecs = np.stack([_token_vector(t, dim) for t in tokens])
    return TextEmbedding(tokens=vecs, null=False)


@dataclass
class ProjectionWeights:
    """Trainable affine map from the 16 control channels to latent channels."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w)
        self.b = np.asarray(self.b)
        if self.w.shape != (N_CONTROL_CHANNELS, LATENT_CHANNELS):
            raise ValueError(f"w must be {(N_CONTROL_CHANNELS, LATENT_CHANNELS)}, got {self.w.shape}")
        if self.b.shape != (LATENT_CHANNELS,):
            raise ValueError(f"b must be ({LATENT_CHANNELS},), got {self.b.shape}")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.b))):
            raise ValueError("projection weights must be finite")

    @classmethod
    def init_zero(cls, dtype=np.float32) -> "ProjectionWeights":
        # zero start: a fresh model is exactly condition-blind
        return cls(w=np.zeros((N_CONTROL_CHANNELS, LATENT_CHANNELS), dtype=dtype),
                   b=np.zeros(LATENT_CHANNELS, dtype=dtype))

    @property
    def n_params(self) -> int:
        return self.w.size + self.b.size


@dataclass(frozen=True)
class CondState:
    """Which conditioning groups are live for one forward pass.

    The guidance branches are (text off), (text), (text + dynamics),
    (text + dynamics + timbre); training dropout samples the same space.
    fine, when set, overrides the dynamics group with per-signal
    (loudness, pitch, centroid) presence flags.
    """

    text_present: bool
    dyn_present: bool
    timbre_present: bool
    fine: tuple | None = None

    @classmethod
    def branch_uncond(cls):
        return cls(False, False, False)

    @classmethod
    def branch_text(cls):
        return cls(True, False, False)

    @classmethod
    def branch_text_dyn(cls):
        return cls(True, True, False)

    @classmethod
    def branch_full(cls):
        return cls(True, True, True)


CFG_BRANCHES = (CondState.branch_uncond(), CondState.branch_text(),
                CondState.branch_text_dyn(), CondState.branch_full())


def mask_channels(c16: np.ndarray, mask: CondState) -> np.ndarray:
    """Zero dropped control groups before projection."""
    out = np.array(c16, copy=True)
    if mask.fine is not None:
        for ch, keep in enumerate(mask.fine):
            if not keep:
                out[..., ch] = 0.0
    elif not mask.dyn_present:
        out[..., _DYN_SLICE] = 0.0
    if not mask.timbre_present:
        out[..., _TIMBRE_SLICE] = 0.0
    return out


def project_controls(ctrls, weights: ProjectionWeights, mask: CondState) -> np.ndarray:
    """(n_frames, 64) control embedding: masked channels through the affine map."""
    c16 = ctrls.stacked() if isinstance(ctrls, ControlSignals) else np.asarray(ctrls)
    if c16.ndim != 2 or c16.shape[1] != N_CONTROL_CHANNELS:
        raise ValueError(f"expected (n, {N_CONTROL_CHANNELS}) controls, got {c16.shape}")
    masked = mask_channels(c16, mask)
    return masked.astype(weights.w.dtype) @ weights.w + weights.b


def fuse(z: np.ndarray, ctrl_emb: np.ndarray) -> np.ndarray:
    """Element-wise addition of control embeddings onto latents."""
    z = np.asarray(z)
    ctrl_emb = np.asarray(ctrl_emb)
    if z.shape != ctrl_emb.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {ctrl_emb.shape}")
    return z + ctrl_emb


def sample_dropout(rng: np.random.Generator, p_text: float, p_dyn: float,
                   p_timbre: float, per_signal: bool = False) -> CondState:
    """Independent Bernoulli drops for the text / dynamics / timbre groups.

    per_signal draws loudness, pitch, and centroid independently (each with
    p_dyn) instead of as one group.
    """
    for p in (p_text, p_dyn, p_timbre):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probabilities must be in [0, 1], got {p}")
    if per_signal:
        u = rng.random(5)
        fine = (bool(u[1] >= p_dyn), bool(u[2] >= p_dyn), bool(u[3] >= p_dyn))
        return CondState(text_present=bool(u[0] >= p_text),
                         dyn_present=any(fine),
                         timbre_present=bool(u[4] >= p_timbre),
                         fine=fine)
    u = rng.random(3)
    return CondState(text_present=bool(u[0] >= p_text),
                     dyn_present=bool(u[1] >= p_dyn),
                     timbre_present=bool(u[2] >= p_timbre))
