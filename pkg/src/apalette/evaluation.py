"""Objective metrics: Fréchet distance, text-audio similarity, adherence.

The audio embedder is a fixed log-mel statistics map (16 band means + 16
band stds = 32 dims) and the text-audio scorer uses frozen seeded linear
maps into one shared space. Scores are reproducible but live on this
embedder's own scale, not on any pretrained embedder's; reports carry the
embedder tag.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .audio_io import AudioClip, DatasetManifest, read_wav
from .codec import encode, decode
from .conditioning import TextEmbedding, embed_text
from .diffusion import (GuidanceScales, load_checkpoint, prepare_reference_controls,
                        sample)
from .features import (ControlSignals, FrameGrid, LOG_FLOOR, extract_controls,
                       log_mel_energies, resample_controls)

EMBEDDER_TAG = "logmel16-v1"
EMBED_DIM = 32
_EVAL_BANDS = 16

# Frozen standardization for Fréchet evaluation: reference-corpus location,
# scaled so per-dimension spread is ~0.25. Small-sample Fréchet bias grows
# with embedding variance; this keeps two 200-clip samples of one corpus
# well under 0.5 apart.
EMB_SHIFT = np.array([
    -9.0349, -8.1419, -7.4949, -7.5216, -8.2756, -8.861, -9.1513, -9.4083,
    -9.6621, -9.8769, -10.201, -10.657, -11.233, -11.724, -12.03, -12.148,
    4.0431, 4.4876, 4.5667, 4.9624, 5.0108, 4.6038, 4.8561, 5.2917,
    5.5621, 5.6412, 5.4647, 5.0785, 4.4891, 3.9173, 3.5774, 3.4429,
])
EMB_SCALE = np.array([
    10.639, 10.881, 11.067, 10.759, 10.171, 10.249, 10.1, 9.8158,
    9.6539, 9.7495, 10.077, 10.466, 10.894, 11.309, 11.601, 11.776,
    3.7672, 3.9206, 4.0325, 4.2141, 3.9906, 3.6526, 3.6109, 3.8043,
    4.0321, 4.2427, 4.2197, 4.0195, 3.5933, 3.3858, 3.3731, 3.4623,
]) / 0.25


def embed_audio(clip: AudioClip, grid: FrameGrid | None = None) -> np.ndarray:
    """32-d vector: per-mel-band mean and std of log energies over frames."""
    if len(clip) == 0:
        raise ValueError("cannot embed an empty clip")
    grid = grid or FrameGrid(sample_rate=clip.sample_rate)
    log_e = log_mel_energies(clip, grid, _EVAL_BANDS)
    return np.concatenate([log_e.mean(axis=0), log_e.std(axis=0)])


def standardize_embeddings(vectors: np.ndarray) -> np.ndarray:
    """Frozen affine rescale applied before Gaussian fitting for Fréchet scores."""
    return (np.asarray(vectors) - EMB_SHIFT) / EMB_SCALE


@dataclass
class EmbeddingStats:
    """Gaussian fit of an embedding sample."""

    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"cov must be ({d}, {d}), got {self.cov.shape}")
        if np.max(np.abs(self.cov - self.cov.T)) > 1e-9 * max(1.0, np.max(np.abs(self.cov))):
            raise ValueError("cov must be symmetric")
        self.cov = 0.5 * (self.cov + self.cov.T)


def fit_embedding_stats(vectors: np.ndarray) -> EmbeddingStats:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("need a (n, d) sample")
    mean = x.mean(axis=0)
    cov = (np.cov(x, rowvar=False) if x.shape[0] > 1
           else np.zeros((x.shape[1], x.shape[1])))
    return EmbeddingStats(mean=mean, cov=np.atleast_2d(cov), n=x.shape[0])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    tol = 1e-8 * max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)
    if w.size and w.min() < -tol:
        raise ValueError(f"matrix not PSD beyond clamp tolerance (min eig {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(stats_a: EmbeddingStats, stats_b: EmbeddingStats) -> float:
    """|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)."""
    if stats_a.mean.shape != stats_b.mean.shape:
        raise ValueError("dimension mismatch between embedding stats")
    a_half = _psd_sqrt(stats_a.cov)
    cross = _psd_sqrt(a_half @ stats_b.cov @ a_half)
    diff = stats_a.mean - stats_b.mean
    d = float(diff @ diff + np.trace(stats_a.cov) + np.trace(stats_b.cov)
              - 2.0 * np.trace(cross))
    return max(d, 0.0)


def fad(real_vectors: np.ndarray, generated_vectors: np.ndarray) -> float:
    """Fréchet distance between standardized embedding samples."""
    return frechet_distance(fit_embedding_stats(standardize_embeddings(real_vectors)),
                            fit_embedding_stats(standardize_embeddings(generated_vectors)))


# -- text-audio similarity ---------------------------------------------------

def _fixed_map(seed: int, d_in: int, d_out: int) -> np.ndarray:
    g = np.random.Generator(np.random.PCG64(seed))
    return g.standard_normal((d_in, d_out)) / np.sqrt(d_in)

_TEXT_MAP = _fixed_map(7001, 64, EMBED_DIM)
_AUDIO_MAP = _fixed_map(7002, EMBED_DIM, EMBED_DIM)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def similarity_score(text, audio_vec: np.ndarray) -> float:
    """Cosine between pooled text and audio embeddings in the shared space."""
    if isinstance(text, str):
        text = embed_text(text)
    if not isinstance(text, TextEmbedding):
        raise TypeError("text must be a caption string or TextEmbedding")
    pooled = text.tokens.astype(np.float64).mean(axis=0)
    if np.linalg.norm(pooled) == 0.0:
        raise ValueError("text pools to a zero vector")
    return cosine(pooled @ _TEXT_MAP, np.asarray(audio_vec, dtype=np.float64) @ _AUDIO_MAP)


# -- control adherence --------------------------------------------------------

def _pearson(x: np.ndarray, y: np.ndarray):
    if x.size != y.size or x.size < 2:
        return None
    xs = x - x.mean()
    ys = y - y.mean()
    denom = np.sqrt((xs * xs).sum() * (ys * ys).sum())
    if denom < 1e-12:
        return None  # degenerate (constant) track: undefined, flagged as None
    return float(np.clip((xs * ys).sum() / denom, -1.0, 1.0))


@dataclass
class AdherenceResult:
    """Per-signal Pearson correlations; None marks an undefined correlation."""

    loudness: float | None
    pitch: float | None
    centroid: float | None
    mfcc: float | None

    def as_dict(self):
        return {"loudness": self.loudness, "pitch": self.pitch,
                "centroid": self.centroid, "mfcc": self.mfcc}


def control_adherence(target: ControlSignals, generated: AudioClip,
                      grid: FrameGrid | None = None) -> AdherenceResult:
    """Correlation of the target contours against the generated clip's.

    Pitch is compared only on jointly voiced frames; the MFCC figure is the
    mean of per-coefficient correlations.
    """
    grid = grid or FrameGrid(sample_rate=generated.sample_rate)
    got = extract_controls(generated, grid)
    if got.n_frames != target.n_frames:
        got = resample_controls(got, got.frame_rate * target.n_frames / got.n_frames,
                                target.n_frames)
    voiced = (target.pitch_hz > 0) & (got.pitch_hz > 0)
    pitch = (_pearson(target.pitch_hz[voiced], got.pitch_hz[voiced])
             if voiced.sum() >= 2 else None)
    coef_rs = [_pearson(target.mfcc[:, j], got.mfcc[:, j])
               for j in range(target.mfcc.shape[1])]
    defined = [r for r in coef_rs if r is not None]
    return AdherenceResult(
        loudness=_pearson(target.loudness, got.loudness),
        pitch=pitch,
        centroid=_pearson(target.centroid_hz, got.centroid_hz),
        mfcc=float(np.mean(defined)) if defined else None,
    )


# -- ablation harness ----------------------------------------------------------

ABLATION_ORDER = ("text_only", "dynamics", "timbre", "full")
ABLATION_LABELS = {
    "text_only": "Baseline (Text Only)",
    "dynamics": "+ Loudness, Pitch, Centroid",
    "timbre": "+ Timbre (MFCCs) only",
    "full": "Full Model (All Signals)",
}


@dataclass
class EvalReport:
    config: str
    fad: float
    clap_like: float
    r_loud: float | None
    r_pitch: float | None
    r_centroid: float | None
    r_mfcc: float | None

    def __post_init__(self):
        if not np.isfinite(self.fad) or self.fad < 0:
            raise ValueError(f"fad must be finite and >= 0, got {self.fad}")
        if not -1.0 <= self.clap_like <= 1.0:
            raise ValueError(f"clap_like must be in [-1, 1], got {self.clap_like}")


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.6f}"


def report_tsv(reports) -> str:
    lines = ["config\tfad\tclap_like\tr_loud\tr_pitch\tr_centroid\tr_mfcc\tembedder"]
    for r in reports:
        lines.append("\t".join([r.config, f"{r.fad:.6f}", f"{r.clap_like:.6f}",
                                _fmt(r.r_loud), _fmt(r.r_pitch), _fmt(r.r_centroid),
                                _fmt(r.r_mfcc), EMBEDDER_TAG]))
    return "\n".join(lines) + "\n"


def _mean_defined(values):
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def evaluate_checkpoint(ckpt_dir, manifest: DatasetManifest, label: str,
                        sample_steps: int = 30, seed: int = 0,
                        stream: int = 0) -> EvalReport:
    """Generate once per manifest entry (conditioned on that entry's own
    caption and controls, unity scales) and score against the real set."""
    model, stats, grid, schedule = load_checkpoint(ckpt_dir)
    scales = GuidanceScales(1.0, 1.0, 1.0)
    real_embs, gen_embs, sims = [], [], []
    adh = {"loudness": [], "pitch": [], "centroid": [], "mfcc": []}
    for ci, entry in enumerate(manifest.entries):
        clip = read_wav(manifest.abs_path(entry))
        latent = encode(clip)
        raw_ctrls = extract_controls(clip, grid)
        ctrls = prepare_reference_controls(raw_ctrls, stats, latent.latent_rate,
                                           latent.n_frames)
        rng = np.random.Generator(np.random.PCG64([seed, stream, ci]))
        gen_latent = sample(model, entry.caption, ctrls, scales, latent.n_frames,
                            sample_steps, rng, schedule, latent_rate=latent.latent_rate)
        gen_clip = decode(gen_latent)
        real_embs.append(embed_audio(clip, grid))
        gen_embs.append(embed_audio(gen_clip, grid))
        sims.append(similarity_score(entry.caption, gen_embs[-1]))
        result = control_adherence(raw_ctrls, gen_clip, grid)
        for key, value in result.as_dict().items():
            adh[key].append(value)
    return EvalReport(
        config=label,
        fad=fad(np.stack(real_embs), np.stack(gen_embs)),
        clap_like=float(np.mean(sims)),
        r_loud=_mean_defined(adh["loudness"]),
        r_pitch=_mean_defined(adh["pitch"]),
        r_centroid=_mean_defined(adh["centroid"]),
        r_mfcc=_mean_defined(adh["mfcc"]),
    )


def run_ablation(manifest: DatasetManifest, checkpoints: dict,
                 sample_steps: int = 30, seed: int = 0, out_path=None):
    """Per-configuration reports over a held-out split, in the fixed
    four-row order; checkpoints maps config slug -> checkpoint dir."""
    missing = [k for k in ABLATION_ORDER if k not in checkpoints]
    if missing:
        raise ValueError(f"missing checkpoints for {missing}")
    reports = []
    for stream, key in enumerate(ABLATION_ORDER):
        reports.append(evaluate_checkpoint(checkpoints[key], manifest,
                                           ABLATION_LABELS[key],
                                           sample_steps=sample_steps, seed=seed,
                                           stream=stream))
    tsv = report_tsv(reports)
    if out_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w", encoding="utf-8", newline="") as f:
            f.write(tsv)
    return reports, tsv
