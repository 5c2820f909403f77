"""Noise schedule, self-supervised fine-tuning, guidance, and sampling.

Training predicts the added noise (epsilon objective): each step draws a
timestep and noise per clip, runs the augmentation pipeline on the control
signals (random median filter, resample to the latent rate, normalize,
conditioning dropout), fuses the projected controls onto the noisy latents,
and regresses the model output against the drawn noise. Only adapters and
the control projection受 gradients; the base stays frozen.

Guidance combines four branch predictions (unconditional, text, text +
dynamics, text + dynamics + timbre) with three scales. The default nested
form is evaluated as a convex-style weighted sum so the (1,1,1) and (0,0,0)
identities hold exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio_io import AudioClip, DatasetManifest, read_wav
from .codec import LATENT_CHANNELS, LatentSeq, encode
from .conditioning import (CondState, ProjectionWeights, embed_text, fuse,
                           mask_channels, null_embedding, project_controls,
                           sample_dropout)
from .dit import DiTConfig, DiTModel, forward, forward_mse_grads
from .features import (ControlSignals, FrameGrid, NormStats, DEFAULT_NORM_STATS,
                       extract_controls, normalize_controls, random_median_filter,
                       resample_controls)

DEFAULT_MEDIAN_KERNELS = tuple(range(1, 32, 2))

# Fixed gain applied to codec latents before diffusion so the clean-signal
# variance is commensurate with the unit noise (the usual latent scaling a
# trained VAE would provide). Inverted when samples are decoded.
LATENT_GAIN = 4.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; alpha_bar[t] is the clean-signal variance share."""

    betas: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def linear(cls, steps: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
        alpha_bar = np.cumprod(1.0 - betas)
        return cls(betas=betas, alpha_bar=alpha_bar)

    def __post_init__(self):
        ab = self.alpha_bar
        if np.any(np.diff(ab) >= 0) or ab[0] <= 0 or ab[0] > 1:
            raise ValueError("alpha_bar must be strictly decreasing in (0, 1]")

    @property
    def steps(self) -> int:
        return self.betas.shape[0]


def q_sample(z0: np.ndarray, t, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward noising: sqrt(ab_t) z0 + sqrt(1 - ab_t) noise."""
    z0 = np.asarray(z0)
    noise = np.asarray(noise)
    if z0.shape != noise.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {noise.shape}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any((t_arr < 0) | (t_arr >= schedule.steps)):
        raise ValueError(f"timestep out of range [0, {schedule.steps})")
    ab = schedule.alpha_bar[t_arr]
    if z0.ndim == 3:
        ab = ab[:, None, None]
    else:
        ab = ab.reshape((1,) * z0.ndim)
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise).astype(z0.dtype)


@dataclass(frozen=True)
class GuidanceScales:
    s_text: float = 1.0
    s_ctrls: float = 1.0
    s_timbre: float = 1.0

    def __post_init__(self):
        for name in ("s_text", "s_ctrls", "s_timbre"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def cfg_combine(eps_u, eps_t, eps_tc, eps_tcm, scales: GuidanceScales,
                mode: str = "nested") -> np.ndarray:
    """Blend the four branch predictions under the three guidance scales.

    nested:      u + st(T-u) + sc(TC-T) + sm(TCM-TC), as branch weights
    independent: u + st(T-u) + sc(TC-u) + sm(TCM-u)
    """
    arrs = [np.asarray(a) for a in (eps_u, eps_t, eps_tc, eps_tcm)]
    if any(a.shape != arrs[0].shape for a in arrs[1:]):
        raise ValueError("branch predictions must share one shape")
    st, sc, sm = scales.s_text, scales.s_ctrls, scales.s_timbre
    if mode == "nested":
        weights = (1.0 - st, st - sc, sc - sm, sm)
    elif mode == "independent":
        weights = (1.0 - st - sc - sm, st, sc, sm)
    else:
        raise ValueError(f"mode must be 'nested' or 'independent', got {mode!r}")
    out = weights[0] * arrs[0]
    for w, a in zip(weights[1:], arrs[1:]):
        out += w * a
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 4
    p_text: float = 0.15
    p_dyn: float = 0.15
    p_timbre: float = 0.15
    per_signal_dropout: bool = False
    median_kernels: tuple = DEFAULT_MEDIAN_KERNELS
    seed: int = 0
    lora_rank: int = 4
    crop_frames: int = 128
    use_dyn: bool = True
    use_timbre: bool = True
    precision: str = "float32"
    timesteps: int = 1000
    checkpoint_every: int = 0
    win: int = 1024
    hop: int = 256

    def __post_init__(self):
        if self.steps <= 0 or self.learning_rate <= 0:
            raise ValueError("steps and learning_rate must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")


@dataclass
class TrainSample:
    """One clip's precomputed training inputs."""

    latent: np.ndarray        # (n, 64)
    ctrls: ControlSignals     # raw, at the control frame rate
    caption: str
    text_tokens: np.ndarray   # (m, d_text)


class AdamW:
    """Decoupled weight decay Adam over a named parameter subset."""

    def __init__(self, names, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 weight_decay: float = 0.01, eps: float = 1e-8):
        self.names = sorted(names)
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.weight_decay, self.eps = weight_decay, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, model: DiTModel, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        arrays = model.trainable_arrays()
        for name in self.names:
            g = grads[name].astype(np.float64)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            theta = arrays[name].astype(np.float64)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * theta
            theta -= self.lr * update
            model.set_trainable(name, theta.astype(model.dtype))


def _prepare_step(batch, rng, config: TrainConfig, schedule: NoiseSchedule,
                  stats: NormStats, latent_rate: float, dtype):
    """Draw all step randomness and assemble dense batch arrays.

    Split out from the parameter-dependent loss so gradient checks can
    re-evaluate the loss at perturbed weights under identical draws.
    """
    idx = rng.integers(0, len(batch), size=config.batch_size)
    samples = [batch[int(i)] for i in idx]
    crop = min(config.crop_frames, min(s.latent.shape[0] for s in samples))
    m_tok = max(s.text_tokens.shape[0] for s in samples)
    d_text = samples[0].text_tokens.shape[1]

    z0 = np.empty((len(samples), crop, LATENT_CHANNELS), dtype=dtype)
    c16 = np.empty((len(samples), crop, 16), dtype=dtype)
    text = np.zeros((len(samples), m_tok, d_text), dtype=dtype)
    for row, s in enumerate(samples):
        filtered = random_median_filter(s.ctrls, rng, config.median_kernels)
        at_latent = resample_controls(filtered, latent_rate, s.latent.shape[0])
        normed = normalize_controls(at_latent, stats)
        start = int(rng.integers(0, s.latent.shape[0] - crop + 1))
        mask = sample_dropout(rng, config.p_text, config.p_dyn, config.p_timbre,
                              per_signal=config.per_signal_dropout)
        if not (config.use_dyn and config.use_timbre):
            fine = mask.fine
            if fine is not None and not config.use_dyn:
                fine = (False, False, False)
            mask = CondState(mask.text_present,
                             mask.dyn_present and config.use_dyn,
                             mask.timbre_present and config.use_timbre, fine)
        z0[row] = s.latent[start:start + crop]
        c16[row] = mask_channels(normed.stacked()[start:start + crop], mask).astype(dtype)
        if mask.text_present:
            text[row, :s.text_tokens.shape[0]] = s.text_tokens
    t = rng.integers(0, schedule.steps, size=len(samples))
    noise = rng.standard_normal(z0.shape).astype(dtype)
    return {"z0": z0, "c16": c16, "text": text, "t": t, "noise": noise}


def loss_from_prepared(model: DiTModel, prepared: dict, schedule: NoiseSchedule):
    """Loss plus gradients for the trainable partition, given fixed draws."""
    z_t = q_sample(prepared["z0"], prepared["t"], prepared["noise"], schedule)
    ctrl_emb = prepared["c16"] @ model.ctrl_proj.w + model.ctrl_proj.b
    z_in = fuse(z_t, ctrl_emb)
    loss, _, dz, grads = forward_mse_grads(model, z_in, prepared["t"],
                                           prepared["text"], prepared["noise"])
    grads["ctrl_proj.w"] = np.einsum("bnc,bnd->cd", prepared["c16"], dz)
    grads["ctrl_proj.b"] = dz.sum(axis=(0, 1))
    return loss, grads


def training_loss(model: DiTModel, batch, rng: np.random.Generator,
                  config: TrainConfig, schedule: NoiseSchedule,
                  stats: NormStats = DEFAULT_NORM_STATS,
                  latent_rate: float = 250.0):
    """One training step's loss and gradient dict.

    The gradient dict covers every parameter; frozen base entries are
    exactly zero.
    """
    prepared = _prepare_step(batch, rng, config, schedule, stats, latent_rate,
                             model.dtype)
    loss, grads = loss_from_prepared(model, prepared, schedule)
    for name, arr in model.params.items():
        grads[name] = np.zeros_like(arr)
    return loss, grads


def load_training_set(manifest: DatasetManifest, grid: FrameGrid, dtype) -> list:
    samples = []
    for entry in manifest.entries:
        clip = read_wav(manifest.abs_path(entry))
        latent = encode(clip)
        ctrls = extract_controls(clip, grid)
        emb = embed_text(entry.caption)
        samples.append(TrainSample(latent=(latent.frames * LATENT_GAIN).astype(dtype),
                                   ctrls=ctrls, caption=entry.caption,
                                   text_tokens=emb.tokens.astype(dtype)))
    return samples


def finetune(manifest: DatasetManifest, config: TrainConfig, out_dir,
             dit_config: DiTConfig | None = None,
             stats: NormStats = DEFAULT_NORM_STATS):
    """Train adapters + control projection; returns (model, loss curve).

    Writes loss_log.tsv, periodic checkpoints (when configured), and a final
    checkpoint under out_dir/checkpoint. Deterministic for a fixed seed and
    precision.
    """
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    dtype = np.float32 if config.precision == "float32" else np.float64
    dit_config = dit_config or DiTConfig()
    grid = FrameGrid(win=config.win, hop=config.hop)
    schedule = NoiseSchedule.linear(config.timesteps)

    samples = load_training_set(manifest, grid, dtype)
    sr = grid.sample_rate
    latent_rate = sr / LATENT_CHANNELS

    model = DiTModel.build(dit_config, seed=config.seed, dtype=dtype)
    model.attach_adapters(rank=config.lora_rank, seed=config.seed + 1)
    opt = AdamW(model.trainable_arrays().keys(), lr=config.learning_rate,
                beta1=config.adam_beta1, beta2=config.adam_beta2,
                weight_decay=config.weight_decay)
    rng = np.random.Generator(np.random.PCG64(config.seed + 2))

    curve = []
    for step in range(config.steps):
        prepared = _prepare_step(samples, rng, config, schedule, stats,
                                 latent_rate, dtype)
        loss, grads = loss_from_prepared(model, prepared, schedule)
        opt.step(model, grads)
        curve.append((step, loss))
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            _save_checkpoint(model, config, stats, grid,
                             os.path.join(out_dir, "checkpoints", f"step_{step + 1:06d}"))

    with open(os.path.join(out_dir, "loss_log.tsv"), "w", encoding="utf-8", newline="") as f:
        f.write("step\tloss\n")
        for step, loss in curve:
            f.write(f"{step}\t{loss:.10g}\n")
    _save_checkpoint(model, config, stats, grid, os.path.join(out_dir, "checkpoint"))
    return model, curve


def _save_checkpoint(model: DiTModel, config: TrainConfig, stats: NormStats,
                     grid: FrameGrid, ckpt_dir) -> None:
    os.makedirs(ckpt_dir, exist_ok=True)
    model.save(ckpt_dir)
    meta = {
        "train_config": asdict(config),
        "norm_stats": asdict(stats),
        "grid": {"win": grid.win, "hop": grid.hop, "sample_rate": grid.sample_rate},
        "schedule": {"timesteps": config.timesteps},
    }
    with open(os.path.join(ckpt_dir, "train_meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")


def load_checkpoint(ckpt_dir):
    """(model, norm stats, grid, schedule) from a checkpoint directory."""
    model = DiTModel.load(ckpt_dir)
    with open(os.path.join(ckpt_dir, "train_meta.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    ns = meta["norm_stats"]
    ns["mfcc_shift"] = tuple(ns["mfcc_shift"])
    ns["mfcc_scale"] = tuple(ns["mfcc_scale"])
    stats = NormStats(**ns)
    g = meta["grid"]
    grid = FrameGrid(win=g["win"], hop=g["hop"], sample_rate=g["sample_rate"])
    schedule = NoiseSchedule.linear(meta["schedule"]["timesteps"])
    return model, stats, grid, schedule


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def prepare_reference_controls(ctrls: ControlSignals, stats: NormStats,
                               latent_rate: float, n_frames: int) -> ControlSignals:
    """Resample raw extracted controls to the latent grid and normalize."""
    at_latent = resample_controls(ctrls, latent_rate, n_frames)
    return normalize_controls(at_latent, stats)


def sample(model: DiTModel, caption: str, ctrls: ControlSignals | None,
           scales: GuidanceScales, n_frames: int, steps: int,
           rng: np.random.Generator, schedule: NoiseSchedule,
           latent_rate: float = 250.0, cfg_mode: str = "nested",
           sampler: str = "ddim", clip_x0: bool = True) -> LatentSeq:
    """Guided generation of latent frames.

    ctrls must already live on the latent grid with n_frames frames
    (see prepare_reference_controls); it may be None only when both control
    scales are zero. clip_x0 bounds each step's clean-latent estimate to the
    codec's representable range, which keeps weak models from drifting off
    scale.
    """
    if ctrls is None and (scales.s_ctrls > 0 or scales.s_timbre > 0):
        raise ValueError("reference controls required when s_ctrls or s_timbre > 0")
    if sampler not in ("ddim", "ddpm"):
        raise ValueError(f"sampler must be 'ddim' or 'ddpm', got {sampler!r}")
    if ctrls is not None and ctrls.n_frames != n_frames:
        raise ValueError(f"controls have {ctrls.n_frames} frames, expected {n_frames}")

    c16 = (ctrls.stacked() if ctrls is not None
           else np.zeros((n_frames, 16))).astype(model.dtype)
    branches = (CondState.branch_uncond(), CondState.branch_text(),
                CondState.branch_text_dyn(), CondState.branch_full())
    ctrl_embs = np.stack([project_controls(c16, model.ctrl_proj, b)
                          for b in branches])

    text = embed_text(caption)
    m = text.tokens.shape[0]
    text4 = np.zeros((4, m, text.tokens.shape[1]), dtype=model.dtype)
    if not text.null:
        text4[1:] = text.tokens[None]

    ts = np.unique(np.round(np.linspace(schedule.steps - 1, 0, steps)).astype(np.int64))[::-1]
    z = rng.standard_normal((n_frames, LATENT_CHANNELS)).astype(model.dtype)
    for i, t in enumerate(ts):
        ab_t = schedule.alpha_bar[t]
        ab_prev = schedule.alpha_bar[ts[i + 1]] if i + 1 < len(ts) else 1.0
        zb = z[None] + ctrl_embs
        t4 = np.full(4, t, dtype=np.int64)
        eps4 = forward(model, zb, t4, text4)
        eps = cfg_combine(eps4[0], eps4[1], eps4[2], eps4[3], scales, mode=cfg_mode)
        z0_pred = (z - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        if clip_x0:
            z0_pred = np.clip(z0_pred, -LATENT_GAIN, LATENT_GAIN)
        if sampler == "ddim":
            z = (np.sqrt(ab_prev) * z0_pred + np.sqrt(1.0 - ab_prev) * eps).astype(model.dtype)
        else:
            beta_eff = 1.0 - ab_t / ab_prev
            sigma = np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * beta_eff) if ab_t < 1.0 else 0.0
            direction = np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps
            z = (np.sqrt(ab_prev) * z0_pred + direction
                 + sigma * rng.standard_normal(z.shape)).astype(model.dtype)
    return LatentSeq(frames=(z / LATENT_GAIN).astype(np.float32),
                     latent_rate=latent_rate, orig_len=n_frames * LATENT_CHANNELS)
