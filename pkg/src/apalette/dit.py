"""Miniature diffusion transformer over latent frames.

Pre-norm blocks: self-attention over latent tokens, cross-attention to text
tokens (no positional encoding on text), GELU feed-forward, sinusoidal
timestep embedding passed through a small MLP and added to every token.
Low-rank adapters can attach to every attention's query and value
projections.

The base weights are frozen; backward computes gradients only for adapter
matrices (the control-projection gradient is assembled by the training loop
from d(loss)/d(input latents), since control embeddings enter additively).
All weight matrices are stored (d_out, d_in) and applied as ``x @ w.T``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf

from . import tensorio
from .conditioning import ProjectionWeights
from .lora import LoRAAdapter

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_LN_EPS = 1e-5

# base-weight init scales ("pretrained" stand-in; fixed artifact recipe)
_ATTN_STD = 0.125
_POS_STD = 0.02
_TMLP_STD = 0.35


@dataclass(frozen=True)
class DiTConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_text: int = 64
    n_channels: int = 64
    max_frames: int = 512

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_text", "n_channels", "max_frames"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the sinusoidal embedding")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


def _attn_param_names(prefix: str, d: int, d_kv: int):
    return {
        f"{prefix}.wq": (d, d), f"{prefix}.bq": (d,),
        f"{prefix}.wk": (d, d_kv), f"{prefix}.bk": (d,),
        f"{prefix}.wv": (d, d_kv), f"{prefix}.bv": (d,),
        f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
    }


class DiTModel:
    """Frozen base parameters plus optional adapters and a control projection."""

    def __init__(self, config: DiTConfig, params: dict, adapters: dict,
                 ctrl_proj: ProjectionWeights, dtype=np.float32):
        self.config = config
        self.params = params
        self.adapters = adapters
        self.ctrl_proj = ctrl_proj
        self.dtype = np.dtype(dtype)

    # -- construction --------------------------------------------------------

    @classmethod
    def build(cls, config: DiTConfig, seed: int, dtype=np.float32) -> "DiTModel":
        rng = np.random.Generator(np.random.PCG64(seed))
        d, c = config.d_model, config.n_channels
        p = {}
        if d >= c:
            q_mat, _ = np.linalg.qr(rng.standard_normal((d, c)))
            p["in_proj.w"] = q_mat
            p["head.w"] = q_mat.T.copy()
        else:
            p["in_proj.w"] = rng.standard_normal((d, c)) / np.sqrt(c)
            p["head.w"] = rng.standard_normal((c, d)) / np.sqrt(d)
        p["in_proj.b"] = np.zeros(d)
        p["head.b"] = np.zeros(c)
        p["pos"] = rng.standard_normal((config.max_frames, d)) * _POS_STD
        for j in (1, 2):
            p[f"tmlp.w{j}"] = rng.standard_normal((d, d)) * _TMLP_STD
            p[f"tmlp.b{j}"] = np.zeros(d)
        for i in range(config.n_layers):
            for ln in ("ln1", "ln2", "ln3"):
                p[f"l{i}.{ln}.g"] = np.ones(d)
                p[f"l{i}.{ln}.b"] = np.zeros(d)
            for name, shape in _attn_param_names(f"l{i}.sa", d, d).items():
                p[name] = (rng.standard_normal(shape) * _ATTN_STD
                           if len(shape) == 2 else np.zeros(shape))
            for name, shape in _attn_param_names(f"l{i}.ca", d, config.d_text).items():
                p[name] = (rng.standard_normal(shape) * _ATTN_STD
                           if len(shape) == 2 else np.zeros(shape))
            p[f"l{i}.ff.w1"] = rng.standard_normal((config.d_ff, d)) * _ATTN_STD
            p[f"l{i}.ff.b1"] = np.zeros(config.d_ff)
            p[f"l{i}.ff.w2"] = rng.standard_normal((d, config.d_ff)) * _ATTN_STD
            p[f"l{i}.ff.b2"] = np.zeros(d)
        dt = np.dtype(dtype)
        params = {k: np.ascontiguousarray(v, dtype=dt) for k, v in p.items()}
        return cls(config, params, {}, ProjectionWeights.init_zero(dt), dt)

    def adapter_sites(self):
        """(key, d_in, d_out) for every attachable query/value projection."""
        d, dt = self.config.d_model, self.config.d_text
        sites = []
        for i in range(self.config.n_layers):
            sites.append((f"l{i}.sa.q", d, d))
            sites.append((f"l{i}.sa.v", d, d))
            sites.append((f"l{i}.ca.q", d, d))
            sites.append((f"l{i}.ca.v", dt, d))
        return sites

    def attach_adapters(self, rank: int, seed: int, alpha: float | None = None) -> None:
        rng = np.random.Generator(np.random.PCG64(seed))
        for key, d_in, d_out in self.adapter_sites():
            self.adapters[key] = LoRAAdapter.init(d_in, d_out, rank, rng,
                                                  alpha=alpha, dtype=self.dtype)

    def merge_adapters(self) -> "DiTModel":
        """New adapter-free model with every adapter folded into its matrix."""
        from .lora import merge
        params = {k: v.copy() for k, v in self.params.items()}
        for key, adapter in self.adapters.items():
            wname = key[:-2] + ".w" + key[-1]  # "...q" -> "...wq"
            params[wname] = merge(adapter, params[wname])
        proj = ProjectionWeights(self.ctrl_proj.w.copy(), self.ctrl_proj.b.copy())
        return DiTModel(self.config, params, {}, proj, self.dtype)

    def astype(self, dtype) -> "DiTModel":
        dt = np.dtype(dtype)
        params = {k: v.astype(dt) for k, v in self.params.items()}
        adapters = {k: LoRAAdapter(a.a.astype(dt), a.b.astype(dt), a.alpha, a.rank, a.merged)
                    for k, a in self.adapters.items()}
        proj = ProjectionWeights(self.ctrl_proj.w.astype(dt), self.ctrl_proj.b.astype(dt))
        return DiTModel(self.config, params, adapters, proj, dt)

    # -- accounting -----------------------------------------------------------

    def trainable_arrays(self) -> dict:
        out = {"ctrl_proj.w": self.ctrl_proj.w, "ctrl_proj.b": self.ctrl_proj.b}
        for key, a in self.adapters.items():
            out[f"{key}.a"] = a.a
            out[f"{key}.b"] = a.b
        return out

    def set_trainable(self, name: str, value: np.ndarray) -> None:
        if name == "ctrl_proj.w":
            self.ctrl_proj.w = value
        elif name == "ctrl_proj.b":
            self.ctrl_proj.b = value
        else:
            site, field = name.rsplit(".", 1)
            setattr(self.adapters[site], field, value)

    def count_params(self) -> dict:
        frozen = sum(v.size for v in self.params.values())
        trainable = sum(v.size for v in self.trainable_arrays().values())
        return {"total": frozen + trainable, "trainable": trainable}

    # -- persistence ----------------------------------------------------------

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        tensorio.save_tensors(self.params, os.path.join(out_dir, "base.tensors"))
        trainable = {"ctrl_proj.w": self.ctrl_proj.w, "ctrl_proj.b": self.ctrl_proj.b}
        meta = {}
        for key, a in self.adapters.items():
            trainable[f"{key}.a"] = a.a
            trainable[f"{key}.b"] = a.b
            meta[key] = {"alpha": a.alpha, "rank": a.rank}
        tensorio.save_tensors(trainable, os.path.join(out_dir, "adapters.tensors"))
        cfg = {"config": asdict(self.config), "dtype": self.dtype.name, "adapters": meta}
        with open(os.path.join(out_dir, "model.json"), "w", encoding="utf-8") as f:
            json.dump(cfg, f, sort_keys=True, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, out_dir) -> "DiTModel":
        with open(os.path.join(out_dir, "model.json"), "r", encoding="utf-8") as f:
            cfg = json.load(f)
        config = DiTConfig(**cfg["config"])
        dtype = np.dtype(cfg["dtype"])
        params = tensorio.load_tensors(os.path.join(out_dir, "base.tensors"))
        trainable = tensorio.load_tensors(os.path.join(out_dir, "adapters.tensors"))
        adapters = {}
        for key, meta in cfg["adapters"].items():
            adapters[key] = LoRAAdapter(a=trainable[f"{key}.a"], b=trainable[f"{key}.b"],
                                        alpha=meta["alpha"], rank=meta["rank"])
        proj = ProjectionWeights(trainable["ctrl_proj.w"], trainable["ctrl_proj.b"])
        return cls(config, params, adapters, proj, dtype)


# ---------------------------------------------------------------------------
# functional pieces
# ---------------------------------------------------------------------------

def _layernorm_f(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_b(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    return (dxhat - m1 - xhat * m2) * inv


def _gelu_f(x):
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * phi, (x, phi)


def _gelu_b(dy, cache):
    x, phi = cache
    return dy * (phi + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI)


def _linear_f(x, w, bias=None, adapter=None):
    y = x @ w.T
    u = None
    if adapter is not None:
        u = x @ adapter.a.T
        y = y + adapter.scaling * (u @ adapter.b.T)
    if bias is not None:
        y = y + bias
    return y, (x, u)


def _linear_b(dy, w, adapter, cache, grads=None, gname=None, want_dx=True):
    x, u = cache
    dx = dy @ w if want_dx else None
    if adapter is not None:
        s = adapter.scaling
        dyb = dy @ adapter.b
        if want_dx:
            dx = dx + s * (dyb @ adapter.a)
        if grads is not None:
            dy2 = dy.reshape(-1, dy.shape[-1])
            grads[f"{gname}.b"] += s * (dy2.T @ u.reshape(-1, u.shape[-1]))
            grads[f"{gname}.a"] += s * (dyb.reshape(-1, dyb.shape[-1]).T
                                        @ x.reshape(-1, x.shape[-1]))
    return dx


def _split_heads(x, n_heads):
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _attn_f(xq, xkv, params, prefix, adapters, n_heads):
    aq = adapters.get(f"{prefix}.q")
    av = adapters.get(f"{prefix}.v")
    q, cq = _linear_f(xq, params[f"{prefix}.wq"], params[f"{prefix}.bq"], aq)
    k, ck = _linear_f(xkv, params[f"{prefix}.wk"], params[f"{prefix}.bk"], None)
    v, cv = _linear_f(xkv, params[f"{prefix}.wv"], params[f"{prefix}.bv"], av)
    qh, kh, vh = (_split_heads(a, n_heads) for a in (q, k, v))
    scale = 1.0 / np.sqrt(qh.shape[-1])
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    scores = scores - scores.max(-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(-1, keepdims=True)
    o = _merge_heads(probs @ vh)
    y, co = _linear_f(o, params[f"{prefix}.wo"], params[f"{prefix}.bo"], None)
    return y, (cq, ck, cv, qh, kh, vh, probs, co, scale)


def _attn_b(dy, params, prefix, adapters, cache, grads, n_heads, want_dxkv):
    cq, ck, cv, qh, kh, vh, probs, co, scale = cache
    aq = adapters.get(f"{prefix}.q")
    av = adapters.get(f"{prefix}.v")
    do = _linear_b(dy, params[f"{prefix}.wo"], None, co)
    doh = _split_heads(do, n_heads)
    d_probs = doh @ vh.transpose(0, 1, 3, 2)
    dvh = probs.transpose(0, 1, 3, 2) @ doh
    d_scores = probs * (d_probs - (d_probs * probs).sum(-1, keepdims=True))
    dqh = (d_scores @ kh) * scale
    dkh = (d_scores.transpose(0, 1, 3, 2) @ qh) * scale
    dq, dk, dv = (_merge_heads(a) for a in (dqh, dkh, dvh))
    dxq = _linear_b(dq, params[f"{prefix}.wq"], aq, cq, grads, f"{prefix}.q")
    dxkv = _linear_b(dv, params[f"{prefix}.wv"], av, cv, grads, f"{prefix}.v",
                     want_dx=want_dxkv)
    if want_dxkv:
        dxkv = dxkv + _linear_b(dk, params[f"{prefix}.wk"], None, ck)
    return dxq, dxkv


def _sinusoidal(t, dim, dtype):
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(dtype)


def _forward(model: DiTModel, z, t, text, want_cache: bool):
    cfg, p, ad = model.config, model.params, model.adapters
    b, n, _ = z.shape
    x = z @ p["in_proj.w"].T + p["in_proj.b"]
    x = x + p["pos"][:n]
    s = _sinusoidal(t, cfg.d_model, model.dtype)
    h1, _ = _linear_f(s, p["tmlp.w1"], p["tmlp.b1"])
    g1, _ = _gelu_f(h1)
    temb, _ = _linear_f(g1, p["tmlp.w2"], p["tmlp.b2"])
    x = x + temb[:, None, :]

    layer_caches = []
    for i in range(cfg.n_layers):
        pre = f"l{i}"
        h, c_ln1 = _layernorm_f(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        sa, c_sa = _attn_f(h, h, p, f"{pre}.sa", ad, cfg.n_heads)
        x = x + sa
        h, c_ln2 = _layernorm_f(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        ca, c_ca = _attn_f(h, text, p, f"{pre}.ca", ad, cfg.n_heads)
        x = x + ca
        h, c_ln3 = _layernorm_f(x, p[f"{pre}.ln3.g"], p[f"{pre}.ln3.b"])
        f1, c_f1 = _linear_f(h, p[f"{pre}.ff.w1"], p[f"{pre}.ff.b1"])
        gg, c_g = _gelu_f(f1)
        ff, c_f2 = _linear_f(gg, p[f"{pre}.ff.w2"], p[f"{pre}.ff.b2"])
        x = x + ff
        if want_cache:
            layer_caches.append((c_ln1, c_sa, c_ln2, c_ca, c_ln3, c_f1, c_g, c_f2))

    # no final norm: the head reads the raw stream so per-frame amplitude
    # information survives into the noise prediction
    eps = x @ p["head.w"].T + p["head.b"]
    return eps, (layer_caches if want_cache else None)


def _backward(model: DiTModel, cache, d_eps):
    """d(loss)/d(input latents) plus adapter gradients."""
    cfg, p, ad = model.config, model.params, model.adapters
    layer_caches = cache
    grads = {}
    for key, a in ad.items():
        grads[f"{key}.a"] = np.zeros_like(a.a)
        grads[f"{key}.b"] = np.zeros_like(a.b)

    dx = d_eps @ p["head.w"]
    for i in reversed(range(cfg.n_layers)):
        pre = f"l{i}"
        c_ln1, c_sa, c_ln2, c_ca, c_ln3, c_f1, c_g, c_f2 = layer_caches[i]
        dgg = _linear_b(dx, p[f"{pre}.ff.w2"], None, c_f2)
        df1 = _gelu_b(dgg, c_g)
        dh = _linear_b(df1, p[f"{pre}.ff.w1"], None, c_f1)
        dx = dx + _layernorm_b(dh, p[f"{pre}.ln3.g"], c_ln3)
        dh, _ = _attn_b(dx, p, f"{pre}.ca", ad, c_ca, grads, cfg.n_heads,
                        want_dxkv=False)
        dx = dx + _layernorm_b(dh, p[f"{pre}.ln2.g"], c_ln2)
        dhq, dhkv = _attn_b(dx, p, f"{pre}.sa", ad, c_sa, grads, cfg.n_heads,
                            want_dxkv=True)
        dx = dx + _layernorm_b(dhq + dhkv, p[f"{pre}.ln1.g"], c_ln1)
    dz = dx @ p["in_proj.w"]
    return dz, grads


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def _promote(model, z, t, text):
    z = np.asarray(z, dtype=model.dtype)
    single = z.ndim == 2
    if single:
        z = z[None]
    if z.ndim != 3 or z.shape[-1] != model.config.n_channels:
        raise ValueError(f"latents must be (batch, frames, {model.config.n_channels})")
    if z.shape[1] > model.config.max_frames:
        raise ValueError(f"{z.shape[1]} frames exceeds max_frames={model.config.max_frames}")
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t.shape != (z.shape[0],):
        raise ValueError(f"need one timestep per batch row, got {t.shape}")
    if np.any(t < 0):
        raise ValueError("timesteps must be >= 0")
    text = np.asarray(text, dtype=model.dtype)
    if single and text.ndim == 2:
        text = text[None]
    if text.ndim != 3 or text.shape[0] != z.shape[0] or text.shape[-1] != model.config.d_text:
        raise ValueError(f"text tokens must be (batch, tokens, {model.config.d_text})")
    return z, t, text, single


def forward(model: DiTModel, z, t, text) -> np.ndarray:
    """Noise prediction with the same shape as the input latents."""
    z3, t1, tx3, single = _promote(model, z, t, text)
    eps, _ = _forward(model, z3, t1, tx3, want_cache=False)
    return eps[0] if single else eps


def forward_mse_grads(model: DiTModel, z, t, text, target):
    """(loss, eps, d_loss/d_z, adapter grads) for an MSE loss against target."""
    z3, t1, tx3, single = _promote(model, z, t, text)
    target = np.asarray(target, dtype=model.dtype)
    if single:
        target = target[None]
    eps, cache = _forward(model, z3, t1, tx3, want_cache=True)
    diff = (eps - target).astype(model.dtype)
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    d_eps = (2.0 / diff.size) * diff
    dz, grads = _backward(model, cache, d_eps)
    if single:
        eps, dz = eps[0], dz[0]
    return loss, eps, dz, grads


@dataclass
class AttentionWeights:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    n_heads: int = 1


def attention(q_tokens, kv_tokens, weights: AttentionWeights, adapters: dict | None = None,
              return_probs: bool = False):
    """Standalone multi-head scaled-dot-product attention (optionally adapted)."""
    d = weights.wq.shape[0]
    if d % weights.n_heads:
        raise ValueError("head count must divide the model width")
    q_tokens = np.asarray(q_tokens)
    kv_tokens = np.asarray(kv_tokens)
    single = q_tokens.ndim == 2
    if single:
        q_tokens = q_tokens[None]
        kv_tokens = kv_tokens[None]
    params = {"a.wq": weights.wq, "a.bq": weights.bq, "a.wk": weights.wk,
              "a.bk": weights.bk, "a.wv": weights.wv, "a.bv": weights.bv,
              "a.wo": weights.wo, "a.bo": weights.bo}
    ad = {}
    if adapters:
        if "q" in adapters:
            ad["a.q"] = adapters["q"]
        if "v" in adapters:
            ad["a.v"] = adapters["v"]
    y, cache = _attn_f(q_tokens, kv_tokens, params, "a", ad, weights.n_heads)
    if single:
        y = y[0]
    if return_probs:
        probs = cache[6]
        return y, probs[0] if single else probs
    return y


def count_params(model: DiTModel) -> dict:
    return model.count_params()
