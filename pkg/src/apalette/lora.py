"""Low-rank adapters over frozen weight matrices.

An adapter contributes delta = (alpha/rank) * B @ A on top of a frozen
matrix. A starts Gaussian (std 0.02), B starts at zero, so a fresh adapter
is an exact no-op. Adapters attach to the query and value projections of
both self- and cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ADAPTER_INIT_STD = 0.02


@dataclass
class LoRAAdapter:
    a: np.ndarray          # (rank, d_in)
    b: np.ndarray          # (d_out, rank)
    alpha: float
    rank: int
    merged: bool = False

    def __post_init__(self):
        self.a = np.asarray(self.a)
        self.b = np.asarray(self.b)
        if self.rank < 1 or self.a.shape[0] != self.rank or self.b.shape[1] != self.rank:
            raise ValueError(f"inconsistent rank {self.rank} for A{self.a.shape} B{self.b.shape}")

    @classmethod
    def init(cls, d_in: int, d_out: int, rank: int, rng: np.random.Generator,
             alpha: float | None = None, dtype=np.float32) -> "LoRAAdapter":
        a = (rng.standard_normal((rank, d_in)) * ADAPTER_INIT_STD).astype(dtype)
        b = np.zeros((d_out, rank), dtype=dtype)
        return cls(a=a, b=b, alpha=float(alpha if alpha is not None else rank), rank=rank)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """(d_out, d_in) dense equivalent of the adapter."""
        return self.scaling * (self.b @ self.a)

    @property
    def n_params(self) -> int:
        return self.a.size + self.b.size


def apply(adapter: LoRAAdapter, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """W x + (alpha/rank) B (A x), for W of shape (d_out, d_in) and x (..., d_in)."""
    if w.shape[1] != x.shape[-1] or adapter.a.shape[1] != w.shape[1] or adapter.b.shape[0] != w.shape[0]:
        raise ValueError(
            f"shape mismatch: W{w.shape} A{adapter.a.shape} B{adapter.b.shape} x{x.shape}")
    return x @ w.T + adapter.scaling * ((x @ adapter.a.T) @ adapter.b.T)


def merge(adapter: LoRAAdapter, w: np.ndarray) -> np.ndarray:
    """Fold the adapter into W once; a second merge of the same adapter raises."""
    if adapter.merged:
        raise ValueError("adapter already merged; merging twice would double the delta")
    if adapter.a.shape[1] != w.shape[1] or adapter.b.shape[0] != w.shape[0]:
        raise ValueError(f"shape mismatch: W{w.shape} A{adapter.a.shape} B{adapter.b.shape}")
    adapter.merged = True
    return w + adapter.delta().astype(w.dtype)


def trainable_fraction(model) -> float:
    """Trainable share of all weights (adapters plus the control projection)."""
    counts = model.count_params()
    return counts["trainable"] / counts["total"]
