"""Multi-head self-attention, unimodal segment attention and multimodal fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ConfigError
from .layers import Block, uniform_init
from .numerics import Rng, ShapeError, Tensor

FUSION_MODES = ("sum", "concat")


@dataclass
class AttentionMap:
    """Attention weights of one block over a batch.

    ``raw`` has shape (B, heads, L, L) with row-stochastic query rows;
    ``reduced`` has shape (B, L): the attention each position receives.
    """

    raw: np.ndarray
    reduced: np.ndarray
    source: str = ""

    @property
    def head_count(self) -> int:
        return self.raw.shape[1]

    def to_json(self, index: int, sample_id: str, include_raw: bool = True) -> dict:
        out = {"sample_id": sample_id, "modality": self.source, "head_count": self.head_count,
               "reduced": self.reduced[index].tolist()}
        if include_raw:
            out["raw"] = self.raw[index].tolist()
        return out


def reduce_attention(raw: np.ndarray) -> np.ndarray:
    """Mean over heads and query rows of the weight each key position receives."""
    raw = np.asarray(raw)
    return raw.mean(axis=(-3, -2))


class MultiHeadAttention(Block):
    """Per-head Q/K/V projections (``in_dim x in_dim/heads``) plus an output projection."""

    def __init__(self, rng: Rng, in_dim: int, heads: int, out_dim: int | None = None, name: str = "mhsa"):
        if heads < 1 or in_dim % heads:
            raise ConfigError(f"embedding size {in_dim} is not divisible by head count {heads}")
        out_dim = in_dim if out_dim is None else out_dim
        dk = in_dim // heads
        self.wq = [uniform_init(rng, (in_dim, dk), in_dim, f"{name}.wq.{i}") for i in range(heads)]
        self.wk = [uniform_init(rng, (in_dim, dk), in_dim, f"{name}.wk.{i}") for i in range(heads)]
        self.wv = [uniform_init(rng, (in_dim, dk), in_dim, f"{name}.wv.{i}") for i in range(heads)]
        self.wo = uniform_init(rng, (dk * heads, out_dim), dk * heads, f"{name}.wo")
        self.in_dim, self.heads, self.out_dim, self.key_dim = in_dim, heads, out_dim, dk

    def __call__(self, x: Tensor, source: str = "") -> tuple[Tensor, AttentionMap]:
        return multi_head_self_attention(x, self, source)


def multi_head_self_attention(x: Tensor, params: MultiHeadAttention, source: str = "") -> tuple[Tensor, AttentionMap]:
    if x.ndim != 3 or x.shape[-1] != params.in_dim:
        raise ShapeError(f"attention expects B x L x {params.in_dim}, got {x.shape}")
    scale = 1.0 / math.sqrt(params.key_dim)
    heads, weights = [], []
    for wq, wk, wv in zip(params.wq, params.wk, params.wv):
        q, k, v = nx.matmul(x, wq), nx.matmul(x, wk), nx.matmul(x, wv)
        attn = nx.softmax(nx.matmul(q, nx.swapaxes(k, -1, -2)) * scale, axis=-1)
        heads.append(nx.matmul(attn, v))
        weights.append(attn.data)
    merged = heads[0] if len(heads) == 1 else nx.concat(heads, axis=-1)
    out = nx.matmul(merged, params.wo)
    raw = np.stack(weights, axis=1)
    return out, AttentionMap(raw, reduce_attention(raw), source)


def uat_encode(hidden: Tensor, params: MultiHeadAttention, source: str = "") -> tuple[Tensor, AttentionMap]:
    """Attend over a modality's segment sequence and sum the attended segments."""
    attended, amap = multi_head_self_attention(hidden, params, source)
    return attended.sum(axis=1), amap


def mat_fuse(embeddings: list[Tensor], params: MultiHeadAttention, mode: str = "concat") -> tuple[Tensor, AttentionMap]:
    """Self-attention over the unordered set of modality embeddings, then SUM or CONCAT.

    No positional information is added, so permuting the inputs permutes the
    attended rows identically.
    """
    if not embeddings:
        raise ValueError("mat_fuse needs at least one modality embedding")
    widths = {e.shape[-1] for e in embeddings}
    if len(widths) != 1:
        raise ShapeError(f"modality embeddings differ in width: {sorted(widths)}")
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    stacked = nx.stack(embeddings, axis=1)  # B, M, E
    attended, amap = multi_head_self_attention(stacked, params, "fusion")
    return combine(attended, mode), amap


def combine(stacked: Tensor, mode: str) -> Tensor:
    """Merge B x M x E into B x E (sum) or B x M*E (concat, modality-major)."""
    if mode == "sum":
        return stacked.sum(axis=1)
    if mode == "concat":
        B, M, E = stacked.shape
        return stacked.reshape(B, M * E)
    raise ConfigError(f"unknown fusion mode {mode!r}")
