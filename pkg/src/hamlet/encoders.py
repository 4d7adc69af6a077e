"""Per-modality encoders: segmentation, spatial encoding, temporal pooling, LSTM.

A modality stream ``B x T x E`` is split into ``S`` contiguous segments, each
frame is encoded spatially, frames inside a segment are max-pooled to one
vector, and a unidirectional LSTM runs over the segment axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .layers import Block, Linear, uniform_init
from .numerics import BatchNormState, Rng, ShapeError, Tensor

POOL_KERNEL = 5
POOL_STRIDE = 3


class InputTooShortError(ValueError):
    pass


@dataclass
class SegmentedSequence:
    """Frames of one modality plus the segment boundaries over the frame axis."""

    modality: str
    data: Tensor  # B x T x E
    bounds: list[tuple[int, int]]
    channel_shape: tuple[int, ...] = field(default=())

    @property
    def segment_count(self) -> int:
        return len(self.bounds)

    @property
    def frames_per_segment(self) -> list[int]:
        return [b - a for a, b in self.bounds]

    def segments(self) -> list[Tensor]:
        return [self.data[:, a:b, :] for a, b in self.bounds]


def segment_bounds(n_frames: int, n_segments: int) -> list[tuple[int, int]]:
    """Contiguous split; the last segment absorbs ``n_frames % n_segments``."""
    if n_segments < 1:
        raise ValueError("segment count must be >= 1")
    if n_frames < n_segments:
        raise InputTooShortError(f"{n_frames} frames cannot fill {n_segments} segments")
    size = n_frames // n_segments
    bounds = [(i * size, (i + 1) * size) for i in range(n_segments)]
    bounds[-1] = (bounds[-1][0], n_frames)
    return bounds


def segment(raw, segment_count: int, modality: str = "", channel_shape: tuple[int, ...] = ()) -> SegmentedSequence:
    raw = nx.as_tensor(raw)
    if raw.ndim != 3:
        raise ShapeError(f"segment expects B x T x E, got {raw.shape}")
    return SegmentedSequence(modality, raw, segment_bounds(raw.shape[1], segment_count), tuple(channel_shape))


def temporal_max_pool(frames: Tensor, kernel: int = POOL_KERNEL, stride: int = POOL_STRIDE, axis: int = 1) -> Tensor:
    """Windowed max over the frame axis followed by an adaptive max to one vector.

    Sequences shorter than ``kernel`` fall back to a single max over all frames.
    The frame axis is removed from the result.
    """
    if frames.shape[axis] >= kernel:
        frames = nx.max_pool1d(frames, kernel, stride, axis)
    return nx.amax(frames, axis)


class StubEncoder(Block):
    """Per-frame linear projection + relu, pooled per segment.

    Stands in for a pretrained image backbone: image-like modalities arrive
    flattened (C*H*W) and are treated as plain vectors.
    """

    kind = "stub"

    def __init__(self, rng: Rng, in_dim: int, out_dim: int, name: str = "stub"):
        self.proj = Linear(rng, in_dim, out_dim, name=f"{name}.proj")
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, x: SegmentedSequence, training: bool = False, rng: Rng | None = None) -> Tensor:
        if x.data.shape[-1] != self.in_dim:
            raise ShapeError(f"{x.modality or 'stub'}: expected {self.in_dim} features per frame, got {x.data.shape[-1]}")
        frames = nx.relu(self.proj(x.data))
        pooled = [temporal_max_pool(frames[:, a:b, :], axis=1) for a, b in x.bounds]
        return nx.stack(pooled, axis=1)


class CooccurrenceEncoder(Block):
    """Two stacked 2-D convolutions over point-structured frames.

    Stage 1 convolves each frame's (points x coords) grid with a ``1 x k``
    kernel spanning the coordinates, giving per-point channels. Stage 2
    convolves (frames x points) inside every segment with a ``3 x 3`` kernel,
    zero-padded at segment edges so nothing leaks between segments. Each
    stage runs conv -> batch-norm-2d -> relu -> dropout. Segments are then
    temporally max-pooled, flattened and projected.
    """

    kind = "cooccurrence"

    def __init__(self, rng: Rng, points: int, coords: int, out_dim: int,
                 channels: tuple[int, int] = (16, 32), kernel2: tuple[int, int] = (3, 3),
                 dropout: float = 0.3, bn_momentum: float = 0.1, bn_eps: float = 1e-5,
                 name: str = "cooc"):
        c1, c2 = channels
        kh, kw = kernel2
        self.conv1 = uniform_init(rng, (c1, 1, 1, coords), coords, f"{name}.conv1")
        self.bn1 = BatchNormState(c1, bn_momentum, bn_eps, f"{name}.bn1")
        self.conv2 = uniform_init(rng, (c2, c1, kh, kw), c1 * kh * kw, f"{name}.conv2")
        self.bn2 = BatchNormState(c2, bn_momentum, bn_eps, f"{name}.bn2")
        self.proj = Linear(rng, c2 * points, out_dim, name=f"{name}.proj")
        self.points, self.coords, self.out_dim = points, coords, out_dim
        self.padding2 = (kh // 2, kw // 2)
        self.dropout = dropout

    def __call__(self, x: SegmentedSequence, training: bool = False, rng: Rng | None = None) -> Tensor:
        B, T, E = x.data.shape
        if E != self.points * self.coords:
            raise ShapeError(f"{x.modality or 'cooccurrence'}: {E} features do not match "
                             f"{self.points} points x {self.coords} coords")
        c1 = self.conv1.shape[0]
        h = x.data.reshape(B * T, 1, self.points, self.coords)
        h = nx.conv2d(h, self.conv1)  # B*T, c1, P, 1
        h = nx.batch_norm(h, self.bn1, training, mode="2d")
        h = nx.dropout(nx.relu(h), self.dropout, training, rng)
        h = h.reshape(B, T, c1, self.points).transpose(0, 2, 1, 3)  # B, c1, T, P

        h = nx.concat([nx.conv2d(h[:, :, a:b, :], self.conv2, self.padding2) for a, b in x.bounds], axis=2)
        h = nx.batch_norm(h, self.bn2, training, mode="2d")
        h = nx.dropout(nx.relu(h), self.dropout, training, rng)  # B, c2, T, P

        pooled = [temporal_max_pool(h[:, :, a:b, :], axis=2) for a, b in x.bounds]  # each B, c2, P
        feats = nx.stack(pooled, axis=1).reshape(B, len(x.bounds), -1)
        return self.proj(feats)


class LSTM(Block):
    """Stacked unidirectional LSTM; gate order is input, forget, candidate, output."""

    def __init__(self, rng: Rng, in_dim: int, hidden: int, layers: int = 2, name: str = "lstm"):
        self.w_ih, self.w_hh, self.b = [], [], []
        for layer in range(layers):
            n_in = in_dim if layer == 0 else hidden
            self.w_ih.append(uniform_init(rng, (n_in, 4 * hidden), n_in, f"{name}.w_ih.{layer}"))
            self.w_hh.append(uniform_init(rng, (hidden, 4 * hidden), hidden, f"{name}.w_hh.{layer}"))
            self.b.append(uniform_init(rng, (4 * hidden,), hidden, f"{name}.b.{layer}"))
        self.in_dim, self.hidden, self.layers = in_dim, hidden, layers

    def __call__(self, x: Tensor) -> Tensor:
        return lstm_forward(x, self)


def lstm_forward(f: Tensor, params: LSTM) -> Tensor:
    """Run the stack left to right over axis 1 from zero state; return top-layer states."""
    if f.ndim != 3 or f.shape[-1] != params.in_dim:
        raise ShapeError(f"lstm: expected B x S x {params.in_dim}, got {f.shape}")
    B, S, _ = f.shape
    H = params.hidden
    seq = f
    for w_ih, w_hh, b in zip(params.w_ih, params.w_hh, params.b):
        xw = nx.matmul(seq, w_ih) + b  # B, S, 4H
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        states = []
        for s in range(S):
            z = xw[:, s, :] + nx.matmul(h, w_hh)
            i = nx.sigmoid(z[:, 0:H])
            fg = nx.sigmoid(z[:, H:2 * H])
            g = nx.tanh(z[:, 2 * H:3 * H])
            o = nx.sigmoid(z[:, 3 * H:4 * H])
            c = fg * c + i * g
            h = o * nx.tanh(c)
            states.append(h)
        seq = nx.stack(states, axis=1)
    return seq


class ModalityEncoder(Block):
    """Spatial encoder + LSTM for one modality, followed by relu and dropout."""

    def __init__(self, spatial: Block, lstm: LSTM, segments: int, dropout: float = 0.3,
                 channel_shape: tuple[int, ...] = ()):
        self.spatial = spatial
        self.lstm = lstm
        self.segments = segments
        self.dropout = dropout
        self.channel_shape = channel_shape

    def __call__(self, raw: Tensor, name: str = "", training: bool = False, rng: Rng | None = None) -> Tensor:
        seq = segment(raw, self.segments, name, self.channel_shape)
        feats = self.spatial(seq, training=training, rng=rng)
        hidden = self.lstm(feats)
        return nx.dropout(nx.relu(hidden), self.dropout, training, rng)


def build_spatial_encoder(kind: str, rng: Rng, in_dim: int, out_dim: int, *, points: int | None = None,
                          coords: int = 3, channels=(16, 32), dropout: float = 0.3, name: str = "spatial") -> Block:
    if kind == "stub":
        return StubEncoder(rng, in_dim, out_dim, name=name)
    if kind == "cooccurrence":
        if points is None:
            if in_dim % coords:
                raise ShapeError(f"{in_dim} features are not a multiple of {coords} coords")
            points = in_dim // coords
        if points * coords != in_dim:
            raise ShapeError(f"point count {points} x {coords} coords != {in_dim} features")
        return CooccurrenceEncoder(rng, points, coords, out_dim, channels=tuple(channels), dropout=dropout, name=name)
    raise ValueError(f"unknown spatial encoder {kind!r} (expected 'stub' or 'cooccurrence')")
