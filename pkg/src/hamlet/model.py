"""HAMLET network assembly, attention-free baselines, loss and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .attention import AttentionMap, MultiHeadAttention, combine, mat_fuse, uat_encode
from .config import ConfigError, ModelConfig, config_hash, model_config_from_dict
from .encoders import LSTM, ModalityEncoder, build_spatial_encoder
from .layers import Block, Linear, uniform_init
from .numerics import BatchNormState, Rng, ShapeError, Tensor

VARIANTS = ("hamlet", "nsa", "usa", "keyless")


class MissingModalityError(KeyError):
    pass


class KeylessAttention(Block):
    """Context-vector soft attention: ``alpha_s = softmax(u . tanh(W h_s))``."""

    def __init__(self, rng: Rng, dim: int, name: str = "keyless"):
        self.w = uniform_init(rng, (dim, dim), dim, f"{name}.w")
        self.u = uniform_init(rng, (dim, 1), dim, f"{name}.u")

    def __call__(self, hidden: Tensor, source: str = "") -> tuple[Tensor, AttentionMap]:
        scores = nx.matmul(nx.tanh(nx.matmul(hidden, self.w)), self.u)  # B, S, 1
        alpha = nx.softmax(scores, axis=1)
        pooled = (alpha * hidden).sum(axis=1)
        a = alpha.data[:, :, 0]
        return pooled, AttentionMap(a[:, None, None, :], a.copy(), source)


class Classifier(Block):
    """Two fully-connected layers with batch-norm-1d, relu and dropout between them."""

    def __init__(self, rng: Rng, in_dim: int, n_classes: int, dropout: float,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        hidden = max(in_dim // 2, 1)
        self.fc1 = Linear(rng, in_dim, hidden, name="classifier.fc1")
        self.bn = BatchNormState(hidden, bn_momentum, bn_eps, "classifier.bn")
        self.fc2 = Linear(rng, hidden, n_classes, name="classifier.fc2")
        self.dropout = dropout

    def __call__(self, x: Tensor, training: bool, rng: Rng | None) -> Tensor:
        h = nx.batch_norm(self.fc1(x), self.bn, training, mode="1d")
        h = nx.dropout(nx.relu(h), self.dropout, training, rng)
        return self.fc2(h)


class HamletModel(Block):
    """Per-modality encoders -> per-modality attention -> fusion -> classifier.

    Which attention blocks exist depends on ``config.variant``:

    * ``hamlet``: UAT per modality and MAT fusion.
    * ``usa``: UAT per modality, plain SUM/CONCAT fusion.
    * ``nsa``: sum of LSTM states per modality, plain fusion.
    * ``keyless``: context-vector attention per modality, concat fusion.

    Every component draws its initial weights from its own named child
    stream of the seed, so components shared between variants start equal.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {config.variant!r}")
        self.config = config
        self.seed = seed
        root = Rng(seed)
        E = config.embed_dim
        spatial_dim = config.spatial_dim or E
        self.encoders: dict[str, ModalityEncoder] = {}
        for m in config.modalities:
            r = root.child(f"encoder.{m.name}")
            spatial = build_spatial_encoder(m.encoder, r, m.dims, spatial_dim, coords=m.coords,
                                            channels=config.cooc_channels, dropout=config.dropout_encoder,
                                            name=f"{m.name}.spatial")
            lstm = LSTM(r, spatial_dim, E, config.lstm_layers, name=f"{m.name}.lstm")
            self.encoders[m.name] = ModalityEncoder(spatial, lstm, config.segments, config.dropout_unimodal,
                                                    tuple(m.channel_shape))
        self.unimodal: dict[str, Block] = {}
        if config.variant in ("hamlet", "usa"):
            for m in config.modalities:
                self.unimodal[m.name] = MultiHeadAttention(root.child(f"uat.{m.name}"), E, config.uat_heads,
                                                           E, name=f"{m.name}.uat")
        elif config.variant == "keyless":
            for m in config.modalities:
                self.unimodal[m.name] = KeylessAttention(root.child(f"keyless.{m.name}"), E, name=f"{m.name}.keyless")
        self.mat = MultiHeadAttention(root.child("mat"), E, config.mat_heads, E, name="mat") \
            if config.variant == "hamlet" else None
        self.classifier = Classifier(root.child("classifier"), config.fused_dim, config.n_classes,
                                     config.dropout_classifier, config.bn_momentum, config.bn_eps)

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.config.modalities]

    def forward(self, batch: Mapping[str, object], training: bool = False,
                rng: Rng | None = None) -> tuple[Tensor, list[AttentionMap]]:
        """Logits ``B x C`` plus the attention maps recorded on the way."""
        fused, maps = self.embed(batch, training, rng)
        return self.classifier(fused, training, rng), maps

    __call__ = forward

    def embed(self, batch: Mapping[str, object], training: bool = False,
              rng: Rng | None = None) -> tuple[Tensor, list[AttentionMap]]:
        missing = [n for n in self.modality_names if n not in batch]
        if missing:
            raise MissingModalityError(f"batch is missing modalities {missing}")
        sizes = {n: np.shape(getattr(batch[n], "data", batch[n]))[0] for n in self.modality_names}
        if len(set(sizes.values())) != 1:
            raise ShapeError(f"batch sizes differ across modalities: {sizes}")
        maps: list[AttentionMap] = []
        embeddings = []
        for name in self.modality_names:
            hidden = self.encoders[name](nx.as_tensor(batch[name]), name, training, rng)
            if name in self.unimodal:
                block = self.unimodal[name]
                emb, amap = uat_encode(hidden, block, name) if isinstance(block, MultiHeadAttention) \
                    else block(hidden, name)
                maps.append(amap)
            else:
                emb = hidden.sum(axis=1)
            embeddings.append(emb)
        mode = self.config.combiner
        if self.mat is not None:
            fused, amap = mat_fuse(embeddings, self.mat, mode)
            maps.append(amap)
        else:
            fused = combine(nx.stack(embeddings, axis=1), mode)
        return fused, maps


def build_baseline(variant: str, config: ModelConfig, seed: int = 0) -> HamletModel:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    fusion = config.fusion
    if variant == "hamlet" and not fusion.startswith("MAT-"):
        fusion = f"MAT-{fusion}"
    cfg = model_config_from_dict({**_config_dict(config), "variant": variant, "fusion": fusion})
    return HamletModel(cfg, seed)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true classes."""
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    logp = nx.log_softmax(logits, axis=-1)
    return -(logp[np.arange(B), labels].mean())


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

MAGIC = b"HAMLETCK"
VERSION = 1


def _config_dict(config: ModelConfig) -> dict:
    return dataclasses.asdict(config)


def model_state(model: HamletModel) -> dict[str, np.ndarray]:
    state = {name: p.data for name, p in model.named_parameters()}
    for name, bn in model.named_buffers():
        state[f"{name}.running_mean"] = bn.running_mean
        state[f"{name}.running_var"] = bn.running_var
    return state


def load_state(model: HamletModel, state: Mapping[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | {f"{n}.running_{k}" for n in buffers for k in ("mean", "var")}
    missing = expected - set(state)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        if state[name].shape != p.shape:
            raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
        p.data[...] = state[name]
    for name, bn in buffers.items():
        bn.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
        bn.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64)


def save_checkpoint(path: str | Path, model: HamletModel, extra: Mapping[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write ``magic | version | sha256(config) | config json | named float64 blobs``.

    Integers are little-endian: version u32, json length u32, blob count u32;
    each blob is ``name_len u16, name utf-8, ndim u8, dims u32..., data f64``.
    """
    header = {"model": _config_dict(model.config), "seed": model.seed, "meta": meta or {}}
    blobs = {**model_state(model), **{f"extra.{k}": v for k, v in (extra or {}).items()}}
    cfg = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), config_hash(header), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a HAMLET checkpoint")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = buf[12:44]
    (n,) = struct.unpack_from("<I", buf, 44)
    off = 48
    header = json.loads(buf[off:off + n])
    off += n
    if config_hash(header) != digest:
        raise ValueError(f"{path}: config hash mismatch")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    blobs = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        blobs[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return header, blobs


def load_checkpoint(path: str | Path) -> tuple[HamletModel, dict[str, np.ndarray], dict]:
    header, blobs = read_checkpoint(path)
    model = HamletModel(model_config_from_dict(header["model"]), header["seed"])
    load_state(model, {k: v for k, v in blobs.items() if not k.startswith("extra.")})
    extra = {k[len("extra."):]: v for k, v in blobs.items() if k.startswith("extra.")}
    return model, extra, header.get("meta", {})
