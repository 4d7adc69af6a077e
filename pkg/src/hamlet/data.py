"""Dataset manifests, per-sample CSV files and the synthetic activity generator.

Manifest (JSON)::

    {
      "name": "toy",
      "classes": ["wave", "clap"],
      "modalities": [{"name": "imu", "kind": "vector", "dims": 6, "frame_rate": 50.0}],
      "samples": [{"id": "a1_c0_t0", "actor": "a1", "label": 0,
                   "files": {"imu": "samples/a1_c0_t0_imu.csv"}, "frames": {"imu": 40}}]
    }

``kind`` is ``vector``, ``points`` (frames x points x coords, flattened) or
``image-stub`` (C*H*W flattened, with ``channel_shape``). An optional
``encoder`` overrides the default (``cooccurrence`` for points, ``stub``
otherwise). Sample files are headerless CSV, one frame per row. Paths are
relative to the manifest's directory.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .config import ModalityConfig
from .numerics import Rng

KINDS = ("vector", "points", "image-stub")


class DataError(ValueError):
    pass


@dataclass
class MultimodalDataset:
    X: dict[str, np.ndarray]  # name -> (N, T, E)
    y: np.ndarray
    actors: np.ndarray
    ids: list[str]
    class_names: list[str]
    modalities: list[ModalityConfig]
    windows: list[tuple[int, int]] | None = None
    informative: list[int] | None = None

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, mask) -> "MultimodalDataset":
        idx = np.flatnonzero(np.asarray(mask)) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return MultimodalDataset({k: v[idx] for k, v in self.X.items()}, self.y[idx], self.actors[idx],
                                 [self.ids[i] for i in idx], self.class_names, self.modalities,
                                 [self.windows[i] for i in idx] if self.windows else None, self.informative)


class ChannelStandardizer:
    """Per-modality, per-channel z-scoring with statistics from the fitting data only."""

    def fit(self, X: Mapping[str, np.ndarray]) -> "ChannelStandardizer":
        self.mean_ = {k: v.reshape(-1, v.shape[-1]).mean(axis=0) for k, v in X.items()}
        std = {k: v.reshape(-1, v.shape[-1]).std(axis=0) for k, v in X.items()}
        self.std_ = {k: np.where(s > 1e-12, s, 1.0) for k, s in std.items()}
        return self

    def transform(self, X: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {k: (v - self.mean_[k]) / self.std_[k] for k, v in X.items()}

    def inverse_transform(self, X: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {k: v * self.std_[k] + self.mean_[k] for k, v in X.items()}

    def fit_transform(self, X):
        return self.fit(X).transform(X)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.mean_:
            out[f"standardizer.{k}.mean"] = self.mean_[k]
            out[f"standardizer.{k}.std"] = self.std_[k]
        return out

    @classmethod
    def from_state(cls, state: Mapping[str, np.ndarray]) -> "ChannelStandardizer":
        obj = cls()
        obj.mean_, obj.std_ = {}, {}
        for key, value in state.items():
            if not key.startswith("standardizer."):
                continue
            name, stat = key[len("standardizer."):].rsplit(".", 1)
            (obj.mean_ if stat == "mean" else obj.std_)[name] = np.asarray(value)
        return obj


def modality_from_descriptor(d: Mapping) -> ModalityConfig:
    kind = d.get("kind", "vector")
    if kind not in KINDS:
        raise DataError(f"modality {d.get('name')!r}: kind must be one of {KINDS}, got {kind!r}")
    encoder = d.get("encoder", "cooccurrence" if kind == "points" else "stub")
    return ModalityConfig(name=d["name"], dims=int(d["dims"]), encoder=encoder, kind=kind,
                          coords=int(d.get("coords", 3)), channel_shape=list(d.get("channel_shape", [])))


def read_csv_frames(path: Path, dims: int, frames: int | None = None) -> np.ndarray:
    if not path.exists():
        raise DataError(f"{path}: file not found")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != dims:
                raise DataError(f"{path}:{lineno}: expected {dims} columns, found {len(cells)}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                bad = next(c for c in cells if not _is_float(c))
                raise DataError(f"{path}:{lineno}: non-numeric cell {bad!r}") from None
    arr = np.array(rows, dtype=np.float64).reshape(-1, dims)
    if frames is not None and len(arr) != frames:
        raise DataError(f"{path}: manifest declares {frames} frames, file has {len(arr)}")
    return arr


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def write_csv_frames(path: Path, arr: np.ndarray) -> None:
    np.savetxt(path, arr, fmt="%.17g", delimiter=",")


def resample_frames(arr: np.ndarray, n_frames: int) -> np.ndarray:
    """Nearest-frame resampling along axis 0."""
    idx = np.round(np.linspace(0, len(arr) - 1, n_frames)).astype(int)
    return arr[idx]


def load_dataset(manifest_path: str | Path, n_frames: int | None = None, standardize: bool = False,
                 train_actors=None) -> tuple[MultimodalDataset, ChannelStandardizer | None]:
    """Read a manifest and its CSV files into stacked ``(N, T, E)`` arrays.

    Samples of one modality must share a frame count unless ``n_frames`` is
    given, in which case every sequence is resampled to that length. With
    ``standardize`` the arrays are z-scored per channel using statistics of
    the samples whose actor is in ``train_actors`` (all samples if None).
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise DataError(f"{manifest_path}: manifest not found") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest_path}: invalid JSON ({e})") from None
    for key in ("classes", "modalities", "samples"):
        if key not in manifest:
            raise DataError(f"{manifest_path}: missing key {key!r}")
    samples = manifest["samples"]
    if not samples:
        raise DataError(f"{manifest_path}: dataset is empty")
    classes = list(manifest["classes"])
    modalities = [modality_from_descriptor(d) for d in manifest["modalities"]]
    root = manifest_path.parent

    per_mod: dict[str, list[np.ndarray]] = {m.name: [] for m in modalities}
    labels, actors, ids, windows = [], [], [], []
    for rec in samples:
        label = int(rec["label"])
        if not 0 <= label < len(classes):
            raise DataError(f"sample {rec.get('id')!r}: label {label} outside [0, {len(classes)})")
        for m in modalities:
            if m.name not in rec.get("files", {}):
                raise DataError(f"sample {rec.get('id')!r} has no file for modality {m.name!r}")
            frames = rec.get("frames", {}).get(m.name)
            arr = read_csv_frames(root / rec["files"][m.name], m.dims, frames)
            if n_frames is not None:
                arr = resample_frames(arr, n_frames)
            per_mod[m.name].append(arr)
        labels.append(label)
        actors.append(rec["actor"])
        ids.append(str(rec["id"]))
        windows.append(tuple(rec["window"]) if "window" in rec else None)

    X = {}
    for name, arrs in per_mod.items():
        lengths = {len(a) for a in arrs}
        if len(lengths) != 1:
            raise DataError(f"modality {name!r}: frame counts differ {sorted(lengths)}; pass n_frames to resample")
        X[name] = np.stack(arrs)
    seen = sorted(set(labels))
    if seen != list(range(len(classes))):
        raise DataError(f"class ids must cover 0..{len(classes) - 1}, found {seen}")

    ds = MultimodalDataset(X, np.array(labels), np.array(actors), ids, classes, modalities,
                           windows if all(w is not None for w in windows) else None,
                           manifest.get("synthetic", {}).get("informative"))
    scaler = None
    if standardize:
        mask = np.ones(len(ds), bool) if train_actors is None else np.isin(ds.actors, list(train_actors))
        scaler = ChannelStandardizer().fit({k: v[mask] for k, v in ds.X.items()})
        ds.X = scaler.transform(ds.X)
    return ds, scaler


# ----------------------------------------------------------------------------
# synthetic activities
# ----------------------------------------------------------------------------

def _default_modalities() -> list[dict]:
    return [
        {"name": "skeleton", "kind": "points", "dims": 15},
        {"name": "imu", "kind": "vector", "dims": 6},
        {"name": "emg", "kind": "vector", "dims": 8},
    ]


@dataclass
class SyntheticSpec:
    """Each class leaves a windowed template on one informative modality.

    Class ``k`` writes a sinusoid (even ``k``) or a step train (odd ``k``)
    into modality ``informative[k]`` during a class-specific window; the
    other modalities carry only N(0, noise^2). Actors differ in template
    amplitude, samples in a small window jitter.
    """

    n_classes: int = 4
    modalities: list[dict] = field(default_factory=_default_modalities)
    n_frames: int = 40
    n_segments: int = 4
    noise: float = 0.5
    informative: list[int] | None = None
    samples_per_class: int = 5
    n_actors: int = 6
    amplitude: float = 1.0
    window: int | None = None
    jitter: int = 2
    actor_scale: float = 0.2

    def __post_init__(self):
        if self.informative is None:
            self.informative = [k % len(self.modalities) for k in range(self.n_classes)]

    @property
    def window_length(self) -> int:
        return self.window or max(1, self.n_frames // self.n_segments)

    def validate(self) -> None:
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if len(self.informative) != self.n_classes:
            raise ValueError("informative map must list one modality per class")
        if any(not 0 <= m < len(self.modalities) for m in self.informative):
            raise ValueError("informative modality index out of range")
        if self.window_length + 2 * self.jitter > self.n_frames:
            raise ValueError("window plus jitter does not fit in the sequence")

    def window_start(self, k: int) -> int:
        span = self.n_frames - self.window_length - 2 * self.jitter
        return self.jitter + (round(k * span / (self.n_classes - 1)) if self.n_classes > 1 else 0)


def _template(spec: SyntheticSpec, k: int, dims: int) -> np.ndarray:
    W = spec.window_length
    crng = Rng(1000 + k)  # class templates are shared by all actors and seeds
    phase = crng.uniform(0, 2 * np.pi, dims)
    gain = crng.uniform(0.5, 1.0, dims) * np.where(crng.random(dims) < 0.5, -1.0, 1.0)
    cycles = 1 + k // 2
    wave = np.sin(2 * np.pi * cycles * (np.arange(W)[:, None] + 0.5) / W + phase)
    if k % 2:
        wave = np.sign(wave)
    return gain * wave


def synthesize(spec: SyntheticSpec, seed: int = 0) -> tuple[MultimodalDataset, list[np.ndarray]]:
    """Build the dataset in memory; also return the noise-free signal of each sample's informative modality."""
    spec.validate()
    rng = Rng(seed).child("synthetic")
    mods = [modality_from_descriptor(d) for d in spec.modalities]
    templates = {k: _template(spec, k, mods[spec.informative[k]].dims) for k in range(spec.n_classes)}
    actor_gain = 1.0 + spec.actor_scale * rng.uniform(-1, 1, spec.n_actors)
    X = {m.name: [] for m in mods}
    y, actors, ids, windows, clean = [], [], [], [], []
    W = spec.window_length
    for a in range(spec.n_actors):
        for k in range(spec.n_classes):
            for trial in range(spec.samples_per_class):
                shift = int(rng.integers(-spec.jitter, spec.jitter + 1))
                start = spec.window_start(k) + shift
                for mi, m in enumerate(mods):
                    arr = spec.noise * rng.normal(size=(spec.n_frames, m.dims)) if spec.noise > 0 \
                        else np.zeros((spec.n_frames, m.dims))
                    if mi == spec.informative[k]:
                        sig = np.zeros((spec.n_frames, m.dims))
                        sig[start:start + W] = spec.amplitude * actor_gain[a] * templates[k]
                        arr = arr + sig
                        clean.append(sig)
                    X[m.name].append(arr)
                y.append(k)
                actors.append(f"actor{a + 1}")
                ids.append(f"actor{a + 1}_c{k}_t{trial}")
                windows.append((start, start + W))
    ds = MultimodalDataset({k: np.stack(v) for k, v in X.items()}, np.array(y), np.array(actors), ids,
                           [f"class{k}" for k in range(spec.n_classes)], mods, windows, list(spec.informative))
    return ds, clean


def generate_synthetic(spec: SyntheticSpec, seed: int, out_dir: str | Path) -> tuple[MultimodalDataset, Path]:
    """Write the synthetic dataset as manifest + CSV files; return it and the manifest path."""
    ds, _ = synthesize(spec, seed)
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    records = []
    for i, sid in enumerate(ds.ids):
        files = {}
        for m in ds.modalities:
            rel = f"samples/{sid}_{m.name}.csv"
            write_csv_frames(out_dir / rel, ds.X[m.name][i])
            files[m.name] = rel
        records.append({"id": sid, "actor": str(ds.actors[i]), "label": int(ds.y[i]), "files": files,
                        "frames": {m.name: spec.n_frames for m in ds.modalities},
                        "window": list(ds.windows[i])})
    manifest = {
        "name": f"synthetic-seed{seed}",
        "classes": ds.class_names,
        "modalities": [{"name": m.name, "kind": m.kind, "dims": m.dims, "encoder": m.encoder,
                        "frame_rate": 30.0} for m in ds.modalities],
        "samples": records,
        "synthetic": {**asdict(spec), "seed": seed},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ds, path
