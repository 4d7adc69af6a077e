"""Input checks for multimodal estimator inputs."""
from __future__ import annotations

from typing import Mapping

import numpy as np


def check_multimodal_X(X, modalities: list[str] | None = None) -> dict[str, np.ndarray]:
    """Validate a mapping ``modality -> (n_samples, n_frames, n_features)``.

    Returns float64 copies. Raises ``ValueError`` on wrong types, ranks,
    inconsistent sample counts, missing modalities or non-finite values.
    """
    if not isinstance(X, Mapping):
        raise TypeError(f"X must be a mapping of modality name to array, got {type(X).__name__}")
    if not X:
        raise ValueError("X has no modalities")
    out = {}
    for name, arr in X.items():
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim != 3:
            raise ValueError(f"modality {name!r}: expected (n_samples, n_frames, n_features), got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"modality {name!r} contains NaN or infinite values")
        out[name] = a
    counts = {k: v.shape[0] for k, v in out.items()}
    if len(set(counts.values())) != 1:
        raise ValueError(f"modalities disagree on sample count: {counts}")
    if modalities is not None:
        missing = [m for m in modalities if m not in out]
        if missing:
            raise ValueError(f"X is missing modalities {missing}")
        out = {m: out[m] for m in modalities}
    return out


def n_samples(X: Mapping[str, np.ndarray]) -> int:
    return len(next(iter(X.values())))


def check_feature_dims(X: Mapping[str, np.ndarray], dims: Mapping[str, int]) -> None:
    for name, d in dims.items():
        if X[name].shape[-1] != d:
            raise ValueError(f"modality {name!r}: fitted with {d} features, got {X[name].shape[-1]}")
