"""scikit-learn compatible wrapper around :class:`~hamlet.model.HamletModel`."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .attention import AttentionMap
from .config import ModalityConfig, ModelConfig, RunConfig, TrainConfig
from .data import ChannelStandardizer
from .model import HamletModel, load_checkpoint, save_checkpoint
from .training import History, MetricsReport, predict_logits, train
from .validation import check_feature_dims, check_multimodal_X


class HamletClassifier(ClassifierMixin, BaseEstimator):
    """Hierarchical multimodal self-attention classifier.

    ``X`` is a dict mapping each modality name to an array of shape
    ``(n_samples, n_frames, n_features)``. ``modalities`` lists per-modality
    descriptors (``name``, ``dims``, optional ``encoder``/``kind``/``coords``);
    when omitted, every modality in ``X`` gets the stub frame encoder.
    """

    def __init__(self, modalities=None, variant="hamlet", fusion="MAT-CONCAT", embed_dim=128, spatial_dim=None,
                 segments=8, uat_heads=1, mat_heads=2, lstm_layers=2, dropout=0.3, cooc_channels=(16, 32),
                 lr=3e-4, lr_min=0.0, batch_size=16, epochs=50, t0_epochs=10, t_mult=2, schedule_unit="step",
                 weight_decay=1e-2, standardize=True, allow_any_dropout=False, check_finite=False,
                 random_state=0):
        self.modalities = modalities
        self.variant = variant
        self.fusion = fusion
        self.embed_dim = embed_dim
        self.spatial_dim = spatial_dim
        self.segments = segments
        self.uat_heads = uat_heads
        self.mat_heads = mat_heads
        self.lstm_layers = lstm_layers
        self.dropout = dropout
        self.cooc_channels = cooc_channels
        self.lr = lr
        self.lr_min = lr_min
        self.batch_size = batch_size
        self.epochs = epochs
        self.t0_epochs = t0_epochs
        self.t_mult = t_mult
        self.schedule_unit = schedule_unit
        self.weight_decay = weight_decay
        self.standardize = standardize
        self.allow_any_dropout = allow_any_dropout
        self.check_finite = check_finite
        self.random_state = random_state

    # -- configuration -----------------------------------------------------

    def _modality_configs(self, X) -> list[ModalityConfig]:
        if self.modalities is None:
            return [ModalityConfig(name=k, dims=v.shape[-1]) for k, v in X.items()]
        out = []
        for m in self.modalities:
            out.append(m if isinstance(m, ModalityConfig) else ModalityConfig(**dict(m)))
        return out

    def run_config(self, modalities: list[ModalityConfig], n_classes: int) -> RunConfig:
        model = ModelConfig(
            modalities=modalities, n_classes=n_classes, variant=self.variant,
            fusion="CONCAT" if self.variant == "keyless" else self.fusion, embed_dim=self.embed_dim,
            spatial_dim=self.spatial_dim, segments=self.segments, uat_heads=self.uat_heads,
            mat_heads=self.mat_heads, lstm_layers=self.lstm_layers, dropout_encoder=self.dropout,
            dropout_unimodal=self.dropout, dropout_classifier=self.dropout, cooc_channels=list(self.cooc_channels))
        train_cfg = TrainConfig(
            lr=self.lr, lr_min=self.lr_min, batch_size=self.batch_size, epochs=self.epochs,
            t0_epochs=self.t0_epochs, t_mult=self.t_mult, schedule_unit=self.schedule_unit,
            weight_decay=self.weight_decay, seed=int(self.random_state), standardize=self.standardize)
        cfg = RunConfig(model=model, train=train_cfg, allow_any_dropout=self.allow_any_dropout,
                        check_finite=self.check_finite)
        cfg.validate()
        return cfg

    # -- fitting -----------------------------------------------------------

    def fit(self, X, y):
        names = None if self.modalities is None else [
            (m.name if isinstance(m, ModalityConfig) else m["name"]) for m in self.modalities]
        X = check_multimodal_X(X, names)
        y = np.asarray(y)
        if len(y) != len(next(iter(X.values()))):
            raise ValueError(f"X has {len(next(iter(X.values())))} samples but y has {len(y)}")
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        mods = self._modality_configs(X)
        check_feature_dims(X, {m.name: m.dims for m in mods})
        self.config_ = self.run_config(mods, max(len(self.classes_), 2))
        self.standardizer_ = ChannelStandardizer().fit(X) if self.standardize else None
        Xs = self._prepare(X)
        self.model_ = HamletModel(self.config_.model, seed=int(self.random_state))
        with nx.check_finite(self.check_finite):
            self.history_: History = train(self.model_, Xs, y_enc, self.config_.train)
        self.n_features_in_ = sum(m.dims for m in mods)
        return self

    def _prepare(self, X):
        return self.standardizer_.transform(X) if self.standardizer_ is not None else dict(X)

    def _checked(self, X):
        check_is_fitted(self, "model_")
        names = self.model_.modality_names
        X = check_multimodal_X(X, names)
        check_feature_dims(X, {m.name: m.dims for m in self.model_.config.modalities})
        return self._prepare(X)

    # -- inference ---------------------------------------------------------

    def decision_function(self, X) -> np.ndarray:
        return predict_logits(self.model_, self._checked(X))

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        """Fused multimodal embedding fed to the classifier head."""
        Xs = self._checked(X)
        return self.model_.embed(Xs, training=False)[0].data

    def attention_maps(self, X) -> list[AttentionMap]:
        """Eval-mode attention maps: one per modality (if any), then fusion (if any)."""
        return self.model_.forward(self._checked(X), training=False)[1]

    def evaluate(self, X, y) -> MetricsReport:
        y = np.asarray(y)
        unknown = set(np.unique(y).tolist()) - set(self.classes_.tolist())
        if unknown:
            raise ValueError(f"labels {sorted(unknown)} were not seen during fit")
        y_enc = np.searchsorted(self.classes_, y)
        pred = self.decision_function(X).argmax(axis=1)
        return MetricsReport.from_predictions(y_enc, pred, len(self.classes_))

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "model_")
        extra = self.standardizer_.state() if self.standardizer_ is not None else {}
        params = self.get_params()
        params["modalities"] = [m.__dict__ for m in self.model_.config.modalities]
        params["cooc_channels"] = list(params["cooc_channels"])
        meta = {"classes": self.classes_.tolist(), "params": params}
        save_checkpoint(path, self.model_, extra, meta)

    @classmethod
    def load(cls, path: str | Path) -> "HamletClassifier":
        model, extra, meta = load_checkpoint(path)
        est = cls(**meta["params"])
        est.model_ = model
        est.classes_ = np.asarray(meta["classes"])
        est.standardizer_ = ChannelStandardizer.from_state(extra) if extra else None
        est.config_ = est.run_config(list(model.config.modalities), model.config.n_classes)
        est.n_features_in_ = sum(m.dims for m in model.config.modalities)
        return est
