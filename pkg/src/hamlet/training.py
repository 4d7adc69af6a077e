"""AdamW, cosine annealing with warm restarts, the training loop and metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import TrainConfig
from .model import HamletModel, cross_entropy_loss
from .numerics import NonFiniteError, Rng, Tensor

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


# ----------------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------------

@dataclass
class AdamWState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(state: AdamWState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
               lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update, applied to ``params`` in place.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p)


class AdamW:
    """Drives :func:`adamw_step` over a model's named parameters."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-2):
        self.params = dict(named_params)
        self.state = AdamWState(lr, betas[0], betas[1], eps, weight_decay)

    def step(self, lr: float | None = None) -> None:
        adamw_step(self.state, {n: p.data for n, p in self.params.items()},
                   {n: p.grad for n, p in self.params.items()}, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ----------------------------------------------------------------------------
# schedule
# ----------------------------------------------------------------------------

@dataclass
class CosineWarmRestarts:
    """Cosine annealing from ``lr_max`` to ``lr_min``, restarting after each period.

    Periods have lengths ``t0, t0*t_mult, t0*t_mult**2, ...`` (in whatever
    unit ``lr_at`` is called with).
    """

    lr_max: float = 3e-4
    lr_min: float = 0.0
    t0: int = 10
    t_mult: int = 2

    def __post_init__(self):
        if self.t0 < 1 or self.t_mult < 1:
            raise ValueError("t0 and t_mult must be >= 1")

    def position(self, step: int) -> tuple[int, int]:
        """Return (t_cur, period length) for ``step``."""
        if step < 0:
            raise ValueError("step must be >= 0")
        period = self.t0
        if self.t_mult == 1:
            return step % period, period
        t = step
        while t >= period:
            t -= period
            period *= self.t_mult
        return t, period

    def lr_at(self, step: int) -> float:
        t_cur, period = self.position(step)
        if t_cur == 0:
            return self.lr_max
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * t_cur / period))


def lr_at(schedule: CosineWarmRestarts, step: int) -> float:
    return schedule.lr_at(step)


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------

@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: list[list[int]]

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes: int) -> "MetricsReport":
        y_true = np.asarray(y_true, dtype=int)
        y_pred = np.asarray(y_pred, dtype=int)
        cm = np.zeros((n_classes, n_classes), dtype=int)
        np.add.at(cm, (y_true, y_pred), 1)
        return cls.from_confusion(cm)

    @classmethod
    def from_confusion(cls, cm) -> "MetricsReport":
        """Rows are true classes, columns predictions.

        Macro-F1 averages over classes that occur in the truth or the
        predictions; a class with no predicted (or true) samples gets
        precision (or recall) 0.
        """
        cm = np.asarray(cm, dtype=int)
        total = cm.sum()
        tp = np.diag(cm).astype(float)
        pred = cm.sum(axis=0).astype(float)
        true = cm.sum(axis=1).astype(float)
        precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
        recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
        denom = precision + recall
        f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
        present = (pred > 0) | (true > 0)
        macro = float(f1[present].mean()) if present.any() else 0.0
        acc = float(tp.sum() / total) if total else 0.0
        return cls(100.0 * acc, 100.0 * macro, precision.tolist(), recall.tolist(), f1.tolist(), cm.tolist())

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "confusion": self.confusion}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------

@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    COLUMNS = ("epoch", "step", "lr", "train_loss", "train_acc", "val_acc")

    def to_csv(self, path: str | Path) -> None:
        cols = [c for c in self.COLUMNS if any(c in r for r in self.rows)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def _subset(X: Mapping[str, np.ndarray], idx) -> dict[str, np.ndarray]:
    return {k: v[idx] for k, v in X.items()}


def predict_logits(model: HamletModel, X: Mapping[str, np.ndarray], batch_size: int = 64) -> np.ndarray:
    n = len(next(iter(X.values())))
    out = [model.forward(_subset(X, slice(i, i + batch_size)), training=False)[0].data
           for i in range(0, n, batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.n_classes))


def evaluate(model: HamletModel, X: Mapping[str, np.ndarray], y) -> MetricsReport:
    pred = predict_logits(model, X).argmax(axis=1)
    return MetricsReport.from_predictions(y, pred, model.config.n_classes)


def train(model: HamletModel, X: Mapping[str, np.ndarray], y, config: TrainConfig,
          validation: tuple[Mapping[str, np.ndarray], np.ndarray] | None = None) -> History:
    """Mini-batch AdamW with cosine warm restarts; deterministic given ``config.seed``.

    Each epoch reshuffles with the seeded stream and splits into
    ``ceil(N / batch_size)`` near-equal batches (so batch norm never sees a
    single-sample batch).
    """
    y = np.asarray(y, dtype=int)
    n = len(y)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = Rng(config.seed).child("train")
    n_batches = max(1, math.ceil(n / config.batch_size))
    period = config.t0_epochs * (n_batches if config.schedule_unit == "step" else 1)
    schedule = CosineWarmRestarts(config.lr, config.lr_min, period, config.t_mult)
    opt = AdamW(list(model.named_parameters()), config.lr, (config.beta1, config.beta2),
                config.adam_eps, config.weight_decay)
    history = History()
    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for idx in np.array_split(perm, n_batches):
            lr = schedule.lr_at(step if config.schedule_unit == "step" else epoch)
            logits, _ = model.forward(_subset(X, idx), training=True, rng=rng)
            loss = cross_entropy_loss(logits, y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            history.lrs.append(lr)
            history.step_losses.append(value)
            loss_sum += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
            step += 1
        row = {"epoch": epoch, "step": step, "lr": lr, "train_loss": loss_sum / n, "train_acc": correct / n}
        if validation is not None:
            row["val_acc"] = evaluate(model, *validation).accuracy / 100.0
        history.rows.append(row)
        log.debug("epoch %d loss %.4f acc %.3f", epoch, row["train_loss"], row["train_acc"])
    return history


# ----------------------------------------------------------------------------
# leave-one-actor-out cross-validation
# ----------------------------------------------------------------------------

@dataclass
class FoldPlan:
    actors: list
    folds: list[tuple[list, object]]

    @classmethod
    def leave_one_actor_out(cls, actors) -> "FoldPlan":
        unique = sorted(set(np.asarray(actors).tolist()))
        if len(unique) < 2:
            raise ValueError(f"leave-one-actor-out needs at least 2 actors, got {len(unique)}")
        return cls(unique, [([a for a in unique if a != test], test) for test in unique])


@dataclass
class CVReport:
    folds: list[MetricsReport]
    test_actors: list

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([f.accuracy for f in self.folds]))

    @property
    def mean_macro_f1(self) -> float:
        return float(np.mean([f.macro_f1 for f in self.folds]))

    def to_dict(self) -> dict:
        return {"mean_accuracy": self.mean_accuracy, "mean_macro_f1": self.mean_macro_f1,
                "folds": [{"test_actor": a, **f.to_dict()} for a, f in zip(self.test_actors, self.folds)]}


def loaocv(estimator, X: Mapping[str, np.ndarray], y, actors) -> CVReport:
    """Fit a fresh clone of ``estimator`` per fold, test on the held-out actor."""
    from sklearn.base import clone

    y = np.asarray(y)
    actors = np.asarray(actors)
    plan = FoldPlan.leave_one_actor_out(actors)
    reports = []
    for _, test_actor in plan.folds:
        test = actors == test_actor
        est = clone(estimator).fit(_subset(X, ~test), y[~test])
        reports.append(est.evaluate(_subset(X, test), y[test]))
        log.info("fold actor=%s accuracy=%.2f", test_actor, reports[-1].accuracy)
    return CVReport(reports, [f[1] for f in plan.folds])
