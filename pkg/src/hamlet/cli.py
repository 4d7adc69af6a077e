"""Command-line entry point: ``hamlet {generate,train,eval,sweep,export-attention,gradcheck}``.

Runs are described by a JSON config with ``model``, ``train`` and ``data``
sections (see :class:`hamlet.config.RunConfig`); flags override file values.
The ``data`` section holds either ``{"manifest": path}`` or
``{"synthetic": {...SyntheticSpec fields...}, "synthetic_seed": n}``, plus
optional ``n_frames``, ``train_actors`` and ``test_actors``.

Exit codes: 0 success, 2 validation error, 3 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import MultiHeadAttention, mat_fuse, uat_encode
from .config import ConfigError, ModalityConfig, RunConfig
from .data import ChannelStandardizer, DataError, MultimodalDataset, SyntheticSpec, generate_synthetic, \
    load_dataset, synthesize
from .encoders import LSTM, CooccurrenceEncoder, StubEncoder, lstm_forward, segment
from .model import HamletModel, MissingModalityError, cross_entropy_loss, load_checkpoint, save_checkpoint
from .numerics import Rng, Tensor, grad_check
from .training import DivergenceError, FoldPlan, MetricsReport, evaluate, train

log = logging.getLogger("hamlet")

SWEEP_GRID = [(1, 1), (1, 2), (2, 2), (2, 4)]
SWEEP_FUSIONS = ["MAT-SUM", "MAT-CONCAT"]
GRADCHECK_LIMITS = {"embed_dim": 16, "segments": 4, "batch": 2}
THRESHOLD_OP = 1e-6
THRESHOLD_BLOCK = 1e-5
THRESHOLD_MODEL = 1e-4


class ValidationError(ValueError):
    pass


# ----------------------------------------------------------------------------
# config and data resolution
# ----------------------------------------------------------------------------

def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = copy.deepcopy(cfg)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    for flag, attr in [("fusion", "fusion"), ("uat_heads", "uat_heads"), ("mat_heads", "mat_heads"),
                       ("variant", "variant")]:
        if getattr(args, flag, None) is not None:
            setattr(cfg.model, attr, getattr(args, flag))
    if cfg.model.variant == "keyless":
        cfg.model.fusion = "CONCAT"
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "data", None):
        cfg.data = {**cfg.data, "manifest": args.data}
        cfg.data.pop("synthetic", None)
    if getattr(args, "allow_any_dropout", False):
        cfg.allow_any_dropout = True
    if getattr(args, "check_finite", False):
        cfg.check_finite = True
    return cfg


def resolve_data(data: dict, default_seed: int = 0) -> MultimodalDataset:
    """Raw (unstandardized) dataset named by a config ``data`` section."""
    if "manifest" in data:
        ds, _ = load_dataset(data["manifest"], n_frames=data.get("n_frames"))
        return ds
    if "synthetic" in data:
        try:
            spec = SyntheticSpec(**data["synthetic"])
        except TypeError as e:
            raise ConfigError(f"data.synthetic: {e}") from None
        spec.validate()
        ds, _ = synthesize(spec, int(data.get("synthetic_seed", default_seed)))
        return ds
    raise ConfigError("data section needs either 'manifest' or 'synthetic'")


def _actor_mask(ds: MultimodalDataset, actors) -> np.ndarray:
    if actors is None:
        return np.ones(len(ds), bool)
    unknown = set(actors) - set(ds.actors.tolist())
    if unknown:
        raise DataError(f"unknown actors {sorted(unknown)}")
    return np.isin(ds.actors, list(actors))


def complete_config(cfg: RunConfig, ds: MultimodalDataset) -> RunConfig:
    """Fill modalities and class count from the data; check they agree with the config."""
    cfg = copy.deepcopy(cfg)
    if not cfg.model.modalities:
        cfg.model.modalities = [replace(m) for m in ds.modalities]
    else:
        have = {m.name: m.dims for m in ds.modalities}
        for m in cfg.model.modalities:
            if m.name not in have:
                raise DataError(f"modality {m.name!r} is not in the data (has {sorted(have)})")
            if have[m.name] != m.dims:
                raise DataError(f"modality {m.name!r}: config says {m.dims} dims, data has {have[m.name]}")
    cfg.model.n_classes = len(ds.class_names)
    cfg.validate()
    return cfg


def fit_run(cfg: RunConfig, ds: MultimodalDataset):
    """Train one model on ``ds``; returns (model, scaler, history)."""
    scaler = ChannelStandardizer().fit(ds.X) if cfg.train.standardize else None
    X = scaler.transform(ds.X) if scaler else ds.X
    model = HamletModel(cfg.model, seed=cfg.train.seed)
    with nx.check_finite(cfg.check_finite):
        history = train(model, X, ds.y, cfg.train)
    return model, scaler, history


def cross_validate(cfg: RunConfig, ds: MultimodalDataset) -> list[MetricsReport]:
    reports = []
    for _, test_actor in FoldPlan.leave_one_actor_out(ds.actors).folds:
        test = ds.actors == test_actor
        model, scaler, _ = fit_run(cfg, ds.subset(~test))
        held = ds.subset(test)
        X = scaler.transform(held.X) if scaler else held.X
        reports.append(evaluate(model, X, held.y))
    return reports


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_config(args)
    spec = SyntheticSpec(**cfg.data.get("synthetic", {}))
    spec.validate()
    out = Path(args.out or cfg.out)
    seed = args.seed if args.seed is not None else int(cfg.data.get("synthetic_seed", 0))
    ds, path = generate_synthetic(spec, seed, out)
    print(f"wrote {len(ds)} samples to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    ds = resolve_data(cfg.data, cfg.train.seed)
    ds = ds.subset(_actor_mask(ds, cfg.data.get("train_actors")))
    cfg = complete_config(cfg, ds)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    model, scaler, history = fit_run(cfg, ds)
    run = {k: v for k, v in cfg.to_dict().items() if k != "out"}  # location is not part of the run's identity
    save_checkpoint(out / "model.ckpt", model, scaler.state() if scaler else {},
                    {"classes": ds.class_names, "run": run})
    history.to_csv(out / "history.csv")
    first, last = history.rows[0]["train_loss"], history.rows[-1]["train_loss"]
    print(f"trained {cfg.train.epochs} epochs: loss {first:.4f} -> {last:.4f}; wrote {out / 'model.ckpt'}")
    return 0


def _load_run(checkpoint):
    model, extra, meta = load_checkpoint(checkpoint)
    scaler = ChannelStandardizer.from_state(extra) if extra else None
    return model, scaler, meta


def _eval_data(args, meta) -> MultimodalDataset:
    run = meta.get("run", {})
    data = {"manifest": args.data} if args.data else dict(run.get("data", {}))
    ds = resolve_data(data, run.get("train", {}).get("seed", 0))
    return ds.subset(_actor_mask(ds, data.get("test_actors")))


def cmd_eval(args) -> int:
    model, scaler, meta = _load_run(args.checkpoint)
    ds = _eval_data(args, meta)
    X = scaler.transform(ds.X) if scaler else ds.X
    report = evaluate(model, X, ds.y)
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "metrics.json")
    print(f"accuracy {report.accuracy:.2f}%  macro-F1 {report.macro_f1:.2f}%  ({len(ds)} samples)")
    return 0


def _sweep_cell(cfg_dict: dict, uat: int, mat: int, fusion: str) -> tuple[float | None, str]:
    try:
        cfg = RunConfig.from_dict(cfg_dict)
        cfg.model.uat_heads, cfg.model.mat_heads, cfg.model.fusion = uat, mat, fusion
        ds = resolve_data(cfg.data, cfg.train.seed)
        cfg = complete_config(cfg, ds)
        reports = cross_validate(cfg, ds)
        return float(np.mean([r.accuracy for r in reports])), ""
    except Exception as e:  # a failing cell is recorded, the sweep goes on
        return None, f"{type(e).__name__}: {e}"


def parse_grid(text: str) -> list[tuple[int, int]]:
    """``"1,1;1,2"`` -> [(1, 1), (1, 2)] (UAT heads, MAT heads)."""
    try:
        cells = [tuple(int(v) for v in cell.split(",")) for cell in text.split(";") if cell.strip()]
    except ValueError:
        raise ValidationError(f"bad --grid {text!r}; expected 'uat,mat;uat,mat;...'") from None
    if not cells or any(len(c) != 2 for c in cells):
        raise ValidationError(f"bad --grid {text!r}; expected 'uat,mat;uat,mat;...'")
    return cells


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    cfg.model.variant = "hamlet"
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    grid = parse_grid(args.grid) if args.grid else SWEEP_GRID
    fusions = args.fusions.split(",") if args.fusions else SWEEP_FUSIONS
    cells = [(u, m, f) for u, m in grid for f in fusions]
    base = cfg.to_dict()
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_sweep_cell, [base] * len(cells), *zip(*cells)))
    else:
        results = [_sweep_cell(base, *c) for c in cells]
    errors = {}
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["uat_heads", "mat_heads", "fusion", "metric"])
        for (u, m, f), (metric, err) in zip(cells, results):
            w.writerow([u, m, f, repr(metric) if metric is not None else "failed"])
            if err:
                errors[f"{u},{m},{f}"] = err
    (out / "sweep_errors.json").write_text(json.dumps(errors, indent=2, sort_keys=True) + "\n")
    print(f"{'UAT':>4} {'MAT':>4} " + " ".join(f"{f:>11}" for f in fusions))
    table = {c: r[0] for c, r in zip(cells, results)}
    for u, m in grid:
        cols = [table[(u, m, f)] for f in fusions]
        print(f"{u:>4} {m:>4} " + " ".join(f"{'failed' if v is None else f'{v:.2f}':>11}" for v in cols))
    for cell, err in errors.items():
        print(f"cell {cell} failed: {err}", file=sys.stderr)
    return 0


def attention_report(model: HamletModel, ds: MultimodalDataset, X, include_raw: bool = False) -> dict:
    """Per-sample reduced attention maps plus per-class mean fusion weights."""
    _, maps = model.forward(X, training=False)
    samples = []
    for i, sid in enumerate(ds.ids):
        entry = {"sample_id": sid, "label": int(ds.y[i]), "actor": str(ds.actors[i]),
                 "unimodal": {}, "fusion": None}
        for amap in maps:
            js = amap.to_json(i, sid, include_raw)
            js.pop("sample_id")
            if amap.source == "fusion":
                entry["fusion"] = js
            else:
                entry["unimodal"][amap.source] = js
        samples.append(entry)
    report = {"modalities": model.modality_names, "classes": ds.class_names, "samples": samples}
    fusion = next((m for m in maps if m.source == "fusion"), None)
    if fusion is not None:
        M = len(model.modality_names)
        per_class = {}
        for k, name in enumerate(ds.class_names):
            sel = ds.y == k
            if sel.any():
                per_class[name] = fusion.reduced[sel].mean(axis=0).tolist()
        summary = {"uniform": 1.0 / M, "mean_fusion_weight": per_class}
        if ds.informative is not None:
            names = model.modality_names
            above = {}
            for k, name in enumerate(ds.class_names):
                if name in per_class:
                    above[name] = per_class[name][ds.informative[k] % len(names)] > 1.0 / M
            summary["informative_modality"] = {name: names[ds.informative[k] % len(names)]
                                               for k, name in enumerate(ds.class_names)}
            summary["informative_above_uniform"] = above
            summary["classes_localized"] = int(sum(above.values()))
        report["summary"] = summary
    return report


def cmd_export_attention(args) -> int:
    model, scaler, meta = _load_run(args.checkpoint)
    ds = _eval_data(args, meta)
    if args.samples:
        wanted = set(args.samples.split(","))
        missing = wanted - set(ds.ids)
        if missing:
            raise DataError(f"unknown sample ids {sorted(missing)}")
        ds = ds.subset(np.array([sid in wanted for sid in ds.ids]))
    X = scaler.transform(ds.X) if scaler else ds.X
    report = attention_report(model, ds, X, include_raw=args.raw)
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "attention.json"
    path.write_text(json.dumps(report, indent=1) + "\n")
    if "summary" in report:
        s = report["summary"]
        for name, w in s["mean_fusion_weight"].items():
            flag = ""
            if "informative_modality" in s:
                flag = f"  informative={s['informative_modality'][name]}" \
                       f" {'above' if s['informative_above_uniform'][name] else 'not above'} uniform"
            print(f"{name}: " + " ".join(f"{v:.3f}" for v in w) + flag)
    print(f"wrote {path}")
    return 0


# ----------------------------------------------------------------------------
# gradient check
# ----------------------------------------------------------------------------

def _gradcheck_config(cfg: RunConfig) -> RunConfig:
    cfg = copy.deepcopy(cfg)
    m = cfg.model
    if not m.modalities:
        m.modalities = [ModalityConfig("vec", 4), ModalityConfig("pts", 9, encoder="cooccurrence", kind="points")]
        m.embed_dim, m.segments, m.cooc_channels = 8, 3, [3, 4]
    if m.embed_dim > GRADCHECK_LIMITS["embed_dim"]:
        raise ValidationError(f"gradcheck needs embed_dim <= {GRADCHECK_LIMITS['embed_dim']}, got {m.embed_dim}")
    if m.segments > GRADCHECK_LIMITS["segments"]:
        raise ValidationError(f"gradcheck needs segments <= {GRADCHECK_LIMITS['segments']}, got {m.segments}")
    if m.embed_dim < 1 or any(mod.dims < 1 for mod in m.modalities):
        raise ValidationError("gradcheck config has no trainable parameters")
    cfg.validate()
    return cfg


def gradcheck_blocks(cfg: RunConfig, batch: int = 2) -> list[tuple[str, float, float]]:
    """Max relative gradient error for each elementary op and block, then the full model."""
    if batch > GRADCHECK_LIMITS["batch"]:
        raise ValidationError(f"gradcheck needs batch <= {GRADCHECK_LIMITS['batch']}, got {batch}")
    cfg = _gradcheck_config(cfg)
    mc = cfg.model
    model = HamletModel(mc, seed=cfg.train.seed)
    if model.n_parameters() == 0:
        raise ValidationError("gradcheck config has no trainable parameters")
    data = Rng(cfg.train.seed).child("gradcheck")
    r = lambda *shape: data.normal(0.0, 1.0, shape)
    w = r(3, 4)
    ops = {
        "add": lambda a, b: ((a + b) * w).sum(),
        "sub": lambda a, b: ((a - b) * w).sum(),
        "mul": lambda a, b: ((a * b) * w).sum(),
        "div": lambda a, b: ((a / (b * b + 1.0)) * w).sum(),
        "matmul": lambda a, b: (nx.matmul(a, b.transpose()) ** 2).sum(),
        "exp": lambda a, b: (nx.exp(a) * w).sum(),
        "log": lambda a, b: (nx.log(a * a + 1.0) * w).sum(),
        "sqrt": lambda a, b: (nx.sqrt(a * a + 1.0) * w).sum(),
        "power": lambda a, b: ((a ** 3.0) * w).sum(),
        "tanh": lambda a, b: (nx.tanh(a) * w).sum(),
        "sigmoid": lambda a, b: (nx.sigmoid(a) * w).sum(),
        "relu": lambda a, b: (nx.relu(a) * w).sum(),
        "softmax": lambda a, b: (nx.softmax(a, axis=-1) * w).sum(),
        "log_softmax": lambda a, b: (nx.log_softmax(a, axis=-1) * w).sum(),
        "mean": lambda a, b: (a.mean(axis=0) ** 2).sum(),
        "amax": lambda a, b: (nx.amax(a, axis=1) * w[:, 0]).sum(),
        "concat": lambda a, b: (nx.concat([a, b], axis=1) ** 2).sum(),
        "stack": lambda a, b: (nx.stack([a, b], axis=0) * w).sum(),
        "reshape_transpose": lambda a, b: (a.reshape(4, 3).transpose() * w).sum(),
    }
    results = []
    for name, f in ops.items():
        a, b = Tensor(r(3, 4)), Tensor(r(3, 4))
        results.append((f"op.{name}", grad_check(f, [a, b]), THRESHOLD_OP))

    B, E, S = batch, mc.embed_dim, mc.segments
    T = 3 * S
    root = Rng(cfg.train.seed).child("gradcheck.blocks")
    stub = StubEncoder(root.child("stub"), 4, E)
    x = Tensor(r(B, T, 4))
    ws = r(B, S, E)
    results.append(("stub_encoder", grad_check(lambda t, *ps: (stub(segment(t, S)) * ws).sum(),
                                               [x, *stub.parameters()]), THRESHOLD_BLOCK))
    cooc = CooccurrenceEncoder(root.child("cooc"), points=3, coords=3, out_dim=E, channels=(3, 4),
                               dropout=mc.dropout_encoder)
    xc = Tensor(r(B, T, 9))
    results.append(("cooccurrence_encoder", grad_check(
        lambda t, *ps: (cooc(segment(t, S), training=True, rng=Rng(7)) * ws).sum(),
        [xc, *cooc.parameters()]), THRESHOLD_BLOCK))
    lstm = LSTM(root.child("lstm"), E, E, mc.lstm_layers)
    h = Tensor(r(B, S, E))
    results.append(("lstm", grad_check(lambda t, *ps: (lstm_forward(t, lstm) * ws).sum(),
                                       [h, *lstm.parameters()]), THRESHOLD_BLOCK))
    uat = MultiHeadAttention(root.child("uat"), E, mc.uat_heads, E)
    wu = r(B, E)
    results.append(("uat", grad_check(lambda t, *ps: (uat_encode(t, uat)[0] * wu).sum(),
                                      [h, *uat.parameters()]), THRESHOLD_BLOCK))
    mat = MultiHeadAttention(root.child("mat"), E, mc.mat_heads, E)
    embs = [Tensor(r(B, E)) for _ in range(len(mc.modalities))]
    wm = r(B, E * (len(embs) if mc.combiner == "concat" else 1))
    results.append(("mat", grad_check(lambda *ts: (mat_fuse(list(ts[:len(embs)]), mat, mc.combiner)[0] * wm).sum(),
                                      [*embs, *mat.parameters()]), THRESHOLD_BLOCK))
    xb = {m.name: r(B, T, m.dims) for m in mc.modalities}
    labels = np.arange(B) % mc.n_classes

    def full(*params):
        logits, _ = model.forward(xb, training=True, rng=Rng(11))
        return cross_entropy_loss(logits, labels)

    results.append(("model", grad_check(full, model.parameters()), THRESHOLD_MODEL))
    return results


def cmd_gradcheck(args) -> int:
    cfg = load_config(args)
    t = time.time()
    results = gradcheck_blocks(cfg, args.batch)
    failed = []
    for name, err, limit in results:
        ok = err < limit
        failed += [] if ok else [name]
        print(f"{name:<24} {err:.3e}  (< {limit:.0e})  {'ok' if ok else 'FAIL'}")
    print(f"gradcheck finished in {time.time() - t:.1f}s")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 3
    return 0


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--check-finite", action="store_true", help="raise on the first NaN/inf")
    common.add_argument("--allow-any-dropout", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--fusion", choices=["MAT-SUM", "MAT-CONCAT", "SUM", "CONCAT"])
    model.add_argument("--uat-heads", type=int)
    model.add_argument("--mat-heads", type=int)
    model.add_argument("--variant", choices=["hamlet", "nsa", "usa", "keyless"])
    model.add_argument("--epochs", type=int)
    model.add_argument("--data", help="dataset manifest (overrides the config's data section)")

    p = argparse.ArgumentParser(prog="hamlet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.set_defaults(func=cmd_generate)
    t = sub.add_parser("train", parents=[common, model], help="train and write checkpoint + history")
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="dataset manifest (default: the training run's data)")
    e.set_defaults(func=cmd_eval)
    s = sub.add_parser("sweep", parents=[common, model], help="UAT heads x MAT heads x fusion grid")
    s.add_argument("--grid", help="head pairs 'uat,mat;...' (default: 1,1;1,2;2,2;2,4)")
    s.add_argument("--fusions", help="comma-separated fusion modes (default: MAT-SUM,MAT-CONCAT)")
    s.add_argument("--jobs", type=int, default=1, help="worker processes for grid cells")
    s.set_defaults(func=cmd_sweep)
    a = sub.add_parser("export-attention", parents=[common], help="dump attention maps as JSON")
    a.add_argument("checkpoint")
    a.add_argument("--data", help="dataset manifest (default: the training run's data)")
    a.add_argument("--samples", help="comma-separated sample ids (default: all)")
    a.add_argument("--raw", action="store_true", help="include raw per-head matrices")
    a.set_defaults(func=cmd_export_attention)
    c = sub.add_parser("gradcheck", parents=[common, model], help="finite-difference gradient check")
    c.add_argument("--batch", type=int, default=2)
    c.set_defaults(func=cmd_gradcheck)
    return p


VALIDATION_ERRORS = (ConfigError, DataError, ValidationError, nx.ShapeError, MissingModalityError,
                     FileNotFoundError, ValueError, KeyError, TypeError)
RUNTIME_ERRORS = (nx.NonFiniteError, DivergenceError, FloatingPointError, ArithmeticError, RuntimeError, OSError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except RUNTIME_ERRORS as e:
        if isinstance(e, FileNotFoundError):
            print(f"error: {e}", file=sys.stderr)
            return 2
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
