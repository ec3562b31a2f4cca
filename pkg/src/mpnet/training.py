"""Adam updates, the epoch loop and k-fold cross-validation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import nn
from .autodiff import Tape, backward, zero_grads
from .data import AugmentConfig, DatasetIndex, FoldPlan, augment_batch, inner_split, make_batches
from .metrics import FoldReport, RunReport, TrainingCurves, evaluate_predictions
from .models import FREEZE_POLICIES, GraphSpec, ParamStore, forward

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class FoldError(RuntimeError):
    def __init__(self, fold: int, cause: Exception):
        self.fold = fold
        self.cause = cause
        super().__init__(f"fold {fold} failed: {cause}")


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, **hyper) -> "AdamState":
        st = cls(**hyper)
        for name, var in params.trainable().items():
            st.m[name] = np.zeros_like(var.value)
            st.v[name] = np.zeros_like(var.value)
        return st


def adam_step(params: ParamStore, state: AdamState) -> None:
    trainable = params.trainable()
    missing = [n for n in trainable if n not in state.m]
    if missing:
        raise KeyError(f"no optimizer moments for trainable parameters: {missing}")
    state.t += 1
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    c1 = np.float32(1 - state.beta1 ** state.t)
    c2 = np.float32(1 - state.beta2 ** state.t)
    lr, eps = np.float32(state.lr), np.float32(state.epsilon)
    for name, var in trainable.items():
        g = var.grad
        if g is None or g.shape != var.value.shape:
            raise ValueError(f"missing gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * (g * g)
        var.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    freeze_policy: str = "backbone"
    inner_val_fraction: float = 0.1
    master_seed: int = 0
    lr: float = 0.001
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.inner_val_fraction <= 0.5:
            raise ValueError("inner_val_fraction must lie in [0, 0.5]")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ValueError(f"unknown freeze policy {self.freeze_policy!r}")


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def predict(spec: GraphSpec, params: ParamStore, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class probabilities."""
    out = [nn.softmax(forward(spec, params, images[i:i + batch_size], "eval"))
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, spec.class_count), np.float32)


def _evaluate(spec, params, images, labels):
    probs = predict(spec, params, images)
    n = len(labels)
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(n), labels], 1e-30))))
    acc = float(np.mean(probs.argmax(axis=1) == labels))
    return loss, acc, probs


def train_model(spec: GraphSpec, params: ParamStore, train_idx, val_idx, ds: DatasetIndex,
                aug: AugmentConfig | None, cfg: TrainConfig) -> TrainingCurves:
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if np.intersect1d(train_idx, val_idx).size:
        raise ValueError("training and validation indices overlap")
    params.apply_freeze_policy(cfg.freeze_policy)
    state = AdamState.for_params(params, lr=cfg.lr)
    variables = list(params.vars.values())
    curves = TrainingCurves()
    for epoch in range(cfg.epochs):
        losses, correct, seen = [], 0, 0
        for b, idx in enumerate(make_batches(train_idx, cfg.batch_size, cfg.master_seed, epoch)):
            x = augment_batch(ds.images, idx, aug, epoch, cfg.workers)
            y = ds.labels[idx]
            tape = Tape()
            logits = forward(spec, params, x, "train", tape, seed=_seed(cfg.master_seed, epoch, b))
            loss = tape.apply(nn.softmax_cross_entropy, logits, labels=y)
            value = float(loss.value[0])
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch + 1}, batch {b + 1}")
            zero_grads(variables)
            backward(tape, loss)
            adam_step(params, state)
            losses.append(value * len(idx))
            correct += int((logits.value.argmax(axis=1) == y).sum())
            seen += len(idx)
        curves.train_loss.append(float(sum(losses) / seen))
        curves.train_acc.append(correct / seen)
        if val_idx.size:
            vl, va, _ = _evaluate(spec, params, ds.images[val_idx], ds.labels[val_idx])
            curves.val_loss.append(vl)
            curves.val_acc.append(va)
        else:
            curves.val_loss.append(None)
            curves.val_acc.append(None)
        log.info("epoch %d/%d loss %.4f acc %.4f", epoch + 1, cfg.epochs,
                 curves.train_loss[-1], curves.train_acc[-1])
    return curves


def run_fold(build: Callable[[int], tuple[GraphSpec, ParamStore]], ds: DatasetIndex, plan: FoldPlan,
             fold: int, aug: AugmentConfig | None, cfg: TrainConfig,
             after_init: Callable[[ParamStore], None] | None = None) -> tuple[FoldReport, ParamStore]:
    seed = _seed(cfg.master_seed, fold)
    spec, params = build(_seed(seed, 0))
    if after_init is not None:
        after_init(params)
    test_idx = plan.test_indices(fold)
    train_all = plan.train_indices(fold)
    train_idx, val_idx = inner_split(train_all, ds.labels, cfg.inner_val_fraction, _seed(seed, 1))
    if np.intersect1d(test_idx, np.r_[train_idx, val_idx]).size:
        raise AssertionError(f"fold {fold}: test samples leak into training")
    fold_aug = replace(aug, master_seed=_seed(seed, 2)) if aug is not None else None
    curves = train_model(spec, params, train_idx, val_idx, ds, fold_aug, replace(cfg, master_seed=_seed(seed, 3)))
    probs = predict(spec, params, ds.images[test_idx])
    report = evaluate_predictions(fold, probs, ds.labels[test_idx], ds.classes, curves)
    report.n_train, report.n_val = int(train_idx.size), int(val_idx.size)
    return report, params


def cross_validate(build: Callable[[int], tuple[GraphSpec, ParamStore]], ds: DatasetIndex, plan: FoldPlan,
                   aug: AugmentConfig | None, cfg: TrainConfig, *, model_name: str = "",
                   config_snapshot: dict | None = None,
                   after_init: Callable[[ParamStore], None] | None = None,
                   on_fold: Callable[[FoldReport, ParamStore], None] | None = None) -> RunReport:
    """Train a freshly initialized model per fold and aggregate fold metrics by mean.

    ``build(seed)`` must return a new graph and parameter store; ``after_init``
    runs on each fresh store (weight import goes here).
    """
    reports = []
    for fold in range(plan.k):
        try:
            report, params = run_fold(build, ds, plan, fold, aug, cfg, after_init)
        except NumericError:
            raise
        except Exception as exc:
            raise FoldError(fold, exc) from exc
        log.info("fold %d accuracy %.4f", fold, report.accuracy)
        if on_fold is not None:
            on_fold(report, params)
        reports.append(report)
    return RunReport.from_folds(ds.source, model_name, ds.classes, config_snapshot or {}, reports)
