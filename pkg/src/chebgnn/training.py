"""Adam, the plateau learning-rate schedule, and the seeded training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset
from .graph import BatchedGraph, batch
from .metrics import (
    loss_bce_logits,
    loss_l1,
    loss_node_ce,
    metric_mae,
    metric_roc_auc,
    metric_weighted_accuracy,
)
from .nn import Model, ModelSpec, save_checkpoint

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (41, 95, 12, 35)


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr0: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-5
    max_epochs: int = 100
    seeds: Tuple[int, ...] = DEFAULT_SEEDS

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 0 or self.plateau_patience < 1:
            raise ValueError("batch_size, plateau_patience must be >= 1 and max_epochs >= 0")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.lr0 < 0 or self.min_lr <= 0:
            raise ValueError("lr0 must be >= 0 and min_lr > 0")
        if not self.seeds:
            raise ValueError("need at least one seed")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float) -> None:
    """In-place bias-corrected Adam update of ``params`` and ``state``."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise DivergenceError(f"non-finite gradient at {len(bad)} entries (first index {bad[0]})")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    if lr == 0.0:
        return
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# scheduler


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement.

    The rate never drops below ``min_lr``; a reduction requested while
    already at the floor sets ``exhausted``.
    """

    def __init__(self, lr0=1e-3, factor=0.5, patience=5, min_lr=1e-5, mode="max"):
        if mode not in ("max", "min"):
            raise ValueError(f"mode must be 'max' or 'min', got {mode!r}")
        self.lr = lr0
        self.factor, self.patience, self.min_lr, self.mode = factor, patience, min_lr, mode
        self.best: Optional[float] = None
        self.bad_epochs = 0
        self.exhausted = False

    def _improved(self, score: float) -> bool:
        if self.best is None:
            return True
        return score > self.best if self.mode == "max" else score < self.best

    def step(self, score: float) -> float:
        if self._improved(score):
            self.best = score
            self.bad_epochs = 0
            return self.lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            if self.lr <= self.min_lr:
                self.exhausted = True
            self.lr = max(self.lr * self.factor, self.min_lr)
        return self.lr


def plateau_scheduler(history: Sequence[float], lr0=1e-3, factor=0.5, patience=5, min_lr=1e-5, mode="max") -> float:
    """Learning rate after replaying a history of validation scores."""
    sched = PlateauScheduler(lr0, factor, patience, min_lr, mode)
    for s in history:
        sched.step(s)
    return sched.lr


# ---------------------------------------------------------------------------
# task plumbing


TASK_METRIC = {
    "node-classification": ("weighted_accuracy", "max"),
    "graph-regression": ("mae", "min"),
    "graph-binary": ("roc_auc", "max"),
}


def _targets(bg: BatchedGraph, task: str) -> np.ndarray:
    if task == "node-classification":
        return bg.graph.node_labels
    return np.asarray(bg.graph.graph_label, dtype=np.float64)


def task_loss(task: str, out: np.ndarray, target: np.ndarray):
    if task == "node-classification":
        return loss_node_ce(out, target)
    if task == "graph-regression":
        return loss_l1(out, target)
    return loss_bce_logits(out, target)


def task_metric(task: str, out: np.ndarray, target: np.ndarray) -> float:
    if task == "node-classification":
        return metric_weighted_accuracy(out, target)
    if task == "graph-regression":
        return metric_mae(out, target)
    return metric_roc_auc(np.asarray(target).reshape(out.shape), out)


def make_batches(graphs, batch_size: int) -> List[BatchedGraph]:
    return [batch(graphs[i : i + batch_size]) for i in range(0, len(graphs), batch_size)]


def evaluate(model: Model, batches: Sequence[BatchedGraph], task: Optional[str] = None) -> Tuple[float, float]:
    """Return ``(loss, metric)`` over all batches with the model in eval mode.

    The metric is computed over the pooled outputs of every batch, not
    averaged per batch.
    """
    task = task or model.spec.task
    outs, tgts, losses, sizes = [], [], [], []
    for bg in batches:
        out = model.forward(bg, train=False)
        tgt = _targets(bg, task)
        losses.append(task_loss(task, out, tgt)[0])
        sizes.append(len(out))
        outs.append(out)
        tgts.append(tgt)
    out = np.concatenate(outs)
    tgt = np.concatenate(tgts)
    loss = float(np.average(losses, weights=sizes))
    return loss, task_metric(task, out, tgt)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class MetricReport:
    metric: str
    per_seed: List[float]
    seeds: List[int]
    mean: float = float("nan")
    std: float = float("nan")
    failed: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.per_seed:
            self.mean = float(np.mean(self.per_seed))
            self.std = float(np.std(self.per_seed))

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "seeds": list(self.seeds),
            "per_seed": list(self.per_seed),
            "mean": self.mean,
            "std": self.std,
            "failed": {str(k): v for k, v in self.failed.items()},
        }


@dataclass
class RunResult:
    seed: int
    history: List[dict]
    best_epoch: int
    best_val: float
    test_metric: float
    model: Model
    status: str = "ok"


CSV_FIELDS = ("epoch", "lr", "train_loss", "val_metric", "test_metric")


def train_one(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    seed: int,
    log_path=None,
    checkpoint_path=None,
) -> RunResult:
    """Train ``model`` in place and restore its best-validation parameters.

    Epoch 0 in the history is the untrained model.
    """
    cfg.validate()
    task = model.spec.task
    metric_name, mode = TASK_METRIC[task]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    train_graphs = dataset.subset("train")
    val_batches = make_batches(dataset.subset("val"), cfg.batch_size)
    test_batches = make_batches(dataset.subset("test"), cfg.batch_size)
    sched = PlateauScheduler(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr, mode)
    adam = AdamState.zeros(model.flat.size)

    def snapshot():
        return model.flat.copy(), model.buffers().copy()

    _, val = evaluate(model, val_batches, task)
    _, test = evaluate(model, test_batches, task)
    history = [dict(epoch=0, lr=sched.lr, train_loss=float("nan"), val_metric=val, test_metric=test)]
    best = (0, val, test, snapshot())
    better = (lambda a, b: a > b) if mode == "max" else (lambda a, b: a < b)

    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(len(train_graphs))
        losses, weights = [], []
        for start in range(0, len(order), cfg.batch_size):
            bg = batch([train_graphs[i] for i in order[start : start + cfg.batch_size]])
            out = model.forward(bg, train=True)
            loss, grad = task_loss(task, out, _targets(bg, task))
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            model.zero_grad()
            model.backward(grad)
            adam_step(adam, model.flat, model.flat_grad, lr)
            losses.append(loss)
            weights.append(len(out))
        _, val = evaluate(model, val_batches, task)
        _, test = evaluate(model, test_batches, task)
        history.append(
            dict(
                epoch=epoch,
                lr=lr,
                train_loss=float(np.average(losses, weights=weights)) if losses else float("nan"),
                val_metric=val,
                test_metric=test,
            )
        )
        log.debug("seed %d epoch %d lr %.2e loss %.4f val %.4f", seed, epoch, lr, history[-1]["train_loss"], val)
        if better(val, best[1]):
            best = (epoch, val, test, snapshot())
        sched.step(val)
        if sched.exhausted:
            break

    model.flat[...] = best[3][0]
    model.set_buffers(best[3][1])
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            w.writeheader()
            for row in history:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, extra={"best_epoch": best[0], "metric": metric_name, "run_seed": seed})
    return RunResult(seed, history, best[0], best[1], best[2], model)


def model_seed(seed: int) -> int:
    """Parameter-initialization seed derived from a run seed."""
    return int(np.random.SeedSequence([seed, 0]).generate_state(1)[0])


def train(
    spec: ModelSpec,
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir=None,
) -> Tuple[MetricReport, List[RunResult]]:
    """Train one fresh model per seed; report the test metric at the best validation epoch."""
    cfg.validate()
    if spec.input_dim != dataset.input_dim:
        raise ValueError(f"model input width {spec.input_dim} != dataset input_dim {dataset.input_dim}")
    if spec.task != dataset.task:
        raise ValueError(f"model task {spec.task!r} != dataset task {dataset.task!r}")
    out_dir = Path(out_dir) if out_dir is not None else None
    runs, scores, ok_seeds, failed = [], [], [], {}
    for seed in cfg.seeds:
        model = Model(spec, model_seed(seed))
        kwargs = {}
        if out_dir is not None:
            kwargs = dict(
                log_path=out_dir / f"epochs_seed{seed}.csv",
                checkpoint_path=out_dir / f"checkpoint_seed{seed}.npz",
            )
        try:
            run = train_one(model, dataset, cfg, seed, **kwargs)
        except DivergenceError as exc:
            log.warning("seed %d diverged: %s", seed, exc)
            failed[seed] = str(exc)
            continue
        runs.append(run)
        scores.append(run.test_metric)
        ok_seeds.append(seed)
    report = MetricReport(TASK_METRIC[spec.task][0], scores, ok_seeds, failed=failed)
    return report, runs
