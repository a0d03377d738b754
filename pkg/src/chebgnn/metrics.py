"""Losses (value + gradient) and evaluation metrics."""
from __future__ import annotations

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata


# ---------------------------------------------------------------------------
# losses; each returns (scalar loss, gradient w.r.t. the first argument)


def inverse_frequency_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    w = np.zeros(n_classes)
    present = counts > 0
    w[present] = len(labels) / (present.sum() * counts[present])
    return w


def loss_node_ce(logits: np.ndarray, labels: np.ndarray, class_weights=None):
    """Class-weighted softmax cross-entropy, normalized by the total weight.

    With ``class_weights=None`` the weights are the inverse class
    frequencies of ``labels``, so every present class contributes equally.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if class_weights is None:
        class_weights = inverse_frequency_weights(labels, c)
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(n), labels]
    total = w.sum()
    loss = float((w * nll).sum() / total)
    grad = np.exp(shifted - logz[:, None])
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / total)[:, None]
    return loss, grad


def loss_l1(pred: np.ndarray, target: np.ndarray):
    """Mean absolute error; the subgradient at zero residual is 0."""
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    r = pred - target
    return float(np.abs(r).mean()), np.sign(r) / r.size


def loss_bce_logits(logits: np.ndarray, labels: np.ndarray):
    """Binary cross-entropy on logits, averaged over non-NaN labels."""
    y = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    mask = ~np.isnan(y)
    y = np.where(mask, y, 0.0)
    x = logits
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    m = mask.sum()
    grad = np.where(mask, (expit(x) - y) / m, 0.0)
    return float((per * mask).sum() / m), grad


# ---------------------------------------------------------------------------
# metrics


def metric_weighted_accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    """Mean per-class recall over the classes present in ``labels``.

    ``preds`` may be class ids or a score matrix (argmax is taken).
    """
    preds = np.asarray(preds)
    if preds.ndim == 2:
        preds = preds.argmax(axis=1)
    labels = np.asarray(labels)
    recalls = [np.mean(preds[labels == c] == c) for c in np.unique(labels)]
    return float(np.mean(recalls))


def metric_accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    if preds.ndim == 2:
        preds = preds.argmax(axis=1)
    return float(np.mean(preds == np.asarray(labels)))


def metric_mae(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    return float(np.abs(pred - np.asarray(target, dtype=np.float64).reshape(pred.shape)).mean())


def _columns(labels, scores):
    y = np.asarray(labels, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    if y.ndim == 1:
        y, s = y[:, None], s.reshape(-1, 1)
    for j in range(y.shape[1]):
        keep = ~np.isnan(y[:, j])
        yj, sj = y[keep, j], s[keep, j]
        if 0 < yj.sum() < len(yj):
            yield yj.astype(bool), sj


def _roc_auc_1d(pos: np.ndarray, s: np.ndarray) -> float:
    # Mann-Whitney U with average ranks == pairwise concordance, ties count 1/2.
    r = rankdata(s)
    n_pos = pos.sum()
    n_neg = len(pos) - n_pos
    return float((r[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _ap_1d(pos: np.ndarray, s: np.ndarray) -> float:
    # Non-interpolated AP: sum over distinct thresholds of precision * recall increment.
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], pos[order]
    tp = np.cumsum(pos)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = tp[last]
    precision = tp / (last + 1)
    recall_gain = np.diff(np.r_[0, tp]) / pos.sum()
    return float((precision * recall_gain).sum())


def metric_roc_auc(labels, scores) -> float:
    """ROC-AUC; with 2-D inputs, the mean over columns having both classes."""
    vals = [_roc_auc_1d(y, s) for y, s in _columns(labels, scores)]
    if not vals:
        raise ValueError("ROC-AUC needs at least one positive and one negative label")
    return float(np.mean(vals))


def metric_ap(labels, scores) -> float:
    """Average precision; with 2-D inputs, the mean over columns having both classes."""
    vals = [_ap_1d(y, s) for y, s in _columns(labels, scores)]
    if not vals:
        raise ValueError("AP needs at least one positive and one negative label")
    return float(np.mean(vals))
