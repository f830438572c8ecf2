"""Class-weighted multi-label binary cross-entropy."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, InputError


def class_weights(counts) -> np.ndarray:
    """Inverse-frequency weights normalized so the mean-count class gets 1.

    ``W_c = mean(counts) / counts_c``; only count ratios matter.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ConfigError(f"counts must be a non-empty vector, got shape {counts.shape}")
    if np.any(counts <= 0):
        bad = [int(i) for i in np.flatnonzero(counts <= 0)]
        raise ConfigError(
            f"class(es) {bad} never occur in the training split; drop them or smooth the counts"
        )
    return counts.mean() / counts


def _log_sigmoid(v):
    # log(sigmoid(v)) = -log(1 + exp(-v)), stable for large |v|
    return -np.logaddexp(0.0, -v)


def sigmoid(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def wbce_loss(scores, labels, weights):
    """Weighted cross-entropy summed over classes and averaged over the batch.

    ``L = sum_c -1/N sum_n [W_c k log s(v) + (1 - k) log(1 - s(v))]`` with
    ``s`` the sigmoid and ``N`` the batch size. Returns ``(loss, dL/dscores)``;
    the loss is computed in float64, the gradient has the dtype of ``scores``.
    """
    v = np.asarray(scores)
    k = np.asarray(labels)
    w = np.asarray(weights, dtype=np.float64)
    if v.ndim != 2 or k.shape != v.shape or w.shape != (v.shape[1],):
        raise ConfigError(
            f"shape mismatch: scores {v.shape}, labels {k.shape}, weights {w.shape}"
        )
    if not np.all((k == 0) | (k == 1)):
        raise InputError("labels must be exactly 0 or 1")
    n = v.shape[0]
    v64 = v.astype(np.float64)
    k64 = k.astype(np.float64)
    pos = w * k64 * _log_sigmoid(v64)
    neg = (1.0 - k64) * _log_sigmoid(-v64)
    loss = float(-(pos + neg).sum() / n)
    s = sigmoid(v64)
    grad = ((1.0 - k64) * s - w * k64 * (1.0 - s)) / n
    out_dtype = v.dtype if np.issubdtype(v.dtype, np.floating) else np.float64
    return loss, grad.astype(out_dtype)
