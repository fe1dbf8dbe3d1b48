"""Classification loss."""

from __future__ import annotations

from typing import Tuple

import numpy as np


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to ``logits``.

    The loss is accumulated in float64 via a max-shifted log-sum-exp, so it is
    finite and non-negative for any finite logits; the gradient keeps the
    dtype of ``logits``.
    """
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects (N, K) logits, got shape {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch of {n}")
    if n == 0:
        raise ValueError("cross_entropy needs a non-empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}); got range [{labels.min()}, {labels.max()}]")

    shifted = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits.astype(logits.dtype)
