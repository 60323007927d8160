"""Pure-numpy SGD inner loops (fallback backend).

Semantics match the compiled backend in `_speedups.pyx`; floating-point
results may differ at rounding level because BLAS accumulation order is
not the same as the C loops.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def sgd_quadratic(
    X: np.ndarray,
    y: np.ndarray,
    w0: np.ndarray,
    idx: np.ndarray,
    eta: np.ndarray,
    lam: float,
) -> tuple[np.ndarray, int]:
    """Minibatch SGD on the ridge least-squares loss.

    One step per row of `idx`: w <- w - eta[s] * (mean residual gradient
    over the batch + lam * w).  Returns (w_final, bad_step) where
    bad_step is the first step whose update produced a non-finite entry,
    or -1 if the whole trajectory stayed finite.
    """
    w = np.array(w0, dtype=np.float64, copy=True)
    n_steps = idx.shape[0]
    # Divergence is detected via the explicit isfinite check; numpy's
    # overflow warnings on the way there are expected noise.
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(n_steps):
            rows = X[idx[s]]
            resid = rows @ w - y[idx[s]]
            grad = rows.T @ resid / idx.shape[1] + lam * w
            w -= eta[s] * grad
            if not np.all(np.isfinite(w)):
                return w, s
    return w, -1


def sgd_logistic(
    X: np.ndarray,
    y: np.ndarray,
    w0: np.ndarray,
    idx: np.ndarray,
    eta: np.ndarray,
    lam: float,
    n_classes: int,
) -> tuple[np.ndarray, int]:
    """Minibatch SGD on softmax cross-entropy with L2 penalty.

    `w0` is the flattened (n_classes, d) weight matrix.  Returns
    (w_final, bad_step) as in `sgd_quadratic`.
    """
    d = X.shape[1]
    W = np.array(w0, dtype=np.float64, copy=True).reshape(n_classes, d)
    n_steps, batch = idx.shape
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(n_steps):
            rows = X[idx[s]]
            labels = y[idx[s]]
            scores = rows @ W.T
            scores -= scores.max(axis=1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=1, keepdims=True)
            probs[np.arange(batch), labels] -= 1.0
            grad = probs.T @ rows / batch + lam * W
            W -= eta[s] * grad
            if not np.all(np.isfinite(W)):
                return W.reshape(-1), s
    return W.reshape(-1), -1
