"""Numpy implementation of the classifier-head kernels.

This is the fallback backend used when the compiled extension
(``fedhorizon._ckernels``) is unavailable. Both backends implement the
same contract:

* ``predict_probs(w1, b1, w2, b2, x)`` -- batch forward pass
  (affine -> ReLU -> affine -> softmax), returns an (n, K) array of
  class probabilities.
* ``loss_and_grad(w1, b1, w2, b2, x, y, reg)`` -- fused objective and
  analytic gradient: mean cross-entropy over the batch plus
  ``reg * sum(theta_i^2)`` over every parameter. Labels ``y`` are
  0-based integers.

Softmax is computed with per-row max subtraction; the cross-entropy
probability is floored at 1e-12 before the log (numerical safety only,
the gradient uses the unfloored softmax identity p - onehot).
"""

import numpy as np

PROB_FLOOR = 1e-12


def predict_probs(w1, b1, w2, b2, x):
    """Class probabilities for a batch ``x`` of shape (n, input_dim)."""
    z1 = x @ w1 + b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ w2 + b2
    z2 = z2 - z2.max(axis=1, keepdims=True)
    e = np.exp(z2)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(w1, b1, w2, b2, x, y, reg):
    """Regularized empirical risk and its gradient on one batch.

    Returns ``(loss, gw1, gb1, gw2, gb2)`` where the gradient blocks
    mirror the parameter blocks. The regularizer contributes
    ``2 * reg * theta`` to every block.
    """
    n = x.shape[0]
    rows = np.arange(n)

    z1 = x @ w1 + b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ w2 + b2
    zs = z2 - z2.max(axis=1, keepdims=True)
    e = np.exp(zs)
    p = e / e.sum(axis=1, keepdims=True)

    data_loss = -np.log(np.maximum(p[rows, y], PROB_FLOOR)).sum() / n
    sq = (w1 * w1).sum() + (b1 * b1).sum() + (w2 * w2).sum() + (b2 * b2).sum()
    loss = data_loss + reg * sq

    dz2 = p.copy()
    dz2[rows, y] -= 1.0
    dz2 /= n
    gw2 = a1.T @ dz2 + 2.0 * reg * w2
    gb2 = dz2.sum(axis=0) + 2.0 * reg * b2
    da1 = dz2 @ w2.T
    dz1 = np.where(z1 > 0.0, da1, 0.0)
    gw1 = x.T @ dz1 + 2.0 * reg * w1
    gb1 = dz1.sum(axis=0) + 2.0 * reg * b1
    return float(loss), gw1, gb1, gw2, gb2
