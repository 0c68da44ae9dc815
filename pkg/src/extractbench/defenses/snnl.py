"""Soft nearest-neighbour loss with its analytic gradient."""

import numpy as np
from scipy.special import logsumexp


def snnl_and_grad(h, labels, temperature):
    """Return (loss, dL/dh).

    loss = -mean_i log( sum_{j!=i, y_j=y_i} exp(-|h_i-h_j|^2/T)
                        / sum_{j!=i} exp(-|h_i-h_j|^2/T) )

    Points without a same-label partner are left out of the mean.
    """
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(labels)
    n = len(h)
    sq = (h * h).sum(axis=1)
    d = np.maximum(sq[:, None] + sq[None, :] - 2.0 * h @ h.T, 0.0)
    logits = -d / temperature
    np.fill_diagonal(logits, -np.inf)
    same = (y[:, None] == y[None, :])
    np.fill_diagonal(same, False)
    valid = same.any(axis=1)
    m = int(valid.sum())
    if m == 0:
        return 0.0, np.zeros_like(h)
    lse_all = logsumexp(logits, axis=1)
    logits_same = np.where(same, logits, -np.inf)
    lse_same = logsumexp(logits_same[valid], axis=1)
    loss = -(lse_same - lse_all[valid]).mean()

    q_all = np.exp(logits - lse_all[:, None])
    q_same = np.zeros_like(q_all)
    q_same[valid] = np.exp(logits_same[valid] - lse_same[:, None])
    # dloss/dd_ij for rows that count
    g = np.zeros((n, n))
    g[valid] = (q_same[valid] - q_all[valid]) / (m * temperature)
    s = g + g.T
    grad = 2.0 * (s.sum(axis=1)[:, None] * h - s @ h)
    return float(loss), grad


def snnl(h, labels, temperature=1.0):
    return snnl_and_grad(h, labels, temperature)[0]
