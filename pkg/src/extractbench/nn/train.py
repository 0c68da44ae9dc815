"""Losses, Adam and the full-batch training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .model import Structure, backward, forward_cache, log_softmax

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    label_mode: str = "hard"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.label_mode not in ("hard", "soft"):
            raise ValueError("label_mode must be 'hard' or 'soft'")

    def as_dict(self):
        return asdict(self)


@dataclass
class LossTerm:
    """``weight * mean_{i in idx} loss(targets_i, softmax(logits_i))``.

    ``targets`` is an int label vector (hard mode) or a row-stochastic
    matrix (soft mode, KL(target || model)).
    """

    idx: np.ndarray
    targets: np.ndarray
    weight: float = 1.0
    mode: str = "hard"


def _as_index(mask, n):
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise ValueError("boolean mask length mismatch")
        return np.flatnonzero(mask)
    return mask.astype(np.int64).ravel()


def terms_loss(logits, terms):
    """Total loss and dL/dlogits for a list of LossTerm."""
    total = 0.0
    dlogits = np.zeros_like(logits)
    for t in terms:
        idx = np.asarray(t.idx, dtype=np.int64)
        if len(idx) == 0 or t.weight == 0:
            continue
        z = logits[idx]
        logp = log_softmax(z)
        p = np.exp(logp)
        if t.mode == "hard":
            y = np.asarray(t.targets, dtype=np.int64)
            loss = -logp[np.arange(len(idx)), y].mean()
            target = np.zeros_like(p)
            target[np.arange(len(idx)), y] = 1.0
        else:
            target = np.asarray(t.targets, dtype=np.float64)
            with np.errstate(divide="ignore", invalid="ignore"):
                tlogt = np.where(target > 0, target * np.log(np.where(target > 0, target, 1.0)), 0.0)
            loss = (tlogt.sum(axis=1) - (target * logp).sum(axis=1)).mean()
        total += t.weight * loss
        # rows of target sum to one, so d/dz of both losses is p - target
        np.add.at(dlogits, idx, t.weight * (p - target) / len(idx))
    return total, dlogits


def loss_and_grad(model, structure, x, targets, mask, label_mode="hard", rng=None, want_input=False):
    """Mean masked cross-entropy (hard) or KL (soft) and exact gradients.

    With ``rng`` given, dropout masks are drawn from it; otherwise the pass
    is deterministic. Returns ``(loss, grads)`` or ``(loss, grads, dx)``.
    """
    s = Structure.of(structure)
    idx = _as_index(mask, s.n)
    if len(idx) == 0:
        raise ValueError("empty mask")
    targets = np.asarray(targets)
    if label_mode == "hard":
        t = targets[idx] if targets.ndim == 1 and len(targets) == s.n else targets
    else:
        t = targets[idx] if targets.ndim == 2 and len(targets) == s.n else targets
    term = LossTerm(idx, t, 1.0, label_mode)
    masks = dropout_masks(model, x.shape, rng) if rng is not None else None
    logits, cache = forward_cache(model, s, x, masks)
    loss, dlogits = terms_loss(logits, [term])
    grads, dx = backward(model, s, cache, dlogits, want_input=want_input)
    return (loss, grads, dx) if want_input else (loss, grads)


def dropout_masks(model, x_shape, rng):
    p = model.dropout
    if p <= 0:
        return None
    keep = 1.0 - p
    m_in = (rng.random(x_shape) < keep) / keep
    m_hid = (rng.random((x_shape[0], model.hidden_dim)) < keep) / keep
    return m_in, m_hid


class Adam:
    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in params:
            g = grads[k] + self.wd * params[k] if self.wd else grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def fit(model, structure, x, terms, config, hidden_loss=None, epoch_hook=None, history=None):
    """Full-batch Adam on a sum of loss terms; returns a trained copy.

    ``hidden_loss(h) -> (loss, dL/dh)`` adds a regulariser on the
    first-layer embeddings. ``epoch_hook(epoch, model)`` runs after every
    update (used by alternating schemes). Per-epoch losses are appended to
    ``history`` when given.
    """
    s = Structure.of(structure)
    model = model.copy()
    if config.epochs == 0:
        return model
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.eps, config.weight_decay)
    for epoch in range(config.epochs):
        masks = dropout_masks(model, x.shape, rng)
        logits, cache = forward_cache(model, s, x, masks)
        loss, dlogits = terms_loss(logits, terms)
        dh = None
        if hidden_loss is not None and cache.get("h") is not None:
            extra, dh = hidden_loss(cache["h"])
            loss += extra
        if not np.isfinite(loss):
            raise TrainingDiverged(epoch, loss)
        if history is not None:
            history.append(float(loss))
        grads, _ = backward(model, s, cache, dlogits, dhidden=dh)
        opt.step(model.params, grads)
        if epoch_hook is not None:
            epoch_hook(epoch, model)
    return model


def train(model_init, structure, x, targets, mask, config, history=None):
    """Train on ``targets`` restricted to ``mask`` (hard labels or soft rows)."""
    s = Structure.of(structure)
    idx = _as_index(mask, s.n)
    if len(idx) == 0:
        raise ValueError("empty mask")
    targets = np.asarray(targets)
    if config.label_mode == "hard":
        t = targets[idx] if targets.ndim == 1 and len(targets) == s.n else targets
    else:
        t = targets[idx] if targets.ndim == 2 and len(targets) == s.n else targets
    return fit(model_init, s, x, [LossTerm(idx, t, 1.0, config.label_mode)], config, history=history)



def train_target(graph, train_idx, backbone="GCN", hidden_dim=16, seed=0, epochs=200, init_seed=None):
    """Undefended model trained on ground-truth labels of ``train_idx``."""
    from .model import init_model

    model = init_model(backbone, graph.feat_dim, graph.num_classes, hidden_dim,
                       seed=seed if init_seed is None else init_seed)
    return train(model, graph, graph.features, graph.labels, train_idx, TrainConfig(epochs=epochs, seed=seed))
