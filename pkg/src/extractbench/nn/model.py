"""Two-layer GCN / GraphSAGE / GAT backbones with hand-written backward passes.

All arrays are float64. ``forward`` is inference (no dropout); training code
uses ``forward_cache`` + ``backward`` which also expose the hidden layer so
that regularisers on embeddings can inject their own gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from ..graph import Graph, RegimeView, edges_to_adjacency, normalized_adjacency

BACKBONES = ("GCN", "SAGE", "GAT", "SGC")
LEAKY_SLOPE = 0.2


class Structure:
    """Propagation operators for one edge set, built lazily and cached."""

    def __init__(self, edges, n):
        self.n = int(n)
        self.edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)

    @classmethod
    def of(cls, obj):
        if isinstance(obj, Structure):
            return obj
        if isinstance(obj, Graph):
            return cls(obj.edges, obj.num_nodes)
        if isinstance(obj, RegimeView):
            return cls(obj.visible_edges, obj.num_nodes)
        raise TypeError(f"cannot build Structure from {type(obj).__name__}")

    @cached_property
    def adjacency(self):
        return edges_to_adjacency(self.edges, self.n)

    @cached_property
    def a_hat(self):
        return normalized_adjacency(self.edges, self.n)

    @cached_property
    def mean_adj(self):
        a = self.adjacency
        deg = np.asarray(a.sum(axis=1)).ravel()
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        m = (sp.diags(inv) @ a).tocsr()
        m.sort_indices()
        return m

    @cached_property
    def mean_adj_t(self):
        return self.mean_adj.T.tocsr()

    @cached_property
    def closed(self):
        """CSR pattern of A + I; row = receiving node, col = sender."""
        a = (self.adjacency + sp.identity(self.n, format="csr")).tocsr()
        a.sort_indices()
        rows = np.repeat(np.arange(self.n), np.diff(a.indptr))
        return a.indptr.copy(), rows, a.indices.copy()

    @cached_property
    def degree(self):
        return np.asarray(self.adjacency.sum(axis=1)).ravel()


@dataclass
class GnnModel:
    backbone: str
    feat_dim: int
    hidden_dim: int
    num_classes: int
    params: dict = field(default_factory=dict)
    dropout: float = 0.5
    seed: int | None = None

    def copy(self):
        return GnnModel(self.backbone, self.feat_dim, self.hidden_dim, self.num_classes,
                        {k: v.copy() for k, v in self.params.items()}, self.dropout, self.seed)

    def param_names(self):
        return list(self.params)

    def check(self):
        for name, shape in param_shapes(self.backbone, self.feat_dim, self.hidden_dim, self.num_classes):
            w = self.params[name]
            if w.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"{name}: non-finite entries")


def param_shapes(backbone, d, h, c):
    if backbone == "GCN":
        return [("W0", (d, h)), ("W1", (h, c))]
    if backbone == "SAGE":
        return [("W0_self", (d, h)), ("W0_neigh", (d, h)), ("W1_self", (h, c)), ("W1_neigh", (h, c))]
    if backbone == "GAT":
        return [("W0", (d, h)), ("a_src0", (h,)), ("a_dst0", (h,)),
                ("W1", (h, c)), ("a_src1", (c,)), ("a_dst1", (c,))]
    if backbone == "SGC":
        return [("W0", (d, c))]
    raise ValueError(f"unknown backbone {backbone!r}")


def init_model(backbone, feat_dim, num_classes, hidden_dim=16, seed=0, dropout=0.5, rng=None):
    """Glorot-uniform initialisation from a seeded stream."""
    rng = np.random.default_rng(seed) if rng is None else rng
    params = {}
    for name, shape in param_shapes(backbone, feat_dim, hidden_dim, num_classes):
        fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], 1)
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=shape)
    return GnnModel(backbone, feat_dim, hidden_dim, num_classes, params, dropout, seed)


# ---------------------------------------------------------------- layers

def _gat_layer(s, x, w, a_src, a_dst):
    indptr, rows, cols = s.closed
    z = x @ w
    f_src = z @ a_src
    f_dst = z @ a_dst
    pre = f_dst[rows] + f_src[cols]
    e = np.where(pre > 0, pre, LEAKY_SLOPE * pre)
    starts = indptr[:-1]
    e = e - np.maximum.reduceat(e, starts)[rows]
    ex = np.exp(e)
    alpha = ex / np.add.reduceat(ex, starts)[rows]
    p = sp.csr_matrix((alpha, cols, indptr), shape=(s.n, s.n))
    return p @ z, (x, z, pre, alpha, p)


def _gat_layer_back(s, cache, dout, w, a_src, a_dst):
    indptr, rows, cols = s.closed
    x, z, pre, alpha, p = cache
    dz = p.T @ dout
    dalpha = np.einsum("kh,kh->k", dout[rows], z[cols])
    weighted = np.add.reduceat(alpha * dalpha, indptr[:-1])
    de = alpha * (dalpha - weighted[rows])
    dpre = de * np.where(pre > 0, 1.0, LEAKY_SLOPE)
    df_dst = np.bincount(rows, weights=dpre, minlength=s.n)
    df_src = np.bincount(cols, weights=dpre, minlength=s.n)
    da_dst = z.T @ df_dst
    da_src = z.T @ df_src
    dz = dz + np.outer(df_dst, a_dst) + np.outer(df_src, a_src)
    return x.T @ dz, da_src, da_dst, dz @ w.T


def forward_cache(model, structure, x, masks=None):
    """Forward pass keeping everything ``backward`` needs.

    ``masks`` is ``(input_mask, hidden_mask)`` of pre-scaled dropout
    multipliers, or None for inference.
    """
    s = Structure.of(structure)
    p = model.params
    m_in, m_hid = masks if masks is not None else (None, None)
    xd = x * m_in if m_in is not None else x
    cache = {"x": x, "xd": xd, "m_in": m_in, "m_hid": m_hid}
    b = model.backbone
    if b == "SGC":
        cache["u"] = xd @ p["W0"]
        logits = s.a_hat @ cache["u"]
        cache["h"] = None
        return logits, cache
    if b == "GCN":
        pre1 = s.a_hat @ (xd @ p["W0"])
    elif b == "SAGE":
        cache["mx"] = s.mean_adj @ xd
        pre1 = xd @ p["W0_self"] + cache["mx"] @ p["W0_neigh"]
    elif b == "GAT":
        pre1, cache["gat0"] = _gat_layer(s, xd, p["W0"], p["a_src0"], p["a_dst0"])
    else:
        raise ValueError(f"unknown backbone {b!r}")
    h = np.maximum(pre1, 0.0)
    hd = h * m_hid if m_hid is not None else h
    cache.update(pre1=pre1, h=h, hd=hd)
    if b == "GCN":
        logits = s.a_hat @ (hd @ p["W1"])
    elif b == "SAGE":
        cache["mh"] = s.mean_adj @ hd
        logits = hd @ p["W1_self"] + cache["mh"] @ p["W1_neigh"]
    else:
        logits, cache["gat1"] = _gat_layer(s, hd, p["W1"], p["a_src1"], p["a_dst1"])
    return logits, cache


def backward(model, structure, cache, dlogits, dhidden=None, want_input=False):
    """Gradients of a scalar loss given dL/dlogits (and optionally dL/dhidden).

    Returns ``(grads, dx)``; ``dx`` is None unless ``want_input``.
    """
    s = Structure.of(structure)
    p = model.params
    b = model.backbone
    g = {}
    if b == "SGC":
        du = s.a_hat.T @ dlogits
        g["W0"] = cache["xd"].T @ du
        dxd = du @ p["W0"].T if want_input else None
    else:
        hd = cache["hd"]
        if b == "GCN":
            du = s.a_hat.T @ dlogits
            g["W1"] = hd.T @ du
            dhd = du @ p["W1"].T
        elif b == "SAGE":
            g["W1_self"] = hd.T @ dlogits
            g["W1_neigh"] = cache["mh"].T @ dlogits
            dhd = dlogits @ p["W1_self"].T + s.mean_adj_t @ (dlogits @ p["W1_neigh"].T)
        else:
            g["W1"], g["a_src1"], g["a_dst1"], dhd = _gat_layer_back(
                s, cache["gat1"], dlogits, p["W1"], p["a_src1"], p["a_dst1"])
        dh = dhd * cache["m_hid"] if cache["m_hid"] is not None else dhd
        if dhidden is not None:
            dh = dh + dhidden
        dpre = dh * (cache["pre1"] > 0)
        xd = cache["xd"]
        if b == "GCN":
            dv = s.a_hat.T @ dpre
            g["W0"] = xd.T @ dv
            dxd = dv @ p["W0"].T if want_input else None
        elif b == "SAGE":
            g["W0_self"] = xd.T @ dpre
            g["W0_neigh"] = cache["mx"].T @ dpre
            dxd = (dpre @ p["W0_self"].T + s.mean_adj_t @ (dpre @ p["W0_neigh"].T)) if want_input else None
        else:
            g["W0"], g["a_src0"], g["a_dst0"], dxd = _gat_layer_back(
                s, cache["gat0"], dpre, p["W0"], p["a_src0"], p["a_dst0"])
            if not want_input:
                dxd = None
    grads = {k: g[k] for k in p}
    dx = None
    if want_input:
        dx = dxd * cache["m_in"] if cache["m_in"] is not None else dxd
    return grads, dx


def forward(model, structure, x):
    """Inference logits (dropout disabled)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != model.feat_dim:
        raise ValueError(f"feature dim {x.shape[1]} != model feat_dim {model.feat_dim}")
    s = Structure.of(structure)
    if x.shape[0] != s.n:
        raise ValueError(f"{x.shape[0]} feature rows for a {s.n}-node structure")
    return forward_cache(model, s, x)[0]


def hidden_embeddings(model, structure, x):
    return forward_cache(model, structure, np.asarray(x, dtype=np.float64))[1]["h"]


# ---------------------------------------------------------------- outputs

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass(frozen=True, eq=False)
class Predictions:
    probs: np.ndarray

    @property
    def hard(self):
        # np.argmax breaks ties toward the lowest index
        return np.argmax(self.probs, axis=1)


def predict(model, structure, x):
    return Predictions(softmax(forward(model, structure, x)))
