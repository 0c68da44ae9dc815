"""Inference-time defenses: transforms applied to each batch of responses.

Every transform has the signature ``transform(probs, features, ctx)`` where
``ctx`` exposes ``rng`` (seeded noise stream), ``state`` (per-oracle dict)
and ``graph`` (the deployed graph). Transforms return new row-stochastic
arrays and never modify their input.
"""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np
from scipy.spatial.distance import cdist

from .spec import INFERENCE_KINDS, DefenseSpec


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def quantize(probs, bits):
    """Round each probability to the nearest of 2**bits uniform levels in
    [0, 1], then renormalise. A row that rounds to all zeros keeps its argmax."""
    levels = 2 ** int(bits) - 1
    q = np.round(probs * levels) / levels
    dead = q.sum(axis=1) == 0
    if np.any(dead):
        q[dead, np.argmax(probs[dead], axis=1)] = 1.0
    return q / q.sum(axis=1, keepdims=True)


class OutputPerturbation:
    def __init__(self, sigma):
        self.sigma = float(sigma)

    def __call__(self, probs, features, ctx):
        if self.sigma == 0 or len(probs) == 0:
            return probs.copy()
        noise = ctx.rng.standard_normal(probs.shape)
        with np.errstate(divide="ignore"):
            logits = np.log(probs)
        # softmax(log p + n) == softmax(z + n) for p = softmax(z)
        return _softmax(logits + self.sigma * noise)


class PredictionRounding:
    def __init__(self, bits):
        self.bits = int(bits)

    def __call__(self, probs, features, ctx):
        return quantize(probs, self.bits) if len(probs) else probs.copy()


class TopOne:
    def __call__(self, probs, features, ctx):
        out = np.zeros_like(probs)
        if len(probs):
            out[np.arange(len(probs)), np.argmax(probs, axis=1)] = 1.0
        return out


class Prada:
    """Distance-based query-stream detector.

    Each incoming feature vector's distance to its nearest earlier query is
    compared with the 10th percentile of nearest-neighbour distances among
    the deployed graph's own rows. Once more than ``threshold`` of the last
    ``window`` queries fall below that percentile, every later answer is
    uniform.
    """

    def __init__(self, window=100, percentile=10.0, threshold=0.5, min_queries=20):
        self.window = int(window)
        self.percentile = float(percentile)
        self.threshold = float(threshold)
        self.min_queries = int(min_queries)

    def _reference(self, ctx):
        ref = ctx.state.get("prada_ref")
        if ref is None:
            feats = ctx.graph.features
            d = cdist(feats, feats)
            np.fill_diagonal(d, np.inf)
            ref = float(np.percentile(d.min(axis=1), self.percentile))
            ctx.state["prada_ref"] = ref
        return ref

    def __call__(self, probs, features, ctx):
        out = probs.copy()
        st = ctx.state
        seen = st.setdefault("prada_seen", [])
        recent = st.setdefault("prada_recent", [])
        ref = self._reference(ctx)
        hist = np.array(seen) if seen else np.zeros((0, features.shape[1]))
        for i, f in enumerate(features):
            if st.get("prada_flagged"):
                out[i:] = 1.0 / probs.shape[1]
                break
            if len(hist):
                recent.append(float(np.sqrt(((hist - f) ** 2).sum(axis=1)).min()))
                del recent[:-self.window]
            hist = np.vstack([hist, f[None]])
            seen.append(f.copy())
            if len(recent) >= self.min_queries:
                stat = np.mean(np.array(recent) < ref)
                st["prada_stat"] = float(stat)
                if stat > self.threshold:
                    st["prada_flagged"] = True
                    st["prada_flagged_at"] = len(seen)
        return out


class AdaptiveMisinformation:
    """Low-confidence queries get rank-reversed probabilities."""

    def __init__(self, confidence_threshold=0.6):
        self.tau = float(confidence_threshold)

    def __call__(self, probs, features, ctx):
        out = probs.copy()
        low = probs.max(axis=1) < self.tau
        for i in np.flatnonzero(low):
            p = probs[i]
            order = np.argsort(p, kind="stable")
            rev = np.empty_like(p)
            rev[order] = p[order[::-1]]
            out[i] = rev / rev.sum()
        return out


class GradientRedirection:
    """Shift mass from the runner-up class to the least likely class,
    capped so the argmax never changes."""

    def __init__(self, redirect_strength=0.5):
        self.strength = float(redirect_strength)

    def __call__(self, probs, features, ctx):
        out = probs.copy()
        c = probs.shape[1]
        if c < 3 or len(probs) == 0:
            return out
        top = np.argmax(probs, axis=1)
        rows = np.arange(len(probs))
        masked = probs.copy()
        masked[rows, top] = -np.inf
        second = np.argmax(masked, axis=1)
        masked[rows, second] = np.inf
        least = np.argmin(masked, axis=1)
        p1, p2, pl = probs[rows, top], probs[rows, second], probs[rows, least]
        amt = np.minimum(self.strength * p2, 0.5 * (p1 - pl))
        amt = np.maximum(amt, 0.0)
        out[rows, second] -= amt
        out[rows, least] += amt
        out /= out.sum(axis=1, keepdims=True)
        bad = np.argmax(out, axis=1) != top
        out[bad] = probs[bad]
        return out


def build_transform(spec):
    if callable(spec) and not isinstance(spec, (DefenseSpec, str, dict)):
        return spec
    if isinstance(spec, str):
        spec = DefenseSpec(spec)
    elif isinstance(spec, dict):
        spec = DefenseSpec(spec["kind"], spec.get("params", {}))
    if spec.kind not in INFERENCE_KINDS:
        raise ValueError(f"{spec.kind} is not an inference-time defense")
    p = spec.params
    if spec.kind in ("OP_low", "OP_high"):
        return OutputPerturbation(p["sigma"])
    if spec.kind == "PR_2bit":
        return PredictionRounding(p["bits"])
    if spec.kind == "PR_top1":
        return TopOne()
    if spec.kind == "PRADA":
        return Prada(p["window"], p["percentile"], p["threshold"], p["min_queries"])
    if spec.kind == "AdaptMisinfo":
        return AdaptiveMisinformation(p["confidence_threshold"])
    return GradientRedirection(p["redirect_strength"])


def wrap_inference(spec, probs, features=None, ctx=None, seed=0):
    """Apply one inference-time defense to a batch of probability rows."""
    probs = np.asarray(probs, dtype=np.float64)
    if features is None:
        features = np.zeros((len(probs), 1))
    if ctx is None:
        ctx = SimpleNamespace(rng=np.random.default_rng(seed), state={}, graph=None)
    return build_transform(spec)(probs, features, ctx)
