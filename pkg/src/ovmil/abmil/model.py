"""Attention-based MIL classifier with hand-derived gradients.

    u_i = relu(W1^T h_i + b1)           patch projection (dropout applied to u)
    s_i = w^T tanh(V^T u_i + bv)        attention score
    a   = softmax(s)                    over patches
    z   = sum_i a_i u_i                 slide embedding
    logits = W2^T z + b2
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..features import NUM_CLASSES

PARAM_NAMES = ("W1", "b1", "V", "bv", "w", "W2", "b2")
PROB_FLOOR = 1e-12


class AbmilError(ValueError):
    pass


class EmptyBagError(AbmilError):
    pass


class ShapeError(AbmilError):
    pass


class CacheError(AbmilError):
    pass


@dataclass(eq=False)
class AbmilParams:
    W1: np.ndarray
    b1: np.ndarray
    V: np.ndarray
    bv: np.ndarray
    w: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        dim, m1 = self.W1.shape
        m2 = self.V.shape[1]
        k = self.W2.shape[1]
        expected = {
            "b1": (m1,), "V": (m1, m2), "bv": (m2,), "w": (m2,), "W2": (m1, k), "b2": (k,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def shape(self):
        """(dim, M1, M2, K)"""
        return (self.W1.shape[0], self.W1.shape[1], self.V.shape[1], self.W2.shape[1])

    def arrays(self):
        return [getattr(self, n) for n in PARAM_NAMES]

    def items(self):
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    def copy(self):
        return AbmilParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self):
        return AbmilParams(*(np.zeros_like(a) for a in self.arrays()))

    def n_parameters(self):
        return sum(a.size for a in self.arrays())

    def allclose(self, other, **kw):
        return all(np.allclose(a, b, **kw) for a, b in zip(self.arrays(), other.arrays()))


def init_params(dim, model_size, n_classes=NUM_CLASSES, rng=None):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(rng)
    m1, m2 = model_size

    def glorot(fan_in, fan_out, shape):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    return AbmilParams(
        W1=glorot(dim, m1, (dim, m1)),
        b1=np.zeros(m1),
        V=glorot(m1, m2, (m1, m2)),
        bv=np.zeros(m2),
        w=glorot(m2, 1, (m2,)),
        W2=glorot(m1, n_classes, (m1, n_classes)),
        b2=np.zeros(n_classes),
    )


@dataclass
class ForwardCache:
    params: AbmilParams
    version: int
    index: np.ndarray       # rows of the bag that were used
    h: np.ndarray
    pre: np.ndarray
    keep: np.ndarray | None  # dropout multiplier (0 or 1/(1-p)), None when off
    u: np.ndarray
    t: np.ndarray
    attention: np.ndarray
    z: np.ndarray
    logits: np.ndarray


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def predict_proba(logits):
    return softmax(logits)


def forward(features, params, training=False, rng=None, dropout_p=0.0, max_patches=None):
    """Returns (logits, attention, cache).

    In training mode the bag is subsampled to ``max_patches`` rows and dropout
    is applied to the projected features; ``rng`` may be a seed or Generator.
    Attention covers the rows listed in ``cache.index``.
    """
    h = np.asarray(features)
    if h.ndim != 2:
        raise ShapeError(f"bag must be 2-D, got shape {h.shape}")
    n = h.shape[0]
    if n == 0:
        raise EmptyBagError("bag has no patches")
    if h.shape[1] != params.W1.shape[0]:
        raise ShapeError(f"bag dim {h.shape[1]} != model dim {params.W1.shape[0]}")

    index = np.arange(n)
    keep = None
    if training:
        rng = np.random.default_rng(rng)
        if max_patches is not None and max_patches < n:
            index = np.sort(rng.choice(n, size=max_patches, replace=False))
            h = h[index]
    h = np.asarray(h, dtype=np.float64)

    pre = h @ params.W1 + params.b1
    u = np.maximum(pre, 0.0)
    if training and dropout_p > 0:
        keep = (rng.random(u.shape) >= dropout_p) / (1.0 - dropout_p)
        u = u * keep
    t = np.tanh(u @ params.V + params.bv)
    scores = t @ params.w
    a = softmax(scores)
    z = a @ u
    logits = z @ params.W2 + params.b2
    cache = ForwardCache(params, params.version, index, h, pre, keep, u, t, a, z, logits)
    return logits, a, cache


def class_weights(counts):
    """Balanced weights N_total / (K * N_c)."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise AbmilError("every class needs at least one training slide")
    return counts.sum() / (len(counts) * counts)


def balanced_ce_loss(probs, label, weights, floor=PROB_FLOOR):
    return -float(weights[label]) * float(np.log(max(float(probs[label]), floor)))


def backward(cache, label, weights):
    """Gradient of the weighted cross-entropy of ``cache.logits`` w.r.t. all parameters.

    The gradient is that of the log-softmax form, so it stays informative even
    where the reported loss is floored.
    """
    params = cache.params
    if cache.version != params.version:
        raise CacheError("parameters were updated after this forward pass")
    if cache.h.shape[1] != params.W1.shape[0] or cache.logits.shape != params.b2.shape:
        raise CacheError("cache does not match parameter shapes")

    p = softmax(cache.logits)
    g_logits = p.copy()
    g_logits[label] -= 1.0
    g_logits *= float(weights[label])

    d_W2 = np.outer(cache.z, g_logits)
    d_b2 = g_logits
    d_z = params.W2 @ g_logits

    a, u, t = cache.attention, cache.u, cache.t
    d_u = np.outer(a, d_z)
    d_a = u @ d_z
    d_s = a * (d_a - a @ d_a)

    d_w = t.T @ d_s
    d_q = np.outer(d_s, params.w) * (1.0 - t * t)
    d_V = u.T @ d_q
    d_bv = d_q.sum(axis=0)
    d_u += d_q @ params.V.T

    if cache.keep is not None:
        d_u = d_u * cache.keep
    d_pre = d_u * (cache.pre > 0)
    d_W1 = cache.h.T @ d_pre
    d_b1 = d_pre.sum(axis=0)
    return AbmilParams(d_W1, d_b1, d_V, d_bv, d_w, d_W2, d_b2)


def loss_and_grad(features, label, params, weights, **forward_kw):
    logits, _, cache = forward(features, params, **forward_kw)
    loss = balanced_ce_loss(predict_proba(logits), label, weights)
    return loss, backward(cache, label, weights)
