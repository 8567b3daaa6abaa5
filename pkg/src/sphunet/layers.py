"""Spherical CNN layers built on :mod:`sphunet.autodiff`.

Feature maps are ``Value`` arrays shaped ``(N, C)`` or ``(B, N, C)`` where
``N`` is the vertex count of one icosphere level. Functional forms take
explicit weights; the ``Module`` classes own their parameters and are what
the models are assembled from.
"""

from __future__ import annotations

import weakref

import numpy as np

from . import autodiff as ad
from .autodiff import IndexTable, Parameter, Value
from .icosphere import vertex_count
from .neighborhood import NeighborTable, RePaSampler

__all__ = [
    "FeatureMap",
    "Module",
    "DiNeConv",
    "RePaConv",
    "TransposedConv",
    "VertexwiseLinear",
    "BatchNorm",
    "Pool",
    "MaxUnpool",
    "InterpUpsample",
    "dine_conv",
    "repa_conv",
    "pool",
    "transposed_conv",
    "strided_dine_conv",
    "max_unpool",
    "interp_upsample",
    "vertexwise_linear",
    "batch_norm",
    "cross_entropy",
    "l1_loss",
    "coarse_count",
    "glorot_uniform",
]


class FeatureMap:
    """Per-vertex features of one level; ``values`` is ``(N, C)``."""

    def __init__(self, level: int, values: np.ndarray):
        values = np.asarray(values)
        if values.ndim != 2 or values.shape[0] != vertex_count(level):
            raise ValueError(f"level {level} needs {vertex_count(level)} rows, got {values.shape}")
        self.level = level
        self.values = values

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def coarse_count(n: int) -> int:
    """Vertex count after one pooling step, ``(N + 6) / 4``."""
    if n <= 12 or (n + 6) % 4:
        raise ValueError(f"cannot pool a mesh with {n} vertices")
    return (n + 6) // 4


# ---------------------------------------------------------------------------
# cached index tables

_cache: "weakref.WeakKeyDictionary[object, dict]" = weakref.WeakKeyDictionary()


def _cached(owner, key, build):
    slot = _cache.setdefault(owner, {})
    if key not in slot:
        slot[key] = build()
    return slot[key]


def conv_index(table: NeighborTable) -> IndexTable:
    return _cached(table, "conv", lambda: IndexTable(table.slots, table.n_vertices))


def strided_index(table: NeighborTable) -> IndexTable:
    """Slots of the vertices that survive pooling (the first ``N'`` rows)."""
    n = table.n_vertices

    def build():
        return IndexTable(table.slots[: coarse_count(n)], n)

    return _cached(table, "strided", build)


def repa_index(sampler: RePaSampler) -> IndexTable:
    return _cached(sampler, "repa", lambda: IndexTable(sampler.anchors, sampler.n_vertices, sampler.weights))


def interp_index(parents: np.ndarray, n_coarse: int) -> IndexTable:
    parents = np.asarray(parents, dtype=np.int64)
    n = n_coarse + len(parents)
    idx = np.zeros((n, 1, 2), dtype=np.int64)
    w = np.zeros((n, 1, 2))
    idx[:n_coarse, 0, 0] = np.arange(n_coarse)
    w[:n_coarse, 0, 0] = 1.0
    idx[n_coarse:, 0, :] = parents
    w[n_coarse:, 0, :] = 0.5
    return IndexTable(idx, n_coarse, w)


def _check_rows(x: Value, n: int, what: str):
    if x.shape[-2] != n:
        raise ValueError(f"{what}: expected {n} vertices, got {x.shape[-2]}")


# ---------------------------------------------------------------------------
# functional layers


def dine_conv(x, weight, bias, table: NeighborTable) -> Value:
    """``O = gather(x, slots) @ W + b`` with ``W`` shaped ``(7 D, F)``."""
    x = ad._as_value(x)
    _check_rows(x, table.n_vertices, "dine_conv")
    if weight.shape[0] != 7 * x.shape[-1]:
        raise ValueError(f"dine_conv weight has {weight.shape[0]} rows, expected 7*{x.shape[-1]}")
    out = ad.matmul(ad.gather_rows(x, conv_index(table)), weight)
    return out if bias is None else ad.add_bias(out, bias)


def strided_dine_conv(x, weight, bias, fine_table: NeighborTable) -> Value:
    """DiNe convolution evaluated only at the coarse centers (adjoint of :func:`transposed_conv`)."""
    x = ad._as_value(x)
    if fine_table.level < 1:
        raise ValueError("strided_dine_conv needs a fine table of level >= 1")
    _check_rows(x, fine_table.n_vertices, "strided_dine_conv")
    if weight.shape[0] != 7 * x.shape[-1]:
        raise ValueError("strided_dine_conv weight rows must be 7*D")
    out = ad.matmul(ad.gather_rows(x, strided_index(fine_table)), weight)
    return out if bias is None else ad.add_bias(out, bias)


def repa_conv(x, sampler: RePaSampler, weight, bias) -> Value:
    x = ad._as_value(x)
    _check_rows(x, sampler.n_vertices, "repa_conv")
    if weight.shape[0] != sampler.n_points * x.shape[-1]:
        raise ValueError(f"repa_conv weight rows must be {sampler.n_points}*D")
    out = ad.matmul(ad.weighted_gather(x, repa_index(sampler)), weight)
    return out if bias is None else ad.add_bias(out, bias)


def pool(x, table: NeighborTable, mode: str = "mean"):
    """Mean or max over the 7 slots of every surviving vertex.

    Returns ``(pooled, indices)``; ``indices`` holds the winning slot per
    (vertex, channel) in max mode and is ``None`` for mean pooling.
    """
    x = ad._as_value(x)
    if table.level < 1:
        raise ValueError("cannot pool a level-0 feature map")
    _check_rows(x, table.n_vertices, "pool")
    if mode not in ("mean", "max"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    c = x.shape[-1]
    n_coarse = coarse_count(table.n_vertices)
    g = ad.reshape(ad.gather_rows(x, strided_index(table)), x.shape[:-2] + (n_coarse, 7, c))
    if mode == "mean":
        return ad.mean(g, axis=-2), None
    return ad.max_axis(g, axis=-2)


def transposed_conv(y, weight, fine_table: NeighborTable) -> Value:
    """Restore a fine map: every coarse vertex writes ``y[v] @ W_j^T`` to its slot ``j``; overlaps sum."""
    y = ad._as_value(y)
    n = fine_table.n_vertices
    _check_rows(y, coarse_count(n), "transposed_conv")
    if weight.shape[1] != y.shape[-1] or weight.shape[0] % 7:
        raise ValueError(f"transposed_conv weight shape {weight.shape} incompatible with {y.shape[-1]} channels")
    rows = ad.matmul(y, ad.transpose(weight))
    return ad.scatter_add_rows(rows, strided_index(fine_table), n)


def max_unpool(y, indices: np.ndarray, fine_table: NeighborTable) -> Value:
    """Place each coarse value at the fine slot that won the max pool; all else zero."""
    y = ad._as_value(y)
    n = fine_table.n_vertices
    n_coarse = coarse_count(n)
    _check_rows(y, n_coarse, "max_unpool")
    indices = np.asarray(indices)
    if indices.shape != y.shape:
        raise ValueError(f"pooling indices {indices.shape} do not match features {y.shape}")
    target = fine_table.slots[np.arange(n_coarse)[:, None], indices]
    return ad.scatter_add_elements(y, target, n)


def interp_upsample(y, parents: np.ndarray, table: IndexTable | None = None) -> Value:
    """Copy coarse rows; each new vertex gets the mean of its two edge parents."""
    y = ad._as_value(y)
    n_coarse = y.shape[-2]
    parents = np.asarray(parents)
    if coarse_count(n_coarse + len(parents)) != n_coarse or (parents.size and parents.max() >= n_coarse):
        raise ValueError("edge-parent table does not match the coarse feature map")
    table = table or interp_index(parents, n_coarse)
    return ad.weighted_gather(y, table)


def vertexwise_linear(x, weight, bias) -> Value:
    x = ad._as_value(x)
    if weight.shape[0] != x.shape[-1]:
        raise ValueError(f"vertexwise weight has {weight.shape[0]} rows, input has {x.shape[-1]} channels")
    out = ad.matmul(x, weight)
    return out if bias is None else ad.add_bias(out, bias)


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool, momentum=0.1, eps=1e-5) -> Value:
    """Per-channel normalization over all vertices (and batch).

    In training mode batch statistics are used and the running arrays are
    updated in place; in eval mode the running statistics are used.
    """
    x, gamma, beta = ad._as_value(x), ad._as_value(gamma), ad._as_value(beta)
    c = x.shape[-1]
    flat = x.data.reshape(-1, c)
    n = flat.shape[0]
    if training:
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def fn(g):
        g2 = g.reshape(-1, c)
        xh = xhat.reshape(-1, c)
        dgamma = (g2 * xh).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxh = g2 * gamma.data
        if training:
            dx = inv / n * (n * dxh - dxh.sum(axis=0) - xh * (dxh * xh).sum(axis=0))
        else:
            dx = dxh * inv
        return dx.reshape(x.shape), dgamma, dbeta

    return ad._make(out, (x, gamma, beta), fn, "batch_norm")


def cross_entropy(logits, labels: np.ndarray) -> Value:
    """Mean over vertices (and batch) of ``-log softmax(logits)[label]``."""
    logits = ad._as_value(logits)
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data.reshape(-1, k)
    lab = labels.reshape(-1)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    m = len(lab)
    loss = -logp[np.arange(m), lab].mean()

    def fn(g):
        p = np.exp(logp)
        p[np.arange(m), lab] -= 1.0
        return ((g / m) * p).astype(logits.dtype).reshape(logits.shape),

    return ad._make(np.asarray(loss, dtype=logits.dtype), (logits,), fn, "cross_entropy")


def l1_loss(pred, target: np.ndarray) -> Value:
    pred = ad._as_value(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"target {target.shape} does not match prediction {pred.shape}")
    diff = pred.data - target
    m = diff.size

    def fn(g):
        return ((g / m) * np.sign(diff)).astype(pred.dtype),

    return ad._make(np.asarray(np.abs(diff).mean(), dtype=pred.dtype), (pred,), fn, "l1")


# ---------------------------------------------------------------------------
# modules


def glorot_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape).astype(ad.get_default_dtype())


class Module:
    """Minimal parameter container with train/eval switching."""

    training = True
    kind = "module"

    def children(self):
        """Direct sub-modules as ``(name, module)``; lists may nest."""

        def expand(name, val):
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    yield from expand(f"{name}.{i}", item)

        for name, val in vars(self).items():
            yield from expand(name, val)

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)


class DiNeConv(Module):
    kind = "dine_conv"

    def __init__(self, in_ch: int, out_ch: int, table: NeighborTable, rng: np.random.Generator):
        self.table = table
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = Parameter(glorot_uniform(rng, (7 * in_ch, out_ch)))
        self.bias = Parameter(np.zeros(out_ch, dtype=ad.get_default_dtype()))

    def __call__(self, x):
        return dine_conv(x, self.weight, self.bias, self.table)


class RePaConv(Module):
    kind = "repa_conv"

    def __init__(self, in_ch: int, out_ch: int, sampler: RePaSampler, rng: np.random.Generator):
        self.sampler = sampler
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = Parameter(glorot_uniform(rng, (sampler.n_points * in_ch, out_ch)))
        self.bias = Parameter(np.zeros(out_ch, dtype=ad.get_default_dtype()))

    def __call__(self, x):
        return repa_conv(x, self.sampler, self.weight, self.bias)


class TransposedConv(Module):
    """Coarse ``in_ch`` channels to fine ``out_ch`` channels; weight ``(7 out_ch, in_ch)``, no bias."""

    kind = "transposed_conv"

    def __init__(self, in_ch: int, out_ch: int, fine_table: NeighborTable, rng: np.random.Generator):
        self.table = fine_table
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = Parameter(glorot_uniform(rng, (7 * out_ch, in_ch)))

    def __call__(self, y):
        return transposed_conv(y, self.weight, self.table)


class VertexwiseLinear(Module):
    kind = "vertexwise"

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = Parameter(glorot_uniform(rng, (in_ch, out_ch)))
        self.bias = Parameter(np.zeros(out_ch, dtype=ad.get_default_dtype()))

    def __call__(self, x):
        return vertexwise_linear(x, self.weight, self.bias)


class BatchNorm(Module):
    kind = "batch_norm"
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        dt = ad.get_default_dtype()
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=dt))
        self.beta = Parameter(np.zeros(channels, dtype=dt))
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)

    def __call__(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps)


class Pool(Module):
    kind = "pool"

    def __init__(self, table: NeighborTable, mode: str = "mean"):
        if mode not in ("mean", "max"):
            raise ValueError(f"unknown pooling mode {mode!r}")
        self.table, self.mode = table, mode

    def __call__(self, x):
        return pool(x, self.table, self.mode)


class MaxUnpool(Module):
    kind = "max_unpool"

    def __init__(self, fine_table: NeighborTable):
        self.table = fine_table

    def __call__(self, y, indices):
        return max_unpool(y, indices, self.table)


class InterpUpsample(Module):
    kind = "interp_upsample"

    def __init__(self, parents: np.ndarray):
        self.parents = np.asarray(parents)
        # N - N' new vertices with N' = (N + 6) / 4 gives N' = (n_new + 6) / 3.
        self.n_coarse = (len(self.parents) + 6) // 3
        self._index = interp_index(self.parents, self.n_coarse)

    def __call__(self, y):
        return interp_upsample(y, self.parents, self._index)
