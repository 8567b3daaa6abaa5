"""Small dense reverse-mode autodiff engine on numpy arrays.

Arrays keep a leading batch axis optional: row-wise primitives treat axis
``-2`` as the vertex axis and axis ``-1`` as channels. Only the primitives
needed by the spherical layers are provided.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Value",
    "Parameter",
    "IndexTable",
    "precision",
    "get_default_dtype",
    "no_grad",
    "backward",
    "zero_grad",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "relu",
    "concat",
    "slice_rows",
    "reshape",
    "sum",
    "mean",
    "max_axis",
    "gather_rows",
    "weighted_gather",
    "scatter_add_rows",
    "gather_elements",
    "scatter_add_elements",
    "gradcheck",
    "GradcheckReport",
    "save_arrays",
    "load_arrays",
    "CheckpointError",
]

_state = {"dtype": np.dtype(np.float32), "grad": True}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new parameters and coerced inputs."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextmanager
def no_grad():
    """Disable graph recording (inference, benchmarks, finite differences)."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


class Value:
    """A numpy array plus the record needed to backpropagate through it."""

    __array_priority__ = 100

    def __init__(self, data, parents=(), backward_fn=None, op="", requires_grad=None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(_state["dtype"])
        self.data = data
        self.grad = None
        self.op = op
        if requires_grad is None:
            requires_grad = _state["grad"] and any(p.requires_grad for p in parents)
        self.requires_grad = bool(requires_grad)
        if self.requires_grad and parents:
            self._parents = tuple(parents)
            self._backward = backward_fn
        else:
            self._parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Value(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


class Parameter(Value):
    """A learnable leaf with a name and per-parameter optimizer state."""

    def __init__(self, data, name: str = ""):
        data = np.array(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(_state["dtype"])
        super().__init__(data, requires_grad=True)
        self.name = name
        self.state: dict[str, np.ndarray | int] = {}

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_value(x) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=_state["dtype"]), requires_grad=False)


def _make(data, parents, fn, op):
    return Value(data, parents, fn, op)


# ---------------------------------------------------------------------------
# graph traversal


def _topological(root: Value) -> list[Value]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Value) -> None:
    """Populate ``.grad`` on every reachable leaf with ``d loss / d leaf``.

    Leaf gradients accumulate across calls; call :func:`zero_grad` between
    optimization steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any parameter")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# dense primitives


def matmul(a, b) -> Value:
    """``a (..., m, k) @ b (k, n)``."""
    a, b = _as_value(a), _as_value(b)
    if b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(out, (a, b), fn, "matmul")


def transpose(a) -> Value:
    a = _as_value(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D value")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c: float) -> Value:
    a = _as_value(a)
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x, b) -> Value:
    """Add a channel row ``b (C,)`` to every row of ``x (..., C)``."""
    x, b = _as_value(x), _as_value(b)
    if b.data.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ValueError(f"bias shape {b.shape} does not match channels {x.shape[-1]}")

    def fn(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _make(x.data + b.data, (x, b), fn, "add_bias")


def relu(x) -> Value:
    x = _as_value(x)
    mask = x.data > 0
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def concat(values, axis: int = -1) -> Value:
    values = [_as_value(v) for v in values]
    out = np.concatenate([v.data for v in values], axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]

    def fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(values), fn, "concat")


def slice_rows(x, start: int, stop: int) -> Value:
    """Rows ``start:stop`` along the vertex axis (-2)."""
    x = _as_value(x)
    if not 0 <= start <= stop <= x.shape[-2]:
        raise IndexError(f"row slice {start}:{stop} out of range for {x.shape[-2]} rows")

    def fn(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :] = g
        return (full,)

    return _make(x.data[..., start:stop, :], (x,), fn, "slice_rows")


def reshape(x, shape) -> Value:
    x = _as_value(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def sum(x, axis=None) -> Value:  # noqa: A001 - mirrors numpy naming
    x = _as_value(x)
    out = np.asarray(x.data.sum(axis=axis))

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(out, (x,), fn, "sum")


def mean(x, axis=None) -> Value:
    x = _as_value(x)
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / count)


def max_axis(x, axis: int = -1) -> tuple[Value, np.ndarray]:
    """Maximum along ``axis`` plus the winning positions.

    The gradient flows only to the first maximal entry.
    """
    x = _as_value(x)
    axis = axis % x.data.ndim
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def fn(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (x,), fn, "max_axis"), arg


# ---------------------------------------------------------------------------
# sparse row gathers


class IndexTable:
    """A fixed ``(M, S)`` or ``(M, S, K)`` index table into ``n_source`` rows.

    With ``K`` interpolation anchors per slot, ``weights`` has the same
    shape as ``index``. The scatter (adjoint) operator is cached as a CSR
    matrix so accumulation order is fixed by destination row.
    """

    def __init__(self, index, n_source: int, weights=None):
        index = np.asarray(index, dtype=np.int64)
        if index.ndim not in (2, 3):
            raise ValueError(f"index table must be 2-D or 3-D, got shape {index.shape}")
        if index.size and (index.min() < 0 or index.max() >= n_source):
            raise IndexError(f"index out of range for {n_source} source rows")
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != index.shape or index.ndim != 3:
                raise ValueError("weights must match a (M, S, K) index table")
        elif index.ndim == 3:
            raise ValueError("a (M, S, K) index table needs weights")
        self.index = index
        self.weights = weights
        self.n_source = int(n_source)
        self._csr = {}

    @property
    def n_rows(self) -> int:
        return self.index.shape[0]

    @property
    def n_slots(self) -> int:
        return self.index.shape[1]

    def scatter_matrix(self, dtype) -> sp.csr_matrix:
        """Sparse ``(n_source, M*S)`` adjoint of the gather."""
        dtype = np.dtype(dtype)
        if dtype not in self._csr:
            m, s = self.index.shape[:2]
            if self.weights is None:
                rows = self.index.reshape(-1)
                cols = np.arange(m * s)
                vals = np.ones(m * s)
            else:
                k = self.index.shape[2]
                rows = self.index.reshape(-1)
                cols = np.repeat(np.arange(m * s), k)
                vals = self.weights.reshape(-1)
            mat = sp.csr_matrix((vals.astype(dtype), (rows, cols)), shape=(self.n_source, m * s))
            mat.sum_duplicates()
            mat.sort_indices()
            self._csr[dtype] = mat
        return self._csr[dtype]


def _as_table(idx, n_source) -> IndexTable:
    if isinstance(idx, IndexTable):
        if idx.n_source != n_source:
            raise ValueError(f"index table expects {idx.n_source} source rows, got {n_source}")
        return idx
    return IndexTable(idx, n_source)


def _apply_scatter(mat: sp.csr_matrix, rows: np.ndarray, n_cols: int) -> np.ndarray:
    """``mat @ rows`` for rows shaped ``(..., M*S, C)``."""
    lead = rows.shape[:-2]
    ms, c = rows.shape[-2:]
    flat = rows.reshape((-1, ms, c))
    b = flat.shape[0]
    dense = np.ascontiguousarray(flat.transpose(1, 0, 2).reshape(ms, b * c))
    out = np.asarray(mat @ dense)
    out = out.reshape(mat.shape[0], b, c).transpose(1, 0, 2)
    return np.ascontiguousarray(out.reshape(lead + (mat.shape[0], c)))


def gather_rows(x, idx) -> Value:
    """Rows of ``x (..., N, C)`` picked by ``idx (M, S)``, flattened to ``(..., M, S*C)``."""
    x = _as_value(x)
    table = _as_table(idx, x.shape[-2])
    if table.weights is not None:
        raise ValueError("use weighted_gather for interpolating tables")
    m, s = table.index.shape
    c = x.shape[-1]
    out = x.data[..., table.index, :].reshape(x.shape[:-2] + (m, s * c))

    def fn(g):
        rows = g.reshape(g.shape[:-2] + (m * s, c))
        return (_apply_scatter(table.scatter_matrix(g.dtype), rows, c),)

    return _make(out, (x,), fn, "gather_rows")


def weighted_gather(x, table: IndexTable) -> Value:
    """Interpolating gather: slot ``j`` of row ``i`` is ``sum_k w[i,j,k] * x[idx[i,j,k]]``."""
    x = _as_value(x)
    table = _as_table(table, x.shape[-2])
    if table.weights is None:
        raise ValueError("weighted_gather needs a weighted index table")
    m, s, _ = table.index.shape
    c = x.shape[-1]
    w = table.weights.astype(x.dtype)
    picked = x.data[..., table.index, :]  # (..., M, S, K, C)
    out = np.einsum("...mskc,msk->...msc", picked, w).reshape(x.shape[:-2] + (m, s * c))

    def fn(g):
        rows = g.reshape(g.shape[:-2] + (m * s, c))
        return (_apply_scatter(table.scatter_matrix(g.dtype), rows, c),)

    return _make(out, (x,), fn, "weighted_gather")


def scatter_add_rows(rows, idx, n: int) -> Value:
    """Adjoint of :func:`gather_rows`: ``out[idx[i, j]] += rows[i, j*C:(j+1)*C]``."""
    rows = _as_value(rows)
    table = _as_table(idx, n)
    if table.weights is not None:
        raise ValueError("scatter_add_rows expects an unweighted table")
    m, s = table.index.shape
    if rows.shape[-2] != m or rows.shape[-1] % s:
        raise ValueError(f"rows shape {rows.shape} incompatible with index table {table.index.shape}")
    c = rows.shape[-1] // s
    flat = rows.data.reshape(rows.shape[:-2] + (m * s, c))
    out = _apply_scatter(table.scatter_matrix(rows.dtype), flat, c)

    def fn(g):
        return (g[..., table.index, :].reshape(rows.shape),)

    return _make(out, (rows,), fn, "scatter_add_rows")


def gather_elements(x, target: np.ndarray) -> Value:
    """``out[..., i, c] = x[..., target[..., i, c], c]`` (per-channel row pick)."""
    x = _as_value(x)
    target = np.asarray(target, dtype=np.int64)
    n = x.shape[-2]
    if target.size and (target.min() < 0 or target.max() >= n):
        raise IndexError("element index out of range")
    t = np.broadcast_to(target, x.shape[:-2] + target.shape[-2:])
    out = np.take_along_axis(x.data, t, axis=-2)

    def fn(g):
        return (_bincount_scatter(g, t, n),)

    return _make(out, (x,), fn, "gather_elements")


def _bincount_scatter(y: np.ndarray, target: np.ndarray, n: int) -> np.ndarray:
    lead = y.shape[:-2]
    m, c = y.shape[-2:]
    b = int(np.prod(lead, dtype=np.int64))
    t = target.reshape(b, m, c)
    flat = (np.arange(b)[:, None, None] * n + t) * c + np.arange(c)
    acc = np.bincount(flat.ravel(), weights=y.reshape(-1).astype(np.float64), minlength=b * n * c)
    return acc.astype(y.dtype).reshape(lead + (n, c))


def scatter_add_elements(y, target: np.ndarray, n: int) -> Value:
    """``out[..., target[..., i, c], c] += y[..., i, c]`` into ``n`` rows."""
    y = _as_value(y)
    target = np.asarray(target, dtype=np.int64)
    if target.size and (target.min() < 0 or target.max() >= n):
        raise IndexError("element index out of range")
    t = np.broadcast_to(target, y.shape)
    out = _bincount_scatter(y.data, t, n)

    def fn(g):
        return (np.take_along_axis(g, t, axis=-2),)

    return _make(out, (y,), fn, "scatter_add_elements")


# ---------------------------------------------------------------------------
# verification


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_input: list[float]
    n_checked: int
    failures: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def gradcheck(fn, inputs, eps: float = 1e-5, tolerance: float = 1e-4, n_coords: int = 20, seed: int = 0) -> GradcheckReport:
    """Compare analytic gradients with central differences.

    ``fn()`` must rebuild the scalar loss from the current ``inputs`` data.
    At most ``n_coords`` random coordinates per input are probed; the
    relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    ``failures`` lists ``(input, flat index, analytic, numeric, rel)``.
    """
    for v in inputs:
        if v.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
        if not v.requires_grad:
            raise ValueError("gradcheck inputs must require grad")
    saved = [v.grad for v in inputs]
    zero_grad(inputs)
    backward(fn())
    analytic = [np.zeros_like(v.data) if v.grad is None else v.grad.copy() for v in inputs]
    for v, g in zip(inputs, saved):
        v.grad = g

    rng = np.random.default_rng(seed)
    per_input, failures, total = [], [], 0
    with no_grad():
        for i, v in enumerate(inputs):
            flat = v.data.reshape(-1)
            coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
            worst = 0.0
            for j in coords:
                orig = flat[j]
                flat[j] = orig + eps
                fp = float(fn().data)
                flat[j] = orig - eps
                fm = float(fn().data)
                flat[j] = orig
                num = (fp - fm) / (2 * eps)
                ana = float(analytic[i].reshape(-1)[j])
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, rel)
                if rel > tolerance:
                    failures.append((i, int(j), ana, num, rel))
            per_input.append(worst)
            total += len(coords)
    return GradcheckReport(max(per_input, default=0.0), per_input, total, failures, tolerance)


# ---------------------------------------------------------------------------
# checkpoint container


class CheckpointError(ValueError):
    pass


_CKPT_MAGIC = b"SUNW"


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Named float32 arrays: magic ``SUNW``, u32 count, then per entry
    u32 name length, name bytes, u32 rank, rank x u32 dims, f32 data."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {_CKPT_MAGIC!r}")
    try:
        (count,) = struct.unpack_from("<I", raw, 4)
        off = 8
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + ln].decode("utf-8")
            off += ln
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 4 * size > len(raw):
                raise CheckpointError(f"{path}: truncated entry {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims).copy()
            off += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated file") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out
