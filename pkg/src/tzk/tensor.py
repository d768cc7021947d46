"""Dense tensors with reverse-mode automatic differentiation.

Everything numeric in this package flows through :class:`Tensor`: a dense
n-dimensional float array (numpy storage) that optionally participates in a
gradient tape. Operations record :class:`TapeNode` entries in creation order,
which is already a topological order, so :func:`backward` is a single reverse
sweep that visits each node exactly once and then consumes the tape.

Floats are 32-bit by default and 64-bit in oracle mode; switch globally with
:func:`set_precision` or locally with the :func:`precision` context manager.
The ``TZK_PRECISION`` environment variable (``f32`` or ``f64``) sets the
startup default.

Design limits (deliberate): no GPU, no broadcasting beyond scalars plus the
dedicated row-vector ops, no higher-order derivatives.
"""

from __future__ import annotations

import contextlib
import itertools
import os
import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    FormatError,
    GraphError,
    NumericError,
    StateError,
)

LOG_2PI = float(np.log(2.0 * np.pi))

_DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_state = {
    "dtype": None,  # set below from the environment
    "grad_enabled": True,
}


def set_precision(mode: str) -> None:
    """Set the global float width: 'f32' for training, 'f64' for oracles."""
    if mode not in _DTYPES:
        raise ConfigError(f"precision must be 'f32' or 'f64', got {mode!r}")
    _state["dtype"] = np.dtype(_DTYPES[mode])


def get_precision() -> str:
    return _DTYPE_NAMES[_state["dtype"]]


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the global float width."""
    old = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def grad_enabled() -> bool:
    return _state["grad_enabled"]


_node_counter = itertools.count()


class TapeNode:
    """One recorded operation: output's parents plus the gradient rule.

    Nodes are numbered at creation, so ascending id order is a topological
    order of the tape. ``vjp`` maps the output gradient to per-parent
    gradients (``None`` for parents that do not require gradients).
    """

    __slots__ = ("id", "parents", "vjp", "consumed")

    def __init__(self, parents: tuple, vjp: Callable):
        self.id = next(_node_counter)
        self.parents = parents
        self.vjp = vjp
        self.consumed = False


class Tensor:
    """Dense float array, optionally attached to the gradient tape.

    Tensors are immutable once created except for the ``grad`` buffer and the
    explicit :meth:`assign_` escape hatch used by optimizers and data-driven
    initialization (exclusive access required). Tensors without a tape node
    can be shared freely across threads.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None

    # -- inspection -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """The underlying array. Treat as read-only."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.node = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def assign_(self, values) -> None:
        """Overwrite values in place (optimizer/init use; exclusive access)."""
        arr = np.asarray(values, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise DimensionError(
                f"assign_ shape {arr.shape} != tensor shape {self.data.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericError("assign_ rejects non-finite values")
        self.data[...] = arr

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.node is not None:
            flags.append("on_tape")
        tail = (", " + ", ".join(flags)) if flags else ""
        return f"Tensor(shape={self.shape}, dtype={_DTYPE_NAMES[self.dtype]}{tail})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)


def parameter(values, requires_grad: bool = True) -> Tensor:
    return Tensor(np.asarray(values, dtype=default_dtype()), requires_grad=requires_grad)


# -- op plumbing -----------------------------------------------------------


def _result(arr: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op output, checking finiteness and recording the tape node."""
    if not np.all(np.isfinite(arr)):
        raise NumericError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    track = any(p.requires_grad or p.node is not None for p in parents)
    out.requires_grad = track
    if track and grad_enabled():
        out.node = TapeNode(tuple(parents), vjp)
    else:
        out.node = None
    return out


def _reduce_like(grad: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Sum a broadcast gradient back down to the shape of ``ref``."""
    if grad.shape == ref.shape:
        return grad
    return np.sum(grad).reshape(ref.shape).astype(ref.dtype)


def _check_elementwise(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"elementwise shapes {a.shape} and {b.shape} differ")


# -- binary elementwise -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b)

    def vjp(g):
        return _reduce_like(g, a.data), _reduce_like(g, b.data)

    return _result(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b)

    def vjp(g):
        return _reduce_like(g, a.data), _reduce_like(-g, b.data)

    return _result(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _reduce_like(g * bd, ad), _reduce_like(g * ad, bd)

    return _result(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    ad, bd = a.data, b.data

    def vjp(g):
        return _reduce_like(g / bd, ad), _reduce_like(-g * ad / (bd * bd), bd)

    return _result(ad / bd, (a, b), vjp)


# -- unary elementwise -------------------------------------------------------


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_stable(ad: np.ndarray) -> np.ndarray:
    # exp only ever sees non-positive arguments
    q = np.exp(-np.abs(ad))
    return np.where(ad >= 0, 1.0, q) / (1.0 + q)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_stable(a.data).astype(a.dtype)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def swish(a) -> Tensor:
    """x * sigmoid(x); the package-wide nonlinearity."""
    a = as_tensor(a)
    ad = a.data
    sig = _sigmoid_stable(ad).astype(a.dtype)
    out = ad * sig

    def vjp(g):
        return (g * (sig + ad * sig * (1.0 - sig)),)

    return _result(out, (a,), vjp)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad).astype(a.dtype)
    sig = _sigmoid_stable(ad).astype(a.dtype)
    return _result(out, (a,), lambda g: (g * sig,))


def logcosh(a) -> Tensor:
    """log cosh(x), computed without exponent overflow; gradient is tanh(x)."""
    a = as_tensor(a)
    ad = a.data
    ax = np.abs(ad)
    out = (ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)).astype(a.dtype)
    th = np.tanh(ad)
    return _result(out, (a,), lambda g: (g * th,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "swish": swish,
    "softplus": softplus,
    "neg": neg,
}


def elementwise(op_code: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name. Binary ops require ``b``."""
    try:
        fn = _ELEMENTWISE[op_code]
    except KeyError:
        raise DomainError(f"unknown elementwise op {op_code!r}") from None
    if op_code in ("add", "sub", "mul", "div"):
        if b is None:
            raise ContractError(f"{op_code} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ContractError(f"{op_code} takes a single operand")
    return fn(a)


# -- linear algebra / reductions ---------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents {a.shape} x {b.shape} disagree")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), vjp)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def vjp(g):
        return (np.full(ad.shape, float(g), dtype=ad.dtype),)

    return _result(np.sum(ad).reshape(()), (a,), vjp)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    n = ad.size

    def vjp(g):
        return (np.full(ad.shape, float(g) / n, dtype=ad.dtype),)

    return _result(np.mean(ad).reshape(()), (a,), vjp)


def sum_rows(a) -> Tensor:
    """Row-wise sum of a 2-D tensor: (n, d) -> (n,)."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("sum_rows expects a 2-D tensor")
    ad = a.data

    def vjp(g):
        return (np.repeat(g[:, None], ad.shape[1], axis=1),)

    return _result(np.sum(ad, axis=1), (a,), vjp)


def add_row(x, v) -> Tensor:
    """Add a (d,) vector to every row of an (n, d) tensor."""
    x, v = as_tensor(x), as_tensor(v)
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise DimensionError(f"add_row shapes {x.shape} and {v.shape} incompatible")

    def vjp(g):
        return g, np.sum(g, axis=0)

    return _result(x.data + v.data[None, :], (x, v), vjp)


def mul_row(x, v) -> Tensor:
    """Multiply every row of an (n, d) tensor by a (d,) vector."""
    x, v = as_tensor(x), as_tensor(v)
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise DimensionError(f"mul_row shapes {x.shape} and {v.shape} incompatible")
    xd, vd = x.data, v.data

    def vjp(g):
        return g * vd[None, :], np.sum(g * xd, axis=0)

    return _result(xd * vd[None, :], (x, v), vjp)


def expand_channels(v, reps: int) -> Tensor:
    """Repeat each entry of a (c,) vector ``reps`` times -> (c*reps,)."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise DimensionError("expand_channels expects a 1-D tensor")
    c = v.shape[0]

    def vjp(g):
        return (g.reshape(c, reps).sum(axis=1),)

    return _result(np.repeat(v.data, reps), (v,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _result(out, (a,), lambda g: (g.reshape(old),))


def _as_index(idx) -> np.ndarray:
    arr = np.asarray(idx, dtype=np.int64)
    if arr.ndim != 1:
        raise DimensionError("index must be 1-D")
    return arr


def gather_cols(x, idx) -> Tensor:
    """Select columns of an (n, d) tensor; duplicates allowed."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError("gather_cols expects a 2-D tensor")
    idx = _as_index(idx)
    xd = x.data

    def vjp(g):
        out = np.zeros_like(xd)
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return _result(xd[:, idx], (x,), vjp)


def gather_rows(x, idx) -> Tensor:
    """Select rows of an (n, d) tensor; duplicates allowed."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError("gather_rows expects a 2-D tensor")
    idx = _as_index(idx)
    xd = x.data

    def vjp(g):
        out = np.zeros_like(xd)
        np.add.at(out, (idx, slice(None)), g)
        return (out,)

    return _result(xd[idx, :], (x,), vjp)


def concat_cols(*parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if any(p.data.ndim != 2 for p in parts):
        raise DimensionError("concat_cols expects 2-D tensors")
    n = parts[0].shape[0]
    if any(p.shape[0] != n for p in parts):
        raise DimensionError("concat_cols row counts differ")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), vjp)


def concat_rows(*parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if any(p.data.ndim != 2 for p in parts):
        raise DimensionError("concat_rows expects 2-D tensors")
    d = parts[0].shape[1]
    if any(p.shape[1] != d for p in parts):
        raise DimensionError("concat_rows column counts differ")
    heights = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + heights)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1], :] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp)


# -- backward ----------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; populates ``grad`` on leaf tensors.

    The tape reachable from ``loss`` is consumed: running backward on it a
    second time raises :class:`StateError` rather than silently accumulating.
    Leaf gradients accumulate across separate backward calls on separate
    tapes; call ``zero_grad`` between optimization steps.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    root = loss.node
    if root is None:
        raise GraphError("loss is not attached to a tape (no recorded operations)")
    if root.consumed:
        raise StateError("backward already ran on this tape; re-record the graph")

    nodes: dict[int, TapeNode] = {}
    stack = [root]
    while stack:
        nd = stack.pop()
        if nd.id in nodes:
            continue
        if nd.consumed:
            raise StateError(
                "tape shares nodes with an already-consumed graph; re-record"
            )
        nodes[nd.id] = nd
        for p in nd.parents:
            if p.node is not None:
                stack.append(p.node)

    grads: dict[int, np.ndarray] = {root.id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        nd = nodes[nid]
        g = grads.pop(nid, None)
        nd.consumed = True
        if g is None:
            # reachable but received no gradient (all paths were non-diff)
            nd.vjp = None
            continue
        parent_grads = nd.vjp(g)
        nd.vjp = None
        for p, pg in zip(nd.parents, parent_grads):
            if pg is None:
                continue
            if p.node is not None:
                key = p.node.id
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            elif p.requires_grad:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad = p.grad + pg


# -- finite-difference oracle --------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-4) -> Tensor:
    """Central-difference gradient of a deterministic scalar function.

    This is the verification oracle: it never touches the tape; it evaluates
    ``f`` at coordinate-wise perturbations of ``x``.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad needs h > 0")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _eval_scalar(f, base, x)
            flat[i] = orig - h
            fm = _eval_scalar(f, base, x)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.astype(x.dtype), dtype=x.dtype)


def _eval_scalar(f, arr: np.ndarray, like: Tensor) -> float:
    val = f(Tensor(arr.astype(like.dtype)))
    if isinstance(val, Tensor):
        val = val.item()
    val = float(val)
    if not np.isfinite(val):
        raise DomainError("objective returned a non-finite value")
    return val


def finite_diff_grads(f: Callable[[], Tensor], params: Iterable[Tensor],
                      h: float = 1e-4) -> list[np.ndarray]:
    """Central differences of a closure w.r.t. several parameter tensors.

    ``f`` reads the current values of ``params``; each coordinate is bumped
    in place (and restored) between evaluations.
    """
    if h <= 0:
        raise ContractError("finite_diff_grads needs h > 0")
    params = list(params)
    out = []
    with no_grad():
        for p in params:
            g = np.zeros_like(p.data, dtype=np.float64)
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().item())
                flat[i] = orig - h
                fm = float(f().item())
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
            out.append(g)
    return out


# -- TZKT tensor file format ---------------------------------------------------

_TZKT_MAGIC = b"TZKT"
_TZKT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor(fp, t: Tensor) -> None:
    """Serialize one tensor: magic, version, dtype code, rank, extents, payload."""
    close = False
    if isinstance(fp, (str, os.PathLike)):
        fp = open(fp, "wb")
        close = True
    try:
        fp.write(_TZKT_MAGIC)
        fp.write(struct.pack("<BB", _TZKT_VERSION, _DTYPE_CODES[t.dtype]))
        fp.write(struct.pack("<I", t.data.ndim))
        for ext in t.shape:
            fp.write(struct.pack("<I", ext))
        le = "<f4" if t.dtype == np.float32 else "<f8"
        fp.write(np.ascontiguousarray(t.data, dtype=le).tobytes())
    finally:
        if close:
            fp.close()


def read_tensor(fp) -> Tensor:
    close = False
    if isinstance(fp, (str, os.PathLike)):
        fp = open(fp, "rb")
        close = True
    try:
        start = fp.tell()
        magic = fp.read(4)
        if magic != _TZKT_MAGIC:
            raise FormatError(f"bad tensor magic {magic!r} at offset {start}")
        version, code = struct.unpack("<BB", _read_exact(fp, 2))
        if version != _TZKT_VERSION:
            raise FormatError(f"unsupported tensor format version {version}")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code}")
        (rank,) = struct.unpack("<I", _read_exact(fp, 4))
        shape = tuple(
            struct.unpack("<I", _read_exact(fp, 4))[0] for _ in range(rank)
        )
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(shape)) if shape else 1
        payload = _read_exact(fp, count * dtype.itemsize)
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        native = np.float32 if code == 0 else np.float64
        return Tensor(arr.astype(native, copy=False), dtype=native)
    finally:
        if close:
            fp.close()


def _read_exact(fp, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise FormatError(
            f"truncated tensor payload at offset {fp.tell()}: wanted {n} bytes, got {len(buf)}"
        )
    return buf


set_precision(os.environ.get("TZK_PRECISION", "f32"))
