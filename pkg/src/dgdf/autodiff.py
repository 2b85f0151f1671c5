"""Dense float64 tensors with reverse-mode differentiation.

Just enough machinery for the CVR model: linear maps, concatenation,
elementwise nonlinearities, valid-padding 2D convolution, row gather /
scatter, and reductions. Primitives record onto the innermost active
``Tape``; with no active tape they run forward-only (inference mode).

Everything is double precision and the reduction order is fixed, so
identical seeds and inputs give bit-identical values and gradients.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import DataError, NumericError


class Tensor:
    """A numpy float64 array plus gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def grad_array(self) -> np.ndarray:
        """Gradient, with an all-zeros array standing in for 'no influence'."""
        if self.grad is None:
            return np.zeros_like(self.values)
        return self.grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications; consumed by one backward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STACK.pop()

    def __len__(self) -> int:
        return len(self._records)


_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _STACK[-1] if _STACK else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    """Wrap a primitive result, recording it if grads are needed."""
    out = Tensor(values, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        out._tape = tape
        tape._records.append((out, inputs, bwd))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive catalog


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        vals = a.values + b.values
    except ValueError:
        raise ValueError(f"add: incompatible shapes {a.shape} vs {b.shape}") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(vals, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        vals = a.values * b.values
    except ValueError:
        raise ValueError(f"mul: incompatible shapes {a.shape} vs {b.shape}") from None

    def bwd(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make(vals, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _make(a.values * c, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} vs {b.shape}")

    def bwd(g):
        return g @ b.values.T, a.values.T @ g

    return _make(a.values @ b.values, (a, b), bwd)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    vals = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(vals, tuple(parts), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    vals = a.values.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(vals, (a,), bwd)


def flatten(a) -> Tensor:
    return reshape(a, (-1,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    vals = expit(a.values)

    def bwd(g):
        return (g * vals * (1.0 - vals),)

    return _make(vals, (a,), bwd)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    vals = np.tanh(a.values)

    def bwd(g):
        return (g * (1.0 - vals * vals),)

    return _make(vals, (a,), bwd)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _as_tensor(a)
    pos = a.values >= 0

    def bwd(g):
        return (g * np.where(pos, 1.0, slope),)

    return _make(np.where(pos, a.values, slope * a.values), (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    vals = np.log(a.values)

    def bwd(g):
        return (g / a.values,)

    return _make(vals, (a,), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.values >= lo) & (a.values <= hi)

    def bwd(g):
        return (g * inside,)

    return _make(np.clip(a.values, lo, hi), (a,), bwd)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of a 2D tensor: out[i] = table[ids[i]]."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    if table.values.ndim != 2:
        raise ValueError(f"embedding_lookup: table must be 2D, got {table.shape}")
    if ids.ndim != 1:
        raise ValueError(f"embedding_lookup: ids must be 1D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"embedding_lookup: ids out of range for table with {table.shape[0]} rows"
        )
    nrows = table.shape[0]

    def bwd(g):
        return (kernels.segment_sum(np.ascontiguousarray(g), ids, nrows),)

    return _make(table.values[ids], (table,), bwd)


def segment_sum(data, seg_ids, num_segments: int) -> Tensor:
    """Scatter-add rows: out[seg_ids[e]] += data[e]."""
    data = _as_tensor(data)
    seg_ids = np.asarray(seg_ids, dtype=np.intp)
    if data.values.ndim != 2:
        raise ValueError(f"segment_sum: data must be 2D, got {data.shape}")
    vals = kernels.segment_sum(np.ascontiguousarray(data.values), seg_ids, num_segments)

    def bwd(g):
        return (g[seg_ids],)

    return _make(vals, (data,), bwd)


def conv2d(x, kern, bias) -> Tensor:
    """Valid-padding stride-1 cross-correlation with per-channel bias.

    x: (H, W) or (N, H, W); kern: (h, w, C); bias: (C,).
    Returns (H-h+1, W-w+1, C), batched with a leading N if x was batched.
    """
    x, kern, bias = _as_tensor(x), _as_tensor(kern), _as_tensor(bias)
    batched = x.values.ndim == 3
    xv = x.values if batched else x.values[None]
    if kern.values.ndim != 3:
        raise ValueError(f"conv2d: kernel must be (h, w, c), got {kern.shape}")
    kh, kw, c = kern.shape
    if kh > xv.shape[1] or kw > xv.shape[2]:
        raise ValueError(
            f"conv2d: kernel {kern.shape} larger than input {x.shape}"
        )
    if bias.shape != (c,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {c} channels")
    xv = np.ascontiguousarray(xv)
    kv = np.ascontiguousarray(kern.values)
    out = kernels.conv2d_forward(xv, kv, bias.values)

    def bwd(g):
        g = np.ascontiguousarray(g if batched else g[None])
        gx, gk, gb = kernels.conv2d_backward(xv, kv, g)
        return (gx if batched else gx[0]), gk, gb

    return _make(out if batched else out[0], (x, kern, bias), bwd)


def tensor_sum(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    vals = a.values.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(vals, (a,), bwd)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    count = a.values.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis=axis), 1.0 / count)


def stop_gradient(a) -> Tensor:
    """Forward the values, record nothing: downstream gradients stop here."""
    a = _as_tensor(a)
    return Tensor(a.values.copy(), requires_grad=False)


# ``sum`` shadowing the builtin inside this module would be a footgun; the
# public alias keeps the conventional operation name.
sum = tensor_sum  # noqa: A001


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every reachable leaf.

    The recording tape is consumed: a second backward on it raises.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("backward: loss was not recorded on an active tape")
    if tape._consumed:
        raise ValueError("backward: tape already consumed")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    produced = {id(rec[0]) for rec in tape._records}
    tensors: dict[int, Tensor] = {}
    for out, inputs, bwd in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, bwd(g)):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
            tensors[key] = inp
    # whatever is left belongs to leaves (tensors no record produced)
    for key, g in grads.items():
        t = tensors.get(key)
        if t is None or key in produced:
            continue
        t.grad = g if t.grad is None else t.grad + g


def check_gradients(f: Callable[..., Tensor], leaves: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f(*leaves)`` with central differences.

    Returns the max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"check_gradients: eps {eps} outside [1e-7, 1e-3]")
    with Tape():
        loss = f(*leaves)
        if loss.values.size != 1:
            raise ValueError("check_gradients: f must be scalar-valued")
        backward(loss)
    ad_grads = [leaf.grad_array().copy() for leaf in leaves]

    worst = 0.0
    for li, leaf in enumerate(leaves):
        flat = leaf.values.reshape(-1)
        g_ad = ad_grads[li].reshape(-1)
        for ci in range(flat.size):
            orig = flat[ci]
            flat[ci] = orig + eps
            up = f(*leaves).item()
            flat[ci] = orig - eps
            down = f(*leaves).item()
            flat[ci] = orig
            g_fd = (up - down) / (2.0 * eps)
            if not (np.isfinite(g_fd) and np.isfinite(g_ad[ci])):
                raise NumericError(
                    f"check_gradients: non-finite gradient at leaf {li}, coordinate {ci}"
                )
            err = abs(g_ad[ci] - g_fd) / max(1.0, abs(g_ad[ci]), abs(g_fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# parameter checkpoints

PARAMS_MAGIC = b"DGDF-PARAMS v1\n"


def save_params(path, named: dict[str, np.ndarray]) -> None:
    """Write named arrays as a flat versioned file of little-endian doubles."""
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(f"{len(named)}\n".encode())
        for name, arr in named.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            shape = ",".join(str(s) for s in a.shape)
            fh.write(f"{name} {shape}\n".encode())
            fh.write(a.tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != PARAMS_MAGIC:
            raise DataError(f"{path}: not a DGDF-PARAMS v1 file")
        count = int(fh.readline())
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            header = fh.readline().decode().rstrip("\n")
            name, _, shape_str = header.partition(" ")
            shape = tuple(int(s) for s in shape_str.split(",") if s)
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise DataError(f"{path}: truncated entry for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return out


def load_params_into(path, named: dict[str, Tensor]) -> None:
    """Load a checkpoint into existing tensors, rejecting any shape mismatch."""
    loaded = load_params(path)
    missing = set(named) - set(loaded)
    extra = set(loaded) - set(named)
    if missing or extra:
        raise DataError(
            f"{path}: parameter names do not match (missing={sorted(missing)}, "
            f"unexpected={sorted(extra)})"
        )
    for name, tensor in named.items():
        if loaded[name].shape != tensor.values.shape:
            raise DataError(
                f"{path}: shape mismatch for {name!r}: file {loaded[name].shape}, "
                f"expected {tensor.values.shape}"
            )
    for name, tensor in named.items():
        tensor.values = loaded[name]
