"""Dense float64 tensors with a reverse-mode autodiff tape.

Everything downstream (models, losses, training) runs on the small op set
defined here. All arithmetic is 64-bit so gradient checks can use tight
tolerances. Ops record themselves on the innermost active ``Tape`` whenever
any input participates in differentiation; outside a tape they are plain
numpy forward computations.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np


class TensorError(ValueError):
    """Base class for tensor contract violations."""


class ShapeMismatch(TensorError):
    pass


class NonFiniteValue(TensorError):
    pass


_TAPE_STACK: list["Tape"] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense row-major float64 value, optionally tracked for gradients."""

    __slots__ = ("values", "grad_enabled", "node", "meta")

    def __init__(self, values, grad_enabled: bool = False, _allow_nonfinite: bool = False):
        # asarray with order="C" keeps 0-d scalars 0-d (ascontiguousarray would not)
        arr = np.asarray(values, dtype=np.float64, order="C")
        if not _allow_nonfinite and not np.all(np.isfinite(arr)):
            raise NonFiniteValue("tensor constructed from non-finite values")
        self.values = arr
        self.grad_enabled = grad_enabled
        self.node = None
        self.meta = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        return float(self.values)

    def copy(self) -> "Tensor":
        return Tensor(self.values.copy(), grad_enabled=self.grad_enabled)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.grad_enabled})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(values) -> Tensor:
    return Tensor(values, grad_enabled=False)


def detach(t: Tensor) -> Tensor:
    """Copy of ``t`` cut off from the tape (no gradient flows through it)."""
    return Tensor(t.values.copy(), grad_enabled=False)


class _Record:
    __slots__ = ("kind", "inputs", "output", "backward", "forward", "tape")

    def __init__(self, kind, inputs, output, backward, forward, tape):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.forward = forward
        self.tape = tape


class Tape:
    """Ordered record of differentiable ops; inputs always precede use."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _record(self, kind, inputs, output, backward, forward):
        rec = _Record(kind, inputs, output, backward, forward, self)
        output.node = rec
        self.records.append(rec)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from ``loss``; returns gradients keyed by id(tensor)."""
        if loss.shape != ():
            raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for rec in reversed(self.records):
            g_out = grads.get(id(rec.output))
            if g_out is None:
                continue
            in_grads = rec.backward(g_out)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.grad_enabled:
                    continue
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = np.asarray(g, dtype=np.float64)
                else:
                    grads[id(t)] = acc + g
        return grads

    def grad(self, loss: Tensor, wanted: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` for each tensor in ``wanted`` (zeros if unreachable)."""
        grads = self.backward(loss)
        return [grads.get(id(t), np.zeros_like(t.values)) for t in wanted]

    def replay(self) -> bool:
        """Re-run every recorded op on its stored inputs; True if all outputs
        are bitwise identical to the recorded ones."""
        for rec in self.records:
            fresh = rec.forward()
            if fresh.tobytes() != rec.output.values.tobytes():
                return False
        return True


# ---------------------------------------------------------------------------
# op plumbing


def _emit(kind, values, inputs, backward, forward):
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue(f"op '{kind}' produced non-finite values")
    out = Tensor(values, _allow_nonfinite=True)
    tape = active_tape()
    if tape is not None and any(t.grad_enabled for t in inputs):
        out.grad_enabled = True
        tape._record(kind, inputs, out, backward, forward)
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast axes so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_shapes(kind, a, b):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeMismatch(f"{kind}: shapes {a.shape} and {b.shape} do not match")


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    vals = a.values + b.values

    def backward(g):
        return (_reduce_to(g, a.shape), _reduce_to(g, b.shape))

    return _emit("add", vals, (a, b), backward, lambda: a.values + b.values)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    vals = a.values - b.values

    def backward(g):
        return (_reduce_to(g, a.shape), _reduce_to(-g, b.shape))

    return _emit("sub", vals, (a, b), backward, lambda: a.values - b.values)


def mul(a, b) -> Tensor:
    """Elementwise product; scalar-with-tensor is the only broadcast allowed."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("elementwise-mul", a, b)
    vals = a.values * b.values

    def backward(g):
        return (_reduce_to(g * b.values, a.shape), _reduce_to(g * a.values, b.shape))

    return _emit("elementwise-mul", vals, (a, b), backward, lambda: a.values * b.values)


def mul_scalar(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    vals = a.values * s

    def backward(g):
        return (g * s,)

    return _emit("mul-by-scalar", vals, (a,), backward, lambda: a.values * s)


def square(a) -> Tensor:
    a = as_tensor(a)
    vals = a.values * a.values

    def backward(g):
        return (2.0 * a.values * g,)

    return _emit("square", vals, (a,), backward, lambda: a.values * a.values)


def relu(a) -> Tensor:
    a = as_tensor(a)
    vals = np.maximum(a.values, 0.0)

    def backward(g):
        return (g * (a.values > 0.0),)

    return _emit("relu", vals, (a,), backward, lambda: np.maximum(a.values, 0.0))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    vals = np.tanh(a.values)

    def backward(g):
        return (g * (1.0 - vals * vals),)

    return _emit("tanh", vals, (a,), backward, lambda: np.tanh(a.values))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeMismatch(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(
            f"matmul inner extents differ: {a.shape} @ {b.shape} "
            f"({a.shape[-1]} vs {b.shape[-2]})"
        )
    vals = a.values @ b.values

    def backward(g):
        ga = _reduce_to(g @ np.swapaxes(b.values, -1, -2), a.shape)
        gb = _reduce_to(np.swapaxes(a.values, -1, -2) @ g, b.shape)
        return (ga, gb)

    return _emit("matmul", vals, (a, b), backward, lambda: a.values @ b.values)


def bias_add(x, b) -> Tensor:
    """Add a length-d vector to the last dim of x (the one broadcast linear
    layers need; general broadcasting stays out of the op set)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.values.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeMismatch(f"bias-add: bias {b.shape} does not fit last dim of {x.shape}")
    vals = x.values + b.values

    def backward(g):
        axes = tuple(range(g.ndim - 1))
        return (g, g.sum(axis=axes) if axes else g)

    return _emit("bias-add", vals, (x, b), backward, lambda: x.values + b.values)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(int(i) for i in axes)
    if sorted(axes) != list(range(a.values.ndim)):
        raise ShapeMismatch(f"transpose: axes {axes} invalid for shape {a.shape}")
    vals = np.ascontiguousarray(np.transpose(a.values, axes))
    inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _emit("transpose", vals, (a,), backward,
                 lambda: np.ascontiguousarray(np.transpose(a.values, axes)))


def transpose_last_two(a) -> Tensor:
    a = as_tensor(a)
    n = a.values.ndim
    if n < 2:
        raise ShapeMismatch(f"transpose-last-two needs ndim >= 2, got {a.shape}")
    axes = tuple(range(n - 2)) + (n - 1, n - 2)
    return transpose(a, axes)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeMismatch(f"reshape: {a.shape} has {a.size} values, target {shape}")
    vals = a.values.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _emit("reshape", vals, (a,), backward, lambda: a.values.reshape(shape))


def concat_last(tensors: Sequence[Tensor]) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatch("concat-last-dim of zero tensors")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeMismatch(
                f"concat-last-dim: leading shapes differ ({ts[0].shape} vs {t.shape})"
            )
    vals = np.concatenate([t.values for t in ts], axis=-1)
    sizes = [t.shape[-1] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(g[..., bounds[i]:bounds[i + 1]]) for i in range(len(ts))
        )

    return _emit("concat-last-dim", vals, tuple(ts), backward,
                 lambda: np.concatenate([t.values for t in ts], axis=-1))


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.values.ndim
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeMismatch(f"slice [{start}:{stop}] out of range for extent {n} (axis {axis})")
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.values.ndim))
    vals = np.ascontiguousarray(a.values[idx])

    def backward(g):
        full = np.zeros_like(a.values)
        full[idx] = g
        return (full,)

    return _emit("slice", vals, (a,), backward, lambda: np.ascontiguousarray(a.values[idx]))


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_op(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.values.ndim)
    vals = a.values.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(a.shape, float(g)),)
        g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return _emit("sum", vals, (a,), backward, lambda: a.values.sum(axis=axis))


def mean_op(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ShapeMismatch("mean of an empty tensor")
    axis = _norm_axis(axis, a.values.ndim)
    vals = a.values.mean(axis=axis)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in axis]))

    def backward(g):
        if axis is None:
            return (np.full(a.shape, float(g) / count),)
        g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy() / count,)

    return _emit("mean", vals, (a,), backward, lambda: a.values.mean(axis=axis))


# ---------------------------------------------------------------------------
# normalizations over the last dim


def softmax_last(a) -> Tensor:
    a = as_tensor(a)
    if a.values.ndim < 1:
        raise ShapeMismatch("softmax-last-dim needs ndim >= 1")
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    vals = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * vals).sum(axis=-1, keepdims=True)
        return (vals * (g - dot),)

    def forward():
        sh = a.values - a.values.max(axis=-1, keepdims=True)
        ee = np.exp(sh)
        return ee / ee.sum(axis=-1, keepdims=True)

    return _emit("softmax-last-dim", vals, (a,), backward, forward)


def log_softmax_last(a) -> Tensor:
    """Max-subtracted log-softmax; safe to feed straight into CTC."""
    a = as_tensor(a)
    if a.values.ndim < 1:
        raise ShapeMismatch("log-softmax-last-dim needs ndim >= 1")
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    vals = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(vals) * g.sum(axis=-1, keepdims=True),)

    def forward():
        sh = a.values - a.values.max(axis=-1, keepdims=True)
        return sh - np.log(np.exp(sh).sum(axis=-1, keepdims=True))

    return _emit("log-softmax-last-dim", vals, (a,), backward, forward)


def layer_norm_last(x, gain, bias, eps: float = 1e-12) -> Tensor:
    """Normalize the last dim with population variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(
            f"layer-norm-last-dim: gain {gain.shape} / bias {bias.shape} must be ({d},)"
        )
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    vals = xhat * gain.values + bias.values

    def backward(g):
        dxhat = g * gain.values
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes) if axes else g * xhat
        dbias = g.sum(axis=axes) if axes else g
        return (dx, dgain, dbias)

    def forward():
        mu2 = x.values.mean(axis=-1, keepdims=True)
        inv2 = 1.0 / np.sqrt(x.values.var(axis=-1, keepdims=True) + eps)
        return (x.values - mu2) * inv2 * gain.values + bias.values

    return _emit("layer-norm-last-dim", vals, (x, gain, bias), backward, forward)


# ---------------------------------------------------------------------------
# convolutions (zero "same" padding keeps the sequence length)


def conv1d_same(x, w, b) -> Tensor:
    """Temporal convolution over axis -2; channels live on the last axis.

    x: (..., T, Cin), w: (K, Cin, Cout) with K odd, b: (Cout,).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.values.ndim != 3 or w.shape[0] % 2 == 0:
        raise ShapeMismatch(f"temporal-conv1d: weight {w.shape} must be (odd K, Cin, Cout)")
    k, cin, cout = w.shape
    if x.values.ndim < 2 or x.shape[-1] != cin:
        raise ShapeMismatch(f"temporal-conv1d: input {x.shape} does not match Cin={cin}")
    if b.shape != (cout,):
        raise ShapeMismatch(f"temporal-conv1d: bias {b.shape} must be ({cout},)")
    t = x.shape[-2]
    pad = k // 2

    def run(xv):
        pads = [(0, 0)] * (xv.ndim - 2) + [(pad, pad), (0, 0)]
        xp = np.pad(xv, pads)
        out = np.zeros(xv.shape[:-1] + (cout,))
        for i in range(k):
            out += xp[..., i:i + t, :] @ w.values[i]
        return out + b.values

    vals = run(x.values)

    def backward(g):
        pads = [(0, 0)] * (x.values.ndim - 2) + [(pad, pad), (0, 0)]
        xp = np.pad(x.values, pads)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.values)
        g_flat = g.reshape(-1, cout)
        for i in range(k):
            gxp[..., i:i + t, :] += g @ w.values[i].T
            gw[i] = xp[..., i:i + t, :].reshape(-1, cin).T @ g_flat
        gx = np.ascontiguousarray(gxp[..., pad:pad + t, :])
        gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gw, gb)

    return _emit("temporal-conv1d", vals, (x, w, b), backward, lambda: run(x.values))


def conv2d_same(x, w, b) -> Tensor:
    """Single-channel 2-d convolution over the trailing (T, D) plane.

    x: (..., T, D), w: (Kt, Kd, Cout) with odd kernel extents, b: (Cout,).
    Output: (..., T, D, Cout).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.values.ndim != 3 or w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
        raise ShapeMismatch(f"conv2d: weight {w.shape} must be (odd Kt, odd Kd, Cout)")
    kt, kd, cout = w.shape
    if x.values.ndim < 2:
        raise ShapeMismatch(f"conv2d: input {x.shape} needs a (T, D) plane")
    if b.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias {b.shape} must be ({cout},)")
    t, d = x.shape[-2], x.shape[-1]
    pt, pd = kt // 2, kd // 2

    def run(xv):
        pads = [(0, 0)] * (xv.ndim - 2) + [(pt, pt), (pd, pd)]
        xp = np.pad(xv, pads)
        out = np.zeros(xv.shape + (cout,))
        for i in range(kt):
            for j in range(kd):
                out += xp[..., i:i + t, j:j + d, None] * w.values[i, j]
        return out + b.values

    vals = run(x.values)

    def backward(g):
        pads = [(0, 0)] * (x.values.ndim - 2) + [(pt, pt), (pd, pd)]
        xp = np.pad(x.values, pads)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.values)
        g_flat = g.reshape(-1, cout)
        for i in range(kt):
            for j in range(kd):
                gxp[..., i:i + t, j:j + d] += g @ w.values[i, j]
                gw[i, j] = xp[..., i:i + t, j:j + d].reshape(-1) @ g_flat
        gx = np.ascontiguousarray(gxp[..., pt:pt + t, pd:pd + d])
        gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gw, gb)

    return _emit("conv2d", vals, (x, w, b), backward, lambda: run(x.values))


# ---------------------------------------------------------------------------
# kind dispatch

KINDS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul-by-scalar": mul_scalar,
    "elementwise-mul": mul,
    "relu": relu,
    "tanh": tanh,
    "softmax-last-dim": softmax_last,
    "log-softmax-last-dim": log_softmax_last,
    "layer-norm-last-dim": layer_norm_last,
    "temporal-conv1d": conv1d_same,
    "concat-last-dim": concat_last,
    "slice": slice_axis,
    "mean": mean_op,
    "sum": sum_op,
    "square": square,
    # structural kinds the transformer blocks need beyond the basic set
    "bias-add": bias_add,
    "transpose": transpose,
    "transpose-last-two": transpose_last_two,
    "reshape": reshape,
    "conv2d": conv2d_same,
}


def forward_op(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch by op-kind name (the registry of every differentiable kind)."""
    try:
        fn = KINDS[kind]
    except KeyError:
        raise TensorError(f"unknown op kind '{kind}'") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Registry of named parameter tensors with per-group trainability.

    Group is the dotted-name prefix, e.g. ``encoder.layers.0.attn.wq`` lives
    in group ``encoder``. A frozen group's tensors drop out of the tape and
    the optimizer skips them entirely.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter '{name}' registered twice")
        group = self.group_of(name)
        trainable = self._trainable.setdefault(group, True)
        tensor.grad_enabled = trainable
        self._params[name] = tensor
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def groups(self) -> list[str]:
        return sorted(self._trainable)

    def is_trainable(self, group: str) -> bool:
        return self._trainable[group]

    def set_trainable(self, group: str, flag: bool) -> None:
        if group not in self._trainable:
            raise KeyError(f"unknown parameter group '{group}'")
        self._trainable[group] = flag
        for name, t in self._params.items():
            if self.group_of(name) == group:
                t.grad_enabled = flag

    def set_trainable_groups(self, groups: Iterable[str]) -> None:
        wanted = set(groups)
        for g in self.groups():
            self.set_trainable(g, g in wanted)

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if self._trainable[self.group_of(n)]]

    def parameter_count(self, group: str | None = None) -> int:
        return sum(
            t.size for n, t in self._params.items()
            if group is None or self.group_of(n) == group
        )

    def group_digest(self, group: str) -> str:
        """SHA-256 over name-sorted raw bytes; bitwise freeze evidence."""
        h = hashlib.sha256()
        for name in self.names():
            if self.group_of(name) == group:
                h.update(name.encode())
                h.update(self._params[name].values.tobytes())
        return h.hexdigest()


def backward(loss: Tensor, store: ParameterStore) -> dict[str, Tensor]:
    """Gradient map for every trainable parameter; zeros where unreachable."""
    if loss.node is None:
        raise TensorError("loss was not produced on an active tape")
    grads = loss.node.tape.backward(loss)
    out = {}
    for name in store.trainable_names():
        t = store[name]
        g = grads.get(id(t))
        out[name] = Tensor(np.zeros_like(t.values) if g is None else g)
    return out


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between tape gradients of ``f`` and central differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    A non-finite evaluation anywhere reports as +inf.
    """
    probe = Tensor(x.values.copy(), grad_enabled=True)
    with Tape() as tape:
        y = f(probe)
    if y.shape != ():
        raise ShapeMismatch(f"finite_diff_check needs a scalar function, got {y.shape}")
    analytic = tape.grad(y, [probe])[0]

    flat = probe.values.reshape(-1)
    numeric = np.zeros_like(flat)
    work = flat.copy()
    for i in range(flat.size):
        orig = work[i]
        work[i] = orig + step
        hi = f(Tensor(work.reshape(x.shape).copy())).item()
        work[i] = orig - step
        lo = f(Tensor(work.reshape(x.shape).copy())).item()
        work[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            return float("inf")
        numeric[i] = (hi - lo) / (2.0 * step)
    if not np.all(np.isfinite(analytic)):
        return float("inf")
    denom = np.maximum(1.0, np.abs(analytic.reshape(-1)))
    err = np.abs(analytic.reshape(-1) - numeric) / denom
    return float(err.max()) if err.size else 0.0


def finite_diff_check_param(loss_fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> float:
    """Like finite_diff_check but for a registered parameter the closed-over
    ``loss_fn`` already reads; the numeric probe mutates it in place."""
    if not param.grad_enabled:
        raise TensorError("finite_diff_check_param needs a grad-enabled parameter")
    with Tape() as tape:
        y = loss_fn()
    if y.shape != ():
        raise ShapeMismatch(f"finite_diff_check_param needs a scalar loss, got {y.shape}")
    analytic = tape.grad(y, [param])[0].reshape(-1)

    flat = param.values.reshape(-1)  # contiguous view: writes hit the parameter
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn().item()
        flat[i] = orig - step
        lo = loss_fn().item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            return float("inf")
        numeric[i] = (hi - lo) / (2.0 * step)
    if not np.all(np.isfinite(analytic)):
        return float("inf")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
