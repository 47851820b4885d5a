"""Tape-based reverse-mode differentiation over a small, fixed set of array ops.

Every op takes :class:`Tensor` (or plain array/scalar) arguments.  When at
least one argument lives on a :class:`Tape`, the op is recorded there together
with its vector-Jacobian product; otherwise it is evaluated eagerly and the
result is an untracked constant.  All values are float64.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Tape",
    "AdamState",
    "adam_step",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "einsum",
    "conv2d",
    "leaky_relu",
    "sigmoid",
    "softmax",
    "clamp",
    "absolute",
    "sum",
    "mean",
    "l1_norm",
    "squared_l2",
    "color_transform",
    "resample",
    "reshape",
    "transpose",
    "getitem",
]


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or infinity shows up in a tensor."""


def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


class Tensor:
    """An n-dimensional float64 array, optionally tracked on a tape.

    The tape is held weakly: the tape owns its recorded tensors, and a tensor
    that outlives its tape behaves as an untracked constant.
    """

    __slots__ = ("data", "_tape", "requires_grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, tape: "Tape | None" = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = _finite(arr, "tensor construction")
        # a strong reference would make tape -> node -> tensor -> tape a cycle,
        # which pins whole graphs until a full garbage collection
        self._tape = None if tape is None else weakref.ref(tape)
        self.requires_grad = requires_grad

    @property
    def tape(self) -> "Tape | None":
        return None if self._tape is None else self._tape()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: object


class Tape:
    """Ordered record of primitive ops, replayed backwards by :meth:`backward`.

    A tape is a single-threaded unit of work; independent tapes share nothing.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, values) -> Tensor:
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True, tape=self)
        self.leaves.append(t)
        return t

    def _record(self, op: str, inputs: tuple, out: Tensor, vjp) -> None:
        self.nodes.append(_Node(op, inputs, out, vjp))

    def backward(self, output: Tensor, seed=None) -> dict:
        """Accumulate gradients of ``output`` into every variable of this tape.

        Returns a dict mapping each variable tensor to its gradient array.
        ``seed`` defaults to ones (the usual choice for a scalar loss).
        """
        if output.tape is not self or not self.nodes:
            raise RuntimeError("tape not populated for this output")
        g0 = np.ones(output.shape) if seed is None else np.asarray(
            seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
        if g0.shape != output.shape:
            raise ValueError(f"seed shape {g0.shape} != output shape {output.shape}")
        grads = {id(output): g0}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not isinstance(t, Tensor) or t.tape is not self:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = {}
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            out[leaf] = np.zeros(leaf.shape) if g is None else _finite(g, "gradient")
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs) -> "Tape | None":
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("tensors from different tapes cannot be combined")
            tape = x.tape
    return tape


def _emit(op: str, inputs: tuple, data: np.ndarray, vjp) -> Tensor:
    data = _finite(np.asarray(data, dtype=np.float64), f"output of {op}")
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, tape=tape)
    tape._record(op, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return _emit("leaky_relu", (x,), x.data * factor, lambda g: (g * factor,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Saturate to [lo, hi]; the gradient is zero wherever the value was clipped."""
    if lo > hi:
        raise ValueError("clamp bounds out of order")
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clamp", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    s = np.sign(x.data)
    return _emit("abs", (x,), np.abs(x.data), lambda g: (g * s,))


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), y, vjp)


# --- reductions -----------------------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), out, vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def l1_norm(x) -> Tensor:
    return sum(absolute(x))


def squared_l2(x) -> Tensor:
    x = _as_tensor(x)
    return _emit("squared_l2", (x,), np.sum(x.data * x.data), lambda g: (2.0 * g * x.data,))


# --- linear maps ------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    A = a.data[None, :] if a.ndim == 1 else a.data
    B = b.data[:, None] if b.ndim == 1 else b.data
    out = np.matmul(A, B)
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]

    def vjp(g):
        G = g
        if a.ndim == 1:
            G = np.expand_dims(G, -2)
        if b.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = np.matmul(G, np.swapaxes(B, -1, -2))
        gb = np.matmul(np.swapaxes(A, -1, -2), G)
        ga = _unbroadcast(ga, A.shape).reshape(a.shape)
        gb = _unbroadcast(gb, B.shape).reshape(b.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum with explicit output, e.g. ``"jl,jld->ld"``.

    Every index of an operand must also appear in the other operand or the
    output (no operand-private summation) so the adjoint is itself an einsum.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb + out_sub), (sb, sa + out_sub)):
        if any(c not in other for c in s):
            raise ValueError(f"unsupported einsum {subscripts!r}")
    out = np.einsum(subscripts, a.data, b.data)
    return _emit("einsum", (a, b), out, lambda g: (
        np.einsum(f"{out_sub},{sb}->{sa}", g, b.data),
        np.einsum(f"{out_sub},{sa}->{sb}", g, a.data),
    ))


def color_transform(x, matrix) -> Tensor:
    """Apply a fixed linear map over the trailing (channel) axis: ``y = x @ M.T``."""
    m = np.asarray(matrix, dtype=np.float64)
    x = _as_tensor(x)
    if x.shape[-1] != m.shape[1]:
        raise ValueError(f"channel count {x.shape[-1]} does not match transform {m.shape}")
    return _emit("color_transform", (x,), x.data @ m.T, lambda g: (g @ m,))


def resample(x, rows, cols) -> Tensor:
    """Fixed separable spatial map on ``(..., H, W, C)``: ``Y = R X C^T`` per channel.

    Blurs, area downsampling and nearest upsampling are all expressed as a
    pair of such matrices.
    """
    R = np.asarray(rows, dtype=np.float64)
    Cm = np.asarray(cols, dtype=np.float64)
    x = _as_tensor(x)
    *lead, H, W, C = x.shape
    if R.shape[1] != H or Cm.shape[1] != W:
        raise ValueError(f"resample matrices {R.shape}, {Cm.shape} do not fit image {H}x{W}")

    def apply(arr, R, Cm):
        *lead, h, w, c = arr.shape
        t = np.matmul(R, arr.reshape(*lead, h, w * c)).reshape(*lead, R.shape[0], w, c)
        return np.matmul(Cm, t)

    out = apply(x.data, R, Cm)
    return _emit("resample", (x,), out, lambda g: (apply(g, R.T, Cm.T),))


def _im2col(a: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """``(N, H, W, C)`` to zero-padded patches ``(N*H*W, kh*kw*C)``."""
    n, h, w, c = a.shape
    ap = np.pad(a, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    out = np.empty((n, h, w, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            out[:, :, :, i, j, :] = ap[:, i:i + h, j:j + w, :]
    return out.reshape(n * h * w, kh * kw * c)


def conv2d(x, kernel, bias=None) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) with zero padding.

    ``x`` is ``(N, H, W, Cin)``, ``kernel`` is ``(kh, kw, Cin, Cout)`` with odd
    spatial size.  Kernel and bias may be constants (fixed-kernel filtering)
    or tracked.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    kh, kw, ci, co = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d needs odd kernel sizes")
    if x.ndim != 4 or x.shape[-1] != ci:
        raise ValueError(f"conv2d input {x.shape} incompatible with kernel {kernel.shape}")
    cols = _im2col(x.data, kh, kw)
    kflat = kernel.data.reshape(kh * kw * ci, co)
    out = (cols @ kflat).reshape(x.shape[:3] + (co,))

    def vjp(g):
        gflat = g.reshape(-1, co)
        gx = gk = None
        if x.tape is not None:
            # adjoint of a 'same' correlation: correlate with the flipped, transposed kernel
            kadj = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * co, ci)
            gx = (_im2col(g, kh, kw) @ kadj).reshape(x.shape)
        if kernel.tape is not None:
            gk = (cols.T @ gflat).reshape(kernel.shape)
        return gx, gk

    y = _emit("conv2d", (x, kernel), out, vjp)
    return y if bias is None else add(y, bias)


# --- shape plumbing ---------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    inv = np.argsort(axes)
    return _emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def getitem(x, key) -> Tensor:
    x = _as_tensor(x)

    def vjp(g):
        out = np.zeros(x.shape)
        np.add.at(out, key, g)
        return (out,)

    return _emit("getitem", (x,), x.data[key], vjp)


# --- optimizer --------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments for a list of parameter arrays."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params, grads, lr: float | None = None) -> list[np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays.

    ``lr`` overrides ``state.lr`` for this step (learning-rate schedules).
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        _finite(g, "Adam gradient")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif [m.shape for m in state.m] != [p.shape for p in params]:
        raise ValueError("parameter shapes changed between Adam steps")
    state.step += 1
    lr = state.lr if lr is None else lr
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        out.append(p - lr * mhat / (np.sqrt(vhat) + state.eps))
    return out
