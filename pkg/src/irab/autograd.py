"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only what the counting models need is here: pointwise arithmetic, 2-D
convolution (stride, zero padding, dilation), 2x2 max pooling, ReLU,
softmax over the channel axis, reductions and gathers. Layout is NCHW,
row-major. Broadcasting is limited to scalars.
"""
from __future__ import annotations

import itertools
import weakref
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import NumericError, ShapeError

Scalar = Union[int, float]

_seq = itertools.count()
_tapes: list["Tape"] = []
_grad_enabled = [True]


class Tensor:
    """A float64 array that can take part in differentiation.

    ``grad`` is filled by :func:`backward` for leaf tensors created with
    ``requires_grad=True``. Intermediate results keep no gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("seq", "name", "inputs", "backward_fn", "out")

    def __init__(self, name, inputs, backward_fn, out):
        self.seq = next(_seq)
        self.name = name
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.out = weakref.ref(out)


class Tape:
    """Records every differentiable op executed while the tape is active.

    >>> with Tape() as tape:
    ...     y = relu(x)
    >>> tape.op_names()
    ['relu']

    When ``record_patterns`` is set, ops with a non-smooth point also store
    their activation pattern (ReLU masks, pooling argmax, clamp masks). Two
    evaluations with equal patterns lie on the same smooth piece.
    """

    def __init__(self, record_patterns: bool = False):
        self.nodes: list[_Node] = []
        self.record_patterns = record_patterns
        self.patterns: list[bytes] = []

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def op_names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def count(self, name: str) -> int:
        return len([n for n in self.nodes if n.name == name])

    def backward(self, loss: Tensor) -> None:
        backward(loss)


@contextmanager
def no_grad():
    """Evaluate ops without building graph nodes."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def _pattern(arr: np.ndarray) -> None:
    for tape in _tapes:
        if tape.record_patterns:
            tape.patterns.append(np.ascontiguousarray(arr).tobytes())


def _make(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    needs = _grad_enabled[-1] and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        node = _Node(name, tuple(inputs), backward_fn, out)
        out._node = node
        for tape in _tapes:
            tape.nodes.append(node)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- pointwise ---------------------------------------------------------------

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return _make("add", a.data + float(b), (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return _make("sub", a.data - float(b), (a,), lambda g: (g,))
    _check_same(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: Scalar) -> Tensor:
    s = float(s)
    return _make("scale", a.data * s, (a,), lambda g: (g * s,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(a, b)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _pattern(mask)
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log of ``max(x, floor)``; zero gradient where clamped."""
    keep = x.data > floor
    _pattern(keep)
    xd = x.data
    safe = np.where(keep, xd, floor)
    return _make("log", np.log(safe), (x,), lambda g: (np.where(keep, g / safe, 0.0),))


# -- reductions and indexing -------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def take(x: Tensor, flat_index) -> Tensor:
    """Gather entries of the flattened tensor; duplicates accumulate in backward."""
    idx = np.asarray(flat_index, dtype=np.intp)
    shape = x.shape

    def bw(g):
        out = np.zeros(int(np.prod(shape)))
        np.add.at(out, idx, g)
        return (out.reshape(shape),)

    return _make("take", x.data.reshape(-1)[idx], (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial window ``[top:top+height, left:left+width]`` of an NCHW tensor."""
    shape = x.shape
    if top < 0 or left < 0 or top + height > shape[2] or left + width > shape[3]:
        raise ShapeError(f"crop window outside {shape}")
    sl = (slice(None), slice(None), slice(top, top + height), slice(left, left + width))

    def bw(g):
        out = np.zeros(shape)
        out[sl] = g
        return (out,)

    return _make("crop", x.data[sl].copy(), (x,), bw)


# -- convolution and pooling --------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation of an NCHW input with OIKK weights, zero padded."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride={stride} padding={padding} dilation={dilation}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci} (weight {w.shape})")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(wd, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: nonpositive output size {ho}x{wo} for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((n, c, kh, kw, ho, wo))
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r, q = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, r:r + hspan:stride, q:q + wspan:stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    w2 = w.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                r, q = i * dilation, j * dilation
                gxp[:, :, r:r + hspan:stride, q:q + wspan:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make("conv2d", out, inputs, bw)


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2/stride-2 max pooling; ties route the gradient to the first element."""
    if window != 2 or stride != 2:
        raise ShapeError("max_pool2d supports window=2, stride=2 only")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d needs even spatial extents, got {h}x{w}")
    blocks = (x.data.reshape(n, c, h // 2, 2, w // 2, 2)
              .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4))
    arg = blocks.argmax(axis=-1)[..., None]
    _pattern(arg)
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg, g[..., None], axis=-1)
        return (gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape),)

    return _make("max_pool2d", out, (x,), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the channel axis of an NCHW tensor."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make("softmax", p, (x,), bw)


def channel_softmax(x: Tensor) -> Tensor:
    """Two-class posterior per pixel; channel 1 is P(foreground)."""
    if x.ndim != 4 or x.shape[1] != 2:
        raise ShapeError(f"channel_softmax expects 2 channels, got shape {x.shape}")
    return softmax(x)


# -- differentiation ----------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = (np.zeros_like(loss.data) if loss.grad is None else loss.grad) + 1.0
        return

    nodes: dict[int, _Node] = {}
    stack = [loss._node]
    while stack:
        node = stack.pop()
        if node.seq in nodes:
            continue
        nodes[node.seq] = node
        stack.extend(t._node for t in node.inputs if t._node is not None)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for seq in sorted(nodes, reverse=True):
        node = nodes[seq]
        out = node.out()
        g = grads.pop(id(out), None) if out is not None else None
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi


def check_finite(arrays: Iterable[np.ndarray], what: str = "tensor") -> None:
    for i, a in enumerate(arrays):
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {what} #{i}")


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               coords: Optional[Sequence[int]] = None, n_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between backward and central differences.

    The error at a coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``coords`` (flat indices) or ``n_coords`` restrict the check to a subset.
    A coordinate whose +/-eps perturbation changes any ReLU mask, pooling
    argmax or log clamp is straddling a kink; it is replaced by another
    randomly drawn coordinate when sampling, or skipped when ``coords`` is
    given explicitly.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    base = x.data.copy()
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape(record_patterns=True) as tape:
        loss = f(xt)
    ref_pattern = tape.patterns
    backward(loss)
    analytic = np.zeros(base.size) if xt.grad is None else xt.grad.reshape(-1)

    def evaluate(flat, delta):
        v = base.copy().reshape(-1)
        v[flat] += delta
        with no_grad(), Tape(record_patterns=True) as t:
            val = float(f(Tensor(v.reshape(base.shape))).data)
        return val, t.patterns == ref_pattern

    if coords is not None:
        todo, resample = list(coords), False
    elif n_coords is None or n_coords >= base.size:
        todo, resample = list(range(base.size)), False
    else:
        todo, resample = list(rng.choice(base.size, size=n_coords, replace=False)), True
    tried = set(todo)

    worst = 0.0
    while todo:
        flat = int(todo.pop())
        fp, okp = evaluate(flat, eps)
        fm, okm = evaluate(flat, -eps)
        if not (okp and okm):
            if resample and len(tried) < base.size:
                free = np.setdiff1d(np.arange(base.size), np.fromiter(tried, dtype=int))
                pick = int(rng.choice(free))
                tried.add(pick)
                todo.append(pick)
            continue
        numeric = (fp - fm) / (2 * eps)
        err = abs(analytic[flat] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
