"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a ``Tensor`` wraps a numpy array and, when
produced by one of the primitives below, carries a closure that routes the
upstream gradient to its parents.  ``backward`` walks the graph in reverse
topological order and accumulates gradients with ``+=``, which is what makes
weight sharing across the two recurrent steps come out right.

Tensors are treated as immutable once they participate in a graph; leaf data
may be mutated between graphs (that is how the optimizer updates parameters).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NumericError, ShapeError

# Test hook: op name -> factor applied to the upstream gradient before it is
# routed to the op's parents. Used to prove the gradient checker catches a
# wrong backward rule.
_BACKWARD_SCALE: dict[str, float] = {}


class Tensor:
    """Dense float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple["Tensor", ...] = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Operator sugar; every overload maps onto one of the named primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data) -> Tensor:
    """A leaf tensor that receives gradients."""
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _add_grad(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


@dataclass
class Graph:
    """Topologically ordered view of the tensors reachable from a root.

    Every tensor's parents appear before the tensor itself.
    """

    nodes: list[Tensor]

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``loss`` must be a scalar (shape ``()``). Returns the graph that was
    walked, mainly so tests can inspect the topological order.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_root(loss)
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(graph.nodes):
        if node._backward is None or node.grad is None:
            continue
        g = node.grad
        scale = _BACKWARD_SCALE.get(node.op)
        if scale is not None:
            g = g * scale
        node._backward(g)
    return graph


@contextmanager
def scaled_backward(op: str, scale: float) -> Iterator[None]:
    """Test hook: corrupts the gradient an op sends to its parents."""
    _BACKWARD_SCALE[op] = scale
    try:
        yield
    finally:
        del _BACKWARD_SCALE[op]


# ---------------------------------------------------------------------------
# Elementwise primitives


def _scalar_reduce(g: np.ndarray, target_shape: tuple[int, ...]) -> np.ndarray:
    # A scalar operand broadcast over the other operand collects the sum.
    if target_shape == ():
        return np.sum(g)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not "
                     "identical and neither operand is a scalar")


def add(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _check_broadcast(x, y, "add")
    out = Tensor(x.data + y.data, op="add", parents=(x, y))

    def _bw(g):
        _add_grad(x, _scalar_reduce(g, x.shape))
        _add_grad(y, _scalar_reduce(g, y.shape))

    out._backward = _bw
    return out


def sub(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _check_broadcast(x, y, "sub")
    out = Tensor(x.data - y.data, op="sub", parents=(x, y))

    def _bw(g):
        _add_grad(x, _scalar_reduce(g, x.shape))
        _add_grad(y, _scalar_reduce(-g, y.shape))

    out._backward = _bw
    return out


def mul(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _check_broadcast(x, y, "mul")
    out = Tensor(x.data * y.data, op="mul", parents=(x, y))

    def _bw(g):
        _add_grad(x, _scalar_reduce(g * y.data, x.shape))
        _add_grad(y, _scalar_reduce(g * x.data, y.shape))

    out._backward = _bw
    return out


def div(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _check_broadcast(x, y, "div")
    out = Tensor(x.data / y.data, op="div", parents=(x, y))

    def _bw(g):
        _add_grad(x, _scalar_reduce(g / y.data, x.shape))
        _add_grad(y, _scalar_reduce(-g * x.data / (y.data * y.data), y.shape))

    out._backward = _bw
    return out


def binary(kind: str, x, y) -> Tensor:
    """Dispatch by name; kinds: add, sub, mul."""
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ValueError(f"unknown binary kind {kind!r}") from None
    return fn(x, y)


# ---------------------------------------------------------------------------
# Nonlinearities


def sigmoid(x: Tensor) -> Tensor:
    # Piecewise form avoids exp overflow on large |x|.
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(y, op="sigmoid", parents=(x,))

    def _bw(g):
        _add_grad(x, g * y * (1.0 - y))

    out._backward = _bw
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, op="tanh", parents=(x,))

    def _bw(g):
        _add_grad(x, g * (1.0 - y * y))

    out._backward = _bw
    return out


def softplus(x: Tensor) -> Tensor:
    # max(x, 0) + log(1 + exp(-|x|)): identical to log(1 + exp(x)) without
    # overflow, and strictly positive for every representable input.
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    out = Tensor(y, op="softplus", parents=(x,))

    def _bw(g):
        e = np.exp(-np.abs(x.data))
        s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        _add_grad(x, g * s)

    out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    out = Tensor(y, op="relu", parents=(x,))

    def _bw(g):
        _add_grad(x, g * (x.data > 0))

    out._backward = _bw
    return out


def unary(kind: str, x: Tensor) -> Tensor:
    """Dispatch by name; kinds: sigmoid, tanh, softplus, relu."""
    try:
        fn = {"sigmoid": sigmoid, "tanh": tanh, "softplus": softplus, "relu": relu}[kind]
    except KeyError:
        raise ValueError(f"unknown unary kind {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# Linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports (m,k)@(k,n) and the matrix-vector case (m,k)@(k,)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul: unsupported ranks for shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, op="matmul", parents=(a, b))

    if b.data.ndim == 2:
        def _bw(g):
            _add_grad(a, g @ b.data.T)
            _add_grad(b, a.data.T @ g)
    else:
        def _bw(g):
            _add_grad(a, np.outer(g, b.data))
            _add_grad(b, a.data.T @ g)

    out._backward = _bw
    return out


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.sum(x.data), op="sum", parents=(x,))

    def _bw(g):
        _add_grad(x, np.full_like(x.data, g))

    out._backward = _bw
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape), op="reshape", parents=(x,))

    def _bw(g):
        _add_grad(x, g.reshape(x.shape))

    out._backward = _bw
    return out


def scale_rows(x: Tensor, a: Tensor) -> Tensor:
    """Multiply row i of x (m,d) by scalar a[i]; the attention weighting step."""
    if x.data.ndim != 2 or a.data.ndim != 1 or x.shape[0] != a.shape[0]:
        raise ShapeError(f"scale_rows: shapes {x.shape} and {a.shape} do not align")
    out = Tensor(x.data * a.data[:, None], op="scale_rows", parents=(x, a))

    def _bw(g):
        _add_grad(x, g * a.data[:, None])
        _add_grad(a, np.sum(g * x.data, axis=1))

    out._backward = _bw
    return out


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over all leading axes, keeping the channel axis.

    For an activation map of shape (h, w, d) this is the image embedding:
    out[c] = (1/(h*w)) * sum_ij x[i,j,c]. Also accepts (m, d) stacks of
    descriptors, which is how the attention embedding is aggregated.
    """
    if x.data.ndim < 2:
        raise ShapeError(f"global_average_pool needs at least 2 axes, got shape {x.shape}")
    if x.data.size == 0:
        raise ShapeError(f"global_average_pool on empty tensor of shape {x.shape}")
    d = x.shape[-1]
    m = x.data.size // d
    out = Tensor(x.data.reshape(m, d).mean(axis=0), op="gap", parents=(x,))

    def _bw(g):
        _add_grad(x, np.broadcast_to(g / m, (m, d)).reshape(x.shape).copy())

    out._backward = _bw
    return out


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Cross entropy of softmax(logits) against a hard label, in nats.

    Computed through the max-shifted log-sum-exp so confident logits cannot
    overflow: loss = log sum_j exp(z_j - z_max) - (z_label - z_max).
    """
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy needs a logit vector, got shape {logits.shape}")
    n = logits.shape[0]
    label = int(label)
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} classes")
    z = logits.data
    zmax = np.max(z)
    ez = np.exp(z - zmax)
    lse = np.log(np.sum(ez))
    out = Tensor(lse - (z[label] - zmax), op="cross_entropy", parents=(logits,))

    def _bw(g):
        p = ez / np.sum(ez)
        p[label] -= 1.0
        _add_grad(logits, g * p)

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Convolution-stack primitives


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid 2-D convolution of x (H,W,Cin) with kernel (kh,kw,Cin,Cout)."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: need (H,W,C) input and (kh,kw,Cin,Cout) kernel, "
                         f"got {x.shape} and {kernel.shape}")
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {kcin} "
                         f"(shapes {x.shape}, {kernel.shape})")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if h < kh or w < kw or oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {kernel.shape} "
                         f"at stride {stride}")

    cols = np.empty((oh, ow, kh, kw, cin))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = x.data[i:i + oh * stride:stride, j:j + ow * stride:stride, :]
    flat = cols.reshape(oh * ow, kh * kw * cin)
    y = (flat @ kernel.data.reshape(-1, cout) + bias.data).reshape(oh, ow, cout)
    out = Tensor(y, op="conv2d", parents=(x, kernel, bias))

    def _bw(g):
        gf = g.reshape(oh * ow, cout)
        _add_grad(kernel, (flat.T @ gf).reshape(kernel.shape))
        _add_grad(bias, gf.sum(axis=0))
        if x.requires_grad:
            dcols = (gf @ kernel.data.reshape(-1, cout).T).reshape(oh, ow, kh, kw, cin)
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[i:i + oh * stride:stride, j:j + ow * stride:stride, :] += dcols[:, :, i, j, :]
            _add_grad(x, dx)

    out._backward = _bw
    return out


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; a partial window at the edge is kept.

    Ties route the gradient to the first element of the window, so the
    backward pass is deterministic.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"max_pool2 needs an (H,W,C) tensor, got shape {x.shape}")
    h, w, c = x.shape
    oh, ow = (h + 1) // 2, (w + 1) // 2
    padded = np.full((oh * 2, ow * 2, c), -np.inf)
    padded[:h, :w, :] = x.data
    windows = padded.reshape(oh, 2, ow, 2, c).transpose(0, 2, 4, 1, 3).reshape(oh, ow, c, 4)
    idx = windows.argmax(axis=3)
    y = np.take_along_axis(windows, idx[..., None], axis=3)[..., 0]
    out = Tensor(y, op="max_pool2", parents=(x,))

    def _bw(g):
        dwin = np.zeros((oh, ow, c, 4))
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=3)
        dpad = dwin.reshape(oh, ow, c, 2, 2).transpose(0, 3, 1, 4, 2).reshape(oh * 2, ow * 2, c)
        _add_grad(x, dpad[:h, :w, :])

    out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Gradient checking


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def grad_check_groups(f: Callable[[], Tensor], named_params: dict[str, Tensor],
                      step: float = 1e-5) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients,
    reported per parameter group.

    Relative error per coordinate is |analytic - numeric| divided by
    max(1e-8, |analytic| + |numeric|). Roundoff in the difference quotient
    (~|f| * eps / step) can dominate coordinates whose true derivative is
    tiny, so a coordinate that looks bad at the base step is re-measured at
    10x and 100x the step and the best-conditioned estimate is kept; a wrong
    backward rule stays wrong at every step and is still reported.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    params = list(named_params.values())
    zero_grads(params)
    loss = f()
    if not np.isfinite(loss.data):
        raise NumericError("gradient check: loss is not finite")
    backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in named_params.items()}

    def rel_err(flat, i, a, h, name):
        saved = flat[i]
        flat[i] = saved + h
        f_plus = f().item()
        flat[i] = saved - h
        f_minus = f().item()
        flat[i] = saved
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"gradient check: non-finite loss while perturbing {name}")
        numeric = (f_plus - f_minus) / (2.0 * h)
        return abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))

    errors: dict[str, float] = {}
    for name, p in named_params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            a = analytic[name].reshape(-1)[i]
            err = rel_err(flat, i, a, step, name)
            if err > 1e-5:
                for h in (10.0 * step, 100.0 * step):
                    err = min(err, rel_err(flat, i, a, h, name))
                    if err <= 1e-5:
                        break
            worst = max(worst, err)
        errors[name] = worst
    zero_grads(params)
    return errors


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               step: float = 1e-5) -> float:
    """Max relative error over all coordinates of all parameters."""
    named = {f"p{i}": p for i, p in enumerate(params)}
    errors = grad_check_groups(f, named, step=step)
    return max(errors.values()) if errors else 0.0
