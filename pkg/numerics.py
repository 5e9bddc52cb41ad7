"""
Dense-tensor arithmetic with reverse-mode differentiation.

A Tensor wraps a numpy array. Every primitive below records its parents and a
backward closure; Tensor.backward() walks the recorded graph once in reverse
topological order. This catalog is everything the embedding, attention and
model modules are allowed to build on:

    matmul, add, mul, relu, softmax, layer_norm, batch_norm, pointwise_conv,
    mean, concat, slicing (Tensor.__getitem__), dropout, cross_entropy

grad_check() compares analytic gradients with central finite differences.
"""

from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np


LAYER_NORM_EPS = 1e-6
BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1

DTYPES = {"float32": np.float32, "float64": np.float64}


class ShapeError(ValueError):
    """Operand shapes do not fit the operation."""


class NonFiniteError(ValueError):
    """An operation produced NaN or Inf."""


def resolve_dtype(name: Union[str, np.dtype, type]) -> np.dtype:
    if isinstance(name, str):
        if name not in DTYPES:
            raise ValueError(f"Unsupported dtype '{name}', expected one of {sorted(DTYPES)}")
        return np.dtype(DTYPES[name])
    return np.dtype(name)


class Tensor:
    """A value in the differentiation graph."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = "leaf"

    # ---- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    # ---- gradient plumbing --------------------------------------------
    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g.astype(self.data.dtype, copy=False)

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError(f"backward: output must be a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _topological_order(root: Tensor) -> List[Tensor]:
    # iterative DFS; graphs get deep enough to hit the recursion limit
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward: Callable[[np.ndarray], None]) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b, op: str) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor):
        a = as_tensor(a, like=b)
    else:
        a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", backward)


def matmul(a, b, transpose_b: bool = False) -> Tensor:
    """Batched matrix product over the last two axes; `b` may be transposed."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need at least 2 dims, got {a.shape} and {b.shape}")
    b_mat = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if a.shape[-1] != b_mat.shape[-2]:
        shown = f"{b.shape} (transposed)" if transpose_b else f"{b.shape}"
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {shown}")
    try:
        out = np.matmul(a.data, b_mat)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b_mat, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b_mat.ndim == 2:
                k, n = b_mat.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b_mat.shape)
            b._accumulate(np.swapaxes(gb, -1, -2) if transpose_b else gb)

    return _result(out, (a, b), "matmul", backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu", backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _result(s, (x,), "softmax", backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the affine parameters."""
    x = as_tensor(x)
    gamma, beta = as_tensor(gamma, like=x), as_tensor(beta, like=x)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match input {x.shape}")
    width = x.shape[-1]
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g):
        if x.requires_grad:
            gx = g * gamma.data
            gx = inv_std / width * (width * gx - gx.sum(axis=-1, keepdims=True)
                                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
            x._accumulate(gx)
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm", backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool,
               momentum: float = BATCH_NORM_MOMENTUM, eps: float = BATCH_NORM_EPS) -> Tensor:
    """
    Batch normalization over every axis except the last (channel) axis.

    Training mode normalizes with batch statistics and updates the running
    buffers in place (EMA with `momentum`, unbiased variance). Inference mode
    normalizes with the running buffers.
    """
    x = as_tensor(x)
    gamma, beta = as_tensor(gamma, like=x), as_tensor(beta, like=x)
    channels = x.shape[-1]
    if gamma.shape != (channels,) or running_mean.shape != (channels,) or running_var.shape != (channels,):
        raise ShapeError(f"batch_norm: parameter shapes {gamma.shape}/{running_mean.shape} "
                         f"do not match channel axis of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased
    else:
        mean = running_mean
        var = running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.astype(x.dtype)) * inv_std

    def backward(g):
        if x.requires_grad:
            gx = g * gamma.data
            if training:
                gx = inv_std / count * (count * gx - gx.sum(axis=axes)
                                        - xhat * (gx * xhat).sum(axis=axes))
            else:
                gx = gx * inv_std
            x._accumulate(gx)
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), "batch_norm", backward)


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1x1 convolution over the trailing channel axis: (..., C_in) -> (..., C_out)."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"pointwise_conv: input {x.shape} does not fit weight {weight.shape} / bias {bias.shape}")
    return add(matmul(x, weight), bias)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g / count, x.shape))

    return _result(np.asarray(out, dtype=x.dtype), (x,), "mean", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} disagree off axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _result(out, tensors, "concat", backward)


def take(x: Tensor, index) -> Tensor:
    """Basic slicing (ints, slices, Ellipsis)."""
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError as e:
        raise ShapeError(f"slice: index {index!r} invalid for shape {x.shape}: {e}") from None

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        x._accumulate(full)

    return _result(np.array(out, copy=True), (x,), "slice", backward)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout: training mode requires a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean categorical cross-entropy over a (B, K) batch of logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} do not match labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"cross_entropy: labels outside [0, {logits.shape[1]})")
    batch = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(batch), labels].mean()

    def backward(g):
        grad = np.exp(log_p)
        grad[np.arange(batch), labels] -= 1.0
        logits._accumulate(grad * (g / batch))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", backward)


CORE_OPS: Dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "batch_norm": batch_norm,
    "pointwise_conv": pointwise_conv,
    "mean": mean,
    "concat": concat,
    "slice": take,
    "dropout": dropout,
    "cross_entropy": cross_entropy,
}


def core_op_set() -> Dict[str, Callable]:
    """The complete differentiable catalog."""
    return dict(CORE_OPS)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

Point = Union[np.ndarray, Mapping[str, np.ndarray]]


def grad_check(fn: Callable, point: Point, step: float = 1e-6) -> float:
    """
    Max relative error between analytic and central-difference gradients.

    `point` is either one float64 array (fn receives one Tensor) or a mapping of
    name -> float64 array (fn receives a dict of Tensors). `fn` must return a
    scalar Tensor.
    """
    if not 1e-6 <= step <= 1e-4:
        raise ValueError(f"grad_check: step must lie in [1e-6, 1e-4], got {step}")
    single = isinstance(point, np.ndarray)
    arrays: Dict[str, np.ndarray] = {"x": point} if single else dict(point)
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise ValueError(f"grad_check: '{name}' must be float64, got {arr.dtype}")

    def call(values: Dict[str, np.ndarray], track: bool):
        tensors = {k: Tensor(v.copy(), requires_grad=track) for k, v in values.items()}
        out = fn(tensors["x"] if single else tensors)
        if out.data.size != 1:
            raise ShapeError(f"grad_check: function must return a scalar, got {out.shape}")
        if not np.isfinite(out.data).all():
            raise NonFiniteError("grad_check: function value is not finite")
        return out, tensors

    out, tensors = call(arrays, track=True)
    out.backward()
    worst = 0.0
    for name, base in arrays.items():
        analytic = tensors[name].grad
        flat = base.reshape(-1)
        for i in range(flat.size):
            shifted = dict(arrays)
            plus = flat.copy()
            plus[i] += step
            shifted[name] = plus.reshape(base.shape)
            f_plus = call(shifted, track=False)[0].item()
            minus = flat.copy()
            minus[i] -= step
            shifted[name] = minus.reshape(base.shape)
            f_minus = call(shifted, track=False)[0].item()
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------------------
# Named parameters
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, int], dtype) -> np.ndarray:
    fan_in, fan_out = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ParameterStore:
    """
    Named parameter tensors plus non-trainable buffers.

    Frozen tensors (the fixed positional table) live beside the trainable ones
    but are never touched by the optimizer. Buffers hold batch-norm running
    statistics.
    """

    def __init__(self, dtype="float32"):
        self.dtype = resolve_dtype(dtype)
        self.tensors: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.frozen = set()

    def add(self, name: str, array: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"Parameter '{name}' already exists")
        tensor = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=trainable, name=name)
        self.tensors[name] = tensor
        if not trainable:
            self.frozen.add(name)
        return tensor

    def add_buffer(self, name: str, array: np.ndarray) -> None:
        self.buffers[name] = np.asarray(array, dtype=self.dtype).copy()

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"Unknown parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def buffer(self, name: str) -> np.ndarray:
        try:
            return self.buffers[name]
        except KeyError:
            raise KeyError(f"Unknown buffer '{name}'") from None

    def names(self) -> List[str]:
        return list(self.tensors)

    def trainable_names(self) -> List[str]:
        return [n for n in self.tensors if n not in self.frozen]

    def zero_grad(self) -> None:
        for name in self.trainable_names():
            self.tensors[name].zero_grad()

    def num_parameters(self, trainable_only: bool = True) -> int:
        names = self.trainable_names() if trainable_only else self.names()
        return int(sum(self.tensors[n].data.size for n in names))

    def grads(self) -> Dict[str, np.ndarray]:
        return {n: self.tensors[n].grad for n in self.trainable_names()}

    def copy(self) -> "ParameterStore":
        clone = ParameterStore(self.dtype)
        for name, tensor in self.tensors.items():
            clone.add(name, tensor.data.copy(), trainable=name not in self.frozen)
        for name, buf in self.buffers.items():
            clone.add_buffer(name, buf)
        return clone

    def with_tensors(self, replacements: Mapping[str, Tensor]) -> "ParameterStore":
        """Shallow copy with some tensors swapped (buffers are shared)."""
        clone = ParameterStore(self.dtype)
        clone.tensors = dict(self.tensors)
        clone.tensors.update(replacements)
        clone.buffers = self.buffers
        clone.frozen = set(self.frozen)
        return clone

    def astype(self, dtype) -> "ParameterStore":
        clone = ParameterStore(dtype)
        for name, tensor in self.tensors.items():
            clone.add(name, tensor.data, trainable=name not in self.frozen)
        for name, buf in self.buffers.items():
            clone.add_buffer(name, buf)
        return clone
