"""
Minimal dense-tensor arithmetic with a reverse-mode gradient tape.

Tensors are immutable numpy-backed values. Primitives applied while a Tape is
active (and while at least one input requires grad) are appended to the tape;
Tape.backward walks the records in exact reverse order and accumulates
gradients additively.
"""
import contextlib
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.error_handler import NonFiniteError, NumericsError

logger = logging.getLogger(__name__)

_DTYPE_STACK: List[type] = [np.float32]
_TAPE_STACK: List["Tape"] = []
_NO_GRAD_DEPTH = [0]


def current_dtype():
    return _DTYPE_STACK[-1]


@contextlib.contextmanager
def float64_shadow():
    """Compute and store every primitive in float64 while active (gradient checks)"""
    _DTYPE_STACK.append(np.float64)
    try:
        yield
    finally:
        _DTYPE_STACK.pop()


@contextlib.contextmanager
def no_grad():
    """Suspend tape recording"""
    _NO_GRAD_DEPTH[0] += 1
    try:
        yield
    finally:
        _NO_GRAD_DEPTH[0] -= 1


class Tensor:
    """Immutable dense tensor"""
    __slots__ = ('data', 'requires_grad', 'name', '__weakref__')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=current_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr = arr.copy()
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise NumericsError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


class _Record:
    __slots__ = ('output', 'inputs', 'backward_fn', 'op')

    def __init__(self, output, inputs, backward_fn, op):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of primitive applications"""

    def __init__(self):
        self.records: List[_Record] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor, leaves: Sequence[Tensor]) -> List[np.ndarray]:
        """
        d(loss)/d(leaf) for every leaf, in the order given. Leaves the loss does
        not depend on receive zero gradient.
        """
        if not self.records:
            raise NumericsError("backward called before any recorded forward", error_code="NUMERICS_ERROR")
        if loss.size != 1:
            raise NumericsError(f"loss must be scalar, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data, dtype=np.float64)}
        for record in reversed(self.records):
            g_out = grads.get(id(record.output))
            if g_out is None:
                continue
            input_grads = record.backward_fn(g_out)
            for tensor, g in zip(record.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                if g.shape != tensor.shape:
                    raise NumericsError(
                        f"gradient shape {g.shape} != input shape {tensor.shape} in {record.op}")
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = np.asarray(g, dtype=np.float64)

        out = []
        for leaf in leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros(leaf.shape, dtype=np.float64)
            out.append(g.astype(leaf.data.dtype))
        return out


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite output from {op}", details={'op': op})
    return arr


def custom_op(value: np.ndarray, inputs: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
              op: str) -> Tensor:
    """
    Wrap a forward value and its vector-Jacobian product as a tape primitive
    """
    value = _finite(np.asarray(value, dtype=current_dtype()), op)
    requires_grad = _NO_GRAD_DEPTH[0] == 0 and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=requires_grad)
    if requires_grad and _TAPE_STACK:
        _TAPE_STACK[-1].records.append(_Record(out, tuple(inputs), backward_fn, op))
    return out


def _check_bias_shape(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return False
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise NumericsError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_bias(g: np.ndarray, bias_shape) -> np.ndarray:
    return g.reshape(-1, bias_shape[0]).sum(axis=0)


# ===========================
# FORWARD PRIMITIVES
# ===========================

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may be a last-axis bias vector"""
    a, b = as_tensor(a), as_tensor(b)
    bias = _check_bias_shape(a, b, "add")
    value = a.data + b.data

    def backward(g):
        return g, (_reduce_bias(g, b.shape) if bias else g)
    return custom_op(value, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _check_bias_shape(a, b, "sub")
    value = a.data - b.data

    def backward(g):
        return g, -(_reduce_bias(g, b.shape) if bias else g)
    return custom_op(value, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; b may be a last-axis vector"""
    a, b = as_tensor(a), as_tensor(b)
    bias = _check_bias_shape(a, b, "mul")
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)
    value = a64 * b64

    def backward(g):
        ga = g * b64
        gb = g * a64
        return ga, (_reduce_bias(gb, b.shape) if bias else gb)
    return custom_op(value, (a, b), backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    value = x.data.astype(np.float64) * factor

    def backward(g):
        return (g * factor,)
    return custom_op(value, (x,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Batched matrix product with float64 accumulation. b is either 2-D (shared
    across a's leading axes) or has the same leading axes as a.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise NumericsError(f"matmul: batch mismatch {a.shape} @ {b.shape}")
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)
    value = np.matmul(a64, b64)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b64, -1, -2))
        if b64.ndim == 2:
            gb = a64.reshape(-1, a64.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a64, -1, -2), g)
        return ga, gb
    return custom_op(value, (a, b), backward, "matmul")


def gelu(x: Tensor) -> Tensor:
    """tanh approximation"""
    x = as_tensor(x)
    x64 = x.data.astype(np.float64)
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x64 + 0.044715 * x64 ** 3)
    t = np.tanh(inner)
    value = 0.5 * x64 * (1.0 + t)

    def backward(g):
        d_inner = c * (1.0 + 3 * 0.044715 * x64 ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x64 * (1.0 - t ** 2) * d_inner
        return (g * d,)
    return custom_op(value, (x,), backward, "gelu")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data.astype(np.float64))

    def backward(g):
        return (g * (1.0 - t ** 2),)
    return custom_op(t, (x,), backward, "tanh")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    x64 = x.data.astype(np.float64)
    shifted = x64 - x64.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)
    return custom_op(s, (x,), backward, "softmax")


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part)"""
    if eps <= 0:
        raise NumericsError(f"layer_norm eps must be > 0, got {eps}")
    x = as_tensor(x)
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - y * gy_mean),)
    return custom_op(y, (x,), backward, "layer_norm")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of (pred - target)^2"""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise NumericsError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    n = diff.size
    value = np.array([(diff ** 2).sum() / n])

    def backward(g):
        gd = g.reshape(-1)[0] * 2.0 * diff / n
        return gd, -gd
    return custom_op(value, (pred, target), backward, "mse_loss")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        value = x.data.reshape(shape)
    except ValueError as e:
        raise NumericsError(f"reshape: {e}")
    original = x.shape

    def backward(g):
        return (g.reshape(original),)
    return custom_op(value, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    value = np.transpose(x.data, axes)

    def backward(g):
        return (np.transpose(g, inverse),)
    return custom_op(value, (x,), backward, "transpose")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; the gradient scatters into zeros"""
    x = as_tensor(x)
    axis = axis % x.data.ndim
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise NumericsError(f"narrow: [{start}, {start + length}) outside axis of size {x.shape[axis]}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    if length == x.shape[axis]:
        value = x.data
    else:
        value = x.data[index]

    def backward(g):
        full = np.zeros(x.shape, dtype=np.float64)
        full[index] = g
        return (full,)
    return custom_op(value, (x,), backward, "narrow")


def mean(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.data.ndim
    n = x.shape[axis]
    value = x.data.astype(np.float64).mean(axis=axis)

    def backward(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)
    return custom_op(value, (x,), backward, "mean")


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    value = np.array([x.data.astype(np.float64).sum()])

    def backward(g):
        return (np.full(x.shape, g.reshape(-1)[0], dtype=np.float64),)
    return custom_op(value, (x,), backward, "sum_all")


# ===========================
# OPTIMIZER
# ===========================

class Adam:
    """
    Adam with float32 moment buffers (checkpointable bit-exactly); the update
    itself is evaluated in float64
    """

    def __init__(self, lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise NumericsError(f"learning rate must be > 0, got {lr}")
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        self.t += 1
        updated = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            if name not in self.m:
                self.m[name] = np.zeros(p.shape, dtype=np.float32)
                self.v[name] = np.zeros(p.shape, dtype=np.float32)
            new_p, self.m[name], self.v[name] = sgd_adam_step(
                p, g, self.m[name], self.v[name], self.t, self.lr, self.betas, self.eps)
            updated[name] = new_p
        return updated

    def state_dict(self) -> Dict:
        return {'t': self.t, 'lr': self.lr, 'betas': list(self.betas), 'eps': self.eps}

    def load_state_dict(self, state: Dict, m: Dict[str, np.ndarray], v: Dict[str, np.ndarray]):
        self.t = int(state['t'])
        self.lr = float(state['lr'])
        self.betas = tuple(state['betas'])
        self.eps = float(state['eps'])
        self.m = {k: np.asarray(a, dtype=np.float32) for k, a in m.items()}
        self.v = {k: np.asarray(a, dtype=np.float32) for k, a in v.items()}


def sgd_adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                  lr: float, betas: Tuple[float, float] = (0.9, 0.999),
                  eps: float = 1e-8) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update; returns (param, m, v)"""
    if lr <= 0:
        raise NumericsError(f"learning rate must be > 0, got {lr}")
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise NumericsError(f"adam: shape mismatch param {param.shape} grad {grad.shape}")
    b1, b2 = betas
    g = grad.astype(np.float64)
    m_new = b1 * m.astype(np.float64) + (1.0 - b1) * g
    v_new = b2 * v.astype(np.float64) + (1.0 - b2) * g * g
    m_hat = m_new / (1.0 - b1 ** t)
    v_hat = v_new / (1.0 - b2 ** t)
    p_new = param.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return (_finite(p_new, "adam").astype(param.dtype),
            m_new.astype(m.dtype), v_new.astype(v.dtype))
