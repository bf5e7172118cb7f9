"""
Reverse-mode automatic differentiation over float64 numpy arrays.

Operations performed while a `Tape` is active, on at least one tensor that
requires gradients, are recorded in order. `grad` walks that record backwards
once, so the tape is rebuilt on every training step (define-by-run).
"""

import contextlib
import json
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NumericsError

ArrayLike = Union[np.ndarray, float, int, Sequence]


@dataclass
class _Node:
    tape: "Tape"
    index: int
    out: "Tensor"
    parents: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: List[_Node] = []

    def record(self, out, parents, backward) -> _Node:
        node = _Node(self, len(self.nodes), out, tuple(parents), backward)
        self.nodes.append(node)
        return node

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().pop()
        return False

    def __len__(self):
        return len(self.nodes)


# Tape stack and sampling mode are per thread: a training step runs on one
# thread, and steps on other threads never see its tape.
_local = threading.local()


def _tapes() -> List[Tape]:
    if not hasattr(_local, 'tapes'):
        _local.tapes = []
    return _local.tapes


def _sampling_frozen() -> bool:
    return getattr(_local, 'frozen', False)


def active_tape() -> Optional[Tape]:
    tapes = _tapes()
    return tapes[-1] if tapes else None


@contextlib.contextmanager
def no_tape():
    """Evaluate without recording (inference, stop-gradient targets)."""
    tapes = _tapes()
    saved = list(tapes)
    tapes.clear()
    try:
        yield
    finally:
        tapes.extend(saved)


@contextlib.contextmanager
def frozen_sampling():
    """Categorical samples become constants with no gradient path."""
    previous = _sampling_frozen()
    _local.frozen = True
    try:
        yield
    finally:
        _local.frozen = previous


class Tensor:
    """Dense float64 array that can take part in a gradient tape."""

    __slots__ = ('data', 'requires_grad', 'tape_node', 'name')
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape_node: Optional[_Node] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.tape_node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # reductions and shape
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.tape_node = tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data ** exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def matmul(a, b) -> Tensor:
    """(..., n) @ (n, m) -> (..., m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


# elementwise unary ops

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _result(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def clip(a, low: float = -np.inf, high: float = np.inf) -> Tensor:
    """Clamp; gradient passes only where the input lies inside [low, high]."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _result(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


# reductions and shape ops

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _result(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# categorical machinery

def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_vjp(probs: np.ndarray, g: np.ndarray) -> np.ndarray:
    return probs * (g - (g * probs).sum(axis=-1, keepdims=True))


def softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    probs = _softmax(logits.data)
    return _result(probs, (logits,), lambda g: (_softmax_vjp(probs, g),))


def log_softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    out = x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _result(out, (logits,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def one_hot(indices: np.ndarray, classes: int) -> np.ndarray:
    return np.eye(classes, dtype=np.float64)[indices]


def _straight_through(logits: Tensor, indices: np.ndarray) -> Tensor:
    hard = one_hot(indices, logits.shape[-1])
    if _sampling_frozen():
        return Tensor(hard)
    probs = _softmax(logits.data)
    return _result(hard, (logits,), lambda g: (_softmax_vjp(probs, g),))


def categorical_sample_st(logits, rng: "Rng") -> Tensor:
    """One-hot sample per row; backward routes gradients through softmax(logits)."""
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("categorical_sample_st received non-finite logits")
    return _straight_through(logits, rng.categorical(_softmax(logits.data)))


def categorical_mode_st(logits) -> Tensor:
    """Argmax one-hot with the same straight-through backward."""
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("categorical_mode_st received non-finite logits")
    return _straight_through(logits, logits.data.argmax(axis=-1))


def kl_categorical(p_logits, q_logits) -> Tensor:
    """KL(p || q) over the last axis, evaluated in log space."""
    p_logits, q_logits = as_tensor(p_logits), as_tensor(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ValueError(f"kl_categorical shape mismatch: {p_logits.shape} vs {q_logits.shape}")
    log_p = log_softmax(p_logits)
    log_q = log_softmax(q_logits)
    return (exp(log_p) * (log_p - log_q)).sum(axis=-1)


def l2_norm(u, axis: int = -1, keepdims: bool = False) -> Tensor:
    return sqrt((as_tensor(u) * u).sum(axis=axis, keepdims=keepdims))


def normalize(u, axis: int = -1) -> Tensor:
    u = as_tensor(u)
    if np.any(np.linalg.norm(u.data, axis=axis) == 0.0):
        raise ValueError("cannot normalize a zero vector")
    return u / l2_norm(u, axis=axis, keepdims=True)


def cosine_similarity(u, v, axis: int = -1) -> Tensor:
    """dot(u, v) / (|u| |v|) along `axis`, clamped to [-1, 1]."""
    u, v = as_tensor(u), as_tensor(v)
    if np.any(np.linalg.norm(u.data, axis=axis) == 0.0) or np.any(np.linalg.norm(v.data, axis=axis) == 0.0):
        raise ValueError("cosine_similarity is undefined for zero-norm inputs")
    raw = (u * v).sum(axis=axis) / (l2_norm(u, axis) * l2_norm(v, axis))
    return clip(raw, -1.0, 1.0)


def gru_cell(x, h, params) -> Tensor:
    """
    Standard GRU update. `params` exposes ``wx`` (Din, 3Dh), ``wh_gates`` (Dh, 2Dh),
    ``wh_cand`` (Dh, Dh) and ``bias`` (3Dh,) laid out as [reset | update | candidate].
    h' = (1 - z) * h + z * n
    """
    x, h = as_tensor(x), as_tensor(h)
    dh = params.wh_cand.shape[0]
    if x.shape[-1] != params.wx.shape[0]:
        raise ValueError(f"gru_cell input width {x.shape[-1]} != {params.wx.shape[0]}")
    if h.shape[-1] != dh or x.shape[:-1] != h.shape[:-1]:
        raise ValueError(f"gru_cell hidden shape {h.shape} inconsistent with input {x.shape}")

    xw = x @ params.wx + params.bias
    hw = h @ params.wh_gates
    r = sigmoid(xw[..., :dh] + hw[..., :dh])
    z = sigmoid(xw[..., dh:2 * dh] + hw[..., dh:])
    n = tanh(xw[..., 2 * dh:] + (r * h) @ params.wh_cand)
    return (1.0 - z) * h + z * n


# gradients

def grad(loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """dLoss/dParam for every param; params off the loss's ancestry get zeros."""
    if loss.data.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    for p in params:
        if not p.is_leaf:
            raise ValueError(f"grad target {p!r} is not a leaf tensor")
    if loss.tape_node is None:
        return [np.zeros_like(p.data) for p in params]

    tape = loss.tape_node.tape
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[:loss.tape_node.index + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg, dtype=np.float64), parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return [grads.get(id(p), np.zeros_like(p.data)).reshape(p.shape) for p in params]


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      max_entries: Optional[int] = None, seed: int = 0) -> float:
    """
    Worst relative error between grad(f) and central differences.
    `f` re-evaluates the loss from the current parameter values; `max_entries`
    checks a fixed random subset of each parameter's entries.
    """
    with Tape():
        loss = f()
        analytic = grad(loss, params)

    picker = np.random.Generator(np.random.Philox(seed))
    worst = 0.0
    for p, g in zip(params, analytic):
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = picker.choice(flat.size, size=max_entries, replace=False)
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            with no_tape():
                f_plus = f().item()
            flat[i] = original - eps
            with no_tape():
                f_minus = f().item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = g.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-4)
            worst = max(worst, err)
    return worst


# random streams

class Rng:
    """Counter-based (Philox) stream; `Rng(seed, *keys)` derives independent substreams."""

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        entropy = [self.seed, *self.keys] if self.keys else self.seed
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size) * scale

    def integers(self, low: int, high: Optional[int] = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def categorical(self, probs: np.ndarray) -> np.ndarray:
        """Inverse-CDF draw of one index per row of `probs` (last axis)."""
        u = self._gen.uniform(size=probs.shape[:-1])
        cdf = np.cumsum(probs, axis=-1)
        idx = (u[..., None] > cdf).sum(axis=-1)
        return np.minimum(idx, probs.shape[-1] - 1)

    def get_state(self) -> str:
        return json.dumps(self._gen.bit_generator.state, default=_encode_array, sort_keys=True)

    def set_state(self, text: str):
        self._gen.bit_generator.state = json.loads(text, object_hook=_decode_array)


def _encode_array(obj):
    if isinstance(obj, np.ndarray):
        return {'__ndarray__': [int(v) for v in obj.reshape(-1)], 'dtype': str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    raise TypeError(f"cannot serialise {type(obj)}")


def _decode_array(obj):
    if '__ndarray__' in obj:
        return np.array(obj['__ndarray__'], dtype=obj['dtype'])
    return obj


# optimizer

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState,
              clip_norm: Optional[float] = None) -> Tuple[Dict[str, Tensor], AdamState, float]:
    """
    Bias-corrected Adam on named parameters, after optional global-norm clipping.
    Returns the params, the state and the pre-clip gradient norm.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"Non-finite gradient for parameter '{name}'")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter '{name}' shape {params[name].shape}")

    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        g = g * scale
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[name].data = params[name].data - update
    return params, state, norm


def optimize(loss: Tensor, params: Dict[str, Tensor], state: AdamState,
             clip_norm: Optional[float] = None) -> float:
    """grad + adam_step for one named parameter group; returns the gradient norm."""
    names = list(params)
    grads = grad(loss, [params[n] for n in names])
    _, _, norm = adam_step(params, dict(zip(names, grads)), state, clip_norm)
    return norm
