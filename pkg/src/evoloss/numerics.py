"""Dense float64 arrays with a small reverse-mode tape.

Every forward pass records onto a fresh :class:`Tape`.  Parameters enter the
tape through :meth:`Tape.watch`, operations build :class:`Var` nodes, and
:func:`backward` walks the recording once in reverse to produce a
:class:`GradSet`.  A tape can only be differentiated once; rebuild it for the
next step.

Nothing here is clever.  The goal is a contract that is easy to check against
:func:`finite_diff_grad`.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping

import numpy as np

DTYPE = np.float64


class NumericsError(ValueError):
    """Bad numeric input: wrong shapes, non-finite values."""


class ShapeError(NumericsError):
    pass


class TapeError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# parameter containers


class ParamSet(dict):
    """Named float64 arrays for one network.

    Behaves like a dict, but once an entry exists its shape is frozen:
    assigning an array of a different shape raises :class:`ShapeError`.
    """

    def __setitem__(self, name, value):
        arr = np.asarray(value, dtype=DTYPE)
        if name in self and self[name].shape != arr.shape:
            raise ShapeError(
                f"parameter {name!r} has shape {self[name].shape}, got {arr.shape}"
            )
        super().__setitem__(name, arr)

    def __init__(self, items=None, **kw):
        super().__init__()
        for k, v in dict(items or {}, **kw).items():
            self[k] = v

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.items()})

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet({k: v for k, v in self.items() if k.startswith(prefix)})

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values()))


class GradSet(dict):
    """Gradients keyed and shaped like the owning :class:`ParamSet`."""

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "GradSet":
        return cls({k: np.zeros_like(v) for k, v in params.items()})

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(g))) for g in self.values() if g.size), default=0.0)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# tape


class Tape:
    """One forward recording.  Single-threaded; create one per step."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: dict[str, Var] = {}
        self.consumed = False

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, "Var"]:
        out = {}
        for name, value in params.items():
            if name not in self.leaves:
                self.leaves[name] = Var(value, self, requires_grad=True, name=name)
            out[name] = self.leaves[name]
        return out

    def constant(self, value) -> "Var":
        return Var(np.asarray(value, dtype=DTYPE), self, requires_grad=False)


class Var:
    __slots__ = ("value", "tape", "parents", "backward_fn", "requires_grad", "grad", "name")

    # make numpy defer to our operators (ndarray + Var -> Var.__radd__)
    __array_priority__ = 100.0

    def __init__(self, value, tape: Tape, parents=(), backward_fn=None,
                 requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, grad={self.requires_grad})"

    def __len__(self):
        return len(self.value)

    # operators -------------------------------------------------------------
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
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def lift(x, tape: Tape | None = None) -> Var:
    if isinstance(x, Var):
        return x
    if tape is None:
        tape = Tape()
    return tape.constant(x)


def _node(value, parents, backward_fn, check: bool = True) -> Var:
    # ``check=False`` is for ops that map finite inputs to finite outputs
    tape = parents[0].tape
    for p in parents[1:]:
        if p.tape is not tape:
            raise TapeError("operands were recorded on different tapes")
    req = any(p.requires_grad for p in parents)
    if check and not np.all(np.isfinite(value)):
        raise NumericsError("non-finite value produced during forward pass")
    v = Var(value, tape, parents if req else (), backward_fn if req else None, req)
    if req:
        tape.nodes.append(v)
    return v


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    tape = _tape_of(a, b) or Tape()
    return lift(a, tape), lift(b, tape)


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Var:
    a, b = _pair(a, b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = _pair(a, b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Var:
    a, b = _pair(a, b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def square(a: Var) -> Var:
    return _node(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return _node(a.value * mask, (a,), lambda g: (g * mask,), check=False)


def sigmoid(a: Var) -> Var:
    x = a.value
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), check=False)


def log(a: Var) -> Var:
    if np.any(a.value <= 0):
        raise NumericsError("log of a non-positive value")
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,))


def clip(a: Var, lo: float, hi: float) -> Var:
    inside = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,), check=False)


def norm(a: Var, axis=-1) -> Var:
    """Euclidean norm along ``axis``.  Subgradient 0 at the origin."""
    n = np.sqrt(np.sum(a.value * a.value, axis=axis))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * a.value,)

    return _node(n, (a,), bw)


def vsum(a: Var, axis=None, keepdims=False) -> Var:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), bw)


def vmean(a: Var, axis=None, keepdims=False) -> Var:
    count = a.value.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)])
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# structural


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), check=False)


def getitem(a: Var, index) -> Var:
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _node(a.value[index], (a,), bw, check=False)


def concat(parts: Iterable, axis=-1) -> Var:
    parts = list(parts)
    tape = _tape_of(*parts) or Tape()
    parts = [lift(p, tape) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), bw, check=False)


def take(a: Var, indices, axis=0) -> Var:
    """Gather along ``axis`` with an integer index array (duplicates allowed)."""
    indices = np.asarray(indices)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _node(np.take(a.value, indices, axis=axis), (a,), bw, check=False)


def stop_gradient(a) -> Var:
    """Same value, cut off from the recording."""
    if isinstance(a, Var):
        return a.tape.constant(a.value)
    return lift(a)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Var:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _node(av @ bv, (a, b), bw)


def affine_forward(layer: Mapping, x) -> Var:
    """``x @ W + b`` over the last axis of ``x``.

    ``layer`` holds ``"W"`` (in, out) and ``"b"`` (out,); entries may be
    arrays or watched :class:`Var` leaves.  Leading axes of ``x`` are treated
    as a batch.
    """
    W, b = layer["W"], layer["b"]
    tape = _tape_of(x, W, b) or Tape()
    x, W, b = lift(x, tape), lift(W, tape), lift(b, tape)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"input shape {x.shape} incompatible with weight shape {W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"bias shape {b.shape} incompatible with weight shape {W.shape}")
    lead = x.shape[:-1]
    flat = x if x.ndim == 2 else reshape(x, (-1, x.shape[-1]))
    y = add(matmul(flat, W), b)
    if x.ndim != 2:
        y = reshape(y, lead + (W.shape[1],))
    return y


def softmax_cross_entropy(logits: Var, labels) -> Var:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _node(np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# gradients


def backward(loss: Var, params: Mapping[str, np.ndarray] | None = None) -> GradSet:
    """Reverse sweep over ``loss.tape``.

    Returns gradients for every name in ``params`` (or every watched leaf when
    ``params`` is None).  Parameters the loss never touched get zeros.
    """
    if not isinstance(loss, Var):
        raise TypeError("backward needs a recorded Var")
    tape = loss.tape
    if tape.consumed:
        raise TapeError("this recording has already been differentiated")
    if loss.value.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    tape.consumed = True

    if loss.requires_grad:
        loss.grad = np.ones_like(loss.value)
        for node in reversed(tape.nodes):
            if node.grad is None:
                continue
            pgrads = node.backward_fn(node.grad)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                # out-of-place: several parents may share one gradient array
                parent.grad = pg if parent.grad is None else parent.grad + pg
            # free intermediate memory as we go
            node.grad = None

    names = params.keys() if params is not None else tape.leaves.keys()
    grads = GradSet()
    for name in names:
        leaf = tape.leaves.get(name)
        if leaf is None or leaf.grad is None:
            ref = params[name] if params is not None else leaf.value
            grads[name] = np.zeros(np.shape(ref), dtype=DTYPE)
        else:
            grads[name] = np.array(leaf.grad, dtype=DTYPE, copy=True)
    return grads


def finite_diff_grad(f: Callable[[ParamSet], float], params: Mapping[str, np.ndarray],
                     eps: float = 1e-5) -> GradSet:
    """Central-difference gradient of the scalar function ``f``.

    ``f`` receives a perturbed copy of ``params`` each call.  Cost is two
    evaluations per scalar parameter, so keep the problems small.
    """
    if eps <= 0:
        raise NumericsError("eps must be positive")
    work = ParamSet({k: np.array(v, dtype=DTYPE, copy=True) for k, v in params.items()})
    grads = GradSet()
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(work))
            flat[i] = orig - eps
            fm = float(f(work))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericsError(f"non-finite objective while perturbing {name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads[name] = g
    return grads


def max_relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    """Largest ``|a-b| / max(|a|, |b|, 1e-8)`` over all entries of both sets."""
    worst = 0.0
    for k in a:
        x, y = np.asarray(a[k]), np.asarray(b[k])
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), 1e-8)
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


# ---------------------------------------------------------------------------
# optimisation


def cosine_warmup_lr(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    step = min(max(step, 0), total_steps)
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    progress = (step - warmup_steps) / span if span > 0 else 1.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    """In-place ``p -= lr * g``; returns ``params`` for chaining."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                             f"parameter has {params[name].shape}")
    if lr == 0:
        return params
    for name, g in grads.items():
        params[name] -= lr * g
    return params


def clip_grad_norm(grads: GradSet, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# persistence


def save_params(path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    from .container import write_container

    write_container(path, {k: np.asarray(v, dtype=DTYPE) for k, v in params.items()},
                    header=meta or {}, kind="params")


def load_params(path) -> tuple[ParamSet, dict]:
    from .container import read_container

    header, entries = read_container(path, kind="params")
    return ParamSet(entries), header
