"""Small float64 tensor type with a dynamic reverse-mode tape.

Only what an MLP needs: matmul, bias add, elementwise arithmetic, SiLU and
squared-error reductions.  Shapes are limited to ``(batch, feature)``
matrices, ``(feature,)`` bias vectors and scalars.
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "Rng",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "silu",
    "square",
    "sum",
    "mean",
    "mse",
    "gauss",
    "grad_check",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: Sequence["Tensor"] = (), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def backward(self, retain: Sequence["Tensor"] = ()) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf on the tape.

        ``self`` must be a scalar.  Each node is visited exactly once, in
        reverse topological order.  Intermediate nodes listed in ``retain``
        also keep their gradient.
        """
        keep = {id(r) for r in retain}
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if id(node) in keep:
                node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return out


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    data = _check(data, op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, op, parents, backward)
    return Tensor(data, False, op)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _node(A @ B, "matmul", (a, b), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    if len(shape) == 0 or shape == (1,):
        return np.asarray(g.sum()).reshape(shape)
    raise ValueError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    ok = (a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]) or b.data.size == 1
    if not ok:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    """``a + b``; ``b`` may be a ``(feature,)`` bias row."""
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "mul")
    A, B = a.data, b.data

    def backward(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _node(A * B, "mul", (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _node(a.data * c, "scale", (a,), backward)


def silu(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))

    def backward(g):
        return (g * sig * (1.0 + x * (1.0 - sig)),)

    return _node(x * sig, "silu", (a,), backward)


def square(a) -> Tensor:
    a = _wrap(a)
    x = a.data

    def backward(g):
        return (2.0 * g * x,)

    return _node(x * x, "square", (a,), backward)


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _wrap(a)
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum()), "sum", (a,), backward)


def mean(a) -> Tensor:
    a = _wrap(a)
    shape, n = a.shape, a.data.size

    def backward(g):
        return (np.full(shape, float(g) / n),)

    return _node(np.asarray(a.data.mean()), "mean", (a,), backward)


def mse(pred, target, weight=None) -> Tensor:
    """Mean over all elements of ``weight * (pred - target)**2``.

    ``weight`` is a constant array broadcastable to ``pred`` (e.g. a
    ``(batch, 1)`` per-sample mask).  Where the weight is zero the gradient
    is exactly zero.
    """
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    w = None if weight is None else np.asarray(weight, dtype=np.float64)
    wdiff = diff if w is None else w * diff

    def backward(g):
        gd = (2.0 * float(g) / n) * wdiff
        return gd, -gd

    return _node(np.asarray((wdiff * diff).sum() / n), "mse", (pred, target), backward)


class Rng:
    """Seeded generator with independent substreams keyed by purpose.

    ``Rng(7).stream("noise")`` always yields the same sequence and is not
    affected by how much any other stream has been consumed.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    @staticmethod
    def _key(purpose: str) -> int:
        return zlib.crc32(purpose.encode("utf-8"))

    def _make(self, purpose: str, seed: int) -> np.random.Generator:
        ss = np.random.SeedSequence(seed, spawn_key=(self._key(purpose),))
        return np.random.Generator(np.random.PCG64(ss))

    def stream(self, purpose: str) -> np.random.Generator:
        gen = self._streams.get(purpose)
        if gen is None:
            gen = self._streams[purpose] = self._make(purpose, self.seed)
        return gen

    def reseed(self, purpose: str, seed: int) -> np.random.Generator:
        """Restart one substream from a new seed, leaving the others alone."""
        gen = self._streams[purpose] = self._make(purpose, int(seed))
        return gen

    def get_state(self) -> dict:
        return {"seed": self.seed,
                "streams": {k: g.bit_generator.state for k, g in sorted(self._streams.items())}}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"])
        for purpose, st in state["streams"].items():
            gen = rng.stream(purpose)
            gen.bit_generator.state = st
        return rng


def gauss(gen: np.random.Generator, shape) -> Tensor:
    """Standard normal draws as a constant tensor."""
    return Tensor(gen.standard_normal(shape))


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-6) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` re-evaluates the graph from the current values of ``params`` and
    returns a scalar tensor.  The error for one coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError("h must lie in [1e-7, 1e-4]")
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]))
                worst = max(worst, err)
    return worst
