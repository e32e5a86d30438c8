"""Reverse-mode tape, differentiable primitives, seeded sampling, gradient checking.

Every primitive accepts either plain ``numpy`` arrays or :class:`Var` objects.
When at least one input is a ``Var`` bound to a :class:`Tape`, the primitive
records a backward rule on that tape; otherwise it is a plain numpy call.
That keeps the decode path tape-free while training shares the same code.

All values are float64 and 2-D (rows x cols). Bias rows (1 x cols) broadcast
over the batch dimension and their gradients are reduced accordingly.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from sne.errors import DeterminismError, NonFiniteError, ParameterError, ShapeError

ACTIVATIONS = ("identity", "sigmoid", "tanh")


class Tape:
    """Ordered record of primitive applications.

    Single owner: do not share a tape between threads. Data-parallel callers
    build one tape per worker and sum the resulting gradients themselves.
    """

    def __init__(self):
        self.records: list[tuple[Var, tuple, Callable]] = []

    def watch(self, value) -> "Var":
        return Var(np.asarray(value, dtype=np.float64), self)

    def gradient(self, out: "Var", wrt: Mapping[str, "Var"]) -> dict[str, np.ndarray]:
        """Backpropagate from the scalar ``out``; the tape itself is left untouched."""
        if not isinstance(out, Var) or out.tape is not self:
            raise ValueError("output was not produced on this tape")
        if out.value.size != 1:
            raise ShapeError(f"gradient needs a scalar output, got shape {out.value.shape}")
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.value)}
        for node, inputs, backward in reversed(self.records):
            g = grads.get(id(node))
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not isinstance(inp, Var):
                    continue
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
        return {
            name: np.array(grads.get(id(v), np.zeros_like(v.value)), dtype=np.float64)
            for name, v in wrt.items()
        }


class Var:
    __slots__ = ("value", "tape")
    __array_priority__ = 100  # make ndarray <op> Var dispatch to Var

    def __init__(self, value: np.ndarray, tape: Tape | None):
        self.value = value
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(inputs: Iterable) -> Tape | None:
    for x in inputs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def _emit(out: np.ndarray, inputs: tuple, backward: Callable):
    tape = _tape_of(inputs)
    if tape is None:
        return out
    node = Var(out, tape)
    tape.records.append((node, inputs, backward))
    return node


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit(av + bv, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit(av - bv, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def square(x):
    xv = value_of(x)
    return _emit(xv * xv, (x,), lambda g: (2.0 * xv * g,))


def transpose(x):
    xv = value_of(x)
    return _emit(xv.T, (x,), lambda g: (g.T,))


def getitem(x, idx):
    xv = value_of(x)
    out = xv[idx]

    def backward(g):
        full = np.zeros_like(xv)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(out, (x,), backward)


def concat(xs: Sequence, axis: int = 1):
    vals = [value_of(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit(np.concatenate(vals, axis=axis), tuple(xs), backward)


def activation(x, kind: str):
    if kind not in ACTIVATIONS:
        raise ParameterError(f"unknown activation {kind!r}")
    xv = value_of(x)
    if not np.isfinite(xv).all():
        raise NonFiniteError(f"non-finite input to {kind}")
    if kind == "identity":
        return _emit(xv.copy(), (x,), lambda g: (g,))
    if kind == "sigmoid":
        s = expit(xv)
        return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))
    t = np.tanh(xv)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),))


def sigmoid(x):
    return activation(x, "sigmoid")


def tanh(x):
    return activation(x, "tanh")


def binarize(x, surrogate: float = 1.0):
    """Straight-through binarizer: 1 where x >= 0.5 else 0.

    The backward pass multiplies the upstream gradient by ``surrogate``
    (1.0 is the identity straight-through estimator; 0.0 cuts the path,
    which is what a finite-difference check of the piecewise-constant
    forward sees).
    """
    xv = value_of(x)
    out = (xv >= 0.5).astype(np.float64)
    return _emit(out, (x,), lambda g: (g * surrogate,))


def minimum(a, b):
    av, bv = value_of(a), value_of(b)
    pick_a = av <= bv
    return _emit(np.minimum(av, bv), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), av.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), bv.shape)))


def row_norm(x):
    """Euclidean norm of every row, shape (rows, 1). Subgradient 0 at the origin."""
    xv = value_of(x)
    n = np.sqrt(np.sum(xv * xv, axis=1, keepdims=True))
    safe = np.where(n > 0.0, n, 1.0)
    return _emit(n, (x,), lambda g: (np.where(n > 0.0, g * xv / safe, 0.0),))


def sum_all(x):
    xv = value_of(x)
    return _emit(np.sum(xv).reshape(1, 1), (x,), lambda g: (np.broadcast_to(g, xv.shape).copy(),))


def mean_all(x):
    return mul(sum_all(x), 1.0 / value_of(x).size)


# ---------------------------------------------------------------------------
# random sampling
# ---------------------------------------------------------------------------


class RngStream:
    """Seeded PCG64 stream; ``purpose`` separates independent streams under one seed."""

    def __init__(self, seed: int, purpose: int = 0):
        self.seed = int(seed)
        self.purpose = int(purpose)
        self.counter = 0
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.purpose,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def normal(self, shape) -> np.ndarray:
        out = self._gen.standard_normal(shape)
        self.counter += out.size
        return out

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        out = self._gen.uniform(low, high, shape)
        self.counter += out.size
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.permutation(n)


def sample_gaussian(rng: RngStream, mu: float, sigma2: float, shape) -> np.ndarray:
    if sigma2 < 0:
        raise ParameterError(f"variance must be non-negative, got {sigma2}")
    if sigma2 == 0:
        return np.full(shape, float(mu))
    return mu + np.sqrt(sigma2) * rng.normal(shape)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def _scalar(out) -> float:
    v = value_of(out)
    if v.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {v.shape}")
    return float(v.reshape(-1)[0])


def tape_gradients(loss_fn, params: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    watched = {k: tape.watch(v) for k, v in params.items()}
    out = loss_fn(watched)
    if not isinstance(out, Var):
        # loss independent of every parameter
        return _scalar(out), {k: np.zeros_like(v) for k, v in params.items()}
    return _scalar(out), tape.gradient(out, watched)


def gradient_errors(loss_fn, params: Mapping[str, np.ndarray], epsilon: float = 1e-6,
                    names: Iterable[str] | None = None) -> dict[str, float]:
    """Worst per-tensor relative error between tape and central-difference gradients."""
    if not 1e-7 <= epsilon <= 1e-4:
        raise ParameterError(f"epsilon must lie in [1e-7, 1e-4], got {epsilon}")
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    first, second = _scalar(loss_fn(params)), _scalar(loss_fn(params))
    if first != second:
        raise DeterminismError(f"loss_fn returned {first!r} then {second!r} for identical input")
    _, analytic = tape_gradients(loss_fn, params)
    errors = {}
    for name in (names if names is not None else params):
        base = params[name]
        worst = 0.0
        for idx in np.ndindex(base.shape):
            probe = dict(params)
            bumped = base.copy()
            bumped[idx] = base[idx] + epsilon
            probe[name] = bumped
            f_plus = _scalar(loss_fn(probe))
            bumped = base.copy()
            bumped[idx] = base[idx] - epsilon
            probe[name] = bumped
            f_minus = _scalar(loss_fn(probe))
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            exact = analytic[name][idx]
            denom = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / denom)
        errors[name] = worst
    return errors


def finite_diff_check(loss_fn, params: Mapping[str, np.ndarray], epsilon: float = 1e-6,
                      names: Iterable[str] | None = None) -> float:
    """Max relative error over every coordinate of ``params``.

    ``loss_fn(params)`` must return a scalar and be deterministic; it is
    called once with ``Var`` parameters on a fresh tape and repeatedly
    with perturbed plain arrays.
    """
    errors = gradient_errors(loss_fn, params, epsilon, names)
    return max(errors.values()) if errors else 0.0
