"""Numerical core: float64 primitives with paired backward passes, the
parameter store, Adam, the epoch learning-rate decay, a finite-difference
gradient checker and a portable counter-based RNG.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 (row-major).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import DimensionError, DomainError, EvaluationError, StateError, ValidationError

# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    z = np.asarray(x, dtype=np.uint64) + _GAMMA
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class RngStream:
    """Counter-based generator: draw ``i`` is ``splitmix64(key + i * GAMMA)``.

    ``key`` is ``splitmix64(seed)``. Because every draw is a pure function of
    (seed, counter) the sequence is identical on every platform and numpy
    version, and blocks of draws vectorize.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)
        self._key = splitmix64(np.array([self.seed], dtype=np.uint64))[0]

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return splitmix64(self._key + idx * _GAMMA)

    def spawn(self, index: int) -> "RngStream":
        """Independent child stream keyed on (seed, index)."""
        with np.errstate(over="ignore"):
            child = splitmix64(np.array([self.seed ^ ((int(index) * 0xD1B54A32D192ED03) & _MASK64)],
                                        dtype=np.uint64))[0]
        return RngStream(int(child))

    def uniform(self, size=None) -> np.ndarray:
        """Uniform floats in [0, 1) with 53 random bits."""
        n = 1 if size is None else int(np.prod(size))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return u[0] if size is None else u.reshape(size)

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        m = (n + 1) // 2
        r = self._raw(2 * m) >> np.uint64(11)
        u1 = (r[:m].astype(np.float64) + 1.0) * 2.0 ** -53  # (0, 1]
        u2 = r[m:].astype(np.float64) * 2.0 ** -53
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(size)

    def integers(self, low: int, high: int, size=None):
        if high <= low:
            raise ValidationError(f"empty integer range [{low}, {high})")
        u = self.uniform(size)
        out = low + np.floor(u * (high - low)).astype(np.int64)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return g @ b.T, a.T @ g


def sigmoid(x):
    # tanh form is overflow-free and exact at 0
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


ELEMENTWISE_MODES = ("sigmoid", "tanh", "relu", "exp", "log")


def elementwise(x: np.ndarray, mode: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if mode == "sigmoid":
        return sigmoid(x)
    if mode == "tanh":
        return np.tanh(x)
    if mode == "relu":
        return np.maximum(x, 0.0)
    if mode == "exp":
        return np.exp(x)
    if mode == "log":
        if np.any(x <= 0):
            raise DomainError("log requires strictly positive inputs")
        return np.log(x)
    raise ValidationError(f"unknown elementwise mode {mode!r}")


def elementwise_backward(g: np.ndarray, x: np.ndarray, y: np.ndarray, mode: str) -> np.ndarray:
    """Gradient w.r.t. ``x`` given upstream ``g`` and forward output ``y``."""
    if mode == "sigmoid":
        return g * y * (1.0 - y)
    if mode == "tanh":
        return g * (1.0 - y * y)
    if mode == "relu":
        return g * (x > 0)
    if mode == "exp":
        return g * y
    if mode == "log":
        return g / x
    raise ValidationError(f"unknown elementwise mode {mode!r}")


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vec(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise DimensionError(f"softmax_vec expects a non-empty vector, got shape {z.shape}")
    return softmax(z)


def softmax_backward(g: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    """Jacobian-vector product of softmax at output ``y``."""
    return y * (g - np.sum(g * y, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named float64 parameters with same-shaped gradient buffers.

    Iteration is always in sorted name order.
    """

    def __init__(self):
        self._values: Dict[str, np.ndarray] = {}
        self._grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._values:
            raise ValidationError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._values:
            raise KeyError(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._values[name].shape:
            raise DimensionError(f"{name}: shape {value.shape} != {self._values[name].shape}")
        self._values[name][...] = value

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> List[str]:
        return sorted(self._values)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def accumulate(self, name: str, g: np.ndarray) -> None:
        self._grads[name] += g

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {n: self._values[n].shape for n in self.names()}

    def num_params(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n in self.names():
            out.add(n, self._values[n].copy())
            out._grads[n][...] = self._grads[n]
        return out

    def with_prefix(self, prefix: str) -> List[str]:
        return [n for n in self.names() if n.startswith(prefix)]


@dataclass
class AdamState:
    learning_rate: float = 4e-4
    beta1: float = 0.8
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, **hyper) -> "AdamState":
        state = cls(**hyper)
        for n in params.names():
            state.m[n] = np.zeros_like(params[n])
            state.v[n] = np.zeros_like(params[n])
        return state


def adam_step(params: ParamStore, state: AdamState, names: Optional[List[str]] = None) -> None:
    """One bias-corrected Adam update, in place, in sorted name order.

    ``names`` restricts the update to a subset (e.g. a frozen encoder is
    simply left out); the step counter still advances once.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for n in (params.names() if names is None else sorted(names)):
        if n not in state.m or n not in state.v:
            raise StateError(f"missing Adam moment for parameter {n!r}")
        g = params.grad(n)
        m, v = state.m[n], state.v[n]
        if m.shape != g.shape or v.shape != g.shape:
            raise StateError(f"Adam moment shape mismatch for {n!r}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[n] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def lr_schedule(epoch: int, lr_current: float) -> float:
    """Learning rate for epoch ``epoch + 1`` given the rate used in ``epoch``.

    Constant through epoch 20, then multiplied by ``0.5 ** ((E - 20) / 50)``
    at each transition (the factor compounds across epochs).
    """
    if lr_current <= 0:
        raise ValidationError("learning rate must be positive")
    if epoch <= 20:
        return lr_current
    return lr_current * 0.5 ** ((epoch - 20) / 50.0)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float]
    checked: Dict[str, int]
    tol: float
    sizes: Dict[str, int] = field(default_factory=dict)

    @property
    def flagged(self) -> List[str]:
        return [n for n, e in self.max_rel_error.items() if e > self.tol]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def ok(self) -> bool:
        return not self.flagged

    def lines(self) -> List[str]:
        out = []
        for n in sorted(self.max_rel_error):
            flag = "FLAG" if self.max_rel_error[n] > self.tol else "ok"
            out.append(f"{n}\t{self.checked[n]}\t{self.max_rel_error[n]:.3e}\t{flag}")
        return out


def grad_check(model_loss: Callable[[ParamStore], float], params: ParamStore,
               eps: float = 1e-6, tol: float = 1e-4, samples: int = 32,
               seed: int = 0, full_below: int = 1024,
               names: Optional[List[str]] = None,
               loss_only: Optional[Callable[[ParamStore], float]] = None) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``model_loss(params)`` must return the scalar loss and leave the analytic
    gradient in ``params`` (it is called once with zeroed grads for that).
    Tensors up to ``full_below`` elements are checked exhaustively, larger
    ones at ``samples`` seeded coordinates. ``loss_only``, if given, is used
    for the perturbed evaluations (same value, no backward pass).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValidationError(f"eps={eps} outside [1e-7, 1e-3]")
    params.zero_grad()
    base = model_loss(params)
    if not np.isfinite(base):
        raise EvaluationError("non-finite loss at the unperturbed point")
    analytic = {n: params.grad(n).copy() for n in params.names()}
    evaluate = loss_only or model_loss
    rng = RngStream(seed)
    errors: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    sizes: Dict[str, int] = {}
    for n in (params.names() if names is None else sorted(names)):
        flat = params[n].reshape(-1)
        if flat.size <= full_below:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.permutation(flat.size)[:max(samples, 32)])
        worst = 0.0
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            fp = evaluate(params)
            flat[i] = old - eps
            fm = evaluate(params)
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"non-finite loss while perturbing {n!r}")
            num = (fp - fm) / (2.0 * eps)
            a = analytic[n].reshape(-1)[i]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, rel)
        errors[n] = worst
        counts[n] = int(len(coords))
        sizes[n] = int(flat.size)
    # leave the store's grads holding the analytic gradient
    for n in params.names():
        params.grad(n)[...] = analytic[n]
    return GradCheckReport(errors, counts, tol, sizes)
