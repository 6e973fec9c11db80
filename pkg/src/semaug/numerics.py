"""Dense float64 primitives, seeded randomness and a finite-difference checker.

Arrays are plain ``numpy.ndarray`` objects in float64. Every helper here is a
pure function; optimizers mutate only the :class:`Parameter` objects they are
handed.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

DTYPE = np.float64


class NumericsError(ValueError):
    """Raised when a primitive receives input it cannot handle safely."""


def as_array(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} contains non-finite values")
    return arr


def cosine_similarity(a, b) -> float:
    a = as_array(a, "a").ravel()
    b = as_array(b, "b").ravel()
    if a.shape != b.shape:
        raise NumericsError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericsError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine between the rows of ``a`` (n, d) and ``b`` (m, d)."""
    a = as_array(a, "a")
    b = as_array(b, "b")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise NumericsError("cosine similarity of a zero-norm vector is undefined")
    return (a @ b.T) / np.outer(na, nb)


def global_average_pool(fmap) -> np.ndarray:
    """Mean over the two leading spatial axes of an (H, W, D) map."""
    fmap = as_array(fmap, "feature map")
    if fmap.ndim != 3:
        raise NumericsError(f"expected an H x W x D map, got shape {fmap.shape}")
    if fmap.shape[0] < 1 or fmap.shape[1] < 1:
        raise NumericsError("feature map has an empty spatial extent")
    return fmap.mean(axis=(0, 1))


def l2_normalize(v) -> np.ndarray:
    v = as_array(v, "v")
    n = np.linalg.norm(v)
    if n == 0.0:
        raise NumericsError("cannot normalize a zero vector")
    return v / n


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise NumericsError("step h must be positive")
    x = np.array(x, dtype=DTYPE, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericsError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-10) -> float:
    """||a - n|| / max(||a||, ||n||); the floor keeps all-zero pairs at 0."""
    a = np.asarray(analytic, dtype=DTYPE).ravel()
    n = np.asarray(numeric, dtype=DTYPE).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


class SeededRng:
    """PCG64 bit generator behind numpy's ``Generator`` interface.

    Children derived with :meth:`child` are keyed by (seed, tag path) so that
    adding a new consumer never shifts the stream of an existing one.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise NumericsError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._path = _path
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, tag: str) -> "SeededRng":
        return SeededRng(self.seed, self._path + (zlib.crc32(tag.encode("utf-8")),))

    def normal(self, shape, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
        return self.generator.normal(mean, stddev, size=shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, path={self._path})"


def sample_gaussian(rng: SeededRng, shape, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    if stddev < 0:
        raise NumericsError("stddev must be non-negative")
    if stddev == 0:
        return np.full(shape, mean, dtype=DTYPE)
    return rng.normal(shape, mean, stddev).astype(DTYPE, copy=False)


@dataclass
class Parameter:
    value: np.ndarray
    frozen: bool = False
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class SGD:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3):
        self.params = [p for p in params if not p.frozen]
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.frozen:
                continue
            p.value -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params = [p for p in params if not p.frozen]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.frozen:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and self.lr:
                p.value -= self.lr * self.weight_decay * p.value
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# -- smooth nonlinearities shared by the model and the router ----------------

_GELU_K = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_K * (x + 0.044715 * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_K * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x**2)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(a: np.ndarray, da: np.ndarray, axis: int = -1) -> np.ndarray:
    return a * (da - (da * a).sum(axis=axis, keepdims=True))
