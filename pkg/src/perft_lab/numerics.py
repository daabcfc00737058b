"""Numeric substrate: parameters, seeded RNG, checked kernels, gradient tools.

Everything downstream works in float64, C-order. Forward functions return
plain arrays; each op with a learnable input has a matching *_backward that
maps upstream gradients to input gradients analytically. The finite-difference
checker is the referee for all of them.
"""

from __future__ import annotations

from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special as _special


class PerftLabError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(PerftLabError):
    """Operand shapes are incompatible."""


class ConfigError(PerftLabError):
    """A configuration value is out of its legal range or inconsistent."""


class NumericError(PerftLabError):
    """A non-finite value appeared where finite math was required."""


class DomainError(PerftLabError):
    """An argument lies outside the mathematical domain of a function."""


class DegenerateInputError(PerftLabError):
    """Input carries no usable signal (e.g. zero variance for PCA)."""


class InputError(PerftLabError):
    """User-supplied data is malformed (tokens, targets, samples)."""


class ParseError(PerftLabError):
    """A file on disk could not be parsed."""


def as_tensor(x, dtype=np.float64) -> np.ndarray:
    """Coerce to a C-contiguous array of the given dtype."""
    return np.ascontiguousarray(np.asarray(x, dtype=dtype))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericError(f"{what} contains {bad} non-finite value(s)")
    return x


class Parameter:
    """A named learnable tensor with a gradient accumulator.

    `trainable` gates both gradient accumulation and optimizer updates, so a
    frozen parameter's value and grad buffer are bit-stable across training.
    `role` is "backbone" or "peft" and drives the freeze partition.
    """

    __slots__ = ("name", "value", "grad", "trainable", "role")

    def __init__(self, name: str, value, trainable: bool = True, role: str = "backbone"):
        self.name = name
        self.value = as_tensor(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.role = role

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        """Add to the grad buffer, but only if trainable (frozen stays zero)."""
        if self.trainable:
            self.grad += g

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name}, shape={self.value.shape}{flag})"


class Module:
    """Minimal parameter container; subclasses yield their Parameters."""

    def parameters(self) -> Iterator[Parameter]:
        yield from ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for p in self.parameters():
            name = f"{prefix}.{p.name}" if prefix else p.name
            yield name, p

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0.0


class Rng:
    """Seeded RNG (numpy PCG64) with deterministic named child streams.

    Child streams are derived through SeedSequence spawn keys so init, batch
    order, and dropout each consume an independent stream that does not shift
    when another consumer draws more or fewer values.
    """

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, *keys: int) -> "Rng":
        seq = self._seq
        for k in keys:
            if k < 0:
                raise ConfigError("child stream keys must be non-negative")
            seq = seq.spawn(k + 1)[k]
        return Rng(self.seed, seq)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, shape=None) -> np.ndarray:
        return self._gen.uniform(size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Shape-checked matrix product of the trailing two axes."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def matmul_backward(a: np.ndarray, b: np.ndarray, d_out: np.ndarray):
    """Gradients of c = a @ b: da = d_out @ b.T, db = a.T @ d_out."""
    da = np.matmul(d_out, np.swapaxes(b, -1, -2))
    db = np.matmul(np.swapaxes(a, -1, -2), d_out)
    return da, db


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax along the last axis, max-shifted for stability."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    """Map d(loss)/d(probs) to d(loss)/d(logits) for a row softmax."""
    inner = np.sum(d_probs * probs, axis=-1, keepdims=True)
    return probs * (d_probs - inner)


def logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1)
    return m + np.log(np.sum(np.exp(z - m[..., None]), axis=-1))


def finite_diff_grad(
    f: Callable[[], float],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of in-place arrays.

    Each entry of each array in `params` is perturbed by +/- eps, `f()` is
    re-evaluated, and the original value restored. `f` must read the arrays
    in `params` by reference (e.g. Parameter.value buffers).
    """
    grads = []
    for arr in params:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f()
            flat[i] = orig - eps
            f_minus = f()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """max_i |a_i - b_i| / max(1, |a_i|, |b_i|): absolute near zero, relative away."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"compared arrays differ in shape: {a.shape} vs {b.shape}")
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))


def chi2_cdf(x, k: int) -> float | np.ndarray:
    """CDF of the chi-squared distribution with k degrees of freedom.

    P(X <= x) = gammainc(k/2, x/2), the regularized lower incomplete gamma.
    """
    if k <= 0:
        raise DomainError(f"chi2_cdf needs k >= 1, got {k}")
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0):
        raise DomainError("chi2_cdf is undefined for negative x")
    out = _special.gammainc(k / 2.0, arr / 2.0)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def pca_fit_project(x: np.ndarray, dims: int) -> tuple[np.ndarray, np.ndarray]:
    """Principal components of rows of x, plus the centered projection.

    Returns (components, projected) where components has shape (dims, d) with
    orthonormal rows ordered by decreasing variance, and projected is the
    mean-centered data mapped through them, shape (n, dims). Deterministic:
    dense symmetric eigendecomposition, each component's sign fixed so its
    first coordinate of largest magnitude is positive.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"pca_fit_project expects a 2-d matrix, got shape {x.shape}")
    n, d = x.shape
    if not (1 <= dims <= d):
        raise ConfigError(f"dims must lie in [1, {d}], got {dims}")
    if n < 2:
        raise DegenerateInputError("need at least two rows to fit directions")
    check_finite(x, "pca input")
    center = x.mean(axis=0)
    xc = x - center
    cov = (xc.T @ xc) / (n - 1)
    total_var = float(np.trace(cov))
    if total_var <= 1e-300:
        raise DegenerateInputError("input has zero variance; no principal directions")
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:dims]
    comps = evecs[:, order].T.copy()
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    projected = xc @ comps.T
    return comps, projected
