"""Dense float64 kernels with hand-written backward passes.

Every forward function here has a matching ``*_backward``; the network code
composes them explicitly instead of building a graph.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

BN_EPS = 1e-8


class DimensionError(ValueError):
    pass


class LabelError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate external input as a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D array, got shape {a.shape}")
    if a.shape[1] < 1:
        raise DimensionError(f"{name}: need at least one column")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: contains NaN or Inf")
    return a


@dataclass
class ParamTensor:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class RngStream:
    """Named, seeded random stream.

    Backed by numpy's PCG64 seeded through ``SeedSequence(seed, spawn_key=(crc32(stream),))``
    so that distinct labels under one seed give independent, reproducible streams.
    Gaussian draws use numpy's ziggurat sampler, which is platform independent.
    """

    def __init__(self, seed: int, stream: str = "default"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = stream
        ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(stream.encode("utf-8")),))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def get_state(self) -> np.ndarray:
        """Full generator state as six uint64 words."""
        st = self._gen.bit_generator.state
        mask = (1 << 64) - 1
        s, inc = st["state"]["state"], st["state"]["inc"]
        return np.array(
            [s >> 64, s & mask, inc >> 64, inc & mask, st["has_uint32"], st["uinteger"]],
            dtype=np.uint64,
        )

    def set_state(self, words) -> None:
        w = [int(x) for x in np.asarray(words, dtype=np.uint64)]
        if len(w) != 6:
            raise ValueError("RngStream state must be 6 uint64 words")
        self._gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
            "has_uint32": w[4],
            "uinteger": w[5],
        }


# ---------------------------------------------------------------- affine

def affine_forward(W: np.ndarray, b: np.ndarray | None, X: np.ndarray) -> np.ndarray:
    """Y = X W^T + b, with W stored as (out, in)."""
    if W.ndim != 2 or X.ndim != 2 or X.shape[1] != W.shape[1]:
        raise DimensionError(f"affine: X {X.shape} incompatible with W {W.shape}")
    Y = X @ W.T
    if b is not None:
        if b.shape != (W.shape[0],):
            raise DimensionError(f"affine: bias {b.shape} does not match W {W.shape}")
        Y += b
    return Y


def affine_backward(dY: np.ndarray, X: np.ndarray, W: np.ndarray):
    """Returns (dX, dW, db)."""
    return dY @ W, dY.T @ X, dY.sum(axis=0)


# ---------------------------------------------------------------- relu

def relu(X: np.ndarray) -> np.ndarray:
    return np.maximum(X, 0.0)


def relu_backward(dY: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Gradient is masked where the pre-activation is <= 0."""
    return np.where(X > 0.0, dY, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- batchnorm

def batchnorm_forward(X: np.ndarray, eps: float = BN_EPS):
    """Normalize each column with batch mean and population variance.

    Returns ``(Y, mean, var)``; no learnable scale or shift.
    """
    if X.shape[0] == 0:
        raise EmptyBatchError("batchnorm over an empty batch")
    mean = X.mean(axis=0)
    var = X.var(axis=0)
    Y = (X - mean) / np.sqrt(var + eps)
    # a rounded mean leaves ~1e-16 residue that 1/sqrt(eps) would amplify
    Y[:, np.ptp(X, axis=0) == 0] = 0.0
    return Y, mean, var


def batchnorm_backward(dY: np.ndarray, Y: np.ndarray, var: np.ndarray, eps: float = BN_EPS) -> np.ndarray:
    n = dY.shape[0]
    inv_std = 1.0 / np.sqrt(var + eps)
    return inv_std / n * (n * dY - dY.sum(axis=0) - Y * (dY * Y).sum(axis=0))


# ---------------------------------------------------------------- softmax / cross-entropy

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match {n} rows")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsumexp - z[rows, labels]))
    d = np.exp(z - logsumexp[:, None])
    d[rows, labels] -= 1.0
    return loss, d / n


# ---------------------------------------------------------------- gradient check

def grad_check(
    loss_fn: Callable[[], float],
    params: Iterable[ParamTensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: RngStream | None = None,
    report: dict | None = None,
) -> float:
    """Compare analytic gradients with central finite differences.

    ``loss_fn()`` must recompute the loss and refill every ``param.grad``.
    With ``max_entries`` set, each tensor larger than that is checked on a
    random subset of its entries (drawn from ``rng``). If ``report`` is given
    it receives the worst relative error per tensor name.
    """
    params = list(params)
    if not params:
        return 0.0
    l1 = loss_fn()
    analytic = {p.name: p.grad.copy() for p in params}
    l2 = loss_fn()
    if l1 != l2 or any(not np.array_equal(analytic[p.name], p.grad) for p in params):
        raise DeterminismError("loss_fn returned different results on identical inputs")
    if rng is None:
        rng = RngStream(0, "grad_check")

    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        ga = analytic[p.name].reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries))
        else:
            idx = np.arange(flat.size)
        tensor_worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            lp = loss_fn()
            flat[i] = old - h
            lm = loss_fn()
            flat[i] = old
            num = (lp - lm) / (2.0 * h)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), 1e-8)
            tensor_worst = max(tensor_worst, err)
        if report is not None:
            report[p.name] = tensor_worst
        worst = max(worst, tensor_worst)
    loss_fn()  # leave grads consistent with the unperturbed values
    return worst
