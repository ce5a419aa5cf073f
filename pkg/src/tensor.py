"""
Dense linear algebra helpers on numpy arrays.

A ``Matrix`` is a row-major ``numpy.ndarray`` of shape ``(rows, cols)``; a
leading batch axis is allowed wherever numpy broadcasting makes sense.
Passing an ``OpCounter`` records multiplications and additions, which is the
FLOPs oracle for the analytic model in ``src.pruning``. Activation functions
are never counted.
"""
import hashlib
import zlib
from dataclasses import dataclass

import numpy as np

from src.errors import ShapeError

Matrix = np.ndarray

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64


@dataclass
class OpCounter:
    multiplications: int = 0
    additions: int = 0

    def flops(self) -> int:
        return self.multiplications + self.additions

    def record(self, multiplications=0, additions=0):
        self.multiplications += int(multiplications)
        self.additions += int(additions)

    def reset(self):
        self.multiplications = 0
        self.additions = 0


def rng_for(seed, purpose: str) -> np.random.Generator:
    """Independent generator per purpose, stable regardless of call order."""
    return np.random.default_rng([int(seed), zlib.crc32(purpose.encode("utf-8"))])


def matmul(a: Matrix, b: Matrix, counter: OpCounter = None) -> Matrix:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a, b)
    if counter is not None:
        inner = a.shape[-1]
        counter.record(out.size * inner, out.size * (inner - 1))
    return out


def _check_same(a, b, op):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{op} shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def mul(a, b, counter: OpCounter = None):
    _check_same(a, b, "mul")
    out = a * b
    if counter is not None:
        counter.record(multiplications=np.size(out))
    return out


def add(a, b, counter: OpCounter = None):
    _check_same(a, b, "add")
    out = a + b
    if counter is not None:
        counter.record(additions=np.size(out))
    return out


def sub(a, b, counter: OpCounter = None):
    _check_same(a, b, "sub")
    out = a - b
    if counter is not None:
        counter.record(additions=np.size(out))
    return out


def one_minus(a, counter: OpCounter = None):
    out = 1 - a
    if counter is not None:
        counter.record(additions=np.size(out))
    return out


def sigmoid(x):
    # logaddexp keeps exp from overflowing for large |x|
    x = np.asarray(x)
    return np.exp(-np.logaddexp(0, -x))


def tanh(x):
    return np.tanh(x)


def log_softmax(logits, axis=0):
    logits = np.asarray(logits)
    if logits.size == 0:
        raise ShapeError("log_softmax of an empty input")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits, axis=0):
    return np.exp(log_softmax(logits, axis=axis))


def cross_entropy(logits, target: int) -> float:
    logits = np.asarray(logits)
    if logits.size == 0:
        raise ShapeError("cross_entropy of an empty input")
    if not 0 <= target < logits.shape[0]:
        raise ShapeError(f"target {target} outside logits of length {logits.shape[0]}")
    return float(-log_softmax(logits)[target])


def checksum(arrays) -> str:
    """SHA-256 over the raw bytes of a sequence of arrays."""
    digest = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array)
        digest.update(str(array.dtype).encode())
        digest.update(str(array.shape).encode())
        digest.update(array.tobytes())
    return digest.hexdigest()
