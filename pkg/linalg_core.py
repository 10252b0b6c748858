"""Dense double-precision helpers, activations and seeded random streams.

Every tensor in the package is a 2-D ``numpy`` float64 array (``Matrix``).
Column vectors are ``n x 1``; a batch of B column vectors is ``n x B``.
"""

import hashlib
import math

import numpy as np
import numpy.typing as npt

from errors import BoundsError, ShapeError

Matrix = npt.NDArray[np.float64]


def as_matrix(values) -> Matrix:
    """Coerce ``values`` to a 2-D float64 array; 1-D input becomes a single row."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim == 0:
        return m.reshape(1, 1)
    if m.ndim == 1:
        return m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {m.ndim} dimensions")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m: Matrix) -> Matrix:
    m = as_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def elu(x):
    """ELU with unit coefficient: ``x`` for x >= 0, ``exp(x) - 1`` below."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0.0, x, np.expm1(np.minimum(x, 0.0)))
    return out if out.ndim else float(out)


def elu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


def sigmoid(x):
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))
    return out if out.ndim else float(out)


def tanh_act(x):
    out = np.tanh(np.asarray(x, dtype=np.float64))
    return out if out.ndim else float(out)


def one_hot(index: int, dim: int) -> Matrix:
    if not 0 <= index < dim:
        raise BoundsError(f"index {index} out of range for dimension {dim}")
    row = np.zeros((1, dim))
    row[0, index] = 1.0
    return row


def _derive_key(seed: int, path: str) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    h.update(path.encode("utf-8"))
    return int.from_bytes(h.digest(), "little", signed=False)


class RngStream:
    """Counter-based (Philox) random stream keyed by ``seed`` and a label path.

    ``child(label)`` derives a substream from the seed and the label alone, so
    children do not depend on how many values the parent already drew.
    """

    def __init__(self, seed: int, path: str = ""):
        if not 0 <= int(seed) < 2**64:
            raise BoundsError(f"seed {seed} is not an unsigned 64-bit integer")
        self.seed = int(seed)
        self.path = path
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, path)))

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.path}/{label}")

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path!r})"


def uniform_init(rng: RngStream, rows: int, cols: int, fan_in: int) -> Matrix:
    s = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-s, s, size=(rows, cols))
