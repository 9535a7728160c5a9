"""Dense float64 numerics shared by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. The helpers here add the contract checks the rest of the package relies
on, a counter-based random stream, a central-difference gradient oracle and the
``DMAT`` binary matrix format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ContractError, OracleError

DMAT_MAGIC = b"DMAT"
DMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a C-contiguous float64 2-D array, checking finiteness."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} has non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` with float64 accumulation.

    Raises
    ------
    ContractError
        If ``a.cols != b.rows`` or either operand is not 2-D.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def rms(x) -> float:
    """Root mean square of all entries."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ContractError("rms of an empty array")
    return float(np.sqrt(np.mean(np.square(x))))


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, eps: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    The probe for coordinate ``i`` is ``eps * max(1, |x_i|)`` so that large
    coordinates are not perturbed below their rounding level.

    Parameters
    ----------
    f : callable
        Maps an array shaped like ``x`` to a float. It must not keep a
        reference to its argument, which is mutated in place between calls.
    x : array_like
        Point at which to differentiate; any shape.
    eps : float
        Relative step size, must be positive.

    Returns
    -------
    ndarray
        Gradient with the shape of ``x``.
    """
    if not eps > 0:
        raise ContractError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        h = eps * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite f near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream (Philox 4x64).

    ``(seed, counter)`` fully determines the output sequence on every platform.
    ``counter`` positions the generator at that 256-bit block, so two streams
    with equal seeds and counters are identical.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        if not (0 <= self.seed < 2**64 and 0 <= self.counter < 2**64):
            raise ContractError("seed and counter must be unsigned 64-bit")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(
            np.random.Philox(key=self.seed, counter=self.counter)
        )

    def child(self, *tags: int) -> "RngStream":
        """Independent stream keyed by ``(seed, *tags)``."""
        ss = np.random.SeedSequence([self.seed, *tags])
        return RngStream(int(ss.generate_state(1, np.uint64)[0]))


def write_dmat(path, a) -> None:
    """Write a matrix as ``DMAT``: 16-byte little-endian header then float64 data."""
    a = np.ascontiguousarray(a, dtype="<f8")
    if a.ndim != 2:
        raise ContractError(f"DMAT holds 2-D arrays, got shape {a.shape}")
    rows, cols = a.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DMAT_MAGIC, DMAT_VERSION, rows, cols))
        fh.write(a.tobytes(order="C"))


def read_dmat(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ContractError(f"{path}: truncated DMAT header")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != DMAT_MAGIC:
        raise ContractError(f"{path}: bad magic {magic!r}")
    if version != DMAT_VERSION:
        raise ContractError(f"{path}: unsupported DMAT version {version}")
    expected = _HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise ContractError(
            f"{path}: expected {expected} bytes for {rows}x{cols}, got {len(data)}"
        )
    arr = np.frombuffer(data, dtype="<f8", offset=_HEADER.size, count=rows * cols)
    return arr.reshape(rows, cols).astype(np.float64)
