"""Kernel evaluation, empirical kernel maps, Gram matrices, and bandwidth selection.

Everything here is a pure function over immutable inputs and is safe to call
concurrently from any number of threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GAUSSIAN = "gaussian"
POLYNOMIAL = "polynomial"


@dataclass(frozen=True)
class Kernel:
    """A symmetric positive-definite kernel.

    family: ``"gaussian"`` with ``k(x, y) = exp(-||x - y||^2 / (2 * bandwidth))``
    (``bandwidth`` is variance-like), or ``"polynomial"`` with
    ``k(x, y) = (x . y + offset) ** degree``.
    """

    family: str
    bandwidth: float | None = None
    offset: float | None = None
    degree: int | None = None

    def __post_init__(self):
        if self.family == GAUSSIAN:
            if self.bandwidth is None or self.bandwidth <= 0:
                raise ValueError("gaussian kernel requires bandwidth > 0")
        elif self.family == POLYNOMIAL:
            if self.offset is None or self.offset < 0:
                raise ValueError("polynomial kernel requires offset >= 0")
            if self.degree is None or int(self.degree) != self.degree or self.degree < 1:
                raise ValueError("polynomial kernel requires a positive integer degree")
        else:
            raise ValueError(f"unknown kernel family: {self.family!r}")

    def to_dict(self) -> dict:
        if self.family == GAUSSIAN:
            return {"family": GAUSSIAN, "params": {"bandwidth": self.bandwidth}}
        return {"family": POLYNOMIAL, "params": {"offset": self.offset, "degree": self.degree}}

    @staticmethod
    def from_dict(d: dict) -> "Kernel":
        params = d.get("params", {})
        if d["family"] == GAUSSIAN:
            return Kernel(GAUSSIAN, bandwidth=params["bandwidth"])
        return Kernel(POLYNOMIAL, offset=params["offset"], degree=int(params["degree"]))


@dataclass(frozen=True)
class Dictionary:
    """An ordered set of atom points plus a per-atom fixed mask.

    Fixed atoms (quadrature grid / inducing points) are never pruned by
    compression. ``atoms`` has shape ``(n, d)``; ``fixed_mask`` has shape ``(n,)``.
    """

    atoms: np.ndarray
    fixed_mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim == 1:
            atoms = atoms.reshape(-1, 1)
        if atoms.ndim != 2:
            raise ValueError("atoms must be a (n, d) array")
        object.__setattr__(self, "atoms", atoms)
        if self.fixed_mask is None:
            mask = np.zeros(len(atoms), dtype=bool)
        else:
            mask = np.asarray(self.fixed_mask, dtype=bool).reshape(-1)
        if len(mask) != len(atoms):
            raise ValueError("fixed_mask length must equal atom count")
        object.__setattr__(self, "fixed_mask", mask)

    def __len__(self) -> int:
        return len(self.atoms)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @staticmethod
    def empty(dim: int) -> "Dictionary":
        return Dictionary(np.empty((0, dim)), np.empty(0, dtype=bool))

    def append(self, points: np.ndarray, fixed: bool = False) -> "Dictionary":
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if len(self) and points.shape[1] != self.dim:
            raise ValueError("appended points have mismatched dimension")
        mask = np.full(len(points), fixed, dtype=bool)
        return Dictionary(np.vstack([self.atoms, points]), np.concatenate([self.fixed_mask, mask]))

    def remove(self, index: int) -> "Dictionary":
        keep = np.ones(len(self), dtype=bool)
        keep[index] = False
        return Dictionary(self.atoms[keep], self.fixed_mask[keep])

    def take(self, indices: np.ndarray) -> "Dictionary":
        return Dictionary(self.atoms[indices], self.fixed_mask[indices])

    def index_of(self, point: np.ndarray) -> int | None:
        """Index of an atom exactly (bitwise) equal to ``point``, else None."""
        point = np.asarray(point, dtype=np.float64).reshape(-1)
        key = point.tobytes()
        for i, atom in enumerate(self.atoms):
            if atom.tobytes() == key:
                return i
        return None


def _check_point(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != dim:
        raise ValueError(f"point dimension {x.shape[0]} does not match expected {dim}")
    return x


def eval_kernel(kernel: Kernel, x: np.ndarray, y: np.ndarray) -> float:
    """Evaluate ``k(x, y)`` for two points of equal dimension."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = _check_point(y, x.shape[0])
    if kernel.family == GAUSSIAN:
        d2 = np.sum((x - y) ** 2, axis=-1)
        return float(np.exp(-d2 / (2.0 * kernel.bandwidth)))
    return float((x @ y + kernel.offset) ** kernel.degree)


def kernel_vector(kernel: Kernel, dictionary: Dictionary, x: np.ndarray) -> np.ndarray:
    """Empirical kernel map: entry ``i`` is ``k(atoms[i], x)``.

    Shares the exact elementwise arithmetic of :func:`gram_matrix`, so
    ``kernel_vector(k, d, d.atoms[i])`` equals row ``i`` of the Gram matrix
    bit-for-bit.
    """
    if len(dictionary) == 0:
        return np.empty(0)
    x = _check_point(x, dictionary.dim)
    if kernel.family == GAUSSIAN:
        d2 = np.sum((dictionary.atoms - x[None, :]) ** 2, axis=-1)
        return np.exp(-d2 / (2.0 * kernel.bandwidth))
    return (dictionary.atoms @ x + kernel.offset) ** kernel.degree


def kernel_matrix(kernel: Kernel, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Cross kernel matrix ``K[i, j] = k(rows[i], cols[j])`` for two point sets."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    cols = np.atleast_2d(np.asarray(cols, dtype=np.float64))
    if rows.size and cols.size and rows.shape[1] != cols.shape[1]:
        raise ValueError("point sets have mismatched dimension")
    if rows.shape[0] == 0 or cols.shape[0] == 0:
        return np.empty((rows.shape[0], cols.shape[0]))
    if kernel.family == GAUSSIAN:
        d2 = np.sum((rows[:, None, :] - cols[None, :, :]) ** 2, axis=-1)
        return np.exp(-d2 / (2.0 * kernel.bandwidth))
    return (rows @ cols.T + kernel.offset) ** kernel.degree


def gram_matrix(kernel: Kernel, dictionary: Dictionary) -> np.ndarray:
    """Symmetric Gram matrix over the dictionary atoms (empty atoms -> 0x0)."""
    return kernel_matrix(kernel, dictionary.atoms, dictionary.atoms)


def silverman_bandwidth(data: np.ndarray) -> float:
    """Variance-like Gaussian bandwidth from the rule-of-thumb scale.

    Returns ``(1.06 * std * n**(-1/5)) ** 2``; the square converts the
    rule-of-thumb standard deviation into the variance-like parameter used by
    the Gaussian kernel here.
    """
    data = np.asarray(data, dtype=np.float64).reshape(-1)
    n = data.shape[0]
    if n < 2:
        raise ValueError("bandwidth selection needs at least 2 points")
    sigma = float(np.std(data, ddof=1))
    if sigma == 0.0:
        raise ValueError("bandwidth selection needs data with nonzero variance")
    h = 1.06 * sigma * n ** (-0.2)
    return h * h
