"""Sparse dual-function representation, mirror maps, Bregman divergences, and norms.

The object stored and compressed by the optimizers is the dual iterate ``z``;
the primal estimate ``f`` is recovered pointwise through the gradient of the
conjugate potential. ``DualFunction`` values are immutable snapshots, so all
evaluation operations are pure and thread-safe; optimizers own a mutable
working copy single-threaded.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, replace

import numpy as np

from .kernels import Dictionary, Kernel, gram_matrix, kernel_matrix, kernel_vector

KL = "kl"
SQUARED_NORM = "squared_norm"

# exp saturates float64 near +/-709; dual values are clamped to this band
# before exponentiation and the clamp events are counted for telemetry.
DUAL_CLAMP = 700.0

_saturation_lock = threading.Lock()
_saturation_events = 0


def saturation_events() -> int:
    """Number of dual-value clamp events since the last reset."""
    return _saturation_events


def reset_saturation_events() -> None:
    global _saturation_events
    with _saturation_lock:
        _saturation_events = 0


def _clamped_exp(values: np.ndarray) -> np.ndarray:
    global _saturation_events
    values = np.asarray(values, dtype=np.float64)
    over = np.abs(values) > DUAL_CLAMP
    if np.any(over):
        with _saturation_lock:
            _saturation_events += int(np.count_nonzero(over))
        values = np.clip(values, -DUAL_CLAMP, DUAL_CLAMP)
    return np.exp(values)


@dataclass(frozen=True)
class MirrorMap:
    """The potential selecting the optimization geometry.

    ``kl``: grad is pointwise log, conjugate grad is pointwise exp, so primal
    iterates stay strictly positive. ``squared_norm``: both maps are the
    identity and positivity is not preserved.
    """

    kind: str

    def __post_init__(self):
        if self.kind not in (KL, SQUARED_NORM):
            raise ValueError(f"unknown mirror map: {self.kind!r}")

    def grad_psi(self, values: np.ndarray) -> np.ndarray:
        if self.kind == KL:
            return np.log(values)
        return np.asarray(values, dtype=np.float64)

    def grad_psi_conj(self, values: np.ndarray) -> np.ndarray:
        if self.kind == KL:
            return _clamped_exp(values)
        return np.asarray(values, dtype=np.float64)


@dataclass(frozen=True)
class DualFunction:
    """Dual iterate ``z = sum_n w_n k(atoms[n], .)`` plus its mirror map."""

    dictionary: Dictionary
    weights: np.ndarray
    mirror_map: MirrorMap
    kernel: Kernel

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(w) != len(self.dictionary):
            raise ValueError("weights length must equal dictionary size")
        object.__setattr__(self, "weights", w)

    @property
    def model_order(self) -> int:
        return len(self.dictionary)

    def with_(self, dictionary: Dictionary | None = None, weights: np.ndarray | None = None) -> "DualFunction":
        return replace(
            self,
            dictionary=self.dictionary if dictionary is None else dictionary,
            weights=self.weights if weights is None else weights,
        )


def zero_dual_function(kernel: Kernel, mirror_map: MirrorMap, dim: int) -> DualFunction:
    return DualFunction(Dictionary.empty(dim), np.empty(0), mirror_map, kernel)


def evaluate_dual(z: DualFunction, x: np.ndarray) -> float:
    """``z(x) = w . k_D(x)``; 0 for an empty dictionary."""
    if z.model_order == 0:
        return 0.0
    return float(z.weights @ kernel_vector(z.kernel, z.dictionary, x))


def evaluate_dual_many(z: DualFunction, points: np.ndarray) -> np.ndarray:
    """Vectorized ``z(x)`` over the rows of ``points``."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if z.model_order == 0:
        return np.zeros(points.shape[0])
    return kernel_matrix(z.kernel, points, z.dictionary.atoms) @ z.weights


def evaluate_primal(z: DualFunction, x: np.ndarray) -> float:
    """``f(x) = grad_psi_conj(z(x))``: exp under KL, identity under squared norm."""
    return float(z.mirror_map.grad_psi_conj(np.asarray(evaluate_dual(z, x))))


def evaluate_primal_many(z: DualFunction, points: np.ndarray) -> np.ndarray:
    return z.mirror_map.grad_psi_conj(evaluate_dual_many(z, points))


def quadratic_form(gram: np.ndarray, weights: np.ndarray) -> float:
    """``w' G w`` clamped at zero against negative round-off."""
    if len(weights) == 0:
        return 0.0
    return max(float(weights @ (gram @ weights)), 0.0)


def rkhs_norm(z: DualFunction) -> float:
    """``sqrt(w' K w)`` over the function's own dictionary."""
    if z.model_order == 0:
        return 0.0
    gram = gram_matrix(z.kernel, z.dictionary)
    return float(np.sqrt(quadratic_form(gram, z.weights)))


def rkhs_norm_diff(z1: DualFunction, z2: DualFunction) -> float:
    """RKHS norm of ``z1 - z2`` over the union dictionary with signed stacked weights.

    The two functions must share a kernel; dictionaries may differ. The dual
    norm applied to compression residuals uses this same Gram quadratic form.
    """
    if z1.kernel != z2.kernel:
        raise ValueError("functions must share a kernel")
    if z2.model_order == 0:
        return rkhs_norm(z1)
    if z1.model_order == 0:
        return rkhs_norm(z2)
    atoms = np.vstack([z1.dictionary.atoms, z2.dictionary.atoms])
    weights = np.concatenate([z1.weights, -z2.weights])
    gram = kernel_matrix(z1.kernel, atoms, atoms)
    return float(np.sqrt(quadratic_form(gram, weights)))


def bregman_divergence(
    f_vals: np.ndarray,
    g_vals: np.ndarray,
    mirror_map: MirrorMap,
    quadrature_weights: np.ndarray,
) -> float:
    """Quadrature surrogate of the divergence between two pointwise-sampled functions.

    KL: ``sum_i h_i f_i log(f_i / g_i)`` (requires positive samples); squared
    norm: ``0.5 * sum_i h_i (f_i - g_i)^2``. Diagnostic only; never used
    inside the optimizers.
    """
    f_vals = np.asarray(f_vals, dtype=np.float64).reshape(-1)
    g_vals = np.asarray(g_vals, dtype=np.float64).reshape(-1)
    h = np.asarray(quadrature_weights, dtype=np.float64).reshape(-1)
    if not (len(f_vals) == len(g_vals) == len(h)):
        raise ValueError("value and quadrature arrays must have equal length")
    if mirror_map.kind == KL:
        if np.any(f_vals <= 0) or np.any(g_vals <= 0):
            raise ValueError("KL divergence requires strictly positive values")
        val = float(np.sum(h * f_vals * np.log(f_vals / g_vals)))
    else:
        val = 0.5 * float(np.sum(h * (f_vals - g_vals) ** 2))
    return val


def dual_function_to_json(z: DualFunction) -> str:
    """Serialize to JSON; floats round-trip bit-exactly via shortest repr."""
    payload = {
        "kernel": z.kernel.to_dict(),
        "map": z.mirror_map.kind,
        "atoms": z.dictionary.atoms.tolist(),
        "weights": z.weights.tolist(),
        "fixed_mask": z.dictionary.fixed_mask.tolist(),
    }
    return json.dumps(payload)


def dual_function_from_json(text: str) -> DualFunction:
    payload = json.loads(text)
    kernel = Kernel.from_dict(payload["kernel"])
    atoms = np.asarray(payload["atoms"], dtype=np.float64)
    if atoms.size == 0:
        atoms = atoms.reshape(0, 1)
    dictionary = Dictionary(atoms, np.asarray(payload["fixed_mask"], dtype=bool))
    return DualFunction(
        dictionary,
        np.asarray(payload["weights"], dtype=np.float64),
        MirrorMap(payload["map"]),
        kernel,
    )
