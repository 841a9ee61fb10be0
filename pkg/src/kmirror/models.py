"""Loss functions and pseudo-gradients for the supported models.

Poisson intensity estimation is the flagship: the instantaneous negative
log-likelihood of a sample ``x`` is ``-z(x) + h * sum_j exp(z(u_j))`` where
``u_j`` are fixed quadrature grid points approximating the intensity
integral. The multi-class kernel logistic model supplies plain stochastic
gradients (softmax cross-entropy) for the supervised-learning extension.

Loss and gradient evaluations are pure; batch members reduce in a fixed
summation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import Dictionary, Kernel, kernel_matrix, kernel_vector
from .rkhs import (
    DualFunction,
    MirrorMap,
    _clamped_exp,
    evaluate_dual_many,
    quadratic_form,
)


@dataclass(frozen=True)
class PoissonModel:
    """Uniform quadrature grid over a box domain for the intensity integral.

    ``grid`` atoms sit at cell centers and carry ``fixed_mask=True``;
    ``cell_measure`` is ``measure(domain) / grid size``.
    """

    grid: Dictionary
    cell_measure: float
    bounds: tuple[tuple[float, float], ...]

    @property
    def grid_size(self) -> int:
        return len(self.grid)

    @property
    def dim(self) -> int:
        return len(self.bounds)


def make_poisson_model(bounds, grid_size: int) -> PoissonModel:
    """Build a cell-center grid with ``grid_size`` total atoms.

    In more than one dimension ``grid_size`` must be a perfect power
    ``g**d`` so the grid stays uniform per axis.
    """
    bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    d = len(bounds)
    per_axis = round(grid_size ** (1.0 / d))
    if per_axis**d != grid_size:
        raise ValueError(f"grid_size {grid_size} is not a {d}-th power")
    axes = []
    measure = 1.0
    for lo, hi in bounds:
        if hi <= lo:
            raise ValueError("domain bounds must satisfy hi > lo")
        centers = lo + (hi - lo) * (np.arange(per_axis) + 0.5) / per_axis
        axes.append(centers)
        measure *= hi - lo
    mesh = np.meshgrid(*axes, indexing="ij")
    atoms = np.column_stack([m.reshape(-1) for m in mesh])
    grid = Dictionary(atoms, np.ones(len(atoms), dtype=bool))
    return PoissonModel(grid=grid, cell_measure=measure / grid_size, bounds=bounds)


def integral_estimate(model: PoissonModel, dual_grid_values: np.ndarray) -> float:
    """``h * sum_j exp(z(u_j))`` from precomputed dual values at the grid."""
    return model.cell_measure * float(np.sum(_clamped_exp(dual_grid_values)))


def grid_dual_values(z: DualFunction, model: PoissonModel) -> np.ndarray:
    return evaluate_dual_many(z, model.grid.atoms)


def poisson_loss(z: DualFunction, x: np.ndarray, model: PoissonModel) -> float:
    """Instantaneous loss ``-z(x) + h * sum_j exp(z(u_j))`` (KL geometry)."""
    zx = evaluate_dual_many(z, np.atleast_2d(x))[0]
    return float(-zx + integral_estimate(model, grid_dual_values(z, model)))


@dataclass(frozen=True)
class PseudoGradient:
    """Sparse expansion of a search direction.

    ``new_atoms``/``new_coefficients`` carry kernel sections at sample
    locations; ``grid_coefficients`` (possibly empty) act on the model's fixed
    grid atoms. The mirror step applies ``-eta`` times these coefficients.
    """

    new_atoms: np.ndarray
    new_coefficients: np.ndarray
    grid_coefficients: np.ndarray
    kind: str = "kernel_embedding"

    def __post_init__(self):
        if not (
            np.all(np.isfinite(self.new_coefficients))
            and np.all(np.isfinite(self.grid_coefficients))
        ):
            raise ValueError("pseudo-gradient coefficients must be finite")


def poisson_pseudo_gradient_functional(
    z: DualFunction, x: np.ndarray, model: PoissonModel
) -> PseudoGradient:
    """Kernel-embedding pseudo-gradient for one Poisson sample.

    ``g = -(1/exp(z(x))) k(x,.) + h * sum_j k(u_j,.)``; the weight update
    adds ``eta/exp(z(x))`` on a new atom at ``x`` and ``-eta*h`` on every
    grid atom.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    zx = evaluate_dual_many(z, x)[0]
    coef = -1.0 / float(_clamped_exp(np.asarray(zx)))
    return PseudoGradient(
        new_atoms=x,
        new_coefficients=np.array([coef]),
        grid_coefficients=np.full(model.grid_size, model.cell_measure),
    )


def weight_space_gradient(
    weights: np.ndarray,
    subspace: Dictionary,
    kernel: Kernel,
    batch: np.ndarray,
    model: PoissonModel,
) -> np.ndarray:
    """Mini-batch average of the weight-space Poisson gradient over a fixed subspace.

    Per sample ``x``: ``g = -k_D(x) + h * sum_j exp(w . k_D(u_j)) k_D(u_j)``
    where ``D`` spans the search subspace (the grid itself by default).
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(weights) != len(subspace):
        raise ValueError("weights length must equal subspace size")
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    k_batch = kernel_matrix(kernel, subspace.atoms, batch)  # (|D|, B)
    k_grid = kernel_matrix(kernel, subspace.atoms, model.grid.atoms)  # (|D|, |U|)
    grid_vals = _clamped_exp(weights @ k_grid)
    return -k_batch.mean(axis=1) + model.cell_measure * (k_grid @ grid_vals)


def poisson_pseudo_gradient_weights(
    z: DualFunction, x: np.ndarray, model: PoissonModel
) -> np.ndarray:
    """Exact weight-space gradient of :func:`poisson_loss` at ``z``'s weights,
    with ``z``'s own dictionary as the fixed subspace."""
    return weight_space_gradient(z.weights, z.dictionary, z.kernel, x, model)


def verify_pseudo_gradient_property(
    z: DualFunction, model: PoissonModel, sample_batch: np.ndarray
) -> float:
    """Monte-Carlo estimate of the alignment between the expected search
    direction and the risk gradient.

    Embeds the batch-averaged pseudo-gradient as an RKHS element and returns
    its squared norm; near a stationary point the estimate vanishes, away
    from it the estimate is positive. Diagnostic only.
    """
    batch = np.atleast_2d(np.asarray(sample_batch, dtype=np.float64))
    n = len(batch)
    f_vals = z.mirror_map.grad_psi_conj(evaluate_dual_many(z, batch))
    signs = np.where(f_vals >= 0, 1.0, -1.0)
    f_vals = signs * np.maximum(np.abs(f_vals), 1e-12)  # keep 1/f finite
    atoms = np.vstack([batch, model.grid.atoms])
    coeffs = np.concatenate(
        [
            -1.0 / (n * f_vals),
            np.full(model.grid_size, model.cell_measure),
        ]
    )
    gram = kernel_matrix(z.kernel, atoms, atoms)
    return quadratic_form(gram, coeffs)


# ---------------------------------------------------------------------------
# multi-class kernel logistic regression


@dataclass(frozen=True)
class KLRModel:
    """Per-class score functions sharing one dictionary and kernel."""

    functions: tuple[DualFunction, ...]

    def __post_init__(self):
        if len(self.functions) < 2:
            raise ValueError("need at least 2 classes")
        base = self.functions[0]
        for f in self.functions[1:]:
            if f.kernel != base.kernel or len(f.dictionary) != len(base.dictionary):
                raise ValueError("class functions must share kernel and dictionary")

    @property
    def n_classes(self) -> int:
        return len(self.functions)

    def scores(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        base = self.functions[0]
        if base.model_order == 0:
            return np.zeros((x.shape[0], self.n_classes))
        k = kernel_matrix(base.kernel, x, base.dictionary.atoms)
        weight_matrix = np.column_stack([f.weights for f in self.functions])
        return k @ weight_matrix


def make_klr_model(kernel: Kernel, n_classes: int, dim: int) -> KLRModel:
    from .rkhs import SQUARED_NORM, zero_dual_function

    fns = tuple(
        zero_dual_function(kernel, MirrorMap(SQUARED_NORM), dim) for _ in range(n_classes)
    )
    return KLRModel(fns)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores)
    e = np.exp(shifted)
    return e / np.sum(e)


def klr_loss(model: KLRModel, x: np.ndarray, label: int) -> float:
    """Softmax cross-entropy ``log sum_c exp(f_c(x)) - f_y(x)``."""
    if not (0 <= label < model.n_classes):
        raise ValueError(f"label {label} outside 0..{model.n_classes - 1}")
    scores = model.scores(x)[0]
    m = np.max(scores)
    return float(m + np.log(np.sum(np.exp(scores - m))) - scores[label])


def klr_gradient(model: KLRModel, x: np.ndarray, label: int) -> np.ndarray:
    """Per-class new-atom coefficients at ``x``: softmax probabilities, with
    the true class shifted by ``-1``. Coefficients sum to zero."""
    if not (0 <= label < model.n_classes):
        raise ValueError(f"label {label} outside 0..{model.n_classes - 1}")
    probs = _softmax(model.scores(x)[0])
    probs[label] -= 1.0
    return probs


def klr_predict(model: KLRModel, points: np.ndarray) -> np.ndarray:
    """Maximum-score class assignment for each row of ``points``."""
    return np.argmax(model.scores(points), axis=1)
