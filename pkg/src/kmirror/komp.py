"""Destructive kernel orthogonal matching pursuit over dual iterates.

Pruning greedily removes the atom whose removal-plus-refit keeps the
compressed function closest to the original, stopping once every candidate
removal would cost more than the budget. Refits are least-squares over the
reduced dictionary against the ORIGINAL function, matching the fixed
objective of the greedy listing. Atoms carrying ``fixed_mask`` (quadrature
grid points) are never pruned.

``komp_prune`` is a pure transformation; candidate residuals within a round
could be evaluated in parallel over a read-only shared Gram, with the pruning
decision itself single-threaded.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .kernels import Dictionary, Kernel, kernel_matrix
from .rkhs import DualFunction, quadratic_form

GRAM_JITTER = 1e-10


@dataclass(frozen=True)
class ConstantBudget:
    """Fixed compression budget ``epsilon >= 0`` applied at every step."""

    epsilon: float

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("compression budget must be >= 0")


@dataclass(frozen=True)
class AdaptiveBudget:
    """Feedback-controlled budget: per-step ``epsilon_t = alpha * eta``.

    ``alpha`` is nudged up when the model order exceeds the target ``d_mo``
    and down when it falls short, clamped to ``alpha_bounds`` (defaults to
    two orders of magnitude around the initial value).
    """

    alpha: float
    d_mo: int
    alpha_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.alpha_bounds is None:
            object.__setattr__(self, "alpha_bounds", (self.alpha / 100.0, self.alpha * 100.0))


BudgetPolicy = ConstantBudget | AdaptiveBudget


def adaptive_budget_update(policy: AdaptiveBudget, model_order: int) -> AdaptiveBudget:
    """One feedback step: ``alpha *= 1 + clamp((M_t - d_mo) * 0.001, -0.1, 0.1)``."""
    nudge = min(max((model_order - policy.d_mo) * 0.001, -0.1), 0.1)
    lo, hi = policy.alpha_bounds
    alpha = min(max(policy.alpha * (1.0 + nudge), lo), hi)
    return replace(policy, alpha=alpha)


def _gram_factorization(gram: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Eigen-factorize a Gram block into features plus a screening inverse.

    Returns ``(phi, inv, clean)`` where ``phi`` has one column per atom with
    ``phi.T @ phi ~= gram`` (negative round-off eigenvalues clamped), ``inv``
    is the (jittered when degenerate) inverse used for candidate screening,
    and ``clean`` says whether the block was comfortably nonsingular.
    Residuals measured as explicit vectors in the ``phi`` coordinates are
    cancellation-free, which matters when the budget sits far below the
    norm of the function being compressed.
    """
    n = len(gram)
    if n == 0:
        return np.empty((0, 0)), np.empty((0, 0)), True
    evals, evecs = np.linalg.eigh(gram)
    lam_max = max(float(evals[-1]), 0.0)
    clipped = np.maximum(evals, 0.0)
    clipped[clipped < lam_max * 1e-18] = 0.0
    phi = np.sqrt(clipped)[:, None] * evecs.T
    clean = lam_max > 0.0 and float(evals[0]) > lam_max * 1e-9
    denom = evals if clean else clipped + GRAM_JITTER
    inv = (evecs / denom) @ evecs.T
    return phi, inv, clean


def _solve_reduced(gram: np.ndarray, rhs: np.ndarray, conditioning: str = "unknown") -> np.ndarray:
    """Solve the normal equations for a refit.

    On an ill-conditioned Gram the plain solution can carry enormous
    weights, which poisons the residual quadratic form; in that case the
    jitter-regularized small-norm solution is used instead. ``conditioning``
    ("good" / "bad" / "unknown") lets callers who already probed the parent
    Gram skip one of the two solves.
    """
    n = len(gram)
    if n == 0:
        return rhs.copy()
    if conditioning == "bad":
        return np.linalg.solve(gram + GRAM_JITTER * np.eye(n), rhs)
    if conditioning == "good":
        return np.linalg.solve(gram, rhs)
    jittered = np.linalg.solve(gram + GRAM_JITTER * np.eye(n), rhs)
    try:
        plain = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return jittered
    if not np.all(np.isfinite(plain)):
        return jittered
    if np.abs(plain).max() > 1e3 * (np.abs(jittered).max() + 1e-300):
        return jittered
    return plain


def removal_residual(z: DualFunction, index: int) -> tuple[float, np.ndarray]:
    """Residual norm and refit weights for removing one removable atom.

    The refit solves the normal equations over the reduced dictionary against
    ``z`` itself; the residual is the direct Gram quadratic form
    ``||z||^2 - 2 <refit, z> + ||refit||^2`` clamped at zero.
    """
    m = z.model_order
    if index < 0 or index >= m:
        raise IndexError(f"atom index {index} out of range for model order {m}")
    if z.dictionary.fixed_mask[index]:
        raise ValueError(f"atom {index} is fixed and cannot be removed")
    keep = np.ones(m, dtype=bool)
    keep[index] = False
    if z.weights[index] == 0.0:
        # removing a zero-weight atom leaves the function untouched
        return 0.0, z.weights[keep].copy()
    atoms = z.dictionary.atoms
    gram_full = kernel_matrix(z.kernel, atoms, atoms)
    norm2 = quadratic_form(gram_full, z.weights)
    gram_red = gram_full[np.ix_(keep, keep)]
    rhs = gram_full[keep] @ z.weights
    refit = _solve_reduced(gram_red, rhs)
    r2 = norm2 - 2.0 * float(refit @ rhs) + float(refit @ (gram_red @ refit))
    return float(np.sqrt(max(r2, 0.0))), refit


def _prune_engine(
    kernel: Kernel,
    dictionary: Dictionary,
    weight_matrix: np.ndarray,
    epsilon: float,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Greedy destructive pruning over a (model_order, n_functions) weight matrix.

    Returns (kept original indices in order, refit weight matrix, residual
    norm of the output measured against the original function).
    """
    m_full = len(dictionary)
    if m_full == 0:
        return np.empty(0, dtype=int), weight_matrix.copy(), 0.0

    gram_full = kernel_matrix(kernel, dictionary.atoms, dictionary.atoms)
    rhs_full = gram_full @ weight_matrix  # row i: <k(a_i,.), z~> per function
    norm2_full = float(np.sum(weight_matrix * rhs_full))

    active = np.arange(m_full)
    weights_cur = weight_matrix.copy()
    eps2 = epsilon * epsilon
    gamma2_cur = 0.0
    residual_out = 0.0
    # while only all-zero-weight atoms have been removed the representation is
    # exact and those removals cost exactly zero
    zero_rows = np.all(weight_matrix == 0.0, axis=1)
    exact_mode = True

    kinv, clean = _robust_inverse(gram_full)
    conditioning = "good" if clean else "bad"
    coeff = kinv @ rhs_full  # current optimal refit, screening-side

    while True:
        removable = ~dictionary.fixed_mask[active]
        if not np.any(removable):
            break
        if np.any(np.diag(kinv) <= 0.0):
            # screening inverse degraded across downdates: rebuild it
            sub = np.ix_(active, active)
            kinv, clean = _robust_inverse(gram_full[sub])
            conditioning = "good" if clean else "bad"
            coeff = kinv @ rhs_full[active]
        m = len(active)
        scores = gamma2_cur + np.sum(coeff**2, axis=1) / np.diag(kinv)
        scores = np.maximum(scores, 0.0)
        if exact_mode:
            scores[zero_rows[active]] = gamma2_cur
        scores[~removable] = np.inf

        pruned_pos = -1
        refit = None
        r2 = np.inf
        for walk, pos in enumerate(np.argsort(scores, kind="stable")):
            if scores[pos] > eps2 or not removable[pos] or walk >= 32:
                break
            is_exact_zero = exact_mode and zero_rows[active[pos]]
            keep = np.ones(m, dtype=bool)
            keep[pos] = False
            accept = False
            if is_exact_zero:
                refit = weights_cur[keep]
                r2 = gamma2_cur
                accept = r2 <= eps2
            else:
                # confirm with a fresh stable solve plus the direct quadratic
                # form against the original; the screening value is only a hint
                sub = np.ix_(active[keep], active[keep])
                gram_red = gram_full[sub]
                rhs_red = rhs_full[active[keep]]
                refit = _solve_reduced(gram_red, rhs_red, conditioning)
                cross = refit * rhs_red
                gram_term = refit * (gram_red @ refit)
                r2 = norm2_full - 2.0 * float(np.sum(cross)) + float(np.sum(gram_term))
                r2 = max(r2, 0.0)
                if r2 <= eps2:
                    accept = True
                else:
                    # cancellation floor of the quadratic form: below it the
                    # direct value cannot certify anything, and the cheaper
                    # cancellation-free screening estimate decides instead
                    noise = 64.0 * np.finfo(np.float64).eps * (
                        abs(norm2_full)
                        + 2.0 * float(np.sum(np.abs(cross)))
                        + float(np.sum(np.abs(gram_term)))
                    )
                    if r2 <= noise and scores[pos] <= eps2:
                        r2 = float(scores[pos])
                        accept = True
            if accept:
                pruned_pos = pos
                break
        if pruned_pos < 0:
            break

        pos = pruned_pos
        keep = np.ones(m, dtype=bool)
        keep[pos] = False
        kcol = kinv[keep, pos]
        coeff = coeff[keep] - np.outer(kcol, coeff[pos]) / kinv[pos, pos]
        kinv = kinv[np.ix_(keep, keep)] - np.outer(kcol, kcol) / kinv[pos, pos]
        if not (exact_mode and zero_rows[active[pos]]):
            exact_mode = False
        weights_cur = refit
        active = active[keep]
        gamma2_cur = r2
        residual_out = float(np.sqrt(r2))
        if len(active) == 0:
            break

    return active, weights_cur, residual_out


def komp_prune_detailed(z: DualFunction, epsilon: float) -> tuple[DualFunction, float]:
    """Prune ``z`` with budget ``epsilon``; also return the residual norm.

    The residual is the RKHS distance between the output and the input,
    guaranteed ``<= epsilon`` by the greedy stopping rule.
    """
    if epsilon < 0:
        raise ValueError("compression budget must be >= 0")
    weight_matrix = z.weights.reshape(-1, 1)
    kept, weights, residual = _prune_engine(z.kernel, z.dictionary, weight_matrix, epsilon)
    if len(kept) == z.model_order:
        return z, residual
    out = z.with_(dictionary=z.dictionary.take(kept), weights=weights[:, 0])
    return out, residual


def komp_prune(z: DualFunction, epsilon: float) -> DualFunction:
    """Compress ``z`` to a lower-order function at most ``epsilon`` away."""
    return komp_prune_detailed(z, epsilon)[0]


def komp_prune_joint(functions: list[DualFunction], epsilon: float) -> tuple[list[DualFunction], float]:
    """Jointly prune several functions sharing one dictionary.

    The removal criterion is the stacked residual ``sqrt(sum_c gamma_c^2)``,
    so the shared dictionary stays valid for every function. Used by the
    multi-class classifier, where each class holds one weight vector.
    """
    if epsilon < 0:
        raise ValueError("compression budget must be >= 0")
    if not functions:
        return [], 0.0
    base = functions[0]
    for f in functions[1:]:
        if f.kernel != base.kernel or len(f.dictionary) != len(base.dictionary):
            raise ValueError("joint pruning requires a shared kernel and dictionary")
    weight_matrix = np.column_stack([f.weights for f in functions])
    kept, weights, residual = _prune_engine(base.kernel, base.dictionary, weight_matrix, epsilon)
    if len(kept) == base.model_order:
        return list(functions), residual
    new_dict = base.dictionary.take(kept)
    out = [f.with_(dictionary=new_dict, weights=weights[:, i]) for i, f in enumerate(functions)]
    return out, residual
