"""Online training loops: sparse pseudo-mirror descent, the squared-norm and
fixed-grid baselines, the online quasi-Newton mirror step, the hybrid
first/second-order scheme, and dual averaging.

Each optimizer state is an immutable snapshot; steps return new states.
States are single-owner: mutate-by-replace single-threaded, transferable
between threads between steps. Parameter sweeps run one optimizer per worker
with no shared mutable state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .kernels import Dictionary, Kernel, gram_matrix
from .komp import (
    AdaptiveBudget,
    BudgetPolicy,
    ConstantBudget,
    adaptive_budget_update,
    komp_prune_detailed,
    komp_prune_joint,
)
from .models import (
    KLRModel,
    PoissonModel,
    klr_gradient,
    weight_space_gradient,
)
from .rkhs import (
    KL,
    SQUARED_NORM,
    DualFunction,
    MirrorMap,
    _clamped_exp,
    evaluate_dual_many,
)


class NumericalBreakdown(RuntimeError):
    """Raised when a rank-one inverse update loses positive definiteness."""


def _budget_epsilon(budget: BudgetPolicy, eta: float) -> float:
    if isinstance(budget, AdaptiveBudget):
        return budget.alpha * eta
    return budget.epsilon


def _maybe_adapt(budget: BudgetPolicy, model_order: int) -> BudgetPolicy:
    if isinstance(budget, AdaptiveBudget):
        return adaptive_budget_update(budget, model_order)
    return budget


# ---------------------------------------------------------------------------
# first-order mirror descent over a growing dictionary


@dataclass(frozen=True)
class SpppotState:
    """Iterate of the first-order scheme: the dual function plus its knobs.

    ``last_residual``/``last_epsilon`` record the compression applied on the
    most recent step for runtime guarantee audits.
    """

    z: DualFunction
    eta: float
    budget: BudgetPolicy
    step_count: int = 0
    seed: int | None = None
    reciprocal_floor: float = 1e-2
    last_residual: float = 0.0
    last_epsilon: float = 0.0


def init_spppot_state(
    kernel: Kernel,
    model: PoissonModel,
    eta: float,
    budget: BudgetPolicy,
    seed: int | None = None,
) -> SpppotState:
    """Grid atoms fixed in the dictionary, each starting at weight ``-eta * h``."""
    w0 = np.full(model.grid_size, -eta * model.cell_measure)
    z0 = DualFunction(model.grid, w0, MirrorMap(KL), kernel)
    return SpppotState(z=z0, eta=eta, budget=budget, seed=seed)


def init_polk_state(
    kernel: Kernel,
    model: PoissonModel,
    eta: float,
    budget: BudgetPolicy,
    init_level: float = 1.0,
    seed: int | None = None,
) -> SpppotState:
    """Squared-norm baseline started near the constant ``init_level`` density.

    The identity map offers no positivity protection, so a uniform positive
    start keeps the early reciprocal-loss terms sane.
    """
    row_sums = gram_matrix(kernel, model.grid).sum(axis=1)
    w0 = np.full(model.grid_size, init_level / float(row_sums.mean()))
    z0 = DualFunction(model.grid, w0, MirrorMap(SQUARED_NORM), kernel)
    return SpppotState(z=z0, eta=eta, budget=budget, seed=seed)


def _floored_reciprocal(values: np.ndarray, floor: float) -> np.ndarray:
    signs = np.where(values >= 0, 1.0, -1.0)
    return 1.0 / (signs * np.maximum(np.abs(values), floor))


def _mirror_descent_step(state: SpppotState, batch: np.ndarray, model: PoissonModel) -> SpppotState:
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    n = len(batch)
    z = state.z
    zx = evaluate_dual_many(z, batch)
    if z.mirror_map.kind == KL:
        recip = 1.0 / _clamped_exp(zx)
    else:
        recip = _floored_reciprocal(zx, state.reciprocal_floor)

    # batch-averaged pseudo-gradient: grid part h on every grid atom, plus a
    # kernel section per sample with coefficient -recip/n; the mirror update
    # applies -eta times these coefficients
    weights = z.weights.copy()
    weights[z.dictionary.fixed_mask] -= state.eta * model.cell_measure

    lookup = {atom.tobytes(): i for i, atom in enumerate(z.dictionary.atoms)}
    new_atoms: list[np.ndarray] = []
    new_weights: list[float] = []
    extra: dict[bytes, int] = {}
    for i in range(n):
        x = batch[i]
        bump = state.eta * recip[i] / n
        key = x.tobytes()
        if key in lookup:
            weights[lookup[key]] += bump
        elif key in extra:
            new_weights[extra[key]] += bump
        else:
            extra[key] = len(new_atoms)
            new_atoms.append(x)
            new_weights.append(bump)

    dictionary = z.dictionary
    if new_atoms:
        dictionary = dictionary.append(np.vstack(new_atoms), fixed=False)
        weights = np.concatenate([weights, np.asarray(new_weights)])
    z_tilde = z.with_(dictionary=dictionary, weights=weights)

    eps_t = _budget_epsilon(state.budget, state.eta)
    z_next, residual = komp_prune_detailed(z_tilde, eps_t)
    budget = _maybe_adapt(state.budget, z_next.model_order)
    return replace(
        state,
        z=z_next,
        budget=budget,
        step_count=state.step_count + 1,
        last_residual=residual,
        last_epsilon=eps_t,
    )


def spppot_step(state: SpppotState, batch: np.ndarray, model: PoissonModel) -> SpppotState:
    """One projected pseudo-mirror-descent step under the KL geometry."""
    if state.z.mirror_map.kind != KL:
        raise ValueError("spppot_step requires the KL mirror map")
    return _mirror_descent_step(state, batch, model)


def polk_step(state: SpppotState, batch: np.ndarray, model: PoissonModel) -> SpppotState:
    """Functional SGD under the identity map; positivity is not enforced."""
    if state.z.mirror_map.kind != SQUARED_NORM:
        raise ValueError("polk_step requires the squared-norm mirror map")
    return _mirror_descent_step(state, batch, model)


# ---------------------------------------------------------------------------
# fixed-subspace methods


@dataclass(frozen=True)
class EtaSchedule:
    """Constant step size, or ``min(cap, sched * (2t+1)/(t+1)^2)`` when
    ``sched`` is set."""

    cap: float
    sched: float | None = None

    def at(self, t: int) -> float:
        if self.sched is None:
            return self.cap
        return min(self.cap, self.sched * (2.0 * t + 1.0) / (t + 1.0) ** 2)


@dataclass(frozen=True)
class PmdState:
    """Plain mirror descent restricted to the fixed grid subspace."""

    weights: np.ndarray
    subspace: Dictionary
    kernel: Kernel
    eta: float
    step_count: int = 0
    seed: int | None = None


def init_pmd_state(
    kernel: Kernel, model: PoissonModel, eta: float, w0: float = -0.01, seed: int | None = None
) -> PmdState:
    return PmdState(
        weights=np.full(model.grid_size, w0),
        subspace=model.grid,
        kernel=kernel,
        eta=eta,
        seed=seed,
    )


def pmd_step(state: PmdState, batch: np.ndarray, model: PoissonModel) -> PmdState:
    """Weight-space gradient step over the grid; the dictionary never changes."""
    g = weight_space_gradient(state.weights, state.subspace, state.kernel, batch, model)
    return replace(state, weights=state.weights - state.eta * g, step_count=state.step_count + 1)


@dataclass(frozen=True)
class HessianState:
    """Regularized gradient-outer-product matrix and its maintained inverse.

    ``a`` is kept explicitly so its largest eigenvalue (the inverse's lower
    spectral bound) can be audited cheaply.
    """

    a_inv: np.ndarray
    a: np.ndarray
    delta: float


def init_hessian_state(dim: int, delta: float) -> HessianState:
    if delta <= 0:
        raise ValueError("regularizer delta must be > 0")
    eye = np.eye(dim)
    return HessianState(a_inv=eye / delta, a=eye * delta, delta=delta)


def sherman_morrison_update(hs: HessianState, g: np.ndarray) -> HessianState:
    """Rank-one update ``A += g g'`` maintained on the inverse.

    ``(A + gg')^{-1} = A^{-1} - (A^{-1} g g' A^{-1}) / (1 + g' A^{-1} g)``;
    a nonpositive denominator signals loss of positive definiteness and
    raises without touching the input state.
    """
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if g.shape[0] != hs.a_inv.shape[0]:
        raise ValueError("gradient dimension does not match the Hessian subspace")
    v = hs.a_inv @ g
    denom = 1.0 + float(g @ v)
    if denom <= 0.0:
        raise NumericalBreakdown(f"rank-one update denominator {denom} <= 0")
    a_inv = hs.a_inv - np.outer(v, v) / denom
    a_inv = 0.5 * (a_inv + a_inv.T)
    return replace(hs, a_inv=a_inv, a=hs.a + np.outer(g, g))


@dataclass(frozen=True)
class QuasiNewtonState:
    """Weights over a fixed subspace plus the maintained curvature estimate."""

    weights: np.ndarray
    subspace: Dictionary
    kernel: Kernel
    hessian: HessianState
    eta: EtaSchedule
    step_count: int = 0
    seed: int | None = None


def init_quasi_newton_state(
    kernel: Kernel,
    subspace: Dictionary,
    delta: float,
    eta: EtaSchedule | float,
    w0: np.ndarray | float = -0.01,
    seed: int | None = None,
) -> QuasiNewtonState:
    if isinstance(eta, (int, float)):
        eta = EtaSchedule(cap=float(eta))
    if isinstance(w0, (int, float)):
        w0 = np.full(len(subspace), float(w0))
    return QuasiNewtonState(
        weights=np.asarray(w0, dtype=np.float64),
        subspace=subspace,
        kernel=kernel,
        hessian=init_hessian_state(len(subspace), delta),
        eta=eta,
        seed=seed,
    )


def quasi_newton_step(state: QuasiNewtonState, x: np.ndarray, model: PoissonModel) -> QuasiNewtonState:
    """Curvature update first, then the preconditioned weight step."""
    g = weight_space_gradient(state.weights, state.subspace, state.kernel, x, model)
    hessian = sherman_morrison_update(state.hessian, g)
    eta_t = state.eta.at(state.step_count)
    w = state.weights - eta_t * (hessian.a_inv @ g)
    return replace(state, weights=w, hessian=hessian, step_count=state.step_count + 1)


def quasi_newton_dual_function(state: QuasiNewtonState) -> DualFunction:
    return DualFunction(state.subspace, state.weights, MirrorMap(KL), state.kernel)


# ---------------------------------------------------------------------------
# hybrid first/second-order scheme


@dataclass(frozen=True)
class HybridConfig:
    eta_phase1: float
    eta_phase2: float
    budget: BudgetPolicy
    delta: float
    batch_phase1: int = 30
    stability_window: int = 200


@dataclass(frozen=True)
class HybridResult:
    z: DualFunction
    switched: bool
    switch_step: int | None
    warning: str | None
    phase1_state: SpppotState
    phase2_state: QuasiNewtonState | None


def hybrid_run(
    config: HybridConfig,
    kernel: Kernel,
    model: PoissonModel,
    stream: np.ndarray,
    on_step=None,
) -> HybridResult:
    """Run the first-order scheme until the model order is stable, then
    freeze its dictionary as the quasi-Newton subspace for the rest of the
    stream (one sample per second-phase step).

    If the stream is exhausted before stability, the first-phase estimate is
    returned with a warning flag.
    """
    stream = np.atleast_2d(np.asarray(stream, dtype=np.float64))
    n = len(stream)
    b = config.batch_phase1
    state = init_spppot_state(kernel, model, config.eta_phase1, config.budget)
    window = config.stability_window

    consumed = 0
    stable = 0
    last_order = state.z.model_order
    while consumed + b <= n:
        batch = stream[consumed : consumed + b]
        consumed += b
        state = spppot_step(state, batch, model)
        if on_step is not None:
            on_step("phase1", state, consumed)
        order = state.z.model_order
        if order == last_order:
            stable += 1
        else:
            stable = 1
            last_order = order
        if stable >= window:
            break
    else:
        return HybridResult(
            z=state.z,
            switched=False,
            switch_step=None,
            warning="stream exhausted before the model order stabilized",
            phase1_state=state,
            phase2_state=None,
        )

    frozen = Dictionary(state.z.dictionary.atoms, np.ones(state.z.model_order, dtype=bool))
    qn = init_quasi_newton_state(
        kernel, frozen, config.delta, config.eta_phase2, w0=state.z.weights.copy()
    )
    switch_step = state.step_count
    while consumed < n:
        qn = quasi_newton_step(qn, stream[consumed], model)
        consumed += 1
        if on_step is not None:
            on_step("phase2", qn, consumed)
    return HybridResult(
        z=quasi_newton_dual_function(qn),
        switched=True,
        switch_step=switch_step,
        warning=None,
        phase1_state=state,
        phase2_state=qn,
    )


# ---------------------------------------------------------------------------
# dual averaging


@dataclass(frozen=True)
class DualAveragingState:
    """Accumulator of raw pseudo-gradients; the primal estimate is recovered
    as ``grad_psi_conj(-eta * h(x))``."""

    h: DualFunction
    eta: float
    budget: BudgetPolicy
    step_count: int = 0
    reciprocal_floor: float = 1e-2
    last_residual: float = 0.0
    last_epsilon: float = 0.0


def init_dual_averaging_state(
    kernel: Kernel,
    model: PoissonModel,
    eta: float,
    budget: BudgetPolicy,
    mirror_kind: str = KL,
    seed_grid: bool | None = None,
) -> DualAveragingState:
    """Under KL the accumulator starts with one grid-part contribution so that
    ``-eta * h_0`` matches the mirror-descent initialization; under the
    identity map it starts at zero."""
    if seed_grid is None:
        seed_grid = mirror_kind == KL
    if seed_grid:
        w0 = np.full(model.grid_size, model.cell_measure)
        h0 = DualFunction(model.grid, w0, MirrorMap(mirror_kind), kernel)
    else:
        grid = model.grid
        h0 = DualFunction(grid, np.zeros(len(grid)), MirrorMap(mirror_kind), kernel)
    return DualAveragingState(h=h0, eta=eta, budget=budget)


def dual_averaging_primal(state: DualAveragingState, points: np.ndarray) -> np.ndarray:
    hv = evaluate_dual_many(state.h, points)
    return state.h.mirror_map.grad_psi_conj(-state.eta * hv)


def dual_averaging_step(
    state: DualAveragingState, batch: np.ndarray, model: PoissonModel
) -> DualAveragingState:
    """Accumulate the batch-averaged pseudo-gradient into ``h`` and compress."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    n = len(batch)
    h = state.h
    fx = dual_averaging_primal(state, batch)
    if h.mirror_map.kind == KL:
        recip = 1.0 / np.maximum(fx, 1e-300)
    else:
        recip = 1.0 / np.where(
            fx >= 0, np.maximum(fx, state.reciprocal_floor), np.minimum(fx, -state.reciprocal_floor)
        )

    weights = h.weights.copy()
    weights[h.dictionary.fixed_mask] += model.cell_measure

    lookup = {atom.tobytes(): i for i, atom in enumerate(h.dictionary.atoms)}
    new_atoms: list[np.ndarray] = []
    new_weights: list[float] = []
    extra: dict[bytes, int] = {}
    for i in range(n):
        x = batch[i]
        add = -recip[i] / n
        key = x.tobytes()
        if key in lookup:
            weights[lookup[key]] += add
        elif key in extra:
            new_weights[extra[key]] += add
        else:
            extra[key] = len(new_atoms)
            new_atoms.append(x)
            new_weights.append(add)

    dictionary = h.dictionary
    if new_atoms:
        dictionary = dictionary.append(np.vstack(new_atoms), fixed=False)
        weights = np.concatenate([weights, np.asarray(new_weights)])
    h_tilde = h.with_(dictionary=dictionary, weights=weights)

    eps_t = _budget_epsilon(state.budget, state.eta)
    h_next, residual = komp_prune_detailed(h_tilde, eps_t)
    budget = _maybe_adapt(state.budget, h_next.model_order)
    return replace(
        state,
        h=h_next,
        budget=budget,
        step_count=state.step_count + 1,
        last_residual=residual,
        last_epsilon=eps_t,
    )


# ---------------------------------------------------------------------------
# multi-class kernel logistic regression with a shared dictionary


@dataclass(frozen=True)
class KlrState:
    model: KLRModel
    eta: float
    budget: BudgetPolicy
    step_count: int = 0
    last_residual: float = 0.0
    last_epsilon: float = 0.0


def klr_spppot_step(state: KlrState, batch: np.ndarray, labels: np.ndarray) -> KlrState:
    """Per-class functional SGD on the softmax loss plus joint compression."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if len(batch) != len(labels) or len(batch) == 0:
        raise ValueError("batch and labels must be nonempty and equal length")
    n = len(batch)
    klr = state.model
    base = klr.functions[0]

    weight_matrix = np.column_stack([f.weights for f in klr.functions])
    lookup = {atom.tobytes(): i for i, atom in enumerate(base.dictionary.atoms)}
    new_atoms: list[np.ndarray] = []
    new_rows: list[np.ndarray] = []
    extra: dict[bytes, int] = {}
    for i in range(n):
        coeffs = klr_gradient(klr, batch[i], int(labels[i]))
        row = -state.eta * coeffs / n
        key = batch[i].tobytes()
        if key in lookup:
            weight_matrix[lookup[key]] += row
        elif key in extra:
            new_rows[extra[key]] += row
        else:
            extra[key] = len(new_atoms)
            new_atoms.append(batch[i])
            new_rows.append(row)

    dictionary = base.dictionary
    if new_atoms:
        dictionary = dictionary.append(np.vstack(new_atoms), fixed=False)
        weight_matrix = np.vstack([weight_matrix, np.asarray(new_rows)])

    functions = [
        f.with_(dictionary=dictionary, weights=weight_matrix[:, c])
        for c, f in enumerate(klr.functions)
    ]
    eps_t = _budget_epsilon(state.budget, state.eta)
    pruned, residual = komp_prune_joint(functions, eps_t)
    budget = _maybe_adapt(state.budget, pruned[0].model_order)
    return replace(
        state,
        model=KLRModel(tuple(pruned)),
        budget=budget,
        step_count=state.step_count + 1,
        last_residual=residual,
        last_epsilon=eps_t,
    )


# ---------------------------------------------------------------------------
# checkpointing

_BUDGET_KINDS = {"constant": ConstantBudget, "adaptive": AdaptiveBudget}


def _budget_to_dict(budget: BudgetPolicy) -> dict:
    if isinstance(budget, ConstantBudget):
        return {"kind": "constant", "epsilon": budget.epsilon}
    return {
        "kind": "adaptive",
        "alpha": budget.alpha,
        "d_mo": budget.d_mo,
        "alpha_bounds": list(budget.alpha_bounds),
    }


def _budget_from_dict(d: dict) -> BudgetPolicy:
    if d["kind"] == "constant":
        return ConstantBudget(d["epsilon"])
    return AdaptiveBudget(d["alpha"], int(d["d_mo"]), tuple(d["alpha_bounds"]))


def state_to_json(state: SpppotState | QuasiNewtonState) -> str:
    """Checkpoint snapshot; floats survive the round trip bit-exactly."""
    if isinstance(state, SpppotState):
        payload = {
            "type": "spppot",
            "kernel": state.z.kernel.to_dict(),
            "map": state.z.mirror_map.kind,
            "atoms": state.z.dictionary.atoms.tolist(),
            "fixed_mask": state.z.dictionary.fixed_mask.tolist(),
            "weights": state.z.weights.tolist(),
            "eta": state.eta,
            "budget": _budget_to_dict(state.budget),
            "step_count": state.step_count,
            "seed": state.seed,
            "reciprocal_floor": state.reciprocal_floor,
        }
    elif isinstance(state, QuasiNewtonState):
        payload = {
            "type": "quasi_newton",
            "kernel": state.kernel.to_dict(),
            "atoms": state.subspace.atoms.tolist(),
            "fixed_mask": state.subspace.fixed_mask.tolist(),
            "weights": state.weights.tolist(),
            "a_inv": state.hessian.a_inv.reshape(-1).tolist(),
            "a": state.hessian.a.reshape(-1).tolist(),
            "delta": state.hessian.delta,
            "eta_cap": state.eta.cap,
            "eta_sched": state.eta.sched,
            "step_count": state.step_count,
            "seed": state.seed,
        }
    else:
        raise TypeError(f"cannot checkpoint {type(state).__name__}")
    return json.dumps(payload)


def state_from_json(text: str) -> SpppotState | QuasiNewtonState:
    payload = json.loads(text)
    kernel = Kernel.from_dict(payload["kernel"])
    atoms = np.asarray(payload["atoms"], dtype=np.float64)
    if atoms.size == 0:
        atoms = atoms.reshape(0, 1)
    dictionary = Dictionary(atoms, np.asarray(payload["fixed_mask"], dtype=bool))
    if payload["type"] == "spppot":
        z = DualFunction(
            dictionary,
            np.asarray(payload["weights"], dtype=np.float64),
            MirrorMap(payload["map"]),
            kernel,
        )
        return SpppotState(
            z=z,
            eta=payload["eta"],
            budget=_budget_from_dict(payload["budget"]),
            step_count=int(payload["step_count"]),
            seed=payload["seed"],
            reciprocal_floor=payload["reciprocal_floor"],
        )
    if payload["type"] == "quasi_newton":
        m = len(dictionary)
        hessian = HessianState(
            a_inv=np.asarray(payload["a_inv"], dtype=np.float64).reshape(m, m),
            a=np.asarray(payload["a"], dtype=np.float64).reshape(m, m),
            delta=payload["delta"],
        )
        return QuasiNewtonState(
            weights=np.asarray(payload["weights"], dtype=np.float64),
            subspace=dictionary,
            kernel=kernel,
            hessian=hessian,
            eta=EtaSchedule(cap=payload["eta_cap"], sched=payload["eta_sched"]),
            step_count=int(payload["step_count"]),
            seed=payload["seed"],
        )
    raise ValueError(f"unknown checkpoint type: {payload['type']!r}")
