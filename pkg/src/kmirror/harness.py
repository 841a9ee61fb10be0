"""Experiment configuration, metric computation, and run orchestration.

One experiment is one worker; sweeps fan out independent configs to a
bounded process pool with results merged by filename.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    DataError,
    PointStream,
    load_points_csv,
    make_multiclass_blobs,
    sample_toy_stream,
    toy_ground_truth_density,
)
from .kernels import Kernel
from .komp import AdaptiveBudget, BudgetPolicy, ConstantBudget
from .models import (
    KLRModel,
    PoissonModel,
    klr_loss,
    klr_predict,
    make_klr_model,
    make_poisson_model,
)
from .optimizers import (
    DualAveragingState,
    EtaSchedule,
    HybridConfig,
    KlrState,
    NumericalBreakdown,
    PmdState,
    QuasiNewtonState,
    SpppotState,
    dual_averaging_step,
    hybrid_run,
    init_dual_averaging_state,
    init_pmd_state,
    init_polk_state,
    init_quasi_newton_state,
    init_spppot_state,
    klr_spppot_step,
    pmd_step,
    polk_step,
    quasi_newton_step,
    spppot_step,
    state_to_json,
)
from .rkhs import (
    KL,
    SQUARED_NORM,
    DualFunction,
    MirrorMap,
    _clamped_exp,
    dual_function_to_json,
    evaluate_dual_many,
    evaluate_primal_many,
    reset_saturation_events,
    saturation_events,
)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


ALGORITHMS = ("spppot", "polk", "pmd", "quasi_newton", "hybrid", "dual_averaging", "klr_spppot")
CSV_COLUMNS = ("step", "samples_processed", "train_loss", "test_loss", "model_order", "rmse", "wall_time_ms")


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    samples_processed: int
    train_loss: float
    test_loss: float
    model_order: int
    rmse: float | None
    wall_time_ms: float


@dataclass
class ExperimentConfig:
    algorithm: str
    kernel: Kernel
    dataset: dict
    seed: int = 0
    eta: float | None = None
    eta_phase1: float | None = None
    eta_phase2: float | None = None
    eta_sched: float | None = None
    budget: BudgetPolicy | None = None
    minibatch: int = 1
    epochs: int = 1
    grid_size: int | None = None
    domain: tuple[tuple[float, float], ...] | None = None
    delta: float | None = None
    record_every: int = 10
    stability_window: int = 200
    audit_every: int = 25
    polk_init_level: float = 1.0
    out_dir: str | None = None
    extras: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm: unknown value {self.algorithm!r}")
        second_order = self.algorithm in ("quasi_newton", "hybrid")
        if second_order and (self.delta is None or self.delta <= 0):
            raise ConfigError("delta: required and > 0 for second-order algorithms")
        if self.algorithm == "hybrid":
            if self.eta_phase1 is None or self.eta_phase2 is None:
                raise ConfigError("eta_phase1/eta_phase2: required for the hybrid algorithm")
        elif self.algorithm != "klr_spppot" and self.eta is None:
            raise ConfigError("eta: required")
        if self.algorithm in ("spppot", "polk", "dual_averaging", "hybrid", "klr_spppot"):
            if self.budget is None:
                raise ConfigError("budget: required for compressing algorithms")
        if self.algorithm == "klr_spppot":
            if self.eta is None:
                raise ConfigError("eta: required")
            if self.dataset.get("kind") not in ("blobs", "csv"):
                raise ConfigError("dataset.kind: klr_spppot needs 'blobs' or labeled 'csv'")
        else:
            if self.grid_size is None or self.grid_size < 1:
                raise ConfigError("grid_size: required for intensity models")
            if self.domain is None:
                raise ConfigError("domain: required for intensity models")
        if self.minibatch < 1:
            raise ConfigError("minibatch: must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.record_every < 1:
            raise ConfigError("record_every: must be >= 1")


def _budget_from_config(d: dict | None) -> BudgetPolicy | None:
    if d is None:
        return None
    kind = d.get("kind")
    if kind == "constant":
        if "epsilon" not in d:
            raise ConfigError("budget.epsilon: required for constant budgets")
        return ConstantBudget(float(d["epsilon"]))
    if kind == "adaptive":
        for key in ("alpha0", "d_mo"):
            if key not in d:
                raise ConfigError(f"budget.{key}: required for adaptive budgets")
        bounds = d.get("alpha_bounds")
        return AdaptiveBudget(
            float(d["alpha0"]),
            int(d["d_mo"]),
            tuple(float(v) for v in bounds) if bounds else None,
        )
    raise ConfigError(f"budget.kind: unknown value {kind!r}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    try:
        kernel_raw = raw["kernel"]
        if kernel_raw.get("family", "gaussian") == "gaussian":
            kernel = Kernel("gaussian", bandwidth=float(kernel_raw["bandwidth"]))
        else:
            kernel = Kernel(
                "polynomial",
                offset=float(kernel_raw.get("offset", 0.0)),
                degree=int(kernel_raw["degree"]),
            )
    except KeyError as exc:
        raise ConfigError(f"kernel.{exc.args[0]}: missing") from None
    if "algorithm" not in raw:
        raise ConfigError("algorithm: missing")
    if "dataset" not in raw:
        raise ConfigError("dataset: missing")
    domain = raw.get("domain")
    if domain is not None:
        domain = tuple((float(lo), float(hi)) for lo, hi in domain)
    config = ExperimentConfig(
        algorithm=raw["algorithm"],
        kernel=kernel,
        dataset=dict(raw["dataset"]),
        seed=int(raw.get("seed", 0)),
        eta=raw.get("eta"),
        eta_phase1=raw.get("eta_phase1"),
        eta_phase2=raw.get("eta_phase2"),
        eta_sched=raw.get("eta_sched"),
        budget=_budget_from_config(raw.get("budget")),
        minibatch=int(raw.get("minibatch", 1)),
        epochs=int(raw.get("epochs", 1)),
        grid_size=raw.get("grid_size"),
        domain=domain,
        delta=raw.get("delta"),
        record_every=int(raw.get("record_every", 10)),
        stability_window=int(raw.get("stability_window", 200)),
        audit_every=int(raw.get("audit_every", 25)),
        polk_init_level=float(raw.get("polk_init_level", 1.0)),
        out_dir=raw.get("out_dir"),
        extras=dict(raw.get("extras", {})),
    )
    config.validate()
    return config


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# metrics


def compute_rmse(estimate: DualFunction, truth, eval_grid: np.ndarray) -> float:
    """Root-mean-square pointwise error of the primal estimate on a grid."""
    eval_grid = np.atleast_2d(np.asarray(eval_grid, dtype=np.float64))
    if eval_grid.shape[0] == 0:
        raise ValueError("evaluation grid must be nonempty")
    est = evaluate_primal_many(estimate, eval_grid)
    if eval_grid.shape[1] == 1:
        true_vals = np.asarray(truth(eval_grid[:, 0]), dtype=np.float64)
    else:
        true_vals = np.asarray(truth(eval_grid), dtype=np.float64)
    return float(np.sqrt(np.mean((est - true_vals) ** 2)))


def compute_test_loss(estimate: DualFunction, model: PoissonModel, test_points: np.ndarray) -> float:
    """Mean Poisson loss over a test set; may be negative for densities.

    Under the identity map the estimate can be nonpositive at a test point;
    its log term is floored so the penalty stays finite.
    """
    test_points = np.atleast_2d(np.asarray(test_points, dtype=np.float64))
    integral = model.cell_measure * float(
        np.sum(_clamped_exp_or_identity(estimate, evaluate_dual_many(estimate, model.grid.atoms)))
    )
    fx = _clamped_exp_or_identity(estimate, evaluate_dual_many(estimate, test_points))
    log_term = np.log(np.maximum(fx, 1e-12))
    return float(-np.mean(log_term) + integral)


def _clamped_exp_or_identity(z: DualFunction, dual_values: np.ndarray) -> np.ndarray:
    if z.mirror_map.kind == KL:
        return _clamped_exp(dual_values)
    return np.asarray(dual_values, dtype=np.float64)


def klr_test_loss(model: KLRModel, points: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean([klr_loss(model, x, int(y)) for x, y in zip(points, labels)]))


# ---------------------------------------------------------------------------
# CSV round trip


def _fmt_float(v: float) -> str:
    return repr(float(v))


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    path = Path(path)
    lines = [",".join(CSV_COLUMNS)]
    for r in records:
        lines.append(
            ",".join(
                [
                    str(r.step),
                    str(r.samples_processed),
                    _fmt_float(r.train_loss),
                    _fmt_float(r.test_loss),
                    str(r.model_order),
                    "" if r.rmse is None else _fmt_float(r.rmse),
                    _fmt_float(r.wall_time_ms),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def load_metrics_csv(path) -> list[MetricsRecord]:
    path = Path(path)
    lines = path.read_text().strip().splitlines()
    if not lines or lines[0].split(",") != list(CSV_COLUMNS):
        raise DataError(f"{path}: unexpected metrics header")
    records = []
    for line in lines[1:]:
        parts = line.split(",")
        records.append(
            MetricsRecord(
                step=int(parts[0]),
                samples_processed=int(parts[1]),
                train_loss=float(parts[2]),
                test_loss=float(parts[3]),
                model_order=int(parts[4]),
                rmse=None if parts[5] == "" else float(parts[5]),
                wall_time_ms=float(parts[6]),
            )
        )
    return records


# ---------------------------------------------------------------------------
# running experiments


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list[MetricsRecord]
    summary: dict
    final_estimate: DualFunction | None
    step_train_loss: np.ndarray
    step_model_order: np.ndarray
    step_compression_gap: np.ndarray  # per-step (residual - epsilon), first-order only
    klr_model: KLRModel | None = None


def _build_poisson_data(config: ExperimentConfig):
    ds = config.dataset
    kind = ds.get("kind")
    if kind == "toy":
        train = sample_toy_stream(int(ds.get("train_count", 10211)), seed=config.seed)
        test = sample_toy_stream(int(ds.get("test_count", 1001)), seed=config.seed + 1000)
        return train, test, toy_ground_truth_density
    if kind == "csv":
        normalize = bool(ds.get("normalize", False))
        if "train_path" in ds and "test_path" in ds:
            train = load_points_csv(ds["train_path"], normalize=normalize)
            test = load_points_csv(ds["test_path"], normalize=normalize)
        else:
            if "path" not in ds:
                raise ConfigError("dataset.path: required for csv datasets")
            full = load_points_csv(ds["path"], normalize=normalize)
            frac = float(ds.get("test_fraction", 0.2))
            rng = np.random.default_rng(config.seed + 2000)
            n_test = int(round(frac * len(full)))
            perm = rng.permutation(len(full))
            test_idx, train_idx = perm[:n_test], perm[n_test:]
            train = PointStream(full.points[train_idx], full.bounds, "file")
            test = PointStream(full.points[test_idx], full.bounds, "file")
        return train, test, None
    raise ConfigError(f"dataset.kind: unknown value {kind!r}")


def _state_estimate(state, kernel: Kernel) -> DualFunction:
    if isinstance(state, SpppotState):
        return state.z
    if isinstance(state, (PmdState, QuasiNewtonState)):
        return DualFunction(state.subspace, state.weights, MirrorMap(KL), kernel)
    if isinstance(state, DualAveragingState):
        return DualFunction(
            state.h.dictionary,
            -state.eta * state.h.weights,
            state.h.mirror_map,
            kernel,
        )
    raise TypeError(type(state).__name__)


def _poisson_batch_loss(estimate: DualFunction, model: PoissonModel, batch: np.ndarray) -> float:
    zx = evaluate_dual_many(estimate, batch)
    fx = _clamped_exp_or_identity(estimate, zx)
    integral = model.cell_measure * float(
        np.sum(_clamped_exp_or_identity(estimate, evaluate_dual_many(estimate, model.grid.atoms)))
    )
    return float(-np.mean(np.log(np.maximum(fx, 1e-12))) + integral)


def run_experiment(config: ExperimentConfig, out_dir=None) -> RunResult:
    """Run one configured experiment and write metrics CSV, a final-model
    JSON, and a summary JSON into the output directory (when given)."""
    config.validate()
    reset_saturation_events()
    start = time.perf_counter()
    if config.algorithm == "klr_spppot":
        result = _run_klr(config)
    elif config.algorithm == "hybrid":
        result = _run_hybrid(config)
    else:
        result = _run_poisson(config)
    result.summary["runtime_s"] = time.perf_counter() - start
    result.summary["saturation_events"] = saturation_events()

    target = out_dir or config.out_dir
    if target is not None:
        target = Path(target)
        target.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(target / "metrics.csv", result.records)
        if result.final_estimate is not None:
            (target / "model.json").write_text(dual_function_to_json(result.final_estimate))
        elif result.klr_model is not None:
            payload = [dual_function_to_json(f) for f in result.klr_model.functions]
            (target / "model.json").write_text(json.dumps({"klr_classes": payload}))
        (target / "summary.json").write_text(json.dumps(result.summary, indent=2))
    return result


def _audit_hessian(state: QuasiNewtonState, worst: dict) -> None:
    eig_inv = np.linalg.eigvalsh(state.hessian.a_inv)
    eig_a_max = float(np.linalg.eigvalsh(state.hessian.a)[-1])
    upper_violation = float(eig_inv[-1] - 1.0 / state.hessian.delta)
    lower_violation = float(1.0 / eig_a_max - eig_inv[0])
    positive_violation = float(-eig_inv[0])
    worst["lemma2_upper"] = max(worst.get("lemma2_upper", -np.inf), upper_violation)
    worst["lemma2_lower"] = max(worst.get("lemma2_lower", -np.inf), lower_violation)
    worst["lemma2_nonpositive"] = max(worst.get("lemma2_nonpositive", -np.inf), positive_violation)


def _positivity_audit(estimate: DualFunction, domain, n_points: int = 1001) -> dict:
    lows = np.array([lo for lo, _ in domain])
    highs = np.array([hi for _, hi in domain])
    if len(domain) == 1:
        grid = np.linspace(lows[0], highs[0], n_points).reshape(-1, 1)
    else:
        rng = np.random.default_rng(12345)
        grid = rng.uniform(lows, highs, size=(n_points, len(domain)))
    vals = evaluate_primal_many(estimate, grid)
    return {
        "min_value": float(np.min(vals)),
        "negative_count": int(np.count_nonzero(vals < 0)),
        "n_points": n_points,
    }


def _run_poisson(config: ExperimentConfig) -> RunResult:
    train, test, truth = _build_poisson_data(config)
    domain = config.domain or train.bounds
    model = make_poisson_model(domain, config.grid_size)
    kernel = config.kernel
    algo = config.algorithm

    if algo == "spppot":
        state = init_spppot_state(kernel, model, config.eta, config.budget, seed=config.seed)
        stepper = lambda s, b: spppot_step(s, b, model)  # noqa: E731
    elif algo == "polk":
        state = init_polk_state(
            kernel, model, config.eta, config.budget,
            init_level=config.polk_init_level, seed=config.seed,
        )
        stepper = lambda s, b: polk_step(s, b, model)  # noqa: E731
    elif algo == "pmd":
        state = init_pmd_state(kernel, model, config.eta, seed=config.seed)
        stepper = lambda s, b: pmd_step(s, b, model)  # noqa: E731
    elif algo == "quasi_newton":
        eta = EtaSchedule(cap=config.eta, sched=config.eta_sched)
        state = init_quasi_newton_state(kernel, model.grid, config.delta, eta, seed=config.seed)
        stepper = lambda s, b: quasi_newton_step(s, b, model)  # noqa: E731
    elif algo == "dual_averaging":
        state = init_dual_averaging_state(kernel, model, config.eta, config.budget)
        stepper = lambda s, b: dual_averaging_step(s, b, model)  # noqa: E731
    else:
        raise ConfigError(f"algorithm: {algo!r} not runnable here")

    rng = np.random.default_rng(config.seed)
    records: list[MetricsRecord] = []
    step_losses: list[float] = []
    step_orders: list[int] = []
    gaps: list[float] = []
    worst: dict = {}
    losses_since_record: list[float] = []
    step = 0
    samples = 0
    last_tick = time.perf_counter()
    eval_grid = _rmse_grid(domain)

    def record_now():
        nonlocal last_tick
        estimate = _state_estimate(state, kernel)
        test_loss = compute_test_loss(estimate, model, test.points)
        rmse = compute_rmse(estimate, truth, eval_grid) if truth is not None else None
        now = time.perf_counter()
        records.append(
            MetricsRecord(
                step=step,
                samples_processed=samples,
                train_loss=float(np.mean(losses_since_record)) if losses_since_record else np.nan,
                test_loss=test_loss,
                model_order=estimate.model_order,
                rmse=rmse,
                wall_time_ms=(now - last_tick) * 1000.0,
            )
        )
        last_tick = now
        losses_since_record.clear()

    for _ in range(config.epochs):
        perm = rng.permutation(len(train))
        for lo in range(0, len(train), config.minibatch):
            batch = train.points[perm[lo : lo + config.minibatch]]
            estimate = _state_estimate(state, kernel)
            batch_loss = _poisson_batch_loss(estimate, model, batch)
            state = stepper(state, batch)
            step += 1
            samples += len(batch)
            step_losses.append(batch_loss)
            step_orders.append(_state_estimate(state, kernel).model_order)
            losses_since_record.append(batch_loss)
            if isinstance(state, (SpppotState, DualAveragingState)):
                gaps.append(state.last_residual - state.last_epsilon)
            if isinstance(state, QuasiNewtonState) and step % config.audit_every == 0:
                _audit_hessian(state, worst)
            if step % config.record_every == 0:
                record_now()

    if step % config.record_every != 0 or (step == 0 and config.epochs == 0):
        if step > 0:
            record_now()

    estimate = _state_estimate(state, kernel)
    if isinstance(state, QuasiNewtonState):
        _audit_hessian(state, worst)
    summary = {
        "algorithm": algo,
        "seed": config.seed,
        "steps": step,
        "samples_processed": samples,
        "final_model_order": estimate.model_order,
        "final_test_loss": compute_test_loss(estimate, model, test.points) if step else None,
        "final_rmse": (
            compute_rmse(estimate, truth, eval_grid) if truth is not None and step else None
        ),
        "train_sample_count": len(train),
        "intensity_scale": len(train),
        "positivity_audit": _positivity_audit(estimate, domain),
        "lemma1_max_gap": max(gaps) if gaps else None,
        "warnings": [],
    }
    summary.update({k: (None if v == -np.inf else v) for k, v in worst.items()})
    return RunResult(
        config=config,
        records=records,
        summary=summary,
        final_estimate=estimate,
        step_train_loss=np.asarray(step_losses),
        step_model_order=np.asarray(step_orders, dtype=int),
        step_compression_gap=np.asarray(gaps),
    )


def _rmse_grid(domain) -> np.ndarray:
    lows = np.array([lo for lo, _ in domain])
    highs = np.array([hi for _, hi in domain])
    if len(domain) == 1:
        return np.linspace(lows[0], highs[0], 1001).reshape(-1, 1)
    rng = np.random.default_rng(99)
    return rng.uniform(lows, highs, size=(1001, len(domain)))


def _run_hybrid(config: ExperimentConfig) -> RunResult:
    train, test, truth = _build_poisson_data(config)
    domain = config.domain or train.bounds
    model = make_poisson_model(domain, config.grid_size)
    kernel = config.kernel
    hybrid_config = HybridConfig(
        eta_phase1=config.eta_phase1,
        eta_phase2=config.eta_phase2,
        budget=config.budget,
        delta=config.delta,
        batch_phase1=config.minibatch,
        stability_window=config.stability_window,
    )
    rng = np.random.default_rng(config.seed)
    stream_parts = []
    for _ in range(config.epochs):
        stream_parts.append(train.points[rng.permutation(len(train))])
    stream = np.vstack(stream_parts) if stream_parts else train.points[:0]

    records: list[MetricsRecord] = []
    step_losses: list[float] = []
    step_orders: list[int] = []
    gaps: list[float] = []
    worst: dict = {}
    eval_grid = _rmse_grid(domain)
    last_tick = time.perf_counter()
    counter = {"step": 0}

    def on_step(phase, state, consumed):
        counter["step"] += 1
        estimate = _state_estimate(state, kernel)
        step_orders.append(estimate.model_order)
        if isinstance(state, SpppotState):
            gaps.append(state.last_residual - state.last_epsilon)
        if isinstance(state, QuasiNewtonState) and counter["step"] % config.audit_every == 0:
            _audit_hessian(state, worst)
        if counter["step"] % config.record_every == 0:
            nonlocal last_tick
            now = time.perf_counter()
            records.append(
                MetricsRecord(
                    step=counter["step"],
                    samples_processed=consumed,
                    train_loss=_poisson_batch_loss(estimate, model, stream[max(consumed - 30, 0) : consumed]),
                    test_loss=compute_test_loss(estimate, model, test.points),
                    model_order=estimate.model_order,
                    rmse=compute_rmse(estimate, truth, eval_grid) if truth is not None else None,
                    wall_time_ms=(now - last_tick) * 1000.0,
                )
            )
            last_tick = now

    result = hybrid_run(hybrid_config, kernel, model, stream, on_step=on_step)
    estimate = result.z
    summary = {
        "algorithm": "hybrid",
        "seed": config.seed,
        "steps": counter["step"],
        "samples_processed": len(stream),
        "switched": result.switched,
        "switch_step": result.switch_step,
        "final_model_order": estimate.model_order,
        "final_test_loss": compute_test_loss(estimate, model, test.points),
        "final_rmse": compute_rmse(estimate, truth, eval_grid) if truth is not None else None,
        "train_sample_count": len(train),
        "intensity_scale": len(train),
        "positivity_audit": _positivity_audit(estimate, domain),
        "lemma1_max_gap": max(gaps) if gaps else None,
        "warnings": [result.warning] if result.warning else [],
    }
    summary.update({k: (None if v == -np.inf else v) for k, v in worst.items()})
    return RunResult(
        config=config,
        records=records,
        summary=summary,
        final_estimate=estimate,
        step_train_loss=np.asarray(step_losses),
        step_model_order=np.asarray(step_orders, dtype=int),
        step_compression_gap=np.asarray(gaps),
    )


def _run_klr(config: ExperimentConfig) -> RunResult:
    ds = config.dataset
    if ds.get("kind") == "blobs":
        n_classes = int(ds.get("n_classes", 3))
        train = make_multiclass_blobs(
            n_classes,
            int(ds.get("n_per_class", 200)),
            int(ds.get("dim", 2)),
            float(ds.get("separation", 6.0)),
            seed=config.seed,
        )
        test = make_multiclass_blobs(
            n_classes,
            int(ds.get("test_per_class", 100)),
            int(ds.get("dim", 2)),
            float(ds.get("separation", 6.0)),
            seed=config.seed + 1000,
        )
    else:
        if "train_path" not in ds or "test_path" not in ds:
            raise ConfigError("dataset.train_path/test_path: required for labeled csv")
        train = load_points_csv(ds["train_path"], normalize=ds.get("normalize", False), labeled=True)
        test = load_points_csv(ds["test_path"], normalize=ds.get("normalize", False), labeled=True)
        n_classes = int(max(train.labels.max(), test.labels.max())) + 1

    klr = make_klr_model(config.kernel, n_classes, train.dim)
    state = KlrState(model=klr, eta=config.eta, budget=config.budget)
    rng = np.random.default_rng(config.seed)
    records: list[MetricsRecord] = []
    step_losses: list[float] = []
    step_orders: list[int] = []
    gaps: list[float] = []
    step = 0
    samples = 0
    last_tick = time.perf_counter()
    losses_since_record: list[float] = []

    for _ in range(config.epochs):
        perm = rng.permutation(len(train))
        for lo in range(0, len(train), config.minibatch):
            idx = perm[lo : lo + config.minibatch]
            batch, labels = train.points[idx], train.labels[idx]
            batch_loss = klr_test_loss(state.model, batch, labels)
            state = klr_spppot_step(state, batch, labels)
            step += 1
            samples += len(batch)
            step_losses.append(batch_loss)
            step_orders.append(state.model.functions[0].model_order)
            losses_since_record.append(batch_loss)
            gaps.append(state.last_residual - state.last_epsilon)
            if step % config.record_every == 0:
                now = time.perf_counter()
                records.append(
                    MetricsRecord(
                        step=step,
                        samples_processed=samples,
                        train_loss=float(np.mean(losses_since_record)),
                        test_loss=klr_test_loss(state.model, test.points, test.labels),
                        model_order=state.model.functions[0].model_order,
                        rmse=None,
                        wall_time_ms=(now - last_tick) * 1000.0,
                    )
                )
                last_tick = now
                losses_since_record.clear()

    predictions = klr_predict(state.model, test.points)
    holdout_error = float(np.mean(predictions != test.labels)) if len(test) else None
    summary = {
        "algorithm": "klr_spppot",
        "seed": config.seed,
        "steps": step,
        "samples_processed": samples,
        "final_model_order": state.model.functions[0].model_order,
        "final_test_loss": klr_test_loss(state.model, test.points, test.labels) if step else None,
        "holdout_error": holdout_error,
        "n_classes": n_classes,
        "lemma1_max_gap": max(gaps) if gaps else None,
        "warnings": [],
    }
    return RunResult(
        config=config,
        records=records,
        summary=summary,
        final_estimate=None,
        step_train_loss=np.asarray(step_losses),
        step_model_order=np.asarray(step_orders, dtype=int),
        step_compression_gap=np.asarray(gaps),
        klr_model=state.model,
    )
