"""Synthetic data generation and dataset ingestion.

Generators are seed-deterministic and single-threaded per stream; multiple
streams may be generated concurrently with independent seeds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(RuntimeError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class PointStream:
    """A finite stream of d-dimensional points, optionally labeled."""

    points: np.ndarray
    bounds: tuple[tuple[float, float], ...]
    origin: str  # "simulated" | "file"
    seed: int | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def toy_ground_truth_density(x):
    """Bell-shaped ground truth ``(10/sqrt(2pi)) * exp(-50 (x - 0.5)^2)``,
    the Normal(0.5, 0.1) density; integrates to one over the real line."""
    x = np.asarray(x, dtype=np.float64)
    return 10.0 / math.sqrt(2.0 * math.pi) * np.exp(-50.0 * (x - 0.5) ** 2)


def sample_inhomogeneous_ppp(
    intensity,
    bounds,
    lambda_max: float,
    seed: int | None = None,
) -> PointStream:
    """Thinning sampler: Poisson-many uniform candidates under a constant
    envelope, each kept with probability ``intensity(x) / lambda_max``.

    Raises if a candidate's intensity exceeds the envelope.
    """
    bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    measure = 1.0
    for lo, hi in bounds:
        if hi <= lo:
            raise ValueError("domain bounds must satisfy hi > lo")
        measure *= hi - lo
    rng = np.random.default_rng(seed)
    n_cand = rng.poisson(lambda_max * measure)
    lows = np.array([lo for lo, _ in bounds])
    highs = np.array([hi for _, hi in bounds])
    cands = rng.uniform(lows, highs, size=(n_cand, len(bounds)))
    if n_cand == 0:
        return PointStream(np.empty((0, len(bounds))), bounds, "simulated", seed)
    vals = np.asarray([float(intensity(c if len(bounds) > 1 else c[0])) for c in cands])
    if np.any(vals > lambda_max * (1.0 + 1e-12)):
        worst = cands[int(np.argmax(vals))]
        raise ValueError(f"intensity exceeds the envelope lambda_max at {worst}")
    keep = rng.uniform(0.0, 1.0, size=n_cand) < vals / lambda_max
    return PointStream(cands[keep], bounds, "simulated", seed)


def sample_toy_stream(expected_count: int, seed: int | None = None) -> PointStream:
    """Points on (0, 1) from the toy model scaled to ``expected_count`` events."""
    peak = float(toy_ground_truth_density(0.5))
    return sample_inhomogeneous_ppp(
        lambda x: expected_count * float(toy_ground_truth_density(x)),
        [(0.0, 1.0)],
        lambda_max=expected_count * peak * (1.0 + 1e-9),
        seed=seed,
    )


def minmax_normalize(points: np.ndarray) -> np.ndarray:
    """Scale each coordinate to [0, 1]; constant coordinates map to 0."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (points - lo) / span


def _parse_row(row: list[str], path: str, line_no: int) -> list[float]:
    try:
        return [float(v) for v in row]
    except ValueError as exc:
        raise DataError(f"{path}:{line_no}: malformed row {row!r}: {exc}") from None


def load_points_csv(path, normalize: bool = False, labeled: bool = False) -> PointStream:
    """Read comma-separated points (one per row, optional single header row).

    With ``labeled=True`` the trailing column is an integer class label.
    ``normalize=True`` min-max scales coordinates to the unit cube.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    rows: list[list[float]] = []
    labels: list[int] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            row = [v.strip() for v in row if v.strip() != ""]
            if not row:
                continue
            if line_no == 1:
                try:
                    [float(v) for v in row]
                except ValueError:
                    continue  # header row
            vals = _parse_row(row, str(path), line_no)
            if labeled:
                label = vals[-1]
                if label != int(label):
                    raise DataError(f"{path}:{line_no}: label {label} is not an integer")
                labels.append(int(label))
                vals = vals[:-1]
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DataError(f"{path}: inconsistent column counts {sorted(widths)}")
    points = np.asarray(rows, dtype=np.float64)
    if normalize:
        points = minmax_normalize(points)
    bounds = tuple((float(lo), float(hi)) for lo, hi in zip(points.min(axis=0), points.max(axis=0)))
    return PointStream(
        points,
        bounds,
        "file",
        labels=np.asarray(labels, dtype=int) if labeled else None,
    )


def save_points_csv(path, stream: PointStream) -> None:
    """Write one point per row; labels, when present, as a trailing column.

    Floats are written with ``repr`` so a read-back is bit-exact.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for i, p in enumerate(stream.points):
            row = [repr(float(v)) for v in p]
            if stream.labels is not None:
                row.append(str(int(stream.labels[i])))
            writer.writerow(row)


def make_multiclass_blobs(
    n_classes: int,
    n_per_class: int,
    dim: int,
    separation: float,
    seed: int | None = None,
) -> PointStream:
    """Equal-prior Gaussian blobs at centers ``separation`` apart."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    if dim == 1:
        centers = separation * np.arange(n_classes, dtype=np.float64).reshape(-1, 1)
    else:
        # evenly spaced on a circle in the first two coordinates
        angles = 2.0 * math.pi * np.arange(n_classes) / n_classes
        radius = separation / max(2.0 * math.sin(math.pi / n_classes), 1e-12)
        centers = np.zeros((n_classes, dim))
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
    points = []
    labels = []
    for c in range(n_classes):
        points.append(centers[c] + rng.normal(size=(n_per_class, dim)))
        labels.extend([c] * n_per_class)
    pts = np.vstack(points)
    order = rng.permutation(len(pts))
    pts = pts[order]
    labels = np.asarray(labels, dtype=int)[order]
    bounds = tuple((float(lo), float(hi)) for lo, hi in zip(pts.min(axis=0), pts.max(axis=0)))
    return PointStream(pts, bounds, "simulated", seed=seed, labels=labels)
