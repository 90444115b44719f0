"""2-D loss surfaces along random normalized directions, and the
finite-difference Lipschitz estimates read off them.

Parameters are handled as ``{name: array}`` dicts so any loss function of
such a dict can be scanned; :func:`model_loss_fn` adapts a trained model and
a dataset to that interface.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .model import ModelParams, forward
from .tasks import Dataset

__all__ = [
    "LandscapeGrid",
    "as_param_dict",
    "sample_direction",
    "global_norm",
    "model_loss_fn",
    "scan",
    "lipschitz_estimates",
    "percentile_curves",
    "write_grid_csv",
    "write_curves_csv",
    "write_svg",
]

PERCENTILES = (50, 75, 95, 99)

ParamDict = dict[str, np.ndarray]


def as_param_dict(theta) -> ParamDict:
    """Learnable arrays of a model (``E`` and ``omega`` are not included)."""
    if isinstance(theta, ModelParams):
        return theta.state()
    return {k: np.asarray(v) for k, v in theta.items()}


def sample_direction(theta, seed: int) -> ParamDict:
    """Gaussian direction rescaled so each matrix has the norm of its counterpart."""
    theta = as_param_dict(theta)
    rng = np.random.default_rng(seed)
    out = {}
    for name in sorted(theta):
        ref = np.asarray(theta[name], dtype=np.float64)
        g = rng.standard_normal(ref.shape)
        gn = np.linalg.norm(g)
        out[name] = g * (np.linalg.norm(ref) / gn) if gn > 0 else np.zeros_like(ref)
    return out


def global_norm(direction: ParamDict) -> float:
    """Frobenius norm over all matrices taken together."""
    return math.sqrt(sum(float(np.sum(np.square(v, dtype=np.float64))) for v in direction.values()))


def model_loss_fn(params: ModelParams, ds: Dataset, mask="full", batch: int = 500) -> Callable[[ParamDict], float]:
    """Mean training cross-entropy (dropout off) as a function of the weights.

    The returned function loads weights into a private copy of ``params``.
    """
    work = params.copy()

    def loss(theta: ParamDict) -> float:
        work.load_state(theta)
        total = 0.0
        with tn.no_grad():
            for s in range(0, len(ds), batch):
                y = ds.labels[s : s + batch]
                logits = forward(ds.tokens[s : s + batch], work, mask)
                total += tn.cross_entropy(logits, y).item() * len(y)
        return total / len(ds)

    return loss


@dataclass
class LandscapeGrid:
    coords: np.ndarray  # (n,) grid offsets, shared by both axes
    loss: np.ndarray  # (n, n); loss[i, j] is at (coords[i], coords[j])
    step: float
    radius: float
    norm1: float  # global norms of the two directions
    norm2: float

    @property
    def flagged(self) -> np.ndarray:
        return ~np.isfinite(self.loss)

    @property
    def center(self) -> float:
        c = len(self.coords) // 2
        return float(self.loss[c, c])


def _grid_coords(step: float, radius: float) -> np.ndarray:
    n = int(round(radius / step))
    if n < 1 or not math.isclose(n * step, radius, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"radius {radius} must be a positive multiple of the step {step}")
    # integer offsets keep the centre at exactly zero
    return np.arange(-n, n + 1) * step


def scan(
    theta,
    d1: ParamDict,
    d2: ParamDict,
    step: float = 0.05,
    radius: float = 1.0,
    loss_fn: Callable[[ParamDict], float] | None = None,
    dataset: Dataset | None = None,
    mask="full",
) -> LandscapeGrid:
    """Loss at every ``theta + x d1 + y d2`` for ``x, y`` on the grid.

    Either give ``loss_fn`` or, for a :class:`ModelParams`, a ``dataset``.
    Cells whose loss is not finite are kept as they are and show up in
    :attr:`LandscapeGrid.flagged`.
    """
    if not 0 < radius <= 1:
        raise ValueError(f"grid radius must lie in (0, 1], got {radius}")
    if loss_fn is None:
        if dataset is None or not isinstance(theta, ModelParams):
            raise ValueError("scan needs loss_fn, or a ModelParams with a dataset")
        loss_fn = model_loss_fn(theta, dataset, mask)
    base = as_param_dict(theta)
    coords = _grid_coords(step, radius)
    n = len(coords)
    loss = np.empty((n, n))
    for i, x in enumerate(coords):
        for j, y in enumerate(coords):
            point = {k: (base[k] + x * d1[k] + y * d2[k]).astype(base[k].dtype, copy=False) for k in base}
            with np.errstate(all="ignore"):
                try:
                    loss[i, j] = loss_fn(point)
                except FloatingPointError:
                    loss[i, j] = np.nan
    return LandscapeGrid(coords, loss, step, radius, global_norm(d1), global_norm(d2))


def lipschitz_estimates(grid: LandscapeGrid) -> dict[str, np.ndarray]:
    """Difference quotients between neighbouring cells.

    ``horizontal[i, j]`` compares cells ``(i, j)`` and ``(i + 1, j)`` (a step
    along ``d1``), ``vertical[i, j]`` compares ``(i, j)`` and ``(i, j + 1)``.
    Pairs touching a flagged cell are ``nan``.
    """
    L = np.where(grid.flagged, np.nan, grid.loss)
    h = np.abs(L[1:, :] - L[:-1, :]) / (grid.step * grid.norm1)
    v = np.abs(L[:, 1:] - L[:, :-1]) / (grid.step * grid.norm2)
    return {"horizontal": h, "vertical": v}


def _pooled_within(grid: LandscapeGrid, est: dict[str, np.ndarray], r: float) -> np.ndarray:
    # a pair counts once both of its cells lie inside the square of radius r
    idx = np.abs(np.round(grid.coords / grid.step)).astype(int)
    lim = int(math.floor(r / grid.step + 1e-9))
    inside = idx <= lim
    h = est["horizontal"][(inside[1:] & inside[:-1])[:, None] & inside[None, :]]
    v = est["vertical"][inside[:, None] & (inside[1:] & inside[:-1])[None, :]]
    pooled = np.concatenate([h.ravel(), v.ravel()])
    return pooled[np.isfinite(pooled)]


def percentile_curves(grid: LandscapeGrid, radii, est: dict[str, np.ndarray] | None = None) -> list[dict]:
    """50/75/95/99th percentiles of the estimates inside each radius."""
    est = est if est is not None else lipschitz_estimates(grid)
    rows = []
    for r in radii:
        vals = _pooled_within(grid, est, r)
        row = {"radius": float(r), "count": int(vals.size)}
        for p in PERCENTILES:
            row[f"p{p}"] = float(np.percentile(vals, p, method="linear")) if vals.size else math.nan
        rows.append(row)
    return rows


def write_grid_csv(grid: LandscapeGrid, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "loss"])
        for i, x in enumerate(grid.coords):
            for j, y in enumerate(grid.coords):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(grid.loss[i, j]))])
    return path


def write_curves_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["radius"] + [f"p{p}" for p in PERCENTILES], extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


def write_svg(grid: LandscapeGrid, path, cell: int = 8) -> Path:
    """Heat map of ``log(1 + loss)``; ``x`` runs right and ``y`` runs up."""
    path = Path(path)
    n = len(grid.coords)
    z = np.log1p(np.where(grid.flagged, np.nan, grid.loss))
    lo, hi = np.nanmin(z), np.nanmax(z)
    span = hi - lo if hi > lo else 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{n * cell}" height="{n * cell}">']
    for i in range(n):
        for j in range(n):
            if np.isnan(z[i, j]):
                color = "#ff00ff"
            else:
                t = (z[i, j] - lo) / span
                # dark blue (low) to yellow (high)
                r, g, b = int(255 * t), int(40 + 200 * t), int(120 * (1 - t))
                color = f"#{r:02x}{g:02x}{b:02x}"
            parts.append(
                f'<rect x="{i * cell}" y="{(n - 1 - j) * cell}" width="{cell}" height="{cell}" fill="{color}">'
                f"<title>x={grid.coords[i]:.4g} y={grid.coords[j]:.4g} loss={grid.loss[i, j]:.6g}</title></rect>"
            )
    parts.append("</svg>")
    path.write_text("\n".join(parts))
    return path
