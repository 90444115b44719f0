"""Dispersion/separation measurements and the attention stability constants.

Scores are read exactly as the softmax sees them: column ``i`` of
``D = X^T W X`` holds the scores of query ``i`` over all keys.

Constants (``e`` is ``exp``, ``G = Gamma``, ``U = Upsilon``, ``X = Xi``):

* full:        xi = e^d / L,  lam_X = e^d U (2 G X^2 + 1),  lam_W = e^d U L X^3,  lam_V = L X
* k-regular:   same with xi = e^d / k
* heavy-hitter: xi = (e^d / k)(1 + 1/Dh),
  lam_X = e^d U (beta + 2 G X^2 (beta + 1)(1 + 1/Dh)),  lam_W = 2 e^d U L X^3 (1 + 1/Dh)
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .attention import MaskSpec, topk_matrix
from .model import ModelParams, forward, load_checkpoint
from .tasks import Dataset

__all__ = [
    "GeometryBounds",
    "StabilityConstants",
    "DispersionSample",
    "StabilityReport",
    "scores",
    "measure_dispersion",
    "measure_separation",
    "measure_sink_ratio",
    "spectral_norm",
    "max_column_norm",
    "constants_full",
    "constants_regular",
    "constants_heavy_hitter",
    "block_and_loss_constants",
    "corollary_lhs",
    "stability_report",
]


# ------------------------------------------------------------------ measurement


def scores(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``X^T W X`` for ``X`` of shape ``(..., d, L)``."""
    X = np.asarray(X, dtype=np.float64)
    return np.swapaxes(X, -1, -2) @ (np.asarray(W, dtype=np.float64) @ X)


def _as_mask(M, shape) -> np.ndarray:
    if M is None:
        return np.ones(shape, dtype=bool)
    M = getattr(M, "matrix", M)
    return np.broadcast_to(np.asarray(M, dtype=bool), shape)


def measure_dispersion(X, W, M=None) -> np.ndarray:
    """Per-query max minus min of the unmasked scores, shape ``(..., L)``."""
    D = scores(X, W)
    m = _as_mask(M, D.shape)
    hi = np.where(m, D, -np.inf).max(axis=-2)
    lo = np.where(m, D, np.inf).min(axis=-2)
    return hi - lo


def measure_separation(X, W, M) -> np.ndarray:
    """Per-query gap between the smallest kept and the largest masked score.

    Columns with nothing masked have no separation and come back as ``nan``.
    """
    D = scores(X, W)
    m = _as_mask(M, D.shape)
    kept_lo = np.where(m, D, np.inf).min(axis=-2)
    drop_hi = np.where(m, -np.inf, D).max(axis=-2)
    gap = kept_lo - drop_hi
    return np.where(np.isfinite(gap), gap, np.nan)


def measure_sink_ratio(M, k: int) -> float:
    """Largest number of queries attending one key, divided by ``k``."""
    M = np.asarray(getattr(M, "matrix", M), dtype=bool)
    return float(M.sum(axis=-1).max()) / k


def spectral_norm(A: np.ndarray, iters: int = 100, tol: float = 1e-9, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``A^T A``."""
    A = np.asarray(A, dtype=np.float64)
    if not A.any():
        return 0.0
    v = np.random.default_rng(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        w = A.T @ (A @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        new = math.sqrt(nrm)
        if abs(new - sigma) <= tol * max(new, 1.0):
            sigma = new
            break
        sigma = new
    return float(np.linalg.norm(A @ v))


def max_column_norm(X: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(X, dtype=np.float64), axis=-2).max())


# -------------------------------------------------------------------- constants


@dataclass
class GeometryBounds:
    Xi: float  # max token column norm
    Gamma: float  # ||W||
    Upsilon: float  # ||V||
    L: int
    B: float = 1.0  # max(||P||, ||R||)
    lam_sigma: float = 1.0  # activation Lipschitz constant
    d: int = 64
    ln_eps: float = 1e-5
    ln_scale: float = 1.0  # ||a||_inf of the LayerNorm scale
    tau: int = 1
    alpha: float = 1.0  # Lipschitz constant of the per-sample loss

    def __post_init__(self):
        for name in ("Xi", "Gamma", "Upsilon", "B", "lam_sigma", "ln_scale", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def zeta_ln(self) -> float:
        return self.ln_eps**-0.5 * self.ln_scale * (self.d**2 - 2) / self.d


@dataclass
class StabilityConstants:
    xi: float
    lam_X: float
    lam_W: float
    lam_V: float
    eta_X: float = math.nan
    eta_P: float = math.nan
    eta_R: float = math.nan
    lam_theta: float = math.nan
    lam_X_blk: float = math.nan
    lam_loss: float = math.nan
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def constants_full(delta_s: float, g: GeometryBounds) -> StabilityConstants:
    e = math.exp(delta_s)
    return StabilityConstants(
        xi=e / g.L,
        lam_X=e * g.Upsilon * (2 * g.Gamma * g.Xi**2 + 1),
        lam_W=e * g.Upsilon * g.L * g.Xi**3,
        lam_V=g.L * g.Xi,
    )


def constants_regular(delta_r: float, k: int, g: GeometryBounds) -> StabilityConstants:
    if not 1 <= k <= g.L:
        raise ValueError(f"need 1 <= k <= L={g.L}, got {k}")
    row = constants_full(delta_r, g)
    row.xi = math.exp(delta_r) / k
    return row


def constants_heavy_hitter(delta_h: float, Delta_h: float, k: int, beta: float, g: GeometryBounds) -> StabilityConstants:
    if not 1 <= k <= g.L:
        raise ValueError(f"need 1 <= k <= L={g.L}, got {k}")
    if not Delta_h > 0:
        nan = math.nan
        return StabilityConstants(nan, nan, nan, g.L * g.Xi, degenerate=True)
    e = math.exp(delta_h)
    sep = 1 + 1 / Delta_h
    return StabilityConstants(
        xi=e / k * sep,
        lam_X=e * g.Upsilon * (beta + 2 * g.Gamma * g.Xi**2 * (beta + 1) * sep),
        lam_W=2 * e * g.Upsilon * g.L * g.Xi**3 * sep,
        lam_V=g.L * g.Xi,
    )


def block_and_loss_constants(row: StabilityConstants, g: GeometryBounds) -> StabilityConstants:
    """Fill in the MLP, block and loss constants of ``row`` (returned as a copy)."""
    out = StabilityConstants(**row.to_dict())
    z = g.zeta_ln
    out.eta_X = g.B**2 * g.lam_sigma
    out.eta_P = out.eta_R = g.lam_sigma * g.B * g.Xi
    out.lam_theta = z * (z * (1 + out.eta_X) * (row.lam_W + row.lam_V) + g.L * (out.eta_P + out.eta_R))
    out.lam_X_blk = z**2 * (1 + out.eta_X) * (1 + row.lam_X)
    denom = g.L * (out.lam_X_blk - 1)
    if row.degenerate or denom == 0 or not math.isfinite(out.lam_X_blk):
        out.degenerate = True
        out.lam_loss = math.nan
    else:
        out.lam_loss = g.alpha * (g.Xi + out.lam_X_blk**g.tau * (1 + out.lam_theta / denom))
    return out


def corollary_lhs(c1: float, c2: float, delta_s: float, Gamma: float, Xi: float, beta: float) -> tuple[float, float]:
    """Left-hand sides of the heavy-hitter-beats-full conditions on ``lam_W``, ``lam_X``.

    ``c1 = delta_h / delta_s`` and ``c2 = Delta_h / delta_s``. An improvement
    is predicted when a value is below 1. Degenerate inputs give ``nan``.
    """
    if not (delta_s > 0 and c2 > 0 and c1 >= 0 and beta >= 0):
        return math.nan, math.nan
    sep = 1 + 1 / (c2 * delta_s)
    q = 2 * Gamma * Xi**2
    lhs_w = c1 + math.log(2 * sep) / delta_s
    lhs_x = c1 + (math.log(q * (1 + beta) * sep + beta) - math.log(q + 1)) / delta_s
    return lhs_w, lhs_x


# ----------------------------------------------------------------------- report

PCT_UPPER = (75, 90, 95)
PCT_LOWER = (25, 10, 5)


@dataclass
class DispersionSample:
    """Pooled per-query samples; ``beta`` has one entry per (instance, block)."""

    delta_s: np.ndarray
    delta_h: np.ndarray
    Delta_h: np.ndarray
    beta: np.ndarray
    instance: np.ndarray
    block: np.ndarray
    Gamma_hat: float = 0.0
    Xi_hat: float = 0.0


@dataclass
class StabilityReport:
    mask: str
    k: int
    n_instances: int
    percentiles: dict
    lhs: dict
    Gamma_hat: float
    Xi_hat: float
    assumption: str = "delta_s = 2 Gamma Xi^2 when evaluating the corollary"
    degenerate: list = field(default_factory=list)
    samples: DispersionSample | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("samples")
        return d

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stability.json").write_text(json.dumps(_jsonable(self.to_dict()), indent=2))
        if self.samples is not None:
            s = self.samples
            L = len(s.delta_s) // max(len(s.beta), 1)
            with open(out / "stability_samples.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["instance", "block", "query", "delta_s", "delta_h", "Delta_h", "beta"])
                for r in range(len(s.delta_s)):
                    w.writerow(
                        [int(s.instance[r]), int(s.block[r]), r % L, s.delta_s[r], s.delta_h[r], s.Delta_h[r], s.beta[r // L]]
                    )
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonable(obj.item())
    return obj


def collect_samples(params: ModelParams, ds: Dataset, mask_spec="full", k: int = 5, batch: int = 250) -> DispersionSample:
    """Run every instance through the model and measure at each block input."""
    spec = MaskSpec.parse(mask_spec)
    out = {n: [] for n in ("delta_s", "delta_h", "Delta_h", "beta", "instance", "block")}
    gamma_hat = max(spectral_norm(h.W.data) for blk in params.blocks for h in blk.heads)
    xi_hat = 0.0
    for s in range(0, len(ds), batch):
        tok = ds.tokens[s : s + batch]
        trace: list = []
        with tn.no_grad():
            forward(tok, params, spec, trace=trace)
        for t, (X, blk) in enumerate(zip(trace, params.blocks)):
            # global tokens, if any, stay in: they are part of the attention
            X = np.asarray(X, dtype=np.float64)
            L = X.shape[-1]
            xi_hat = max(xi_hat, max_column_norm(X))
            for h in blk.heads:
                D = scores(X, h.W.data)
                M = topk_matrix(D, k)
                out["delta_s"].append(measure_dispersion(X, h.W.data).ravel())
                out["delta_h"].append(measure_dispersion(X, h.W.data, M).ravel())
                out["Delta_h"].append(measure_separation(X, h.W.data, M).ravel())
                out["beta"].append(M.sum(axis=-1).max(axis=-1) / k)
                n = X.shape[0]
                out["instance"].append(np.repeat(np.arange(s, s + n), L))
                out["block"].append(np.full(n * L, t))
    cat = {key: np.concatenate(v) for key, v in out.items()}
    return DispersionSample(**cat, Gamma_hat=gamma_hat, Xi_hat=xi_hat)


def stability_report(checkpoint, ds: Dataset, mask_spec=None, k: int = 5) -> StabilityReport:
    """Percentile summary of dispersions and the corollary left-hand sides.

    ``checkpoint`` is a :class:`ModelParams` or a path to a saved checkpoint.
    The model runs with ``mask_spec`` (default: the one stored with the
    checkpoint, else full); dispersions are measured both without a mask and
    with the top-``k`` mask at every block input.
    """
    if isinstance(checkpoint, ModelParams):
        params, meta = checkpoint, {}
    else:
        params, meta = load_checkpoint(checkpoint)
    mask_spec = mask_spec or meta.get("mask", "full")
    s = collect_samples(params, ds, mask_spec, k)
    lin = dict(method="linear")
    finite_sep = s.Delta_h[np.isfinite(s.Delta_h)]
    pct = {
        "delta_s": {p: float(np.percentile(s.delta_s, p, **lin)) for p in PCT_UPPER},
        "delta_h": {p: float(np.percentile(s.delta_h, p, **lin)) for p in PCT_UPPER},
        "beta": {p: float(np.percentile(s.beta, p, **lin)) for p in PCT_UPPER},
        "Delta_h": {
            p: float(np.percentile(finite_sep, p, **lin)) if finite_sep.size else math.nan for p in PCT_LOWER
        },
    }
    lhs, bad = {}, []
    for up, lo in zip(PCT_UPPER, PCT_LOWER):
        ds_, dh, sep, beta = pct["delta_s"][up], pct["delta_h"][up], pct["Delta_h"][lo], pct["beta"][up]
        if ds_ > 0:
            w, x = corollary_lhs(dh / ds_, sep / ds_, ds_, ds_ / 2, 1.0, beta)
        else:
            w = x = math.nan
        if not (math.isfinite(w) and math.isfinite(x)):
            bad.append(up)
        lhs[up] = {"lhs_W": w, "lhs_X": x}
    return StabilityReport(
        mask=str(MaskSpec.parse(mask_spec)),
        k=k,
        n_instances=len(ds),
        percentiles=pct,
        lhs=lhs,
        Gamma_hat=s.Gamma_hat,
        Xi_hat=s.Xi_hat,
        degenerate=bad,
        samples=s,
    )
