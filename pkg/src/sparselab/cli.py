"""Command line entry point: dataset generation, training sweeps, analyses.

Experiments are described by a JSON config (see :class:`ExperimentConfig`);
every artifact directory carries the config hash so runs of different
configs never share a directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import landscape as ls
from .attention import MaskSpec
from .model import init_params, load_checkpoint, save_checkpoint
from .stability import stability_report
from .tasks import TASKS, make_splits, save_dataset, save_vocab
from .tensor import ContractError
from .training import DivergenceError, TrainConfig, train_run

__all__ = ["ConfigError", "ExperimentConfig", "run_experiment", "compare", "main"]


class ConfigError(ValueError):
    """Invalid experiment config; the message names the field (and line)."""


@dataclass
class TaskSection:
    name: str = "even_pairs"
    n_train: int = 2000
    n_holdout: int = 500
    seq_len: int = 40
    data_seed: int = 0


@dataclass
class ModelSection:
    d: int = 64
    d_mlp: int = 64
    tau: int = 5
    heads: int = 1
    activation: str = "relu"
    dropout: float = 0.01


@dataclass
class TrainSection:
    optimizer: str = "sgd"
    lr0: float = 0.1
    gamma: float = 0.9995
    epochs: int = 100
    batch_size: int = 32
    dtype: str = "float64"


@dataclass
class AnalysisSection:
    stability: bool = False
    stability_k: int = 5
    landscape: bool = False
    grid_step: float = 0.05
    grid_range: float = 1.0
    landscape_samples: int = 256  # training instances the surface is evaluated on
    landscape_seed: int = 0


@dataclass
class ExperimentConfig:
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    masks: list[str] = field(default_factory=lambda: ["full"])
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"

    _SECTIONS = {"task": TaskSection, "model": ModelSection, "train": TrainSection, "analysis": AnalysisSection}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        # the output location does not change what is computed
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha1(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict, text: str | None = None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        kw = {}
        for key, value in d.items():
            if key in cls._SECTIONS:
                kw[key] = _section(cls._SECTIONS[key], key, value, text)
            elif key in ("masks", "seeds"):
                if not isinstance(value, list) or not value:
                    raise ConfigError(_where(text, key, f"{key}: expected a non-empty list"))
                kw[key] = [str(v) for v in value] if key == "masks" else [_int(v, key, text) for v in value]
            elif key == "out":
                kw[key] = str(value)
            else:
                raise ConfigError(_where(text, key, f"{key}: unknown field"))
        cfg = cls(**kw)
        cfg.validate(text)
        return cfg

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(d, text)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text())

    def validate(self, text: str | None = None) -> None:
        if self.task.name not in TASKS:
            raise ConfigError(_where(text, "name", f"task.name: unknown task {self.task.name!r}"))
        for m in self.masks:
            try:
                MaskSpec.parse(m)
            except ValueError as exc:
                raise ConfigError(_where(text, m, f"masks: {exc}")) from None
        try:
            for m in self.masks:
                self.train_config(m, self.seeds[0])
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None

    def train_config(self, mask: str, seed: int) -> TrainConfig:
        t, m, tr = self.task, self.model, self.train
        return TrainConfig(
            task=t.name,
            n_train=t.n_train,
            n_holdout=t.n_holdout,
            seq_len=t.seq_len,
            data_seed=t.data_seed,
            optimizer=tr.optimizer,
            lr0=tr.lr0,
            gamma=tr.gamma,
            epochs=tr.epochs,
            batch_size=tr.batch_size,
            dtype=tr.dtype,
            seed=seed,
            mask=str(MaskSpec.parse(mask)),
            activation=m.activation,
            tau=m.tau,
            heads=m.heads,
            d=m.d,
            d_mlp=m.d_mlp,
            dropout=m.dropout,
        )


def _where(text: str | None, token: str, msg: str) -> str:
    if text:
        for n, line in enumerate(text.splitlines(), start=1):
            if f'"{token}"' in line:
                return f"line {n}: {msg}"
    return msg


def _int(v, name, text):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(_where(text, name, f"{name}: expected an integer, got {v!r}"))
    return v


def _section(cls, name: str, value, text):
    if not isinstance(value, dict):
        raise ConfigError(_where(text, name, f"{name}: expected an object"))
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for k, v in value.items():
        if k not in known:
            raise ConfigError(_where(text, k, f"{name}.{k}: unknown field"))
        want = known[k].type
        ok = {
            "int": isinstance(v, int) and not isinstance(v, bool),
            "float": isinstance(v, (int, float)) and not isinstance(v, bool),
            "bool": isinstance(v, bool),
            "str": isinstance(v, str),
        }.get(want, True)
        if not ok:
            raise ConfigError(_where(text, k, f"{name}.{k}: expected {want}, got {v!r}"))
        kw[k] = float(v) if want == "float" else v
    return cls(**kw)


# ------------------------------------------------------------------- running


def _run_dir(root: Path, mask: str, seed: int) -> Path:
    safe = str(MaskSpec.parse(mask)).replace(":", "-").replace("+", "_")
    return root / safe / f"seed{seed}"


def _one_run(cfg_dict: dict, mask: str, seed: int, root: str) -> dict:
    """Train one (mask, seed) and run the enabled analyses. Never raises."""
    cfg = ExperimentConfig.from_dict(cfg_dict)
    tc = cfg.train_config(mask, seed)
    out = _run_dir(Path(root), mask, seed)
    rec = {"mask": tc.mask, "seed": seed, "dir": str(out), "run_id": tc.run_id(), "status": "ok"}
    try:
        train, hold = make_splits(tc.task, tc.n_train, tc.n_holdout, tc.seq_len, tc.data_seed)
        runlog, params = train_run(train, tc, holdout=hold, out_dir=out)
        rec["summary"] = runlog.summary()
        a = cfg.analysis
        if a.stability:
            stability_report(params, train, tc.mask, a.stability_k).write(out)
        if a.landscape:
            _landscape(params, train, tc.mask, a, out)
    except (DivergenceError, ContractError, FloatingPointError) as exc:
        rec["status"] = "error"
        rec["error"] = f"{type(exc).__name__}: {exc}"
        partial = getattr(exc, "log", None)
        if partial is not None:
            partial.write(out)
    except Exception as exc:  # noqa: BLE001 - recorded in the manifest
        rec["status"] = "error"
        rec["error"] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
    return rec


def _landscape(params, train, mask, a: AnalysisSection, out: Path) -> dict:
    sub = train.subset(np.arange(min(a.landscape_samples, len(train))))
    d1 = ls.sample_direction(params, a.landscape_seed * 2)
    d2 = ls.sample_direction(params, a.landscape_seed * 2 + 1)
    grid = ls.scan(params, d1, d2, a.grid_step, a.grid_range, dataset=sub, mask=mask)
    radii = [round(r, 10) for r in grid.coords[grid.coords > 0]]
    curves = ls.percentile_curves(grid, radii)
    out.mkdir(parents=True, exist_ok=True)
    ls.write_grid_csv(grid, out / "landscape_grid.csv")
    ls.write_curves_csv(curves, out / "landscape_curves.csv")
    ls.write_svg(grid, out / "landscape.svg")
    info = {
        "mask": str(mask),
        "samples": len(sub),
        "grid_step": a.grid_step,
        "grid_range": a.grid_range,
        "center_loss": grid.center,
        "flagged_cells": int(grid.flagged.sum()),
        "curves": curves,
    }
    (out / "landscape.json").write_text(json.dumps(info, indent=2))
    return info


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> Path:
    """Run every (mask, seed) of ``cfg``; returns the artifact directory."""
    root = Path(cfg.out) / cfg.config_hash()
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(cfg.to_json())
    # one initial checkpoint per seed, shared by all masks (globals excluded)
    init_dir = root / "init"
    init_dir.mkdir(exist_ok=True)
    probe = make_splits(cfg.task.name, 1, 1, cfg.task.seq_len, cfg.task.data_seed)[0]
    for s in cfg.seeds:
        mcfg = cfg.train_config("full", s).model_config(probe.spec.vocab_size, probe.spec.n_classes, probe.tokens.shape[1])
        save_checkpoint(init_params(mcfg, s), init_dir / f"seed{s}.npz")

    jobs = [(m, s) for s in cfg.seeds for m in cfg.masks]
    d = cfg.to_dict()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_one_run, [d] * len(jobs), *zip(*jobs), [str(root)] * len(jobs)))
    else:
        records = [_one_run(d, m, s, str(root)) for m, s in jobs]
    for r in records:
        r["init_checkpoint"] = str(init_dir / f"seed{r['seed']}.npz")
    manifest = {
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "runs": records,
        "ok": all(r["status"] == "ok" for r in records),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


# ------------------------------------------------------------------- compare


def _find_summaries(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_file() and p.name == "summary.json":
            out.append(p)
        elif (p / "summary.json").exists():
            out.append(p / "summary.json")
        else:
            out.extend(sorted(p.rglob("summary.json")))
    return out


def _mean_std(vals: list[float]) -> tuple[float | None, float | None]:
    if not vals:
        return None, None
    a = np.asarray(vals, dtype=float)
    return float(a.mean()), (float(a.std(ddof=1)) if len(a) > 1 else None)


def compare(paths, out: Path | None = None) -> list[dict]:
    """Mean and std across seeds of holdout accuracy and convergence, per mask."""
    groups: dict[str, list[dict]] = {}
    for p in _find_summaries(paths):
        s = json.loads(p.read_text())
        groups.setdefault(s["config"]["mask"], []).append(s)
    rows = []
    for mask in sorted(groups):
        runs = groups[mask]
        best = [r["best_holdout"]["acc"] for r in runs if r["best_holdout"]]
        final = [r["final_holdout"] for r in runs if r["final_holdout"] is not None]
        conv = [r["epochs_to_95pct_train"] for r in runs if r["epochs_to_95pct_train"] is not None]
        row = {"mask": mask, "n_runs": len(runs), "n_converged": len(conv)}
        for name, vals in (("best_holdout", best), ("final_holdout", final), ("epochs_to_95", conv)):
            row[f"{name}_mean"], row[f"{name}_std"] = _mean_std(vals)
        rows.append(row)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "compare.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["mask"])
            w.writeheader()
            w.writerows(rows)
        (out / "compare.json").write_text(json.dumps(rows, indent=2))
    return rows


def _fmt(mean, std, pct=False) -> str:
    if mean is None:
        return "-"
    k = 100.0 if pct else 1.0
    s = f"{mean * k:.2f}"
    return s if std is None else f"{s} +- {std * k:.2f}"


# ----------------------------------------------------------------------- main


def _load_run(run_dir: Path):
    summary = json.loads((run_dir / "summary.json").read_text())
    tc = TrainConfig(**summary["config"])
    params, _ = load_checkpoint(run_dir / "checkpoint.npz")
    return tc, params


def _cmd_gen(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    t = cfg.task
    seed = t.data_seed if args.seed is None else args.seed
    train, hold = make_splits(t.name, t.n_train, t.n_holdout, t.seq_len, seed)
    out = Path(args.out or f"data/{t.name}")
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train, out / "train.tsv")
    save_dataset(hold, out / "holdout.tsv")
    save_vocab(train.spec, out / "vocab.tsv")
    print(f"wrote {len(train)} train / {len(hold)} holdout {t.name} instances to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out:
        cfg.out = args.out
    if args.grid_step is not None:
        cfg.analysis.grid_step = args.grid_step
    if args.grid_range is not None:
        cfg.analysis.grid_range = args.grid_range
    root = run_experiment(cfg, workers=args.workers)
    manifest = json.loads((root / "manifest.json").read_text())
    for r in manifest["runs"]:
        s = r.get("summary", {})
        print(
            f"{r['mask']:>12} seed {r['seed']}: {r['status']}"
            + (f"  epochs_to_95={s.get('epochs_to_95pct_train')} final_holdout={s.get('final_holdout')}" if s else "")
            + (f"  {r['error']}" if "error" in r else "")
        )
    print(f"artifacts in {root}")
    return 0 if manifest["ok"] else 1


def _cmd_stability(args) -> int:
    run = Path(args.run)
    tc, params = _load_run(run)
    train, _ = make_splits(tc.task, tc.n_train, tc.n_holdout, tc.seq_len, tc.data_seed)
    rep = stability_report(params, train, tc.mask, args.k)
    rep.write(Path(args.out) if args.out else run)
    for up, lo in zip((75, 90, 95), (25, 10, 5)):
        p = rep.percentiles
        print(
            f"p{up}: delta_s={p['delta_s'][up]:.3f} delta_h={p['delta_h'][up]:.3f} "
            f"Delta_h(p{lo})={p['Delta_h'][lo]:.4f} beta={p['beta'][up]:.2f} "
            f"lhs_W={rep.lhs[up]['lhs_W']:.3f} lhs_X={rep.lhs[up]['lhs_X']:.3f}"
        )
    return 0


def _cmd_landscape(args) -> int:
    run = Path(args.run)
    tc, params = _load_run(run)
    train, _ = make_splits(tc.task, tc.n_train, tc.n_holdout, tc.seq_len, tc.data_seed)
    a = AnalysisSection(
        landscape=True,
        grid_step=args.grid_step if args.grid_step is not None else 0.05,
        grid_range=args.grid_range if args.grid_range is not None else 1.0,
        landscape_samples=args.samples,
        landscape_seed=args.seed or 0,
    )
    info = _landscape(params, train, tc.mask, a, Path(args.out) if args.out else run)
    last = info["curves"][-1]
    print(f"center loss {info['center_loss']:.6g}; at r={last['radius']}: p95={last['p95']:.4g} p99={last['p99']:.4g}")
    return 0


def _cmd_compare(args) -> int:
    rows = compare(args.runs, Path(args.out) if args.out else None)
    print(f"{'mask':>12}  {'runs':>4}  {'best holdout %':>16}  {'final holdout %':>16}  {'epochs to 95%':>14}")
    for r in rows:
        print(
            f"{r['mask']:>12}  {r['n_runs']:>4}  {_fmt(r['best_holdout_mean'], r['best_holdout_std'], True):>16}  "
            f"{_fmt(r['final_holdout_mean'], r['final_holdout_std'], True):>16}  "
            f"{_fmt(r['epochs_to_95_mean'], r['epochs_to_95_std']):>14} ({r['n_converged']}/{r['n_runs']})"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparselab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate and save a task's train/holdout split")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.set_defaults(fn=_cmd_gen)

    for name in ("train", "run"):
        t = sub.add_parser(name, help="train every (mask, seed) of a config, plus enabled analyses")
        t.add_argument("--config")
        t.add_argument("--seed", type=int, help="run only this seed")
        t.add_argument("--out", help="output root (overrides the config)")
        t.add_argument("--workers", type=int, default=1)
        t.add_argument("--grid-step", type=float)
        t.add_argument("--grid-range", type=float)
        t.set_defaults(fn=_cmd_train)

    s = sub.add_parser("stability", help="dispersion percentiles and bound LHS for a trained run")
    s.add_argument("--run", required=True, help="run directory with checkpoint.npz and summary.json")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--out")
    s.set_defaults(fn=_cmd_stability)

    la = sub.add_parser("landscape", help="loss surface and Lipschitz percentiles for a trained run")
    la.add_argument("--run", required=True)
    la.add_argument("--grid-step", type=float)
    la.add_argument("--grid-range", type=float)
    la.add_argument("--samples", type=int, default=256)
    la.add_argument("--seed", type=int, default=0)
    la.add_argument("--out")
    la.set_defaults(fn=_cmd_landscape)

    c = sub.add_parser("compare", help="aggregate run summaries per mask")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out")
    c.set_defaults(fn=_cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
