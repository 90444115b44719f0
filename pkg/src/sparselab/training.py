"""Minibatch ERM with SGD or Adam under a per-epoch geometric LR decay."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .attention import MaskSpec
from .model import ModelConfig, ModelParams, forward, init_params, save_checkpoint
from .tasks import Dataset, make_splits

__all__ = [
    "DivergenceError",
    "TrainConfig",
    "RunLog",
    "sgd_step",
    "adam_step",
    "step_lr",
    "evaluate",
    "train_run",
]


class DivergenceError(FloatingPointError):
    """Loss or gradient became non-finite. ``log`` holds the partial run."""

    def __init__(self, msg: str, log: "RunLog | None" = None):
        super().__init__(msg)
        self.log = log


@dataclass
class TrainConfig:
    task: str = "even_pairs"
    n_train: int = 2000
    n_holdout: int = 500
    seq_len: int = 40
    optimizer: str = "sgd"
    lr0: float = 0.1
    gamma: float = 0.9995
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    data_seed: int = 0
    activation: str = "relu"
    mask: str = "full"
    tau: int = 5
    heads: int = 1
    d: int = 64
    d_mlp: int = 64
    dropout: float = 0.01
    dtype: str = "float64"  # "float32" roughly halves step time

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        MaskSpec.parse(self.mask)

    def to_dict(self) -> dict:
        return asdict(self)

    def run_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]

    def model_config(self, vocab_size: int, n_classes: int, seq_len: int) -> ModelConfig:
        ms = MaskSpec.parse(self.mask)
        return ModelConfig(
            vocab_size=vocab_size,
            seq_len=seq_len,
            n_classes=n_classes,
            d=self.d,
            d_mlp=self.d_mlp,
            tau=self.tau,
            heads=self.heads,
            activation=self.activation,
            dropout=self.dropout,
            n_global=ms.n_global,
            dtype=self.dtype,
        )


@dataclass
class RunLog:
    """Per-epoch metrics. ``initial`` holds the metrics of the untrained model."""

    config: dict
    initial: dict = field(default_factory=dict)
    train_ce: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    holdout_acc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    diverged: bool = False
    seconds: float = 0.0  # wall clock
    cpu_seconds: float = 0.0  # process CPU time

    @property
    def epochs_run(self) -> int:
        return len(self.train_acc)

    @property
    def epochs_to_95(self) -> int | None:
        """First epoch (1-based) with train accuracy >= 0.95."""
        for e, a in enumerate(self.train_acc, start=1):
            if a >= 0.95:
                return e
        return None

    @property
    def best_holdout(self) -> tuple[float, int] | None:
        if not self.holdout_acc:
            return None
        e = int(np.argmax(self.holdout_acc))
        return self.holdout_acc[e], e + 1

    @property
    def final_holdout(self) -> float | None:
        return self.holdout_acc[-1] if self.holdout_acc else self.initial.get("holdout_acc")

    def summary(self) -> dict:
        best = self.best_holdout
        return {
            "run_id": TrainConfig(**self.config).run_id(),
            "config": self.config,
            "epochs_run": self.epochs_run,
            "epochs_to_95pct_train": self.epochs_to_95,
            "best_holdout": None if best is None else {"acc": best[0], "epoch": best[1]},
            "final_holdout": self.final_holdout,
            "final_train_acc": self.train_acc[-1] if self.train_acc else self.initial.get("train_acc"),
            "initial": self.initial,
            "diverged": self.diverged,
            "seconds": self.seconds,
            "cpu_seconds": self.cpu_seconds,
        }

    def rows(self) -> list[dict]:
        out = []
        if self.initial:
            out.append({"epoch": 0, "lr": float("nan"), **self.initial})
        for e in range(self.epochs_run):
            out.append(
                {
                    "epoch": e + 1,
                    "train_ce": self.train_ce[e],
                    "train_acc": self.train_acc[e],
                    "holdout_acc": self.holdout_acc[e],
                    "lr": self.lr[e],
                }
            )
        return out

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["epoch", "train_ce", "train_acc", "holdout_acc", "lr"]
        with open(out / "log.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.rows())
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        return out


def _check_finite(grads, where: str = "gradient") -> None:
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite {where}")


def sgd_step(theta: list[np.ndarray], grads: list[np.ndarray], lr: float) -> list[np.ndarray]:
    """``theta - lr * grad`` for every array."""
    _check_finite(grads)
    return [t if g is None else t - lr * g for t, g in zip(theta, grads)]


def adam_step(
    theta: list[np.ndarray],
    grads: list[np.ndarray],
    state: dict | None,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], dict]:
    """Bias-corrected Adam. ``state`` is ``None`` on the first call."""
    _check_finite(grads)
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(t) for t in theta], "v": [np.zeros_like(t) for t in theta]}
    t = state["t"] + 1
    new_theta, ms, vs = [], [], []
    for p, g, m, v in zip(theta, grads, state["m"], state["v"]):
        if g is None:
            new_theta.append(p)
            ms.append(m)
            vs.append(v)
            continue
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        new_theta.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        ms.append(m)
        vs.append(v)
    return new_theta, {"t": t, "m": ms, "v": vs}


def step_lr(lr0: float, gamma: float, epoch: int) -> float:
    return lr0 * gamma**epoch


def evaluate(params: ModelParams, ds: Dataset, mask="full", batch: int = 500) -> tuple[float, float]:
    """Mean cross-entropy and accuracy with dropout off."""
    ce, correct = 0.0, 0
    with tn.no_grad():
        for s in range(0, len(ds), batch):
            tok, y = ds.tokens[s : s + batch], ds.labels[s : s + batch]
            logits = forward(tok, params, mask)
            ce += tn.cross_entropy(logits, y).item() * len(y)
            correct += int((logits.data.argmax(axis=-1) == y).sum())
    n = max(len(ds), 1)
    return ce / n, correct / n


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def train_run(
    task,
    cfg: TrainConfig,
    holdout: Dataset | None = None,
    params: ModelParams | None = None,
    out_dir=None,
    progress=None,
) -> tuple[RunLog, ModelParams]:
    """Train on ``task`` (a task name, or a training :class:`Dataset`).

    Train accuracy and CE for an epoch are accumulated over that epoch's
    minibatches in training mode; holdout accuracy is measured after the
    epoch. ``progress``, if given, is called with ``(epoch, log)``.
    """
    if isinstance(task, str):
        train, holdout = make_splits(task, cfg.n_train, cfg.n_holdout, cfg.seq_len, cfg.data_seed)
    else:
        train = task
        if holdout is None:
            raise ValueError("a holdout dataset is required with an explicit training set")
    if params is None:
        mcfg = cfg.model_config(train.spec.vocab_size, train.spec.n_classes, train.tokens.shape[1])
        params = init_params(mcfg, cfg.seed)
    mask = MaskSpec.parse(cfg.mask)
    log = RunLog(config=cfg.to_dict())
    t0, c0 = time.perf_counter(), time.process_time()

    ce0, acc0 = evaluate(params, train, mask)
    log.initial = {"train_ce": ce0, "train_acc": acc0, "holdout_acc": evaluate(params, holdout, mask)[1]}

    tensors = params.parameters()
    opt_state = None
    n = len(train)
    for epoch in range(cfg.epochs):
        lr = step_lr(cfg.lr0, cfg.gamma, epoch)
        order = _epoch_rng(cfg.seed, epoch, 0).permutation(n)
        drop_rng = _epoch_rng(cfg.seed, epoch, 1)
        loss_sum, correct = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            tok, y = train.tokens[idx], train.labels[idx]
            params.zero_grad()
            logits = forward(tok, params, mask, training=True, rng=drop_rng)
            loss = tn.cross_entropy(logits, y)
            if not math.isfinite(loss.item()):
                log.diverged = True
                log.seconds = time.perf_counter() - t0
                log.cpu_seconds = time.process_time() - c0
                raise DivergenceError(f"non-finite loss at epoch {epoch + 1}", log)
            tn.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in tensors]
            try:
                if cfg.optimizer == "sgd":
                    new = sgd_step([p.data for p in tensors], grads, lr)
                else:
                    new, opt_state = adam_step([p.data for p in tensors], grads, opt_state, lr)
            except DivergenceError as exc:
                log.diverged = True
                raise DivergenceError(f"{exc} at epoch {epoch + 1}", log) from None
            for p, v in zip(tensors, new):
                p.data = v
            loss_sum += loss.item() * len(y)
            correct += int((logits.data.argmax(axis=-1) == y).sum())
        log.train_ce.append(loss_sum / n)
        log.train_acc.append(correct / n)
        log.holdout_acc.append(evaluate(params, holdout, mask)[1])
        log.lr.append(lr)
        if progress is not None:
            progress(epoch + 1, log)
    log.seconds = time.perf_counter() - t0
    log.cpu_seconds = time.process_time() - c0
    if out_dir is not None:
        log.write(out_dir)
        save_checkpoint(params, Path(out_dir) / "checkpoint.npz", {"mask": str(mask), "run_id": cfg.run_id()})
    return log, params
