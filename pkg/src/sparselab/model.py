"""Post-norm transformer blocks and the averaged-readout sequence classifier.

A block maps ``X`` (``(..., d, L)``) to ``LN(Xt + R^T act(P Xt))`` with
``Xt = LN(X + attention(X))``. The classifier embeds tokens, adds fixed
sinusoidal positions, runs ``tau`` blocks, averages the token columns and
applies a linear readout.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .attention import MaskSpec, attend, multi_head_attend
from .tensor import Tensor

__all__ = [
    "VocabularyError",
    "LayerNormCfg",
    "ModelConfig",
    "HeadParams",
    "BlockParams",
    "ModelParams",
    "sinusoidal_positions",
    "init_params",
    "layer_norm",
    "mlp",
    "tf_block",
    "forward",
    "save_checkpoint",
    "load_checkpoint",
]


class VocabularyError(IndexError):
    """A token id is outside the embedding table."""


@dataclass(frozen=True)
class LayerNormCfg:
    eps: float = 1e-5
    scale: float = 1.0  # fixed, not learned
    shift: float = 0.0  # fixed, not learned

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("LayerNorm eps must be positive")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    seq_len: int
    n_classes: int
    d: int = 64
    d_mlp: int = 64
    tau: int = 5
    heads: int = 1
    activation: str = "relu"
    dropout: float = 0.01
    n_global: int = 0
    ln_eps: float = 1e-5
    dtype: str = "float64"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HeadParams:
    W: Tensor
    V: Tensor
    H: Tensor | None = None  # head aggregator, only with several heads


@dataclass
class BlockParams:
    heads: list[HeadParams]
    P: Tensor
    R: Tensor

    @property
    def W(self) -> Tensor:
        return self.heads[0].W

    @property
    def V(self) -> Tensor:
        return self.heads[0].V


@dataclass
class ModelParams:
    """Learnable tensors plus the fixed position encodings and aggregator."""

    config: ModelConfig
    T: Tensor
    blocks: list[BlockParams]
    Phi: Tensor
    E: np.ndarray
    omega: np.ndarray
    global_embeds: Tensor | None = None
    ln: LayerNormCfg = field(default_factory=LayerNormCfg)

    def named(self) -> list[tuple[str, Tensor]]:
        """Learnable tensors in a fixed order (the checkpoint name scheme)."""
        out = [("embed.T", self.T)]
        for t, blk in enumerate(self.blocks):
            if len(blk.heads) == 1:
                out += [(f"block{t}.W", blk.W), (f"block{t}.V", blk.V)]
            else:
                for i, h in enumerate(blk.heads):
                    out += [(f"block{t}.head{i}.W", h.W), (f"block{t}.head{i}.V", h.V), (f"block{t}.head{i}.H", h.H)]
            out += [(f"block{t}.P", blk.P), (f"block{t}.R", blk.R)]
        out.append(("readout.Phi", self.Phi))
        if self.global_embeds is not None:
            out.append(("global.G", self.global_embeds))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def copy(self) -> "ModelParams":
        clone = init_params(self.config, seed=0)
        clone.load_state(self.state())
        clone.E = self.E.copy()
        clone.omega = self.omega.copy()
        clone.ln = self.ln
        return clone


def sinusoidal_positions(d: int, L: int, base: float = 10000.0) -> np.ndarray:
    """Fixed ``(d, L)`` sinusoidal encodings: even rows sine, odd rows cosine."""
    pos = np.arange(L)[None, :]
    i = np.arange(d)[:, None]
    freq = base ** (-(i - i % 2) / d)
    return np.where(i % 2 == 0, np.sin(pos * freq), np.cos(pos * freq))


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Seeded initialization, uniform in ``+-1/sqrt(fan_in)`` per matrix.

    Global-token embeddings come from a separate stream so the shared
    parameters are identical across mask variants with the same seed.
    """
    rng = np.random.default_rng(seed)
    dt = np.dtype(cfg.dtype)

    def uni(shape, fan_in, name):
        a = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-a, a, size=shape).astype(dt), requires_grad=True, name=name)

    d, dm = cfg.d, cfg.d_mlp
    # T acts on one-hot tokens, so its fan-in is the vocabulary size
    T = uni((d, cfg.vocab_size), cfg.vocab_size, "embed.T")
    blocks = []
    for t in range(cfg.tau):
        heads = []
        for i in range(cfg.heads):
            W = uni((d, d), d, f"block{t}.W")
            V = uni((d, d), d, f"block{t}.V")
            H = uni((d, d), d, f"block{t}.H") if cfg.heads > 1 else None
            heads.append(HeadParams(W, V, H))
        P = uni((dm, d), d, f"block{t}.P")
        R = uni((dm, d), dm, f"block{t}.R")
        blocks.append(BlockParams(heads, P, R))
    Phi = uni((cfg.n_classes, d), d, "readout.Phi")
    G = None
    if cfg.n_global:
        grng = np.random.default_rng([seed, 0x6106A1])
        a = 1.0 / math.sqrt(d)
        G = Tensor(grng.uniform(-a, a, size=(d, cfg.n_global)).astype(dt), requires_grad=True, name="global.G")
    E = sinusoidal_positions(d, cfg.seq_len).astype(dt)
    omega = np.full(cfg.seq_len, 1.0 / cfg.seq_len, dtype=dt)
    return ModelParams(cfg, T, blocks, Phi, E, omega, G, LayerNormCfg(cfg.ln_eps))


def layer_norm(x: Tensor, cfg: LayerNormCfg = LayerNormCfg()) -> Tensor:
    """Columnwise LayerNorm with fixed unit scale and zero shift."""
    x = tn._as_tensor(x)
    y = tn.layer_norm(x, cfg.eps, axis=0 if x.ndim == 1 else -2)
    if cfg.scale != 1.0:
        y = tn.scale(y, cfg.scale)
    if cfg.shift != 0.0:
        y = y + cfg.shift
    return y


def mlp(x: Tensor, P: Tensor, R: Tensor, act: str = "relu") -> Tensor:
    """Tokenwise ``R^T act(P x)`` for ``x`` of shape ``(d,)`` or ``(..., d, L)``."""
    x = tn._as_tensor(x)
    if x.ndim == 1:
        return tn.reshape(mlp(tn.reshape(x, (-1, 1)), P, R, act), (-1,))
    return tn.transpose(R) @ tn.activation(P @ x, act)


def tf_block(
    X: Tensor,
    blk: BlockParams,
    mask_spec="full",
    act: str = "relu",
    ln: LayerNormCfg = LayerNormCfg(),
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    spec = MaskSpec.parse(mask_spec)
    if len(blk.heads) == 1 and blk.heads[0].H is None:
        a = attend(X, blk.W, blk.V, spec)
    else:
        a = multi_head_attend(X, [(h.W, h.V, h.H) for h in blk.heads], spec)
    a = tn.dropout(a, dropout, rng, training)
    Xt = layer_norm(X + a, ln)
    m = tn.dropout(mlp(Xt, blk.P, blk.R, act), dropout, rng, training)
    return layer_norm(Xt + m, ln)


def embed(tokens: np.ndarray, params: ModelParams) -> Tensor:
    """Initial token matrix ``T[:, v_i] + E[:, i]`` with globals appended."""
    tok = np.asarray(tokens)
    if tok.size and (tok.min() < 0 or tok.max() >= params.T.shape[1]):
        raise VocabularyError(f"token id outside vocabulary of size {params.T.shape[1]}")
    if tok.shape[-1] != params.E.shape[1]:
        raise ValueError(f"sequence length {tok.shape[-1]} != model length {params.E.shape[1]}")
    X = tn.embedding(params.T, tok) + params.E
    if params.global_embeds is not None:
        G = params.global_embeds
        X = tn.concat([X, tn.broadcast_to(G, tok.shape[:-1] + G.shape)], axis=-1)
    return X


def forward(
    tokens: np.ndarray,
    params: ModelParams,
    mask_spec="full",
    act: str | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> Tensor:
    """Logits ``Phi (X_tau omega)`` for one sequence ``(L,)`` or a batch ``(B, L)``.

    ``trace``, when given, receives the input array to every block.
    """
    tok = np.asarray(tokens, dtype=np.int64)
    single = tok.ndim == 1
    if single:
        tok = tok[None, :]
    cfg = params.config
    act = act or cfg.activation
    X = embed(tok, params)
    for blk in params.blocks:
        if trace is not None:
            trace.append(X.data)
        X = tf_block(X, blk, mask_spec, act, params.ln, cfg.dropout, rng, training)
    L = params.E.shape[1]
    if X.shape[-1] != L:
        X = X[..., :L]
    pooled = X @ params.omega.reshape(L, 1)
    logits = tn.reshape(params.Phi @ pooled, (tok.shape[0], -1))
    return tn.reshape(logits, (-1,)) if single else logits


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> Path:
    """Write the named parameter arrays and the model config to an ``.npz``."""
    path = Path(path)
    meta = {"config": params.config.to_dict(), "ln_eps": params.ln.eps, **(extra or {})}
    arrays = params.state()
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        cfg = ModelConfig(**meta["config"])
        params = init_params(cfg, seed=0)
        params.load_state({k: z[k] for k in z.files if k != "__meta__"})
    return params, meta
