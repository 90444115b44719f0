"""Attention masks and masked-softmax self-attention.

Matrices follow the column convention used throughout the package: a token
sequence is ``X`` of shape ``(..., d, L)``, the score matrix is
``D = X^T W X`` of shape ``(..., L, L)``, and ``D[j, i]`` scores key ``j``
for query ``i``. A mask entry ``M[j, i] = 1`` means query ``i`` may attend to
key ``j``; softmax normalizes over ``j`` (axis ``-2``).
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Tensor

__all__ = [
    "ParameterError",
    "AttnMask",
    "MaskSpec",
    "build_agnostic_mask",
    "topk_matrix",
    "topk_mask",
    "masked_softmax",
    "attention_matrix",
    "attend",
    "multi_head_attend",
]

AGNOSTIC_KINDS = ("full", "band", "block", "stride")


class ParameterError(ValueError):
    """A mask parameter is out of its meaningful range."""


@dataclass
class AttnMask:
    """A binary ``L x L`` mask (possibly batched for input-dependent kinds)."""

    kind: str
    matrix: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.matrix.shape[-1]

    def column_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=-2)

    def row_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=-1)

    @property
    def input_dependent(self) -> bool:
        return self.kind == "topk"


def build_agnostic_mask(kind: str, L: int, param: int | None = None, n_global: int = 0) -> AttnMask:
    """Build an input-agnostic mask of length ``L``.

    ``param`` is the half-width ``w`` for ``band``, the block size ``b`` for
    ``block`` and the stride ``s`` for ``stride``; it is ignored for ``full``.
    With ``n_global > 0`` the last ``n_global`` positions are made global:
    they attend to every token and every token attends to them.
    """
    if L < 1:
        raise ParameterError(f"sequence length must be >= 1, got {L}")
    if n_global < 0 or (n_global and n_global >= L):
        raise ParameterError(f"need 0 <= n_global < L, got n_global={n_global}, L={L}")
    idx = np.arange(L)
    q = idx[None, :]  # query index i, along columns
    k = idx[:, None]  # key index j, along rows
    if kind == "full":
        m = np.ones((L, L), dtype=bool)
        params: dict = {}
    elif kind == "band":
        w = _require(param, "band half-width")
        if w < 0:
            raise ParameterError(f"band half-width must be >= 0, got {w}")
        m = (k >= q - w) & (k <= q + w)
        params = {"w": w}
    elif kind == "block":
        b = _require(param, "block size")
        if b < 1 or b > L:
            raise ParameterError(f"block size must lie in [1, L={L}], got {b}")
        m = (k // b) == (q // b)
        params = {"b": b}
    elif kind == "stride":
        s = _require(param, "stride")
        if s < 1 or s >= L:
            raise ParameterError(f"stride must lie in [1, L={L}), got {s}")
        m = (np.abs(q - k) % s) == 0
        params = {"s": s}
    else:
        raise ParameterError(f"unknown agnostic mask kind {kind!r}")
    m = np.array(m, dtype=bool)
    if n_global:
        m[L - n_global:, :] = True
        m[:, L - n_global:] = True
        params["g"] = n_global
    return AttnMask(kind, m, params)


def _require(value, what):
    if value is None:
        raise ParameterError(f"missing {what}")
    return int(value)


def topk_matrix(D: np.ndarray, k: int) -> np.ndarray:
    """Boolean top-``k`` selection along axis ``-2`` of ``D``.

    Ties are broken toward the lowest key index, so the result is a pure
    function of ``D``.
    """
    L = D.shape[-2]
    if not 1 <= k <= L:
        raise ParameterError(f"top-k needs 1 <= k <= L={L}, got k={k}")
    if k == L:
        return np.ones(D.shape, dtype=bool)
    # k-th largest value per column, then resolve ties at the threshold by
    # taking the earliest keys first
    thr = -np.partition(-D, k - 1, axis=-2)[..., k - 1 : k, :]
    above = D > thr
    need = k - above.sum(axis=-2, keepdims=True)
    at = D == thr
    return above | (at & (np.cumsum(at, axis=-2) <= need))


def topk_mask(D, k: int) -> AttnMask:
    D = D.data if isinstance(D, Tensor) else np.asarray(D, dtype=float)
    return AttnMask("topk", topk_matrix(D, k), {"k": k})


_SPEC_RE = re.compile(r"^(full|band|block|stride|topk)(?::(\d+))?(?:\+g(\d+))?$")


@dataclass(frozen=True)
class MaskSpec:
    """Mask recipe as written in configs: ``full``, ``band:5``, ``block:5+g1``,
    ``stride:4``, ``topk:5``.

    ``size`` is the number of keys per query for ``band`` (odd, so the
    half-width is ``(size - 1) // 2``), ``block`` and ``topk``, and the step
    for ``stride``.
    """

    kind: str = "full"
    size: int | None = None
    n_global: int = 0

    @classmethod
    def parse(cls, text: "str | MaskSpec") -> "MaskSpec":
        if isinstance(text, MaskSpec):
            return text
        m = _SPEC_RE.match(str(text).strip().lower())
        if not m:
            raise ParameterError(f"cannot parse mask spec {text!r}")
        kind, size, g = m.group(1), m.group(2), m.group(3)
        size = int(size) if size is not None else None
        g = int(g) if g is not None else 0
        if kind == "full":
            if size is not None:
                raise ParameterError("full mask takes no size")
        elif size is None or size < 1:
            raise ParameterError(f"{kind} mask needs a positive size")
        if kind == "band" and size % 2 == 0:
            raise ParameterError(f"band size must be odd, got {size}")
        if kind == "topk" and g:
            raise ParameterError("global tokens only combine with input-agnostic masks")
        return cls(kind, size, g)

    def __str__(self) -> str:
        s = self.kind if self.size is None else f"{self.kind}:{self.size}"
        return s + (f"+g{self.n_global}" if self.n_global else "")

    @property
    def input_dependent(self) -> bool:
        return self.kind == "topk"

    @property
    def k(self) -> int | None:
        """Keys per query for the sparse kinds (``None`` for full/stride)."""
        return self.size if self.kind in ("band", "block", "topk") else None

    def agnostic(self, L: int) -> AttnMask:
        """Mask over ``L`` positions (globals, if any, are the trailing ones)."""
        if self.input_dependent:
            raise ParameterError("top-k masks depend on the scores; use topk_mask")
        return _cached_agnostic(self, L)

    def matrix_for(self, D: np.ndarray) -> np.ndarray | None:
        """Mask matrix for score array ``D``; ``None`` stands for all ones."""
        if self.kind == "topk":
            return topk_matrix(D, self.size)
        if self.kind == "full" and not self.n_global:
            return None
        return self.agnostic(D.shape[-1]).matrix


@functools.lru_cache(maxsize=256)
def _cached_agnostic(spec: MaskSpec, L: int) -> AttnMask:
    param = spec.size
    if spec.kind == "band":
        param = (spec.size - 1) // 2
    mask = build_agnostic_mask(spec.kind, L, param, spec.n_global)
    mask.matrix.setflags(write=False)
    return mask


def _mask_array(mask) -> np.ndarray | None:
    if mask is None:
        return None
    if isinstance(mask, AttnMask):
        return mask.matrix
    return np.asarray(mask, dtype=bool)


def masked_softmax(D, M=None) -> Tensor:
    """Columnwise softmax of ``D`` over its unmasked entries."""
    return tn.masked_softmax(tn._as_tensor(D), _mask_array(M), axis=-2)


def attention_matrix(X: Tensor, W: Tensor, mask_spec="full") -> tuple[Tensor, np.ndarray | None]:
    """Post-softmax attention ``A`` and the mask used, for input ``X``."""
    spec = MaskSpec.parse(mask_spec) if not isinstance(mask_spec, AttnMask) else mask_spec
    D = tn.transpose(X) @ (W @ X)
    if isinstance(spec, AttnMask):
        M = spec.matrix
    else:
        # top-k selection is held fixed for the backward pass
        M = spec.matrix_for(D.data)
    return tn.masked_softmax(D, M, axis=-2), M


def attend(X: Tensor, W: Tensor, V: Tensor, mask_spec="full") -> Tensor:
    """Single-head attention ``V X softmax_M(X^T W X)``."""
    A, _ = attention_matrix(X, W, mask_spec)
    return (V @ X) @ A


def multi_head_attend(X: Tensor, heads, mask_spec="full") -> Tensor:
    """Sum over heads of ``H_i @ attend(X, W_i, V_i)``.

    Each head builds its own mask, which matters for top-k where the scores
    differ per head.
    """
    heads = list(heads)
    if not heads:
        raise ParameterError("need at least one head")
    out = None
    for W, V, H in heads:
        term = H @ attend(X, W, V, mask_spec)
        out = term if out is None else out + term
    return out
