"""Scaled dot-product, multi-head, and self-and-mixed attention."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import ConfigError, Linear, Module

NEG_INF = -np.inf


class MaskKind(enum.Enum):
    NONE = "none"
    PADDING = "padding"
    MIXED_CAUSAL = "mixed_causal"


@dataclass(frozen=True)
class AttentionMask:
    """Additive mask with entries in {0, -inf}, broadcast against attention logits."""

    matrix: np.ndarray
    kind: MaskKind = MaskKind.NONE

    @property
    def shape(self):
        return self.matrix.shape


def build_mixed_mask(m: int, n: int) -> AttentionMask:
    """Mask for ``m`` target queries over ``n`` acoustic + ``m`` target keys.

    Row ``i`` may see column ``j`` iff ``j <= i + n``: every acoustic position
    and the targets up to and including itself.
    """
    if m < 1 or n < 0:
        raise ValueError(f"build_mixed_mask needs m >= 1 and n >= 0, got m={m}, n={n}")
    i = np.arange(m)[:, None]
    j = np.arange(n + m)[None, :]
    mat = np.where(j > i + n, NEG_INF, 0.0)
    return AttentionMask(mat, MaskKind.MIXED_CAUSAL)


def causal_mask(m: int) -> AttentionMask:
    return AttentionMask(build_mixed_mask(m, 0).matrix, MaskKind.MIXED_CAUSAL)


def padding_mask(lengths, total: int) -> AttentionMask:
    """``(B, 1, 1, total)`` mask hiding key positions at or beyond each length."""
    lengths = np.asarray(lengths)
    mat = np.where(np.arange(total)[None, :] < lengths[:, None], 0.0, NEG_INF)
    return AttentionMask(mat[:, None, None, :], MaskKind.PADDING)


def batch_mixed_mask(m: int, src_lengths, n_max: int) -> AttentionMask:
    """Mixed mask over a padded acoustic block.

    Shape ``(B, 1, m, n_max + m)``.  Acoustic columns at or beyond the
    utterance length are hidden; the target block is causal.  With every
    length equal to ``n_max`` each slice equals ``build_mixed_mask(m, n_max)``.
    """
    src = padding_mask(src_lengths, n_max).matrix  # (B,1,1,n)
    b = src.shape[0]
    src = np.broadcast_to(src, (b, 1, m, n_max))
    tgt = np.broadcast_to(causal_mask(m).matrix, (b, 1, m, m))
    return AttentionMask(np.concatenate([src, tgt], axis=-1), MaskKind.MIXED_CAUSAL)


def _mask_array(mask) -> np.ndarray | None:
    if mask is None:
        return None
    return mask.matrix if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=np.float64)


def scaled_dot_attention(q, k, v, mask=None) -> tuple[Tensor, np.ndarray]:
    """``softmax(q k^T / sqrt(d_k) + mask) v``; returns output and weights."""
    q, k, v = ag.as_tensor(q), ag.as_tensor(k), ag.as_tensor(v)
    dk = q.shape[-1]
    if k.shape[-1] != dk:
        raise ShapeError(f"query dim {dk} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key rows {k.shape[-2]} != value rows {v.shape[-2]}")
    logits = ag.matmul(q, ag.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dk))
    mat = _mask_array(mask)
    if mat is not None:
        if mat.shape[-2:] != logits.shape[-2:] and not (mat.shape[-2] == 1 and mat.shape[-1] == logits.shape[-1]):
            raise ShapeError(f"mask shape {mat.shape} does not fit logits {logits.shape}")
        logits = ag.add(logits, ag.Tensor(mat))
    weights = ag.softmax(logits, axis=-1)
    return ag.matmul(weights, v), weights.data


class MultiHeadAttention(Module):
    """Per-head projections stored as column blocks of one ``d_model x d_model`` matrix."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if n_heads < 1 or d_model % n_heads:
            raise ConfigError(f"n_heads={n_heads} must divide d_model={d_model}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return ag.swapaxes(ag.reshape(x, (b, t, self.n_heads, self.d_head)), 1, 2)

    def merge(self, x: Tensor) -> Tensor:
        b, _, t, _ = x.shape
        return ag.reshape(ag.swapaxes(x, 1, 2), (b, t, self.d_model))

    def project_kv(self, x) -> tuple[Tensor, Tensor]:
        return self.split(self.wk(x)), self.split(self.wv(x))

    def attend(self, query, k_heads: Tensor, v_heads: Tensor, mask=None) -> tuple[Tensor, np.ndarray]:
        q = self.split(self.wq(query))
        out, weights = scaled_dot_attention(q, k_heads, v_heads, mask)
        return self.wo(self.merge(out)), weights

    def __call__(self, query, key, value, mask=None) -> tuple[Tensor, np.ndarray]:
        """Inputs are ``(B, L, d_model)``; output is ``(B, L_query, d_model)``."""
        return self.attend(query, self.split(self.wk(key)), self.split(self.wv(value)), mask)


@dataclass
class JointStream:
    """Acoustic block ``S`` (B, n, d) and linguistic block ``T`` (B, m, d).

    ``src_lengths`` holds the valid acoustic length per batch row; ``None``
    means every row uses the full ``n``.
    """

    S: Tensor
    T: Tensor
    src_lengths: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.S.shape[1]

    @property
    def m(self) -> int:
        return self.T.shape[1]

    def lengths(self) -> np.ndarray:
        if self.src_lengths is None:
            return np.full(self.S.shape[0], self.n)
        return self.src_lengths

    def concat(self) -> Tensor:
        return ag.concat([self.S, self.T], axis=1)

    def split(self, joint: Tensor) -> JointStream:
        n = self.n
        return JointStream(joint[:, :n], joint[:, n:], self.src_lengths)


def mixed_attention(t_in, s_in, mixed: MultiHeadAttention, src_lengths=None) -> tuple[Tensor, np.ndarray]:
    """Target queries over ``Concat(S, T)`` with one shared K/V projection."""
    t_in, s_in = ag.as_tensor(t_in), ag.as_tensor(s_in)
    n, m = s_in.shape[1], t_in.shape[1]
    if src_lengths is None:
        mask = build_mixed_mask(m, n)
    else:
        mask = batch_mixed_mask(m, src_lengths, n)
    joint = ag.concat([s_in, t_in], axis=1)
    return mixed(t_in, joint, joint, mask)


def sma_layer_attention(
    stream: JointStream,
    self_proj: MultiHeadAttention,
    mixed_proj: MultiHeadAttention,
    return_weights: bool = False,
):
    """Self-attention over ``S`` and mixed attention for ``T``.

    The acoustic update reads only ``S``; ``T`` never influences it.
    """
    if stream.n == 0:
        raise ConfigError("self-and-mixed attention needs a non-empty acoustic block")
    lengths = stream.src_lengths
    s_mask = None if lengths is None else padding_mask(lengths, stream.n)
    s_out, s_w = self_proj(stream.S, stream.S, stream.S, s_mask)
    t_out, t_w = mixed_attention(stream.T, stream.S, mixed_proj, lengths)
    out = JointStream(s_out, t_out, lengths)
    if return_weights:
        return out, (s_w, t_w)
    return out


def dump_alignment(weights: np.ndarray, path) -> None:
    """Write a ``(rows x cols)`` attention matrix as whitespace-separated text."""
    w = np.asarray(weights)
    while w.ndim > 2:
        w = w[0]
    np.savetxt(path, w, fmt="%.6e")
