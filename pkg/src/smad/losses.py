"""CTC, label-smoothed attention loss, and their weighted combination."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class DataError(ValueError):
    """Input data cannot be scored (infeasible alignment, bad ids)."""


def _extend_with_blanks(target, blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def ctc_forward_backward(log_probs: np.ndarray, target, blank: int = 0):
    """Log-space forward/backward over the blank-interleaved lattice.

    Returns ``(log_likelihood, occupancy)`` where ``occupancy[t, k]`` is the
    posterior probability of emitting class ``k`` at frame ``t``; it is also
    the negative gradient of ``-log p`` with respect to ``log_probs``.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    n_frames, n_classes = lp.shape
    ext = _extend_with_blanks(np.asarray(target, dtype=np.int64), blank)
    n_states = len(ext)
    emit = lp[:, ext]  # (T, S)

    # skip transition s-2 -> s allowed onto a label that differs from the label two back
    skip = np.zeros(n_states, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((n_frames, n_states), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if n_states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    final = alpha[-1, -1] if n_states == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    occupancy = np.zeros((n_frames, n_classes))
    if not np.isfinite(final):
        return final, occupancy

    beta = np.full((n_frames, n_states), -np.inf)
    beta[-1, -1] = 0.0
    if n_states > 1:
        beta[-1, -2] = 0.0
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    gamma = np.exp(alpha + beta - final)
    for s in range(n_states):
        occupancy[:, ext[s]] += gamma[:, s]
    return final, occupancy


def min_ctc_frames(target) -> int:
    """Shortest input admitting an alignment: one frame per label plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(log_probs, targets, blank: int = 0, input_lengths=None) -> Tensor:
    """Negative CTC log-likelihood, averaged over utterances.

    ``log_probs`` is ``(T, C)`` with one target sequence, or ``(B, T, C)``
    with a list of targets and optional per-utterance frame counts.  An
    infeasible utterance contributes ``inf`` and a warning; its gradient is zero.
    """
    log_probs = ag.as_tensor(log_probs)
    single = log_probs.ndim == 2
    data = log_probs.data[None] if single else log_probs.data
    if single:
        targets = [targets]
    b, n_frames, _ = data.shape
    if input_lengths is None:
        input_lengths = np.full(b, n_frames)
    total = 0.0
    grad = np.zeros_like(data)
    for i in range(b):
        length = int(input_lengths[i])
        tgt = np.asarray(targets[i], dtype=np.int64)
        ll, occ = ctc_forward_backward(data[i, :length], tgt, blank)
        if not np.isfinite(ll):
            warnings.warn(
                f"ctc: utterance {i} has no valid alignment ({length} frames for {len(tgt)} labels)",
                RuntimeWarning,
                stacklevel=2,
            )
        total -= ll
        grad[i, :length] = -occ / b
    value = total / b

    def bw(g):
        gr = g * grad
        return (gr[0] if single else gr,)

    return ag._make(np.asarray(value), (log_probs,), bw)


def smoothed_targets(targets: np.ndarray, vocab: int, smoothing: float) -> np.ndarray:
    q = np.full(targets.shape + (vocab,), smoothing / (vocab - 1) if vocab > 1 else 0.0)
    np.put_along_axis(q, targets[..., None], 1.0 - smoothing, axis=-1)
    return q


def attention_loss(logits, targets, smoothing: float = 0.1, lengths=None) -> Tensor:
    """Mean KL(smoothed one-hot || softmax(logits)) over valid positions.

    ``logits`` is ``(m, V)`` or ``(B, m, V)``; ``lengths`` marks how many
    leading positions of each row count.  Per-utterance means are averaged
    over the batch.
    """
    logits = ag.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 2:
        logits = ag.reshape(logits, (1,) + logits.shape)
        targets = targets[None]
    b, m, vocab = logits.shape
    if targets.shape != (b, m):
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if lengths is None:
        lengths = np.full(b, m)
    lengths = np.asarray(lengths)
    valid = np.arange(m)[None, :] < lengths[:, None]
    if np.any((targets[valid] < 0) | (targets[valid] >= vocab)):
        raise DataError(f"target id out of range [0, {vocab})")
    safe = np.where(valid, targets, 0)
    q = smoothed_targets(safe, vocab, smoothing)
    with np.errstate(divide="ignore", invalid="ignore"):
        q_log_q = np.where(q > 0, q * np.log(q), 0.0).sum(-1)
    logp = ag.log_softmax(logits, axis=-1)
    cross = ag.tsum(ag.mul(logp, Tensor(q)), axis=-1)  # (B, m)
    weight = valid / (np.maximum(lengths, 1)[:, None] * b)
    kl = ag.sub(Tensor(q_log_q), cross)
    return ag.tsum(ag.mul(kl, Tensor(weight)))


@dataclass
class LossReport:
    mol: float
    ctc: float
    att: float
    lam: float
    loss: Tensor | None = None

    def record(self) -> dict:
        return {"mol": self.mol, "ctc": self.ctc, "att": self.att, "lambda": self.lam}


def multi_objective_loss(ctc, att, lam: float) -> LossReport:
    """``lam * ctc + (1 - lam) * att`` over negative log-likelihoods.

    At the boundaries the unused term is left out of the graph entirely.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    ctc_val = float(ctc.item() if isinstance(ctc, Tensor) else ctc) if ctc is not None else 0.0
    att_val = float(att.item() if isinstance(att, Tensor) else att)
    if lam == 0.0:
        total, mol = att, att_val
    elif lam == 1.0:
        total, mol = ctc, ctc_val
    else:
        total = ag.add(ag.mul(ag.as_tensor(ctc), lam), ag.mul(ag.as_tensor(att), 1.0 - lam))
        mol = lam * ctc_val + (1.0 - lam) * att_val
    loss = total if isinstance(total, Tensor) else None
    return LossReport(mol=mol, ctc=ctc_val, att=att_val, lam=lam, loss=loss)
