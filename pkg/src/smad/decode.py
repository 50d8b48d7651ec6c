"""Greedy and beam-search decoding over the attention decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Vocab
from .model import EncoderOutput, SpeechTransformer


@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool = False

    def score(self, alpha: float) -> float:
        """Length-normalised score; the EOS step counts toward the length."""
        return self.log_prob / (len(self.tokens) + 1) ** alpha


def _allowed_mask(vocab: Vocab, size: int) -> np.ndarray:
    """Additive mask keeping symbols and EOS."""
    mask = np.full(size, -np.inf)
    mask[1 : vocab.n_symbols + 1] = 0.0
    mask[vocab.eos] = 0.0
    return mask


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_decode(model: SpeechTransformer, enc: EncoderOutput, vocab: Vocab, max_len: int) -> list[int]:
    """Argmax decoding until EOS or ``max_len`` symbols; ties go to the lowest id."""
    allowed = _allowed_mask(vocab, model.cfg.vocab_size)
    cache = model.start_cache(enc, vocab.sos)
    prefix = np.array([[vocab.sos]])
    out: list[int] = []
    for _ in range(max_len):
        logits, cache = model.decode_incremental(prefix, cache)
        tok = int(np.argmax(logits[0] + allowed))
        if tok == vocab.eos:
            break
        out.append(tok)
        prefix = np.concatenate([prefix, [[tok]]], axis=1)
    return out


def beam_decode(
    model: SpeechTransformer,
    enc: EncoderOutput,
    vocab: Vocab,
    beam_width: int,
    max_len: int,
    length_penalty: float = 0.6,
) -> BeamHypothesis:
    """Length-normalised beam search; returns the best finished hypothesis.

    Candidates ending in EOS occupy beam slots like any other.  Hypotheses
    still alive after ``max_len`` symbols are closed with the EOS score.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    allowed = _allowed_mask(vocab, model.cfg.vocab_size)
    cache = model.start_cache(enc, vocab.sos)
    prefix = np.array([[vocab.sos]])
    alive = [BeamHypothesis((), 0.0)]
    finished: list[BeamHypothesis] = []
    for step in range(max_len + 1):
        logits, cache = model.decode_incremental(prefix, cache)
        logp = _log_softmax(logits + allowed)
        if step == max_len:
            for h, row in zip(alive, logp):
                finished.append(BeamHypothesis(h.tokens, h.log_prob + float(row[vocab.eos]), True))
            break
        cand = np.array([h.log_prob for h in alive])[:, None] + logp
        flat = cand.reshape(-1)
        order = np.argsort(-flat, kind="stable")[:beam_width]
        order = [i for i in order if np.isfinite(flat[i])]
        rows, keep, next_alive = [], [], []
        for idx in order:
            r, tok = divmod(int(idx), cand.shape[1])
            h = alive[r]
            if tok == vocab.eos:
                finished.append(BeamHypothesis(h.tokens, float(flat[idx]), True))
            else:
                next_alive.append(BeamHypothesis(h.tokens + (tok,), float(flat[idx])))
                rows.append(r)
                keep.append(tok)
        if not next_alive:
            break
        alive = next_alive
        cache = cache.select(rows)
        prefix = np.concatenate([prefix[rows], np.array(keep)[:, None]], axis=1)
    return max(finished, key=lambda h: (h.score(length_penalty), [-t for t in h.tokens]))


def sequence_log_prob(model: SpeechTransformer, enc: EncoderOutput, vocab: Vocab, tokens, close: bool = True) -> float:
    """Score ``tokens`` (+ EOS when ``close``) under the same restricted distribution as the searches."""
    allowed = _allowed_mask(vocab, model.cfg.vocab_size)
    cache = model.start_cache(enc, vocab.sos)
    prefix = np.array([[vocab.sos]])
    total = 0.0
    seq = list(tokens) + ([vocab.eos] if close else [])
    for tok in seq:
        logits, cache = model.decode_incremental(prefix, cache)
        total += float(_log_softmax(logits + allowed)[0, tok])
        prefix = np.concatenate([prefix, [[tok]]], axis=1)
    return total
