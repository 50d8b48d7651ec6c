"""Optimiser, warmup schedule, training loop and evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import Corpus, Utterance, Vocab, collate, make_batches, spec_mask
from .decode import beam_decode, greedy_decode
from .losses import LossReport, attention_loss, ctc_loss, multi_objective_loss
from .metrics import CerReport, cer
from .model import SpeechTransformer
from .nn import save_checkpoint

METRICS_HEADER = {"format": "smad-metrics", "version": 1}


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


def lr_schedule(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """``scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)``; peaks at ``warmup``."""
    if step < 1:
        raise ValueError("lr_schedule is defined for step >= 1")
    return scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


class Adam:
    def __init__(self, params, betas=(0.9, 0.98), eps=1e-9):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


@dataclass
class TrainConfig:
    max_steps: int = 2000
    epochs: int | None = None
    batch_size: int = 8
    warmup: int = 400
    lr_scale: float = 0.25
    grad_clip: float = 5.0
    eval_every: int = 100
    spec_augment: bool = False
    n_time_masks: int = 1
    n_freq_masks: int = 1
    time_width: int = 4
    freq_width: int = 3
    seed: int = 0


def batch_loss(model: SpeechTransformer, batch, vocab: Vocab) -> LossReport:
    """Multi-objective loss on one padded batch."""
    cfg = model.cfg
    enc = model.encode(batch.features, batch.feature_lengths)
    ys_in, ys_out, ylen = batch.decoder_io(vocab)
    dec = model.decode_training(enc, ys_in)
    att = attention_loss(dec.logits, ys_out, cfg.label_smoothing, ylen)
    ctc = None
    if model.ctc_head is not None and cfg.lambda_ctc > 0:
        lp = model.ctc_log_probs(enc, dec)
        ctc = ctc_loss(lp, batch.targets(), blank=vocab.blank, input_lengths=enc.lengths)
    return multi_objective_loss(ctc, att, cfg.lambda_ctc)


def dev_loss(model: SpeechTransformer, utts: list[Utterance], vocab: Vocab, batch_size: int) -> float:
    """Mean attention loss over ``utts`` (checkpoint selection criterion)."""
    model.eval()
    total, count = 0.0, 0
    with ag.no_grad():
        for batch in make_batches(utts, batch_size, vocab.pad, "none"):
            enc = model.encode(batch.features, batch.feature_lengths)
            ys_in, ys_out, ylen = batch.decoder_io(vocab)
            dec = model.decode_training(enc, ys_in)
            total += attention_loss(dec.logits, ys_out, model.cfg.label_smoothing, ylen).item() * len(batch.ids)
            count += len(batch.ids)
    model.train()
    return total / max(count, 1)


@dataclass
class TrainResult:
    records: list[dict]
    best_step: int
    best_dev_loss: float
    best_state: dict
    last_state: dict


def train(
    model: SpeechTransformer,
    corpus: Corpus,
    tcfg: TrainConfig,
    run_dir=None,
    log_path=None,
) -> TrainResult:
    """Teacher-forced training on the ``train`` split; best-dev selection on ``dev``.

    Stops after ``max_steps`` or ``epochs`` passes, whichever comes first.
    Writes ``checkpoints/{best,last}.ckpt`` and ``logs/metrics.jsonl`` when
    ``run_dir`` is given.
    """
    vocab = corpus.vocab
    train_utts = corpus.split("train")
    dev_utts = corpus.split("dev") if corpus.splits.get("dev") else []
    opt = Adam(model.parameters())
    aug_rng = np.random.default_rng(tcfg.seed + 7919)
    records: list[dict] = []
    best = (math.inf, 0, model.state_dict())
    log_file = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "logs").mkdir(parents=True, exist_ok=True)
        log_path = log_path or run_dir / "logs" / "metrics.jsonl"
    if log_path is not None:
        log_file = open(log_path, "w")
        log_file.write(json.dumps(METRICS_HEADER) + "\n")
    meta = json.dumps(model.cfg.to_dict(), sort_keys=True)

    model.train()
    step, epoch = 0, 0
    try:
        while step < tcfg.max_steps and (tcfg.epochs is None or epoch < tcfg.epochs):
            for batch in make_batches(train_utts, tcfg.batch_size, vocab.pad, "bucket", seed=tcfg.seed + epoch):
                step += 1
                if tcfg.spec_augment:
                    batch = _augment(batch, tcfg, aug_rng)
                report = batch_loss(model, batch, vocab)
                if not math.isfinite(report.mol):
                    raise NumericalError(f"non-finite loss {report.mol} at step {step}")
                model.zero_grad()
                ag.backward(report.loss)
                gnorm = clip_grad_norm(opt.params, tcfg.grad_clip)
                lr = lr_schedule(step, model.cfg.d_model, tcfg.warmup, tcfg.lr_scale)
                opt.step(lr)
                rec = {"step": step, "lr": lr, "ctc": report.ctc, "att": report.att, "mol": report.mol, "grad_norm": gnorm}
                last_eval = step >= tcfg.max_steps
                if dev_utts and (step % tcfg.eval_every == 0 or last_eval):
                    dl = dev_loss(model, dev_utts, vocab, tcfg.batch_size)
                    rec["dev_att"] = dl
                    if dl < best[0]:
                        best = (dl, step, model.state_dict())
                records.append(rec)
                if log_file is not None:
                    log_file.write(json.dumps(rec) + "\n")
                if step >= tcfg.max_steps:
                    break
            epoch += 1
    finally:
        if log_file is not None:
            log_file.close()
    if not dev_utts:
        best = (math.nan, step, model.state_dict())
    elif best[1] == 0 or (records and "dev_att" not in records[-1]):
        dl = dev_loss(model, dev_utts, vocab, tcfg.batch_size)
        if dl < best[0]:
            best = (dl, step, model.state_dict())
    last_state = model.state_dict()
    if run_dir is not None:
        save_checkpoint(run_dir / "checkpoints" / "best.ckpt", best[2], meta)
        save_checkpoint(run_dir / "checkpoints" / "last.ckpt", last_state, meta)
    return TrainResult(records, best[1], best[0], best[2], last_state)


def _augment(batch, tcfg: TrainConfig, rng):
    feats = batch.features.copy()
    for i, n in enumerate(batch.feature_lengths):
        feats[i, :n] = spec_mask(feats[i, :n], tcfg.n_time_masks, tcfg.n_freq_masks, tcfg.time_width, tcfg.freq_width, rng)
    return type(batch)(batch.ids, feats, batch.feature_lengths, batch.tokens, batch.token_lengths)


def decode_utterances(
    model: SpeechTransformer,
    utts: list[Utterance],
    vocab: Vocab,
    beam_width: int = 0,
    max_len: int | None = None,
    length_penalty: float = 0.6,
) -> list[list[int]]:
    """Greedy when ``beam_width`` is 0, otherwise beam search; one utterance at a time."""
    model.eval()
    hyps = []
    with ag.no_grad():
        for u in utts:
            enc = model.encode(collate([u], vocab.pad).features)
            limit = max_len if max_len is not None else max(2 * len(u.tokens) + 5, enc.n)
            if beam_width:
                hyps.append(list(beam_decode(model, enc, vocab, beam_width, limit, length_penalty).tokens))
            else:
                hyps.append(greedy_decode(model, enc, vocab, limit))
    model.train()
    return hyps


def evaluate_cer(model: SpeechTransformer, utts: list[Utterance], vocab: Vocab, beam_width: int = 0) -> CerReport:
    hyps = decode_utterances(model, utts, vocab, beam_width)
    total = CerReport(0, 0, 0, 0)
    for u, h in zip(utts, hyps):
        total = total + cer(list(u.tokens), h)
    return total


def train_config_dict(tcfg: TrainConfig) -> dict:
    return asdict(tcfg)
