"""Synthetic speech-like corpus, normalisation, masking and batching.

Each symbol owns a prototype made of a few phase vectors.  An utterance
renders its symbols one after another, stretching each prototype over a
random duration, and adds Gaussian noise.  Phase changes mark token
boundaries so repeated symbols stay distinguishable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import downsampled_length

MANIFEST_HEADER = "# smad-manifest v1"
FEATS_MAGIC = b"SMADFEAT"
FEATS_VERSION = 1


class UsageError(RuntimeError):
    """An operation was invoked without its prerequisites."""


@dataclass(frozen=True)
class Vocab:
    """Id layout: 0 = blank, 1..K = symbols, then SOS, EOS, PAD."""

    n_symbols: int

    blank = 0

    @property
    def sos(self) -> int:
        return self.n_symbols + 1

    @property
    def eos(self) -> int:
        return self.n_symbols + 2

    @property
    def pad(self) -> int:
        return self.n_symbols + 3

    @property
    def size(self) -> int:
        return self.n_symbols + 4

    @property
    def symbols(self) -> list[str]:
        return [chr(ord("a") + i) if i < 26 else f"t{i}" for i in range(self.n_symbols)]

    def decode(self, ids) -> list[str]:
        syms = self.symbols
        return [syms[i - 1] for i in ids if 1 <= i <= self.n_symbols]

    def encode(self, symbols) -> list[int]:
        index = {s: i + 1 for i, s in enumerate(self.symbols)}
        return [index[s] for s in symbols]


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # (frames, D)
    tokens: np.ndarray  # symbol ids, no specials

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    vocab: Vocab
    utterances: list[Utterance]
    splits: dict[str, list[str]] = field(default_factory=dict)
    prototypes: np.ndarray | None = None

    def split(self, name: str) -> list[Utterance]:
        ids = set(self.splits[name])
        return [u for u in self.utterances if u.id in ids]

    @property
    def feat_dim(self) -> int:
        return self.utterances[0].features.shape[1]


def generate_corpus(
    seed: int,
    n_utterances: int,
    vocab_size: int,
    length_range: tuple[int, int] = (3, 7),
    feat_dim: int = 20,
    noise: float = 0.0,
    n_phases: int = 4,
    duration_range: tuple[int, int] = (4, 8),
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> Corpus:
    """Build a deterministic synthetic corpus over ``vocab_size`` symbols.

    Durations are bumped where needed so every utterance keeps a valid CTC
    alignment after the 4x time downsampling.
    """
    if vocab_size < 3:
        raise ValueError("vocab_size must be at least 3")
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad length_range {length_range}")
    rng = np.random.default_rng(seed)
    vocab = Vocab(vocab_size)
    protos = rng.normal(0.0, 1.0, size=(vocab_size, n_phases, feat_dim))
    d_lo, d_hi = duration_range
    utts = []
    for idx in range(n_utterances):
        length = int(rng.integers(lo, hi + 1))
        tokens = rng.integers(1, vocab_size + 1, size=length)
        durs = rng.integers(d_lo, d_hi + 1, size=length)
        need = length + int(np.sum(tokens[1:] == tokens[:-1]))
        while downsampled_length(int(durs.sum())) < need:
            grow = np.flatnonzero(durs < d_hi)
            durs[grow[int(rng.integers(len(grow)))]] += 1
        frames = []
        for tok, dur in zip(tokens, durs):
            phase = (np.arange(dur) * n_phases) // dur
            frames.append(protos[tok - 1, phase])
        feats = np.concatenate(frames, axis=0)
        if noise > 0:
            feats = feats + rng.normal(0.0, noise, size=feats.shape)
        utts.append(Utterance(f"utt{idx:05d}", feats, tokens.astype(np.int64)))
    order = rng.permutation(n_utterances)
    n_train = int(round(split_fractions[0] * n_utterances))
    n_dev = int(round(split_fractions[1] * n_utterances))
    ids = [utts[i].id for i in order]
    splits = {
        "train": sorted(ids[:n_train]),
        "dev": sorted(ids[n_train : n_train + n_dev]),
        "test": sorted(ids[n_train + n_dev :]),
    }
    return Corpus(vocab, utts, splits, protos)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray | None = None

    def apply(self, feats: np.ndarray) -> np.ndarray:
        out = feats - self.mean
        if self.std is not None:
            out = out / self.std
        return out

    def save(self, path) -> None:
        payload = {"format": "smad-stats", "version": 1, "mean": self.mean.tolist(),
                   "std": None if self.std is None else self.std.tolist()}
        Path(path).write_text(json.dumps(payload, indent=1))

    @classmethod
    def load(cls, path) -> NormStats:
        payload = json.loads(Path(path).read_text())
        std = payload.get("std")
        return cls(np.asarray(payload["mean"], dtype=np.float64), None if std is None else np.asarray(std))


def compute_stats(utts: list[Utterance], scale_variance: bool = False) -> NormStats:
    stacked = np.concatenate([u.features for u in utts], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0) + 1e-12 if scale_variance else None
    return NormStats(mean, std)


def apply_stats(utts: list[Utterance], stats: NormStats | None) -> list[Utterance]:
    if stats is None:
        raise UsageError("normalisation stats are missing; compute them on the training split first")
    return [Utterance(u.id, stats.apply(u.features), u.tokens) for u in utts]


def normalize(corpus: Corpus, scale_variance: bool = False) -> tuple[Corpus, NormStats]:
    """Subtract the training-split global mean from every utterance."""
    stats = compute_stats(corpus.split("train"), scale_variance)
    return Corpus(corpus.vocab, apply_stats(corpus.utterances, stats), corpus.splits, corpus.prototypes), stats


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

def spec_mask(
    features: np.ndarray,
    n_time_masks: int,
    n_freq_masks: int,
    time_width: int,
    freq_width: int,
    seed,
) -> np.ndarray:
    """Replace random time spans and frequency bands with the per-dim mean.

    Each mask has exactly the configured width (clipped to the axis) and a
    uniformly drawn start.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = np.array(features, dtype=np.float64, copy=True)
    frames, dims = out.shape
    fill = features.mean(axis=0)
    tw, fw = min(time_width, frames), min(freq_width, dims)
    for _ in range(n_time_masks):
        start = int(rng.integers(0, frames - tw + 1))
        out[start : start + tw] = fill
    for _ in range(n_freq_masks):
        start = int(rng.integers(0, dims - fw + 1))
        out[:, start : start + fw] = fill[start : start + fw]
    return out


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray  # (B, T_max, D), zero padded
    feature_lengths: np.ndarray
    tokens: np.ndarray  # (B, L_max), PAD padded
    token_lengths: np.ndarray

    def decoder_io(self, vocab: Vocab) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Teacher-forcing input (SOS + y), output (y + EOS), and their lengths."""
        b, lmax = self.tokens.shape
        ys_in = np.full((b, lmax + 1), vocab.pad, dtype=np.int64)
        ys_out = np.full((b, lmax + 1), vocab.pad, dtype=np.int64)
        for i, n in enumerate(self.token_lengths):
            ys_in[i, 0] = vocab.sos
            ys_in[i, 1 : n + 1] = self.tokens[i, :n]
            ys_out[i, :n] = self.tokens[i, :n]
            ys_out[i, n] = vocab.eos
        return ys_in, ys_out, self.token_lengths + 1

    def targets(self) -> list[np.ndarray]:
        return [self.tokens[i, :n] for i, n in enumerate(self.token_lengths)]


def collate(utts: list[Utterance], pad_id: int, extra_frames: int = 0) -> Batch:
    flen = np.array([u.n_frames for u in utts])
    tlen = np.array([len(u.tokens) for u in utts])
    dim = utts[0].features.shape[1]
    feats = np.zeros((len(utts), flen.max() + extra_frames, dim))
    toks = np.full((len(utts), tlen.max()), pad_id, dtype=np.int64)
    for i, u in enumerate(utts):
        feats[i, : u.n_frames] = u.features
        toks[i, : len(u.tokens)] = u.tokens
    return Batch([u.id for u in utts], feats, flen, toks, tlen)


def make_batches(utts: list[Utterance], batch_size: int, pad_id: int, sort_policy: str = "bucket", seed: int = 0) -> list[Batch]:
    """Group utterances into padded batches.

    ``bucket`` sorts by frame count before chunking and then shuffles batch
    order; ``shuffle`` shuffles utterances; ``none`` keeps input order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    if sort_policy == "bucket":
        order = sorted(range(len(utts)), key=lambda i: (utts[i].n_frames, utts[i].id))
    elif sort_policy == "shuffle":
        order = list(rng.permutation(len(utts)))
    elif sort_policy == "none":
        order = list(range(len(utts)))
    else:
        raise ValueError(f"unknown sort_policy {sort_policy!r}")
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if sort_policy == "bucket":
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [collate([utts[i] for i in c], pad_id) for c in chunks]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_corpus(directory, corpus: Corpus) -> None:
    """Write ``manifest.tsv`` (text) and ``features.bin`` (binary).

    Manifest: a version header line, a ``# vocab_size=K`` line, then one row
    per utterance ``id<TAB>split<TAB>n_frames<TAB>space-separated token ids``.
    Features: magic ``SMADFEAT``, uint32 version, uint32 count, uint32 dim,
    then per utterance (manifest order) a uint64 frame count followed by
    ``frames * dim`` little-endian float64 values.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    split_of = {uid: name for name, ids in corpus.splits.items() for uid in ids}
    lines = [MANIFEST_HEADER, f"# vocab_size={corpus.vocab.n_symbols}"]
    for u in corpus.utterances:
        toks = " ".join(str(int(t)) for t in u.tokens)
        lines.append(f"{u.id}\t{split_of.get(u.id, '-')}\t{u.n_frames}\t{toks}")
    (directory / "manifest.tsv").write_text("\n".join(lines) + "\n")
    dim = corpus.feat_dim
    buf = bytearray(FEATS_MAGIC)
    buf += struct.pack("<III", FEATS_VERSION, len(corpus.utterances), dim)
    for u in corpus.utterances:
        buf += struct.pack("<Q", u.n_frames)
        buf += np.ascontiguousarray(u.features, dtype="<f8").tobytes()
    (directory / "features.bin").write_bytes(bytes(buf))


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    lines = (directory / "manifest.tsv").read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"{directory}/manifest.tsv: missing header {MANIFEST_HEADER!r}")
    vocab = Vocab(int(lines[1].split("=", 1)[1]))
    raw = (directory / "features.bin").read_bytes()
    if raw[:8] != FEATS_MAGIC:
        raise ValueError(f"{directory}/features.bin: bad magic")
    version, count, dim = struct.unpack_from("<III", raw, 8)
    if version != FEATS_VERSION:
        raise ValueError(f"unsupported feature archive version {version}")
    rows = [line.split("\t") for line in lines[2:] if line]
    if len(rows) != count:
        raise ValueError(f"manifest has {len(rows)} rows but archive holds {count}")
    off = 20
    utts, splits = [], {}
    for uid, split, n_frames, toks in rows:
        (frames,) = struct.unpack_from("<Q", raw, off)
        off += 8
        if frames != int(n_frames):
            raise ValueError(f"{uid}: manifest frames {n_frames} != archive {frames}")
        feats = np.frombuffer(raw, dtype="<f8", count=frames * dim, offset=off).reshape(frames, dim).astype(np.float64)
        off += 8 * frames * dim
        tokens = np.array([int(t) for t in toks.split()], dtype=np.int64)
        utts.append(Utterance(uid, feats, tokens))
        splits.setdefault(split, []).append(uid)
    return Corpus(vocab, utts, splits)
