"""Encoder, self-and-mixed attention decoder, and the ablation variants."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .attention import (
    MultiHeadAttention,
    causal_mask,
    mixed_attention,
    padding_mask,
)
from .autograd import Tensor
from .nn import (
    ConfigError,
    Conv2dSubsampling,
    Dropout,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    positional_encoding,
)

VARIANTS = (
    "t_smad",
    "transformer_baseline",
    "no_encoder",
    "no_das",
    "no_mixed_attention",
    "no_modality_specific",
)
CTC_PLACEMENTS = ("none", "ctc1", "ctc2")

# ids reserved outside the CTC output space: SOS, EOS, PAD
N_DECODER_ONLY_SPECIALS = 3


@dataclass
class ModelConfig:
    n_enc_layers: int = 4
    n_dec_layers: int = 3
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    vocab_size: int = 16
    feat_dim: int = 20
    lambda_ctc: float = 0.3
    ctc_placement: str = "ctc2"
    variant: str = "t_smad"
    label_smoothing: float = 0.1
    dropout: float = 0.0
    tie_embeddings: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.ctc_placement not in CTC_PLACEMENTS:
            raise ConfigError(f"unknown ctc_placement {self.ctc_placement!r}")
        if not 0.0 <= self.lambda_ctc <= 1.0:
            raise ConfigError(f"lambda_ctc must lie in [0, 1], got {self.lambda_ctc}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal positions")
        if self.variant == "no_encoder" and self.n_enc_layers != 0:
            raise ConfigError("variant no_encoder requires n_enc_layers=0 (use ModelConfig.for_variant)")
        if self.n_dec_layers < 1:
            raise ConfigError("need at least one decoder layer")
        if self.vocab_size <= N_DECODER_ONLY_SPECIALS + 1:
            raise ConfigError("vocab_size too small to hold specials and symbols")
        if self.ctc_placement == "ctc2" and not self.has_acoustic_stream:
            raise ConfigError(f"ctc2 needs a decoder acoustic stream; variant {self.variant} has none")
        if self.ctc_placement == "none" and self.lambda_ctc > 0:
            raise ConfigError("lambda_ctc > 0 needs a CTC head (ctc_placement ctc1 or ctc2)")

    @property
    def has_acoustic_stream(self) -> bool:
        return self.variant in ("t_smad", "no_encoder", "no_mixed_attention", "no_modality_specific")

    @property
    def ctc_dim(self) -> int:
        return self.vocab_size - N_DECODER_ONLY_SPECIALS

    def for_variant(self, variant: str) -> ModelConfig:
        """Derive an ablation config from a full t_smad config.

        ``no_encoder`` moves the encoder depth into the decoder (12+6 -> 18).
        ``ctc2`` falls back to ``ctc1`` for variants without an acoustic stream.
        """
        n_enc, n_dec = self.n_enc_layers, self.n_dec_layers
        if variant == "no_encoder":
            n_enc, n_dec = 0, n_enc + n_dec
        placement = self.ctc_placement
        if placement == "ctc2" and variant in ("no_das", "transformer_baseline"):
            placement = "ctc1"
        return replace(self, variant=variant, n_enc_layers=n_enc, n_dec_layers=n_dec, ctc_placement=placement)

    def to_dict(self) -> dict:
        return asdict(self)


def desk_preset(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def paper_preset(**overrides) -> ModelConfig:
    """12+6 layers, d_model 256, d_ff 2048, 4 heads, 4230 characters, 83-d features."""
    base = dict(
        n_enc_layers=12, n_dec_layers=6, d_model=256, d_ff=2048, n_heads=4,
        vocab_size=4230 + 4, feat_dim=83, lambda_ctc=0.3, ctc_placement="ctc2",
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class EncoderOutput:
    h: Tensor
    lengths: np.ndarray

    @property
    def n(self) -> int:
        return self.h.shape[1]


@dataclass
class DecoderOutput:
    logits: Tensor
    acoustic_final: Tensor
    streams: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.att = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, cfg.dropout)
        self.norm2 = LayerNorm(cfg.d_model)
        self.drop = Dropout(cfg.dropout, rng)

    def __call__(self, x, mask):
        a, _ = self.att(x, x, x, mask)
        x = self.norm1(x + self.drop(a))
        return self.norm2(x + self.drop(self.ffn(x)))


class AcousticPath(Module):
    """Self-attention + residual/norm + FFN + residual/norm over ``S`` only."""

    def __init__(self, cfg: ModelConfig, rng):
        self.att = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, cfg.dropout)
        self.norm2 = LayerNorm(cfg.d_model)
        self.drop = Dropout(cfg.dropout, rng)

    def attend(self, s, lengths):
        mask = None if lengths is None else padding_mask(lengths, s.shape[1])
        return self.att(s, s, s, mask)[0]

    def __call__(self, s, lengths):
        s = self.norm1(s + self.drop(self.attend(s, lengths)))
        return self.norm2(s + self.drop(self.ffn(s)))


class SMADLayer(Module):
    """Self-and-mixed attention decoder layer.

    ``das=False`` drops the acoustic path (the caller feeds the encoder output
    to every layer).  ``modality_specific=False`` shares one residual/norm/FFN
    path across the concatenated stream.
    """

    def __init__(self, cfg: ModelConfig, rng, das: bool = True, modality_specific: bool = True):
        self.das = das
        self.modality_specific = modality_specific
        d = cfg.d_model
        self.mixed = MultiHeadAttention(d, cfg.n_heads, rng)
        self.drop = Dropout(cfg.dropout, rng)
        if modality_specific:
            self.acoustic = AcousticPath(cfg, rng) if das else None
            self.t_norm1 = LayerNorm(d)
            self.t_ffn = FeedForward(d, cfg.d_ff, rng, cfg.dropout)
            self.t_norm2 = LayerNorm(d)
        else:
            if not das:
                raise ConfigError("a shared modality path needs the acoustic stream")
            self.s_att = MultiHeadAttention(d, cfg.n_heads, rng)
            self.norm1 = LayerNorm(d)
            self.ffn = FeedForward(d, cfg.d_ff, rng, cfg.dropout)
            self.norm2 = LayerNorm(d)

    # position-wise tails -------------------------------------------------
    def _t_tail(self, t, t_att):
        if self.modality_specific:
            t = self.t_norm1(t + self.drop(t_att))
            return self.t_norm2(t + self.drop(self.t_ffn(t)))
        t = self.norm1(t + self.drop(t_att))
        return self.norm2(t + self.drop(self.ffn(t)))

    def acoustic_update(self, s, lengths):
        """Next-layer acoustic block; depends on ``s`` alone."""
        if not self.das:
            return s
        if self.modality_specific:
            return self.acoustic(s, lengths)
        mask = None if lengths is None else padding_mask(lengths, s.shape[1])
        s = self.norm1(s + self.drop(self.s_att(s, s, s, mask)[0]))
        return self.norm2(s + self.drop(self.ffn(s)))

    def __call__(self, s, t, lengths, return_weights=False):
        t_att, w = mixed_attention(t, s, self.mixed, lengths)
        s_next = self.acoustic_update(s, lengths)
        t_next = self._t_tail(t, t_att)
        return (s_next, t_next, w) if return_weights else (s_next, t_next)

    # incremental ---------------------------------------------------------
    def memory_kv(self, s):
        return self.mixed.project_kv(s)

    def step(self, t_row, mem_kv, t_kv, lengths):
        """Process one new target row given cached keys/values."""
        k_new, v_new = self.mixed.project_kv(t_row)
        k_t = k_new.data if t_kv is None else np.concatenate([t_kv[0], k_new.data], axis=2)
        v_t = v_new.data if t_kv is None else np.concatenate([t_kv[1], v_new.data], axis=2)
        b = t_row.shape[0]
        k_s, v_s = (np.broadcast_to(x, (b,) + x.shape[1:]) for x in mem_kv)
        keys = Tensor(np.concatenate([k_s, k_t], axis=2))
        vals = Tensor(np.concatenate([v_s, v_t], axis=2))
        mask = _step_mask(lengths, k_s.shape[2], k_t.shape[2], b)
        att, _ = self.mixed.attend(t_row, keys, vals, mask)
        return self._t_tail(t_row, att), (k_t, v_t)


class StandardDecoderLayer(Module):
    """Causal self-attention on ``T``, then source attention over ``S``, then FFN.

    With ``das=True`` an acoustic path also updates ``S`` layer by layer.
    """

    def __init__(self, cfg: ModelConfig, rng, das: bool = False):
        d = cfg.d_model
        self.das = das
        self.self_att = MultiHeadAttention(d, cfg.n_heads, rng)
        self.norm1 = LayerNorm(d)
        self.src_att = MultiHeadAttention(d, cfg.n_heads, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.d_ff, rng, cfg.dropout)
        self.norm3 = LayerNorm(d)
        self.drop = Dropout(cfg.dropout, rng)
        self.acoustic = AcousticPath(cfg, rng) if das else None

    def acoustic_update(self, s, lengths):
        return self.acoustic(s, lengths) if self.das else s

    def _after_self(self, t, s_kv, lengths):
        k_s, v_s = s_kv
        mask = None if lengths is None else padding_mask(lengths, k_s.shape[2])
        a, w = self.src_att.attend(t, k_s, v_s, mask)
        t = self.norm2(t + self.drop(a))
        return self.norm3(t + self.drop(self.ffn(t))), w

    def __call__(self, s, t, lengths, return_weights=False):
        m = t.shape[1]
        a, _ = self.self_att(t, t, t, causal_mask(m))
        t1 = self.norm1(t + self.drop(a))
        t_next, w = self._after_self(t1, self.src_att.project_kv(s), lengths)
        s_next = self.acoustic_update(s, lengths)
        return (s_next, t_next, w) if return_weights else (s_next, t_next)

    def memory_kv(self, s):
        return self.src_att.project_kv(s)

    def step(self, t_row, mem_kv, t_kv, lengths):
        k_new, v_new = self.self_att.project_kv(t_row)
        k_t = k_new.data if t_kv is None else np.concatenate([t_kv[0], k_new.data], axis=2)
        v_t = v_new.data if t_kv is None else np.concatenate([t_kv[1], v_new.data], axis=2)
        a, _ = self.self_att.attend(t_row, Tensor(k_t), Tensor(v_t))
        t1 = self.norm1(t_row + self.drop(a))
        b = t_row.shape[0]
        k_s, v_s = (Tensor(np.broadcast_to(x, (b,) + x.shape[1:])) for x in mem_kv)
        t_next, _ = self._after_self(t1, (k_s, v_s), lengths)
        return t_next, (k_t, v_t)


def _step_mask(lengths, n: int, t: int, b: int):
    if lengths is None:
        return None
    src = padding_mask(lengths, n).matrix
    src = np.broadcast_to(src, (b,) + src.shape[1:])
    return np.concatenate([src, np.zeros((b, 1, 1, t))], axis=-1)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

@dataclass
class DecoderCache:
    """Incremental decoding state for a batch of hypotheses over one utterance set.

    ``acoustic`` holds each layer's acoustic input (target independent),
    ``memory`` the keys/values derived from it, ``targets`` the per-layer
    cached target keys/values, and ``prefix`` the token ids consumed so far.
    """

    acoustic: list
    memory: list
    lengths: np.ndarray | None
    targets: list
    prefix: np.ndarray

    def select(self, rows) -> DecoderCache:
        rows = np.asarray(rows)
        targets = [None if kv is None else (kv[0][rows], kv[1][rows]) for kv in self.targets]
        return DecoderCache(self.acoustic, self.memory, self.lengths, targets, self.prefix[rows])


class SpeechTransformer(Module):
    """Conv front-end, encoder, decoder variant, output and CTC heads."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.frontend = Conv2dSubsampling(cfg.feat_dim, d, rng)
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.n_enc_layers)]
        self.embed = Embedding(cfg.vocab_size, d, rng)
        v = cfg.variant
        if v in ("t_smad", "no_encoder"):
            layers = [SMADLayer(cfg, rng) for _ in range(cfg.n_dec_layers)]
        elif v == "no_das":
            layers = [SMADLayer(cfg, rng, das=False) for _ in range(cfg.n_dec_layers)]
        elif v == "no_modality_specific":
            layers = [SMADLayer(cfg, rng, modality_specific=False) for _ in range(cfg.n_dec_layers)]
        elif v == "no_mixed_attention":
            layers = [StandardDecoderLayer(cfg, rng, das=True) for _ in range(cfg.n_dec_layers)]
        else:
            layers = [StandardDecoderLayer(cfg, rng, das=False) for _ in range(cfg.n_dec_layers)]
        self.decoder = layers
        if cfg.tie_embeddings:
            self.out = None
            self.out_bias = Parameter(np.zeros(cfg.vocab_size))
        else:
            self.out = Linear(d, cfg.vocab_size, rng)
        self.ctc_head = Linear(d, cfg.ctc_dim, rng) if cfg.ctc_placement != "none" else None
        self.emb_drop = Dropout(cfg.dropout, rng)

    # ---- encoder -----------------------------------------------------------
    def encode(self, feats, lengths=None) -> EncoderOutput:
        feats = ag.as_tensor(feats)
        if feats.ndim == 2:
            feats = ag.reshape(feats, (1,) + feats.shape)
        if lengths is None:
            lengths = np.full(feats.shape[0], feats.shape[1])
        lengths = np.asarray(lengths)
        x, out_len = self.frontend(feats, lengths)
        x = x + Tensor(positional_encoding(x.shape[1], self.cfg.d_model))
        x = self.emb_drop(x)
        mask = padding_mask(out_len, x.shape[1])
        for layer in self.encoder:
            x = layer(x, mask)
        return EncoderOutput(x, out_len)

    # ---- decoder -----------------------------------------------------------
    def embed_targets(self, ids: np.ndarray, offset: int = 0) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        d = self.cfg.d_model
        pe = positional_encoding(offset + ids.shape[1], d)[offset:]
        return self.emb_drop(self.embed(ids) * math.sqrt(d) + Tensor(pe))

    def _logits(self, t) -> Tensor:
        if self.out is None:
            return ag.matmul(t, ag.transpose(self.embed.weight)) + self.out_bias
        return self.out(t)

    def _lengths_or_none(self, enc: EncoderOutput):
        return None if np.all(enc.lengths == enc.n) else enc.lengths

    def decode_training(self, enc: EncoderOutput, ys_in, keep_streams: bool = False) -> DecoderOutput:
        """Teacher-forced pass; ``ys_in`` starts with SOS."""
        ys_in = np.atleast_2d(np.asarray(ys_in, dtype=np.int64))
        if ys_in.shape[1] == 0:
            raise ValueError("empty target sequence")
        lengths = self._lengths_or_none(enc)
        s, t = enc.h, self.embed_targets(ys_in)
        streams = []
        for layer in self.decoder:
            if keep_streams:
                s_next, t_next, w = layer(s, t, lengths, return_weights=True)
                streams.append((s, t, w))
            else:
                s_next, t_next = layer(s, t, lengths)
            s, t = s_next, t_next
        return DecoderOutput(self._logits(t), s, streams)

    def ctc_inputs(self, enc: EncoderOutput, dec: DecoderOutput | None, placement: str | None = None) -> Tensor:
        placement = placement or self.cfg.ctc_placement
        if placement == "ctc1":
            return enc.h
        if placement == "ctc2":
            if not self.cfg.has_acoustic_stream:
                raise ConfigError(f"ctc2 is undefined for variant {self.cfg.variant}")
            if dec is None:
                raise ValueError("ctc2 needs the decoder output")
            return dec.acoustic_final
        raise ConfigError(f"no CTC head for placement {placement!r}")

    def ctc_log_probs(self, enc: EncoderOutput, dec: DecoderOutput | None = None) -> Tensor:
        if self.ctc_head is None:
            raise ConfigError("model has no CTC head")
        return ag.log_softmax(self.ctc_head(self.ctc_inputs(enc, dec)), axis=-1)

    def acoustic_streams(self, enc: EncoderOutput) -> list[Tensor]:
        """Acoustic input to each decoder layer plus the final acoustic block."""
        lengths = self._lengths_or_none(enc)
        s = enc.h
        out = [s]
        for layer in self.decoder:
            s = layer.acoustic_update(s, lengths)
            out.append(s)
        return out

    # ---- incremental decoding -----------------------------------------------
    def start_cache(self, enc: EncoderOutput, sos_id: int, beam: int = 1) -> DecoderCache:
        with ag.no_grad():
            streams = self.acoustic_streams(enc)
            memory = [tuple(x.data for x in layer.memory_kv(s)) for layer, s in zip(self.decoder, streams)]
        return DecoderCache(
            acoustic=streams,
            memory=memory,
            lengths=self._lengths_or_none(enc),
            targets=[None] * len(self.decoder),
            prefix=np.full((beam, 0), sos_id, dtype=np.int64),
        )

    def decode_incremental(self, prefix_ids, cache: DecoderCache) -> tuple[np.ndarray, DecoderCache]:
        """Next-token logits for each row of ``prefix_ids`` (B, t).

        ``cache`` must hold exactly the first ``t - 1`` tokens of every row.
        """
        prefix_ids = np.atleast_2d(np.asarray(prefix_ids, dtype=np.int64))
        seen = cache.prefix.shape[1]
        if prefix_ids.shape[1] != seen + 1 or prefix_ids.shape[0] != cache.prefix.shape[0] or not np.array_equal(
            prefix_ids[:, :seen], cache.prefix
        ):
            raise ValueError("cache does not match prefix: it must hold all but the last token of every row")
        with ag.no_grad():
            t = self.embed_targets(prefix_ids[:, -1:], offset=seen)
            new_targets = []
            for layer, mem, kv in zip(self.decoder, cache.memory, cache.targets):
                t, kv = layer.step(t, mem, kv, cache.lengths)
                new_targets.append(kv)
            logits = self._logits(t).data[:, 0]
        return logits, DecoderCache(cache.acoustic, cache.memory, cache.lengths, new_targets, prefix_ids)

    # ---- reporting ---------------------------------------------------------
    def describe(self) -> str:
        rows = [(name, "x".join(map(str, p.shape)), p.size) for name, p in self.named_parameters()]
        width = max(len(r[0]) for r in rows)
        lines = [f"variant={self.cfg.variant} enc={self.cfg.n_enc_layers} dec={self.cfg.n_dec_layers} "
                 f"d_model={self.cfg.d_model} d_ff={self.cfg.d_ff} heads={self.cfg.n_heads}"]
        lines += [f"{n:<{width}}  {s:>12}  {c:>10}" for n, s, c in rows]
        lines.append(f"{'total':<{width}}  {'':>12}  {self.num_parameters():>10}")
        return "\n".join(lines)


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count; agrees with ``SpeechTransformer.num_parameters``."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    mha = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    ln = 2 * d
    f_out = (((cfg.feat_dim + 1) // 2) + 1) // 2
    front = (9 * d + d) + (9 * d * d + d) + (f_out * d * d + d)
    enc = mha + ffn + 2 * ln
    acoustic = mha + ffn + 2 * ln
    if cfg.variant in ("t_smad", "no_encoder"):
        dec = mha + acoustic + ffn + 2 * ln
    elif cfg.variant == "no_das":
        dec = mha + ffn + 2 * ln
    elif cfg.variant == "no_modality_specific":
        dec = 2 * mha + ffn + 2 * ln
    elif cfg.variant == "no_mixed_attention":
        dec = 2 * mha + ffn + 3 * ln + acoustic
    else:
        dec = 2 * mha + ffn + 3 * ln
    out = v if cfg.tie_embeddings else d * v + v
    ctc = 0 if cfg.ctc_placement == "none" else d * cfg.ctc_dim + cfg.ctc_dim
    return front + cfg.n_enc_layers * enc + v * d + cfg.n_dec_layers * dec + out + ctc
