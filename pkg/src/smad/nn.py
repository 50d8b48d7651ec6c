"""Parameter containers, generic layers and the checkpoint file format."""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ConfigError(ValueError):
    """Invalid model or layer configuration."""


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Attribute-discovered parameter tree with hierarchical names."""

    training = True

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, (Parameter, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = ""):
        for key, val in self._children():
            full = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield full, val
            else:
                yield from val.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def modules(self):
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ag.ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(xavier_uniform(rng, d_in, d_out))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-12):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ag.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, vocab: int, d: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, d**-0.5, size=(vocab, d)))

    def __call__(self, ids) -> Tensor:
        return ag.embedding(self.weight, ids)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng

    def __call__(self, x) -> Tensor:
        return ag.dropout(x, self.rate, self.rng, self.training)


class FeedForward(Module):
    """Position-wise ``W2 relu(W1 x + b1) + b2``."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dropout: float = 0.0):
        self.w1 = Linear(d_model, d_ff, rng)
        self.w2 = Linear(d_ff, d_model, rng)
        self.drop = Dropout(dropout, rng)

    def __call__(self, x) -> Tensor:
        return self.w2(self.drop(ag.relu(self.w1(x))))


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: sin on even dims, cos on odd dims."""
    if d_model % 2:
        raise ConfigError(f"positional encoding needs an even d_model, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    div = np.power(10000.0, np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(pos / div)
    pe[:, 1::2] = np.cos(pos / div)
    return pe


class Conv2dStride2(Module):
    """3x3 stride-2 convolution followed by ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        bound = math.sqrt(6.0 / (9 * c_in))
        self.weight = Parameter(rng.uniform(-bound, bound, size=(3, 3, c_in, c_out)))
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x) -> Tensor:
        return ag.relu(ag.conv2d_stride2(x, self.weight, self.bias))


def downsampled_length(frames) -> np.ndarray | int:
    """Time length after two stride-2 convolutions."""
    once = (np.asarray(frames) + 1) // 2
    out = (once + 1) // 2
    return int(out) if np.ndim(out) == 0 else out


class Conv2dSubsampling(Module):
    """Two stride-2 conv layers then a projection of (freq x channels) to ``d_model``.

    Input ``(B, frames, D)``; output ``(B, ceil(ceil(frames/2)/2), d_model)``.
    Frames beyond each utterance's length are zeroed after every conv so that
    batch padding never leaks into valid positions.
    """

    def __init__(self, feat_dim: int, d_model: int, rng: np.random.Generator):
        self.feat_dim = feat_dim
        self.conv1 = Conv2dStride2(1, d_model, rng)
        self.conv2 = Conv2dStride2(d_model, d_model, rng)
        f_out = (((feat_dim + 1) // 2) + 1) // 2
        self.out = Linear(f_out * d_model, d_model, rng)

    def __call__(self, feats, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        feats = ag.as_tensor(feats)
        if feats.shape[-1] != self.feat_dim:
            raise ConfigError(f"feature dim {feats.shape[-1]} != configured {self.feat_dim}")
        if feats.shape[1] < 1:
            raise ValueError("input has no frames")
        x = ag.reshape(feats, feats.shape + (1,))
        len1 = (lengths + 1) // 2
        x = self.conv1(x)
        x = ag.masked_fill_rows(x, _time_mask(len1, x.shape[1])[:, :, None, None])
        len2 = (len1 + 1) // 2
        x = self.conv2(x)
        x = ag.masked_fill_rows(x, _time_mask(len2, x.shape[1])[:, :, None, None])
        b, t, f, c = x.shape
        return self.out(ag.reshape(x, (b, t, f * c))), len2


def _time_mask(lengths: np.ndarray, total: int) -> np.ndarray:
    return (np.arange(total)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SMADCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, state: dict[str, np.ndarray], meta: str = "") -> None:
    """Write parameters as a versioned little-endian binary file.

    Layout::

        magic  b"SMADCKPT"           8 bytes
        version                      uint32
        meta length, meta utf-8      uint32, bytes   (free-form, e.g. JSON config)
        entry count                  uint32
        per entry (sorted by name):
            name length, name utf-8  uint32, bytes
            ndim                     uint32
            dims                     ndim x uint64
            values                   prod(dims) x float64, row-major
    """
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<I", CKPT_VERSION)
    mb = meta.encode("utf-8")
    buf += struct.pack("<I", len(mb)) + mb
    buf += struct.pack("<I", len(state))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = 8
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = raw[off : off + mlen].decode("utf-8")
    off += mlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return state, meta
