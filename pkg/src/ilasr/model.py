"""CTC encoder: 1-D conv front-end, self-attention blocks, FC head, frame softmax.

Layout conventions used throughout the package:

* a single utterance is an ``(F, S)`` feature matrix (features x time);
* a batch is channels-last, ``(B, S, F)``, zero-padded to the longest
  utterance, with a ``lengths`` vector;
* the last-block feature map ``A`` is stored as ``(B, K, d_h)``; the d_h x K
  matrix of a sample ``b`` is ``A[b].T``.

The blank symbol is always class 0.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DataFormatError, ShapeError
from .tensor import Tensor

BLANK = 0
INIT_GAIN = 1.0
LN_EPS = 1e-5
_MASK_BIAS = -1e9


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 16
    conv_layers: tuple[tuple[int, int, int], ...] = ((32, 3, 2), (32, 3, 2))
    num_sabs: int = 2
    d_h: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    fc_dims: tuple[int, ...] = (64, 13)
    num_classes: int = 13
    blank_id: int = BLANK

    def __post_init__(self):
        object.__setattr__(self, "conv_layers", tuple(tuple(int(v) for v in c) for c in self.conv_layers))
        object.__setattr__(self, "fc_dims", tuple(int(v) for v in self.fc_dims))

    def validate(self) -> None:
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        for i, c in enumerate(self.conv_layers):
            if len(c) != 3:
                raise ConfigError(f"conv_layers[{i}] must be (channels, kernel, stride), got {c}")
            ch, k, s = c
            if ch < 1 or k < 1:
                raise ConfigError(f"conv_layers[{i}]: channels and kernel must be positive, got {c}")
            if s < 1:
                raise ConfigError(f"conv_layers[{i}]: stride must be >= 1, got {s}")
        if self.num_sabs < 1 or self.d_h < 1 or self.num_heads < 1 or self.ffn_dim < 1:
            raise ConfigError("num_sabs, d_h, num_heads and ffn_dim must be positive")
        if self.d_h % self.num_heads:
            raise ConfigError(f"d_h={self.d_h} is not divisible by num_heads={self.num_heads}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes (M) must be >= 2, got {self.num_classes}")
        if not self.fc_dims or self.fc_dims[-1] != self.num_classes:
            raise ConfigError(f"fc_dims must end in M={self.num_classes}, got {list(self.fc_dims)}")
        if any(d < 1 for d in self.fc_dims):
            raise ConfigError(f"fc_dims must be positive, got {list(self.fc_dims)}")
        if self.blank_id != BLANK:
            raise ConfigError(f"blank_id is fixed at {BLANK}, got {self.blank_id}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_layers"] = [list(c) for c in self.conv_layers]
        d["fc_dims"] = list(self.fc_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


TINY_CONFIG = ModelConfig(input_dim=6, conv_layers=((8, 3, 2),), num_sabs=2, d_h=8,
                          num_heads=2, ffn_dim=12, fc_dims=(10, 4), num_classes=4)


@dataclass
class EwcState:
    reference: dict[str, np.ndarray]
    fisher: dict[str, np.ndarray]


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: ModelConfig
    meta: dict = field(default_factory=dict)
    ewc: EwcState | None = None

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def copy(self) -> "Checkpoint":
        ewc = None
        if self.ewc is not None:
            ewc = EwcState({k: v.copy() for k, v in self.ewc.reference.items()},
                           {k: v.copy() for k, v in self.ewc.fisher.items()})
        return Checkpoint({k: v.copy() for k, v in self.params.items()}, self.config,
                          dict(self.meta), ewc)

    def equal_params(self, other: "Checkpoint") -> bool:
        return (self.params.keys() == other.params.keys()
                and all(np.array_equal(v, other.params[k]) for k, v in self.params.items()))


@dataclass
class Posteriors:
    """Frame posteriors of a batch, carried as log-probabilities (B, K, M)."""

    log_probs: Tensor
    mask: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @classmethod
    def from_probs(cls, probs, mask=None, floor: float = 1e-12) -> "Posteriors":
        """Wrap probabilities given as (K, M) or (B, K, M); logs are floored at ``floor``."""
        p = probs if isinstance(probs, Tensor) else Tensor(probs)
        if p.ndim == 2:
            p = p.reshape(1, *p.shape)
        if p.ndim != 3:
            raise ShapeError(f"posteriors must be (K, M) or (B, K, M), got {p.shape}")
        if mask is None:
            mask = np.ones(p.shape[:2], dtype=bool)
        mask = np.asarray(mask, dtype=bool).reshape(p.shape[:2])
        return cls(tn.log(tn.clamp_min(p, floor)), mask)


@dataclass
class EncoderOutput:
    log_probs: Tensor      # (B, K, M)
    feature_map: Tensor    # (B, K, d_h), output of the last block
    frame_mask: np.ndarray  # (B, K) bool, True on real frames

    @property
    def posteriors(self) -> Posteriors:
        return Posteriors(self.log_probs, self.frame_mask)


def downsampled_length(S: int, config: ModelConfig) -> int:
    K = int(S)
    for _, _, stride in config.conv_layers:
        K = -(-K // stride)
    return K


def _param_shapes(c: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) in a fixed order; the order drives the RNG stream."""
    spec = []
    cin = c.input_dim
    for i, (ch, k, _) in enumerate(c.conv_layers):
        spec += [(f"conv{i}.w", (k, cin, ch), "xavier"), (f"conv{i}.b", (ch,), "zeros")]
        cin = ch
    spec += [("proj.w", (cin, c.d_h), "xavier"), ("proj.b", (c.d_h,), "zeros")]
    for j in range(c.num_sabs):
        p = f"sab{j}."
        spec += [(p + "ln1.g", (c.d_h,), "ones"), (p + "ln1.b", (c.d_h,), "zeros")]
        for m in "qkvo":
            spec += [(p + f"attn.w{m}", (c.d_h, c.d_h), "xavier"), (p + f"attn.b{m}", (c.d_h,), "zeros")]
        spec += [(p + "ln2.g", (c.d_h,), "ones"), (p + "ln2.b", (c.d_h,), "zeros"),
                 (p + "ffn.w1", (c.d_h, c.ffn_dim), "xavier"), (p + "ffn.b1", (c.ffn_dim,), "zeros"),
                 (p + "ffn.w2", (c.ffn_dim, c.d_h), "xavier"), (p + "ffn.b2", (c.d_h,), "zeros")]
    spec += [("final_ln.g", (c.d_h,), "ones"), ("final_ln.b", (c.d_h,), "zeros")]
    din = c.d_h
    for i, d in enumerate(c.fc_dims):
        spec += [(f"fc{i}.w", (din, d), "xavier"), (f"fc{i}.b", (d,), "zeros")]
        din = d
    return spec


def init_model(config: ModelConfig, seed: int) -> Checkpoint:
    """Xavier-uniform weights with gain INIT_GAIN, zero biases, unit LayerNorm scales.

    For a weight of shape (..., fan_in, fan_out) the bound is
    ``gain * sqrt(6 / (fan_in' + fan_out'))`` where conv kernels multiply both
    fans by the kernel width.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in _param_shapes(config):
        if kind == "zeros":
            params[name] = np.zeros(shape)
        elif kind == "ones":
            params[name] = np.ones(shape)
        else:
            rf = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
            fan_in, fan_out = shape[-2] * rf, shape[-1] * rf
            bound = INIT_GAIN * math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return Checkpoint(params, config, {"stage": 0, "method": "init", "seed": int(seed)})


def _positional_encoding(K: int, d: int) -> np.ndarray:
    pos = np.arange(K)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _linear(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return tn.matmul(x, params[name + ".w"]) + params[name + ".b"]


def _self_attention(h: Tensor, params: dict[str, Tensor], p: str, heads: int,
                    key_bias: np.ndarray) -> Tensor:
    B, K, d = h.shape
    dk = d // heads

    def split(t):
        return t.reshape(B, K, heads, dk).transpose(0, 2, 1, 3)

    q = split(tn.matmul(h, params[p + "attn.wq"]) + params[p + "attn.bq"])
    k = split(tn.matmul(h, params[p + "attn.wk"]) + params[p + "attn.bk"])
    v = split(tn.matmul(h, params[p + "attn.wv"]) + params[p + "attn.bv"])
    scores = tn.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk)) + key_bias
    ctx = tn.matmul(tn.softmax(scores, axis=-1), v).transpose(0, 2, 1, 3).reshape(B, K, d)
    return tn.matmul(ctx, params[p + "attn.wo"]) + params[p + "attn.bo"]


def encode(config: ModelConfig, params: dict[str, Tensor], x: np.ndarray,
           lengths: np.ndarray, tap_feature_map: bool = True) -> EncoderOutput:
    """Forward pass on a padded channels-last batch ``x`` of shape (B, S, F).

    With ``tap_feature_map`` and a graph-free feature map (frozen teacher), the
    feature map is re-rooted as a fresh leaf requiring grad so that the
    importance map can still be taken with respect to it.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != config.input_dim:
        raise ShapeError(f"forward: expected input (B, S, {config.input_dim}), got {x.shape}")
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (x.shape[0],):
        raise ShapeError(f"forward: lengths shape {lengths.shape} does not match batch {x.shape[0]}")
    if np.any(lengths < 1):
        raise ShapeError("forward: utterances need at least 1 frame (minimum length S >= 1)")
    if np.any(lengths > x.shape[1]):
        raise ShapeError(f"forward: a length exceeds the padded size {x.shape[1]}")

    S = x.shape[1]
    frame_ok = np.arange(S)[None, :] < lengths[:, None]
    h = Tensor(np.where(frame_ok[..., None], x, 0.0))
    cur = lengths
    for i, (_, _, stride) in enumerate(config.conv_layers):
        h = tn.relu(tn.conv1d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride))
        cur = -(-cur // stride)
        frame_ok = np.arange(h.shape[1])[None, :] < cur[:, None]
        h = h * frame_ok[..., None].astype(np.float64)
    B, K = frame_ok.shape
    h = _linear(h, params, "proj") + _positional_encoding(K, config.d_h)
    key_bias = np.where(frame_ok, 0.0, _MASK_BIAS)[:, None, None, :]
    for j in range(config.num_sabs):
        p = f"sab{j}."
        a = tn.layer_norm(h, params[p + "ln1.g"], params[p + "ln1.b"], LN_EPS)
        h = h + _self_attention(a, params, p, config.num_heads, key_bias)
        f = tn.layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"], LN_EPS)
        f = tn.relu(tn.matmul(f, params[p + "ffn.w1"]) + params[p + "ffn.b1"])
        h = h + (tn.matmul(f, params[p + "ffn.w2"]) + params[p + "ffn.b2"])
    A = tn.layer_norm(h, params["final_ln.g"], params["final_ln.b"], LN_EPS)
    if tap_feature_map and not A.requires_grad:
        A = Tensor(A.data, requires_grad=True)
    z = A
    n_fc = len(config.fc_dims)
    for i in range(n_fc):
        z = _linear(z, params, f"fc{i}")
        if i < n_fc - 1:
            z = tn.relu(z)
    return EncoderOutput(tn.log_softmax(z, axis=-1), A, frame_ok)


def collate(xs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack (F, S_i) utterances into a zero-padded (B, S_max, F) batch plus lengths."""
    lengths = np.array([x.shape[1] for x in xs], dtype=np.int64)
    F = xs[0].shape[0]
    out = np.zeros((len(xs), int(lengths.max()), F))
    for b, x in enumerate(xs):
        out[b, :x.shape[1]] = x.T
    return out, lengths


def forward(checkpoint: Checkpoint, x, lengths=None, params: dict[str, Tensor] | None = None,
            tap_feature_map: bool = True) -> EncoderOutput:
    """Run the encoder.

    ``x`` is either one (F, S) utterance or a padded (B, S, F) batch with
    ``lengths``.  ``params`` overrides the checkpoint's arrays (used for a
    trainable student whose parameters require grad).
    """
    config = checkpoint.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        if x.shape[0] != config.input_dim:
            raise ShapeError(f"forward: expected ({config.input_dim}, S) features, got {x.shape}")
        if x.shape[1] < 1:
            raise ShapeError("forward: utterance too short, minimum length S is 1")
        x, lengths = x.T[None], np.array([x.shape[1]])
    elif lengths is None:
        lengths = np.full(x.shape[0], x.shape[1])
    if params is None:
        params = checkpoint.tensors()
    return encode(config, params, x, lengths, tap_feature_map)


# -- checkpoint file format ILCK1 -----------------------------------------

CKPT_MAGIC = b"ILCK"
CKPT_VERSION = 1


def _write_arrays(buf: io.BytesIO, arrays: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    header = json.dumps({"config": ckpt.config.to_dict(), "meta": ckpt.meta}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    _write_arrays(buf, ckpt.params)
    buf.write(struct.pack("<B", 1 if ckpt.ewc is not None else 0))
    if ckpt.ewc is not None:
        _write_arrays(buf, ckpt.ewc.reference)
        _write_arrays(buf, ckpt.ewc.fisher)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise DataFormatError(f"unexpected end of file while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def f64(self, count: int, what: str) -> np.ndarray:
        if count > (len(self.data) - self.pos) // 8 + 1:
            raise DataFormatError(f"dimension overflow in {what}: {count} values exceed file size", self.pos)
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def _read_arrays(r: _Reader) -> dict[str, np.ndarray]:
    out = {}
    for _ in range(r.u32("parameter count")):
        start = r.pos
        name_len = r.u32("name length")
        try:
            name = r.take(name_len, "parameter name").decode("utf-8")
        except UnicodeDecodeError:
            raise DataFormatError("parameter name is not valid UTF-8", start + 4) from None
        rank = r.u32("rank")
        if rank > 8:
            raise DataFormatError(f"implausible rank {rank} for '{name}'", r.pos - 4)
        dims = [r.u32("dimension") for _ in range(rank)]
        count = int(np.prod(dims)) if dims else 1
        out[name] = r.f64(count, f"values of '{name}'").reshape(dims)
    return out


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise DataFormatError("bad magic: not an ILCK1 checkpoint", 0)
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", 4)
    hlen = r.u32("config length")
    try:
        header = json.loads(r.take(hlen, "config block").decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise DataFormatError(f"malformed config block: {e}", 12) from None
    params = _read_arrays(r)
    ewc = None
    if r.u8("EWC flag"):
        ewc = EwcState(_read_arrays(r), _read_arrays(r))
    if r.pos != len(data):
        raise DataFormatError("trailing bytes after checkpoint", r.pos)
    ckpt = Checkpoint(params, config, header.get("meta", {}), ewc)
    check_checkpoint(ckpt)
    return ckpt


def check_checkpoint(ckpt: Checkpoint) -> None:
    expected = {name: shape for name, shape, _ in _param_shapes(ckpt.config)}
    if set(expected) != set(ckpt.params):
        missing = sorted(set(expected) - set(ckpt.params))
        extra = sorted(set(ckpt.params) - set(expected))
        raise ConfigError(f"checkpoint parameters do not match config (missing {missing}, extra {extra})")
    for name, shape in expected.items():
        if ckpt.params[name].shape != shape:
            raise ConfigError(f"parameter '{name}' has shape {ckpt.params[name].shape}, expected {shape}")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
