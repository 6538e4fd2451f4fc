"""Compact Transformer encoder producing unit-norm formula embeddings.

Pre-norm blocks with masked multi-head self-attention, learned positional
embeddings, a choice of mean/[CLS]/[BOS] pooling, and a bottleneck MLP
projector (linear -> GELU -> LayerNorm -> linear) whose output is
L2-normalized onto the unit hypersphere.

The module exposes a functional forward/backward pair on top of autograd:
``forward_with_tape`` returns embeddings plus a tape holding the autograd
graph, and ``backward`` turns an upstream d(loss)/d(embeddings) into exact
parameter gradients. Training losses can therefore be computed outside torch.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import formula as fm
from .errors import StlError

__all__ = [
    "EncoderConfig",
    "TransformerEncoder",
    "Tape",
    "build_encoder",
    "tokenize_batch",
    "forward_with_tape",
    "backward",
    "encode",
    "save_encoder",
    "load_encoder",
    "save_embeddings",
    "load_embeddings",
]

POOLINGS = ("mean", "cls", "bos")

_MAGIC = b"STLE"
_VERSION = 1
_EMB_MAGIC = b"STLV"


@dataclass
class EncoderConfig:
    vocab_size: int = fm.vocabulary_size()
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 128
    pooling: str = "cls"
    d_out: int = 64
    max_vars: int = fm.DEFAULT_MAX_VARS
    seed: int = 0

    def validate(self) -> None:
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even for the bottleneck projector")
        if self.d_out < 2:
            raise ValueError(f"d_out must be >= 2, got {self.d_out}")
        if self.vocab_size < fm.vocabulary_size(self.max_vars):
            raise ValueError("vocab_size too small for max_vars")

    @property
    def bottleneck(self) -> int:
        return self.d_model // 2

    @property
    def agg_token(self) -> int:
        return fm.agg_token_for_pooling(self.pooling)


def _key_bias(mask: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """Additive attention bias: 0 on valid keys, -inf on padding.

    Padded queries still attend to valid keys, so no softmax row is all -inf;
    their outputs are discarded by pooling and receive no upstream gradient.
    """
    bias = torch.where(
        mask.bool(),
        torch.zeros((), dtype=dtype),
        torch.full((), float("-inf"), dtype=dtype),
    )
    return bias.view(mask.shape[0], 1, 1, mask.shape[1])


class _Block(nn.Module):
    """Pre-norm Transformer block."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.d_model
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, d)
        self.n_heads = cfg.n_heads

    def attention(self, x: torch.Tensor, key_bias: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.n_heads
        dh = d // h
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, n, h, dh).transpose(1, 2)
        k = k.view(b, n, h, dh).transpose(1, 2)
        v = v.view(b, n, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / (dh ** 0.5)
        scores = scores + key_bias  # -inf on padded keys
        weights = torch.softmax(scores, dim=-1)
        ctx = (weights @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(ctx)

    def forward(self, x: torch.Tensor, key_bias: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.ln1(x), key_bias)
        x = x + self.ff2(torch.nn.functional.gelu(self.ff1(self.ln2(x))))
        return x


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len, cfg.d_model))
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.final_ln = nn.LayerNorm(cfg.d_model)
        self.proj1 = nn.Linear(cfg.d_model, cfg.bottleneck)
        self.proj_ln = nn.LayerNorm(cfg.bottleneck)
        self.proj2 = nn.Linear(cfg.bottleneck, cfg.d_out)

    def hidden_states(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        n = ids.shape[1]
        if n > self.cfg.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        x = self.tok_emb(ids) + self.pos_emb[:n]
        key_bias = _key_bias(mask, x.dtype)
        for block in self.blocks:
            x = block(x, key_bias)
        return self.final_ln(x)

    def attention_weights(self, ids: torch.Tensor, mask: torch.Tensor) -> list[torch.Tensor]:
        """Per-layer softmax weights, for inspection and tests."""
        n = ids.shape[1]
        x = self.tok_emb(ids) + self.pos_emb[:n]
        key_bias = _key_bias(mask, x.dtype)
        out = []
        for block in self.blocks:
            y = block.ln1(x)
            b, _, d = y.shape
            h = block.n_heads
            dh = d // h
            q, k, _ = block.qkv(y).chunk(3, dim=-1)
            q = q.view(b, n, h, dh).transpose(1, 2)
            k = k.view(b, n, h, dh).transpose(1, 2)
            scores = q @ k.transpose(-2, -1) / (dh ** 0.5) + key_bias
            out.append(torch.softmax(scores, dim=-1))
            x = block(x, key_bias)
        return out

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.hidden_states(ids, mask)
        if self.cfg.pooling == "mean":
            m = mask.to(h.dtype).unsqueeze(-1)
            pooled = (h * m).sum(dim=1) / m.sum(dim=1)
        else:
            pooled = h[:, 0]
        z = self.proj2(self.proj_ln(torch.nn.functional.gelu(self.proj1(pooled))))
        return z / z.norm(dim=1, keepdim=True)


def build_encoder(cfg: EncoderConfig, dtype: torch.dtype = torch.float32) -> TransformerEncoder:
    """Deterministically initialized encoder (f32 default, f64 for grad checks)."""
    torch.manual_seed(cfg.seed)
    model = TransformerEncoder(cfg)
    with torch.no_grad():
        nn.init.normal_(model.pos_emb, std=0.02)
    return model.to(dtype)


def tokenize_batch(
    sequences, dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.tensor([s.ids for s in sequences], dtype=torch.long)
    mask = torch.tensor([s.mask for s in sequences], dtype=dtype)
    return ids, mask


@dataclass
class Tape:
    """Autograd graph handle from one differentiable forward pass."""

    model: TransformerEncoder
    output: torch.Tensor
    batch_size: int


def forward_with_tape(model: TransformerEncoder, sequences) -> tuple[np.ndarray, Tape]:
    dtype = next(model.parameters()).dtype
    ids, mask = tokenize_batch(sequences, dtype)
    out = model(ids, mask)
    return out.detach().cpu().numpy(), Tape(model, out, len(sequences))


def backward(model: TransformerEncoder, tape: Tape, d_embeddings: np.ndarray) -> dict[str, np.ndarray]:
    """Exact parameter gradients for upstream d(loss)/d(embeddings)."""
    if tape.model is not model:
        raise ValueError("tape does not belong to this model")
    if tuple(d_embeddings.shape) != tuple(tape.output.shape):
        raise ValueError(
            f"gradient shape {d_embeddings.shape} does not match output {tuple(tape.output.shape)}"
        )
    upstream = torch.as_tensor(d_embeddings, dtype=tape.output.dtype)
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(tape.output, params, grad_outputs=upstream, retain_graph=True)
    return {name: g.detach().cpu().numpy() for name, g in zip(names, grads)}


def encode(model: TransformerEncoder, sequences, chunk_size: int = 64) -> np.ndarray:
    """Inference embeddings in fixed-size chunks (chunking keeps results
    bit-identical between training-time evaluation and offline export)."""
    dtype = next(model.parameters()).dtype
    rows = []
    with torch.no_grad():
        for lo in range(0, len(sequences), chunk_size):
            ids, mask = tokenize_batch(sequences[lo:lo + chunk_size], dtype)
            rows.append(model(ids, mask).cpu().numpy())
    if not rows:
        return np.empty((0, model.cfg.d_out), dtype=np.float32)
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# Parameter file: magic, u32 version, u8 dtype flag, u32 config length, config
# JSON, then for each parameter (sorted by name): u16 name length, name, u8
# ndim, u32 dims, raw little-endian tensor data.

_DTYPE_FLAGS = {torch.float32: 0, torch.float64: 1}
_FLAG_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8")}


def save_encoder(model: TransformerEncoder, path) -> None:
    dtype = next(model.parameters()).dtype
    flag = _DTYPE_FLAGS[dtype]
    np_dtype = _FLAG_DTYPES[flag][1]
    cfg_blob = json.dumps(asdict(model.cfg)).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<IBI", _VERSION, flag, len(cfg_blob)))
    buf.write(cfg_blob)
    state = model.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().numpy()
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", tensor.ndim))
        buf.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        buf.write(np.ascontiguousarray(tensor, dtype=np_dtype).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_encoder(path) -> TransformerEncoder:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise StlError(f"bad encoder file magic {magic!r}")
        version, flag, cfg_len = struct.unpack("<IBI", fh.read(9))
        if version != _VERSION:
            raise StlError(f"unsupported encoder file version {version}")
        if flag not in _FLAG_DTYPES:
            raise StlError(f"unknown dtype flag {flag}")
        torch_dtype, np_dtype = _FLAG_DTYPES[flag]
        cfg = EncoderConfig(**json.loads(fh.read(cfg_len).decode("utf-8")))
        model = build_encoder(cfg, torch_dtype)
        state = model.state_dict()
        loaded = {}
        for _ in range(len(state)):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * int(np_dtype[-1])), dtype=np_dtype)
            if data.size != count:
                raise StlError("truncated encoder file")
            loaded[name] = torch.as_tensor(data.reshape(shape).copy(), dtype=torch_dtype)
        if fh.read(1):
            raise StlError("trailing bytes in encoder file")
    if set(loaded) != set(state):
        raise StlError("encoder file parameters do not match config")
    for name, tensor in loaded.items():
        if tuple(tensor.shape) != tuple(state[name].shape):
            raise StlError(f"shape mismatch for {name}")
    model.load_state_dict(loaded)
    return model


def save_embeddings(embeddings: np.ndarray, path) -> None:
    arr = np.asarray(embeddings)
    if arr.ndim != 2:
        raise ValueError(f"embeddings must be 2-d, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<III", _VERSION, arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_embeddings(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _EMB_MAGIC:
            raise StlError(f"bad embedding file magic {magic!r}")
        version, rows, dim = struct.unpack("<III", fh.read(12))
        if version != _VERSION:
            raise StlError(f"unsupported embedding file version {version}")
        data = np.frombuffer(fh.read(rows * dim * 4), dtype="<f4")
        if data.size != rows * dim:
            raise StlError("truncated embedding file")
    return data.reshape(rows, dim).copy()
