"""Decoder-only transformer over column-token sequences.

Pre-layer-norm GPT-2-style blocks with learned positional embeddings, GELU
MLPs, tied input/output embeddings, and no dropout. A row of K column values
is modeled autoregressively: the input sequence is the begin-of-row token
followed by the first K-1 tokens, and the logits at step t are additively
masked so the distribution for column t is supported exactly on that
column's token range. The same forward code serves single rows (training
replay), batches (validation), and incremental prefixes (sampling).
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Schema, TokenVocab
from .errors import CheckpointError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_columns: int
    n_tokens: int  # column tokens + 1 begin-of-row
    n_layers: int = 3
    d_model: int = 128
    n_heads: int = 4

    def __post_init__(self):
        if min(self.n_columns, self.n_tokens, self.n_layers, self.d_model, self.n_heads) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def max_positions(self) -> int:
        return self.n_columns + 1


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declared parameter order; checkpoints serialize tensors in this order."""
    d, f = config.d_model, config.d_ff
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (config.n_tokens, d)),
        ("pos_emb", (config.max_positions, d)),
    ]
    for i in range(config.n_layers):
        p = f"h{i}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.wq", (d, d)), (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)), (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)), (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "mlp.w1", (d, f)), (p + "mlp.b1", (f,)),
            (p + "mlp.w2", (f, d)), (p + "mlp.b2", (d,)),
        ]
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,))]
    return shapes


def count_params(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_shapes(config))


class ModelParams:
    """Named parameter tensors in declared order, bound to a config."""

    def __init__(self, config: ModelConfig, tensors: dict[str, ad.Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["tok_emb"].data.dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            t.data = arrays[k].astype(t.data.dtype, copy=True)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {
            k: ad.parameter(t.data.astype(dtype), k) for k, t in self.tensors.items()
        })


def init_params(config: ModelConfig, seed: int, dtype=np.float64,
                init_std: float = 0.02) -> ModelParams:
    """N(0, init_std^2) embeddings and weight matrices, unit gains, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config):
        if name.endswith(".g"):
            arr = np.ones(shape, dtype=dtype)
        elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            arr = np.zeros(shape, dtype=dtype)
        else:
            arr = rng.normal(0.0, init_std, size=shape).astype(dtype)
        tensors[name] = ad.parameter(arr, name)
    return ModelParams(config, tensors)


def zero_params(config: ModelConfig, dtype=np.float64) -> ModelParams:
    tensors = {name: ad.parameter(np.zeros(shape, dtype=dtype), name)
               for name, shape in param_shapes(config)}
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _hidden(params: ModelParams, tokens: np.ndarray) -> ad.Tensor:
    """Transformer trunk: integer tokens (..., T) -> hidden states (..., T, d)."""
    cfg = params.config
    p = params.tensors
    t = tokens.shape[-1]
    positions = np.broadcast_to(np.arange(t), tokens.shape)
    x = ad.add(ad.embedding(p["tok_emb"], tokens),
               ad.embedding(p["pos_emb"], positions))
    for i in range(cfg.n_layers):
        pre = f"h{i}."
        h = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = ad.add(ad.matmul(h, p[pre + "attn.wq"]), p[pre + "attn.bq"])
        k = ad.add(ad.matmul(h, p[pre + "attn.wk"]), p[pre + "attn.bk"])
        v = ad.add(ad.matmul(h, p[pre + "attn.wv"]), p[pre + "attn.bv"])
        a = ad.causal_self_attention(q, k, v, cfg.n_heads)
        x = ad.add(x, ad.add(ad.matmul(a, p[pre + "attn.wo"]), p[pre + "attn.bo"]))
        h = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h = ad.gelu(ad.add(ad.matmul(h, p[pre + "mlp.w1"]), p[pre + "mlp.b1"]))
        x = ad.add(x, ad.add(ad.matmul(h, p[pre + "mlp.w2"]), p[pre + "mlp.b2"]))
    return ad.layer_norm(x, p["ln_f.g"], p["ln_f.b"])


def _logits(params: ModelParams, tokens: np.ndarray) -> ad.Tensor:
    """(..., T) tokens -> (..., T, n_tokens) logits via the tied embedding."""
    h = _hidden(params, tokens)
    return ad.matmul(h, ad.transpose(params["tok_emb"]))


@functools.lru_cache(maxsize=16)
def _column_mask(vocab: TokenVocab, dtype_name: str) -> np.ndarray:
    m = vocab.mask_matrix(ad.MASK_VALUE, dtype=np.dtype(dtype_name))
    m.setflags(write=False)
    return m


def mask_logits(logits: np.ndarray, vocab: TokenVocab, column: int) -> np.ndarray:
    """Force support onto column's token range (0-based column index).

    Out-of-range entries are set to a large negative constant whose exp
    underflows to exactly zero, so softmax of the result is a distribution
    supported exactly on the column's tokens.
    """
    if not (0 <= column < len(vocab.sizes)):
        raise ValueError(f"column index {column} out of range")
    return logits + _column_mask(vocab, logits.dtype.name)[column]


def forward_logits(params: ModelParams, prefix: np.ndarray, vocab: TokenVocab) -> np.ndarray:
    """Logits for the next column given the first k column tokens (0 <= k < K)."""
    cfg = params.config
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim != 1 or len(prefix) >= cfg.n_columns:
        raise ValueError(f"prefix must hold at most {cfg.n_columns - 1} column tokens")
    for i, tok in enumerate(prefix):
        lo, hi = vocab.column_range(i)
        if not (lo <= tok < hi):
            raise ValueError(f"token {tok} invalid for column {i}")
    seq = np.concatenate([[vocab.bos_id], prefix])
    with ad.no_grad():
        return _logits(params, seq).data[-1]


def row_nll(params: ModelParams, row: np.ndarray, vocab: TokenVocab) -> ad.Tensor:
    """Scalar negative log likelihood of one encoded row under masked softmax."""
    row = np.asarray(row, dtype=np.int64)
    inputs = np.concatenate([[vocab.bos_id], row[:-1]])
    logits = _logits(params, inputs)
    masked = ad.add(logits, ad.constant(_column_mask(vocab, params.dtype.name)))
    return ad.sum_(ad.softmax_cross_entropy(masked, row))


def batch_nll(params: ModelParams, rows: np.ndarray, vocab: TokenVocab) -> ad.Tensor:
    """Per-row NLL vector (B,) for a batch of encoded rows (B, K)."""
    rows = np.asarray(rows, dtype=np.int64)
    bos = np.full((rows.shape[0], 1), vocab.bos_id, dtype=np.int64)
    inputs = np.concatenate([bos, rows[:, :-1]], axis=1)
    logits = _logits(params, inputs)
    masked = ad.add(logits, ad.constant(_column_mask(vocab, params.dtype.name)))
    return ad.sum_(ad.softmax_cross_entropy(masked, rows), axis=-1)


def per_example_grads(params: ModelParams, rows: np.ndarray, vocab: TokenVocab):
    """Vectorized per-example losses and gradients for a batch of rows.

    Returns (losses (B,), grads name -> (B,) + param shape). Equivalent to
    replaying row_nll + backward per row, but computed in one batched pass
    with the batch axis kept through every parameter-gradient reduction.
    """
    with ad.per_example_tape():
        losses = batch_nll(params, rows, vocab)
        grads = ad.gradients(ad.sum_(losses), params.tensors)
    return losses.data, grads


def mean_nll(params: ModelParams, rows: np.ndarray, vocab: TokenVocab,
             chunk: int = 512) -> float:
    """Exact mean per-row NLL over a dataset, computed off-tape in chunks."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.shape[0] == 0:
        raise ValueError("empty dataset")
    total = 0.0
    with ad.no_grad():
        for start in range(0, rows.shape[0], chunk):
            part = rows[start:start + chunk]
            total += float(batch_nll(params, part, vocab).data.sum())
    return total / rows.shape[0]


def sample_rows(params: ModelParams, vocab: TokenVocab, n: int, seed: int,
                temperature: float = 1.0, chunk: int = 1024) -> np.ndarray:
    """Sample n encoded rows column by column from the masked softmax.

    Every emitted token is drawn from its column's range by construction.
    Deterministic for a fixed (seed, chunk); rows are generated in chunks to
    bound memory.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    k = params.config.n_columns
    rng = np.random.default_rng(seed)
    out = np.empty((n, k), dtype=np.int64)
    with ad.no_grad():
        for start in range(0, n, chunk):
            m = min(chunk, n - start)
            ctx = np.full((m, 1), vocab.bos_id, dtype=np.int64)
            for col in range(k):
                logits = _logits(params, ctx).data[:, -1, :]
                lo, hi = vocab.column_range(col)
                z = logits[:, lo:hi] / temperature
                z = z - z.max(axis=1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=1, keepdims=True)
                u = rng.random(m)
                local = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1),
                                   hi - lo - 1)
                tokens = lo + local
                out[start:start + m, col] = tokens
                ctx = np.concatenate([ctx, tokens[:, None]], axis=1)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, schema: Schema, vocab: TokenVocab,
                    column_order: list[int] | None = None, meta: dict | None = None) -> None:
    """JSON header line + declared-order raw little-endian float32 tensors."""
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model": asdict(params.config),
        "schema_sha256": schema.sha256(),
        "schema": schema.to_json_dicts(),
        "vocab": vocab.to_json_dict(),
        "column_order": column_order if column_order is not None else list(range(len(schema))),
        "tensors": [[name, list(shape)] for name, shape in param_shapes(params.config)],
        "meta": meta or {},
    }
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name, _ in param_shapes(params.config):
            fh.write(params[name].data.astype("<f4").tobytes())


@dataclass
class Checkpoint:
    params: ModelParams
    schema: Schema
    vocab: TokenVocab
    column_order: list[int]
    schema_sha256: str
    meta: dict


def load_checkpoint(path, dtype=np.float32) -> Checkpoint:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad checkpoint header ({exc})") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version")
    config = ModelConfig(**header["model"])
    schema = Schema.from_json_dicts(header["schema"])
    vocab = TokenVocab.from_json_dict(header["vocab"])
    body = raw[nl + 1:]
    expected = [(name, tuple(shape)) for name, shape in header["tensors"]]
    if expected != param_shapes(config):
        raise CheckpointError(f"{path}: tensor list does not match the model config")
    tensors, offset = {}, 0
    for name, shape in expected:
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated tensor data at '{name}'")
        arr = np.frombuffer(body[offset:offset + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = ad.parameter(arr.astype(dtype), name)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    return Checkpoint(
        params=ModelParams(config, tensors),
        schema=schema,
        vocab=vocab,
        column_order=list(header["column_order"]),
        schema_sha256=header["schema_sha256"],
        meta=header.get("meta", {}),
    )
