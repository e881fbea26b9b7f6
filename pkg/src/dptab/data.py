"""Schema-driven CSV ingestion, discretization, and token encoding.

Column metadata (types, numeric min/max, category lists) is treated as
public input and is never derived from the data itself. Numeric columns are
uniformly discretized into a fixed number of bins between the public min and
max; decoding inverts each bin to its midpoint. Every column owns a disjoint,
contiguous token-id range, except in shared-alphabet mode where all columns
map onto one range (used for character-grid datasets such as Dyck strings).
One reserved begin-of-row token sits at id ``vocab.total`` so the model can
condition the first column on an empty context.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, SchemaError

DEFAULT_BINS = 100

CACHE_MAGIC = b"DPTB"
CACHE_VERSION = 1


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str  # "categorical" | "numeric"
    min: float | None = None
    max: float | None = None
    integer_valued: bool = False
    categories: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("categorical", "numeric"):
            raise SchemaError(f"column '{self.name}': unknown kind '{self.kind}'")
        if self.kind == "numeric":
            if self.min is None or self.max is None:
                raise SchemaError(f"numeric column '{self.name}' needs public min and max")
            if not (self.min < self.max):
                raise SchemaError(f"column '{self.name}': min must be < max")
        else:
            if not self.categories:
                raise SchemaError(f"categorical column '{self.name}' needs categories")
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"column '{self.name}': duplicate categories")
            object.__setattr__(self, "categories", tuple(self.categories))

    def to_json_dict(self) -> dict:
        d: dict = {"name": self.name, "kind": self.kind}
        if self.kind == "numeric":
            d.update(min=self.min, max=self.max, integer_valued=self.integer_valued)
        else:
            d["categories"] = list(self.categories)
        return d


@dataclass(frozen=True)
class Schema:
    columns: tuple[ColumnSpec, ...]

    def __post_init__(self):
        if not self.columns:
            raise SchemaError("schema needs at least one column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names in schema")
        object.__setattr__(self, "columns", tuple(self.columns))

    def __len__(self):
        return len(self.columns)

    def __iter__(self):
        return iter(self.columns)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @classmethod
    def from_json_dicts(cls, items: list[dict]) -> "Schema":
        cols = []
        for item in items:
            kwargs = dict(item)
            if "categories" in kwargs and kwargs["categories"] is not None:
                kwargs["categories"] = tuple(str(c) for c in kwargs["categories"])
            try:
                cols.append(ColumnSpec(**kwargs))
            except TypeError as exc:
                raise SchemaError(f"bad schema entry {item!r}: {exc}") from exc
        return cls(tuple(cols))

    @classmethod
    def load(cls, path) -> "Schema":
        try:
            items = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"schema file {path}: invalid JSON ({exc})") from exc
        if not isinstance(items, list):
            raise SchemaError(f"schema file {path}: expected a JSON array of column objects")
        return cls.from_json_dicts(items)

    def to_json_dicts(self) -> list[dict]:
        return [c.to_json_dict() for c in self.columns]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dicts(), indent=2), encoding="utf-8")

    def sha256(self) -> str:
        canon = json.dumps(self.to_json_dicts(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def order_columns(schema: Schema, strategy: str, bins: int = DEFAULT_BINS):
    """Return (reordered schema, permutation) for a column-order strategy.

    permutation[i] is the original index of the column now at position i.
    Sorting is stable by (cardinality, original index), so ties keep the
    given order.
    """
    if strategy == "given":
        return schema, list(range(len(schema)))
    if strategy not in ("by-cardinality-desc", "by-cardinality-asc"):
        raise SchemaError(f"unknown column-order strategy '{strategy}'")

    def card(col: ColumnSpec) -> int:
        return len(col.categories) if col.kind == "categorical" else bins

    idx = list(range(len(schema)))
    reverse = strategy.endswith("desc")
    idx.sort(key=lambda i: (-card(schema.columns[i]) if reverse else card(schema.columns[i]), i))
    return Schema(tuple(schema.columns[i] for i in idx)), idx


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenVocab:
    """Per-column token-id layout over a shared integer vocabulary.

    ``sizes[i]`` is the number of tokens for column i, ``offsets[i]`` the id
    of its first token; ranges are contiguous and pairwise disjoint unless
    ``shared`` is set, in which case every column maps onto [0, sizes[0]).
    The begin-of-row token gets id ``total`` and belongs to no column.
    """

    sizes: tuple[int, ...]
    offsets: tuple[int, ...]
    total: int
    shared: bool = False
    bins: int = DEFAULT_BINS

    @property
    def bos_id(self) -> int:
        return self.total

    @property
    def n_tokens(self) -> int:
        """Model vocabulary size, begin-of-row included."""
        return self.total + 1

    def column_range(self, i: int) -> tuple[int, int]:
        return self.offsets[i], self.offsets[i] + self.sizes[i]

    def mask_matrix(self, mask_value: float, dtype=np.float64) -> np.ndarray:
        """(K, n_tokens) additive mask: 0 inside column i's range, mask_value outside."""
        k = len(self.sizes)
        m = np.full((k, self.n_tokens), mask_value, dtype=dtype)
        for i in range(k):
            lo, hi = self.column_range(i)
            m[i, lo:hi] = 0.0
        return m

    def to_json_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "offsets": list(self.offsets),
            "total": self.total,
            "shared": self.shared,
            "bins": self.bins,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TokenVocab":
        return cls(
            sizes=tuple(d["sizes"]), offsets=tuple(d["offsets"]),
            total=d["total"], shared=d["shared"], bins=d["bins"],
        )


def build_vocab(schema: Schema, bins: int = DEFAULT_BINS, share_tokens: bool = False) -> TokenVocab:
    if share_tokens:
        cats = schema.columns[0].categories
        for col in schema.columns:
            if col.kind != "categorical" or col.categories != cats:
                raise SchemaError(
                    "shared-alphabet mode needs identical categorical columns, "
                    f"column '{col.name}' differs"
                )
        size = len(cats)
        k = len(schema)
        return TokenVocab(sizes=(size,) * k, offsets=(0,) * k, total=size, shared=True, bins=bins)

    sizes, offsets, off = [], [], 0
    for col in schema.columns:
        size = len(col.categories) if col.kind == "categorical" else bins
        sizes.append(size)
        offsets.append(off)
        off += size
    return TokenVocab(sizes=tuple(sizes), offsets=tuple(offsets), total=off, bins=bins)


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------


def discretize(x: float, lo: float, hi: float, bins: int = DEFAULT_BINS) -> int:
    """Uniform bin index in [0, bins-1]; x == hi clamps into the last bin."""
    if not (lo <= x <= hi):
        raise DataError(f"value {x} outside public range [{lo}, {hi}]")
    b = int(math.floor((x - lo) / (hi - lo) * bins))
    return min(b, bins - 1)


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else int(math.ceil(x - 0.5))


def undiscretize(b: int, lo: float, hi: float, bins: int = DEFAULT_BINS,
                 integer_valued: bool = False) -> float:
    """Midpoint of bin b; rounded half-away-from-zero for integer columns."""
    if not (0 <= b < bins):
        raise DataError(f"bin {b} out of range [0, {bins})")
    mid = lo + (b + 0.5) * (hi - lo) / bins
    return float(_round_half_away(mid)) if integer_valued else mid


# ---------------------------------------------------------------------------
# row/table encoding
# ---------------------------------------------------------------------------


@dataclass
class EncodedDataset:
    rows: np.ndarray  # (N, K) integer token ids
    schema: Schema
    vocab: TokenVocab

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.schema):
            raise DataError(f"encoded rows must be N x {len(self.schema)}")
        for i in range(len(self.schema)):
            lo, hi = self.vocab.column_range(i)
            col = self.rows[:, i]
            if col.size and (col.min() < lo or col.max() >= hi):
                raise DataError(f"token outside column range in column {i}")

    def __len__(self):
        return self.rows.shape[0]


def encode_row(row: list, schema: Schema, vocab: TokenVocab) -> np.ndarray:
    out = np.empty(len(schema), dtype=np.int64)
    for i, (col, value) in enumerate(zip(schema.columns, row)):
        if col.kind == "categorical":
            try:
                local = col.categories.index(value)
            except ValueError:
                raise DataError(
                    f"unknown category {value!r} for column '{col.name}'", column=col.name
                ) from None
        else:
            local = discretize(float(value), col.min, col.max, vocab.bins)
        out[i] = vocab.offsets[i] + local
    return out


def decode_row(tokens, schema: Schema, vocab: TokenVocab) -> list:
    out = []
    for i, (col, tok) in enumerate(zip(schema.columns, tokens)):
        lo, hi = vocab.column_range(i)
        tok = int(tok)
        if not (lo <= tok < hi):
            raise DataError(f"token {tok} outside range of column '{col.name}'", column=col.name)
        local = tok - lo
        if col.kind == "categorical":
            out.append(col.categories[local])
        else:
            value = undiscretize(local, col.min, col.max, vocab.bins, col.integer_valued)
            out.append(int(value) if col.integer_valued else value)
    return out


def encode_table(rows: list[list], schema: Schema, vocab: TokenVocab) -> EncodedDataset:
    if rows:
        encoded = np.stack([encode_row(r, schema, vocab) for r in rows])
    else:
        encoded = np.empty((0, len(schema)), dtype=np.int64)
    return EncodedDataset(encoded, schema, vocab)


# ---------------------------------------------------------------------------
# CSV input/output
# ---------------------------------------------------------------------------


def load_csv(path, schema: Schema) -> list[list]:
    """Read a comma-separated, UTF-8, header-first file into typed rows.

    Cell validation is strict: categorical cells must be listed in the
    schema, numeric cells must parse and fall inside the public [min, max].
    Errors name the offending 1-based data row and column.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        if header != schema.names:
            raise DataError(
                f"{path}: header {header!r} does not match schema columns {schema.names!r}"
            )
        rows: list[list] = []
        for lineno, raw in enumerate(reader, start=1):
            if len(raw) != len(schema):
                raise DataError(f"{path}: row {lineno} has {len(raw)} cells, expected {len(schema)}",
                                row=lineno)
            typed = []
            for col, cell in zip(schema.columns, raw):
                if col.kind == "categorical":
                    if cell not in col.categories:
                        raise DataError(
                            f"{path}: row {lineno}, column '{col.name}': unknown category {cell!r}",
                            row=lineno, column=col.name,
                        )
                    typed.append(cell)
                else:
                    try:
                        value = float(cell)
                    except ValueError:
                        raise DataError(
                            f"{path}: row {lineno}, column '{col.name}': not a number: {cell!r}",
                            row=lineno, column=col.name,
                        ) from None
                    if not (col.min <= value <= col.max):
                        raise DataError(
                            f"{path}: row {lineno}, column '{col.name}': {value} outside "
                            f"[{col.min}, {col.max}]",
                            row=lineno, column=col.name,
                        )
                    typed.append(value)
            rows.append(typed)
    return rows


def write_csv(path, rows: list[list], schema: Schema) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema.names)
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_train_val(dataset: EncodedDataset, seed: int, frac: float = 0.01):
    """Deterministic disjoint split; validation gets max(1, round(frac*N)) rows."""
    n = len(dataset)
    if n < 2:
        raise DataError(f"need at least 2 rows to split, got {n}")
    n_val = max(1, _round_half_away(frac * n))
    n_val = min(n_val, n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return (
        EncodedDataset(dataset.rows[train_idx], dataset.schema, dataset.vocab),
        EncodedDataset(dataset.rows[val_idx], dataset.schema, dataset.vocab),
    )


# ---------------------------------------------------------------------------
# character grids
# ---------------------------------------------------------------------------


def char_corpus_to_table(text: str, width: int = 50):
    """Cut a corpus into consecutive non-overlapping width-character rows.

    Returns (rows, schema): one categorical column per character position,
    all sharing the alphabet of distinct characters in the corpus (so the
    vocabulary should be built with share_tokens=True).
    """
    if len(text) < width:
        raise DataError(f"corpus length {len(text)} shorter than row width {width}")
    alphabet = tuple(sorted(set(text)))
    n = len(text) // width
    rows = [list(text[i * width:(i + 1) * width]) for i in range(n)]
    schema = Schema(tuple(
        ColumnSpec(name=f"c{i + 1}", kind="categorical", categories=alphabet)
        for i in range(width)
    ))
    return rows, schema


# ---------------------------------------------------------------------------
# binary cache
# ---------------------------------------------------------------------------


def save_encoded(path, dataset: EncodedDataset) -> None:
    """Cache token ids as: magic 'DPTB', u32 version, u32 N, u32 K, N*K u32 LE."""
    n, k = dataset.rows.shape
    with Path(path).open("wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<III", CACHE_VERSION, n, k))
        fh.write(dataset.rows.astype("<u4").tobytes())


def load_encoded(path, schema: Schema, vocab: TokenVocab) -> EncodedDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise DataError(f"{path}: not an encoded-dataset cache (bad magic)")
    version, n, k = struct.unpack("<III", raw[4:16])
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    if len(raw) - 16 != 4 * n * k:
        raise DataError(f"{path}: truncated cache, expected {4 * n * k} payload bytes")
    body = np.frombuffer(raw[16:], dtype="<u4")
    return EncodedDataset(body.reshape(n, k).astype(np.int64), schema, vocab)
