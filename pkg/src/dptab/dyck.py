"""Balanced-parenthesis (Dyck) dataset generation and validity scoring.

Dyck-k is the set of all length-k strings over one bracket type whose
parentheses are well matched; its size is the Catalan number C(k/2).
Enumeration is exhaustive with prefix pruning, so training can use the
complete language as its dataset. Rows encode as k categorical columns over
the shared two-symbol alphabet.
"""

from __future__ import annotations

import warnings

import numpy as np

from .data import ColumnSpec, EncodedDataset, Schema, build_vocab
from .errors import DataError

ENUMERATION_CAP = 24

OPEN, CLOSE = "(", ")"


def generate_dyck(k: int) -> list[str]:
    """All valid Dyck strings of length k, lexicographically ordered.

    Odd k has no balanced strings: returns [] with a warning. Prefix pruning
    keeps the open count nonnegative and never above k/2.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > ENUMERATION_CAP:
        raise ValueError(f"k={k} exceeds the enumeration cap {ENUMERATION_CAP}")
    if k % 2:
        warnings.warn(f"no balanced strings of odd length {k}")
        return []
    half = k // 2
    out: list[str] = []
    # '(' sorts before ')', so trying '(' first yields lexicographic order
    stack: list[tuple[str, int, int]] = [("", 0, 0)]
    while stack:
        prefix, opens, closes = stack.pop()
        if opens + closes == k:
            out.append(prefix)
            continue
        if closes < opens:
            stack.append((prefix + CLOSE, opens, closes + 1))
        if opens < half:
            stack.append((prefix + OPEN, opens + 1, closes))
    return out


def is_valid_dyck(s: str) -> bool:
    """Counter scan: +1 on '(', -1 on ')'; valid iff never negative, ends 0.

    Equivalent to membership in the grammar X -> ( X ) X | epsilon.
    """
    depth = 0
    for ch in s:
        if ch == OPEN:
            depth += 1
        elif ch == CLOSE:
            depth -= 1
            if depth < 0:
                return False
        else:
            raise ValueError(f"foreign character {ch!r} in Dyck string")
    return depth == 0


def validity_rate(rows) -> float:
    """Fraction of strings passing the validity parser."""
    rows = list(rows)
    if not rows:
        raise DataError("validity rate of an empty sample is undefined")
    return sum(1 for r in rows if is_valid_dyck(r)) / len(rows)


def dyck_schema(k: int) -> Schema:
    """k single-character categorical columns sharing the bracket alphabet."""
    return Schema(tuple(
        ColumnSpec(name=f"c{i + 1}", kind="categorical", categories=(OPEN, CLOSE))
        for i in range(k)
    ))


def dyck_dataset(k: int) -> EncodedDataset:
    """The full Dyck-k enumeration encoded over a shared-alphabet vocabulary."""
    strings = generate_dyck(k)
    schema = dyck_schema(k)
    vocab = build_vocab(schema, share_tokens=True)
    rows = np.array([[0 if ch == OPEN else 1 for ch in s] for s in strings],
                    dtype=np.int64)
    return EncodedDataset(rows, schema, vocab)


def rows_to_strings(rows: np.ndarray) -> list[str]:
    """Token rows (0='(', 1=')') back to strings."""
    return ["".join(OPEN if t == 0 else CLOSE for t in row) for row in rows]
