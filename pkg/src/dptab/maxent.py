"""Exact marginal games on small discrete product spaces.

A DenseJoint is an explicit probability table over K finite columns. Given
all order-M marginals of a reference joint, iterative proportional fitting
from the uniform table converges to the maximum-entropy distribution that
matches them (the I-projection of the uniform onto the marginal polytope).
The laboratory verifies, numerically, the divergence identity

    KL(P || Q*) = H(Q*) - H(P)   for every P matching the marginals,

which follows from the constant-log-loss property of the max-entropy member
(E_P[-log Q*] = H(Q*) for all P in the polytope), together with its
corollary that losing marginal information can only raise the entropy of
the best reconstruction.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .errors import ConvergenceError

MAX_CELLS = 1_000_000


@dataclass(frozen=True)
class DenseJoint:
    """Explicit joint distribution: a nonnegative table summing to 1."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        object.__setattr__(self, "table", t)
        if t.size > MAX_CELLS:
            raise ValueError(f"joint has {t.size} cells, cap is {MAX_CELLS}")
        if (t < 0).any():
            raise ValueError("joint has negative entries")
        if abs(float(t.sum()) - 1.0) > 1e-12:
            raise ValueError(f"joint sums to {t.sum()!r}, not 1")

    @property
    def cards(self) -> tuple[int, ...]:
        return self.table.shape

    @property
    def n_columns(self) -> int:
        return self.table.ndim


@dataclass(frozen=True)
class MarginalSet:
    """All order-M marginals of some joint, in lexicographic subset order."""

    order: int
    cards: tuple[int, ...]
    subsets: tuple[tuple[int, ...], ...]
    tables: tuple[np.ndarray, ...]

    def __iter__(self):
        return iter(zip(self.subsets, self.tables))


def marginalize(joint: DenseJoint, subset) -> np.ndarray:
    """Sum the joint over every column not in ``subset`` (0-based, sorted)."""
    subset = tuple(sorted(subset))
    if not subset:
        raise ValueError("subset must be nonempty")
    if subset[0] < 0 or subset[-1] >= joint.n_columns:
        raise ValueError(f"subset {subset} out of range for {joint.n_columns} columns")
    drop = tuple(i for i in range(joint.n_columns) if i not in subset)
    return joint.table.sum(axis=drop) if drop else joint.table.copy()


def all_marginals(joint: DenseJoint, order: int) -> MarginalSet:
    if not (1 <= order <= joint.n_columns):
        raise ValueError(f"order must lie in [1, {joint.n_columns}]")
    subsets = tuple(itertools.combinations(range(joint.n_columns), order))
    tables = tuple(marginalize(joint, s) for s in subsets)
    return MarginalSet(order=order, cards=joint.cards, subsets=subsets, tables=tables)


def _expand(marginal: np.ndarray, subset: tuple[int, ...], n_columns: int) -> np.ndarray:
    """Reshape a marginal so it broadcasts against the full joint table."""
    shape = [1] * n_columns
    for axis, size in zip(subset, marginal.shape):
        shape[axis] = size
    return marginal.reshape(shape)


def _constraint_tv(joint_table: np.ndarray, subset, target, n_columns) -> float:
    drop = tuple(i for i in range(n_columns) if i not in subset)
    current = joint_table.sum(axis=drop) if drop else joint_table
    return 0.5 * float(np.abs(current - target).sum())


def ipf_maxent(marginals: MarginalSet, tol: float = 1e-10, max_sweeps: int = 10000,
               start: np.ndarray | None = None) -> DenseJoint:
    """Iterative proportional fitting onto a consistent marginal set.

    Starting from the uniform table (the default), the fixed point is the
    maximum-entropy member of the polytope. Any strictly positive ``start``
    yields some member of the polytope instead, which is how test
    distributions with matching marginals are constructed. Convergence is
    declared when every constraint's total-variation error drops below
    ``tol``.
    """
    k = len(marginals.cards)
    if start is None:
        table = np.full(marginals.cards, 1.0 / np.prod(marginals.cards))
    else:
        table = np.asarray(start, dtype=np.float64).copy()
        table /= table.sum()
    for sweep in range(1, max_sweeps + 1):
        for subset, target in marginals:
            drop = tuple(i for i in range(k) if i not in subset)
            current = table.sum(axis=drop) if drop else table
            with np.errstate(divide="ignore", invalid="ignore"):
                factor = np.where(current > 0, target / np.where(current > 0, current, 1.0), 1.0)
            table *= _expand(factor, subset, k)
        worst = max(_constraint_tv(table, s, t, k) for s, t in marginals)
        if worst < tol:
            return DenseJoint(table / table.sum())
    raise ConvergenceError(
        f"IPF did not converge in {max_sweeps} sweeps (residual {worst:.3e})",
        residual=worst, sweeps=max_sweeps,
    )


def entropy(joint: DenseJoint | np.ndarray) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    t = joint.table if isinstance(joint, DenseJoint) else np.asarray(joint)
    return float(-xlogy(t, t).sum())


def kl(q: DenseJoint, p: DenseJoint) -> float:
    """KL(q || p) in nats; +inf when q puts mass outside p's support."""
    qt, pt = q.table, p.table
    if ((qt > 0) & (pt == 0)).any():
        return math.inf
    mask = qt > 0
    return float((qt[mask] * (np.log(qt[mask]) - np.log(pt[mask]))).sum())


def log_loss(p: DenseJoint, q: DenseJoint) -> float:
    """Expected -log q(x) under p; equals H(p) + KL(p||q); +inf off-support."""
    pt, qt = p.table, q.table
    if ((pt > 0) & (qt == 0)).any():
        return math.inf
    mask = pt > 0
    return float(-(pt[mask] * np.log(qt[mask])).sum())


def member_of_polytope(marginals: MarginalSet, seed: int) -> DenseJoint:
    """Some strictly positive distribution matching the marginals.

    IPF from a random positive start lands on a (generally non-maxent)
    member of the polytope.
    """
    rng = np.random.default_rng(seed)
    start = rng.gamma(1.0, size=marginals.cards) + 0.05
    return ipf_maxent(marginals, start=start)


def verify_maxent_identity(reference: DenseJoint, order: int, tol: float = 1e-5,
                           ipf_tol: float = 1e-10) -> dict:
    """Check KL(P||Q*) = H(Q*) - H(P) for a strictly positive reference P.

    The divergence is taken reference-relative-to-reconstruction; that is
    the direction the constant-log-loss lemma proves (the reversed order is
    false in general, and infinite whenever the reference has zero cells).
    Also checks the corollary direction: whenever the reconstruction differs
    from the reference, the divergence and the entropy gap are strictly
    positive. Returns a report dict with the residual and pass/fail.
    """
    if (reference.table <= 0).any():
        raise ValueError("reference joint must be strictly positive for a finite KL")
    marginals = all_marginals(reference, order)
    q_star = ipf_maxent(marginals, tol=ipf_tol)
    h_q, h_p = entropy(q_star), entropy(reference)
    divergence = kl(reference, q_star)
    residual = abs(divergence - (h_q - h_p))
    marginal_residual = max(
        _constraint_tv(q_star.table, s, t, reference.n_columns) for s, t in marginals
    )
    differs = 0.5 * float(np.abs(q_star.table - reference.table).sum()) > 1e-8
    corollary_ok = (not differs) or (divergence > 0 and h_q > h_p)
    return {
        "order": order,
        "kl": divergence,
        "entropy_maxent": h_q,
        "entropy_reference": h_p,
        "identity_residual": residual,
        "marginal_residual": marginal_residual,
        "corollary_ok": bool(corollary_ok),
        "pass": bool(residual <= tol and corollary_ok),
    }
