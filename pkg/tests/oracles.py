"""Independent oracles used by the test suite.

Everything here is deliberately written without the package's fast paths:
finite differences instead of the tape, straight-line numpy instead of graph
ops, grammar derivation instead of the counter scan, arbitrary precision
instead of log-sum-exp. Tests compare the production code against these.
"""

from __future__ import annotations

import functools
import itertools
import math

import mpmath
import numpy as np


def finite_difference_gradients(loss_fn, params: dict[str, np.ndarray], h: float = 1e-5):
    """Central finite differences of loss_fn() w.r.t. every entry of params.

    loss_fn takes no arguments and must read the (in-place perturbed) arrays.
    """
    grads = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads[name] = g.reshape(arr.shape)
    return grads


def max_relative_error(a: dict[str, np.ndarray], b: dict[str, np.ndarray], floor: float = 1e-4):
    """max |a-b| / max(|a|, |b|, floor) over all entries of both dicts."""
    worst = 0.0
    for name in a:
        x, y = a[name], b[name]
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


def mlp_forward_straightline(x, w1, b1, w2, b2):
    """Two-layer GELU MLP evaluated with plain numpy expressions."""
    h = x @ w1 + b1
    inner = math.sqrt(2.0 / math.pi) * (h + 0.044715 * h ** 3)
    h = 0.5 * h * (1.0 + np.tanh(inner))
    return h @ w2 + b2


def rdp_subsampled_gaussian_mp(q, sigma, alpha, dps: int = 80):
    """Arbitrary-precision binomial expansion of the subsampled-Gaussian RDP."""
    with mpmath.workdps(dps):
        q = mpmath.mpf(q)
        sigma = mpmath.mpf(sigma)
        total = mpmath.mpf(0)
        for k in range(alpha + 1):
            total += (
                mpmath.binomial(alpha, k)
                * (1 - q) ** (alpha - k)
                * q ** k
                * mpmath.e ** (k * (k - 1) / (2 * sigma ** 2))
            )
        return float(mpmath.log(total) / (alpha - 1))


@functools.lru_cache(maxsize=None)
def catalan(n: int) -> int:
    """Catalan numbers via the convolution recurrence."""
    if n == 0:
        return 1
    return sum(catalan(i) * catalan(n - 1 - i) for i in range(n))


def dyck_member_by_grammar(s: str) -> bool:
    """Membership in the one-bracket Dyck language by CYK-style derivation.

    The grammar is X -> ( X ) X | epsilon; valid(i, j) marks substrings
    s[i:j] derivable from X.
    """
    n = len(s)
    valid = {}

    def derivable(i, j):
        if (i, j) in valid:
            return valid[(i, j)]
        if i == j:
            valid[(i, j)] = True
            return True
        ok = False
        # split as ( X[i+1:m] ) X[m+1:j]
        if s[i] == "(":
            for m in range(i + 1, j):
                if s[m] == ")" and derivable(i + 1, m) and derivable(m + 1, j):
                    ok = True
                    break
        valid[(i, j)] = ok
        return ok

    return derivable(0, n)


def enumerate_dyck_bruteforce(k: int) -> list[str]:
    """All length-k strings over {(,)} filtered by the grammar oracle."""
    out = []
    for combo in itertools.product("()", repeat=k):
        s = "".join(combo)
        if dyck_member_by_grammar(s):
            out.append(s)
    return out


def maxent_bruteforce(cards, marginal_subsets, marginal_targets, n_grid: int = 20001):
    """Max-entropy member of a marginal polytope by exhaustive null-space search.

    Builds the linear constraint system A p = b from the marginal targets
    plus normalization, finds the affine solution set via least squares and
    the SVD null space, and grid-searches the null-space coefficients for the
    entropy maximizer. Only intended for polytopes whose null space is one-
    dimensional (e.g. K=3 binary with all pairwise marginals fixed).
    """
    cells = list(itertools.product(*[range(c) for c in cards]))
    idx = {cell: i for i, cell in enumerate(cells)}
    rows, rhs = [], []
    for subset, target in zip(marginal_subsets, marginal_targets):
        target = np.asarray(target)
        for combo in itertools.product(*[range(cards[a]) for a in subset]):
            row = np.zeros(len(cells))
            for cell in cells:
                if all(cell[a] == v for a, v in zip(subset, combo)):
                    row[idx[cell]] = 1.0
            rows.append(row)
            rhs.append(target[combo])
    rows.append(np.ones(len(cells)))
    rhs.append(1.0)
    a = np.array(rows)
    b = np.array(rhs)
    p0, *_ = np.linalg.lstsq(a, b, rcond=None)
    _, s, vt = np.linalg.svd(a)
    null = vt[np.sum(s > 1e-10):]
    if len(null) != 1:
        raise ValueError(f"null space dimension {len(null)}, expected 1")
    direction = null[0]

    def entropy(p):
        p = p[p > 1e-15]
        return float(-(p * np.log(p)).sum())

    best_p, best_h = None, -np.inf
    # bracket the feasible segment p0 + t*direction >= 0
    with np.errstate(divide="ignore"):
        t_bounds = -p0 / np.where(direction == 0, np.nan, direction)
    lo = np.nanmax(t_bounds[direction > 0]) if (direction > 0).any() else -1.0
    hi = np.nanmin(t_bounds[direction < 0]) if (direction < 0).any() else 1.0
    for t in np.linspace(lo, hi, n_grid):
        p = p0 + t * direction
        if (p < -1e-12).any():
            continue
        h = entropy(np.clip(p, 0.0, None))
        if h > best_h:
            best_h, best_p = h, p
    return np.clip(best_p, 0.0, None).reshape(cards), best_h
