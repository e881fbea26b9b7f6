"""Synthetic-data quality metrics: KS, CS, detection, and ML efficacy.

All metrics compare a real table against a synthetic table under a shared
public schema. Featurization one-hot encodes categoricals over the schema's
category lists and min-max scales numerics by the public bounds, so real and
synthetic data always live in the same feature space. The detection
classifier is an L2-regularized logistic regression trained by plain
gradient descent; ML efficacy uses a from-scratch CART tree (classification)
and ordinary least squares (regression). Everything is deterministic given
the seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc

from .data import Schema
from .errors import MetricError

DETECTION_FOLDS = 3
DETECTION_GD_STEPS = 500
DETECTION_L2 = 1e-3
TREE_MAX_DEPTH = 8
TREE_MIN_LEAF = 5
RIDGE_JITTER = 1e-8
TEST_FRACTION = 0.3


# ---------------------------------------------------------------------------
# column-level statistics
# ---------------------------------------------------------------------------


def ks_complement(real: np.ndarray, synth: np.ndarray) -> float:
    """1 - sup_x |F_real(x) - F_synth(x)| over the empirical CDFs."""
    real = np.asarray(real, dtype=float)
    synth = np.asarray(synth, dtype=float)
    if real.size == 0 or synth.size == 0:
        raise MetricError("KS needs nonempty columns")
    grid = np.sort(np.concatenate([real, synth]))
    f_real = np.searchsorted(np.sort(real), grid, side="right") / real.size
    f_synth = np.searchsorted(np.sort(synth), grid, side="right") / synth.size
    return 1.0 - float(np.max(np.abs(f_real - f_synth)))


def cs_pvalue(real, synth) -> float:
    """Chi-square p-value that the synthetic column matches the real one.

    Expected counts come from real-column proportions scaled to the
    synthetic sample size; categories unseen in the real column are dropped
    from the statistic. The p-value is the regularized upper incomplete
    gamma function at (dof/2, statistic/2).
    """
    real, synth = list(real), list(synth)
    if not real or not synth:
        raise MetricError("CS needs nonempty columns")
    categories = sorted(set(real))
    if len(categories) < 2:
        warnings.warn("single-category column; chi-square p-value defaults to 1")
        return 1.0
    real_counts = np.array([real.count(c) for c in categories], dtype=float)
    synth_counts = np.array([synth.count(c) for c in categories], dtype=float)
    expected = real_counts / real_counts.sum() * len(synth)
    stat = float(((synth_counts - expected) ** 2 / expected).sum())
    dof = len(categories) - 1
    return float(gammaincc(dof / 2.0, stat / 2.0))


def marginal_tvd(real, synth) -> float:
    """Total variation distance between empirical marginals, in [0, 1]."""
    real, synth = list(real), list(synth)
    if not real or not synth:
        raise MetricError("TVD needs nonempty columns")
    support = sorted(set(real) | set(synth), key=str)
    p = np.array([real.count(v) for v in support], dtype=float) / len(real)
    q = np.array([synth.count(v) for v in support], dtype=float) / len(synth)
    return 0.5 * float(np.abs(p - q).sum())


# ---------------------------------------------------------------------------
# featurization
# ---------------------------------------------------------------------------


def featurize(rows: list[list], schema: Schema, exclude: str | None = None) -> np.ndarray:
    """One-hot categoricals + min-max scaled numerics, schema-defined layout."""
    blocks = []
    for j, col in enumerate(schema.columns):
        if col.name == exclude:
            continue
        values = [r[j] for r in rows]
        if col.kind == "categorical":
            block = np.zeros((len(rows), len(col.categories)))
            index = {c: i for i, c in enumerate(col.categories)}
            for i, v in enumerate(values):
                block[i, index[v]] = 1.0
        else:
            block = (np.asarray(values, dtype=float) - col.min) / (col.max - col.min)
            block = block.reshape(-1, 1)
        blocks.append(block)
    return np.concatenate(blocks, axis=1) if blocks else np.zeros((len(rows), 0))


def _column(rows: list[list], schema: Schema, name: str) -> list:
    j = schema.names.index(name)
    return [r[j] for r in rows]


def _hash_test_mask(n: int, seed: int, frac: float = TEST_FRACTION) -> np.ndarray:
    """Deterministic per-index membership via a splitmix64-style hash."""
    with np.errstate(over="ignore"):  # uint64 wraparound is the hash mix
        idx = np.arange(n, dtype=np.uint64) + np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15)
        z = idx + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z / 2.0 ** 64) < frac


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------


def fit_logistic_regression(x: np.ndarray, y: np.ndarray,
                            steps: int = DETECTION_GD_STEPS,
                            l2: float = DETECTION_L2) -> np.ndarray:
    """Full-batch gradient descent on L2-regularized logistic loss.

    The step size is 1/L for the loss's Lipschitz-smoothness bound
    L = max_i ||x_i||^2 / 4 + l2, so the fixed iteration count is stable on
    any feature scale.
    """
    xb = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    w = np.zeros(xb.shape[1])
    lipschitz = float((xb * xb).sum(axis=1).max()) / 4.0 + l2
    lr = 1.0 / lipschitz
    n = xb.shape[0]
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(xb @ w)))
        grad = xb.T @ (p - y) / n + l2 * w
        w -= lr * grad
    return w


def predict_logit(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1) @ w


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC-AUC needs both classes")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _stratified_folds(labels: np.ndarray, n_folds: int, rng: np.random.Generator):
    folds = [[] for _ in range(n_folds)]
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        rng.shuffle(members)
        for i, idx in enumerate(members):
            folds[i % n_folds].append(idx)
    return [np.sort(np.array(f, dtype=int)) for f in folds]


def detection_score(real_rows: list[list], synth_rows: list[list], schema: Schema,
                    seed: int = 0) -> float:
    """1 - mean fold ROC-AUC of a real-vs-synthetic classifier, in [0, 0.5].

    Stratified 3-fold cross-validation; each fold's AUC is orientation
    clamped to >= 0.5. Higher scores mean the tables are harder to tell
    apart.
    """
    if len(real_rows) < DETECTION_FOLDS or len(synth_rows) < DETECTION_FOLDS:
        raise MetricError(f"detection needs at least {DETECTION_FOLDS} rows per table")
    x_real = featurize(real_rows, schema)
    x_synth = featurize(synth_rows, schema)
    # canonical row order -> the score depends on row multisets, not file order
    x_real = x_real[np.lexsort(x_real.T[::-1])]
    x_synth = x_synth[np.lexsort(x_synth.T[::-1])]
    x = np.concatenate([x_real, x_synth])
    y = np.concatenate([np.zeros(len(real_rows)), np.ones(len(synth_rows))])
    rng = np.random.default_rng(seed)
    aucs = []
    for fold in _stratified_folds(y, DETECTION_FOLDS, rng):
        mask = np.ones(len(y), dtype=bool)
        mask[fold] = False
        w = fit_logistic_regression(x[mask], y[mask])
        auc = roc_auc(predict_logit(w, x[fold]), y[fold])
        aucs.append(max(auc, 1.0 - auc))
    return 1.0 - float(np.mean(aucs))


# ---------------------------------------------------------------------------
# CART decision tree
# ---------------------------------------------------------------------------


class _TreeNode:
    __slots__ = ("feature", "threshold", "left", "right", "label")

    def __init__(self, label=None):
        self.feature = None
        self.threshold = None
        self.left = None
        self.right = None
        self.label = label


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return 1.0 - float((p * p).sum())


def _best_split(x, y, n_classes, min_leaf):
    n, d = x.shape
    parent = np.bincount(y, minlength=n_classes)
    best = (None, None, _gini(parent))
    for j in range(d):
        order = np.argsort(x[:, j], kind="mergesort")
        xj, yj = x[order, j], y[order]
        left = np.zeros(n_classes)
        right = parent.astype(float).copy()
        for i in range(n - 1):
            left[yj[i]] += 1
            right[yj[i]] -= 1
            if xj[i + 1] == xj[i]:
                continue
            if i + 1 < min_leaf or n - i - 1 < min_leaf:
                continue
            score = ((i + 1) * _gini(left) + (n - i - 1) * _gini(right)) / n
            if score < best[2] - 1e-12:
                best = (j, 0.5 * (xj[i] + xj[i + 1]), score)
    return best[0], best[1]


def _grow_tree(x, y, n_classes, depth, max_depth=TREE_MAX_DEPTH, min_leaf=TREE_MIN_LEAF):
    counts = np.bincount(y, minlength=n_classes)
    node = _TreeNode(label=int(counts.argmax()))
    if depth >= max_depth or len(y) < 2 * min_leaf or counts.max() == len(y):
        return node
    feature, threshold = _best_split(x, y, n_classes, min_leaf)
    if feature is None:
        return node
    mask = x[:, feature] <= threshold
    node.feature, node.threshold = feature, threshold
    node.left = _grow_tree(x[mask], y[mask], n_classes, depth + 1, max_depth, min_leaf)
    node.right = _grow_tree(x[~mask], y[~mask], n_classes, depth + 1, max_depth, min_leaf)
    return node


def _tree_predict(node: _TreeNode, x: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[0], dtype=int)
    for i, row in enumerate(x):
        cur = node
        while cur.feature is not None:
            cur = cur.left if row[cur.feature] <= cur.threshold else cur.right
        out[i] = cur.label
    return out


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    labels = sorted(set(y_true.tolist()) | set(y_pred.tolist()))
    scores = []
    for cls in labels:
        tp = int(((y_pred == cls) & (y_true == cls)).sum())
        fp = int(((y_pred == cls) & (y_true != cls)).sum())
        fn = int(((y_pred != cls) & (y_true == cls)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def ml_efficacy_clf(synth_rows: list[list], real_rows: list[list], schema: Schema,
                    target: str, seed: int = 0) -> float:
    """Macro-F1 on held-out real rows of a CART tree fit on synthetic data."""
    col = schema.columns[schema.names.index(target)] if target in schema.names else None
    if col is None:
        raise MetricError(f"target column '{target}' not in schema")
    if col.kind != "categorical":
        raise MetricError(f"target '{target}' must be categorical", code="target_not_categorical")
    classes = {c: i for i, c in enumerate(col.categories)}
    y_synth = np.array([classes[v] for v in _column(synth_rows, schema, target)])
    if len(set(y_synth.tolist())) < 2:
        warnings.warn("synthetic target has a single class; F1 reported as 0")
        return 0.0
    x_synth = featurize(synth_rows, schema, exclude=target)
    tree = _grow_tree(x_synth, y_synth, len(col.categories), depth=0)
    test_mask = _hash_test_mask(len(real_rows), seed)
    test_rows = [r for r, m in zip(real_rows, test_mask) if m]
    if not test_rows:
        raise MetricError("real test split is empty")
    x_test = featurize(test_rows, schema, exclude=target)
    y_test = np.array([classes[v] for v in _column(test_rows, schema, target)])
    return macro_f1(y_test, _tree_predict(tree, x_test))


def ml_efficacy_reg(synth_rows: list[list], real_rows: list[list], schema: Schema,
                    target: str, seed: int = 0) -> float:
    """r^2 on held-out real rows of an OLS model fit on synthetic data.

    Negative values mean the synthetic-trained model predicts real data
    worse than the real test mean.
    """
    if target not in schema.names:
        raise MetricError(f"target column '{target}' not in schema")
    col = schema.columns[schema.names.index(target)]
    if col.kind != "numeric":
        raise MetricError(f"target '{target}' must be numeric", code="target_not_numeric")
    x_synth = featurize(synth_rows, schema, exclude=target)
    y_synth = np.asarray(_column(synth_rows, schema, target), dtype=float)
    xb = np.concatenate([x_synth, np.ones((len(x_synth), 1))], axis=1)
    gram = xb.T @ xb + RIDGE_JITTER * np.eye(xb.shape[1])
    w = np.linalg.solve(gram, xb.T @ y_synth)
    test_mask = _hash_test_mask(len(real_rows), seed)
    test_rows = [r for r, m in zip(real_rows, test_mask) if m]
    if not test_rows:
        raise MetricError("real test split is empty")
    x_test = featurize(test_rows, schema, exclude=target)
    y_test = np.asarray(_column(test_rows, schema, target), dtype=float)
    if np.var(y_test) == 0:
        raise MetricError("real test target has zero variance; r^2 undefined")
    pred = np.concatenate([x_test, np.ones((len(x_test), 1))], axis=1) @ w
    ss_res = float(((y_test - pred) ** 2).sum())
    ss_tot = float(((y_test - y_test.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    ks: float | None
    cs: float | None
    det: float
    ml_clf_f1: float | None = None
    ml_reg_r2: float | None = None
    columns: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        out = {"ks": self.ks, "cs": self.cs, "det": self.det, "columns": self.columns}
        if self.ml_clf_f1 is not None:
            out["ml_clf_f1"] = self.ml_clf_f1
        if self.ml_reg_r2 is not None:
            out["ml_reg_r2"] = self.ml_reg_r2
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def compute_report(real_rows: list[list], synth_rows: list[list], schema: Schema,
                   target: str | None = None, task: str | None = None,
                   seed: int = 0) -> MetricReport:
    """Full metric report; KS averages numeric columns, CS categorical ones."""
    ks_scores, cs_scores, columns = [], [], {}
    for j, col in enumerate(schema.columns):
        real_col = [r[j] for r in real_rows]
        synth_col = [r[j] for r in synth_rows]
        if col.kind == "numeric":
            value = ks_complement(np.array(real_col, float), np.array(synth_col, float))
            ks_scores.append(value)
            columns[col.name] = {"metric": "ks", "value": value}
        else:
            value = cs_pvalue(real_col, synth_col)
            cs_scores.append(value)
            columns[col.name] = {
                "metric": "cs", "value": value,
                "tvd": marginal_tvd(real_col, synth_col),
            }
    report = MetricReport(
        ks=float(np.mean(ks_scores)) if ks_scores else None,
        cs=float(np.mean(cs_scores)) if cs_scores else None,
        det=detection_score(real_rows, synth_rows, schema, seed=seed),
        columns=columns,
    )
    if target is not None:
        if task == "clf":
            report.ml_clf_f1 = ml_efficacy_clf(synth_rows, real_rows, schema, target, seed)
        elif task == "reg":
            report.ml_reg_r2 = ml_efficacy_reg(synth_rows, real_rows, schema, target, seed)
        else:
            raise MetricError(f"unknown task '{task}' (expected clf or reg)")
    return report
