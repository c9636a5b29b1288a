"""Second-order gradient boosted regression trees with logistic loss.

Split finding is exact and greedy: every midpoint between consecutive
distinct feature values is a candidate, scored with

    gain = 1/2 * [G_L^2/(H_L+lam) + G_R^2/(H_R+lam) - G^2/(H+lam)]

Leaves hold raw weights ``-G/(H+lam)``; the learning rate is applied when
tree outputs are accumulated, never stored in the leaves.

Ties: candidates are scanned by ascending feature index, then ascending
threshold, and a candidate replaces the incumbent only if its gain is larger
by more than ``GAIN_EPS * max(1, |incumbent|)``. The same tolerance guards
the ``min_split_gain`` test, so gains that are zero up to rounding never
split a node.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numba
import numpy as np

GAIN_EPS = 1e-12


@dataclass
class GbtConfig:
    num_estimators: int = 300
    max_depth: int = 3
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    min_split_gain: float = 0.0
    min_child_hessian: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_estimators < 1:
            raise ValueError("num_estimators must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 <= self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in [0, 1]")


@dataclass
class LabeledMatrix:
    X: np.ndarray
    y: np.ndarray
    weight: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X)
        if self.X.ndim != 2:
            raise ValueError("X must be 2-D")
        if self.X.dtype not in (np.float32, np.float64):
            self.X = self.X.astype(np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if len(self.y) != len(self.X):
            raise ValueError("X and y lengths differ")
        if self.weight is not None:
            self.weight = np.asarray(self.weight, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]


@dataclass
class RegressionTree:
    """Array-encoded binary tree; node 0 is the root, ``feature == -1`` marks a leaf.

    Rows with ``x[feature] < threshold`` go left.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        def rec(n):
            if self.feature[n] < 0:
                return 0
            return 1 + max(rec(self.left[n]), rec(self.right[n]))
        return rec(0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        out = np.zeros(len(X))
        _accumulate(X, self.feature, self.threshold, self.left, self.right, self.value,
                    np.zeros(1, dtype=np.int64), 1.0, out)
        return out

    def preorder(self) -> List[int]:
        out, stack = [], [0]
        while stack:
            n = stack.pop()
            out.append(n)
            if self.feature[n] >= 0:
                stack.append(int(self.right[n]))
                stack.append(int(self.left[n]))
        return out


@dataclass
class TreeEnsemble:
    n_features: int
    learning_rate: float
    trees: List[RegressionTree] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trees)

    def _flat(self):
        key = len(self.trees)
        cached = getattr(self, "_flat_cache", None)
        if cached is not None and cached[0] == key:
            return cached[1]
        if not self.trees:
            flat = (np.full(1, -1, np.int32), np.zeros(1), np.zeros(1, np.int32),
                    np.zeros(1, np.int32), np.zeros(1), np.zeros(0, dtype=np.int64))
        else:
            offsets = np.cumsum([0] + [t.n_nodes for t in self.trees[:-1]])
            feat = np.concatenate([t.feature for t in self.trees]).astype(np.int32)
            thr = np.concatenate([t.threshold for t in self.trees])
            left = np.concatenate([t.left + o for t, o in zip(self.trees, offsets)]).astype(np.int32)
            right = np.concatenate([t.right + o for t, o in zip(self.trees, offsets)]).astype(np.int32)
            val = np.concatenate([t.value for t in self.trees])
            flat = (feat, thr, left, right, val, offsets.astype(np.int64))
        self._flat_cache = (key, flat)
        return flat

    def margin(self, X: np.ndarray) -> np.ndarray:
        """``sum_k eta * f_k(x)`` accumulated tree by tree."""
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        out = np.zeros(len(X))
        if self.trees:
            _accumulate(X, *self._flat(), self.learning_rate, out)
        return out

    def margin_pairs(self, entity: np.ndarray, head: int, tails: np.ndarray) -> np.ndarray:
        """Margins for feature rows ``[entity[head]; entity[t]]`` without materialising them."""
        if 2 * entity.shape[1] != self.n_features:
            raise ValueError("entity width does not match ensemble feature dimension")
        out = np.zeros(len(tails))
        if self.trees:
            _accumulate_pairs(entity, head, np.asarray(tails, dtype=np.int64),
                              *self._flat(), self.learning_rate, out)
        return out

    def margin_pair_rows(self, entity: np.ndarray, heads: np.ndarray,
                         tails: np.ndarray) -> np.ndarray:
        if 2 * entity.shape[1] != self.n_features:
            raise ValueError("entity width does not match ensemble feature dimension")
        out = np.zeros(len(tails))
        if self.trees:
            _accumulate_pair_rows(entity, np.asarray(heads, dtype=np.int64),
                                  np.asarray(tails, dtype=np.int64),
                                  *self._flat(), self.learning_rate, out)
        return out


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logistic_grad_hess(y, margin):
    """First and second derivative of binary cross entropy w.r.t. the margin."""
    p = sigmoid(margin)
    return p - y, p * (1.0 - p)


def logistic_loss(y, margin):
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(margin, dtype=np.float64)
    return y * np.logaddexp(0.0, -m) + (1.0 - y) * np.logaddexp(0.0, m)


def predict(ensemble: TreeEnsemble, features) -> np.ndarray:
    """Probability ``sigmoid(sum_k eta * f_k(x))``; a 1-D input gives one row."""
    X = np.asarray(features)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    p = sigmoid(ensemble.margin(X))
    return p[0] if single else p


# --------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True, nogil=True)
def _accumulate(X, feat, thr, left, right, val, roots, eta, out):
    for i in range(X.shape[0]):
        s = out[i]
        for k in range(roots.shape[0]):
            nd = roots[k]
            while feat[nd] >= 0:
                if X[i, feat[nd]] < thr[nd]:
                    nd = left[nd]
                else:
                    nd = right[nd]
            s += eta * val[nd]
        out[i] = s


@numba.njit(cache=True, nogil=True)
def _accumulate_pairs(ent, head, tails, feat, thr, left, right, val, roots, eta, out):
    w = ent.shape[1]
    for i in range(tails.shape[0]):
        t = tails[i]
        s = out[i]
        for k in range(roots.shape[0]):
            nd = roots[k]
            while feat[nd] >= 0:
                f = feat[nd]
                x = ent[head, f] if f < w else ent[t, f - w]
                if x < thr[nd]:
                    nd = left[nd]
                else:
                    nd = right[nd]
            s += eta * val[nd]
        out[i] = s


@numba.njit(cache=True, nogil=True)
def _accumulate_pair_rows(ent, heads, tails, feat, thr, left, right, val, roots, eta, out):
    w = ent.shape[1]
    for i in range(tails.shape[0]):
        h = heads[i]
        t = tails[i]
        s = out[i]
        for k in range(roots.shape[0]):
            nd = roots[k]
            while feat[nd] >= 0:
                f = feat[nd]
                x = ent[h, f] if f < w else ent[t, f - w]
                if x < thr[nd]:
                    nd = left[nd]
                else:
                    nd = right[nd]
            s += eta * val[nd]
        out[i] = s


@numba.njit(cache=True, nogil=True)
def _better(gain, best, have):
    if not have:
        return True
    return gain > best + GAIN_EPS * max(1.0, abs(best))


@numba.njit(cache=True, nogil=True)
def _grow(codes, uvals, uoff, g, h, max_depth, lam, min_gain, min_child_h):
    """Level-wise exact greedy growth over distinct-value codes.

    ``codes[f, i]`` is the rank of ``X[i, f]`` among the sorted distinct
    values ``uvals[uoff[f]:uoff[f + 1]]``. Per node and feature, gradient
    sums are bucketed by rank and swept in ascending value order; only
    ranks present in the node produce candidate thresholds, which makes this
    the same candidate set as a presorted sweep.

    Returns node arrays and the leaf id reached by every training row.
    """
    F, n = codes.shape
    cap = 2 ** (max_depth + 1) - 1
    feat = np.full(cap, -1, np.int32)
    thr = np.zeros(cap)
    cut = np.zeros(cap, np.int64)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    val = np.zeros(cap)
    node_of = np.zeros(n, np.int32)
    leaf_of = np.zeros(n, np.int32)
    slot = np.full(cap, -1, np.int32)
    row_slot = np.zeros(n, np.int32)

    max_nb = 0
    for f in range(F):
        max_nb = max(max_nb, uoff[f + 1] - uoff[f])
    max_slots = 2 ** max(max_depth - 1, 0)
    hist = np.zeros((max_nb * max_slots, 3))

    n_nodes = 1
    active = np.zeros(1, np.int32)
    for depth in range(max_depth + 1):
        na = active.shape[0]
        if na == 0:
            break
        for s in range(na):
            slot[active[s]] = s
        GN = np.zeros(na)
        HN = np.zeros(na)
        for i in range(n):
            nd = node_of[i]
            if nd >= 0:
                s = slot[nd]
                row_slot[i] = s
                GN[s] += g[i]
                HN[s] += h[i]
            else:
                row_slot[i] = -1

        bf = np.full(na, -1, np.int32)
        bg = np.zeros(na)
        bt = np.zeros(na)
        bc = np.zeros(na, np.int64)
        if depth < max_depth:
            for f in range(F):
                base = uoff[f]
                nb = uoff[f + 1] - base
                hist[: nb * na] = 0.0
                for i in range(n):
                    s = row_slot[i]
                    if s < 0:
                        continue
                    k = np.int64(codes[f, i]) * na + s
                    hist[k, 0] += g[i]
                    hist[k, 1] += h[i]
                    hist[k, 2] += 1.0
                gl = np.zeros(na)
                hl = np.zeros(na)
                have = np.zeros(na, np.bool_)
                prev = np.zeros(na)
                for b in range(nb):
                    v = uvals[base + b]
                    for s in range(na):
                        k = b * na + s
                        if hist[k, 2] == 0.0:
                            continue
                        if have[s]:
                            gr = GN[s] - gl[s]
                            hr = HN[s] - hl[s]
                            if hl[s] >= min_child_h and hr >= min_child_h:
                                gain = 0.5 * (gl[s] * gl[s] / (hl[s] + lam) + gr * gr / (hr + lam)
                                              - GN[s] * GN[s] / (HN[s] + lam))
                                if _better(gain, bg[s], bf[s] >= 0):
                                    bg[s] = gain
                                    bf[s] = f
                                    bt[s] = 0.5 * (prev[s] + v)
                                    bc[s] = b
                        gl[s] += hist[k, 0]
                        hl[s] += hist[k, 1]
                        prev[s] = v
                        have[s] = True

        n_next = 0
        nxt = np.zeros(2 * na, np.int32)
        for s in range(na):
            nd = active[s]
            if bf[s] >= 0 and _better(bg[s], min_gain, True):
                feat[nd] = bf[s]
                thr[nd] = bt[s]
                cut[nd] = bc[s]
                left[nd] = n_nodes
                right[nd] = n_nodes + 1
                nxt[n_next] = n_nodes
                nxt[n_next + 1] = n_nodes + 1
                n_nodes += 2
                n_next += 2
            else:
                denom = HN[s] + lam
                val[nd] = -GN[s] / denom if denom > 0 else 0.0
        for i in range(n):
            nd = node_of[i]
            if nd < 0:
                continue
            f = feat[nd]
            if f < 0:
                leaf_of[i] = nd
                node_of[i] = -1
            elif codes[f, i] < cut[nd]:
                node_of[i] = left[nd]
            else:
                node_of[i] = right[nd]
        for s in range(na):
            slot[active[s]] = -1
        active = nxt[:n_next]

    return (feat[:n_nodes].copy(), thr[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), val[:n_nodes].copy(), leaf_of)


# --------------------------------------------------------------------------


class _Binned:
    """Per-feature distinct-value codes of ``X`` (exact, not a histogram approximation)."""

    def __init__(self, X: np.ndarray):
        n, F = X.shape
        uniq, codes = [], []
        for f in range(F):
            u, inv = np.unique(X[:, f], return_inverse=True)
            uniq.append(u.astype(np.float64))
            codes.append(inv)
        max_nb = max((len(u) for u in uniq), default=0)
        dtype = np.uint16 if max_nb <= np.iinfo(np.uint16).max else np.int32
        self.codes = np.empty((F, n), dtype=dtype)
        for f, c in enumerate(codes):
            self.codes[f] = c
        self.uoff = np.zeros(F + 1, dtype=np.int64)
        self.uoff[1:] = np.cumsum([len(u) for u in uniq])
        self.uvals = np.concatenate(uniq) if uniq else np.zeros(0)


def _grad_hess(matrix: LabeledMatrix, margins: np.ndarray):
    g, h = logistic_grad_hess(matrix.y, margins)
    if matrix.weight is not None:
        g, h = g * matrix.weight, h * matrix.weight
    return g, h


def _fit(pre: _Binned, g, h, config: GbtConfig):
    feat, thr, left, right, val, leaf_of = _grow(
        pre.codes, pre.uvals, pre.uoff, g, h, config.max_depth, float(config.reg_lambda),
        float(config.min_split_gain), float(config.min_child_hessian))
    return RegressionTree(feat, thr, left, right, val), leaf_of


def best_split(X, g, h, feature: Optional[int] = None, reg_lambda: float = 1.0,
               min_child_hessian: float = 0.0, min_split_gain: float = 0.0):
    """Best ``(feature, threshold, gain)`` for a single node, or ``None``.

    With ``feature`` given, only that column is searched and the result is
    ``(threshold, gain)``.
    """
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[:, None]
        feature = 0 if feature is None else feature
    cols = X if feature is None else X[:, [feature]]
    cfg = GbtConfig(max_depth=1, reg_lambda=reg_lambda, min_split_gain=min_split_gain,
                    min_child_hessian=min_child_hessian)
    tree, _ = _fit(_Binned(cols), np.asarray(g, float), np.asarray(h, float), cfg)
    if tree.feature[0] < 0:
        return None
    gain = _split_gain(cols[:, tree.feature[0]], g, h, tree.threshold[0], reg_lambda)
    if feature is not None:
        return float(tree.threshold[0]), gain
    return int(tree.feature[0]), float(tree.threshold[0]), gain


def _split_gain(x, g, h, threshold, lam):
    m = x < threshold
    G, H = float(np.sum(g)), float(np.sum(h))
    gl, hl = float(np.sum(g[m])), float(np.sum(h[m]))
    gr, hr = G - gl, H - hl
    return 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - G * G / (H + lam))


def fit_tree(matrix: LabeledMatrix, margins, config: GbtConfig) -> RegressionTree:
    """Fit one tree to the logistic gradients at ``margins``."""
    if len(matrix) == 0:
        raise ValueError("cannot fit a tree on an empty matrix")
    g, h = _grad_hess(matrix, np.asarray(margins, dtype=np.float64))
    tree, _ = _fit(_Binned(matrix.X), g, h, config)
    return tree


Stage = Tuple[int, Union[LabeledMatrix, Callable[[TreeEnsemble], LabeledMatrix]]]


class NonFiniteMarginError(RuntimeError):
    pass


def boost(ensemble: TreeEnsemble, matrix: LabeledMatrix, n_trees: int, config: GbtConfig,
          callback=None) -> np.ndarray:
    """Append ``n_trees`` trees fitted on ``matrix``; rows start from the
    ensemble's current margins. Returns the final training margins."""
    if matrix.n_features != ensemble.n_features:
        raise ValueError("matrix feature dimension does not match ensemble")
    margins = ensemble.margin(matrix.X)
    pre = _Binned(matrix.X)
    eta = ensemble.learning_rate
    for _ in range(n_trees):
        g, h = _grad_hess(matrix, margins)
        tree, leaf_of = _fit(pre, g, h, config)
        margins = margins + eta * tree.value[leaf_of]
        if not np.all(np.isfinite(margins)):
            raise NonFiniteMarginError(f"non-finite margin after tree {len(ensemble) + 1}")
        ensemble.trees.append(tree)
        if callback is not None:
            callback(ensemble, matrix, margins)
    return margins


def train_ensemble(schedule: Union[LabeledMatrix, Sequence[Stage]], config: GbtConfig,
                   callback=None) -> TreeEnsemble:
    """Boost through a stage schedule.

    ``schedule`` is either one matrix (all ``num_estimators`` trees on it) or
    a sequence of ``(n_trees, matrix_or_factory)``; a factory receives the
    partial ensemble and returns the next stage's matrix.
    """
    if isinstance(schedule, LabeledMatrix):
        schedule = [(config.num_estimators, schedule)]
    ensemble: Optional[TreeEnsemble] = None
    for n_trees, source in schedule:
        if ensemble is None and callable(source):
            raise ValueError("the first stage needs a concrete matrix")
        matrix = source(ensemble) if callable(source) else source
        if ensemble is None:
            ensemble = TreeEnsemble(matrix.n_features, config.learning_rate)
        boost(ensemble, matrix, n_trees, config, callback)
    return ensemble


# --------------------------------------------------------------------------
# text serialisation


def dumps_ensemble(ensemble: TreeEnsemble, rel: int) -> str:
    lines = [
        "linkboost-ensemble 1",
        f"relation {rel}",
        f"feature_dim {ensemble.n_features}",
        f"learning_rate {ensemble.learning_rate!r}",
        f"num_trees {len(ensemble.trees)}",
    ]
    for k, tree in enumerate(ensemble.trees):
        order = tree.preorder()
        lines.append(f"tree {k} {len(order)}")
        for n in order:
            if tree.feature[n] >= 0:
                lines.append(f"split {int(tree.feature[n])} {float(tree.threshold[n])!r}")
            else:
                lines.append(f"leaf {float(tree.value[n])!r}")
    return "\n".join(lines) + "\n"


def loads_ensemble(text: str) -> Tuple[int, TreeEnsemble]:
    it = iter(text.splitlines())

    def field_(name):
        key, val = next(it).split(" ", 1)
        if key != name:
            raise ValueError(f"expected {name!r}, got {key!r}")
        return val

    if next(it).strip() != "linkboost-ensemble 1":
        raise ValueError("not a linkboost ensemble file")
    rel = int(field_("relation"))
    ens = TreeEnsemble(int(field_("feature_dim")), float(field_("learning_rate")))
    n_trees = int(field_("num_trees"))
    for _ in range(n_trees):
        _, _, count = next(it).split()
        nodes = [next(it).split() for _ in range(int(count))]
        ens.trees.append(_tree_from_preorder(nodes))
    return rel, ens


def _tree_from_preorder(nodes) -> RegressionTree:
    n = len(nodes)
    feat = np.full(n, -1, np.int32)
    thr = np.zeros(n)
    left = np.full(n, -1, np.int32)
    right = np.full(n, -1, np.int32)
    val = np.zeros(n)
    pos = 0

    def build():
        nonlocal pos
        me = pos
        kind, *rest = nodes[pos]
        pos += 1
        if kind == "leaf":
            val[me] = float(rest[0])
        else:
            feat[me] = int(rest[0])
            thr[me] = float(rest[1])
            left[me] = build()
            right[me] = build()
        return me

    build()
    return RegressionTree(feat, thr, left, right, val)
