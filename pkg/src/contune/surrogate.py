"""Extremely randomized regression trees used as the optimization surrogate.

Trees are grown on the full dataset (no bootstrap); at each node a random
subset of features is drawn and, for each, ``splits_per_feature`` uniform
thresholds inside the node's local range.  The (feature, threshold) pair with
the smallest summed child squared error wins.  The ensemble's prediction is
the mean over trees and its spread the sample standard deviation across trees.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_points, check_seed, derive_seed

__all__ = ["ExtraTreesSurrogate", "Tree", "load_checkpoint", "CHECKPOINT_VERSION"]

CHECKPOINT_VERSION = 1
_LEAF = -1


class Tree:
    """Array-backed binary regression tree.

    ``feature[i] == -1`` marks a leaf whose prediction is ``value[i]``;
    internal nodes send ``x[feature] <= threshold`` to ``left``.
    """

    __slots__ = ("feature", "threshold", "left", "right", "value", "n_rows", "lo", "hi")

    def __init__(self, feature, threshold, left, right, value, n_rows, lo=None, hi=None):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=float)
        self.n_rows = np.asarray(n_rows, dtype=np.int64)
        # local feature range at each internal node (kept for invariant checks)
        self.lo = np.asarray(lo if lo is not None else np.full(len(self.feature), np.nan), dtype=float)
        self.hi = np.asarray(hi if hi is not None else np.full(len(self.feature), np.nan), dtype=float)

    @property
    def node_count(self):
        return len(self.feature)

    @property
    def depth(self):
        """Number of edges on the longest root-to-leaf path."""
        best, stack = 0, [(0, 0)]
        while stack:
            i, d = stack.pop()
            if self.feature[i] == _LEAF:
                best = max(best, d)
            else:
                stack.append((int(self.left[i]), d + 1))
                stack.append((int(self.right[i]), d + 1))
        return best

    @property
    def n_leaves(self):
        return int(np.sum(self.feature == _LEAF))

    def apply(self, X):
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            feat = self.feature[node]
            active = feat != _LEAF
            if not active.any():
                return node
            idx = np.nonzero(active)[0]
            go_left = X[idx, feat[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])

    def predict(self, X):
        return self.value[self.apply(X)]

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": [None if t != t else t for t in self.threshold.tolist()],  # NaN at leaves
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_rows": self.n_rows.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["feature"], d["threshold"], d["left"], d["right"], d["value"], d["n_rows"])


def _grow_forest(X, y, n_trees, rng, min_samples_split, max_features, splits_per_feature):
    """Grow ``n_trees`` trees level by level, all trees at once.

    Returns one :class:`Tree` per tree.  Nodes are numbered globally while
    growing (roots are 0..n_trees-1) and renumbered per tree at the end.
    """
    n, d = X.shape
    tree_of = list(range(n_trees))
    feature = [_LEAF] * n_trees
    threshold = [np.nan] * n_trees
    left = [_LEAF] * n_trees
    right = [_LEAF] * n_trees
    lo_ = [np.nan] * n_trees
    hi_ = [np.nan] * n_trees
    value = np.zeros(0)
    n_rows = np.zeros(0, dtype=np.int64)

    node_of = np.repeat(np.arange(n_trees), n)  # flat (tree, row) -> node id
    row_idx = np.tile(np.arange(n), n_trees)
    frontier = np.arange(n_trees)
    while frontier.size:
        m = frontier.size
        pos = np.full(len(tree_of), -1)
        pos[frontier] = np.arange(m)
        fp = pos[node_of]
        r_flat = np.nonzero(fp >= 0)[0]
        order = np.argsort(fp[r_flat], kind="stable")
        r_flat = r_flat[order]
        r_node = fp[r_flat]
        r_row = row_idx[r_flat]
        starts = np.searchsorted(r_node, np.arange(m))
        counts = np.diff(np.append(starts, len(r_node)))
        ys, Xs = y[r_row], X[r_row]

        ymin = np.minimum.reduceat(ys, starts)
        ymax = np.maximum.reduceat(ys, starts)
        node_mean = np.add.reduceat(ys, starts) / counts
        # clip so a constant node predicts its value exactly
        value = np.concatenate([value, np.clip(node_mean, ymin, ymax)])
        n_rows = np.concatenate([n_rows, counts])

        lows = np.minimum.reduceat(Xs, starts, axis=0)
        highs = np.maximum.reduceat(Xs, starts, axis=0)
        usable = lows < highs
        splittable = (counts >= min_samples_split) & (ymin < ymax) & usable.any(axis=1)

        # random feature order per node; unusable (constant) features sort last
        keys = rng.random((m, d))
        keys[~usable] = 2.0
        chosen = np.argsort(keys, axis=1, kind="stable")[:, :max_features]
        valid = np.repeat(np.take_along_axis(usable, chosen, axis=1), splits_per_feature, axis=1)
        feats = np.repeat(chosen, splits_per_feature, axis=1)
        lo = np.take_along_axis(lows, feats, axis=1)
        hi = np.take_along_axis(highs, feats, axis=1)
        thr = rng.uniform(lo, hi)
        bad = ~((lo < thr) & (thr < hi))
        thr[bad] = 0.5 * (lo[bad] + hi[bad])

        if not splittable.any():
            break
        # summed child SSE of every candidate split, on node-centered targets
        yc = ys - node_mean[r_node]
        xr = np.take_along_axis(Xs, feats[r_node], axis=1)
        mask = xr <= thr[r_node]
        n_left = np.add.reduceat(mask, starts, axis=0)
        s_left = np.add.reduceat(mask * yc[:, None], starts, axis=0)
        total = np.add.reduceat(yc * yc, starts)
        n_right = counts[:, None] - n_left
        with np.errstate(divide="ignore", invalid="ignore"):
            scores = total[:, None] - s_left**2 / n_left - s_left**2 / n_right
        scores[~valid] = np.inf
        best = np.argmin(scores, axis=1)

        split_pos = np.nonzero(splittable)[0]
        base = len(tree_of)
        left_id = np.full(m, -1)
        right_id = np.full(m, -1)
        left_id[split_pos] = base + 2 * np.arange(len(split_pos))
        right_id[split_pos] = left_id[split_pos] + 1
        for p in split_pos:
            node = frontier[p]
            b = best[p]
            f = int(feats[p, b])
            feature[node] = f
            threshold[node] = float(thr[p, b])
            lo_[node], hi_[node] = float(lows[p, f]), float(highs[p, f])
            left[node], right[node] = int(left_id[p]), int(right_id[p])
            t = tree_of[node]
            tree_of.extend((t, t))
        k = len(split_pos) * 2
        feature.extend([_LEAF] * k)
        threshold.extend([np.nan] * k)
        left.extend([_LEAF] * k)
        right.extend([_LEAF] * k)
        lo_.extend([np.nan] * k)
        hi_.extend([np.nan] * k)

        moving = splittable[r_node]
        mv_node = r_node[moving]
        go_left = mask[np.nonzero(moving)[0], best[mv_node]]
        node_of[r_flat[moving]] = np.where(go_left, left_id[mv_node], right_id[mv_node])
        frontier = np.arange(base, base + k)

    tree_of = np.asarray(tree_of)
    feature, threshold = np.asarray(feature), np.asarray(threshold)
    left, right = np.asarray(left), np.asarray(right)
    lo_, hi_ = np.asarray(lo_), np.asarray(hi_)
    local = np.empty(len(tree_of), dtype=np.int64)
    trees = []
    for t in range(n_trees):
        ids = np.nonzero(tree_of == t)[0]
        local[ids] = np.arange(len(ids))
        lt = np.where(left[ids] >= 0, local[np.maximum(left[ids], 0)], _LEAF)
        rt = np.where(right[ids] >= 0, local[np.maximum(right[ids], 0)], _LEAF)
        trees.append(Tree(feature[ids], threshold[ids], lt, rt, value[ids], n_rows[ids],
                          lo_[ids], hi_[ids]))
    return trees


def _content_key(X, y):
    h = hashlib.sha256()
    rows = sorted(zip(map(tuple, X.tolist()), y.tolist()))
    h.update(repr(rows).encode())
    return int.from_bytes(h.digest()[:8], "little")


class ExtraTreesSurrogate(RegressorMixin, BaseEstimator):
    """Extra-Trees regression ensemble with per-point mean and spread.

    Parameters
    ----------
    n_trees : int, default 100
    min_samples_split : int, default 2
        Nodes with fewer rows become leaves.
    max_features : int or None, default None
        Features drawn per node; ``None`` means all ``d`` features.
    splits_per_feature : int, default 1
        Random thresholds drawn for each candidate feature.
    random_state : int, default 0
        Base seed.  The tree seeds are derived from it and the dataset, so
        refitting on the same data reproduces the same ensemble.
    seed_mode : {"length", "content"}, default "length"
        ``"length"`` derives the fit seed from (random_state, number of rows);
        ``"content"`` from a hash of the row multiset, making the fit
        independent of row order.
    """

    def __init__(self, n_trees=100, min_samples_split=2, max_features=None,
                 splits_per_feature=1, random_state=0, seed_mode="length"):
        self.n_trees = n_trees
        self.min_samples_split = min_samples_split
        self.max_features = max_features
        self.splits_per_feature = splits_per_feature
        self.random_state = random_state
        self.seed_mode = seed_mode

    def _check_params(self, d):
        if int(self.n_trees) != self.n_trees or self.n_trees < 1:
            raise ValueError("n_trees must be a positive integer")
        if int(self.min_samples_split) != self.min_samples_split or self.min_samples_split < 2:
            raise ValueError("min_samples_split must be an integer >= 2")
        max_features = d if self.max_features is None else self.max_features
        if int(max_features) != max_features or not 1 <= max_features <= d:
            raise ValueError(f"max_features must be an integer in [1, {d}]")
        if int(self.splits_per_feature) != self.splits_per_feature or self.splits_per_feature < 1:
            raise ValueError("splits_per_feature must be a positive integer")
        if self.seed_mode not in ("length", "content"):
            raise ValueError("seed_mode must be 'length' or 'content'")
        check_seed(self.random_state)
        return int(max_features)

    def fit(self, X, y):
        X = check_points(X)
        y = np.asarray(y, dtype=float).ravel()
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} rows but y has {len(y)}")
        if len(y) < 2:
            raise ValueError("at least 2 rows are needed to fit the surrogate")
        if not np.all(np.isfinite(y)):
            raise ValueError("targets must be finite")
        max_features = self._check_params(X.shape[1])
        if self.seed_mode == "content":
            order = np.lexsort(np.column_stack([X, y]).T[::-1])
            X, y = X[order], y[order]
            fit_seed = derive_seed(self.random_state, _content_key(X, y))
        else:
            fit_seed = derive_seed(self.random_state, len(y))
        self.trees_ = _grow_forest(
            X, y, int(self.n_trees), np.random.default_rng(fit_seed),
            int(self.min_samples_split), max_features, int(self.splits_per_feature),
        )
        self.X_, self.y_ = X, y
        self.n_features_in_ = X.shape[1]
        self.fit_seed_ = fit_seed
        self._pack()
        return self

    def _pack(self):
        # concatenated node arrays so all trees traverse in one vectorized loop;
        # leaves point back to themselves and always go "left"
        offsets = np.cumsum([0] + [t.node_count for t in self.trees_[:-1]])
        self._roots = offsets.astype(np.int64)
        feature = np.concatenate([t.feature for t in self.trees_])
        leaf = feature == _LEAF
        own = np.arange(len(feature))
        self._feature = np.where(leaf, 0, feature)
        self._threshold = np.where(leaf, np.inf, np.concatenate([t.threshold for t in self.trees_]))
        left = np.concatenate([t.left + o for t, o in zip(self.trees_, offsets)])
        right = np.concatenate([t.right + o for t, o in zip(self.trees_, offsets)])
        self._left = np.where(leaf, own, left)
        self._right = np.where(leaf, own, right)
        self._value = np.concatenate([t.value for t in self.trees_])
        self._depth = max(t.depth for t in self.trees_)

    def _check_fitted(self):
        if not hasattr(self, "trees_"):
            raise NotFittedError("ExtraTreesSurrogate is not fitted yet; call fit first")

    def predict_all(self, X):
        """Per-tree predictions, shape (n_trees, n_points)."""
        self._check_fitted()
        X = check_points(X, self.n_features_in_)
        n = len(X)
        flat = X.T.ravel()  # feature-major so (feature, row) -> feature * n + row
        node = np.repeat(self._roots, n)
        rows = np.tile(np.arange(n), len(self._roots))
        for _ in range(self._depth):
            go_left = flat[self._feature[node] * n + rows] <= self._threshold[node]
            node = np.where(go_left, self._left[node], self._right[node])
        return self._value[node].reshape(len(self._roots), n)

    def predict(self, X, return_std=False):
        per_tree = self.predict_all(X)
        lo, hi = per_tree.min(axis=0), per_tree.max(axis=0)
        # the clip and the exact-agreement case keep rounding from leaking
        # outside the range of the tree predictions
        mean = np.clip(per_tree.mean(axis=0), lo, hi)
        agree = lo == hi
        mean[agree] = lo[agree]
        if not return_std:
            return mean
        if len(per_tree) == 1:
            return mean, np.zeros_like(mean)
        std = per_tree.std(axis=0, ddof=1)
        std[agree] = 0.0
        return mean, std

    def refit(self, X_new=None, y_new=None):
        """Return a new surrogate fitted on the stored rows plus the new ones."""
        self._check_fitted()
        X, y = self.X_, self.y_
        if X_new is not None and len(X_new):
            X_new = check_points(X_new, self.n_features_in_)
            X = np.vstack([X, X_new])
            y = np.concatenate([y, np.asarray(y_new, dtype=float).ravel()])
        return type(self)(**self.get_params()).fit(X, y)

    # -- checkpoints --------------------------------------------------------

    def to_dict(self):
        self._check_fitted()
        return {
            "checkpoint_version": CHECKPOINT_VERSION,
            "params": self.get_params(),
            "n_features": int(self.n_features_in_),
            "fit_seed": int(self.fit_seed_),
            "X": self.X_.tolist(),
            "y": self.y_.tolist(),
            "trees": [t.to_dict() for t in self.trees_],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('checkpoint_version')!r}")
        model = cls(**d["params"])
        model.trees_ = [Tree.from_dict(t) for t in d["trees"]]
        model.X_ = np.asarray(d["X"], dtype=float)
        model.y_ = np.asarray(d["y"], dtype=float)
        model.n_features_in_ = int(d["n_features"])
        model.fit_seed_ = int(d["fit_seed"])
        model._pack()
        return model

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")))


def load_checkpoint(path):
    return ExtraTreesSurrogate.from_dict(json.loads(Path(path).read_text()))
