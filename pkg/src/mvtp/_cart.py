"""Regression trees and bagged forests (variance-reduction CART) compiled with numba.

Randomness comes from a splitmix64 stream seeded per tree, so a forest is
bit-identical for a given seed regardless of how it is scheduled.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _next(state):
    state[0] = state[0] + np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _randint(state, n):
    return np.int64(_next(state) % np.uint64(n))


@njit(cache=True)
def _fit_tree(X, y, rows, max_depth, min_leaf, mtry, seed):
    n_rows = rows.shape[0]
    m = X.shape[1]
    cap = 2 * n_rows + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    state = np.empty(1, np.uint64)
    state[0] = np.uint64(seed)

    idx = rows.copy()
    tmp = np.empty(n_rows, np.int64)
    feats = np.arange(m)

    stack_node = np.empty(cap, np.int64)
    stack_start = np.empty(cap, np.int64)
    stack_end = np.empty(cap, np.int64)
    stack_depth = np.empty(cap, np.int64)
    top = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = n_rows
    stack_depth[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]
        cnt = end - start

        total = 0.0
        for i in range(start, end):
            total += y[idx[i]]
        mean = total / cnt
        value[node] = mean
        sse = 0.0
        for i in range(start, end):
            r = y[idx[i]] - mean
            sse += r * r
        if depth >= max_depth or cnt < 2 * min_leaf or sse <= 1e-12 * (1.0 + total * total / cnt):
            continue

        # partial Fisher-Yates draw of mtry candidate features
        for j in range(mtry):
            r = j + _randint(state, m - j)
            t = feats[j]
            feats[j] = feats[r]
            feats[r] = t

        best_score = total * total / cnt
        best_feat = -1
        best_thr = 0.0
        xs = np.empty(cnt)
        ys = np.empty(cnt)
        for jf in range(mtry):
            f = feats[jf]
            for i in range(cnt):
                xs[i] = X[idx[start + i], f]
            order = np.argsort(xs, kind="mergesort")
            for i in range(cnt):
                ys[i] = y[idx[start + order[i]]]
            s_left = 0.0
            for i in range(cnt - min_leaf):
                s_left += ys[i]
                n_left = i + 1
                if n_left < min_leaf:
                    continue
                lo = xs[order[i]]
                hi = xs[order[i + 1]]
                if not lo < hi:
                    continue
                s_right = total - s_left
                score = s_left * s_left / n_left + s_right * s_right / (cnt - n_left)
                if score > best_score + 1e-12 * abs(best_score):
                    best_score = score
                    best_feat = f
                    best_thr = 0.5 * (lo + hi)
                    if not best_thr < hi:
                        best_thr = lo
        if best_feat < 0:
            continue

        # stable partition of idx[start:end]
        nl = 0
        for i in range(start, end):
            if X[idx[i], best_feat] <= best_thr:
                tmp[nl] = idx[i]
                nl += 1
        nr = nl
        for i in range(start, end):
            if not X[idx[i], best_feat] <= best_thr:
                tmp[nr] = idx[i]
                nr += 1
        for i in range(cnt):
            idx[start + i] = tmp[i]

        feature[node] = best_feat
        threshold[node] = best_thr
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        stack_node[top] = rnode
        stack_start[top] = start + nl
        stack_end[top] = end
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = lnode
        stack_start[top] = start
        stack_end[top] = start + nl
        stack_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy())


@njit(cache=True)
def _bootstrap_rows(n, seed):
    state = np.empty(1, np.uint64)
    state[0] = np.uint64(seed) ^ np.uint64(0x5DEECE66D)
    rows = np.empty(n, np.int64)
    for i in range(n):
        rows[i] = _randint(state, n)
    return rows


@njit(cache=True)
def _predict(feature, threshold, left, right, value, offsets, X):
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while feature[base + node] >= 0:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            acc += value[base + node]
        out[i] = acc / n_trees
    return out


class Forest:
    """Bagged regression trees with per-node feature subsampling."""

    def __init__(self, n_trees=200, max_depth=12, min_leaf=5, max_features=None,
                 bootstrap=True, seed=0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.seed = seed

    def fit(self, X, y):
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.float64)
        n, m = X.shape
        mtry = self.max_features
        if mtry is None:
            mtry = max(1, int(np.sqrt(m)))
        mtry = int(min(max(mtry, 1), m)) if m else 0
        seeds = np.random.SeedSequence(self.seed).generate_state(self.n_trees, dtype=np.uint64)
        parts = []
        for t in range(self.n_trees):
            rows = _bootstrap_rows(n, seeds[t]) if self.bootstrap else np.arange(n, dtype=np.int64)
            if m == 0:
                parts.append((np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]),
                              np.array([y[rows].mean()])))
                continue
            parts.append(_fit_tree(X, y, rows, self.max_depth, self.min_leaf, mtry, seeds[t]))
        sizes = np.array([len(p[0]) for p in parts])
        self.offsets_ = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.feature_ = np.concatenate([p[0] for p in parts]).astype(np.int64)
        self.threshold_ = np.concatenate([p[1] for p in parts])
        self.left_ = np.concatenate([p[2] for p in parts]).astype(np.int64)
        self.right_ = np.concatenate([p[3] for p in parts]).astype(np.int64)
        self.value_ = np.concatenate([p[4] for p in parts])
        self.n_features_ = m
        return self

    def predict(self, X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.shape[0] == 0:
            return np.zeros(0)
        return _predict(self.feature_, self.threshold_, self.left_, self.right_, self.value_,
                        self.offsets_, X)
