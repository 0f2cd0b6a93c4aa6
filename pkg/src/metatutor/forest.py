"""Random forest on Gini impurity for early metacognitive-group prediction."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from ._config import config_to_dict, config_from_mapping
from .domain import MetaGroup, derived_rng

N_CLASSES = len(MetaGroup)
FOREST_FORMAT = "random-forest"
FOREST_VERSION = 1
_GAIN_TOL = 1e-12


@dataclass(frozen=True)
class LabeledSample:
    features: tuple[float, ...]
    label: MetaGroup

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", tuple(float(v) for v in self.features))
        object.__setattr__(self, "label", MetaGroup(self.label))
        if not all(math.isfinite(v) for v in self.features):
            raise ValueError("sample features must be finite")


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    min_leaf: int = 1
    features_per_split: int | None = None
    max_depth: int | None = None

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")

    def resolved_features(self, n_features: int) -> int:
        if self.features_per_split is None:
            return max(1, min(n_features, int(math.floor(math.sqrt(n_features) + 0.5))))
        return max(1, min(n_features, self.features_per_split))


def gini_impurity(counts: Sequence[int]) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 0).any():
        raise ValueError("class counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("gini impurity of an empty node")
    p = counts / total
    return float(1.0 - np.dot(p, p))


def _gini_rows(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1)
    p = counts / totals[:, None]
    return 1.0 - (p * p).sum(axis=1)


def best_split(x: np.ndarray, y: np.ndarray, features: Iterable[int],
               min_leaf: int = 1) -> tuple[int, float, float] | None:
    """Best (feature, threshold, gain) over midpoint thresholds of the candidate features.

    Ties go to the lowest feature index, then the lowest threshold. Samples with
    ``x[feature] <= threshold`` go left. Returns None when no split has positive gain.
    """
    n = len(y)
    if n < 2:
        return None
    onehot = np.zeros((n, N_CLASSES))
    onehot[np.arange(n), y] = 1.0
    parent = gini_impurity(onehot.sum(axis=0))
    best: tuple[int, float, float] | None = None
    best_gain = _GAIN_TOL
    for f in sorted(int(f) for f in features):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        left = np.cumsum(onehot[order], axis=0)[:-1]
        right = left[-1] + onehot[order[-1]] - left
        n_left = np.arange(1, n)
        ok = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not ok.any():
            continue
        weighted = (n_left * _gini_rows(left) + (n - n_left) * _gini_rows(right)) / n
        gains = np.where(ok, parent - weighted, -np.inf)
        top = gains.max()
        if top > best_gain + _GAIN_TOL:
            i = int(np.flatnonzero(gains >= top - _GAIN_TOL)[0])
            best_gain = float(top)
            best = (f, float((xs[i] + xs[i + 1]) / 2.0), float(top))
    return best


@dataclass
class Tree:
    """Flat node arena; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    def leaf_index(self, x: np.ndarray) -> int:
        node = 0
        while self.feature[node] >= 0:
            node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
        return node

    def proba(self, x: np.ndarray) -> np.ndarray:
        c = self.counts[self.leaf_index(x)]
        return c / c.sum()


def grow_tree(x: np.ndarray, y: np.ndarray, config: ForestConfig, rng: np.random.Generator) -> Tree:
    n_features = x.shape[1]
    k = config.resolved_features(n_features)
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx: np.ndarray) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=N_CLASSES))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if len(idx) < 2 * config.min_leaf or gini_impurity(counts[node]) == 0.0:
            continue
        if config.max_depth is not None and depth >= config.max_depth:
            continue
        candidates = rng.choice(n_features, size=k, replace=False)
        split = best_split(x[idx], y[idx], candidates, config.min_leaf)
        if split is None:
            continue
        f, thr, _ = split
        go_left = x[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node], right[node] = new_node(li), new_node(ri)
        # right pushed first so the left subtree is expanded first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(counts, dtype=np.int64).reshape(-1, N_CLASSES))


@dataclass
class Forest:
    trees: list[Tree]
    n_features: int
    config: ForestConfig
    seed: int
    in_bag: list[np.ndarray] = field(default_factory=list)
    n_train: int = 0


def canonical_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sort key making training independent of input sample order (first feature primary)."""
    keys = [y] + [x[:, j] for j in range(x.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def _as_arrays(data: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    if not data:
        raise ValueError("cannot train a forest on empty data")
    dims = {len(s.features) for s in data}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dimensions: {sorted(dims)}")
    x = np.array([s.features for s in data], dtype=np.float64)
    y = np.array([int(s.label) for s in data], dtype=np.int64)
    order = canonical_order(x, y)
    return x[order], y[order]


def _grow_one(args) -> tuple[Tree, np.ndarray]:
    x, y, config, seed, t = args
    rng = derived_rng(seed, "tree", t)
    in_bag = np.sort(rng.integers(0, len(y), size=len(y)))
    return grow_tree(x[in_bag], y[in_bag], config, rng), in_bag


def train_forest(data: Sequence[LabeledSample], config: ForestConfig = ForestConfig(), seed: int = 0,
                 workers: int = 1) -> Forest:
    """Bagged Gini trees; tree ``t`` draws from its own stream keyed on ``(seed, t)``."""
    x, y = _as_arrays(data)
    jobs = [(x, y, config, seed, t) for t in range(config.n_trees)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            grown = list(pool.map(_grow_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        grown = [_grow_one(job) for job in jobs]
    return Forest([g[0] for g in grown], x.shape[1], config, seed, [g[1] for g in grown], len(y))


def predict_proba(forest: Forest, features: Sequence[float]) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (forest.n_features,):
        raise ValueError(f"expected {forest.n_features} features, got {x.shape[0] if x.ndim == 1 else x.shape}")
    probs = np.mean([tree.proba(x) for tree in forest.trees], axis=0)
    return probs / probs.sum()


def predict(forest: Forest, features: Sequence[float]) -> tuple[MetaGroup, np.ndarray]:
    probs = predict_proba(forest, features)
    return MetaGroup(int(np.argmax(probs))), probs


def oob_accuracy(forest: Forest, data: Sequence[LabeledSample]) -> float:
    """Accuracy of each sample's out-of-bag sub-forest; samples in every bag are skipped."""
    if not forest.in_bag or forest.n_train != len(data):
        raise ValueError("forest has no bootstrap record for this data")
    x, y = _as_arrays(data)
    n = len(y)
    out_of_bag = np.ones((len(forest.trees), n), dtype=bool)
    for t, bag in enumerate(forest.in_bag):
        out_of_bag[t, bag] = False
    correct = scored = 0
    for i in range(n):
        trees = [forest.trees[t] for t in np.flatnonzero(out_of_bag[:, i])]
        if not trees:
            continue
        probs = np.mean([tree.proba(x[i]) for tree in trees], axis=0)
        correct += int(np.argmax(probs) == y[i])
        scored += 1
    return correct / scored if scored else math.nan


def accuracy(forest: Forest, data: Sequence[LabeledSample]) -> float:
    if not data:
        return math.nan
    hits = sum(predict(forest, s.features)[0] == s.label for s in data)
    return hits / len(data)


# --- persistence -------------------------------------------------------------------------


def forest_to_dict(forest: Forest) -> dict:
    return {
        "format": FOREST_FORMAT,
        "version": FOREST_VERSION,
        "n_features": forest.n_features,
        "classes": [g.name for g in MetaGroup],
        "seed": forest.seed,
        "n_train": forest.n_train,
        "config": config_to_dict(forest.config),
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "counts": t.counts.tolist(),
                "in_bag": bag.tolist(),
            }
            for t, bag in zip(forest.trees, forest.in_bag)
        ],
    }


def forest_from_dict(doc: dict) -> Forest:
    if doc.get("format") != FOREST_FORMAT or doc.get("version") != FOREST_VERSION:
        raise ValueError(f"unsupported forest document ({doc.get('format')!r} v{doc.get('version')!r})")
    if doc.get("classes") != [g.name for g in MetaGroup]:
        raise ValueError("forest class labels do not match the metacognitive groups")
    n_features = int(doc["n_features"])
    trees, bags = [], []
    for i, t in enumerate(doc["trees"]):
        tree = Tree(np.array(t["feature"], dtype=np.int64), np.array(t["threshold"], dtype=np.float64),
                    np.array(t["left"], dtype=np.int64), np.array(t["right"], dtype=np.int64),
                    np.array(t["counts"], dtype=np.int64).reshape(-1, N_CLASSES))
        n_nodes = len(tree.feature)
        internal = tree.feature >= 0
        if (tree.feature >= n_features).any():
            raise ValueError(f"tree {i} references a feature beyond n_features")
        if internal.any() and (
            (tree.left[internal] < 0).any() or (tree.right[internal] >= n_nodes).any()
            or (tree.left[internal] >= n_nodes).any() or (tree.right[internal] < 0).any()
        ):
            raise ValueError(f"tree {i} has dangling child references")
        if (tree.counts[~internal].sum(axis=1) == 0).any():
            raise ValueError(f"tree {i} has an empty leaf")
        trees.append(tree)
        bags.append(np.array(t.get("in_bag", []), dtype=np.int64))
    if not trees:
        raise ValueError("forest has no trees")
    config = config_from_mapping(ForestConfig, doc["config"])
    return Forest(trees, n_features, config, int(doc["seed"]), bags, int(doc.get("n_train", 0)))


def save_forest(forest: Forest, sink: IO) -> None:
    sink.write(json.dumps(forest_to_dict(forest), separators=(",", ":")) + "\n")


def load_forest(source: IO) -> Forest:
    try:
        doc = json.load(source)
    except json.JSONDecodeError as exc:
        raise ValueError(f"unreadable forest file: {exc}") from None
    return forest_from_dict(doc)


def save_labeled(samples: Iterable[LabeledSample], sink: IO) -> None:
    for s in samples:
        sink.write(json.dumps({"features": list(s.features), "label": s.label.name}) + "\n")


def load_labeled(source: IO) -> list[LabeledSample]:
    out = []
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(LabeledSample(tuple(obj["features"]), MetaGroup[obj["label"]]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"line {lineno}: bad labeled sample ({exc})") from None
    return out
