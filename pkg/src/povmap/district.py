"""District-level fusion and poverty regression.

A district feature is the concatenation of the mean tile embeddings from
the morphological, accessibility and economic encoders (in that order).
The regressor is a from-scratch random forest of CART trees: bootstrap
samples, variance-reduction splits over a random feature subset per node,
leaf value = mean.  Split search iterates features in ascending index and
thresholds in ascending order, accepting only strict improvements, which
pins tie-breaking and makes fits bit-reproducible from the seed.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoder import encode_patches, read_param_blob, write_param_blob
from .errors import DomainError, StateError, ValidationError
from .rng import substream
from .training import Checkpoint, TileStack

N_TREES = 50
MIN_SAMPLES_LEAF = 2
N_REPETITIONS = 50
TEST_FRACTION = 0.2

__all__ = [
    "DistrictFeature",
    "RegressionTree",
    "ForestModel",
    "SplitPlan",
    "pool_districts",
    "fit_tree",
    "fit_forest",
    "predict",
    "make_splits",
    "save_forest",
    "load_forest",
    "export_features_csv",
]


@dataclass
class DistrictFeature:
    district_id: int
    r: np.ndarray
    n_tiles: int


def _encode_all(stack: TileStack, ckpt: Checkpoint, batch: int = 64) -> np.ndarray:
    cfg = ckpt.encoder.config
    out = np.empty((len(stack), cfg.embed_dim))
    for lo in range(0, len(stack), batch):
        idx = np.arange(lo, min(lo + batch, len(stack)))
        emb, _, _ = encode_patches(ckpt.encoder, stack.patches(idx, cfg.patch_px, np.float64))
        out[idx] = np.atleast_2d(emb)
    return out


def pool_districts(
    stack: TileStack,
    morph: Checkpoint,
    access: Checkpoint,
    econ: Checkpoint,
    expected_ids: list[int] | None = None,
) -> list[DistrictFeature]:
    """Mean tile embedding per district per encoder, concatenated
    (morphological, accessibility, economic).

    Districts listed in ``expected_ids`` but holding no tiles are excluded
    with a warning.
    """
    embs = [_encode_all(stack, ck) for ck in (morph, access, econ)]
    by_district: dict[int, list[int]] = {}
    for i, did in enumerate(stack.district_ids):
        if did is not None:
            by_district.setdefault(did, []).append(i)
    if expected_ids is not None:
        for did in sorted(set(expected_ids) - set(by_district)):
            warnings.warn(f"district {did} has no tiles; excluded from pooling")
    feats = []
    for did in sorted(by_district):
        rows = np.array(by_district[did])
        r = np.concatenate([e[rows].mean(axis=0) for e in embs])
        feats.append(DistrictFeature(did, r, len(rows)))
    return feats


# ---------------------------------------------------------------------------
# CART regression tree and forest


@dataclass
class RegressionTree:
    # Flat node arrays; children are -1 at leaves.
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    threshold: np.ndarray = field(default_factory=lambda: np.zeros(0))
    left: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    right: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    value: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def predict_one(self, x: np.ndarray) -> float:
        node = 0
        while self.left[node] != -1:
            node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
        return float(self.value[node])

    def predict(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(xs)
        return np.array([self.predict_one(x) for x in xs])


def _best_split(x_col: np.ndarray, y: np.ndarray):
    """Best (sse, threshold) for one feature; None when no valid split."""
    order = np.argsort(x_col, kind="stable")
    xs, ys = x_col[order], y[order]
    n = len(ys)
    csum = np.cumsum(ys)
    csq = np.cumsum(ys * ys)
    total, total_sq = csum[-1], csq[-1]
    best = None
    for i in range(MIN_SAMPLES_LEAF, n - MIN_SAMPLES_LEAF + 1):
        if xs[i - 1] == xs[i]:
            continue
        ls, lsq = csum[i - 1], csq[i - 1]
        rs, rsq = total - ls, total_sq - lsq
        sse = (lsq - ls * ls / i) + (rsq - rs * rs / (n - i))
        if best is None or sse < best[0]:
            best = (sse, (xs[i - 1] + xs[i]) / 2.0)
    return best


def _grow(x: np.ndarray, y: np.ndarray, max_features: int, rng, tree: dict) -> int:
    node = len(tree["feature"])
    for key in tree:
        tree[key].append(0)
    n = len(y)
    if n < 2 * MIN_SAMPLES_LEAF or np.all(y == y[0]):
        tree["feature"][node] = -1
        tree["threshold"][node] = 0.0
        tree["left"][node] = tree["right"][node] = -1
        tree["value"][node] = float(y.mean())
        return node

    subset = np.sort(rng.choice(x.shape[1], size=min(max_features, x.shape[1]), replace=False))
    best = None
    for f in subset:
        cand = _best_split(x[:, f], y)
        if cand is not None and (best is None or cand[0] < best[0]):
            best = (cand[0], int(f), cand[1])
    if best is None:
        tree["feature"][node] = -1
        tree["threshold"][node] = 0.0
        tree["left"][node] = tree["right"][node] = -1
        tree["value"][node] = float(y.mean())
        return node

    _, f, thr = best
    mask = x[:, f] <= thr
    tree["feature"][node] = f
    tree["threshold"][node] = thr
    tree["value"][node] = float(y.mean())
    tree["left"][node] = _grow(x[mask], y[mask], max_features, rng, tree)
    tree["right"][node] = _grow(x[~mask], y[~mask], max_features, rng, tree)
    return node


def fit_tree(x: np.ndarray, y: np.ndarray, max_features: int | None = None, seed: int = 0) -> RegressionTree:
    """Single CART regression tree (no bootstrap)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y) or len(y) == 0:
        raise DomainError("bad training matrix shapes")
    max_features = x.shape[1] if max_features is None else max_features
    rng = substream(seed, "tree")
    tree: dict = {"feature": [], "threshold": [], "left": [], "right": [], "value": []}
    _grow(x, y, max_features, rng, tree)
    return RegressionTree(
        np.array(tree["feature"], dtype=np.int64),
        np.array(tree["threshold"]),
        np.array(tree["left"], dtype=np.int64),
        np.array(tree["right"], dtype=np.int64),
        np.array(tree["value"]),
    )


@dataclass
class ForestModel:
    trees: list[RegressionTree] = field(default_factory=list)
    tree_seeds: list[int] = field(default_factory=list)
    bootstrap_indices: list[np.ndarray] = field(default_factory=list)
    max_features: int = 0


def fit_forest(x: np.ndarray, y: np.ndarray, seed: int, n_trees: int = N_TREES) -> ForestModel:
    """Random forest: bootstrap per tree, max_features = ceil(D/3)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise DomainError("bad training matrix shapes")
    if len(y) < 2:
        raise DomainError("need at least 2 training districts")
    max_features = math.ceil(x.shape[1] / 3)
    model = ForestModel(max_features=max_features)
    for t in range(n_trees):
        rng = substream(seed, "forest.tree", t)
        idx = rng.integers(0, len(y), len(y))
        tree: dict = {"feature": [], "threshold": [], "left": [], "right": [], "value": []}
        _grow(x[idx], y[idx], max_features, rng, tree)
        model.trees.append(
            RegressionTree(
                np.array(tree["feature"], dtype=np.int64),
                np.array(tree["threshold"]),
                np.array(tree["left"], dtype=np.int64),
                np.array(tree["right"], dtype=np.int64),
                np.array(tree["value"]),
            )
        )
        model.tree_seeds.append(t)
        model.bootstrap_indices.append(idx)
    return model


def predict(model: ForestModel, features: np.ndarray) -> np.ndarray:
    """Mean of per-tree predictions, accumulated in tree-index order."""
    if not model.trees:
        raise StateError("forest has not been fitted")
    xs = np.atleast_2d(np.asarray(features, dtype=np.float64))
    acc = model.trees[0].predict(xs)
    for tree in model.trees[1:]:
        acc = acc + tree.predict(xs)
    return acc / len(model.trees)


# ---------------------------------------------------------------------------
# split protocol


@dataclass
class SplitPlan:
    seed: int
    repetitions: list[tuple[list[int], list[int]]]  # (train ids, test ids)


def make_splits(district_ids: list[int], seed: int, n_repetitions: int = N_REPETITIONS) -> SplitPlan:
    """Seeded 80/20 splits, repeated; test size = round(0.2 N), at least 1."""
    ids = sorted(district_ids)
    if len(ids) < 5:
        raise DomainError("need at least 5 districts for the split protocol")
    n_test = max(1, int(round(TEST_FRACTION * len(ids))))
    rng = substream(seed, "splits")
    reps = []
    for _ in range(n_repetitions):
        perm = rng.permutation(len(ids))
        test = sorted(ids[i] for i in perm[:n_test])
        train = sorted(ids[i] for i in perm[n_test:])
        reps.append((train, test))
    return SplitPlan(seed, reps)


# ---------------------------------------------------------------------------
# persistence and export


def save_forest(model: ForestModel, path: str) -> None:
    arrays = []
    for i, tree in enumerate(model.trees):
        arrays += [
            (f"t{i}.feature", tree.feature.astype(np.float64)),
            (f"t{i}.threshold", tree.threshold),
            (f"t{i}.left", tree.left.astype(np.float64)),
            (f"t{i}.right", tree.right.astype(np.float64)),
            (f"t{i}.value", tree.value),
            (f"t{i}.bootstrap", model.bootstrap_indices[i].astype(np.float64)),
        ]
    meta = {"kind": "forest", "n_trees": len(model.trees), "max_features": model.max_features,
            "tree_seeds": model.tree_seeds}
    with open(path, "wb") as fh:
        fh.write(write_param_blob(meta, arrays))


def load_forest(path: str) -> ForestModel:
    with open(path, "rb") as fh:
        header, arrays = read_param_blob(fh.read())
    if header.get("kind") != "forest":
        raise ValidationError("not a forest model file")
    model = ForestModel(max_features=header["max_features"], tree_seeds=header["tree_seeds"])
    for i in range(header["n_trees"]):
        model.trees.append(
            RegressionTree(
                arrays[f"t{i}.feature"].astype(np.int64),
                arrays[f"t{i}.threshold"],
                arrays[f"t{i}.left"].astype(np.int64),
                arrays[f"t{i}.right"].astype(np.int64),
                arrays[f"t{i}.value"],
            )
        )
        model.bootstrap_indices.append(arrays[f"t{i}.bootstrap"].astype(np.int64))
    return model


def export_features_csv(features: list[DistrictFeature], path: str | os.PathLike) -> None:
    with open(os.fspath(path), "w", newline="") as fh:
        w = csv.writer(fh)
        dim = features[0].r.shape[0] if features else 0
        w.writerow(["district_id", "n_tiles"] + [f"r_{i}" for i in range(dim)])
        for f in features:
            w.writerow([f.district_id, f.n_tiles] + [repr(float(v)) for v in f.r])
