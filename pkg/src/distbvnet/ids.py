"""Isolation-forest intrusion detector used at cluster heads.

Trees are stored as flat node arrays so that a batch of flows can be pushed
through every tree at once with numpy indexing.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

BENIGN = "benign"
MALICIOUS = "malicious"
EULER_GAMMA = 0.5772156649

FOREST_FORMAT = "distbvnet-iforest"
FOREST_VERSION = 1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    subsample_size: int = 256
    threshold: float = 0.5
    # synthetic training set used by the simulator when no model is supplied
    n_features: int = 4
    training_samples: int = 2000
    training_contamination: float = 0.01


@dataclass(frozen=True)
class FlowFeatures:
    values: tuple[float, ...]
    label: Optional[str] = None


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: tuple[int, int, int, int]  # tp, fp, tn, fn

    def as_dict(self) -> dict:
        tp, fp, tn, fn = self.confusion
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "tp": tp, "fp": fp, "tn": tn, "fn": fn}


def avg_path_normalizer(n: int) -> float:
    """Average unsuccessful-search path length in a BST of ``n`` points."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * (math.log(n - 1) + EULER_GAMMA) - 2.0 * (n - 1) / n


def score_from_path_length(mean_path: float, n: int) -> float:
    return 2.0 ** (-mean_path / avg_path_normalizer(n))


@dataclass(frozen=True)
class IsolationTree:
    """One tree as parallel node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray
    height_limit: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf_only(self) -> bool:
        return self.n_nodes == 1


def _build_tree(sample: np.ndarray, rng: np.random.Generator, height_limit: int) -> IsolationTree:
    feature: list[int] = []
    split: list[float] = []
    left: list[int] = []
    right: list[int] = []
    size: list[int] = []
    depth: list[int] = []

    def new_node(d: int, n: int) -> int:
        feature.append(-1)
        split.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        depth.append(d)
        return len(feature) - 1

    root = new_node(0, len(sample))
    stack = [(root, sample)]
    while stack:
        node, pts = stack.pop()
        if depth[node] >= height_limit or len(pts) <= 1:
            continue
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        candidates = np.flatnonzero(hi > lo)
        if candidates.size == 0:
            continue
        q = int(candidates[rng.integers(candidates.size)])
        u = rng.random()
        while u == 0.0:
            u = rng.random()
        p = lo[q] + u * (hi[q] - lo[q])
        # guard against rounding up to hi, which would leave the right side empty
        if p >= hi[q]:
            p = np.nextafter(hi[q], lo[q])
        mask = pts[:, q] < p
        feature[node] = q
        split[node] = float(p)
        lpts, rpts = pts[mask], pts[~mask]
        left[node] = new_node(depth[node] + 1, len(lpts))
        right[node] = new_node(depth[node] + 1, len(rpts))
        stack.append((right[node], rpts))
        stack.append((left[node], lpts))

    return IsolationTree(
        feature=np.asarray(feature, dtype=np.int64),
        split=np.asarray(split, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        size=np.asarray(size, dtype=np.int64),
        depth=np.asarray(depth, dtype=np.int64),
        height_limit=height_limit,
    )


@dataclass(frozen=True)
class IsolationForest:
    trees: tuple[IsolationTree, ...]
    subsample_size: int
    dimensionality: int
    threshold: float = 0.5
    seed: int = 0
    _packed: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.trees:
            raise ValueError("forest needs at least one tree")
        if self.subsample_size < 2:
            raise ValueError("subsample_size must be >= 2")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        object.__setattr__(self, "_packed", self._pack())

    def _pack(self) -> dict:
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees[:-1]])
        feature = np.concatenate([t.feature for t in self.trees])
        split = np.concatenate([t.split for t in self.trees])
        left = np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(self.trees, offsets)])
        right = np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(self.trees, offsets)])
        size = np.concatenate([t.size for t in self.trees])
        depth = np.concatenate([t.depth for t in self.trees])
        leaf_len = depth + np.array([avg_path_normalizer(int(s)) for s in size])
        return {
            "roots": offsets.astype(np.int64),
            "feature": feature,
            "safe_feature": np.where(feature < 0, 0, feature),
            "split": split,
            "left": left,
            "right": right,
            "leaf_len": leaf_len,
            "max_depth": max(t.height_limit for t in self.trees),
        }

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def path_lengths(self, X) -> np.ndarray:
        """Adjusted path length of every row of ``X`` in every tree, shape (n, n_trees)."""
        X = _as_matrix(X)
        if X.shape[1] != self.dimensionality:
            raise ValueError(f"expected {self.dimensionality} features, got {X.shape[1]}")
        pk = self._packed
        rows = np.arange(X.shape[0])[:, None]
        node = np.broadcast_to(pk["roots"], (X.shape[0], self.n_trees)).copy()
        for _ in range(pk["max_depth"]):
            internal = pk["feature"][node] >= 0
            if not internal.any():
                break
            x = X[rows, pk["safe_feature"][node]]
            nxt = np.where(x < pk["split"][node], pk["left"][node], pk["right"][node])
            node = np.where(internal, nxt, node)
        return pk["leaf_len"][node]

    def score_samples(self, X) -> np.ndarray:
        mean = self.path_lengths(X).mean(axis=1)
        return 2.0 ** (-mean / avg_path_normalizer(self.subsample_size))

    def predict(self, X) -> list[str]:
        return [MALICIOUS if s >= self.threshold else BENIGN for s in self.score_samples(X)]


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        X = np.asarray(data, dtype=np.float64)
    else:
        rows = [d.values if isinstance(d, FlowFeatures) else d for d in data]
        if not rows:
            raise ValueError("no flows given")
        lengths = {len(r) for r in rows}
        if len(lengths) != 1:
            raise ValueError(f"inconsistent dimensionality: {sorted(lengths)}")
        X = np.asarray(rows, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError("flows must form a 2-D array")
    if not np.isfinite(X).all():
        raise ValueError("flow features must be finite")
    return X


def fit(data, cfg: ForestConfig = ForestConfig(), seed: int = 0) -> IsolationForest:
    """Train a forest; each tree uses its own generator derived from ``(seed, tree_index)``."""
    X = _as_matrix(data)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two flows to train")
    psi = min(cfg.subsample_size, n)
    height_limit = int(math.ceil(math.log2(psi)))
    trees = []
    for t in range(cfg.n_trees):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t,)))
        idx = rng.choice(n, size=psi, replace=False)
        trees.append(_build_tree(X[idx], rng, height_limit))
    return IsolationForest(tuple(trees), psi, X.shape[1], cfg.threshold, seed)


def anomaly_score(forest: IsolationForest, x) -> float:
    values = x.values if isinstance(x, FlowFeatures) else x
    return float(forest.score_samples(np.asarray([values], dtype=np.float64))[0])


def classify(forest: IsolationForest, x) -> str:
    # ties go to malicious: suspicious traffic is held until cleared
    return MALICIOUS if anomaly_score(forest, x) >= forest.threshold else BENIGN


def evaluate(preds: Sequence[str], labels: Sequence[str]) -> EvalReport:
    """Confusion-matrix metrics in percent with malicious as the positive class."""
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    if not preds:
        raise ValueError("nothing to evaluate")
    tp = fp = tn = fn = 0
    for p, y in zip(preds, labels):
        if p == MALICIOUS:
            if y == MALICIOUS:
                tp += 1
            else:
                fp += 1
        elif y == MALICIOUS:
            fn += 1
        else:
            tn += 1
    total = tp + fp + tn + fn
    accuracy = 100.0 * (tp + tn) / total
    precision = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    recall = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return EvalReport(accuracy, precision, recall, f1, (tp, fp, tn, fn))


# -- data -------------------------------------------------------------------

@dataclass(frozen=True)
class FlowSchema:
    features: tuple[str, ...]
    label: Optional[str] = None
    benign_value: str = "Benign"


def _label_of(raw: str, benign_value: str) -> str:
    return BENIGN if raw.strip().lower() == benign_value.lower() else MALICIOUS


def ingest_flows(path: str | Path, schema: FlowSchema) -> tuple[list[FlowFeatures], int]:
    """Read a headed CSV into feature vectors; rows with bad mapped cells are dropped and counted."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        wanted = list(schema.features) + ([schema.label] if schema.label else [])
        missing = [c for c in wanted if c not in header]
        if missing:
            raise KeyError(f"columns not in {path.name}: {', '.join(missing)}")
        flows: list[FlowFeatures] = []
        dropped = 0
        for row in reader:
            try:
                values = tuple(float(row[c]) for c in schema.features)
            except (TypeError, ValueError):
                dropped += 1
                continue
            if not all(math.isfinite(v) for v in values):
                dropped += 1
                continue
            label = _label_of(row[schema.label] or "", schema.benign_value) if schema.label else None
            flows.append(FlowFeatures(values, label))
    return flows, dropped


def synthetic_inliers(rng: np.random.Generator, n: int, dim: int, scale: float = 1.0,
                      radius: Optional[float] = None) -> np.ndarray:
    """Gaussian inliers; with ``radius`` set, draws outside that norm are rejected."""
    if radius is None:
        return rng.normal(0.0, scale, size=(n, dim))
    out = np.empty((n, dim))
    k = 0
    while k < n:
        batch = rng.normal(0.0, scale, size=(2 * (n - k) + 8, dim))
        batch = batch[np.linalg.norm(batch, axis=1) <= radius * scale][: n - k]
        out[k:k + len(batch)] = batch
        k += len(batch)
    return out


def synthetic_outliers(rng: np.random.Generator, n: int, dim: int,
                       inner: float = 6.0, outer: float = 12.0) -> np.ndarray:
    """Uniform points in the box of half-width ``outer`` lying outside half-width ``inner``."""
    out = np.empty((n, dim))
    k = 0
    while k < n:
        p = rng.uniform(-outer, outer, size=dim)
        if np.abs(p).max() >= inner:
            out[k] = p
            k += 1
    return out


def synthetic_flows(n_inliers: int = 990, n_outliers: int = 10, dim: int = 2,
                    seed: int = 42, scale: float = 0.3) -> tuple[np.ndarray, list[str]]:
    """Tight Gaussian inliers plus far uniform outliers, outliers last."""
    rng = np.random.default_rng(seed)
    X = np.vstack([synthetic_inliers(rng, n_inliers, dim, scale), synthetic_outliers(rng, n_outliers, dim)])
    return X, [BENIGN] * n_inliers + [MALICIOUS] * n_outliers


# -- persistence ------------------------------------------------------------

def forest_to_dict(forest: IsolationForest) -> dict:
    return {
        "format": FOREST_FORMAT,
        "version": FOREST_VERSION,
        "subsample_size": forest.subsample_size,
        "dimensionality": forest.dimensionality,
        "threshold": forest.threshold,
        "seed": forest.seed,
        "trees": [
            {
                "height_limit": t.height_limit,
                "feature": t.feature.tolist(),
                "split": t.split.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "size": t.size.tolist(),
                "depth": t.depth.tolist(),
            }
            for t in forest.trees
        ],
    }


def forest_from_dict(doc: dict) -> IsolationForest:
    if doc.get("format") != FOREST_FORMAT or doc.get("version") != FOREST_VERSION:
        raise ValueError(f"not a {FOREST_FORMAT} v{FOREST_VERSION} document")
    trees = tuple(
        IsolationTree(
            feature=np.asarray(t["feature"], dtype=np.int64),
            split=np.asarray(t["split"], dtype=np.float64),
            left=np.asarray(t["left"], dtype=np.int64),
            right=np.asarray(t["right"], dtype=np.int64),
            size=np.asarray(t["size"], dtype=np.int64),
            depth=np.asarray(t["depth"], dtype=np.int64),
            height_limit=int(t["height_limit"]),
        )
        for t in doc["trees"]
    )
    return IsolationForest(trees, int(doc["subsample_size"]), int(doc["dimensionality"]),
                           float(doc["threshold"]), int(doc["seed"]))


def save_forest(forest: IsolationForest, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(forest_to_dict(forest), fh, separators=(",", ":"))
        fh.write("\n")


def load_forest(path: str | Path) -> IsolationForest:
    with open(path) as fh:
        return forest_from_dict(json.load(fh))


def write_flows_csv(path: str | Path, X: np.ndarray, labels: Iterable[str],
                    columns: Optional[Sequence[str]] = None) -> None:
    columns = list(columns or [f"f{i}" for i in range(X.shape[1])])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns + ["Label"])
        for row, lab in zip(X, labels):
            w.writerow([repr(float(v)) for v in row] + ["Benign" if lab == BENIGN else "Malicious"])
