"""Encoding time regression: gradient boosted trees under absolute-error loss.

One ensemble is trained per (resolution, preset) pair. An ensemble maps the
feature vector ``[E, h, L, log(r), log(b)]`` to wall-clock encoding seconds.

Boosting follows least-absolute-deviation gradient boosting: every round fits
a least-squares regression tree to the signs of the current residuals, then
replaces each leaf value with the median residual of the rows it holds.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .utils import DatasetError, InputError, ModelLookupError, TrainingError

logger = logging.getLogger("CAPS")

FEATURE_NAMES = ("E", "h", "L", "log_r", "log_b")
N_FEATURES = len(FEATURE_NAMES)
MIN_PREDICTION = 0.001
DATASET_COLUMNS = ("E", "h", "L", "width", "bitrate_kbps", "preset", "time_seconds")

LEAF = -1


@dataclass(frozen=True)
class FeatureVector:
    """Model input ``[E, h, L, log(r), log(b)]``.

    ``log_r`` is the natural log of the encoding width in pixels and ``log_b``
    the natural log of the target bitrate in kbps.
    """

    E: float
    h: float
    L: float
    log_r: float
    log_b: float

    def __post_init__(self) -> None:
        values = self.as_tuple()
        if not all(math.isfinite(v) for v in values):
            raise InputError(f"Feature vector must be finite, got {values}")
        if not self.log_r > 0:
            raise InputError(f"log(r) must be positive, got {self.log_r}")

    @classmethod
    def build(cls, E: float, h: float, L: float, width: int, bitrate_kbps: float) -> "FeatureVector":
        """Feature vector for a segment encoded at ``width`` and ``bitrate_kbps``."""
        return cls(E, h, L, math.log(width), math.log(bitrate_kbps))

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (self.E, self.h, self.L, self.log_r, self.log_b)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)


@dataclass(frozen=True)
class Hyperparams:
    """Boosting hyperparameters."""

    n_trees: int = 200
    max_depth: int = 4
    learning_rate: float = 0.1
    min_samples_leaf: int = 5
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 0 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise TrainingError(f"Invalid tree hyperparameters: {self}")
        if not 0 < self.learning_rate <= 1:
            raise TrainingError(f"Learning rate must lie in (0, 1], got {self.learning_rate}")
        if not 0 < self.subsample <= 1:
            raise TrainingError(f"Subsample fraction must lie in (0, 1], got {self.subsample}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Binary regression tree stored as parallel node arrays.

    Node 0 is the root. Split nodes send ``x[feature] <= threshold`` to
    ``left`` and everything else to ``right``; leaf nodes have
    ``feature == -1`` and carry ``value`` in seconds.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def node_count(self) -> int:
        return int(self.feature.shape[0])

    def leaf_for(self, x: np.ndarray) -> int:
        node = 0
        while self.feature[node] != LEAF:
            if x[self.feature[node]] <= self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return node

    def evaluate(self, x: np.ndarray) -> float:
        return float(self.value[self.leaf_for(x)])

    def evaluate_many(self, X: np.ndarray) -> np.ndarray:
        nodes = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            features = self.feature[nodes]
            active = np.nonzero(features != LEAF)[0]
            if active.size == 0:
                return self.value[nodes]
            current = nodes[active]
            go_left = X[active, features[active]] <= self.threshold[current]
            nodes[active] = np.where(go_left, self.left[current], self.right[current])


@dataclass(frozen=True, eq=False)
class TreeEnsemble:
    """``prediction = base_score + learning_rate * sum(tree outputs)``."""

    base_score: float
    trees: Tuple[RegressionTree, ...]
    learning_rate: float
    hyperparams: Hyperparams = field(default_factory=Hyperparams)


def predict(ensemble: TreeEnsemble, fv: FeatureVector) -> float:
    """Predicted encoding time in seconds, never below ``MIN_PREDICTION``."""
    x = fv.as_array()
    total = 0.0
    for tree in ensemble.trees:
        total += tree.evaluate(x)
    return max(MIN_PREDICTION, ensemble.base_score + ensemble.learning_rate * total)


# =============================================================================
# Training
# =============================================================================


class _TreeBuilder:
    """Exact greedy least-squares tree on fixed pseudo-residuals."""

    def __init__(self, X: np.ndarray, targets: np.ndarray, residuals: np.ndarray, params: Hyperparams):
        self.X = X
        self.targets = targets
        self.residuals = residuals
        self.params = params
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.value: List[float] = []

    def _new_node(self) -> int:
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(0.0)
        return len(self.feature) - 1

    def _best_split(self, rows: np.ndarray) -> Optional[Tuple[int, float, np.ndarray]]:
        """Best (feature, threshold, left mask) by squared-error reduction.

        Ties keep the lowest feature index, then the lowest threshold.
        """
        min_leaf = self.params.min_samples_leaf
        n = rows.shape[0]
        if n < 2 * min_leaf:
            return None

        g = self.targets[rows]
        total = float(np.sum(g))
        parent = total * total / n
        best_gain = 0.0
        best: Optional[Tuple[int, float]] = None

        for j in range(self.X.shape[1]):
            column = self.X[rows, j]
            order = np.argsort(column, kind="mergesort")
            xs = column[order]
            prefix = np.cumsum(g[order])

            # candidate cut after position i (left holds i + 1 rows)
            cut = np.arange(min_leaf - 1, n - min_leaf)
            if cut.size == 0:
                continue
            cut = cut[xs[cut] < xs[cut + 1]]
            if cut.size == 0:
                continue

            n_left = cut + 1.0
            n_right = n - n_left
            s_left = prefix[cut]
            s_right = total - s_left
            gain = s_left * s_left / n_left + s_right * s_right / n_right - parent

            k = int(np.argmax(gain))
            if gain[k] > best_gain:
                best_gain = float(gain[k])
                i = cut[k]
                best = (j, float((xs[i] + xs[i + 1]) / 2.0))

        if best is None or best_gain <= 1e-12:
            return None
        j, threshold = best
        return j, threshold, self.X[rows, j] <= threshold

    def grow(self, rows: np.ndarray, depth: int) -> int:
        node = self._new_node()
        split = self._best_split(rows) if depth < self.params.max_depth else None
        if split is None:
            self.value[node] = float(np.median(self.residuals[rows]))
            return node

        j, threshold, mask = split
        self.feature[node] = j
        self.threshold[node] = threshold
        left = self.grow(rows[mask], depth + 1)
        right = self.grow(rows[~mask], depth + 1)
        self.left[node] = left
        self.right[node] = right
        return node

    def build(self, rows: np.ndarray) -> RegressionTree:
        self.grow(rows, 0)
        return RegressionTree(
            feature=np.array(self.feature, dtype=np.int64),
            threshold=np.array(self.threshold, dtype=np.float64),
            left=np.array(self.left, dtype=np.int64),
            right=np.array(self.right, dtype=np.int64),
            value=np.array(self.value, dtype=np.float64),
        )


def train_ensemble(
    rows: Sequence[Tuple[FeatureVector, float]],
    hyperparams: Optional[Hyperparams] = None,
    group: str = "",
) -> TreeEnsemble:
    """Fit a boosted ensemble under absolute-error loss.

    Args:
        rows: (feature vector, target seconds) pairs
        hyperparams: Boosting hyperparameters
        group: Label used in error messages, e.g. ``r=1080,p=3``

    Returns:
        Trained ensemble

    Raises:
        TrainingError: If there are too few rows or invalid targets
    """
    params = hyperparams or Hyperparams()
    label = f" for {group}" if group else ""

    if len(rows) < 2 * params.min_samples_leaf:
        raise TrainingError(
            f"Too few rows{label}: {len(rows)} < {2 * params.min_samples_leaf}"
        )

    X = np.array([fv.as_tuple() for fv, _ in rows], dtype=np.float64)
    y = np.array([t for _, t in rows], dtype=np.float64)
    if not np.all(np.isfinite(y)) or np.any(y <= 0):
        raise TrainingError(f"Targets must be positive and finite{label}")

    base = float(np.median(y))
    current = np.full(y.shape[0], base)
    rng = np.random.default_rng(params.seed)
    all_rows = np.arange(y.shape[0])
    trees: List[RegressionTree] = []

    for _ in range(params.n_trees):
        residuals = y - current
        signs = np.sign(residuals)
        if not np.any(signs):
            break

        if params.subsample < 1.0:
            size = max(2 * params.min_samples_leaf, int(round(params.subsample * y.shape[0])))
            sample = np.sort(rng.choice(all_rows, size=min(size, y.shape[0]), replace=False))
        else:
            sample = all_rows

        tree = _TreeBuilder(X, signs, residuals, params).build(sample)
        trees.append(tree)
        current = current + params.learning_rate * tree.evaluate_many(X)

    logger.debug(f"Trained{label}: {len(trees)} trees, base {base:.4f}s")
    return TreeEnsemble(
        base_score=base,
        trees=tuple(trees),
        learning_rate=params.learning_rate,
        hyperparams=params,
    )


# =============================================================================
# Model sets
# =============================================================================


@dataclass(frozen=True, eq=False)
class ModelSet:
    """Ensembles keyed by (resolution width, preset).

    Attributes:
        models: (width, preset) -> ensemble
        preset_range: Inclusive (p_min, p_max)
        resolutions: Supported widths, ascending
        framerate: Target encoding speed f the models were trained for
        threads: CPU threads per encoding instance c
    """

    models: Mapping[Tuple[int, int], TreeEnsemble]
    preset_range: Tuple[int, int]
    resolutions: Tuple[int, ...]
    framerate: Optional[float] = None
    threads: Optional[int] = None

    def __post_init__(self) -> None:
        p_min, p_max = self.preset_range
        expected = {(r, p) for r in self.resolutions for p in range(p_min, p_max + 1)}
        if set(self.models) != expected:
            missing = sorted(expected - set(self.models))
            extra = sorted(set(self.models) - expected)
            raise TrainingError(
                f"Model set does not match its grid (missing {missing}, unexpected {extra})"
            )

    @property
    def presets(self) -> range:
        return range(self.preset_range[0], self.preset_range[1] + 1)

    def predict_all_presets(self, fv: FeatureVector, r: int) -> Dict[int, float]:
        return predict_all_presets(self, fv, r)


def predict_all_presets(models: ModelSet, fv: FeatureVector, r: int) -> Dict[int, float]:
    """Predicted time for every preset of ``models`` at resolution ``r``.

    Raises:
        ModelLookupError: If ``r`` is not a supported resolution
    """
    if r not in models.resolutions:
        raise ModelLookupError(
            f"No models for resolution {r}; supported resolutions: {list(models.resolutions)}"
        )
    return {p: predict(models.models[(r, p)], fv) for p in models.presets}


@dataclass(frozen=True)
class TrainingRow:
    """One observed encode."""

    features: FeatureVector
    resolution: int
    preset: int
    observed_time: float
    segment_id: str = ""


@dataclass
class TrainingDataset:
    """Observed encoding times grouped for per-(resolution, preset) training."""

    rows: List[TrainingRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def groups(self) -> Dict[Tuple[int, int], List[Tuple[FeatureVector, float]]]:
        grouped: Dict[Tuple[int, int], List[Tuple[FeatureVector, float]]] = {}
        for row in self.rows:
            grouped.setdefault((row.resolution, row.preset), []).append(
                (row.features, row.observed_time)
            )
        return grouped

    def split(self, holdout: float, seed: int = 0) -> Tuple["TrainingDataset", "TrainingDataset"]:
        """Train/test split by segment id, so one segment never lands in both."""
        if not 0 < holdout < 1:
            return self, TrainingDataset()
        ids = sorted({row.segment_id for row in self.rows})
        rng = np.random.default_rng(seed)
        n_test = max(1, int(round(holdout * len(ids))))
        test_ids = set(rng.permutation(ids)[:n_test].tolist())
        train = [row for row in self.rows if row.segment_id not in test_ids]
        test = [row for row in self.rows if row.segment_id in test_ids]
        return TrainingDataset(train), TrainingDataset(test)

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "TrainingDataset":
        missing = [c for c in DATASET_COLUMNS if c not in df.columns]
        if missing:
            raise DatasetError(f"Dataset is missing columns: {', '.join(missing)}")
        rows = []
        segment_ids = df["segment_id"] if "segment_id" in df.columns else [""] * len(df)
        for (_, rec), seg in zip(df.iterrows(), segment_ids):
            if not rec["time_seconds"] > 0:
                raise DatasetError(f"Non-positive observed time in row {rec.to_dict()}")
            width = int(rec["width"])
            rows.append(
                TrainingRow(
                    features=FeatureVector.build(
                        float(rec["E"]), float(rec["h"]), float(rec["L"]),
                        width, float(rec["bitrate_kbps"]),
                    ),
                    resolution=width,
                    preset=int(rec["preset"]),
                    observed_time=float(rec["time_seconds"]),
                    segment_id=str(seg),
                )
            )
        return cls(rows)


def load_dataset_csv(path: str) -> TrainingDataset:
    """Load a ``E,h,L,width,bitrate_kbps,preset,time_seconds`` dataset."""
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetError(f"Cannot read dataset {path}: {e}") from e
    dataset = TrainingDataset.from_frame(df)
    logger.info(f"Loaded {len(dataset)} rows from {path}")
    return dataset


def _train_group(args: Tuple[Tuple[int, int], List[Tuple[FeatureVector, float]], Hyperparams]):
    key, rows, params = args
    return key, train_ensemble(rows, params, group=f"r={key[0]},p={key[1]}")


def train_model_set(
    dataset: TrainingDataset,
    resolutions: Iterable[int],
    preset_range: Tuple[int, int],
    hyperparams: Optional[Hyperparams] = None,
    jobs: int = 1,
    framerate: Optional[float] = None,
    threads: Optional[int] = None,
) -> ModelSet:
    """Train one ensemble per (resolution, preset).

    Groups are independent; with ``jobs > 1`` they are trained in worker
    processes. Each group is trained single-threaded, so the result does not
    depend on ``jobs``.

    Raises:
        TrainingError: If any (resolution, preset) group lacks enough rows
    """
    params = hyperparams or Hyperparams()
    widths = tuple(sorted(set(int(r) for r in resolutions)))
    p_min, p_max = preset_range
    grouped = dataset.groups()

    tasks = []
    for r in widths:
        for p in range(p_min, p_max + 1):
            rows = grouped.get((r, p), [])
            if len(rows) < 2 * params.min_samples_leaf:
                raise TrainingError(
                    f"Too few rows for r={r},p={p}: {len(rows)} < {2 * params.min_samples_leaf}"
                )
            tasks.append(((r, p), rows, params))

    logger.info(f"Training {len(tasks)} models ({len(widths)} resolutions x {p_max - p_min + 1} presets)")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_group, tasks))
    else:
        results = [_train_group(task) for task in tasks]

    return ModelSet(
        models=dict(results),
        preset_range=(p_min, p_max),
        resolutions=widths,
        framerate=framerate,
        threads=threads,
    )


# =============================================================================
# Accuracy
# =============================================================================


def r2_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    ss_tot = float(np.sum((y_true - np.mean(y_true)) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return 1.0 - ss_res / ss_tot


def mean_absolute_error(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    return float(np.mean(np.abs(y_true - y_pred)))


def evaluate_model_set(models: ModelSet, dataset: TrainingDataset) -> pd.DataFrame:
    """Per-preset R² and MAE of ``models`` on ``dataset``.

    Returns:
        Frame with columns ``preset, rows, r2, mae``
    """
    records = []
    for p in models.presets:
        rows = [row for row in dataset.rows if row.preset == p and row.resolution in models.resolutions]
        if not rows:
            continue
        y_true = np.array([row.observed_time for row in rows])
        y_pred = np.array([predict(models.models[(row.resolution, p)], row.features) for row in rows])
        records.append(
            {
                "preset": p,
                "rows": len(rows),
                "r2": r2_score(y_true, y_pred),
                "mae": mean_absolute_error(y_true, y_pred),
            }
        )
    return pd.DataFrame(records, columns=["preset", "rows", "r2", "mae"])
