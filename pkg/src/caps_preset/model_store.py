"""Versioned JSON model files for encoding time model sets.

The file is a human-diffable JSON document. Floats are written with
``repr`` precision, so a load reproduces every threshold and leaf value
bit for bit.
"""

import json
import logging
import os
from typing import Any, Dict, List, Tuple

import numpy as np

from .timing_model import (
    FEATURE_NAMES,
    LEAF,
    N_FEATURES,
    Hyperparams,
    ModelSet,
    RegressionTree,
    TreeEnsemble,
)
from .utils import CapsError, ModelLoadError

logger = logging.getLogger("CAPS")

FORMAT_NAME = "caps-model-set"
FORMAT_VERSION = 1

# Input conventions the models were trained with
CONVENTIONS = {
    "features": list(FEATURE_NAMES),
    "log_base": "e",
    "resolution_unit": "width_pixels",
    "bitrate_unit": "kbps",
}


def _tree_to_dict(tree: RegressionTree) -> Dict[str, List]:
    return {
        "feature": tree.feature.tolist(),
        "threshold": tree.threshold.tolist(),
        "left": tree.left.tolist(),
        "right": tree.right.tolist(),
        "value": tree.value.tolist(),
    }


def _check_topology(feature: np.ndarray, left: np.ndarray, right: np.ndarray) -> None:
    """Raise unless the arrays form one acyclic binary tree rooted at node 0."""
    n = feature.shape[0]
    if n == 0:
        raise ModelLoadError("Tree has no nodes")

    seen = np.zeros(n, dtype=bool)
    stack = [0]
    while stack:
        node = stack.pop()
        if seen[node]:
            raise ModelLoadError(f"Tree node {node} is reachable twice (cycle or shared child)")
        seen[node] = True
        f = int(feature[node])
        if f == LEAF:
            if left[node] != LEAF or right[node] != LEAF:
                raise ModelLoadError(f"Leaf node {node} has children")
            continue
        if not 0 <= f < N_FEATURES:
            raise ModelLoadError(f"Node {node} splits on unknown feature index {f}")
        for child in (int(left[node]), int(right[node])):
            if not 0 < child < n:
                raise ModelLoadError(f"Node {node} points to invalid child {child}")
            stack.append(child)

    if not seen.all():
        raise ModelLoadError(f"Tree has {int((~seen).sum())} unreachable nodes")


def _tree_from_dict(data: Dict[str, List]) -> RegressionTree:
    try:
        feature = np.asarray(data["feature"], dtype=np.int64)
        threshold = np.asarray(data["threshold"], dtype=np.float64)
        left = np.asarray(data["left"], dtype=np.int64)
        right = np.asarray(data["right"], dtype=np.int64)
        value = np.asarray(data["value"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise ModelLoadError(f"Malformed tree: {e}") from e

    sizes = {a.shape for a in (feature, threshold, left, right, value)}
    if len(sizes) != 1 or feature.ndim != 1:
        raise ModelLoadError("Tree node arrays differ in length")
    _check_topology(feature, left, right)
    if not np.all(np.isfinite(value)) or not np.all(np.isfinite(threshold)):
        raise ModelLoadError("Tree holds non-finite values")
    return RegressionTree(feature, threshold, left, right, value)


def serialize_model_set(models: ModelSet) -> bytes:
    """Encode a model set as a versioned UTF-8 JSON document."""
    entries = []
    for (r, p) in sorted(models.models):
        ensemble = models.models[(r, p)]
        entries.append(
            {
                "resolution": r,
                "preset": p,
                "base_score": ensemble.base_score,
                "learning_rate": ensemble.learning_rate,
                "hyperparams": ensemble.hyperparams.to_dict(),
                "trees": [_tree_to_dict(tree) for tree in ensemble.trees],
            }
        )

    document = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "conventions": CONVENTIONS,
        "preset_range": list(models.preset_range),
        "resolutions": list(models.resolutions),
        "framerate": models.framerate,
        "threads": models.threads,
        "models": entries,
    }
    return json.dumps(document, indent=1, ensure_ascii=False).encode("utf-8")


def load_model_set(data: bytes) -> ModelSet:
    """Decode a model set produced by :func:`serialize_model_set`.

    Raises:
        ModelLoadError: On version mismatch, convention mismatch or malformed trees
    """
    try:
        document: Dict[str, Any] = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelLoadError(f"Model file is not valid JSON: {e}") from e

    if not isinstance(document, dict) or document.get("format") != FORMAT_NAME:
        raise ModelLoadError("Not a CAPS model set file")
    if document.get("version") != FORMAT_VERSION:
        raise ModelLoadError(
            f"Unsupported model file version {document.get('version')} "
            f"(expected {FORMAT_VERSION})"
        )
    if document.get("conventions") != CONVENTIONS:
        raise ModelLoadError(f"Model conventions {document.get('conventions')} differ from {CONVENTIONS}")

    try:
        p_min, p_max = (int(v) for v in document["preset_range"])
        resolutions = tuple(int(r) for r in document["resolutions"])
        models: Dict[Tuple[int, int], TreeEnsemble] = {}
        for entry in document["models"]:
            key = (int(entry["resolution"]), int(entry["preset"]))
            if key in models:
                raise ModelLoadError(f"Duplicate model for r={key[0]},p={key[1]}")
            models[key] = TreeEnsemble(
                base_score=float(entry["base_score"]),
                trees=tuple(_tree_from_dict(t) for t in entry["trees"]),
                learning_rate=float(entry["learning_rate"]),
                hyperparams=Hyperparams(**entry["hyperparams"]),
            )
        framerate = document.get("framerate")
        threads = document.get("threads")
        return ModelSet(
            models=models,
            preset_range=(p_min, p_max),
            resolutions=resolutions,
            framerate=float(framerate) if framerate is not None else None,
            threads=int(threads) if threads is not None else None,
        )
    except ModelLoadError:
        raise
    except (KeyError, TypeError, ValueError, CapsError) as e:
        raise ModelLoadError(f"Malformed model file: {e}") from e


def save_model_set(models: ModelSet, path: str) -> None:
    """Write a model set to ``path``."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(serialize_model_set(models))
    logger.info(f"Saved {len(models.models)} models to {path}")


def read_model_set(path: str) -> ModelSet:
    """Read a model set from ``path``."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ModelLoadError(f"Cannot read model file {path}: {e}") from e
    models = load_model_set(data)
    logger.info(
        f"Loaded {len(models.models)} models from {path} "
        f"(resolutions {list(models.resolutions)}, presets {models.preset_range[0]}-{models.preset_range[1]})"
    )
    return models
