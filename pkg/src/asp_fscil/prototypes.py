"""Cosine classifier that turns into a growing prototype (class-mean) classifier."""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ContractError, DimensionError, NumericError
from .tensor import Tensor

TRAINABLE = "trainable"
PROTOTYPICAL = "prototypical"


def compute_prototypes(features: np.ndarray, labels: np.ndarray,
                       classes: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Class means of ``features`` grouped by ``labels``.

    Returns ``(class_ids, means)`` with rows ordered as ``classes`` (default:
    sorted unique labels).
    """
    features = np.asarray(features)
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise DimensionError(f"compute_prototypes: features {features.shape} vs labels {labels.shape}")
    ids = np.unique(labels) if classes is None else np.asarray(classes)
    means = np.empty((len(ids), features.shape[1]), dtype=features.dtype)
    for i, k in enumerate(ids):
        rows = features[labels == k]
        if rows.shape[0] == 0:
            raise ContractError(f"compute_prototypes: class {k} has no samples")
        means[i] = rows.astype(np.float64).mean(axis=0)
    return ids.astype(np.int64), means


class PrototypeClassifier:
    """Rows of ``weight`` are either trainable vectors or frozen class means.

    ``class_ids[i]`` is the label predicted when row ``i`` wins.
    """

    def __init__(self, class_ids: Sequence[int], dim: int,
                 rng: Optional[np.random.Generator] = None,
                 weight: Optional[np.ndarray] = None, mode: str = TRAINABLE):
        self.class_ids = np.asarray(class_ids, dtype=np.int64)
        if len(set(self.class_ids.tolist())) != len(self.class_ids):
            raise ContractError("classifier: duplicate class ids")
        if weight is None:
            if rng is None:
                raise ContractError("classifier needs rng or weight")
            weight = rng.standard_normal((len(self.class_ids), dim)) * 0.02
        self.weight = T.parameter(weight, name="classifier.w")
        self.mode = mode
        if mode == PROTOTYPICAL:
            self.weight.freeze()

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def parameters(self) -> List[Tensor]:
        return [self.weight]

    def label_index(self, labels) -> np.ndarray:
        """Map class ids to row indices."""
        lookup = {int(k): i for i, k in enumerate(self.class_ids)}
        try:
            return np.array([lookup[int(y)] for y in np.asarray(labels).ravel()], dtype=np.int64)
        except KeyError as e:
            raise ContractError(f"classifier: unknown class id {e.args[0]}") from None

    def logits(self, features: Tensor) -> Tensor:
        from .objective import cosine_logits
        return cosine_logits(features, self.weight)

    def freeze_to_prototypes(self, class_ids: Sequence[int], means: np.ndarray) -> "PrototypeClassifier":
        """Replace the trained rows with class means and stop training them."""
        if self.mode != TRAINABLE:
            raise ContractError("freeze_to_prototypes: classifier already prototypical")
        order = self.label_index(class_ids)
        if sorted(order.tolist()) != list(range(self.num_classes)):
            raise ContractError("freeze_to_prototypes: means must cover every class exactly once")
        w = np.empty_like(self.weight.data)
        w[order] = np.asarray(means, dtype=w.dtype)
        self.weight = T.parameter(w, name="classifier.w").freeze()
        self.mode = PROTOTYPICAL
        return self

    def append_prototypes(self, class_ids: Sequence[int], means: np.ndarray) -> "PrototypeClassifier":
        if self.mode != PROTOTYPICAL:
            raise ContractError("append_prototypes: classifier is still trainable")
        class_ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
        if class_ids.size == 0:
            return self
        means = np.asarray(means, dtype=self.weight.dtype)
        if means.shape != (class_ids.size, self.weight.shape[1]):
            raise DimensionError(f"append_prototypes: means {means.shape} for {class_ids.size} classes")
        clash = set(class_ids.tolist()) & set(self.class_ids.tolist())
        if clash or len(set(class_ids.tolist())) != class_ids.size:
            raise ContractError(f"append_prototypes: duplicate class ids {sorted(clash) or class_ids}")
        w = np.concatenate([self.weight.data, means], axis=0)
        self.weight = T.parameter(w, name="classifier.w").freeze()
        self.class_ids = np.concatenate([self.class_ids, class_ids])
        return self

    def replace_prototypes(self, class_ids: Sequence[int], means: np.ndarray) -> "PrototypeClassifier":
        """Overwrite the rows of already-known classes with new means."""
        if self.mode != PROTOTYPICAL:
            raise ContractError("replace_prototypes: classifier is still trainable")
        rows = self.label_index(class_ids)
        means = np.asarray(means, dtype=self.weight.dtype)
        if means.shape != (rows.size, self.weight.shape[1]):
            raise DimensionError(f"replace_prototypes: means {means.shape} for {rows.size} classes")
        w = self.weight.data.copy()
        w[rows] = means
        self.weight = T.parameter(w, name="classifier.w").freeze()
        return self

    def similarities(self, features: np.ndarray) -> np.ndarray:
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        w = self.weight.data.astype(np.float64)
        fn = np.linalg.norm(f, axis=1, keepdims=True)
        wn = np.linalg.norm(w, axis=1, keepdims=True)
        if (fn == 0).any() or (wn == 0).any():
            raise NumericError("predict: zero-norm feature or prototype")
        return (f / fn) @ (w / wn).T

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Class id of the most cosine-similar row; exact ties go to the lowest class id."""
        if self.num_classes < 1:
            raise ContractError("predict: classifier has no classes")
        sims = self.similarities(features)
        best = sims.max(axis=1, keepdims=True)
        ids = np.where(sims == best, self.class_ids[None, :], np.iinfo(np.int64).max)
        return ids.min(axis=1)
