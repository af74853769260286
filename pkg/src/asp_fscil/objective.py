"""Training losses: cosine cross-entropy with a Gaussian KL penalty, and the anchor loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ContractError, DimensionError, NumericError
from .tensor import Tensor


@dataclass
class LossConfig:
    lam: float = 0.1
    kl_weight: float = 1.0
    # cosine logits are divided by this before the softmax
    temperature: float = 0.05

    def __post_init__(self):
        if self.lam < 0 or self.kl_weight < 0:
            raise ConfigError("lam and kl_weight must be non-negative")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")


def cosine_logits(features, weights) -> Tensor:
    """(B, D) features against (K, D) class vectors -> (B, K) cosine similarities."""
    f, w = T.as_tensor(features), T.as_tensor(weights)
    if f.ndim == 1:
        f = T.reshape(f, (1, -1))
    if f.shape[-1] != w.shape[-1]:
        raise DimensionError(f"cosine_logits: feature {f.shape} vs weights {w.shape}")
    return T.matmul(T.normalize(f), T.swap_last(T.normalize(w)))


def gaussian_kl(mu: Tensor, var: Tensor) -> Tensor:
    """KL(N(mu, diag var) || N(0, I)) per sample, summed over all non-batch axes."""
    if mu.shape != var.shape:
        raise DimensionError(f"gaussian_kl: mu {mu.shape} vs var {var.shape}")
    if (var.data <= 0).any():
        raise ContractError("gaussian_kl: variances must be strictly positive")
    terms = T.sub(T.add(T.mul(mu, mu), var), T.add(T.log(var), 1.0))
    axes = tuple(range(1, mu.ndim))
    return T.scale(T.sum(terms, axis=axes) if axes else terms, 0.5)


def gaussian_kl_logvar(mu: Tensor, logvar: Tensor) -> Tensor:
    """Same as :func:`gaussian_kl` but parameterised by log-variance."""
    if mu.shape != logvar.shape:
        raise DimensionError(f"gaussian_kl: mu {mu.shape} vs logvar {logvar.shape}")
    terms = T.sub(T.add(T.mul(mu, mu), T.exp(logvar)), T.add(logvar, 1.0))
    axes = tuple(range(1, mu.ndim))
    return T.scale(T.sum(terms, axis=axes) if axes else terms, 0.5)


def kl_closed_form(mu: np.ndarray, var: np.ndarray) -> float:
    mu, var = np.asarray(mu, np.float64), np.asarray(var, np.float64)
    return float(0.5 * np.sum(mu ** 2 + var - 1.0 - np.log(var)))


def ib_loss(logits: Tensor, labels, kl_terms: Sequence[Tensor] = (), kl_weight: float = 1.0,
            temperature: float = 1.0) -> Tensor:
    """Cross-entropy on ``logits / temperature`` plus ``kl_weight`` times the mean per-sample KL.

    ``kl_terms`` are per-sample (B,) KL vectors, typically one per prompted layer.
    """
    ce = T.cross_entropy(T.scale(logits, 1.0 / temperature), labels)
    kl = None
    for term in kl_terms:
        kl = term if kl is None else T.add(kl, term)
    if kl is None or kl_weight == 0:
        return ce
    return T.add(ce, T.scale(T.mean(kl), kl_weight))


def select_anchor(features: np.ndarray, class_mean: np.ndarray) -> int:
    """Index of the feature with largest cosine to ``class_mean``; ties go to the lowest index."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ContractError("select_anchor: class has no samples")
    c = np.asarray(class_mean, dtype=np.float64)
    f = features.astype(np.float64)
    fn = np.linalg.norm(f, axis=1)
    cn = np.linalg.norm(c)
    if cn == 0 or (fn == 0).any():
        raise NumericError("select_anchor: zero-norm vector")
    cos = (f @ c) / (fn * cn)
    return int(np.argmax(cos))


def anchor_loss(features: Tensor, anchors) -> Tensor:
    """Mean over the batch of ``1 - cos(anchor_k, f)``; anchors are constants."""
    a = anchors.data if isinstance(anchors, Tensor) else np.asarray(anchors, dtype=features.dtype)
    if a.shape != features.shape:
        raise DimensionError(f"anchor_loss: features {features.shape} vs anchors {a.shape}")
    cos = T.cosine(features, Tensor(a))
    return T.add(T.neg(T.mean(cos)), 1.0)


def total_loss(ib: Tensor, anchor: Optional[Tensor], lam: float) -> Tensor:
    if anchor is None or lam == 0:
        return ib
    return T.add(ib, T.scale(anchor, lam))
