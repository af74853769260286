"""Task-invariant prompts, the variational prompt encoder and the running prompt average.

The task-invariant block of each prompted layer is stored as a single vector
that is broadcast to ``length`` identical tokens, so the tokens cannot drift
apart under any gradient update. The encoder maps ``[flatten(tip_l); f(x)]``
through a shared trunk to a per-layer Gaussian (mean, log-variance) over the
task-specific tokens.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ContractError, DimensionError
from .tensor import Tensor

TIP_INIT_STD = 0.02


@dataclass
class Hyperparams:
    alpha: float = 0.8
    beta: float = 0.99
    prompt_length: int = 3
    input_noise: float = 0.05
    reparameterize: bool = True
    encoder_hidden: int = 256

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.prompt_length < 1:
            raise ConfigError("prompt_length must be >= 1")
        if self.input_noise < 0:
            raise ConfigError("input_noise must be >= 0")


class TipBlock:
    """Per-layer task-invariant prompts.

    With ``tied=True`` each layer owns one (D,) vector shown ``length`` times;
    with ``tied=False`` each token is an independent row (the "Diff TIP" variant).
    """

    def __init__(self, layers: Sequence[int], length: int, dim: int, tied: bool = True,
                 params: Optional[Dict[int, Tensor]] = None,
                 rng: Optional[np.random.Generator] = None):
        self.layers = tuple(layers)
        self.length = int(length)
        self.dim = int(dim)
        self.tied = bool(tied)
        if params is None:
            if rng is None:
                raise ConfigError("TipBlock needs rng or params")
            shape = (dim,) if tied else (length, dim)
            params = {l: T.parameter(rng.standard_normal(shape) * TIP_INIT_STD, name=f"tip.{l}")
                      for l in self.layers}
        self.params = params

    def parameters(self) -> List[Tensor]:
        return [self.params[l] for l in self.layers]

    def freeze(self) -> "TipBlock":
        for p in self.params.values():
            p.freeze()
        return self

    def rows(self, layer: int) -> np.ndarray:
        """The (length, D) token block as a plain array."""
        v = self.params[layer].data
        return np.broadcast_to(v, (self.length, self.dim)).copy() if self.tied else v.copy()

    def tokens(self, layer: int, batch: int) -> Tensor:
        """(batch, length, D) prompt tokens; gradients from every position reach the parameter."""
        v = self.params[layer]
        if self.tied:
            v = T.reshape(v, (1, 1, self.dim))
        else:
            v = T.reshape(v, (1, self.length, self.dim))
        return T.broadcast_to(v, (batch, self.length, self.dim))

    def flat(self, layer: int) -> Tensor:
        """flatten(tip_l) as a (length * D,) tensor."""
        v = self.params[layer]
        if self.tied:
            v = T.broadcast_to(T.reshape(v, (1, self.dim)), (self.length, self.dim))
        return T.reshape(v, (self.length * self.dim,))

    def astype(self, dtype) -> "TipBlock":
        return TipBlock(self.layers, self.length, self.dim, self.tied,
                        params={l: p.astype(dtype) for l, p in self.params.items()})


def init_tip(layers: Sequence[int], length: int, dim: int, rng: np.random.Generator,
             tied: bool = True) -> TipBlock:
    return TipBlock(layers, length, dim, tied=tied, rng=rng)


class EncoderHeads:
    """Shared 2-layer GELU trunk with per-layer mean and log-variance heads.

    The log-variance heads start at zero, i.e. unit variance.
    """

    def __init__(self, layers: Sequence[int], length: int, dim: int, hidden: int = 256,
                 use_tip: bool = True, rng: Optional[np.random.Generator] = None,
                 params: Optional[Dict[str, Tensor]] = None):
        self.layers = tuple(layers)
        self.length = int(length)
        self.dim = int(dim)
        self.hidden = int(hidden)
        self.use_tip = bool(use_tip)
        self.in_dim = (self.length * self.dim if use_tip else 0) + self.dim
        if params is None:
            if rng is None:
                raise ConfigError("EncoderHeads needs rng or params")
            params = self._init(rng)
        self.params = params

    def _init(self, rng) -> Dict[str, Tensor]:
        out_dim = self.length * self.dim
        p = {
            "enc.w1": rng.standard_normal((self.in_dim, self.hidden)) / np.sqrt(self.in_dim),
            "enc.b1": np.zeros(self.hidden),
            "enc.w2": rng.standard_normal((self.hidden, self.hidden)) / np.sqrt(self.hidden),
            "enc.b2": np.zeros(self.hidden),
        }
        for l in self.layers:
            p[f"enc.mu.{l}.w"] = rng.standard_normal((self.hidden, out_dim)) * 0.02
            p[f"enc.mu.{l}.b"] = np.zeros(out_dim)
            p[f"enc.logvar.{l}.w"] = np.zeros((self.hidden, out_dim))
            p[f"enc.logvar.{l}.b"] = np.zeros(out_dim)
        return {k: T.parameter(v, name=k) for k, v in p.items()}

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def freeze(self) -> "EncoderHeads":
        for p in self.params.values():
            p.freeze()
        return self

    def astype(self, dtype) -> "EncoderHeads":
        return EncoderHeads(self.layers, self.length, self.dim, self.hidden, self.use_tip,
                            params={k: p.astype(dtype) for k, p in self.params.items()})

    def trunk(self, feature: Tensor, tip_flat: Optional[Tensor]) -> Tensor:
        B = feature.shape[0]
        if feature.ndim != 2 or feature.shape[1] != self.dim:
            raise DimensionError(f"encoder: feature {feature.shape}, expected (B, {self.dim})")
        if self.use_tip:
            if tip_flat is None:
                raise ContractError("encoder: configured with TIP input but none given")
            z = T.concat([T.broadcast_to(T.reshape(tip_flat, (1, -1)), (B, tip_flat.shape[0])),
                          feature], axis=1)
        else:
            z = feature
        p = self.params
        z = T.gelu(T.linear(z, p["enc.w1"], p["enc.b1"]))
        return T.gelu(T.linear(z, p["enc.w2"], p["enc.b2"]))

    def heads(self, hidden: Tensor, layer: int, with_logvar: bool = True):
        B = hidden.shape[0]
        p = self.params
        shape = (B, self.length, self.dim)
        mu = T.reshape(T.linear(hidden, p[f"enc.mu.{layer}.w"], p[f"enc.mu.{layer}.b"]), shape)
        if not with_logvar:
            return mu, None
        lv = T.reshape(T.linear(hidden, p[f"enc.logvar.{layer}.w"], p[f"enc.logvar.{layer}.b"]), shape)
        return mu, lv

    def encode(self, feature: Tensor, tip: Optional[TipBlock], with_logvar: bool = True):
        """{layer: (mu, logvar)} with each block shaped (B, length, D)."""
        out = {}
        shared = None
        for l in self.layers:
            if self.use_tip:
                h = self.trunk(feature, tip.flat(l) if tip is not None else None)
            else:
                shared = shared if shared is not None else self.trunk(feature, None)
                h = shared
            out[l] = self.heads(h, l, with_logvar)
        return out


def perturb(images: np.ndarray, sigma: float, rng: Optional[np.random.Generator],
            training: bool) -> np.ndarray:
    """``x + eps`` with ``eps ~ N(0, sigma^2 I)`` in training mode, ``x`` otherwise."""
    if not training or sigma == 0:
        return images
    noise = rng.standard_normal(images.shape).astype(images.dtype) * images.dtype.type(sigma)
    return images + noise


def encode_mean(features: Tensor, tip: Optional[TipBlock], heads: EncoderHeads) -> Dict[int, Tensor]:
    """Per-layer prompt means from backbone features of (possibly perturbed) images."""
    return {l: mu for l, (mu, _) in heads.encode(features, tip, with_logvar=False).items()}


def encode_sigma(features: Tensor, tip: Optional[TipBlock], heads: EncoderHeads) -> Dict[int, Tensor]:
    """Per-layer diagonal variances, flattened to (B, length * D)."""
    out = {}
    for l, (_, lv) in heads.encode(features, tip).items():
        var = T.exp(lv)
        out[l] = T.reshape(var, (var.shape[0], -1))
    return out


@dataclass
class PromptAverage:
    """Running average of prompt means, one (length, D) block per layer."""

    blocks: Dict[int, np.ndarray]
    sample_count: int = 0
    task_index: int = 0

    def copy(self) -> "PromptAverage":
        return PromptAverage({l: b.copy() for l, b in self.blocks.items()},
                             self.sample_count, self.task_index)


def mean_prompt_features(mus: Sequence[Dict[int, np.ndarray]]) -> Dict[int, np.ndarray]:
    """Average per-sample mean blocks given as a list of {layer: (n_i, L, D)} batches."""
    if not mus or sum(next(iter(m.values())).shape[0] for m in mus) == 0:
        raise ContractError("prompt average over an empty dataset")
    out = {}
    for l in mus[0]:
        stacked = np.concatenate([m[l] for m in mus], axis=0)
        out[l] = stacked.astype(np.float64).mean(axis=0).astype(stacked.dtype)
    return out


def compute_p_avg(batches: Sequence[Dict[int, np.ndarray]], task_index: int = 0) -> PromptAverage:
    blocks = mean_prompt_features(batches)
    n = int(sum(next(iter(m.values())).shape[0] for m in batches))
    return PromptAverage(blocks, sample_count=n, task_index=task_index)


def ema_update(avg: PromptAverage, batches: Sequence[Dict[int, np.ndarray]], beta: float,
               task_index: Optional[int] = None) -> PromptAverage:
    """``p_avg <- beta * p_avg + (1 - beta) * mean(mu over the new task)``."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    new_mean = mean_prompt_features(batches)
    n = int(sum(next(iter(m.values())).shape[0] for m in batches))
    return blend_average(avg, new_mean, beta, n, task_index)


def blend_average(avg: PromptAverage, new_mean: Dict[int, np.ndarray], beta: float,
                  count: int, task_index: Optional[int] = None) -> PromptAverage:
    blocks = {}
    for l, old in avg.blocks.items():
        if new_mean[l].shape != old.shape:
            raise DimensionError(f"ema_update: {new_mean[l].shape} vs {old.shape}")
        b = old.dtype.type(beta)
        blocks[l] = b * old + (old.dtype.type(1.0) - b) * new_mean[l]
    return PromptAverage(blocks, sample_count=count,
                         task_index=avg.task_index + 1 if task_index is None else task_index)


def make_tsp(mu, p_avg, alpha: float):
    """``alpha * p_avg + (1 - alpha) * mu``; ``p_avg`` is constant, ``mu`` may be batched."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    p = p_avg.data if isinstance(p_avg, Tensor) else np.asarray(p_avg)
    mshape = mu.shape
    if mshape[-p.ndim:] != p.shape:
        raise DimensionError(f"make_tsp: mu {mshape} vs p_avg {p.shape}")
    if isinstance(mu, Tensor):
        a = p.dtype.type(alpha) * p
        return T.add(T.scale(mu, 1.0 - alpha), Tensor(a))
    dt = mu.dtype.type
    return dt(alpha) * p + dt(1.0 - alpha) * mu


def assemble_prompts(tip_tokens: Optional[Tensor], tsp: Optional[Tensor]) -> Tensor:
    """``[p_I; p_S]`` along the token axis; either part may be absent."""
    parts = [t for t in (tip_tokens, tsp) if t is not None]
    if not parts:
        raise ContractError("assemble_prompts: no prompt parts")
    if len(parts) == 1:
        return parts[0]
    a, b = parts
    if a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"assemble_prompts: {a.shape} vs {b.shape}")
    return T.concat(parts, axis=-2)
