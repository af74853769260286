"""Minimal Vision Transformer with deep prompt insertion.

Blocks are pre-norm (``x + MSA(LN(x))`` then ``x + MLP(LN(x))``). At each
prompted layer the prompt tokens are placed directly after the class token,
the block runs over the extended sequence, and the prompt outputs are dropped
again, so the sequence length seen by the next layer is always ``1 + L_x``.
Prompt tokens never receive a positional embedding.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class ViTConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 6
    num_heads: int = 4
    mlp_ratio: int = 2
    prompt_layers: Tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        self.prompt_layers = tuple(int(l) for l in self.prompt_layers)
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        bad = [l for l in self.prompt_layers if not 0 <= l < self.num_layers]
        if bad or len(set(self.prompt_layers)) != len(self.prompt_layers):
            raise ConfigError(f"invalid prompt_layers {self.prompt_layers} for {self.num_layers} layers")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prompt_layers"] = list(self.prompt_layers)
        return d


@dataclass
class LayerActivation:
    """Per-layer diagnostics: token states entering the block and attention maps.

    ``attention`` has shape (B, heads, L, L) over the extended sequence
    ``[cls; prompts; patches]``; ``prompt_slice`` locates the prompt columns.
    """

    layer: int
    tokens: np.ndarray
    attention: np.ndarray
    prompt_slice: slice = field(default_factory=lambda: slice(1, 1))


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


def init_vit_params(config: ViTConfig, rng: np.random.Generator) -> Dict[str, Tensor]:
    D, P, C = config.embed_dim, config.patch_size, config.channels
    hidden = config.mlp_ratio * D
    p = {
        "patch_w": _init_linear(rng, P * P * C, D),
        "patch_b": np.zeros(D, np.float32),
        "cls": (rng.standard_normal((1, D)) * 0.02).astype(np.float32),
        "pos": (rng.standard_normal((1 + config.num_patches, D)) * 0.02).astype(np.float32),
    }
    for l in range(config.num_layers):
        pre = f"blocks.{l}."
        p[pre + "ln1_g"] = np.ones(D, np.float32)
        p[pre + "ln1_b"] = np.zeros(D, np.float32)
        for name in ("q", "k", "v", "o"):
            p[pre + f"w{name}"] = _init_linear(rng, D, D)
            p[pre + f"b{name}"] = np.zeros(D, np.float32)
        p[pre + "ln2_g"] = np.ones(D, np.float32)
        p[pre + "ln2_b"] = np.zeros(D, np.float32)
        p[pre + "mlp_w1"] = _init_linear(rng, D, hidden)
        p[pre + "mlp_b1"] = np.zeros(hidden, np.float32)
        p[pre + "mlp_w2"] = _init_linear(rng, hidden, D)
        p[pre + "mlp_b2"] = np.zeros(D, np.float32)
    p["ln_g"] = np.ones(D, np.float32)
    p["ln_b"] = np.zeros(D, np.float32)
    return {k: T.parameter(v, name=k) for k, v in p.items()}


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, L_x, P*P*C), patches in row-major order."""
    B, H, W, C = images.shape
    P = patch_size
    if H % P or W % P:
        raise DimensionError(f"patch_embed: image {H}x{W} not divisible by patch {P}")
    x = images.reshape(B, H // P, P, W // P, P, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // P) * (W // P), P * P * C)


def multi_head_attention(h: Tensor, prm: Mapping[str, Tensor], num_heads: int,
                         prefix: str = "") -> Tuple[Tensor, np.ndarray]:
    """``Concat(head_1..head_m) W^O`` with ``head_i = softmax(Q_i K_i^T / sqrt(d_k)) V_i``.

    Returns the projected output and the attention weights (B, m, L, L).
    """
    B, L, D = h.shape
    if D % num_heads:
        raise DimensionError(f"msa_layer: width {D} not divisible by {num_heads} heads")
    dk = D // num_heads

    def heads(name):
        z = T.linear(h, prm[prefix + "w" + name], prm[prefix + "b" + name])
        return T.transpose(T.reshape(z, (B, L, num_heads, dk)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / np.sqrt(dk))
    attn = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, L, D))
    return T.linear(ctx, prm[prefix + "wo"], prm[prefix + "bo"]), attn.data


def msa_layer(h: Tensor, prm: Mapping[str, Tensor], num_heads: int,
              prompts: Optional[Tensor] = None, prefix: str = "",
              keep: bool = False) -> Tuple[Tensor, Optional[LayerActivation]]:
    """One pre-norm transformer block with optional prompt prepending.

    ``h`` is (B, 1 + L_x, D) with the class token first. ``prompts`` is
    (B, L_p, D); it is inserted after the class token and its output rows are
    discarded before returning.
    """
    B, L, D = h.shape
    lp = 0
    if prompts is not None:
        if prompts.ndim != 3 or prompts.shape[0] != B or prompts.shape[2] != D:
            raise DimensionError(f"msa_layer: prompts {prompts.shape} vs tokens {h.shape}")
        lp = prompts.shape[1]
        if lp:
            h = T.concat([h[:, :1], prompts, h[:, 1:]], axis=1)
    a, attn = multi_head_attention(
        T.layer_norm(h, prm[prefix + "ln1_g"], prm[prefix + "ln1_b"]), prm, num_heads, prefix)
    x = T.add(h, a)
    m = T.layer_norm(x, prm[prefix + "ln2_g"], prm[prefix + "ln2_b"])
    m = T.linear(T.gelu(T.linear(m, prm[prefix + "mlp_w1"], prm[prefix + "mlp_b1"])),
                 prm[prefix + "mlp_w2"], prm[prefix + "mlp_b2"])
    x = T.add(x, m)
    act = LayerActivation(-1, h.data, attn, slice(1, 1 + lp)) if keep else None
    if lp:
        x = T.concat([x[:, :1], x[:, 1 + lp:]], axis=1)
    return x, act


class VisionTransformer:
    """Parameter container plus forward pass.

    ``forward(images)`` runs the plain backbone; ``forward(images, prompts)``
    expects one (B, L_p, D) prompt tensor for every configured prompt layer.
    """

    def __init__(self, config: ViTConfig, rng: Optional[np.random.Generator] = None,
                 params: Optional[Dict[str, Tensor]] = None):
        self.config = config
        if params is None:
            if rng is None:
                raise ConfigError("VisionTransformer needs either rng or params")
            params = init_vit_params(config, rng)
        self.params = params

    # -- parameter management -------------------------------------------
    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def freeze(self) -> "VisionTransformer":
        for p in self.params.values():
            p.freeze()
        return self

    def unfreeze(self) -> "VisionTransformer":
        for p in self.params.values():
            p.unfreeze()
        return self

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def astype(self, dtype) -> "VisionTransformer":
        return VisionTransformer(self.config, params={k: v.astype(dtype) for k, v in self.params.items()})

    @property
    def dtype(self):
        return self.params["cls"].dtype

    # -- forward ---------------------------------------------------------
    def patch_embed(self, images) -> Tensor:
        cfg = self.config
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise DimensionError(
                f"patch_embed: expected images (*, {cfg.image_size}, {cfg.image_size}, "
                f"{cfg.channels}), got {images.shape}")
        patches = Tensor(patchify(images, cfg.patch_size))
        x = T.linear(patches, self.params["patch_w"], self.params["patch_b"])
        return T.add(x, self.params["pos"][1:])

    def class_token(self, batch: int) -> Tensor:
        cls = T.add(self.params["cls"], self.params["pos"][:1])
        return T.broadcast_to(T.reshape(cls, (1, 1, -1)), (batch, 1, self.config.embed_dim))

    def forward(self, images, prompts: Optional[Mapping[int, Tensor]] = None,
                keep_activations: bool = False) -> Tuple[Tensor, List[LayerActivation]]:
        cfg = self.config
        xe = self.patch_embed(images)
        B = xe.shape[0]
        h = T.concat([self.class_token(B), xe], axis=1)
        if prompts is not None:
            missing = [l for l in cfg.prompt_layers if l not in prompts]
            if missing:
                raise ConfigError(f"vit_forward: no prompts supplied for layers {missing}")
        acts = []
        for l in range(cfg.num_layers):
            p = prompts.get(l) if prompts is not None and l in cfg.prompt_layers else None
            h, act = msa_layer(h, self.params, cfg.num_heads, p, prefix=f"blocks.{l}.",
                               keep=keep_activations)
            if act is not None:
                act.layer = l
                acts.append(act)
        cls = T.layer_norm(h[:, 0], self.params["ln_g"], self.params["ln_b"])
        return cls, acts

    def features(self, images, prompts: Optional[Mapping[int, Tensor]] = None) -> Tensor:
        return self.forward(images, prompts)[0]


def assemble_input(cls: Tensor, prompts: Optional[Tensor], xe: Tensor) -> Tensor:
    """``[cls; p; x_e]`` along the sequence axis for 2-D (L, D) operands."""
    parts = [cls] + ([prompts] if prompts is not None and prompts.shape[0] else []) + [xe]
    widths = {t.shape[-1] for t in parts}
    if len(widths) != 1:
        raise DimensionError(f"assemble_input: width mismatch {[t.shape for t in parts]}")
    return T.concat(parts, axis=0)


def attention_to_prompts(activation: LayerActivation, start: int, stop: int) -> np.ndarray:
    """Attention mass from every query onto prompt tokens ``start:stop``.

    Indices are relative to the prompt block. Returns (B, heads, L, stop-start).
    """
    sl = activation.prompt_slice
    lp = sl.stop - sl.start
    if not 0 <= start <= stop <= lp:
        raise IndexError(f"prompt range [{start}, {stop}) outside [0, {lp})")
    return activation.attention[..., sl.start + start: sl.start + stop]


def prompt_attention_spread(activations: Sequence[LayerActivation], start: int, stop: int) -> float:
    """Largest (max - min) attention across prompts ``start:stop`` over all layers/heads/queries.

    Layers without prompts are skipped.
    """
    spread = 0.0
    for act in activations:
        if act.prompt_slice.stop == act.prompt_slice.start:
            continue
        a = attention_to_prompts(act, start, stop)
        if a.shape[-1] > 1:
            spread = max(spread, float((a.max(axis=-1) - a.min(axis=-1)).max()))
    return spread
