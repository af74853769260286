"""Base-task training, EMA-only incremental steps and evaluation for the prompted ViT.

:class:`ASPModel` bundles the frozen backbone with everything that is learned
on the base task (task-invariant prompts, the prompt encoder, the classifier)
and the running prompt average that keeps adapting afterwards.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ContractError
from .objective import (LossConfig, anchor_loss, gaussian_kl_logvar, ib_loss, select_anchor,
                        total_loss)
from .prompts import (EncoderHeads, Hyperparams, PromptAverage, TipBlock, assemble_prompts,
                      compute_p_avg, ema_update, init_tip, make_tsp)
from .prototypes import PROTOTYPICAL, PrototypeClassifier, compute_prototypes
from .tensor import Tensor
from .vit import VisionTransformer

logger = logging.getLogger(__name__)

EVAL_BATCH = 128


@dataclass
class Ablation:
    no_tip: bool = False
    no_tsp: bool = False
    no_anchor: bool = False
    diff_tip: bool = False
    no_pavg: bool = False
    frozen_pavg: bool = False
    # study knob: re-embed base training data after every incremental task and
    # recompute the base prototypes; this reads base data, so it is not rehearsal-free
    refresh_base: bool = False

    def __post_init__(self):
        if self.no_tip and self.diff_tip:
            raise ConfigError("ablation: no_tip and diff_tip are incompatible")
        if self.no_tsp and (self.no_pavg or self.frozen_pavg):
            raise ConfigError("ablation: no_pavg/frozen_pavg need task-specific prompts")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def label(self) -> str:
        on = [k for k, v in asdict(self).items() if v]
        return "+".join(on) if on else "full"


ABLATIONS = {
    "full": Ablation(),
    "no_tip": Ablation(no_tip=True),
    "no_tsp": Ablation(no_tsp=True),
    "no_anchor": Ablation(no_anchor=True),
    "diff_tip": Ablation(diff_tip=True),
}


@dataclass
class OptimConfig:
    lr: float = 0.01
    epochs: int = 20
    batch_size: int = 48

    def __post_init__(self):
        if not self.lr > 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("optimizer: lr > 0, epochs >= 0, batch_size >= 1 required")


@dataclass
class StepNoise:
    """All randomness consumed by one training step, drawn up front."""

    inputs: Optional[np.ndarray] = None
    prompts: Dict[int, np.ndarray] = field(default_factory=dict)


class ASPModel:
    def __init__(self, backbone: VisionTransformer, base_classes: Sequence[int],
                 hyper: Hyperparams, loss: LossConfig, ablation: Ablation,
                 rng: np.random.Generator):
        if not backbone.frozen:
            raise ContractError("ASPModel: backbone must be frozen")
        cfg = backbone.config
        self.backbone = backbone
        self._set_config(hyper, loss, ablation)
        layers = cfg.prompt_layers
        L, D = hyper.prompt_length, cfg.embed_dim
        self.tip: Optional[TipBlock] = None
        if not ablation.no_tip and layers:
            self.tip = init_tip(layers, L, D, rng, tied=not ablation.diff_tip)
        self.encoder: Optional[EncoderHeads] = None
        if not ablation.no_tsp and layers:
            self.encoder = EncoderHeads(layers, L, D, hyper.encoder_hidden,
                                        use_tip=self.tip is not None, rng=rng)
        self.classifier = PrototypeClassifier(base_classes, D, rng=rng)
        self.base_classes = [int(k) for k in base_classes]
        self.p_avg: Optional[PromptAverage] = None
        if self.encoder is not None:
            self.p_avg = PromptAverage({l: np.zeros((L, D), np.float32) for l in layers})
        self.task_index = 0

    def _set_config(self, hyper: Hyperparams, loss: LossConfig, ablation: Ablation) -> None:
        self.hyper, self.loss, self.ablation = hyper, loss, ablation
        self.alpha = 0.0 if ablation.no_pavg else hyper.alpha
        self.beta = 1.0 if ablation.frozen_pavg else hyper.beta
        self.lam = 0.0 if ablation.no_anchor else loss.lam

    @classmethod
    def from_parts(cls, backbone: VisionTransformer, hyper: Hyperparams, loss: LossConfig,
                   ablation: Ablation, tip: Optional[TipBlock], encoder: Optional[EncoderHeads],
                   classifier: PrototypeClassifier, p_avg: Optional[PromptAverage],
                   base_classes: Sequence[int], task_index: int = 0) -> "ASPModel":
        """Reassemble a model from existing components (checkpoint loading)."""
        model = object.__new__(cls)
        model.backbone = backbone
        model._set_config(hyper, loss, ablation)
        model.tip, model.encoder, model.classifier, model.p_avg = tip, encoder, classifier, p_avg
        model.base_classes = [int(k) for k in base_classes]
        model.task_index = int(task_index)
        return model

    # ------------------------------------------------------------------
    @property
    def has_prompts(self) -> bool:
        return self.tip is not None or self.encoder is not None

    @property
    def trained(self) -> bool:
        return self.classifier.mode == PROTOTYPICAL

    def trainable_parameters(self) -> List[Tensor]:
        params = []
        if self.tip is not None:
            params += self.tip.parameters()
        if self.encoder is not None:
            params += self.encoder.parameters()
        return params + self.classifier.parameters()

    def astype(self, dtype) -> "ASPModel":
        """Copy with every tensor cast to ``dtype`` (used for float64 gradient checks)."""
        new = object.__new__(ASPModel)
        new.__dict__.update(self.__dict__)
        new.backbone = self.backbone.astype(dtype)
        new.tip = self.tip.astype(dtype) if self.tip is not None else None
        new.encoder = self.encoder.astype(dtype) if self.encoder is not None else None
        clf = object.__new__(PrototypeClassifier)
        clf.__dict__.update(self.classifier.__dict__)
        clf.weight = self.classifier.weight.astype(dtype)
        new.classifier = clf
        if self.p_avg is not None:
            new.p_avg = PromptAverage({l: b.astype(dtype) for l, b in self.p_avg.blocks.items()},
                                      self.p_avg.sample_count, self.p_avg.task_index)
        return new

    # ------------------------------------------------------------------
    def draw_noise(self, rng: np.random.Generator, images: np.ndarray) -> StepNoise:
        dt = self.backbone.dtype
        noise = StepNoise()
        if self.hyper.input_noise > 0:
            noise.inputs = (rng.standard_normal(images.shape) * self.hyper.input_noise).astype(dt)
        if self.encoder is not None and self.hyper.reparameterize:
            shape = (images.shape[0], self.hyper.prompt_length, self.backbone.config.embed_dim)
            noise.prompts = {l: rng.standard_normal(shape).astype(dt)
                             for l in self.backbone.config.prompt_layers}
        return noise

    def backbone_features(self, images: np.ndarray) -> np.ndarray:
        """Frozen, prompt-free features ``f(x)`` in batches."""
        out = []
        with T.no_grad():
            for s in range(0, len(images), EVAL_BATCH):
                out.append(self.backbone.features(images[s:s + EVAL_BATCH]).data)
        return np.concatenate(out) if out else np.zeros((0, self.backbone.config.embed_dim))

    def build_prompts(self, feats: Optional[np.ndarray], batch: int,
                      noise: Optional[StepNoise] = None, training: bool = False):
        """Per-layer prompts ``[p_I; p_S]`` and, in training mode, per-layer KL vectors."""
        if not self.has_prompts:
            return None, []
        enc = None
        if self.encoder is not None:
            enc = self.encoder.encode(Tensor(feats), self.tip, with_logvar=training)
        prompts, kls = {}, []
        for l in self.backbone.config.prompt_layers:
            tip_tokens = self.tip.tokens(l, batch) if self.tip is not None else None
            tsp = None
            if enc is not None:
                mu, logvar = enc[l]
                sample = mu
                if training:
                    if noise is not None and l in noise.prompts:
                        std = T.exp(T.scale(logvar, 0.5))
                        sample = T.add(mu, T.mul(std, Tensor(noise.prompts[l])))
                    kls.append(gaussian_kl_logvar(mu, logvar))
                tsp = make_tsp(sample, self.p_avg.blocks[l], self.alpha)
            prompts[l] = assemble_prompts(tip_tokens, tsp)
        return prompts, kls

    def step_loss(self, images: np.ndarray, labels: np.ndarray, noise: StepNoise,
                  anchors: Optional[np.ndarray] = None) -> Tensor:
        """Training loss ``L_IB + lam * L_c`` on one minibatch with pre-drawn noise."""
        x = np.asarray(images, dtype=self.backbone.dtype)
        if noise.inputs is not None:
            x = x + noise.inputs
        feats = None
        if self.encoder is not None:
            with T.no_grad():
                feats = self.backbone.features(x).data
        prompts, kls = self.build_prompts(feats, x.shape[0], noise, training=True)
        feat = self.backbone.forward(x, prompts)[0]
        logits = self.classifier.logits(feat)
        rows = self.classifier.label_index(labels)
        ib = ib_loss(logits, rows, kls, self.loss.kl_weight, self.loss.temperature)
        anchor = None
        if anchors is not None and self.lam > 0:
            anchor = anchor_loss(feat, anchors)
        return total_loss(ib, anchor, self.lam)

    # ------------------------------------------------------------------
    def prompt_means(self, images: np.ndarray, feats: Optional[np.ndarray] = None) -> Dict[int, np.ndarray]:
        """Eval-mode encoder means ``f_mu([p_I; f(x)])`` for every image, {layer: (N, L, D)}."""
        if self.encoder is None:
            raise ContractError("prompt_means: model has no prompt encoder")
        if feats is None:
            feats = self.backbone_features(images)
        outs: Dict[int, list] = {l: [] for l in self.encoder.layers}
        with T.no_grad():
            for s in range(0, len(feats), EVAL_BATCH):
                enc = self.encoder.encode(Tensor(feats[s:s + EVAL_BATCH]), self.tip, with_logvar=False)
                for l, (mu, _) in enc.items():
                    outs[l].append(mu.data)
        return {l: np.concatenate(v) for l, v in outs.items()}

    def embed(self, images: np.ndarray, feats: Optional[np.ndarray] = None) -> np.ndarray:
        """Eval-mode prompted features ``f_{theta,p}(x)`` (no noise, per-sample TSP)."""
        images = np.asarray(images, dtype=self.backbone.dtype)
        if self.encoder is not None and feats is None:
            feats = self.backbone_features(images)
        out = []
        with T.no_grad():
            for s in range(0, len(images), EVAL_BATCH):
                xb = images[s:s + EVAL_BATCH]
                fb = feats[s:s + EVAL_BATCH] if feats is not None else None
                prompts, _ = self.build_prompts(fb, xb.shape[0], training=False)
                out.append(self.backbone.forward(xb, prompts)[0].data)
        return np.concatenate(out) if out else np.zeros((0, self.backbone.config.embed_dim))

    def refresh_p_avg(self, images: np.ndarray, feats: Optional[np.ndarray] = None) -> None:
        if self.encoder is not None:
            self.p_avg = compute_p_avg([self.prompt_means(images, feats)], task_index=0)

    def anchor_table(self, images: np.ndarray, labels: np.ndarray,
                     feats: Optional[np.ndarray] = None) -> Dict[int, np.ndarray]:
        """{class: feature of the sample closest (cosine) to its class mean}."""
        emb = self.embed(images, feats)
        ids, means = compute_prototypes(emb, labels)
        table = {}
        for k, c in zip(ids, means):
            rows = np.flatnonzero(labels == k)
            table[int(k)] = emb[rows[select_anchor(emb[rows], c)]]
        return table

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.classifier.predict(self.embed(images))


def train_base_task(model: ASPModel, images: np.ndarray, labels: np.ndarray,
                    optim: OptimConfig, rng: np.random.Generator) -> List[float]:
    """Fit TIP, encoder and cosine classifier on the base task, then freeze them.

    Each epoch starts by recomputing the prompt average and then the anchor
    table (anchors use the fresh prompts). Returns the mean loss per epoch.
    """
    if model.trained:
        raise ContractError("train_base_task: model already trained")
    images = np.asarray(images, dtype=model.backbone.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    feats = model.backbone_features(images) if model.encoder is not None else None
    params = model.trainable_parameters()
    n = len(labels)
    history = []
    for epoch in range(optim.epochs):
        model.refresh_p_avg(images, feats)
        anchors = model.anchor_table(images, labels, feats) if model.lam > 0 else None
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, optim.batch_size):
            idx = order[s:s + optim.batch_size]
            xb, yb = images[idx], labels[idx]
            noise = model.draw_noise(rng, xb)
            ab = np.stack([anchors[int(y)] for y in yb]) if anchors is not None else None
            loss = model.step_loss(xb, yb, noise, ab)
            T.backward(loss)
            T.sgd_step(params, optim.lr)
            T.zero_grads(params)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
        logger.debug("base epoch %d loss %.4f", epoch, history[-1])
    model.refresh_p_avg(images, feats)
    emb = model.embed(images, feats)
    ids, means = compute_prototypes(emb, labels, model.base_classes)
    model.classifier.freeze_to_prototypes(ids, means)
    if model.tip is not None:
        model.tip.freeze()
    if model.encoder is not None:
        model.encoder.freeze()
    return history


def incremental_step(model: ASPModel, images: np.ndarray, labels: np.ndarray,
                     classes: Optional[Sequence[int]] = None,
                     base_data: Optional[tuple] = None) -> None:
    """EMA-update the prompt average, then append prototypes of the new classes.

    No gradients are computed and no learned tensor other than the prompt
    average and the new classifier rows changes. ``base_data`` is an
    ``(images, labels)`` pair used only by the ``refresh_base`` ablation to
    recompute base prototypes under the updated prompts.
    """
    if not model.trained:
        raise ContractError("incremental_step: base task not trained yet")
    images = np.asarray(images, dtype=model.backbone.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    classes = sorted(set(labels.tolist())) if classes is None else [int(k) for k in classes]
    overlap = set(classes) & set(model.classifier.class_ids.tolist())
    if overlap:
        raise ContractError(f"incremental_step: classes {sorted(overlap)} already learned")
    feats = None
    if model.encoder is not None:
        feats = model.backbone_features(images)
        model.p_avg = ema_update(model.p_avg, [model.prompt_means(images, feats)], model.beta,
                                 task_index=model.task_index + 1)
    emb = model.embed(images, feats)
    ids, means = compute_prototypes(emb, labels, classes)
    model.classifier.append_prototypes(ids, means)
    if model.ablation.refresh_base:
        if base_data is None:
            raise ContractError("incremental_step: refresh_base needs the base training data")
        bx, by = base_data
        bids, bmeans = compute_prototypes(model.embed(np.asarray(bx, dtype=model.backbone.dtype)),
                                          np.asarray(by, dtype=np.int64), model.base_classes)
        model.classifier.replace_prototypes(bids, bmeans)
    model.task_index += 1


@dataclass
class EvalResult:
    accuracy: float
    base_accuracy: Optional[float]
    new_accuracy: Optional[float]
    num_samples: int
    predictions: np.ndarray = field(repr=False, default=None)


def evaluate(model: ASPModel, images: np.ndarray, labels: np.ndarray) -> EvalResult:
    """Top-1 over all seen classes, plus accuracy on base-class and new-class samples."""
    labels = np.asarray(labels, dtype=np.int64)
    preds = model.predict(images)
    correct = preds == labels
    base = np.isin(labels, model.base_classes)
    acc_b = float(correct[base].mean()) if base.any() else None
    acc_n = float(correct[~base].mean()) if (~base).any() else None
    return EvalResult(float(correct.mean()), acc_b, acc_n, int(labels.size), preds)
