"""scikit-learn style estimators.

``BackbonePretrainer`` fits a ViT with a throw-away linear head and exposes the
frozen feature extractor. ``ASPClassifier`` learns prompts on a base task with
``fit`` and absorbs each few-shot task with ``partial_fit`` (no gradients).

    >>> pre = BackbonePretrainer(epochs=10).fit(X_pre, y_pre)
    >>> clf = ASPClassifier(backbone=pre.backbone_).fit(X_base, y_base)
    >>> clf.partial_fit(X_new, y_new).score(X_test, y_test)
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from ._validation import check_images, check_images_labels
from .exceptions import ConfigError, ContractError
from .learner import Ablation, ASPModel, OptimConfig, evaluate, incremental_step, train_base_task
from .objective import LossConfig
from .prompts import Hyperparams
from .runner import PretrainConfig, pretrain_backbone
from .vit import ViTConfig, VisionTransformer


class BackbonePretrainer(TransformerMixin, BaseEstimator):
    """Supervised ViT pretraining; ``transform`` returns frozen class-token features."""

    def __init__(self, image_size=32, channels=3, patch_size=8, embed_dim=64, num_layers=6,
                 num_heads=4, mlp_ratio=2, prompt_layers=(0, 1, 2, 3, 4), lr=0.05, epochs=30,
                 batch_size=64, random_state=0):
        self.image_size = image_size
        self.channels = channels
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.prompt_layers = prompt_layers
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def vit_config(self) -> ViTConfig:
        return ViTConfig(self.image_size, self.channels, self.patch_size, self.embed_dim,
                         self.num_layers, self.num_heads, self.mlp_ratio, tuple(self.prompt_layers))

    def fit(self, X, y):
        cfg = self.vit_config()
        X, y = check_images_labels(X, y, cfg)
        rng = T.make_rng(self.random_state, 10)
        self.backbone_, self.loss_curve_ = pretrain_backbone(
            X, y, cfg, PretrainConfig(self.lr, self.epochs, self.batch_size), rng)
        self.classes_ = np.unique(y)
        return self

    def transform(self, X):
        check_is_fitted(self, "backbone_")
        X = check_images(X, self.backbone_.config)
        with T.no_grad():
            return np.concatenate([self.backbone_.features(X[s:s + 256]).data
                                   for s in range(0, len(X), 256)])


class ASPClassifier(ClassifierMixin, BaseEstimator):
    """Prompt-tuned prototype classifier for few-shot class-incremental learning.

    ``fit`` trains task-invariant prompts, the prompt encoder and a cosine
    classifier on the base task, then swaps the classifier for class means.
    ``partial_fit`` handles one incremental task: it moves the prompt average
    towards the new data and appends the new class means. Nothing else changes.
    """

    def __init__(self, backbone=None, alpha=0.8, beta=0.99, lam=0.1, kl_weight=1.0,
                 temperature=0.05, prompt_length=3, input_noise=0.05, reparameterize=True,
                 encoder_hidden=256, lr=0.01, epochs=20, batch_size=48, no_tip=False,
                 no_tsp=False, no_anchor=False, diff_tip=False, no_pavg=False,
                 frozen_pavg=False, random_state=0):
        self.backbone = backbone
        self.alpha = alpha
        self.beta = beta
        self.lam = lam
        self.kl_weight = kl_weight
        self.temperature = temperature
        self.prompt_length = prompt_length
        self.input_noise = input_noise
        self.reparameterize = reparameterize
        self.encoder_hidden = encoder_hidden
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.no_tip = no_tip
        self.no_tsp = no_tsp
        self.no_anchor = no_anchor
        self.diff_tip = diff_tip
        self.no_pavg = no_pavg
        self.frozen_pavg = frozen_pavg
        self.random_state = random_state

    # -- config views ----------------------------------------------------
    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.alpha, self.beta, self.prompt_length, self.input_noise,
                           self.reparameterize, self.encoder_hidden)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lam, self.kl_weight, self.temperature)

    def ablation(self) -> Ablation:
        return Ablation(self.no_tip, self.no_tsp, self.no_anchor, self.diff_tip,
                        self.no_pavg, self.frozen_pavg)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(self.lr, self.epochs, self.batch_size)

    def _check_backbone(self) -> VisionTransformer:
        if not isinstance(self.backbone, VisionTransformer):
            raise ConfigError("ASPClassifier needs a pretrained VisionTransformer as `backbone`")
        if not self.backbone.frozen:
            raise ConfigError("ASPClassifier: backbone must be frozen")
        return self.backbone

    # -- fitting ---------------------------------------------------------
    def fit(self, X, y):
        backbone = self._check_backbone()
        X, y = check_images_labels(X, y, backbone.config)
        classes = [int(k) for k in np.unique(y)]
        model = ASPModel(backbone, classes, self.hyperparams(), self.loss_config(),
                         self.ablation(), T.make_rng(self.random_state, 20))
        self.history_ = train_base_task(model, X, y, self.optim_config(),
                                        T.make_rng(self.random_state, 21))
        self.model_ = model
        self.classes_ = np.asarray(classes)
        self.base_classes_ = np.asarray(classes)
        self.n_tasks_ = 1
        return self

    def partial_fit(self, X, y):
        check_is_fitted(self, "model_")
        X, y = check_images_labels(X, y, self.model_.backbone.config)
        new = [int(k) for k in np.unique(y)]
        incremental_step(self.model_, X, y, new)
        self.classes_ = np.concatenate([self.classes_, new])
        self.n_tasks_ += 1
        return self

    # -- inference -------------------------------------------------------
    def transform(self, X) -> np.ndarray:
        """Eval-mode prompted class-token features."""
        check_is_fitted(self, "model_")
        return self.model_.embed(check_images(X, self.model_.backbone.config))

    def decision_function(self, X) -> np.ndarray:
        emb = self.transform(X)
        return self.model_.classifier.similarities(emb)

    def predict(self, X) -> np.ndarray:
        emb = self.transform(X)
        return self.model_.classifier.predict(emb)

    def evaluate(self, X, y):
        check_is_fitted(self, "model_")
        X, y = check_images_labels(X, y, self.model_.backbone.config)
        return evaluate(self.model_, X, y)

    @classmethod
    def from_model(cls, model: ASPModel, random_state: int = 0, n_tasks: Optional[int] = None,
                   **params) -> "ASPClassifier":
        """Wrap an already trained :class:`ASPModel` (e.g. one restored from a checkpoint)."""
        h, lc, ab = model.hyper, model.loss, model.ablation.to_dict()
        if ab.pop("refresh_base"):
            raise ContractError("from_model: refresh_base needs base data, which partial_fit never holds")
        clf = cls(backbone=model.backbone, alpha=h.alpha, beta=h.beta, lam=lc.lam,
                  kl_weight=lc.kl_weight, temperature=lc.temperature, prompt_length=h.prompt_length,
                  input_noise=h.input_noise, reparameterize=h.reparameterize,
                  encoder_hidden=h.encoder_hidden, random_state=random_state,
                  **ab, **params)
        clf.model_ = model
        clf.classes_ = model.classifier.class_ids.copy()
        clf.base_classes_ = np.asarray(model.base_classes)
        clf.n_tasks_ = model.task_index + 1 if n_tasks is None else n_tasks
        return clf
