"""End-to-end experiment driver: data, backbone pretraining, base task, incremental tasks.

Every random draw is taken from a named substream of the run seed, so the
same :class:`RunConfig` always yields the same bytes in ``report.json``.
"""
from __future__ import annotations

import copy
import glob
import hashlib
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import Dataset, TaskStream, class_order, generate, split_fscil
from .exceptions import ConfigError, ContractError, FormatError
from .learner import (ABLATIONS, Ablation, ASPModel, OptimConfig, evaluate, incremental_step,
                      train_base_task)
from .metrics import MetricsReport, emit
from .objective import LossConfig
from .prompts import Hyperparams
from .vit import ViTConfig, VisionTransformer

logger = logging.getLogger(__name__)

# substreams of the run seed
_PRETRAIN_STREAM, _MODEL_STREAM, _BASE_STREAM = 100, 200, 201


@dataclass
class PretrainConfig:
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 64

    def __post_init__(self):
        if not self.lr > 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("pretrain: lr > 0, epochs >= 0, batch_size >= 1 required")


@dataclass
class SplitConfig:
    pretrain_classes: int = 20
    base_classes: int = 12
    ways: int = 4
    shots: int = 5
    num_tasks: int = 5
    per_class: int = 60
    test_per_class: int = 20
    # the downstream domain: distractor amplitude on every non-pretraining class,
    # and the number of colour/contrast styles each class is rendered in
    clutter: float = 0.2
    styles: int = 4
    # None: derive the dataset from the run seed
    data_seed: Optional[int] = None

    def __post_init__(self):
        if self.pretrain_classes < 1 or self.base_classes < 1 or self.num_tasks < 0:
            raise ConfigError("split: need >= 1 pretrain and base class and num_tasks >= 0")
        if self.num_tasks and (self.ways < 1 or self.shots < 1):
            raise ConfigError("split: ways and shots must be >= 1")
        if self.per_class <= self.test_per_class or self.test_per_class < 1:
            raise ConfigError("split: per_class must exceed test_per_class >= 1")
        if self.num_tasks and self.shots > self.per_class - self.test_per_class:
            raise ConfigError("split: not enough samples per class for the requested shots")

    @property
    def num_classes(self) -> int:
        return self.pretrain_classes + self.base_classes + self.ways * self.num_tasks


_SECTIONS = {"vit": ViTConfig, "hyper": Hyperparams, "loss": LossConfig, "optim": OptimConfig,
             "pretrain": PretrainConfig, "split": SplitConfig, "ablation": Ablation}


@dataclass
class RunConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    ablation: Ablation = field(default_factory=Ablation)
    seed: int = 0

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        d["vit"]["prompt_layers"] = list(self.vit.prompt_layers)
        d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        kw = {}
        for name, typ in _SECTIONS.items():
            sub = d.get(name, {})
            if isinstance(sub, str) and name == "ablation":
                if sub not in ABLATIONS:
                    raise ConfigError(f"unknown ablation {sub!r}; choose from {sorted(ABLATIONS)}")
                kw[name] = copy.deepcopy(ABLATIONS[sub])
                continue
            if not isinstance(sub, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(typ)}
            bad = set(sub) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                kw[name] = typ(**sub)
            except TypeError as e:
                raise ConfigError(f"bad value in {name!r}: {e}") from None
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        return cls(seed=seed, **kw)

    def replace(self, **changes) -> "RunConfig":
        """Copy with top-level entries swapped, e.g. ``cfg.replace(seed=3)``."""
        d = self.to_dict()
        for k, v in changes.items():
            if k not in d:
                raise ConfigError(f"unknown config section {k!r}")
            d[k] = asdict(v) if is_dataclass(v) else v
        return RunConfig.from_dict(d)

    def config_hash(self) -> str:
        """Hash of everything except the seed, so seeds of one setting group together."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def data_seed(self) -> int:
        return self.seed if self.split.data_seed is None else self.split.data_seed


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return RunConfig.from_dict(d)


# ---------------------------------------------------------------------------
# data access with an audit trail
# ---------------------------------------------------------------------------

class DataSource:
    """Hands out slices of a dataset and records which indices were read for what.

    The runner reads training data only through :meth:`read`, so the log proves
    which samples were touched after a given phase.
    """

    def __init__(self, dataset: Dataset):
        self._dataset = dataset
        self.log: List[tuple] = []

    def read(self, indices: np.ndarray, purpose: str):
        indices = np.asarray(indices, dtype=np.int64)
        self.log.append((purpose, indices.copy()))
        return self._dataset.images[indices], self._dataset.labels[indices]

    def reads_of(self, indices: np.ndarray, after: int = 0) -> int:
        """Number of logged reads (from entry ``after`` on) touching any of ``indices``."""
        target = set(np.asarray(indices).tolist())
        return sum(1 for _, idx in self.log[after:] if target.intersection(idx.tolist()))


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def pretrain_backbone(images: np.ndarray, labels: np.ndarray, config: ViTConfig,
                      pretrain: PretrainConfig, rng: np.random.Generator,
                      fscil_classes: Sequence[int] = ()):
    """Train a ViT plus linear head with cross-entropy, drop the head, freeze the ViT.

    Returns ``(backbone, per-epoch mean loss)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    overlap = set(classes.tolist()) & set(int(k) for k in fscil_classes)
    if overlap:
        raise ConfigError(f"pretrain classes overlap FSCIL classes {sorted(overlap)}")
    rows = np.searchsorted(classes, labels)
    vit = VisionTransformer(config, rng)
    D = config.embed_dim
    head_w = T.parameter(rng.standard_normal((D, len(classes))) / np.sqrt(D), name="head.w")
    head_b = T.parameter(np.zeros(len(classes)), name="head.b")
    params = vit.parameters() + [head_w, head_b]
    images = np.asarray(images, dtype=np.float32)
    curve = []
    for epoch in range(pretrain.epochs):
        order = rng.permutation(len(rows))
        losses = []
        for s in range(0, len(rows), pretrain.batch_size):
            idx = order[s:s + pretrain.batch_size]
            loss = T.cross_entropy(T.linear(vit.features(images[idx]), head_w, head_b), rows[idx])
            T.backward(loss)
            T.sgd_step(params, pretrain.lr)
            T.zero_grads(params)
            losses.append(float(loss.data))
        curve.append(float(np.mean(losses)))
        logger.info("pretrain epoch %d loss %.4f", epoch, curve[-1])
    return vit.freeze(), curve


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    report: MetricsReport
    model: ASPModel
    stream: TaskStream
    backbone: VisionTransformer
    pretrain_curve: List[float] = field(default_factory=list)
    base_history: List[float] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    classifier_sizes: List[int] = field(default_factory=list)
    base_model: Optional[ASPModel] = None


def prepare_data(cfg: RunConfig, dataset: Optional[Dataset] = None):
    s = cfg.split
    if dataset is None:
        fscil = class_order(s.num_classes, cfg.data_seed)[s.pretrain_classes:]
        dataset = generate(s.num_classes, s.per_class, cfg.vit.image_size, cfg.vit.channels,
                           seed=cfg.data_seed, clutter=s.clutter, clutter_classes=fscil.tolist(),
                           styles=s.styles)
    stream = split_fscil(dataset, s.pretrain_classes, s.base_classes, s.ways, s.shots,
                         s.num_tasks, s.test_per_class, seed=cfg.data_seed)
    return dataset, stream


def build_backbone(cfg: RunConfig, dataset: Dataset, stream: TaskStream,
                   source: Optional[DataSource] = None):
    source = source or DataSource(dataset)
    x, y = source.read(stream.pretrain_idx, "pretrain")
    fscil = [k for task in stream.tasks for k in task.classes]
    return pretrain_backbone(x, y, cfg.vit, cfg.pretrain, T.make_rng(cfg.seed, _PRETRAIN_STREAM),
                             fscil)


def _ckpt_path(out_dir: str, t: int) -> str:
    return os.path.join(out_dir, f"ckpt_task{t}.aspc")


def _latest_checkpoint(out_dir: str, config_hash: str, seed: int):
    found = []
    for p in glob.glob(os.path.join(out_dir, "ckpt_task*.aspc")):
        m = re.search(r"ckpt_task(\d+)\.aspc$", p)
        if m:
            found.append((int(m.group(1)), p))
    for t, p in sorted(found, reverse=True):
        model, extra = ckpt.load(p)
        if extra.get("config_hash") == config_hash and extra.get("seed") == seed:
            return t, model, extra
    return None


def run_experiment(cfg: RunConfig, out_dir: Optional[str] = None, *,
                   dataset: Optional[Dataset] = None,
                   backbone: Optional[VisionTransformer] = None,
                   base_model: Optional[ASPModel] = None,
                   source: Optional[DataSource] = None,
                   resume: bool = True,
                   on_task: Optional[Callable[[int, ASPModel], None]] = None) -> RunResult:
    """Pretrain (unless ``backbone`` is given), train the base task (unless a
    trained ``base_model`` is given), then run every incremental task,
    evaluating on all seen classes after each one.

    With ``out_dir`` a checkpoint is written after every task and the run
    resumes from the newest matching checkpoint found there.
    """
    dataset, stream = prepare_data(cfg, dataset)
    source = source or DataSource(dataset)
    chash = cfg.config_hash()
    accs: List[float] = []
    base_accs: List[Optional[float]] = []
    new_accs: List[Optional[float]] = []
    sizes: List[int] = []
    checkpoints: List[str] = []
    curve: List[float] = []
    history: List[float] = []
    start, model, trained_base = 0, None, None

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        found = _latest_checkpoint(out_dir, chash, cfg.seed) if resume else None
        if found is not None:
            t, model, extra = found
            accs, base_accs, new_accs = extra["accuracies"], extra["base_accuracies"], extra["new_accuracies"]
            sizes, history = extra["classifier_sizes"], extra["base_history"]
            curve = extra.get("pretrain_curve", [])
            checkpoints = [_ckpt_path(out_dir, i) for i in range(t + 1)]
            start = t + 1
            backbone = model.backbone
            logger.info("resuming from task %d", t)

    if model is None:
        if backbone is None:
            backbone, curve = build_backbone(cfg, dataset, stream, source)
        if base_model is not None:
            model = copy.deepcopy(base_model)
            model.backbone = backbone
        else:
            model = ASPModel(backbone, stream.base.classes, cfg.hyper, cfg.loss, cfg.ablation,
                             T.make_rng(cfg.seed, _MODEL_STREAM))
            x, y = source.read(stream.base.train_idx, "base")
            history = train_base_task(model, x, y, cfg.optim, T.make_rng(cfg.seed, _BASE_STREAM))
            del x, y
        trained_base = copy.deepcopy(model)

    def record(t: int):
        xt, yt = dataset.images[stream.test_indices(t)], dataset.labels[stream.test_indices(t)]
        res = evaluate(model, xt, yt)
        accs.append(res.accuracy)
        base_accs.append(res.base_accuracy)
        new_accs.append(res.new_accuracy)
        sizes.append(model.classifier.num_classes)
        logger.info("task %d: acc %.4f (%d classes)", t, res.accuracy, sizes[-1])
        if out_dir is not None:
            path = _ckpt_path(out_dir, t)
            ckpt.save(model, path, extra={
                "config_hash": chash, "seed": cfg.seed, "config": cfg.to_dict(),
                "accuracies": accs, "base_accuracies": base_accs, "new_accuracies": new_accs,
                "classifier_sizes": sizes, "base_history": history, "pretrain_curve": curve})
            checkpoints.append(path)
        if on_task is not None:
            on_task(t, model)

    for t in range(start, len(stream.tasks)):
        if t > 0:
            task = stream.tasks[t]
            x, y = source.read(task.train_idx, f"task{t}")
            base = source.read(stream.base.train_idx, "refresh") if cfg.ablation.refresh_base else None
            incremental_step(model, x, y, task.classes, base)
        record(t)

    report = MetricsReport(accs, base_accs, new_accs, chash, cfg.seed, cfg.ablation.label)
    if out_dir is not None:
        emit(report, out_dir)
    return RunResult(report, model, stream, backbone, curve, history, checkpoints, sizes,
                     trained_base)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def run_ablations(cfg: RunConfig, names: Sequence[str] = tuple(ABLATIONS), seeds: Sequence[int] = (0,),
                  out_dir: Optional[str] = None) -> Dict[str, List[MetricsReport]]:
    """Every ablation on every seed; the pretrained backbone is shared per seed."""
    out: Dict[str, List[MetricsReport]] = {n: [] for n in names}
    for seed in seeds:
        base_cfg = cfg.replace(seed=seed)
        dataset, stream = prepare_data(base_cfg)
        backbone, _ = build_backbone(base_cfg, dataset, stream)
        for name in names:
            run_cfg = base_cfg.replace(ablation=ABLATIONS[name])
            sub = None if out_dir is None else os.path.join(out_dir, name, f"seed{seed}")
            res = run_experiment(run_cfg, sub, dataset=dataset, backbone=backbone)
            res.report.label = name
            out[name].append(res.report)
    return out


def run_shot_sweep(cfg: RunConfig, shots: Sequence[int] = (1, 5, 10), seeds: Sequence[int] = (0,),
                   out_dir: Optional[str] = None) -> Dict[int, List[MetricsReport]]:
    """A_avg as a function of K. The base task does not depend on K, so it is trained once per seed."""
    out: Dict[int, List[MetricsReport]] = {k: [] for k in shots}
    for seed in seeds:
        base_model = backbone = None
        dataset = prepare_data(cfg.replace(seed=seed))[0]
        for k in shots:
            split = asdict(cfg.split)
            split["shots"] = k
            run_cfg = cfg.replace(seed=seed, split=split)
            sub = None if out_dir is None else os.path.join(out_dir, f"K{k}", f"seed{seed}")
            res = run_experiment(run_cfg, sub, dataset=dataset, backbone=backbone,
                                 base_model=base_model)
            backbone, base_model = res.backbone, res.base_model
            out[k].append(res.report)
    return out
