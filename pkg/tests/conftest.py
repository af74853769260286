import numpy as np
import pytest

from asp_fscil import tensor as T
from asp_fscil.learner import Ablation, ASPModel, OptimConfig, train_base_task
from asp_fscil.objective import LossConfig
from asp_fscil.prompts import Hyperparams
from asp_fscil.runner import RunConfig
from asp_fscil.vit import ViTConfig, VisionTransformer


# PASS/FAIL lines from the acceptance tests, printed in the terminal summary
RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split(".")[0].split()[-1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vit_config():
    return ViTConfig(image_size=8, channels=3, patch_size=4, embed_dim=16, num_layers=2,
                     num_heads=2, mlp_ratio=2, prompt_layers=(0, 1))


@pytest.fixture
def tiny_backbone(tiny_vit_config):
    return VisionTransformer(tiny_vit_config, T.make_rng(0, 1)).freeze()


@pytest.fixture
def tiny_images(rng):
    return rng.uniform(0.0, 1.0, size=(12, 8, 8, 3)).astype(np.float32)


def tiny_run_config(**split) -> RunConfig:
    """A run that finishes in a few seconds: 8x8 images, 2 layers, few classes."""
    s = dict(pretrain_classes=3, base_classes=3, ways=2, shots=2, num_tasks=2,
             per_class=10, test_per_class=4)
    s.update(split)
    return RunConfig.from_dict({
        "vit": {"image_size": 8, "patch_size": 4, "embed_dim": 16, "num_layers": 2,
                "num_heads": 2, "prompt_layers": [0, 1]},
        "hyper": {"encoder_hidden": 16},
        "optim": {"epochs": 2, "batch_size": 8},
        "pretrain": {"epochs": 2, "batch_size": 8},
        "split": s,
        "seed": 0,
    })


@pytest.fixture
def tiny_cfg():
    return tiny_run_config()


def make_model(backbone, classes=(0, 1), ablation=None, seed=0, **hyper):
    h = dict(encoder_hidden=16)
    h.update(hyper)
    return ASPModel(backbone, list(classes), Hyperparams(**h), LossConfig(),
                    ablation or Ablation(), T.make_rng(seed, 7))


@pytest.fixture
def trained_tiny_model(tiny_backbone, rng):
    images = rng.uniform(0, 1, size=(8, 8, 8, 3)).astype(np.float32)
    labels = np.array([0, 1] * 4)
    model = make_model(tiny_backbone)
    train_base_task(model, images, labels, OptimConfig(lr=0.01, epochs=2, batch_size=4),
                    T.make_rng(0, 8))
    return model
