import os
import sys

import pytest
import torch
from torch import nn

sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from config import Config, PretrainConfig, RunConfig, ScenarioConfig
from services.api_pool import ApiHandle, build_pool
from services.data_sources import gaussian_source

TINY_DIM = 4


class FixedLinear(nn.Module):
    """Linear classifier with hand-set weights, for APIs whose outputs tests can predict"""

    def __init__(self, weight: torch.Tensor, bias: torch.Tensor | None = None):
        super().__init__()
        self.linear = nn.Linear(weight.shape[1], weight.shape[0])
        with torch.no_grad():
            self.linear.weight.copy_(weight)
            self.linear.bias.copy_(bias if bias is not None else torch.zeros(weight.shape[0]))

    def forward(self, x):
        return self.linear(x.flatten(1))


class ConstantLogits(nn.Module):
    """Ignores its input; every query gets the same logits"""

    def __init__(self, logits: torch.Tensor, dim: int):
        super().__init__()
        self.logits = nn.Parameter(logits.clone())
        self.dim = dim

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1) + 0.0 * x.flatten(1).sum(-1, keepdim=True)


def make_api(module: nn.Module, ways: int, dim: int = TINY_DIM, api_id: int = 0,
             whitebox: bool = False, label_space=None) -> ApiHandle:
    return ApiHandle(api_id, label_space or list(range(ways)), "stub", (dim,), module,
                     reported_accuracy=1.0, whitebox=whitebox)


@pytest.fixture(autouse=True)
def isolated_registry(tmp_path, monkeypatch):
    """Keep the run registry of every test in its own SQLite file"""
    monkeypatch.setattr(Config, "DATABASE_URL", f"sqlite:///{tmp_path}/registry/runs.db")


@pytest.fixture(scope="session")
def tiny_sources():
    """Twelve 4-d Gaussian classes: eight for meta-training, four held out"""
    return gaussian_source("gaussian:0", num_classes=12, dim=TINY_DIM, samples_per_class=120,
                           meta_train_classes=8, seed=0)


@pytest.fixture
def linear_api():
    """2-way whitebox-capable API that splits the unit cube at x0 = 0.5"""
    weight = torch.zeros(2, TINY_DIM)
    weight[0, 0], weight[1, 0] = 4.0, -4.0
    return make_api(FixedLinear(weight, torch.tensor([-2.0, 2.0])), ways=2, whitebox=True)


@pytest.fixture
def double_api():
    """3-way API in double precision for finite-difference checks"""
    module = FixedLinear(torch.randn(3, TINY_DIM, generator=torch.Generator().manual_seed(7))).double()
    return make_api(module, ways=3, whitebox=True)


@pytest.fixture(scope="session")
def tiny_pool(tiny_sources):
    """Three quickly pre-trained 2-way MLP APIs over the tiny meta-train split"""
    train, _ = tiny_sources
    cfg = ScenarioConfig(scenario="SS", num_apis=3, ways=2,
                         source_distributions=("gaussian:0",), arch_menu=("mlp-1x8",))
    return build_pool(cfg, [train], seed=0,
                      pretrain=PretrainConfig(epochs=5, per_class=20, holdout=20, accuracy_floor=0.0))


TINY_RUN = {
    "scenario": "SS",
    "num_apis": 3,
    "ways": 2,
    "sources": ("gaussian:0",),
    "arch_menu": ("mlp-1x8",),
    "meta_arch": "mlp-1x8",
    "gaussian_dim": TINY_DIM,
    "source_classes": 12,
    "meta_train_classes": 8,
    "samples_per_class": 120,
    "pretrain_epochs": 2,
    "pretrain_per_class": 10,
    "accuracy_floor": 0.0,
    "latent_dim": 4,
    "gen_nf": 2,
    "gen_mode": "dense",
    "q": 3,
    "recover_epochs": 2,
    "batch_per_set": 4,
    "inner_steps": 1,
    "max_iterations": 2,
    "batch_size": 2,
    "replay_query_shots": 2,
    "query_shots": 3,
    "num_episodes": 4,
    "adapt_steps": 2,
    "distill_avg_steps": 2,
}


@pytest.fixture
def tiny_run(tmp_path):
    """Seconds-scale RunConfig writing into a temporary output directory"""
    return RunConfig(**TINY_RUN, output_dir=str(tmp_path / "outputs"))
