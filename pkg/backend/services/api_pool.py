"""
Pool of black-box classifier APIs.

Each API wraps a pre-trained classifier behind probability-only inference and
counts every input it is asked about. The wrapped module is held inside
closures; ApiHandle exposes no attribute that reaches its parameters.
"""

import json
import os
import threading
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from config import PretrainConfig, ScenarioConfig
from services.data_sources import DataSource
from services.errors import ConfigurationError, InputError, WhiteboxPermissionError
from services.networks import arch_fits, seeded_network
from utils.logger import app_logger

__all__ = [
    "ApiHandle",
    "ScenarioConfig",
    "DataSource",
    "WhiteboxToken",
    "build_pool",
    "infer",
    "infer_whitebox",
    "pool_queries",
    "cover_rate",
    "pool_summary",
    "save_pool",
    "load_pool",
]


@dataclass
class WhiteboxToken:
    """Handle on one whitebox inference call; yields exact input gradients of losses on its outputs."""

    inputs: torch.Tensor
    _probs: torch.Tensor

    def input_grad(self, loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]) -> torch.Tensor:
        """
        Exact gradient of a per-datum loss w.r.t. the queried inputs.

        Args:
            loss_fn: maps (inputs, probabilities) to per-datum losses; both
                arguments are differentiable

        Returns:
            Tensor shaped like the inputs
        """
        loss = loss_fn(self.inputs, self._probs).sum()
        (grad,) = torch.autograd.grad(loss, self.inputs, retain_graph=True)
        return grad


def _seal(module: nn.Module, whitebox: bool):
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    dtype = next(module.parameters()).dtype

    @torch.no_grad()
    def predict(inputs: torch.Tensor) -> torch.Tensor:
        return F.softmax(module(inputs.to(dtype)), dim=-1)

    def predict_with_graph(inputs: torch.Tensor) -> WhiteboxToken:
        x = inputs.detach().to(dtype).requires_grad_(True)
        return WhiteboxToken(x, F.softmax(module(x), dim=-1))

    def export() -> dict:
        return {k: v.detach().clone() for k, v in module.state_dict().items()}

    return predict, (predict_with_graph if whitebox else None), export


class ApiHandle:
    __slots__ = (
        "api_id",
        "label_space",
        "arch_tag",
        "input_shape",
        "reported_accuracy",
        "flagged",
        "source_id",
        "_predict",
        "_predict_with_graph",
        "_export",
        "_lock",
        "_query_count",
    )

    def __init__(
        self,
        api_id: int,
        label_space: list[int],
        arch_tag: str,
        input_shape: tuple[int, ...],
        module: nn.Module,
        reported_accuracy: float = 0.0,
        flagged: bool = False,
        source_id: str = "",
        whitebox: bool = False,
    ):
        if len(set(label_space)) != len(label_space):
            raise InputError(f"API {api_id}: label_space entries must be distinct")
        self.api_id = api_id
        self.label_space = tuple(int(c) for c in label_space)
        self.arch_tag = arch_tag
        self.input_shape = tuple(input_shape)
        self.reported_accuracy = float(reported_accuracy)
        self.flagged = flagged
        self.source_id = source_id
        self._predict, self._predict_with_graph, self._export = _seal(module, whitebox)
        self._lock = threading.Lock()
        self._query_count = 0

    def __repr__(self):
        return (
            f"ApiHandle(api_id={self.api_id}, arch_tag={self.arch_tag!r}, "
            f"ways={self.ways}, accuracy={self.reported_accuracy:.3f}, queries={self.query_count})"
        )

    @property
    def ways(self) -> int:
        return len(self.label_space)

    @property
    def whitebox(self) -> bool:
        return self._predict_with_graph is not None

    @property
    def query_count(self) -> int:
        return self._query_count

    def _charge(self, inputs: torch.Tensor) -> int:
        if tuple(inputs.shape[1:]) != self.input_shape:
            raise InputError(
                f"API {self.api_id} expects inputs of shape {self.input_shape}, got {tuple(inputs.shape[1:])}"
            )
        n = int(inputs.shape[0])
        with self._lock:
            self._query_count += n
        return n


def infer(api: ApiHandle, inputs: torch.Tensor) -> torch.Tensor:
    """Probability vectors for a batch of inputs; charges one query per input."""
    api._charge(inputs)
    return api._predict(inputs)


def infer_whitebox(api: ApiHandle, inputs: torch.Tensor) -> tuple[torch.Tensor, WhiteboxToken]:
    """Same outputs and accounting as infer, plus a token for exact input gradients."""
    if not api.whitebox:
        raise WhiteboxPermissionError(f"API {api.api_id} was built without whitebox access")
    api._charge(inputs)
    token = api._predict_with_graph(inputs)
    return token._probs.detach(), token


def pool_queries(pool: list[ApiHandle]) -> int:
    return sum(api.query_count for api in pool)


def _pretrain(
    model: nn.Module,
    inputs: torch.Tensor,
    labels: torch.Tensor,
    cfg: PretrainConfig,
    generator: torch.Generator,
) -> None:
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    model.train()
    n = inputs.shape[0]
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=generator)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.numel() < 2:
                continue
            optimizer.zero_grad()
            loss = F.cross_entropy(model(inputs[idx]), labels[idx], label_smoothing=cfg.label_smoothing)
            loss.backward()
            optimizer.step()
    model.eval()


@torch.no_grad()
def _accuracy(model: nn.Module, inputs: torch.Tensor, labels: torch.Tensor) -> float:
    model.eval()
    return float((model(inputs).argmax(-1) == labels).float().mean())


def build_pool(
    cfg: ScenarioConfig,
    sources: list[DataSource],
    seed: int,
    pretrain: PretrainConfig | None = None,
    whitebox: bool = False,
    dtype: torch.dtype = torch.float32,
) -> list[ApiHandle]:
    """
    Pre-train cfg.num_apis APIs, each on an N-class subset of one source's meta-train classes.

    APIs cycle through the sources and through the architectures that fit the
    input shape, so every source and architecture appears once the pool is at
    least as large as the menus.
    """
    pretrain = pretrain or PretrainConfig()
    if not sources:
        raise ConfigurationError("build_pool needs at least one source")
    if len(sources) != len(cfg.source_distributions):
        raise ConfigurationError(
            f"{len(cfg.source_distributions)} source distributions configured, {len(sources)} supplied"
        )
    for source in sources:
        if source.split != "meta_train":
            raise ConfigurationError(f"{source.source_id}: APIs may only be trained on meta_train classes")
        if len(source.class_ids) < cfg.ways:
            raise ConfigurationError(
                f"{source.source_id} has {len(source.class_ids)} meta-train classes, {cfg.ways} needed"
            )

    holdout_per_class = max(1, pretrain.holdout // cfg.ways)
    pool = []
    for api_id in tqdm(range(cfg.num_apis), desc="Pre-training APIs", disable=None):
        source = sources[api_id % len(sources)]
        menu = [a for a in cfg.arch_menu if arch_fits(a, source.input_shape)]
        if not menu:
            raise ConfigurationError(f"No architecture in {cfg.arch_menu} fits {source.input_shape}")
        arch_tag = menu[api_id % len(menu)]

        rng = np.random.default_rng([seed, api_id])
        label_space = [int(c) for c in rng.choice(source.class_ids, size=cfg.ways, replace=False)]
        generator = torch.Generator().manual_seed(int(rng.integers(2**31)))
        (train_x, train_y), (hold_x, hold_y) = source.draw_disjoint(
            label_space, (pretrain.per_class, holdout_per_class), generator
        )

        model = seeded_network(arch_tag, source.input_shape, cfg.ways,
                               seed=int(rng.integers(2**31)), dtype=dtype)
        _pretrain(model, train_x.to(dtype), train_y, pretrain, generator)
        accuracy = _accuracy(model, hold_x.to(dtype), hold_y)
        flagged = accuracy < pretrain.accuracy_floor
        if flagged:
            app_logger.warning(
                f"API {api_id} ({arch_tag}) reached only {accuracy:.3f} held-out accuracy; keeping it flagged"
            )

        pool.append(ApiHandle(api_id, label_space, arch_tag, source.input_shape, model,
                              reported_accuracy=accuracy, flagged=flagged,
                              source_id=source.source_id, whitebox=whitebox))

    app_logger.info(
        f"Built {cfg.scenario} pool of {len(pool)} APIs, "
        f"mean reported accuracy {np.mean([a.reported_accuracy for a in pool]):.3f}"
    )
    return pool


def cover_rate(pool: list[ApiHandle], sources: list[DataSource]) -> float:
    """Fraction of meta-train classes that appear in at least one API label space."""
    all_classes = {c for s in sources for c in s.class_ids}
    if not all_classes:
        return 0.0
    covered = {c for api in pool for c in api.label_space} & all_classes
    return len(covered) / len(all_classes)


def pool_summary(pool: list[ApiHandle], bins: int = 10) -> dict:
    accuracies = np.array([api.reported_accuracy for api in pool])
    counts, edges = np.histogram(accuracies, bins=bins, range=(0.0, 1.0))
    return {
        "num_apis": len(pool),
        "mean_accuracy": float(accuracies.mean()) if len(pool) else 0.0,
        "flagged": sum(api.flagged for api in pool),
        "accuracy_histogram": {"counts": counts.tolist(), "edges": edges.round(3).tolist()},
        "architectures": sorted({api.arch_tag for api in pool}),
    }


def save_pool(pool: list[ApiHandle], directory: str) -> str:
    """Write one checkpoint per API plus a manifest.json; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    records = []
    for api in pool:
        checkpoint = f"api_{api.api_id}.pt"
        torch.save(
            {"arch_tag": api.arch_tag, "input_shape": api.input_shape,
             "ways": api.ways, "state_dict": api._export()},
            os.path.join(directory, checkpoint),
        )
        records.append({
            "api_id": api.api_id,
            "arch_tag": api.arch_tag,
            "label_space": list(api.label_space),
            "reported_accuracy": api.reported_accuracy,
            "flagged": api.flagged,
            "source_id": api.source_id,
            "input_shape": list(api.input_shape),
            "checkpoint": checkpoint,
        })
    manifest = os.path.join(directory, "manifest.json")
    with open(manifest, "w") as f:
        json.dump({"apis": records}, f, indent=2)
    app_logger.info(f"Saved pool manifest with {len(records)} APIs to {manifest}")
    return manifest


def load_pool(directory: str, whitebox: bool = False) -> list[ApiHandle]:
    manifest = os.path.join(directory, "manifest.json")
    try:
        with open(manifest) as f:
            records = json.load(f)["apis"]
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read pool manifest {manifest}: {e}") from e

    pool = []
    for record in records:
        blob = torch.load(os.path.join(directory, record["checkpoint"]), weights_only=True)
        input_shape = tuple(record["input_shape"])
        model = seeded_network(record["arch_tag"], input_shape, len(record["label_space"]), seed=0)
        dtype = next(iter(blob["state_dict"].values())).dtype
        model = model.to(dtype)
        model.load_state_dict(blob["state_dict"])
        pool.append(ApiHandle(record["api_id"], record["label_space"], record["arch_tag"],
                              input_shape, model, reported_accuracy=record["reported_accuracy"],
                              flagged=record["flagged"], source_id=record["source_id"],
                              whitebox=whitebox))
    app_logger.info(f"Loaded {len(pool)} APIs from {manifest}")
    return pool
