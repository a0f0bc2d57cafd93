"""
Per-API task recovery.

A support set is recovered by driving generated inputs toward confident API
predictions for their assigned labels. A query set is recovered the same way
under the boundary objective, which additionally rewards inputs on which the
task-specific model agrees with the API in argmax but not in distribution.
Gradients with respect to the inputs come from a pluggable strategy (zero-order
by default, exact for whitebox pools).
"""

from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Literal

import torch

from config import BoundaryConfig, ZoConfig
from services import generator as gen_ops
from services.api_pool import ApiHandle, infer
from services.errors import ConfigurationError, DfmlError, InputError, RecoveryError
from services.generator import GeneratorState, LatentBatch
from services.losses import boundary_eta, boundary_loss, ce_loss, kl_divergence
from services.zo_grad import GradEstimate, ZerothOrderGradient, direction_stream, estimated_generator_grads
from utils.logger import app_logger

__all__ = [
    "BoundaryConfig",
    "RecoveredBatch",
    "TaskEpisode",
    "balanced_labels",
    "boundary_eta",
    "boundary_loss",
    "ce_loss",
    "kl_divergence",
    "label_fidelity",
    "load_episodes",
    "recover_query",
    "recover_support",
    "save_episodes",
    "soft_labels",
    "split_episode",
]

Origin = Literal["recovered", "interpolated", "real"]
# Maps inputs (..., *shape) to probabilities (..., N)
TaskModel = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class RecoveredBatch:
    inputs: torch.Tensor
    labels: torch.Tensor
    api_id: int
    label_space: tuple[int, ...] = ()
    queries_used: int = 0
    api_probs: torch.Tensor | None = field(default=None, repr=False)
    loss_trajectory: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise InputError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        self.label_space = tuple(self.label_space)

    def __len__(self):
        return self.inputs.shape[0]

    def global_labels(self) -> torch.Tensor:
        """Labels as global class ids instead of positions."""
        if not self.label_space:
            return self.labels.clone()
        return torch.tensor(self.label_space, dtype=torch.long)[self.labels]


@dataclass
class TaskEpisode:
    support: RecoveredBatch
    query: RecoveredBatch
    api_id: int
    origin: Origin = "recovered"

    @property
    def ways(self) -> int:
        return int(torch.cat([self.support.labels, self.query.labels]).max()) + 1

    @property
    def label_space(self) -> tuple[int, ...]:
        return self.support.label_space


def balanced_labels(ways: int, batch: int) -> torch.Tensor:
    """Class positions 0..ways-1, each repeated batch // ways times."""
    if batch % ways:
        raise ConfigurationError(f"batch_per_set {batch} is not divisible by {ways} ways")
    return torch.arange(ways).repeat_interleave(batch // ways)


def soft_labels(api: ApiHandle, batch: RecoveredBatch) -> torch.Tensor:
    """API predictions on a fixed batch, queried once and cached on the batch."""
    if batch.api_probs is None:
        if batch.api_id != api.api_id:
            raise InputError(f"batch was recovered from API {batch.api_id}, not {api.api_id}")
        batch.api_probs = infer(api, batch.inputs)
        batch.queries_used += len(batch)
    return batch.api_probs


def label_fidelity(batch: RecoveredBatch) -> float:
    """Fraction of cached API argmaxes that equal the assigned labels."""
    if batch.api_probs is None or not len(batch):
        return float("nan")
    return float((batch.api_probs.argmax(-1) == batch.labels).float().mean())


def _check_labels(api: ApiHandle, latents: LatentBatch) -> None:
    labels = latents.labels
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= api.ways):
        raise InputError(f"target labels must be positions in the {api.ways}-way label space of API {api.api_id}")
    if len(labels) % api.ways == 0:
        counts = torch.bincount(labels, minlength=api.ways)
        if (counts != counts[0]).any():
            raise InputError(f"target labels are not balanced across {api.ways} classes: {counts.tolist()}")


def _label_view(labels: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    # (B,) -> (B, 1, ...) so labels broadcast over the evaluation points of each datum
    return labels.view(labels.shape[0], *([1] * (probs.dim() - 2)))


def _recover(
    api: ApiHandle,
    gen: GeneratorState,
    latents: LatentBatch,
    cfg: BoundaryConfig,
    input_grads: Callable[[torch.Tensor], GradEstimate],
    phase: str,
) -> RecoveredBatch:
    _check_labels(api, latents)
    start = api.query_count
    trajectory = []
    for epoch in range(cfg.recover_epochs):
        x_hat = gen_ops.forward(gen, latents)
        try:
            estimate = input_grads(x_hat.detach())
        except DfmlError as e:
            used = api.query_count - start
            app_logger.error(f"{phase} recovery for API {api.api_id} failed at epoch {epoch} after {used} queries: {e}")
            raise RecoveryError(f"{phase} recovery for API {api.api_id} failed at epoch {epoch}: {e}", used) from e
        if estimate.base_values is not None:
            trajectory.append(float(estimate.base_values.mean()))
        grads = estimated_generator_grads(estimate, gen_ops.jacobian_products(gen, latents, x_hat))
        gen_ops.apply_estimated_grads(gen, latents, grads, cfg.gen_lr)

    with torch.no_grad():
        inputs = gen_ops.forward(gen, latents).detach()
    used = api.query_count - start
    if trajectory:
        app_logger.debug(
            f"{phase} recovery for API {api.api_id}: loss {trajectory[0]:.4f} -> {trajectory[-1]:.4f}, {used} queries"
        )
    return RecoveredBatch(inputs, latents.labels.clone(), api.api_id, api.label_space,
                          queries_used=used, loss_trajectory=trajectory)


def _default_gradient(zo: ZoConfig) -> ZerothOrderGradient:
    return ZerothOrderGradient(zo, direction_stream(zo.seed))


def recover_support(
    api: ApiHandle,
    gen: GeneratorState,
    latents: LatentBatch,
    cfg: BoundaryConfig,
    zo: ZoConfig,
    gradient=None,
) -> RecoveredBatch:
    """
    Recover a labeled support batch from one API by minimizing per-datum CE.

    Args:
        api: the API to invert
        gen: a fresh generator state
        latents: trainable latents with balanced target positions
        cfg: epochs, generator learning rate
        zo: estimator settings used when no gradient strategy is given
        gradient: ZerothOrderGradient or WhiteboxGradient

    Returns:
        RecoveredBatch with the final generation and the queries it consumed
    """
    gradient = gradient or _default_gradient(zo)

    def objective(points: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
        return ce_loss(probs, _label_view(latents.labels, probs))

    return _recover(api, gen, latents, cfg,
                    lambda x: gradient.input_grads(api, objective, x), "support")


def recover_query(
    api: ApiHandle,
    task_model: TaskModel,
    gen: GeneratorState,
    latents: LatentBatch,
    cfg: BoundaryConfig,
    zo: ZoConfig,
    gradient=None,
) -> RecoveredBatch:
    """
    Recover a boundary query batch from one API.

    By default the whole boundary loss is the black-box scalar handed to the
    gradient strategy. With cfg.exact_task_branch the task-model term is frozen
    inside the black-box scalar and its own input gradient is added exactly.
    """
    gradient = gradient or _default_gradient(zo)
    labels = latents.labels

    def task_probs_at(points: torch.Tensor) -> torch.Tensor:
        lead = points.shape[: points.dim() - len(api.input_shape)]
        return task_model(points.reshape(-1, *api.input_shape)).view(*lead, -1)

    def objective(points: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
        if isinstance(gradient, ZerothOrderGradient):
            with torch.no_grad():
                task_probs = task_probs_at(points)
        else:
            task_probs = task_probs_at(points)
        return boundary_loss(probs, _label_view(labels, probs), task_probs.to(probs.dtype), cfg.lambda_q)

    if not cfg.exact_task_branch or cfg.lambda_q == 0:
        return _recover(api, gen, latents, cfg,
                        lambda x: gradient.input_grads(api, objective, x), "query")

    def split_grads(x: torch.Tensor) -> GradEstimate:
        with torch.no_grad():
            frozen_task = task_probs_at(x)

        def api_branch(points: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
            task = frozen_task.view(frozen_task.shape[0], *([1] * (probs.dim() - 2)), -1).expand_as(probs)
            return boundary_loss(probs, _label_view(labels, probs), task.to(probs.dtype), cfg.lambda_q)

        estimate = gradient.input_grads(api, api_branch, x)
        api_base = estimate.base_probs.detach()
        eta = boundary_eta(frozen_task, api_base)
        x_leaf = x.detach().requires_grad_(True)
        task_term = -(cfg.lambda_q * eta * kl_divergence(task_probs_at(x_leaf), api_base.to(x.dtype))).sum()
        if task_term.requires_grad:
            (task_grad,) = torch.autograd.grad(task_term, x_leaf, allow_unused=True)
            if task_grad is not None:
                estimate = GradEstimate(estimate.grad + task_grad, estimate.queries_used,
                                        estimate.base_values, estimate.base_probs)
        return estimate

    return _recover(api, gen, latents, cfg, split_grads, "query")


def split_episode(support: RecoveredBatch, query: RecoveredBatch, allow_empty: bool = False) -> TaskEpisode:
    if support.api_id != query.api_id:
        raise InputError(f"support from API {support.api_id} cannot pair with query from API {query.api_id}")
    if support.label_space != query.label_space:
        raise InputError("support and query were recovered under different label spaces")
    if not allow_empty and (len(support) == 0 or len(query) == 0):
        raise InputError("episode needs a non-empty support and query set")
    return TaskEpisode(support, query, support.api_id, origin="recovered")


def _batch_record(batch: RecoveredBatch) -> dict:
    return {
        "inputs": batch.inputs,
        "labels": batch.labels,
        "api_id": batch.api_id,
        "label_space": list(batch.label_space),
        "queries_used": batch.queries_used,
        "api_probs": batch.api_probs,
    }


def _batch_from(record: dict) -> RecoveredBatch:
    return RecoveredBatch(record["inputs"], record["labels"], record["api_id"], tuple(record["label_space"]),
                          queries_used=record["queries_used"], api_probs=record["api_probs"])


def episode_records(episodes: list[TaskEpisode]) -> list[dict]:
    return [
        {"support": _batch_record(e.support), "query": _batch_record(e.query), "api_id": e.api_id, "origin": e.origin}
        for e in episodes
    ]


def episodes_from(records: list[dict]) -> list[TaskEpisode]:
    return [TaskEpisode(_batch_from(r["support"]), _batch_from(r["query"]), r["api_id"], r["origin"]) for r in records]


def save_episodes(episodes: list[TaskEpisode], path: str) -> None:
    torch.save({"episodes": episode_records(episodes)}, path)


def load_episodes(path: str) -> list[TaskEpisode]:
    return episodes_from(torch.load(path, weights_only=True)["episodes"])
