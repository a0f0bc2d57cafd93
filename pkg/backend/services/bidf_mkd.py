"""
Bi-level meta knowledge distillation.

The inner level clones an API into task-specific weights by minimizing the
summed KL between model and API predictions over the recovered support set.
The outer level moves the meta-initialization so that the adapted weights also
match the API on the recovered query set. API soft labels are queried once per
set and cached on the batch.
"""

from collections.abc import Callable
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from config import InnerOuterConfig
from services.api_pool import ApiHandle
from services.errors import InputError, UpdateRejectedError
from services.losses import kl_divergence
from services.networks import seeded_network
from services.task_recovery import RecoveredBatch, TaskEpisode, soft_labels

__all__ = [
    "AdaptedParams",
    "InnerOuterConfig",
    "MetaGradient",
    "MetaModel",
    "adapt",
    "average_grads",
    "init_meta_model",
    "inner_distill",
    "kl_divergence",
    "knowledge_vanish_score",
    "meta_update",
    "outer_distill_grad",
]

Params = dict[str, torch.Tensor]


@dataclass
class MetaModel:
    net: nn.Module
    arch_tag: str
    ways: int
    optimizer: torch.optim.Optimizer | None = field(default=None, repr=False)

    def params(self) -> Params:
        return dict(self.net.named_parameters())

    def forward_with(self, params: Params, x: torch.Tensor) -> torch.Tensor:
        return functional_call(self.net, params, (x.to(self.dtype),))

    def probs_with(self, params: Params, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.forward_with(params, x), dim=-1)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def snapshot(self) -> Params:
        return {k: v.detach().clone() for k, v in self.net.state_dict().items()}


def init_meta_model(
    arch_tag: str,
    input_shape: tuple[int, ...],
    ways: int,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> MetaModel:
    net = seeded_network(arch_tag, input_shape, ways, seed=seed, meta=True, dtype=dtype)
    net.train()
    return MetaModel(net, arch_tag, ways)


@dataclass
class AdaptedParams:
    theta_i: Params
    provenance: tuple[int | str, int]
    inner_kl: list[float] = field(default_factory=list)

    def task_model(self, meta: MetaModel, detach: bool = True) -> Callable[[torch.Tensor], torch.Tensor]:
        """Probability function of the adapted weights; detached weights keep the meta weights out of any graph."""
        params = {k: v.detach() for k, v in self.theta_i.items()} if detach else self.theta_i
        return lambda x: meta.probs_with(params, x)


@dataclass
class MetaGradient:
    grads: Params
    outer_kl: float


def adapt(
    meta: MetaModel,
    inputs: torch.Tensor,
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    steps: int,
    lr: float,
    create_graph: bool,
) -> tuple[Params, list[float]]:
    """
    Plain gradient descent from the meta weights on loss_fn(logits).

    With create_graph the fast weights stay differentiable functions of the meta weights;
    without it every step starts from detached leaves and the meta weights are never touched.

    Returns:
        (fast weights, loss before each step followed by the final loss)
    """
    if create_graph:
        fast = meta.params()
    else:
        fast = {k: v.detach().clone().requires_grad_(True) for k, v in meta.params().items()}

    losses = []
    for _ in range(steps):
        loss = loss_fn(meta.forward_with(fast, inputs))
        losses.append(loss.item())
        grads = torch.autograd.grad(loss, list(fast.values()), create_graph=create_graph, allow_unused=True)
        fast = {
            name: p if g is None else p - lr * g
            for (name, p), g in zip(fast.items(), grads, strict=True)
        }
        if not create_graph:
            fast = {k: v.detach().requires_grad_(True) for k, v in fast.items()}

    with torch.set_grad_enabled(create_graph):
        losses.append(loss_fn(meta.forward_with(fast, inputs)).item())
    return fast, losses


def _cached_labels(meta: MetaModel, api: ApiHandle, batch: RecoveredBatch) -> torch.Tensor:
    if batch.api_id != api.api_id:
        raise InputError(f"batch was recovered from API {batch.api_id}, not {api.api_id}")
    labels = soft_labels(api, batch)
    if labels.shape != (len(batch), meta.ways):
        raise InputError(f"cached soft labels have shape {tuple(labels.shape)}, expected {(len(batch), meta.ways)}")
    return labels.to(meta.dtype)


def _kl_sum(targets: torch.Tensor) -> Callable[[torch.Tensor], torch.Tensor]:
    return lambda logits: kl_divergence(F.softmax(logits, dim=-1), targets).sum()


def inner_distill(
    meta: MetaModel,
    api: ApiHandle,
    support: RecoveredBatch,
    cfg: InnerOuterConfig,
) -> AdaptedParams:
    """Clone the API into adapted weights with cfg.inner_steps descent steps on the support KL."""
    if api.ways != meta.ways:
        raise InputError(f"meta head has {meta.ways} ways, API {api.api_id} has {api.ways}")
    targets = _cached_labels(meta, api, support)
    theta_i, trajectory = adapt(meta, support.inputs, _kl_sum(targets),
                                cfg.inner_steps, cfg.inner_lr, create_graph=cfg.second_order)
    return AdaptedParams(theta_i, (api.api_id, cfg.inner_steps), trajectory)


def outer_distill_grad(
    meta: MetaModel,
    api: ApiHandle,
    episode: TaskEpisode,
    cfg: InnerOuterConfig,
    adapted: AdaptedParams | None = None,
) -> MetaGradient:
    """
    Gradient of the adapted weights' query KL with respect to the meta weights.

    Reuses `adapted` when the caller already ran the inner level for this
    episode. Second order differentiates through the adaptation; first order
    applies the gradient taken at the adapted weights to the meta weights.
    """
    if episode.origin != "recovered":
        raise InputError(f"outer distillation needs a recovered episode, got origin={episode.origin}")
    if adapted is None:
        adapted = inner_distill(meta, api, episode.support, cfg)
    targets = _cached_labels(meta, api, episode.query)

    outer_loss = _kl_sum(targets)(meta.forward_with(adapted.theta_i, episode.query.inputs))
    theta = meta.params()
    if cfg.second_order:
        wrt = list(theta.values())
    else:
        wrt = list(adapted.theta_i.values())
    grads = torch.autograd.grad(outer_loss, wrt, allow_unused=True)
    named = {
        name: torch.zeros_like(p) if g is None else g
        for (name, p), g in zip(theta.items(), grads, strict=True)
    }
    return MetaGradient(named, outer_loss.item() / max(1, len(episode.query)))


def average_grads(grads: list[Params]) -> Params:
    return {name: torch.stack([g[name] for g in grads]).mean(0) for name in grads[0]}


def meta_update(meta: MetaModel, grads: MetaGradient | Params, outer_lr: float) -> MetaModel:
    """Adam step on the meta weights; the optimizer state persists on the meta model."""
    named = grads.grads if isinstance(grads, MetaGradient) else grads
    params = meta.params()
    if set(named) != set(params):
        raise InputError("gradient names do not match the meta model parameters")
    for name, g in named.items():
        if g.shape != params[name].shape:
            raise InputError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(params[name].shape)}")
        if not torch.isfinite(g).all():
            raise UpdateRejectedError(f"non-finite meta gradient for {name}")

    if meta.optimizer is None:
        meta.optimizer = torch.optim.Adam(meta.net.parameters(), lr=outer_lr)
    for group in meta.optimizer.param_groups:
        group["lr"] = outer_lr
    for name, p in params.items():
        p.grad = named[name].detach().to(p.dtype)
    meta.optimizer.step()
    meta.optimizer.zero_grad(set_to_none=True)
    return meta


@torch.no_grad()
def _disagreement(task_probs: torch.Tensor, api_probs: torch.Tensor) -> float:
    return float((task_probs.argmax(-1) != api_probs.argmax(-1)).float().mean())


def knowledge_vanish_score(
    meta: MetaModel,
    api: ApiHandle,
    episode: TaskEpisode,
    cfg: InnerOuterConfig,
) -> tuple[float, float]:
    """
    Adapt on the support set, then measure how much the query set still teaches.

    Returns:
        (mean query KL of the adapted weights against the API, fraction of query points where
        their argmaxes differ); both near zero means the outer level has
        nothing left to learn from this episode
    """
    support_targets = _cached_labels(meta, api, episode.support)
    query_targets = _cached_labels(meta, api, episode.query)
    theta_i, _ = adapt(meta, episode.support.inputs, _kl_sum(support_targets),
                       cfg.inner_steps, cfg.inner_lr, create_graph=False)
    with torch.no_grad():
        task_probs = meta.probs_with(theta_i, episode.query.inputs)
        outer_kl = float(kl_divergence(task_probs, query_targets).mean())
    return outer_kl, _disagreement(task_probs, query_targets)
