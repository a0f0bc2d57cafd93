"""
Zero-order input-gradient estimation for black-box losses.

The estimator is the forward-difference form over q random directions drawn
uniformly from the unit sphere:

    grad ~= (1/q) * sum_i (d/mu) * (loss(x + mu * u_i) - loss(x)) * u_i

which costs q + 1 loss evaluations per datum. Estimated input gradients are
pushed into generator parameters and latents through vector-Jacobian products
of the generator alone.
"""

import math
import threading
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import torch

from config import ZoConfig
from services.api_pool import ApiHandle, infer, infer_whitebox
from services.errors import EstimationError, InputError

# Per-datum objective over API outputs: (inputs[..., *shape], probs[..., C]) -> losses[...]
Objective = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class GradEstimate:
    grad: torch.Tensor
    queries_used: int
    # loss and API output at the unperturbed inputs, when the estimator saw them
    base_values: torch.Tensor | None = None
    base_probs: torch.Tensor | None = None


_streams: dict[int, torch.Generator] = {}
_streams_lock = threading.Lock()


def direction_stream(seed: int) -> torch.Generator:
    """
    Process-wide direction generator for a seed.

    The stream is created on first use and advances with every draw, so
    estimators called without an explicit generator see fresh directions on
    every call while a whole run stays reproducible from its seed.
    """
    with _streams_lock:
        stream = _streams.get(seed)
        if stream is None:
            stream = _streams[seed] = torch.Generator().manual_seed(seed)
        return stream


def reset_direction_streams() -> None:
    with _streams_lock:
        _streams.clear()


def _generator_for(seed: int | None, generator: torch.Generator | None) -> torch.Generator:
    if generator is not None:
        return generator
    return direction_stream(0 if seed is None else seed)


def sample_sphere_directions(
    dim: int,
    q: int,
    seed: int | None = None,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """
    Draw q directions uniformly from the unit sphere in R^dim.

    Returns:
        Tensor of shape (q, dim), one unit vector per row
    """
    if dim < 1:
        raise InputError(f"sphere dimension must be at least 1, got {dim}")
    if q < 1:
        raise InputError(f"need at least one direction, got q={q}")
    gen = generator if generator is not None else torch.Generator().manual_seed(0 if seed is None else seed)
    u = torch.randn((q, dim), generator=gen, dtype=dtype)
    return u / u.norm(dim=1, keepdim=True).clamp_min(torch.finfo(dtype).tiny)


def estimate_input_grad(
    loss_fn: Callable[[torch.Tensor], torch.Tensor | float],
    x: torch.Tensor,
    cfg: ZoConfig,
    generator: torch.Generator | None = None,
) -> GradEstimate:
    """
    Forward-difference estimate of the gradient of a scalar black-box loss at x.

    Args:
        loss_fn: maps an input shaped like x to a scalar
        x: base point, any shape
        cfg: q directions and smoothing mu
        generator: direction source; defaults to the persistent stream for cfg.seed

    Returns:
        GradEstimate shaped like x, with queries_used = q + 1
    """
    dim = x.numel()
    directions = sample_sphere_directions(dim, cfg.q, generator=_generator_for(cfg.seed, generator), dtype=x.dtype)

    base = float(loss_fn(x))
    if not math.isfinite(base):
        raise EstimationError("loss is not finite at the base point", direction_index=None)

    diffs = torch.empty(cfg.q, dtype=x.dtype)
    for i, u in enumerate(directions):
        value = float(loss_fn(x + cfg.mu * u.view_as(x)))
        if not math.isfinite(value):
            raise EstimationError(f"loss is not finite along direction {i}", direction_index=i)
        diffs[i] = value - base

    grad = (dim / (cfg.mu * cfg.q)) * (diffs @ directions)
    return GradEstimate(grad.view_as(x), cfg.q + 1)


def estimate_batch_input_grads(
    batch_loss_fn: Callable[[torch.Tensor], torch.Tensor],
    inputs: torch.Tensor,
    cfg: ZoConfig,
    generator: torch.Generator | None = None,
) -> GradEstimate:
    """
    Per-datum estimates for a whole batch with a single call to the loss.

    Every datum gets its own independent direction set. The loss receives the
    stacked evaluation points of shape (B, q + 1, *shape), the base point first,
    and must return per-point losses of shape (B, q + 1).

    Returns:
        GradEstimate with grad of shape (B, *shape) and queries_used = B·(q + 1)
    """
    batch = inputs.shape[0]
    shape = inputs.shape[1:]
    dim = math.prod(shape)
    gen = _generator_for(cfg.seed, generator)

    directions = torch.randn((batch, cfg.q, dim), generator=gen, dtype=inputs.dtype)
    directions = directions / directions.norm(dim=2, keepdim=True).clamp_min(torch.finfo(inputs.dtype).tiny)

    base = inputs.detach().reshape(batch, 1, dim)
    points = torch.cat([base, base + cfg.mu * directions], dim=1).view(batch, cfg.q + 1, *shape)
    losses = batch_loss_fn(points).detach().to(inputs.dtype)
    if losses.shape != (batch, cfg.q + 1):
        raise InputError(f"batch loss returned shape {tuple(losses.shape)}, expected {(batch, cfg.q + 1)}")

    bad = ~torch.isfinite(losses)
    if bad.any():
        row, col = (int(i) for i in bad.nonzero()[0])
        raise EstimationError(
            f"loss is not finite for datum {row} "
            + ("at the base point" if col == 0 else f"along direction {col - 1}"),
            direction_index=None if col == 0 else col - 1,
        )

    diffs = losses[:, 1:] - losses[:, :1]
    grad = (dim / (cfg.mu * cfg.q)) * torch.einsum("bq,bqd->bd", diffs, directions)
    return GradEstimate(grad.view(batch, *shape), batch * (cfg.q + 1), base_values=losses[:, 0])


@dataclass
class JacobianProducts:
    """
    Vector-Jacobian products of a differentiable generator output.

    Holds the generated batch with its graph, the generator parameters and the
    latent leaf; calling it with a cotangent v returns (v^T d(output)/d(param) per parameter,
    v^T d(output)/d(z)).
    """

    output: torch.Tensor
    latent: torch.Tensor
    params: list[torch.Tensor] = field(default_factory=list)

    def __call__(self, v: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        inputs = [*self.params, self.latent]
        grads = torch.autograd.grad(
            self.output, inputs, grad_outputs=v, retain_graph=True, allow_unused=True
        )
        grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, inputs, strict=True)]
        return grads[:-1], grads[-1]


def estimated_generator_grads(
    grad_x: GradEstimate | torch.Tensor,
    jacobian_products: JacobianProducts,
) -> tuple[list[torch.Tensor], torch.Tensor]:
    """
    Chain estimated input gradients into generator gradients.

    Returns:
        (batch-mean gradient per generator parameter, per-datum latent gradient)
    """
    g = grad_x.grad if isinstance(grad_x, GradEstimate) else grad_x
    expected = jacobian_products.output.shape
    if g.shape != expected:
        raise InputError(f"input gradient of shape {tuple(g.shape)} does not match generator output {tuple(expected)}")
    param_grads, latent_grad = jacobian_products(g.to(jacobian_products.output.dtype))
    batch = expected[0]
    return [p / batch for p in param_grads], latent_grad


class ZerothOrderGradient:
    """Input gradients of an objective on API outputs, from probability queries only."""

    def __init__(self, cfg: ZoConfig, generator: torch.Generator):
        self.cfg = cfg
        self.generator = generator

    def queries_per_datum(self) -> int:
        return self.cfg.q + 1

    def input_grads(self, api: ApiHandle, objective: Objective, inputs: torch.Tensor) -> GradEstimate:
        seen = {}

        def batch_loss(points: torch.Tensor) -> torch.Tensor:
            lead = points.shape[:2]
            probs = infer(api, points.flatten(0, 1)).view(*lead, -1)
            seen["probs"] = probs[:, 0]
            return objective(points, probs)

        estimate = estimate_batch_input_grads(batch_loss, inputs, self.cfg, self.generator)
        return replace(estimate, base_probs=seen["probs"])


class WhiteboxGradient:
    """Exact input gradients through a whitebox API; one query per datum."""

    def queries_per_datum(self) -> int:
        return 1

    def input_grads(self, api: ApiHandle, objective: Objective, inputs: torch.Tensor) -> GradEstimate:
        probs, token = infer_whitebox(api, inputs)
        grad = token.input_grad(objective)
        with torch.no_grad():
            base_values = objective(inputs, probs)
        if not torch.isfinite(grad).all():
            raise EstimationError(f"whitebox gradient from API {api.api_id} is not finite", direction_index=None)
        return GradEstimate(grad.to(inputs.dtype), int(inputs.shape[0]), base_values=base_values, base_probs=probs)
