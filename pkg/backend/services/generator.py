"""
Latent-to-input generator used to invert black-box APIs.

Labels never enter the network; conditioning happens only through the
recovery losses.
"""

from dataclasses import dataclass, field
from math import prod

import torch
from torch import nn

from config import GeneratorConfig
from services.errors import InputError, UpdateRejectedError
from services.zo_grad import JacobianProducts


class ConvGenerator(nn.Module):
    def __init__(self, latent_dim: int, nf: int, nc: int, img_size: int):
        super().__init__()
        self.init_size = img_size // 4
        self.nf = nf
        self.l1 = nn.Linear(latent_dim, 2 * nf * self.init_size ** 2)

        self.conv_blocks0 = nn.BatchNorm2d(2 * nf)
        self.conv_blocks1 = nn.Sequential(
            nn.Conv2d(2 * nf, 2 * nf, 3, stride=1, padding=1),
            nn.BatchNorm2d(2 * nf),
            nn.LeakyReLU(0.2),
        )
        self.conv_blocks2 = nn.Sequential(
            nn.Conv2d(2 * nf, nf, 3, stride=1, padding=1),
            nn.BatchNorm2d(nf),
            nn.LeakyReLU(0.2),
            nn.Conv2d(nf, nc, 3, stride=1, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        out = self.l1(z)
        out = out.view(out.shape[0], 2 * self.nf, self.init_size, self.init_size)
        img = self.conv_blocks0(out)
        img = nn.functional.interpolate(img, scale_factor=2, mode="nearest")
        img = self.conv_blocks1(img)
        img = nn.functional.interpolate(img, scale_factor=2, mode="nearest")
        return self.conv_blocks2(img)


class DenseGenerator(nn.Module):
    """Three-layer perceptron for vector-valued sources."""

    def __init__(self, latent_dim: int, nf: int, out_shape: tuple[int, ...]):
        super().__init__()
        self.out_shape = tuple(out_shape)
        hidden = 4 * nf
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, prod(out_shape)),
            nn.Sigmoid(),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z).view(z.shape[0], *self.out_shape)


@dataclass
class LatentBatch:
    z: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.z.dim() != 2:
            raise InputError(f"latents must be a (batch, latent_dim) matrix, got shape {tuple(self.z.shape)}")
        if self.labels.shape != (self.z.shape[0],):
            raise InputError(f"{self.z.shape[0]} latents but {self.labels.numel()} labels")

    def __len__(self):
        return self.z.shape[0]


@dataclass
class GeneratorState:
    cfg: GeneratorConfig
    net: nn.Module
    optimizer: torch.optim.Optimizer | None = field(default=None, repr=False)
    steps: int = 0
    _bound_latent: torch.Tensor | None = field(default=None, repr=False)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def parameters(self) -> list[torch.Tensor]:
        return list(self.net.parameters())


def init_generator(cfg: GeneratorConfig, seed: int, dtype: torch.dtype = torch.float32) -> GeneratorState:
    """Fresh generator whose initialization depends only on `seed`."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if cfg.mode == "conv":
            nc, img_size, _ = cfg.out_shape
            net = ConvGenerator(cfg.latent_dim, cfg.nf, nc, img_size)
        else:
            net = DenseGenerator(cfg.latent_dim, cfg.nf, cfg.out_shape)
    return GeneratorState(cfg, net.to(dtype))


def draw_latents(
    cfg: GeneratorConfig,
    labels: torch.Tensor,
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> LatentBatch:
    """Standard-normal latents, one row per target label, as a trainable leaf."""
    z = torch.randn((labels.shape[0], cfg.latent_dim), generator=generator, dtype=dtype)
    return LatentBatch(z.requires_grad_(True), labels.long())


def forward(state: GeneratorState, latents: LatentBatch) -> torch.Tensor:
    """
    Generate a batch, keeping the graph for Jacobian products.

    BatchNorm normalizes with the statistics of this batch. A single-row batch
    falls back to the running statistics.
    """
    if latents.z.shape[1] != state.cfg.latent_dim:
        raise InputError(f"latent width {latents.z.shape[1]} does not match latent_dim {state.cfg.latent_dim}")
    state.net.train(len(latents) > 1)
    return state.net(latents.z.to(state.dtype))


def jacobian_products(state: GeneratorState, latents: LatentBatch, x_hat: torch.Tensor) -> JacobianProducts:
    return JacobianProducts(output=x_hat, latent=latents.z, params=state.parameters())


def apply_estimated_grads(
    state: GeneratorState,
    latents: LatentBatch,
    grads: tuple[list[torch.Tensor], torch.Tensor],
    lr: float,
) -> tuple[GeneratorState, LatentBatch]:
    """
    One Adam step on the generator parameters and the latents together.

    The optimizer is bound to the latent leaf it first sees; a new latent batch
    starts a new optimizer state.
    """
    param_grads, latent_grad = grads
    params = state.parameters()
    if len(param_grads) != len(params):
        raise InputError(f"{len(param_grads)} parameter gradients for {len(params)} parameters")
    for i, g in enumerate([*param_grads, latent_grad]):
        if not torch.isfinite(g).all():
            raise UpdateRejectedError(
                f"non-finite gradient in {'latents' if i == len(param_grads) else f'generator parameter {i}'}"
            )

    if state.optimizer is None or state._bound_latent is not latents.z:
        state.optimizer = torch.optim.Adam([*params, latents.z], lr=lr)
        state._bound_latent = latents.z
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    for p, g in zip(params, param_grads, strict=True):
        p.grad = g.detach().to(p.dtype)
    latents.z.grad = latent_grad.detach().to(latents.z.dtype)
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.steps += 1
    return state, latents


def save_generator(state: GeneratorState, path: str) -> None:
    torch.save({"config": state.cfg.model_dump(), "state_dict": state.net.state_dict(), "steps": state.steps}, path)


def load_generator(path: str) -> GeneratorState:
    blob = torch.load(path, weights_only=True)
    cfg = GeneratorConfig(**blob["config"])
    state = init_generator(cfg, seed=0, dtype=next(iter(blob["state_dict"].values())).dtype)
    state.net.load_state_dict(blob["state_dict"])
    state.steps = blob["steps"]
    return state
