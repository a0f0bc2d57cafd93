import pytest
import torch
from pydantic import ValidationError

from config import GeneratorConfig, load_run_config
from services.errors import ConfigurationError, InputError, UpdateRejectedError
from services.generator import (
    LatentBatch,
    apply_estimated_grads,
    draw_latents,
    forward,
    init_generator,
    jacobian_products,
    load_generator,
    save_generator,
)
from services.zo_grad import estimated_generator_grads

DENSE = GeneratorConfig(latent_dim=5, out_shape=(4,), nf=3, mode="dense")


def _latents(cfg, batch, seed=0, dtype=torch.float32):
    return draw_latents(cfg, torch.zeros(batch, dtype=torch.long), torch.Generator().manual_seed(seed), dtype)


@pytest.mark.unit
class TestConvGenerator:
    """Test the convolutional generator layout"""

    def test_output_shape(self):
        cfg = GeneratorConfig(latent_dim=256, out_shape=(3, 32, 32), nf=64, mode="conv")
        state = init_generator(cfg, seed=0)
        x = forward(state, _latents(cfg, 30))
        assert x.shape == (30, 3, 32, 32)
        assert float(x.min()) > 0.0 and float(x.max()) < 1.0

    def test_layer_widths(self):
        cfg = GeneratorConfig(latent_dim=16, out_shape=(1, 16, 16), nf=8, mode="conv")
        net = init_generator(cfg, seed=0).net
        assert net.l1.out_features == 2 * 8 * 4 * 4
        assert net.conv_blocks0.num_features == 16
        assert net.conv_blocks2[-2].out_channels == 1

    def test_single_row_batch(self):
        cfg = GeneratorConfig(latent_dim=16, out_shape=(1, 16, 16), nf=8, mode="conv")
        state = init_generator(cfg, seed=0)
        assert forward(state, _latents(cfg, 1)).shape == (1, 1, 16, 16)

    def test_indivisible_size_rejected(self):
        with pytest.raises(ValidationError):
            GeneratorConfig(latent_dim=8, out_shape=(1, 18, 18), mode="conv")
        with pytest.raises(ConfigurationError):
            load_run_config(profile="full", overrides={"img_size": 18})


@pytest.mark.unit
class TestForward:
    """Test generation and its determinism"""

    def test_seed_determinism(self):
        z = _latents(DENSE, 6)
        a = forward(init_generator(DENSE, seed=3), z)
        b = forward(init_generator(DENSE, seed=3), z)
        assert torch.equal(a, b)

    def test_repeat_without_update(self):
        state = init_generator(DENSE, seed=0)
        z = _latents(DENSE, 4)
        assert torch.equal(forward(state, z), forward(state, z))

    def test_extreme_latents_stay_finite(self):
        state = init_generator(DENSE, seed=0)
        z = LatentBatch(torch.tensor([[6.0] * 5, [-6.0] * 5]), torch.zeros(2, dtype=torch.long))
        assert torch.isfinite(forward(state, z)).all()

    def test_latent_width_mismatch(self):
        state = init_generator(DENSE, seed=0)
        with pytest.raises(InputError):
            forward(state, LatentBatch(torch.zeros(2, 7), torch.zeros(2, dtype=torch.long)))

    def test_labels_must_match_batch(self):
        with pytest.raises(InputError):
            LatentBatch(torch.zeros(3, 5), torch.zeros(2, dtype=torch.long))

    def test_latents_are_standard_normal_leaves(self):
        z = _latents(DENSE, 2000)
        assert z.z.requires_grad and z.z.is_leaf
        assert float(z.z.mean()) == pytest.approx(0.0, abs=0.05)
        assert float(z.z.std()) == pytest.approx(1.0, abs=0.05)


@pytest.mark.unit
class TestJacobianProducts:
    """Test generator vector-Jacobian products against finite differences"""

    def test_latent_vjp_matches_central_differences(self):
        state = init_generator(DENSE, seed=1, dtype=torch.float64)
        z = _latents(DENSE, 3, dtype=torch.float64)
        x_hat = forward(state, z)
        v = torch.randn(x_hat.shape, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        _, latent_grad = jacobian_products(state, z, x_hat)(v)

        h = 1e-6
        fd = torch.zeros_like(z.z)
        with torch.no_grad():
            for i in range(z.z.shape[0]):
                for j in range(z.z.shape[1]):
                    e = torch.zeros_like(z.z)
                    e[i, j] = h
                    plus = (state.net(z.z + e) * v).sum()
                    minus = (state.net(z.z - e) * v).sum()
                    fd[i, j] = (plus - minus) / (2 * h)
        assert float((latent_grad - fd).norm() / fd.norm()) < 1e-4


@pytest.mark.unit
class TestApplyEstimatedGrads:
    """Test the joint Adam step on generator parameters and latents"""

    def _zero_grads(self, state, z):
        return [torch.zeros_like(p) for p in state.parameters()], torch.zeros_like(z.z)

    def test_zero_grads_leave_values(self):
        state = init_generator(DENSE, seed=0)
        z = _latents(DENSE, 4)
        before = [p.detach().clone() for p in state.parameters()]
        z_before = z.z.detach().clone()
        apply_estimated_grads(state, z, self._zero_grads(state, z), lr=0.1)
        assert all(torch.equal(a, b) for a, b in zip(before, state.parameters(), strict=True))
        assert torch.equal(z.z, z_before)
        assert state.steps == 1

    def test_zero_learning_rate(self):
        state = init_generator(DENSE, seed=0)
        z = _latents(DENSE, 4)
        before = [p.detach().clone() for p in state.parameters()]
        grads = [torch.ones_like(p) for p in state.parameters()], torch.ones_like(z.z)
        apply_estimated_grads(state, z, grads, lr=0.0)
        assert all(torch.equal(a, b) for a, b in zip(before, state.parameters(), strict=True))

    def test_step_decreases_convex_objective(self):
        state = init_generator(DENSE, seed=0)
        z = _latents(DENSE, 4)
        target = torch.full((4, 4), 0.3)

        def objective():
            with torch.no_grad():
                return float(((forward(state, z) - target) ** 2).sum())

        before = objective()
        x_hat = forward(state, z)
        grads = estimated_generator_grads(2 * (x_hat.detach() - target), jacobian_products(state, z, x_hat))
        apply_estimated_grads(state, z, grads, lr=1e-3)
        assert objective() < before

    def test_non_finite_rejected(self):
        state = init_generator(DENSE, seed=0)
        z = _latents(DENSE, 2)
        params, latent = self._zero_grads(state, z)
        latent[0, 0] = float("nan")
        with pytest.raises(UpdateRejectedError):
            apply_estimated_grads(state, z, (params, latent), lr=0.1)

    def test_new_latents_start_new_optimizer(self):
        state = init_generator(DENSE, seed=0)
        first, second = _latents(DENSE, 2, seed=0), _latents(DENSE, 2, seed=1)
        apply_estimated_grads(state, first, self._zero_grads(state, first), lr=0.1)
        optimizer = state.optimizer
        apply_estimated_grads(state, second, self._zero_grads(state, second), lr=0.1)
        assert state.optimizer is not optimizer


@pytest.mark.integration
def test_checkpoint_reload(tmp_path):
    state = init_generator(DENSE, seed=5)
    path = str(tmp_path / "gen.pt")
    save_generator(state, path)
    reloaded = load_generator(path)
    z = _latents(DENSE, 3)
    assert torch.equal(forward(state, z), forward(reloaded, z))
