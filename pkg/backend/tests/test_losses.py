import math

import pytest
import torch

from services.errors import InputError
from services.losses import boundary_eta, boundary_loss, ce_loss, kl_divergence


@pytest.mark.unit
class TestCrossEntropy:
    """Test per-datum cross-entropy on probability vectors"""

    def test_certain_prediction_has_zero_loss(self):
        assert float(ce_loss([0.0, 1.0, 0.0], 1)) == pytest.approx(0.0)

    def test_uniform_prediction(self):
        """Uniform over 5 classes costs log 5"""
        assert float(ce_loss([0.2] * 5, 3)) == pytest.approx(math.log(5))

    def test_zero_probability_is_clamped(self):
        """A zero entry on the target costs -log(1e-12), not infinity"""
        assert float(ce_loss([1.0, 0.0], 1)) == pytest.approx(-math.log(1e-12))

    def test_batched_rows(self):
        probs = torch.tensor([[0.5, 0.5], [0.9, 0.1]])
        losses = ce_loss(probs, torch.tensor([0, 0]))
        assert losses.shape == (2,)
        assert losses[1] < losses[0]

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            ce_loss([0.5, 0.5], 2)


@pytest.mark.unit
class TestKlDivergence:
    """Test KL(p || q) on probability vectors"""

    def test_identical_distributions(self):
        assert float(kl_divergence([0.3, 0.7], [0.3, 0.7])) == pytest.approx(0.0, abs=1e-12)

    def test_known_value(self):
        expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        assert float(kl_divergence([0.5, 0.5], [0.9, 0.1])) == pytest.approx(expected)

    def test_non_negative(self):
        gen = torch.Generator().manual_seed(0)
        p = torch.softmax(torch.randn(50, 6, generator=gen), -1)
        q = torch.softmax(torch.randn(50, 6, generator=gen), -1)
        assert (kl_divergence(p, q) >= 0).all()

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])


@pytest.mark.unit
class TestBoundaryTerms:
    """Test the agreement indicator and the boundary objective"""

    def test_eta_agreement(self):
        assert float(boundary_eta([0.6, 0.4], [0.9, 0.1])) == 1.0
        assert float(boundary_eta([0.4, 0.6], [0.9, 0.1])) == 0.0

    def test_eta_tie_takes_first_index(self):
        """Ties resolve to the first maximal index on both sides"""
        assert float(boundary_eta([0.5, 0.5], [0.7, 0.3])) == 1.0

    def test_lambda_zero_reduces_to_ce(self):
        api = torch.tensor([[0.7, 0.2, 0.1]])
        task = torch.tensor([[0.5, 0.3, 0.2]])
        assert torch.allclose(boundary_loss(api, torch.tensor([0]), task, 0.0), ce_loss(api, torch.tensor([0])))

    def test_disagreement_drops_kl_term(self):
        """When argmaxes differ the loss is plain CE regardless of lambda"""
        api = torch.tensor([[0.8, 0.2]])
        task = torch.tensor([[0.1, 0.9]])
        y = torch.tensor([0])
        assert torch.allclose(boundary_loss(api, y, task, 10.0), ce_loss(api, y))

    def test_agreement_subtracts_scaled_kl(self):
        api = torch.tensor([[0.8, 0.2]])
        task = torch.tensor([[0.6, 0.4]])
        y = torch.tensor([0])
        expected = ce_loss(api, y) - 2.0 * kl_divergence(task, api)
        assert torch.allclose(boundary_loss(api, y, task, 2.0), expected)
