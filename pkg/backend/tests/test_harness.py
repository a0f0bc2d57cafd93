import pytest
import torch

from config import EpisodeSpec
from services.bidf_mkd import init_meta_model
from services.errors import ConfigurationError, EvaluationPurityError, SamplingError, WhiteboxPermissionError
from services.harness import (
    EvalReport,
    adapt_and_eval,
    assert_evaluation_purity,
    comparison_table,
    evaluate,
    evaluate_best_api,
    run_baseline,
    sample_test_episode,
    sign_test,
    train_for,
)
from services.replay import MemoryBank, push
from services.task_recovery import RecoveredBatch, split_episode
from tests.conftest import FixedLinear, make_api

SPEC = EpisodeSpec(ways=2, shots=1, query_shots=3, num_episodes=6, adapt_steps=2, adapt_lr=0.1)


def _meta(seed=0):
    return init_meta_model("mlp-1x8", (4,), 2, seed=seed)


@pytest.mark.unit
class TestSampleTestEpisode:
    """Test drawing real meta-test episodes"""

    def test_shapes_and_classes(self, tiny_sources):
        _, test = tiny_sources
        episode = sample_test_episode(test, SPEC, seed=0)
        assert episode.origin == "real"
        assert episode.support.inputs.shape == (2, 4)
        assert episode.query.inputs.shape == (6, 4)
        assert set(episode.label_space) <= set(test.class_ids)
        assert torch.bincount(episode.query.labels).tolist() == [3, 3]

    def test_support_and_query_disjoint(self, tiny_sources):
        _, test = tiny_sources
        episode = sample_test_episode(test, SPEC.model_copy(update={"shots": 5, "query_shots": 15}), seed=1)
        for row in episode.support.inputs:
            assert not (episode.query.inputs == row).all(-1).any()

    def test_seed_reproducible(self, tiny_sources):
        _, test = tiny_sources
        a = sample_test_episode(test, SPEC, seed=[0, 3])
        b = sample_test_episode(test, SPEC, seed=[0, 3])
        assert a.label_space == b.label_space
        assert torch.equal(a.query.inputs, b.query.inputs)

    def test_meta_train_source_refused(self, tiny_sources):
        train, _ = tiny_sources
        with pytest.raises(EvaluationPurityError):
            sample_test_episode(train, SPEC, seed=0)

    def test_too_few_classes(self, tiny_sources):
        _, test = tiny_sources
        with pytest.raises(SamplingError):
            sample_test_episode(test, SPEC.model_copy(update={"ways": 5}), seed=0)


@pytest.mark.unit
class TestEvalReport:
    """Test accuracy aggregation"""

    def test_ci95(self):
        report = EvalReport.from_accuracies([0.5, 1.0], "m")
        assert report.mean_accuracy == 0.75
        assert report.ci95 == pytest.approx(1.96 * 0.25 / 2**0.5)

    def test_single_episode_has_zero_width(self):
        assert EvalReport.from_accuracies([0.4], "m").ci95 == 0.0

    def test_to_dict(self):
        data = EvalReport.from_accuracies([1.0], "m", shots=5, query_ledger_total=7).to_dict()
        assert data["shots"] == 5
        assert data["query_ledger_total"] == 7


@pytest.mark.unit
class TestEvaluate:
    """Test adaptation and scoring on held-out classes"""

    def test_accuracy_in_range(self, tiny_sources):
        _, test = tiny_sources
        accuracy = adapt_and_eval(_meta(), sample_test_episode(test, SPEC, seed=0), SPEC)
        assert 0.0 <= accuracy <= 1.0

    def test_reproducible_across_worker_counts(self, tiny_sources):
        _, test = tiny_sources
        serial = evaluate(_meta(), [test], SPEC, workers=1)
        threaded = evaluate(_meta(), [test], SPEC, workers=4)
        assert serial.per_episode == threaded.per_episode
        assert len(serial.per_episode) == SPEC.num_episodes

    def test_leaves_theta_untouched(self, tiny_sources):
        _, test = tiny_sources
        meta = _meta()
        before = meta.snapshot()
        evaluate(meta, [test], SPEC, workers=2)
        assert all(torch.equal(before[k], v) for k, v in meta.snapshot().items())

    def test_needs_a_source(self):
        with pytest.raises(ConfigurationError):
            evaluate(_meta(), [], SPEC)

    def test_best_api_counts_query_points(self, tiny_pool, tiny_sources):
        _, test = tiny_sources
        report = evaluate_best_api(tiny_pool, [test], SPEC)
        assert report.method_tag == "best_api"
        assert report.query_ledger_total == SPEC.num_episodes * SPEC.ways * SPEC.query_shots

    def test_best_api_way_mismatch(self, tiny_pool, tiny_sources):
        _, test = tiny_sources
        with pytest.raises(ConfigurationError):
            evaluate_best_api(tiny_pool, [test], SPEC.model_copy(update={"ways": 3}))


@pytest.mark.unit
class TestBaselines:
    """Test method dispatch and permissions"""

    def test_random_spends_no_queries(self, tiny_pool, tiny_sources, tiny_run):
        _, test = tiny_sources
        report = run_baseline("random", tiny_pool, [test], SPEC, tiny_run)
        assert report.method_tag == "random"
        assert report.query_ledger_total == 0

    def test_whitebox_fo_needs_whitebox_pool(self, tiny_pool, tiny_run):
        with pytest.raises(WhiteboxPermissionError):
            train_for("whitebox_fo", tiny_pool, tiny_run)

    def test_unknown_method(self, tiny_pool, tiny_run):
        with pytest.raises(ConfigurationError):
            train_for("nearest_neighbour", tiny_pool, tiny_run)

    def test_bidf_mkd_reports_its_ledger(self, tiny_pool, tiny_sources, tiny_run):
        _, test = tiny_sources
        state = train_for("bidf_mkd", tiny_pool, tiny_run)
        report = run_baseline("bidf_mkd", tiny_pool, [test], SPEC, tiny_run, state=state)
        assert report.query_ledger_total == state.ledger > 0


@pytest.mark.unit
class TestPurity:
    """Test that held-out classes never reach a training pathway"""

    def test_clean_pool(self, tiny_pool, tiny_sources):
        _, test = tiny_sources
        assert_evaluation_purity(tiny_pool, MemoryBank(2), [test])

    def test_leaking_api(self, tiny_sources):
        _, test = tiny_sources
        api = make_api(FixedLinear(torch.zeros(2, 4)), ways=2, label_space=test.class_ids[:2])
        with pytest.raises(EvaluationPurityError):
            assert_evaluation_purity([api], None, [test])

    def test_leaking_bank(self, tiny_pool, tiny_sources):
        _, test = tiny_sources
        space = tuple(test.class_ids[:2])
        batch = RecoveredBatch(torch.rand(2, 4), torch.tensor([0, 1]), 0, space)
        bank = MemoryBank(2)
        push(bank, split_episode(batch, batch))
        with pytest.raises(EvaluationPurityError):
            assert_evaluation_purity(tiny_pool, bank, [test])


@pytest.mark.unit
class TestReporting:
    """Test significance and the comparison table"""

    def test_sign_test_all_wins(self):
        assert sign_test([1.0] * 10, [0.0] * 10) == pytest.approx(0.5**10)

    def test_sign_test_ties_only(self):
        assert sign_test([0.5, 0.5], [0.5, 0.5]) == 1.0

    def test_sign_test_losses(self):
        assert sign_test([0.0] * 6, [1.0] * 6) == pytest.approx(1.0)

    def test_comparison_table(self):
        reports = [
            EvalReport.from_accuracies([0.5, 0.7], "random", shots=1),
            EvalReport.from_accuracies([0.6], "bidf_mkd", shots=1, query_ledger_total=40),
            EvalReport.from_accuracies([0.8], "bidf_mkd", shots=5, query_ledger_total=40),
        ]
        lines = comparison_table(reports, ways=5).splitlines()
        assert lines[0] == "| Method | 5-way 1-shot | 5-way 5-shot | Queries |"
        assert lines[2].startswith("| random | 60.00 ± ")
        assert lines[2].endswith("| - | 0 |")
        assert lines[3] == "| bidf_mkd | 60.00 ± 0.00 | 80.00 ± 0.00 | 40 |"
