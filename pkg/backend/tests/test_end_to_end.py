import pytest

from config import load_run_config
from services.harness import assert_evaluation_purity, run_baseline
from services.orchestrator import export_report, prepare
from services.trainer import predicted_queries, run_meta_training


@pytest.mark.slow
@pytest.mark.integration
def test_desk_scale_run(tmp_path):
    """A shortened desk run: every pathway fires and the books balance"""
    cfg = load_run_config(profile="desk", overrides={
        "num_apis": 6,
        "q": 10,
        "recover_epochs": 10,
        "max_iterations": 6,
        "num_episodes": 20,
        "output_dir": str(tmp_path),
    })
    pool, _, test_sources = prepare(cfg)
    state = run_meta_training(cfg, pool)

    kinds = {m["kind"] for m in state.metrics}
    assert kinds == {"distill", "replay"}
    assert state.failures == 0
    assert state.ledger == predicted_queries(cfg, state.api_slots())

    assert_evaluation_purity(pool, state.bank, test_sources)
    spec = cfg.episode_spec()
    ours = run_baseline("bidf_mkd", pool, test_sources, spec, cfg, state=state)
    random = run_baseline("random", pool, test_sources, spec, cfg)
    assert 0.0 <= random.mean_accuracy <= 1.0
    assert ours.query_ledger_total == state.ledger
    assert len(ours.per_episode) == 20

    paths = export_report(state, [ours, random], pool=pool)
    assert "comparison" in paths
