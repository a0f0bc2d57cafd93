"""
Desk-scale reproduction checks.

Every test here trains or recovers at the desk profile, so the module is
marked slow. Baselines and sweeps are averaged over three seeds; each seed
evaluates 100 paired test episodes.
"""

import numpy as np
import pytest
import torch

from config import load_run_config
from services.bidf_mkd import init_meta_model, inner_distill, knowledge_vanish_score, meta_update, outer_distill_grad
from services.generator import draw_latents, init_generator
from services.harness import evaluate, run_baseline, sign_test
from services.orchestrator import prepare, run_ablation
from services.replay import MemoryBank, push, replay_update, sample_interpolated
from services.task_recovery import balanced_labels, recover_query, recover_support, split_episode
from services.zo_grad import ZerothOrderGradient

pytestmark = [pytest.mark.slow, pytest.mark.integration]

SEEDS = (0, 1, 2)
EPISODES = 24


def _mean(values):
    return float(np.mean(values))


def _fresh(gcfg, labels, seed):
    return init_generator(gcfg, seed=seed), draw_latents(gcfg, labels, torch.Generator().manual_seed(seed))


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Config and prepared pool per seed; whitebox so the first-order ceiling shares the pool"""
    prepared = {}
    for seed in SEEDS:
        out = tmp_path_factory.mktemp(f"desk-{seed}")
        cfg = load_run_config(profile="desk", overrides={"seed": seed, "whitebox": True, "output_dir": str(out)})
        prepared[seed] = (cfg, prepare(cfg))
    return prepared


@pytest.fixture(scope="module")
def baselines(desk):
    """Accuracy per seed for every method the desk comparison reports"""
    accuracy = {}
    for seed, (cfg, (pool, _, test_sources)) in desk.items():
        spec = cfg.episode_spec()
        accuracy[seed] = {
            tag: run_baseline(tag, pool, test_sources, spec, cfg).mean_accuracy
            for tag in ("random", "distill_avg", "bidf_mkd", "whitebox_fo")
        }
    return accuracy


def _sweep(desk, baselines, which, values, default):
    """Mean accuracy over seeds per grid value; the default value reuses the bidf_mkd baseline run"""
    series = {default: _mean([baselines[s]["bidf_mkd"] for s in SEEDS])}
    per_value = {v: [] for v in values}
    for cfg, prepared in desk.values():
        result = run_ablation(which, cfg, values=values, prepared=prepared)
        for row in result.rows:
            per_value[row["value"]].append(row["accuracy"])
    series.update({v: _mean(accs) for v, accs in per_value.items()})
    return series


@pytest.fixture(scope="module")
def recovered(desk):
    """
    Recovered episodes from the seed-0 pool, one fresh meta model each.

    Every record carries the support, a boundary query set and a CE-only query
    set grown from the same generator and latents.
    """
    cfg, (pool, _, _) = desk[0]
    io = cfg.inner_outer()
    zo = cfg.zo()
    bcfg = cfg.boundary()
    gcfg = cfg.generator_config()
    records = []
    for i in range(EPISODES):
        api = pool[i % len(pool)]
        meta = init_meta_model(cfg.meta_arch, cfg.input_shape(), cfg.ways, seed=100 + i)
        labels = balanced_labels(api.ways, cfg.batch_per_set)

        support = recover_support(api, *_fresh(gcfg, labels, 1000 * i), bcfg, zo,
                                  ZerothOrderGradient(zo, torch.Generator().manual_seed(i)))
        adapted = inner_distill(meta, api, support, io)
        boundary = recover_query(api, adapted.task_model(meta), *_fresh(gcfg, labels, 1000 * i + 1), bcfg, zo,
                                 ZerothOrderGradient(zo, torch.Generator().manual_seed(50 + i)))
        ce_only = recover_support(api, *_fresh(gcfg, labels, 1000 * i + 1), bcfg, zo,
                                  ZerothOrderGradient(zo, torch.Generator().manual_seed(50 + i)))
        records.append({"api": api, "meta": meta, "adapted": adapted,
                        "boundary": split_episode(support, boundary), "ce_only": split_episode(support, ce_only)})
    return cfg, records


class TestDeskComparison:
    """Test the headline accuracy ordering at desk scale"""

    def test_beats_random_and_distill_avg(self, baselines):
        ours = _mean([baselines[s]["bidf_mkd"] for s in SEEDS])
        random = _mean([baselines[s]["random"] for s in SEEDS])
        averaged = _mean([baselines[s]["distill_avg"] for s in SEEDS])
        assert ours >= random + 0.10
        assert ours > averaged

    def test_first_order_ceiling(self, baselines):
        ours = _mean([baselines[s]["bidf_mkd"] for s in SEEDS])
        whitebox = _mean([baselines[s]["whitebox_fo"] for s in SEEDS])
        assert whitebox >= ours - 0.03


class TestDeskAblations:
    """Test component and sensitivity trends at desk scale"""

    def test_full_method_beats_replay_only(self, desk, baselines):
        vanilla = []
        for cfg, prepared in desk.values():
            (row,) = run_ablation("component_toggle", cfg, values=("vanilla",), prepared=prepared).rows
            vanilla.append(row["accuracy"])
        assert _mean([baselines[s]["bidf_mkd"] for s in SEEDS]) >= _mean(vanilla)

    def test_more_directions_do_not_hurt(self, desk, baselines):
        series = _sweep(desk, baselines, "q_sweep", (10, 100), default=50)
        assert series[50] >= series[10] - 0.01
        assert series[100] >= series[50] - 0.01

    def test_more_apis_do_not_hurt(self, desk, baselines):
        series = _sweep(desk, baselines, "api_count_sweep", (1, 5), default=20)
        assert series[5] >= series[1] - 0.01
        assert series[20] >= series[5] - 0.01

    def test_insensitive_to_boundary_weight(self, desk, baselines):
        series = _sweep(desk, baselines, "lambda_sweep", (0.1, 10.0), default=1.0)
        assert max(series.values()) - min(series.values()) <= 0.03


class TestDeskRecovery:
    """Test inner-loop stability and boundary queries on recovered desk episodes"""

    def test_inner_kl_descends(self, recovered):
        _, records = recovered
        for r in records:
            trajectory = r["adapted"].inner_kl
            assert len(trajectory) == 6
            rises = sum(later >= earlier for earlier, later in zip(trajectory, trajectory[1:]))
            assert rises <= 1, f"API {r['api'].api_id}: inner KL {np.round(trajectory, 2).tolist()}"

    def test_boundary_queries_carry_more_outer_kl(self, recovered):
        cfg, records = recovered
        io = cfg.inner_outer()
        boundary = [knowledge_vanish_score(r["meta"], r["api"], r["boundary"], io)[0] for r in records]
        ce_only = [knowledge_vanish_score(r["meta"], r["api"], r["ce_only"], io)[0] for r in records]
        assert sign_test(boundary, ce_only) < 0.05

    def test_outer_kl_falls_on_a_fixed_episode(self, recovered):
        cfg, records = recovered
        io = cfg.inner_outer()
        r = records[0]
        meta = init_meta_model(cfg.meta_arch, cfg.input_shape(), cfg.ways, seed=7)
        history = []
        for _ in range(50):
            grads = outer_distill_grad(meta, r["api"], r["boundary"], io)
            history.append(grads.outer_kl)
            meta_update(meta, grads, io.outer_lr)
        assert min(history[1:]) < history[0]

    def test_replay_alone_beats_random_init(self, desk, recovered):
        cfg, records = recovered
        _, (_, _, test_sources) = desk[0]
        bank = MemoryBank(len(records))
        for r in records:
            push(bank, r["ce_only"])

        spec = cfg.episode_spec()
        meta = init_meta_model(cfg.meta_arch, cfg.input_shape(), cfg.ways, seed=cfg.seed)
        random = evaluate(meta, test_sources, spec, "random").mean_accuracy
        for i in range(200):
            task = sample_interpolated(bank, cfg.ways, cfg.replay_shots, cfg.replay_query_shots, seed=i)
            replay_update(meta, task, cfg.inner_outer())
        assert evaluate(meta, test_sources, spec, "replay").mean_accuracy > random
