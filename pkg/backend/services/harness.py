"""
Meta-testing harness: episodes over held-out classes, adaptation, baselines and reports.
"""

import copy
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from joblib import Parallel, delayed
from scipy.stats import binomtest

from config import Config, EpisodeSpec, RunConfig
from services.api_pool import ApiHandle, infer
from services.bidf_mkd import MetaModel, adapt, init_meta_model
from services.data_sources import DataSource
from services.errors import ConfigurationError, EvaluationPurityError, SamplingError, WhiteboxPermissionError
from services.replay import MemoryBank
from services.task_recovery import RecoveredBatch, TaskEpisode
from services.trainer import RunState, run_distill_avg, run_meta_training, run_single_dfkd
from utils.logger import app_logger

BASELINES = ("random", "best_api", "single_dfkd", "distill_avg", "whitebox_fo", "bidf_mkd")


@dataclass
class EvalReport:
    mean_accuracy: float
    ci95: float
    per_episode: list[float]
    method_tag: str
    query_ledger_total: int = 0
    shots: int = 1
    wall_clock_s: float = field(default=0.0, compare=False)

    @classmethod
    def from_accuracies(cls, accuracies: list[float], method_tag: str, **kwargs) -> "EvalReport":
        acc = np.asarray(accuracies, dtype=np.float64)
        ci95 = float(1.96 * acc.std() / np.sqrt(len(acc))) if len(acc) else 0.0
        return cls(float(acc.mean()) if len(acc) else 0.0, ci95, acc.tolist(), method_tag, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_test_episode(source: DataSource, spec: EpisodeSpec, seed: int | list[int]) -> TaskEpisode:
    """Balanced N-way K-shot episode of real held-out data."""
    if source.split != "meta_test":
        raise EvaluationPurityError(f"{source.source_id} ({source.split}) cannot supply meta-test episodes")
    need = spec.shots + spec.query_shots
    eligible = [c for c in source.class_ids if source.available(c) >= need]
    if len(eligible) < spec.ways:
        raise SamplingError(
            f"{source.source_id} has {len(eligible)} meta-test classes with {need} samples, {spec.ways} needed"
        )
    rng = np.random.default_rng(seed)
    classes = [int(c) for c in rng.choice(eligible, size=spec.ways, replace=False)]
    generator = torch.Generator().manual_seed(int(rng.integers(2**31)))
    (sx, sy), (qx, qy) = source.draw_disjoint(classes, (spec.shots, spec.query_shots), generator)
    return TaskEpisode(RecoveredBatch(sx, sy, -1, classes), RecoveredBatch(qx, qy, -1, classes), -1, origin="real")


def adapt_and_eval(meta: MetaModel, episode: TaskEpisode, spec: EpisodeSpec) -> float:
    """Fine-tune a copy of the meta weights on the support CE, then score argmax accuracy on the query set."""
    support, query = episode.support, episode.query
    fast, _ = adapt(meta, support.inputs, lambda logits: F.cross_entropy(logits, support.labels),
                    spec.adapt_steps, spec.adapt_lr, create_graph=False)
    with torch.no_grad():
        predictions = meta.forward_with(fast, query.inputs).argmax(-1)
    return float((predictions == query.labels).float().mean())


def _private_copy(meta: MetaModel) -> MetaModel:
    return MetaModel(copy.deepcopy(meta.net), meta.arch_tag, meta.ways)


def _episode_sources(test_sources: list[DataSource]) -> list[DataSource]:
    if not test_sources:
        raise ConfigurationError("evaluation needs at least one meta-test source")
    return test_sources


def evaluate(
    meta: MetaModel,
    test_sources: list[DataSource],
    spec: EpisodeSpec,
    method_tag: str = "meta",
    query_ledger_total: int = 0,
    workers: int | None = None,
) -> EvalReport:
    """
    Average adapted accuracy over spec.num_episodes episodes.

    Episode i comes from source i mod len(test_sources) with seed (spec.seed, i),
    so several sources are covered equally and reports are reproducible.
    """
    sources = _episode_sources(test_sources)
    started = time.perf_counter()

    def one(i: int) -> float:
        episode = sample_test_episode(sources[i % len(sources)], spec, [spec.seed, i])
        return adapt_and_eval(_private_copy(meta), episode, spec)

    accuracies = Parallel(n_jobs=workers or Config.NUM_WORKERS, prefer="threads")(
        delayed(one)(i) for i in range(spec.num_episodes)
    )
    report = EvalReport.from_accuracies(accuracies, method_tag, query_ledger_total=query_ledger_total,
                                        shots=spec.shots, wall_clock_s=round(time.perf_counter() - started, 3))
    app_logger.info(
        f"{method_tag}: {spec.ways}-way {spec.shots}-shot accuracy "
        f"{100 * report.mean_accuracy:.2f} ± {100 * report.ci95:.2f} over {spec.num_episodes} episodes"
    )
    return report


def evaluate_best_api(pool: list[ApiHandle], test_sources: list[DataSource], spec: EpisodeSpec) -> EvalReport:
    """The top-reported API labels query points directly; its position i stands for episode class i."""
    api = max(pool, key=lambda a: a.reported_accuracy)
    if api.ways != spec.ways:
        raise ConfigurationError(f"best API is {api.ways}-way, episodes are {spec.ways}-way")
    sources = _episode_sources(test_sources)
    before = api.query_count
    accuracies = []
    for i in range(spec.num_episodes):
        episode = sample_test_episode(sources[i % len(sources)], spec, [spec.seed, i])
        predictions = infer(api, episode.query.inputs).argmax(-1)
        accuracies.append(float((predictions == episode.query.labels).float().mean()))
    return EvalReport.from_accuracies(accuracies, "best_api", query_ledger_total=api.query_count - before,
                                      shots=spec.shots)


def train_for(tag: str, pool: list[ApiHandle], run_cfg: RunConfig) -> RunState:
    """Train the meta-initialization a method evaluates; random stops at initialization."""
    if tag == "random":
        return run_meta_training(run_cfg.model_copy(update={"max_iterations": 0}), pool)
    if tag == "single_dfkd":
        return run_single_dfkd(run_cfg, pool)
    if tag == "distill_avg":
        return run_distill_avg(run_cfg, pool)
    if tag == "whitebox_fo":
        if not run_cfg.whitebox or not all(api.whitebox for api in pool):
            raise WhiteboxPermissionError("whitebox_fo needs a pool built with whitebox access")
        return run_meta_training(run_cfg.model_copy(update={"mode": "fo"}), pool)
    if tag == "bidf_mkd":
        return run_meta_training(run_cfg, pool)
    raise ConfigurationError(f"Unknown method tag: {tag} (expected one of {', '.join(BASELINES)})")


def run_baseline(
    tag: str,
    pool: list[ApiHandle],
    test_sources: list[DataSource],
    spec: EpisodeSpec,
    run_cfg: RunConfig,
    state: RunState | None = None,
) -> EvalReport:
    """
    Train (unless a finished state is supplied) and evaluate one method.

    Returns:
        EvalReport whose ledger counts every API query the method spent
    """
    if tag == "best_api":
        return evaluate_best_api(pool, test_sources, spec)
    if tag == "random":
        meta = init_meta_model(run_cfg.meta_arch, run_cfg.input_shape(), run_cfg.ways, seed=run_cfg.seed)
        return evaluate(meta, test_sources, spec, "random")
    state = state or train_for(tag, pool, run_cfg)
    return evaluate(state.meta, test_sources, spec, tag, query_ledger_total=state.ledger)


def assert_evaluation_purity(pool: list[ApiHandle], bank: MemoryBank | None, test_sources: list[DataSource]) -> None:
    """Raise if any meta-test class reached an API label space or the memory bank."""
    held_out = {c for s in test_sources for c in s.class_ids}
    leaked = {c for api in pool for c in api.label_space} & held_out
    if leaked:
        raise EvaluationPurityError(f"meta-test classes {sorted(leaked)[:5]} appear in API label spaces")
    if bank is not None:
        leaked = bank.stored_classes() & held_out
        if leaked:
            raise EvaluationPurityError(f"meta-test classes {sorted(leaked)[:5]} appear in the memory bank")


def sign_test(wins_for: list[float], against: list[float]) -> float:
    """One-sided p-value that the first paired sample tends to exceed the second; ties are dropped."""
    diffs = np.asarray(wins_for) - np.asarray(against)
    n = int((diffs != 0).sum())
    if n == 0:
        return 1.0
    return float(binomtest(int((diffs > 0).sum()), n, 0.5, alternative="greater").pvalue)


def comparison_table(reports: list[EvalReport], ways: int = 5) -> str:
    """Markdown table with one row per method and one accuracy column per shot count."""
    shots = sorted({r.shots for r in reports})
    methods = list(dict.fromkeys(r.method_tag for r in reports))
    cells = {(r.method_tag, r.shots): r for r in reports}

    header = "| Method | " + " | ".join(f"{ways}-way {k}-shot" for k in shots) + " | Queries |"
    lines = [header, "|" + "---|" * (len(shots) + 2)]
    for method in methods:
        row = []
        for k in shots:
            r = cells.get((method, k))
            row.append(f"{100 * r.mean_accuracy:.2f} ± {100 * r.ci95:.2f}" if r else "-")
        queries = max(r.query_ledger_total for r in reports if r.method_tag == method)
        lines.append(f"| {method} | " + " | ".join(row) + f" | {queries} |")
    return "\n".join(lines)
