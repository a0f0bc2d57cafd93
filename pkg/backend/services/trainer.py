"""
Meta-training loop.

Each of max_iterations × batch_size slots is either a distillation slot (sample
an API, recover its support set, adapt, recover a boundary query set, update the meta weights,
store the episode) or a replay slot (sample an interpolated task from the bank
and take a MAML step). Every slot draws its randomness from (seed, slot), so a
run resumed from a checkpoint continues exactly like the uninterrupted run.
"""

import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from tqdm import tqdm

from config import RunConfig, config_hash
from services.api_pool import ApiHandle, pool_queries
from services.bidf_mkd import (
    MetaModel,
    adapt,
    average_grads,
    init_meta_model,
    inner_distill,
    knowledge_vanish_score,
    meta_update,
    outer_distill_grad,
)
from services.errors import (
    ConfigurationError,
    DfmlError,
    SamplingError,
    TrainingAbortedError,
    WhiteboxPermissionError,
)
from services.generator import draw_latents, init_generator
from services.losses import kl_divergence
from services.replay import MemoryBank, bank_from_snapshot, bank_snapshot, push, replay_grad, sample_interpolated
from services.task_recovery import (
    balanced_labels,
    label_fidelity,
    recover_query,
    recover_support,
    soft_labels,
    split_episode,
)
from services.zo_grad import WhiteboxGradient, ZerothOrderGradient
from utils.logger import app_logger, run_context

_SEED_SPACE = 2**31


@dataclass
class RunState:
    cfg: RunConfig
    meta: MetaModel
    bank: MemoryBank
    slot: int = 0
    ledger: int = 0
    failures: int = 0
    metrics: list[dict] = field(default_factory=list)
    pending: list[dict[str, torch.Tensor]] = field(default_factory=list, repr=False)
    method: str = "bidf_mkd"

    @property
    def total_slots(self) -> int:
        return self.cfg.max_iterations * self.cfg.batch_size

    @property
    def config_hash(self) -> str:
        return config_hash(self.cfg)

    def api_slots(self) -> int:
        return sum(1 for m in self.metrics if m["kind"] == "distill")


def new_run_state(cfg: RunConfig, method: str = "bidf_mkd", dtype: torch.dtype = torch.float32) -> RunState:
    meta = init_meta_model(cfg.meta_arch, cfg.input_shape(), cfg.ways, seed=cfg.seed, dtype=dtype)
    return RunState(cfg, meta, MemoryBank(cfg.bank_capacity()), method=method)


def save_run_state(state: RunState, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    torch.save(
        {
            "config": state.cfg.model_dump(mode="json"),
            "method": state.method,
            "slot": state.slot,
            "ledger": state.ledger,
            "failures": state.failures,
            "metrics": state.metrics,
            "meta": state.meta.snapshot(),
            "optimizer": state.meta.optimizer.state_dict() if state.meta.optimizer else None,
            "pending": state.pending,
            "bank": bank_snapshot(state.bank),
        },
        path,
    )
    app_logger.info(f"Checkpointed run {state.config_hash[:12]} at slot {state.slot} to {path}")
    return path


def load_run_state(path: str) -> RunState:
    try:
        blob = torch.load(path, weights_only=True)
    except OSError as e:
        raise ConfigurationError(f"Cannot read run state {path}: {e}") from e
    cfg = RunConfig(**blob["config"])
    dtype = next(iter(blob["meta"].values())).dtype
    state = new_run_state(cfg, method=blob["method"], dtype=dtype)
    state.meta.net.load_state_dict(blob["meta"])
    if blob["optimizer"] is not None:
        state.meta.optimizer = torch.optim.Adam(state.meta.net.parameters(), lr=cfg.outer_lr)
        state.meta.optimizer.load_state_dict(blob["optimizer"])
    state.bank = bank_from_snapshot(blob["bank"])
    state.slot = blob["slot"]
    state.ledger = blob["ledger"]
    state.failures = blob["failures"]
    state.metrics = blob["metrics"]
    state.pending = blob["pending"]
    return state


def _gradient_for(cfg: RunConfig, rng: np.random.Generator):
    if cfg.mode == "fo":
        return WhiteboxGradient()
    return ZerothOrderGradient(cfg.zo(), torch.Generator().manual_seed(int(rng.integers(_SEED_SPACE))))


def _recover_support(state: RunState, api: ApiHandle, rng: np.random.Generator, gradient):
    cfg = state.cfg
    gcfg = cfg.generator_config()
    labels = balanced_labels(api.ways, cfg.batch_per_set)
    gen = init_generator(gcfg, seed=int(rng.integers(_SEED_SPACE)), dtype=state.meta.dtype)
    latents = draw_latents(gcfg, labels, torch.Generator().manual_seed(int(rng.integers(_SEED_SPACE))),
                           dtype=state.meta.dtype)
    return recover_support(api, gen, latents, cfg.boundary(), cfg.zo(), gradient)


def _apply(state: RunState, grads: dict[str, torch.Tensor]) -> None:
    if state.cfg.accumulate:
        state.pending.append(grads)
    else:
        meta_update(state.meta, grads, state.cfg.outer_lr)


def _flush(state: RunState) -> None:
    if state.pending:
        meta_update(state.meta, average_grads(state.pending), state.cfg.outer_lr)
        state.pending = []


def _distill_slot(state: RunState, pool: list[ApiHandle], rng: np.random.Generator) -> dict:
    cfg = state.cfg
    io = cfg.inner_outer()
    api = pool[int(rng.integers(len(pool)))]
    gradient = _gradient_for(cfg, rng)

    support = _recover_support(state, api, rng, gradient)

    gcfg = cfg.generator_config()
    labels = balanced_labels(api.ways, cfg.batch_per_set)
    gen = init_generator(gcfg, seed=int(rng.integers(_SEED_SPACE)), dtype=state.meta.dtype)
    latents = draw_latents(gcfg, labels, torch.Generator().manual_seed(int(rng.integers(_SEED_SPACE))),
                           dtype=state.meta.dtype)

    record = {"kind": "distill", "api_id": api.api_id,
              "support_loss": support.loss_trajectory[-1] if support.loss_trajectory else float("nan")}
    bcfg = cfg.boundary()
    adapted = None
    if cfg.use_bidf_mkd or bcfg.lambda_q > 0:
        adapted = inner_distill(state.meta, api, support, io)
        query = recover_query(api, adapted.task_model(state.meta), gen, latents, bcfg, cfg.zo(), gradient)
        record["inner_kl"] = adapted.inner_kl
    else:
        query = recover_support(api, gen, latents, bcfg, cfg.zo(), gradient)
    episode = split_episode(support, query)
    record["query_loss"] = query.loss_trajectory[-1] if query.loss_trajectory else float("nan")

    if adapted is not None:
        if cfg.use_bidf_mkd:
            meta_grad = outer_distill_grad(state.meta, api, episode, io, adapted)
            _apply(state, meta_grad.grads)
            record["outer_kl"] = meta_grad.outer_kl
        outer_kl, disagreement = knowledge_vanish_score(state.meta, api, episode, io)
        record["vanish_kl"] = outer_kl
        record["disagreement"] = disagreement
        record["label_fidelity"] = label_fidelity(support)

    push(state.bank, episode)
    return record


def _replay_slot(state: RunState, rng: np.random.Generator) -> dict:
    cfg = state.cfg
    task = sample_interpolated(state.bank, cfg.ways, cfg.replay_shots, cfg.replay_query_shots, rng)
    meta_grad = replay_grad(state.meta, task, cfg.inner_outer())
    _apply(state, meta_grad.grads)
    return {"kind": "replay", "replay_loss": meta_grad.outer_kl, "classes": task.class_map}


def _run_slot(state: RunState, pool: list[ApiHandle], slot: int) -> dict:
    rng = np.random.default_rng([state.cfg.seed, slot])
    if rng.random() < state.cfg.effective_p_replay():
        try:
            return _replay_slot(state, rng)
        except SamplingError as e:
            app_logger.warning(f"Slot {slot}: replay unavailable ({e}); running a distillation slot instead")
    return _distill_slot(state, pool, rng)


def _checkpoint_path(cfg: RunConfig) -> str:
    return os.path.join(cfg.output_dir, "checkpoints", f"{config_hash(cfg)[:12]}.pt")


def _drive(state: RunState, pool: list[ApiHandle], step, desc: str) -> RunState:
    with run_context(state.config_hash[:12]):
        return _drive_slots(state, pool, step, desc)


def _drive_slots(state: RunState, pool: list[ApiHandle], step, desc: str) -> RunState:
    cfg = state.cfg
    for slot in tqdm(range(state.slot, state.total_slots), desc=desc, disable=None,
                     initial=state.slot, total=state.total_slots):
        before = pool_queries(pool)
        started = time.perf_counter()
        try:
            record = step(state, slot)
        except DfmlError as e:
            state.failures += 1
            record = {"kind": "failed", "error": str(e)}
            app_logger.warning(f"Slot {slot} aborted ({type(e).__name__}): {e}")
            if state.failures >= cfg.fatal_error_threshold:
                app_logger.error(f"{state.failures} failed slots; aborting run {state.config_hash[:12]}")
                raise TrainingAbortedError(f"{state.failures} slots failed, last error: {e}") from e
        delta = pool_queries(pool) - before
        state.ledger += delta
        record.update({"slot": slot, "queries": delta, "ledger": state.ledger,
                       "seconds": round(time.perf_counter() - started, 4)})
        state.metrics.append(record)
        state.slot = slot + 1
        if cfg.accumulate and state.slot % cfg.batch_size == 0:
            _flush(state)
        if cfg.checkpoint_every and state.slot % cfg.checkpoint_every == 0:
            save_run_state(state, _checkpoint_path(cfg))
    return state


def run_meta_training(
    cfg: RunConfig,
    pool: list[ApiHandle],
    resume: RunState | None = None,
    dtype: torch.dtype = torch.float32,
) -> RunState:
    """
    Run (or continue) meta-training against a pool of APIs.

    Args:
        cfg: the run configuration
        pool: the APIs; whitebox access is required when cfg.mode is "fo"
        resume: state from load_run_state to continue from its slot
        dtype: parameter dtype of the meta model and the generators

    Returns:
        RunState after the last slot
    """
    if cfg.mode == "fo" and not all(api.whitebox for api in pool):
        raise WhiteboxPermissionError("mode=fo needs a pool built with whitebox access")
    state = resume or new_run_state(cfg, dtype=dtype)
    app_logger.info(
        f"Meta-training {state.config_hash[:12]}: {state.total_slots} slots from slot {state.slot}, "
        f"mode={cfg.mode}, p_replay={cfg.effective_p_replay()}"
    )
    state = _drive(state, pool, lambda s, slot: _run_slot(s, pool, slot), "Meta-training")
    _flush(state)
    app_logger.info(f"Finished {state.api_slots()} distillation slots, {state.ledger} API queries")
    return state


def predicted_queries(cfg: RunConfig, api_slots: int) -> int:
    """Closed-form query count of `api_slots` distillation slots."""
    per_datum = 1 if cfg.mode == "fo" else cfg.q + 1
    per_pass = cfg.recover_epochs * cfg.batch_per_set * per_datum
    soft = 2 * cfg.batch_per_set if (cfg.use_bidf_mkd or cfg.boundary().lambda_q > 0) else 0
    return api_slots * (2 * per_pass + soft)


def run_single_dfkd(cfg: RunConfig, pool: list[ApiHandle], dtype: torch.dtype = torch.float32) -> RunState:
    """Sequential single-level distillation: the meta weights are overwritten by each API's adapted weights."""
    state = new_run_state(cfg, method="single_dfkd", dtype=dtype)
    io = cfg.inner_outer()

    def step(state: RunState, slot: int) -> dict:
        rng = np.random.default_rng([cfg.seed, slot])
        api = pool[int(rng.integers(len(pool)))]
        support = _recover_support(state, api, rng, _gradient_for(cfg, rng))
        targets = soft_labels(api, support).to(state.meta.dtype)
        theta_i, trajectory = adapt(
            state.meta, support.inputs,
            lambda logits: kl_divergence(torch.softmax(logits, -1), targets).sum(),
            io.inner_steps, io.inner_lr, create_graph=False,
        )
        with torch.no_grad():
            for name, p in state.meta.params().items():
                p.copy_(theta_i[name])
        return {"kind": "distill", "api_id": api.api_id, "inner_kl": trajectory}

    return _drive(state, pool, step, "Single-level distillation")


def run_distill_avg(cfg: RunConfig, pool: list[ApiHandle], dtype: torch.dtype = torch.float32) -> RunState:
    """Distill one same-initialization surrogate per API, then average them parameter-wise."""
    state = new_run_state(cfg, method="distill_avg", dtype=dtype)
    start = state.meta.snapshot()
    surrogates = []

    for api in tqdm(pool, desc="Distilling surrogates", disable=None):
        rng = np.random.default_rng([cfg.seed, api.api_id])
        before = pool_queries(pool)
        support = _recover_support(state, api, rng, _gradient_for(cfg, rng))
        targets = soft_labels(api, support).to(state.meta.dtype)

        state.meta.net.load_state_dict(start)
        optimizer = torch.optim.Adam(state.meta.net.parameters(), lr=cfg.outer_lr)
        for _ in range(cfg.distill_avg_steps):
            optimizer.zero_grad()
            probs = torch.softmax(state.meta.net(support.inputs), -1)
            loss = kl_divergence(probs, targets).sum()
            loss.backward()
            optimizer.step()
        surrogates.append(state.meta.snapshot())

        delta = pool_queries(pool) - before
        state.ledger += delta
        state.metrics.append({"kind": "distill", "slot": len(state.metrics), "api_id": api.api_id,
                              "final_kl": loss.item(), "queries": delta})

    averaged = {name: torch.stack([s[name] for s in surrogates]).mean(0) for name in start}
    state.meta.net.load_state_dict(averaged)
    state.slot = state.total_slots
    app_logger.info(f"Averaged {len(surrogates)} surrogates, {state.ledger} API queries")
    return state
