"""
Task memory replay.

Recovered episodes go into a FIFO bank. Replay draws new N-way tasks across the
stored classes of different episodes, relabels them 0..N-1 and runs a MAML step
with hard-label cross-entropy. Replay never queries an API.
"""

import threading
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from config import InnerOuterConfig
from services.bidf_mkd import MetaGradient, MetaModel, adapt, meta_update
from services.errors import ConfigurationError, InputError, SamplingError
from services.task_recovery import TaskEpisode, episode_records, episodes_from
from utils.logger import app_logger


class MemoryBank:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigurationError(f"memory bank capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.entries: deque[TaskEpisode] = deque(maxlen=capacity)
        self.pushes = 0
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.entries)

    def __repr__(self):
        return f"MemoryBank(capacity={self.capacity}, size={len(self)}, pushes={self.pushes})"

    def class_index(self) -> dict[int, torch.Tensor]:
        """Stored samples per global class id, support and query pooled, oldest entry first."""
        with self._lock:
            entries = list(self.entries)
        pools: dict[int, list[torch.Tensor]] = {}
        for episode in entries:
            for batch in (episode.support, episode.query):
                for position, class_id in enumerate(batch.label_space):
                    mask = batch.labels == position
                    if mask.any():
                        pools.setdefault(class_id, []).append(batch.inputs[mask])
        return {c: torch.cat(xs) for c, xs in pools.items()}

    def stored_classes(self) -> set[int]:
        with self._lock:
            return {c for e in self.entries for c in e.label_space}


def push(bank: MemoryBank, episode: TaskEpisode) -> MemoryBank:
    """Append a recovered episode, evicting the oldest when full."""
    if episode.origin != "recovered":
        raise InputError(f"only recovered episodes enter the memory bank, got origin={episode.origin}")
    with bank._lock:
        if len(bank.entries) == bank.capacity:
            app_logger.debug(f"Memory bank full, evicting episode from API {bank.entries[0].api_id}")
        bank.entries.append(episode)
        bank.pushes += 1
    return bank


@dataclass
class InterpolatedTask:
    support_inputs: torch.Tensor
    support_labels: torch.Tensor
    query_inputs: torch.Tensor
    query_labels: torch.Tensor
    class_map: list[int]

    @property
    def ways(self) -> int:
        return len(self.class_map)


def sample_interpolated(
    bank: MemoryBank,
    ways: int,
    shots: int,
    query_shots: int,
    seed: int | np.random.Generator,
) -> InterpolatedTask:
    """
    Draw an N-way task over stored classes, possibly mixing several source episodes.

    Raises:
        SamplingError: fewer than `ways` stored classes hold shots + query_shots samples
    """
    index = bank.class_index()
    need = shots + query_shots
    eligible = sorted(c for c, xs in index.items() if xs.shape[0] >= need)
    if len(eligible) < ways:
        raise SamplingError(
            f"bank holds {len(eligible)} classes with at least {need} samples "
            f"({len(index)} classes stored), {ways} needed"
        )

    rng = np.random.default_rng(seed)
    chosen = [int(c) for c in rng.choice(eligible, size=ways, replace=False)]
    sx, sy, qx, qy = [], [], [], []
    for position, class_id in enumerate(chosen):
        pool = index[class_id]
        order = torch.from_numpy(rng.permutation(pool.shape[0]))
        sx.append(pool[order[:shots]])
        qx.append(pool[order[shots:need]])
        sy.append(torch.full((shots,), position, dtype=torch.long))
        qy.append(torch.full((query_shots,), position, dtype=torch.long))
    return InterpolatedTask(torch.cat(sx), torch.cat(sy), torch.cat(qx), torch.cat(qy), chosen)


def replay_grad(meta: MetaModel, task: InterpolatedTask, cfg: InnerOuterConfig) -> MetaGradient:
    """MAML gradient of the query CE after adapting on the support CE."""
    for labels in (task.support_labels, task.query_labels):
        if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= meta.ways):
            raise InputError(f"replay labels must lie in 0..{meta.ways - 1}")

    theta_m, _ = adapt(meta, task.support_inputs, lambda logits: F.cross_entropy(logits, task.support_labels),
                       cfg.inner_steps, cfg.inner_lr, create_graph=cfg.second_order)
    query_loss = F.cross_entropy(meta.forward_with(theta_m, task.query_inputs), task.query_labels)
    theta = meta.params()
    wrt = list(theta.values()) if cfg.second_order else list(theta_m.values())
    grads = torch.autograd.grad(query_loss, wrt, allow_unused=True)
    named = {
        name: torch.zeros_like(p) if g is None else g
        for (name, p), g in zip(theta.items(), grads, strict=True)
    }
    return MetaGradient(named, query_loss.item())


def replay_update(meta: MetaModel, task: InterpolatedTask, cfg: InnerOuterConfig) -> MetaModel:
    return meta_update(meta, replay_grad(meta, task, cfg), cfg.outer_lr)


def bank_snapshot(bank: MemoryBank) -> dict:
    with bank._lock:
        return {"capacity": bank.capacity, "pushes": bank.pushes, "episodes": episode_records(list(bank.entries))}


def bank_from_snapshot(snapshot: dict) -> MemoryBank:
    bank = MemoryBank(snapshot["capacity"])
    bank.entries.extend(episodes_from(snapshot["episodes"]))
    bank.pushes = snapshot["pushes"]
    return bank


def save_bank(bank: MemoryBank, path: str) -> None:
    torch.save(bank_snapshot(bank), path)


def load_bank(path: str) -> MemoryBank:
    return bank_from_snapshot(torch.load(path, weights_only=True))
