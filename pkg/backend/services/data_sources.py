"""
Labeled data sources for API pre-training and meta-testing.

A source is materialized once into per-class sample pools and split by class
into a meta-train part (only ever seen by the APIs) and a meta-test part (only
ever seen by the evaluation harness).
"""

import os
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch
from PIL import Image, ImageDraw
from sklearn.datasets import make_blobs

from services.errors import ConfigurationError, SamplingError
from utils.logger import app_logger

# Global class ids of the k-th listed source start at k * CLASS_ID_STRIDE
CLASS_ID_STRIDE = 10_000

Split = Literal["meta_train", "meta_test"]


@dataclass
class DataSource:
    source_id: str
    class_ids: list[int]
    input_shape: tuple[int, ...]
    split: Split
    samples: dict[int, torch.Tensor] = field(repr=False)

    def __post_init__(self):
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ConfigurationError(f"{self.source_id}: duplicate class ids")
        missing = [c for c in self.class_ids if c not in self.samples]
        if missing:
            raise ConfigurationError(f"{self.source_id}: no samples for classes {missing[:5]}")

    def available(self, class_id: int) -> int:
        return int(self.samples[class_id].shape[0])

    def draw_disjoint(
        self,
        class_ids: list[int],
        per_class: tuple[int, ...],
        generator: torch.Generator,
    ) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """
        Draw several balanced, mutually disjoint labeled sets.

        Args:
            class_ids: global class ids; label positions follow this order
            per_class: samples per class for each requested set
            generator: seeded torch generator

        Returns:
            One (inputs, positions) pair per entry of per_class
        """
        need = sum(per_class)
        parts: list[tuple[list[torch.Tensor], list[torch.Tensor]]] = [([], []) for _ in per_class]
        for position, class_id in enumerate(class_ids):
            if class_id not in self.samples:
                raise SamplingError(f"class {class_id} does not belong to {self.source_id} ({self.split})")
            pool = self.samples[class_id]
            if pool.shape[0] < need:
                raise SamplingError(
                    f"class {class_id} has {pool.shape[0]} samples, {need} requested"
                )
            order = torch.randperm(pool.shape[0], generator=generator)
            start = 0
            for (xs, ys), n in zip(parts, per_class, strict=True):
                xs.append(pool[order[start:start + n]])
                ys.append(torch.full((n,), position, dtype=torch.long))
                start += n
        return [(torch.cat(xs), torch.cat(ys)) for xs, ys in parts]

    def draw(
        self, class_ids: list[int], per_class: int, generator: torch.Generator
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return self.draw_disjoint(class_ids, (per_class,), generator)[0]

    def sampler(
        self, class_ids: list[int], per_class: int, generator: torch.Generator
    ) -> Iterator[tuple[torch.Tensor, int]]:
        """Yield (input, global class id) pairs of a balanced draw."""
        inputs, positions = self.draw(class_ids, per_class, generator)
        for x, p in zip(inputs, positions.tolist(), strict=True):
            yield x, class_ids[p]


def _split_classes(
    source_id: str,
    samples: dict[int, torch.Tensor],
    input_shape: tuple[int, ...],
    meta_train_classes: int,
    seed: int,
) -> tuple[DataSource, DataSource]:
    class_ids = sorted(samples)
    if not 0 < meta_train_classes < len(class_ids):
        raise ConfigurationError(
            f"{source_id}: cannot hold out classes with {meta_train_classes} of {len(class_ids)} for meta-training"
        )
    order = np.random.default_rng(seed).permutation(len(class_ids))
    train_ids = sorted(class_ids[i] for i in order[:meta_train_classes])
    test_ids = sorted(class_ids[i] for i in order[meta_train_classes:])
    train = DataSource(source_id, train_ids, input_shape, "meta_train",
                       {c: samples[c] for c in train_ids})
    test = DataSource(source_id, test_ids, input_shape, "meta_test",
                      {c: samples[c] for c in test_ids})
    return train, test


def gaussian_source(
    source_id: str,
    num_classes: int,
    dim: int,
    samples_per_class: int,
    meta_train_classes: int,
    seed: int,
    class_offset: int = 0,
    cluster_std: float = 0.05,
) -> tuple[DataSource, DataSource]:
    """Well-separated Gaussian clusters inside the unit hypercube."""
    x, y = make_blobs(
        n_samples=[samples_per_class] * num_classes,
        n_features=dim,
        cluster_std=cluster_std,
        center_box=(0.2, 0.8),
        shuffle=False,
        random_state=seed,
    )
    x = torch.from_numpy(np.clip(x, 0.0, 1.0)).float()
    y = torch.from_numpy(y)
    samples = {class_offset + c: x[y == c] for c in range(num_classes)}
    return _split_classes(source_id, samples, (dim,), meta_train_classes, seed)


def _render_glyph(strokes: np.ndarray, size: int, jitter: np.ndarray, width: int) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    for (x0, y0, x1, y1), (dx0, dy0, dx1, dy1) in zip(strokes, jitter, strict=True):
        draw.line((x0 + dx0, y0 + dy0, x1 + dx1, y1 + dy1), fill=255, width=width)
    return np.asarray(canvas, dtype=np.float32) / 255.0


def glyph_source(
    source_id: str,
    num_classes: int,
    img_size: int,
    samples_per_class: int,
    meta_train_classes: int,
    seed: int,
    class_offset: int = 0,
    strokes_per_glyph: int = 3,
) -> tuple[DataSource, DataSource]:
    """
    Procedurally rendered single-channel glyphs.

    Each class is a fixed set of random line strokes; samples jitter the stroke
    endpoints by up to one pixel, vary the pen width and add pixel noise.
    """
    rng = np.random.default_rng(seed)
    margin = max(1, img_size // 8)
    samples = {}
    for c in range(num_classes):
        strokes = rng.integers(margin, img_size - margin, size=(strokes_per_glyph, 4))
        images = np.empty((samples_per_class, 1, img_size, img_size), dtype=np.float32)
        for i in range(samples_per_class):
            jitter = rng.integers(-1, 2, size=(strokes_per_glyph, 4))
            img = _render_glyph(strokes, img_size, jitter, width=int(rng.integers(1, 3)))
            img = img + rng.normal(0.0, 0.05, size=img.shape).astype(np.float32)
            images[i, 0] = np.clip(img, 0.0, 1.0)
        samples[class_offset + c] = torch.from_numpy(images)
    return _split_classes(source_id, samples, (1, img_size, img_size), meta_train_classes, seed)


def image_folder_source(
    source_id: str,
    root: str,
    img_size: int,
    meta_train_classes: int,
    seed: int,
    class_offset: int = 0,
) -> tuple[DataSource, DataSource]:
    """Directory-of-class-folders ingestion; images become grayscale img_size squares."""
    if not os.path.isdir(root):
        raise ConfigurationError(f"Image folder not found: {root}")

    samples = {}
    for c, class_name in enumerate(sorted(os.listdir(root))):
        class_dir = os.path.join(root, class_name)
        if not os.path.isdir(class_dir):
            continue
        images = []
        for filename in sorted(os.listdir(class_dir)):
            try:
                with Image.open(os.path.join(class_dir, filename)) as img:
                    img = img.convert("L").resize((img_size, img_size))
                    images.append(np.asarray(img, dtype=np.float32) / 255.0)
            except OSError:
                app_logger.warning(f"Skipping unreadable image {class_name}/{filename}")
        if images:
            samples[class_offset + c] = torch.from_numpy(np.stack(images)[:, None])

    app_logger.info(f"Loaded {len(samples)} classes from {root}")
    return _split_classes(source_id, samples, (1, img_size, img_size), meta_train_classes, seed)


def build_sources(run_cfg) -> tuple[list[DataSource], list[DataSource]]:
    """
    Materialize every source named in a RunConfig.

    Source identifiers: ``gaussian:<seed>``, ``glyph:<seed>``, ``folder:<path>``.

    Returns:
        (meta-train sources, meta-test sources) in the listed order
    """
    train, test = [], []
    for k, source_id in enumerate(run_cfg.sources):
        kind, _, arg = source_id.partition(":")
        offset = k * CLASS_ID_STRIDE
        if kind == "gaussian":
            pair = gaussian_source(source_id, run_cfg.source_classes, run_cfg.gaussian_dim,
                                   run_cfg.samples_per_class, run_cfg.meta_train_classes,
                                   seed=int(arg or 0), class_offset=offset)
        elif kind == "glyph":
            pair = glyph_source(source_id, run_cfg.source_classes, run_cfg.img_size,
                                run_cfg.samples_per_class, run_cfg.meta_train_classes,
                                seed=int(arg or 0), class_offset=offset)
        elif kind == "folder":
            pair = image_folder_source(source_id, arg, run_cfg.img_size,
                                       run_cfg.meta_train_classes, seed=run_cfg.seed,
                                       class_offset=offset)
        else:
            raise ConfigurationError(f"Unknown source kind: {source_id}")
        train.append(pair[0])
        test.append(pair[1])

    shapes = {s.input_shape for s in train}
    if len(shapes) > 1:
        raise ConfigurationError(f"Sources disagree on input shape: {sorted(shapes)}")
    app_logger.info(
        f"Built {len(train)} source(s): "
        + ", ".join(f"{s.source_id} ({len(s.class_ids)} train / {len(t.class_ids)} test classes)"
                    for s, t in zip(train, test, strict=True))
    )
    return train, test
