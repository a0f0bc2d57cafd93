"""
Ablation sweeps and run exports.
"""

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from config import RunConfig, config_hash
from database.db import get_session, record_run
from services.api_pool import ApiHandle, build_pool, cover_rate, pool_summary
from services.data_sources import DataSource, build_sources
from services.errors import ConfigurationError
from services.harness import EvalReport, comparison_table, evaluate, train_for
from services.trainer import RunState, predicted_queries
from utils.logger import app_logger

ABLATIONS = ("q_sweep", "api_count_sweep", "lambda_sweep", "shot_sweep", "fo_vs_zo", "component_toggle")

DEFAULT_GRIDS = {
    "q_sweep": (10, 50, 100, 150, 200),
    "api_count_sweep": (1, 5, 20, 50, 100),
    "lambda_sweep": (0.1, 1.0, 10.0),
    "shot_sweep": (1, 5, 10, 20),
    "fo_vs_zo": ("zo", "fo"),
    "component_toggle": ("vanilla", "+bidf_mkd", "+boundary", "full"),
}

COMPONENT_ROWS = {
    "vanilla": {"use_bidf_mkd": False, "use_boundary": False, "use_replay": True},
    "+bidf_mkd": {"use_bidf_mkd": True, "use_boundary": False, "use_replay": True},
    "+boundary": {"use_bidf_mkd": False, "use_boundary": True, "use_replay": True},
    "full": {"use_bidf_mkd": True, "use_boundary": True, "use_replay": True},
}


@dataclass
class AblationResult:
    which: str
    rows: list[dict] = field(default_factory=list)
    reports: list[EvalReport] = field(default_factory=list)

    def series(self) -> dict:
        """Plot-ready columns: grid value, accuracy, ci and training seconds."""
        return {
            "x": [r["value"] for r in self.rows],
            "accuracy": [r["accuracy"] for r in self.rows],
            "ci95": [r["ci95"] for r in self.rows],
            "train_seconds": [r["train_seconds"] for r in self.rows],
            "queries": [r["queries"] for r in self.rows],
        }

    def table(self) -> str:
        extra = "cover_rate" if any("cover_rate" in r for r in self.rows) else None
        header = f"| {self.which} | Accuracy | Queries | Train s |" + (f" {extra} |" if extra else "")
        lines = [header, "|---|---|---|---|" + ("---|" if extra else "")]
        for r in self.rows:
            line = (f"| {r['value']} | {100 * r['accuracy']:.2f} ± {100 * r['ci95']:.2f} "
                    f"| {r['queries']} | {r['train_seconds']:.1f} |")
            if extra:
                line += f" {r[extra]:.3f} |"
            lines.append(line)
        return "\n".join(lines)


def variant(cfg: RunConfig, **updates) -> RunConfig:
    """Validated copy of a config with some fields replaced."""
    return RunConfig.model_validate({**cfg.model_dump(), **updates})


def prepare(cfg: RunConfig, whitebox: bool | None = None) -> tuple[list[ApiHandle], list[DataSource], list[DataSource]]:
    train_sources, test_sources = build_sources(cfg)
    pool = build_pool(cfg.scenario_config(), train_sources, cfg.seed, cfg.pretrain(),
                      whitebox=cfg.whitebox if whitebox is None else whitebox)
    return pool, train_sources, test_sources


def _row(which: str, value, report: EvalReport, seconds: float, **extra) -> dict:
    return {"which": which, "value": value, "accuracy": report.mean_accuracy, "ci95": report.ci95,
            "queries": report.query_ledger_total, "train_seconds": round(seconds, 3), **extra}


def run_ablation(which: str, base_cfg: RunConfig, values: tuple | None = None, prepared=None) -> AblationResult:
    """
    Train and evaluate bidf_mkd over one grid.

    Args:
        which: one of ABLATIONS
        base_cfg: configuration every grid point starts from
        values: grid override; defaults to DEFAULT_GRIDS[which]
        prepared: (pool, train_sources, test_sources) to reuse instead of building them

    Returns:
        AblationResult with one row and one EvalReport per grid point
    """
    if which not in ABLATIONS:
        raise ConfigurationError(f"Unknown ablation: {which} (expected one of {', '.join(ABLATIONS)})")
    values = tuple(values or DEFAULT_GRIDS[which])
    if which == "fo_vs_zo":
        base_cfg = variant(base_cfg, whitebox=True)
    pool, train_sources, test_sources = prepared or prepare(base_cfg)
    result = AblationResult(which)
    app_logger.info(f"Ablation {which} over {values}")

    def train_and_eval(cfg: RunConfig, value, run_pool=pool, tag="bidf_mkd", **extra):
        started = time.perf_counter()
        state = train_for(tag, run_pool, cfg)
        seconds = time.perf_counter() - started
        report = evaluate(state.meta, test_sources, cfg.episode_spec(), f"{which}={value}", state.ledger)
        result.reports.append(report)
        result.rows.append(_row(which, value, report, seconds, **extra))
        return state

    if which == "q_sweep":
        for q in values:
            train_and_eval(variant(base_cfg, q=int(q)), q)
    elif which == "lambda_sweep":
        for lam in values:
            train_and_eval(variant(base_cfg, lambda_q=float(lam)), lam)
    elif which == "api_count_sweep":
        for n in values:
            if n > len(pool):
                app_logger.warning(f"Skipping api_count={n}: the pool holds {len(pool)} APIs")
                continue
            subset = pool[:int(n)]
            train_and_eval(variant(base_cfg, num_apis=int(n)), n,
                           run_pool=subset, cover_rate=cover_rate(subset, train_sources))
    elif which == "shot_sweep":
        started = time.perf_counter()
        state = train_for("bidf_mkd", pool, base_cfg)
        seconds = time.perf_counter() - started
        for k in values:
            spec = base_cfg.episode_spec().model_copy(update={"shots": int(k)})
            report = evaluate(state.meta, test_sources, spec, f"shot_sweep={k}", state.ledger)
            result.reports.append(report)
            result.rows.append(_row(which, k, report, seconds))
    elif which == "fo_vs_zo":
        for mode in values:
            train_and_eval(base_cfg, mode, tag="whitebox_fo" if mode == "fo" else "bidf_mkd")
    elif which == "component_toggle":
        for name in values:
            train_and_eval(variant(base_cfg, **COMPONENT_ROWS[name]), name)

    app_logger.info(f"Ablation {which} finished:\n{result.table()}")
    return result


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def _write_json(path: str, payload) -> str:
    with open(path, "w") as f:
        json.dump(_json_safe(payload), f, indent=2, sort_keys=True)
    return path


def _to_image(sample: np.ndarray) -> np.ndarray:
    if sample.ndim == 3:
        return sample.mean(0)
    side = math.ceil(math.sqrt(sample.size))
    padded = np.zeros(side * side, dtype=np.float32)
    padded[: sample.size] = sample.ravel()
    return padded.reshape(side, side)


def sample_grid(inputs: np.ndarray, labels: np.ndarray, cell: int = 32) -> Image.Image:
    """One column per class position, one row per recovered sample of that class."""
    classes = sorted(set(labels.tolist()))
    columns = [[_to_image(x) for x, y in zip(inputs, labels, strict=True) if y == c] for c in classes]
    rows = max((len(col) for col in columns), default=0)
    grid = Image.new("L", (max(1, len(classes)) * cell, max(1, rows) * cell), 0)
    for ci, col in enumerate(columns):
        for ri, img in enumerate(col):
            tile = Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8))
            grid.paste(tile.resize((cell, cell), Image.Resampling.NEAREST), (ci * cell, ri * cell))
    return grid


def export_report(
    state: RunState,
    reports: list[EvalReport] | None = None,
    output_dir: str | None = None,
    pool: list[ApiHandle] | None = None,
    max_grids: int = 4,
    database_url: str | None = None,
) -> dict[str, str]:
    """
    Write metrics, reports, recovered-sample grids and a summary for one run.

    Files land in <output_dir>/<config hash prefix>/ and carry no timestamps, so
    exporting the same state twice yields identical files.

    Returns:
        mapping from artifact name to path
    """
    reports = reports or []
    digest = state.config_hash
    out = os.path.join(output_dir or state.cfg.output_dir, digest[:12])
    os.makedirs(out, exist_ok=True)

    paths = {
        "metrics": _write_json(os.path.join(out, "metrics.json"), state.metrics),
        "eval_reports": _write_json(os.path.join(out, "eval_reports.json"), [r.to_dict() for r in reports]),
    }
    if reports:
        table_path = os.path.join(out, "comparison.md")
        with open(table_path, "w") as f:
            f.write(comparison_table(reports, state.cfg.ways) + "\n")
        paths["comparison"] = table_path

    episodes = list(state.bank.entries)[-max_grids:]
    for i, episode in enumerate(episodes):
        grid = sample_grid(episode.support.inputs.detach().float().numpy(), episode.support.labels.numpy())
        path = os.path.join(out, f"samples_{i}_api{episode.api_id}.png")
        grid.save(path)
        paths[f"samples_{i}"] = path

    summary = {
        "config_hash": digest,
        "config": state.cfg.model_dump(mode="json"),
        "method": state.method,
        "slots": state.slot,
        "api_slots": state.api_slots(),
        "total_queries": state.ledger,
        "failures": state.failures,
        "reports": {r.method_tag + f"@{r.shots}shot": {"mean_accuracy": r.mean_accuracy, "ci95": r.ci95}
                    for r in reports},
        "output_dir": out,
    }
    if state.method == "bidf_mkd" and not state.failures:
        summary["predicted_queries"] = predicted_queries(state.cfg, state.api_slots())
    if pool is not None:
        summary["pool"] = pool_summary(pool)
    paths["summary"] = _write_json(os.path.join(out, "summary.json"), summary)

    session = get_session(database_url)
    try:
        record_run(session, _json_safe(summary), _json_safe(state.metrics), [r.to_dict() for r in reports])
    finally:
        session.close()

    app_logger.info(f"Exported run {digest[:12]} to {out}")
    return paths


def export_ablation(result: AblationResult, output_dir: str, base_cfg: RunConfig) -> dict[str, str]:
    out = os.path.join(output_dir, f"ablation_{result.which}_{config_hash(base_cfg)[:12]}")
    os.makedirs(out, exist_ok=True)
    table_path = os.path.join(out, "table.md")
    with open(table_path, "w") as f:
        f.write(result.table() + "\n")
    return {
        "rows": _write_json(os.path.join(out, "rows.json"), result.rows),
        "series": _write_json(os.path.join(out, "series.json"), result.series()),
        "reports": _write_json(os.path.join(out, "reports.json"), [r.to_dict() for r in result.reports]),
        "table": table_path,
    }
