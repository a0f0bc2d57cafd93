import hashlib
import json
import os
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

load_dotenv()


class Config:
    # Directory paths
    BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    OUTPUT_FOLDER = os.getenv("BBDFML_OUTPUT_DIR", os.path.join(BASE_DIR, "outputs"))

    # Logging
    LOG_LEVEL = os.getenv("BBDFML_LOG_LEVEL", "INFO").upper()
    LOG_FILE = os.getenv("BBDFML_LOG_FILE", os.path.join("logs", "bbdfml.log"))

    # Run registry
    DATABASE_URL = os.getenv(
        "BBDFML_DATABASE_URL", f"sqlite:///{os.path.join(OUTPUT_FOLDER, 'runs.db')}"
    )

    # Execution
    NUM_WORKERS = int(os.getenv("BBDFML_WORKERS", 1))
    DEVICE = os.getenv("BBDFML_DEVICE", "cpu")

    # Numerical floors shared by the loss formulas
    PROB_FLOOR = 1e-12

    @staticmethod
    def check_environment():
        """Report the effective process-level settings"""
        return {
            "output_dir": Config.OUTPUT_FOLDER,
            "database_url": Config.DATABASE_URL,
            "workers": Config.NUM_WORKERS,
            "device": Config.DEVICE,
            "log_level": Config.LOG_LEVEL,
        }


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ZoConfig(_Frozen):
    """Randomized gradient estimator settings (q directions, smoothing mu)."""

    q: int = Field(100, ge=1)
    mu: float = Field(0.005, gt=0)
    seed: int = 0


class GeneratorConfig(_Frozen):
    latent_dim: int = Field(256, ge=1)
    out_shape: tuple[int, ...]
    nf: int = Field(64, ge=1)
    mode: Literal["conv", "dense"] = "conv"

    @model_validator(mode="after")
    def _check_shape(self):
        if self.mode == "conv":
            if len(self.out_shape) != 3 or self.out_shape[1] != self.out_shape[2]:
                raise ValueError("conv mode needs out_shape (nc, img_size, img_size)")
            if self.out_shape[1] % 4:
                raise ValueError(f"img_size {self.out_shape[1]} is not divisible by 4")
        elif any(d < 1 for d in self.out_shape):
            raise ValueError("out_shape entries must be positive")
        return self


class BoundaryConfig(_Frozen):
    lambda_q: float = Field(1.0, ge=0)
    recover_epochs: int = Field(200, ge=0)
    batch_per_set: int = Field(30, ge=1)
    gen_lr: float = Field(0.001, gt=0)
    # Differentiate the task-model branch of the boundary term exactly instead of
    # folding it into the zero-order scalar.
    exact_task_branch: bool = False


class InnerOuterConfig(_Frozen):
    inner_steps: int = Field(5, ge=0)
    inner_lr: float = Field(0.01, gt=0)
    outer_lr: float = Field(0.001, gt=0)
    second_order: bool = True
    accumulate: bool = False


class ScenarioConfig(_Frozen):
    scenario: Literal["SS", "SH", "MH"] = "SS"
    num_apis: int = Field(100, ge=1)
    ways: int = Field(5, ge=1)
    source_distributions: tuple[str, ...] = ("gaussian:0",)
    arch_menu: tuple[str, ...] = ("conv4-32",)

    @model_validator(mode="after")
    def _check_scenario(self):
        n_src = len(self.source_distributions)
        n_arch = len(self.arch_menu)
        if self.scenario == "SS" and (n_src != 1 or n_arch != 1):
            raise ValueError("SS needs exactly one source and one architecture")
        if self.scenario == "SH" and (n_src != 1 or n_arch < 2):
            raise ValueError("SH needs one source and several architectures")
        if self.scenario == "MH" and (n_src < 2 or n_arch < 2):
            raise ValueError("MH needs several sources and several architectures")
        return self


class PretrainConfig(_Frozen):
    epochs: int = Field(30, ge=1)
    lr: float = Field(0.01, gt=0)
    per_class: int = Field(100, ge=1)
    batch_size: int = Field(64, ge=1)
    holdout: int = Field(200, ge=1)
    accuracy_floor: float = Field(0.5, ge=0, le=1)
    # softened targets bound how far API outputs can saturate
    label_smoothing: float = Field(0.0, ge=0, lt=1)


class EpisodeSpec(_Frozen):
    ways: int = Field(5, ge=1)
    shots: int = Field(1, ge=1)
    query_shots: int = Field(15, ge=1)
    num_episodes: int = Field(600, ge=1)
    adapt_steps: int = Field(10, ge=0)
    adapt_lr: float = Field(0.01, gt=0)
    seed: int = 0


class RunConfig(_Frozen):
    """Flat run configuration. Every key is a top-level field so the JSON dump is flat."""

    # scenario
    scenario: Literal["SS", "SH", "MH"] = "SS"
    num_apis: int = Field(100, ge=1)
    ways: int = Field(5, ge=1)
    sources: tuple[str, ...] = ("glyph:0",)
    arch_menu: tuple[str, ...] = ("conv4-32",)
    meta_arch: str = "conv4-32"
    gaussian_dim: int = Field(16, ge=1)
    source_classes: int = Field(100, ge=2)
    img_size: int = Field(16, ge=4)
    meta_train_classes: int = Field(64, ge=1)
    samples_per_class: int = Field(600, ge=2)
    whitebox: bool = False

    # api pre-training
    pretrain_epochs: int = Field(30, ge=1)
    pretrain_lr: float = Field(0.01, gt=0)
    pretrain_per_class: int = Field(100, ge=1)
    pretrain_batch_size: int = Field(64, ge=1)
    pretrain_label_smoothing: float = Field(0.0, ge=0, lt=1)
    accuracy_floor: float = Field(0.5, ge=0, le=1)

    # generator
    latent_dim: int = Field(256, ge=1)
    gen_nf: int = Field(64, ge=1)
    gen_mode: Literal["conv", "dense"] = "conv"

    # recovery
    q: int = Field(100, ge=1)
    mu: float = Field(0.005, gt=0)
    lambda_q: float = Field(1.0, ge=0)
    recover_epochs: int = Field(200, ge=0)
    batch_per_set: int = Field(30, ge=1)
    gen_lr: float = Field(0.001, gt=0)
    exact_task_branch: bool = False

    # bi-level
    inner_steps: int = Field(5, ge=0)
    inner_lr: float = Field(0.01, gt=0)
    outer_lr: float = Field(0.001, gt=0)
    second_order: bool = True
    accumulate: bool = False

    # replay
    memory_capacity: int | None = Field(None, ge=1)
    p_replay: float = Field(0.5, ge=0, le=1)
    replay_shots: int = Field(1, ge=1)
    replay_query_shots: int = Field(15, ge=1)

    # component toggles
    use_bidf_mkd: bool = True
    use_boundary: bool = True
    use_replay: bool = True

    # evaluation
    shots: int = Field(1, ge=1)
    query_shots: int = Field(15, ge=1)
    num_episodes: int = Field(600, ge=1)
    adapt_steps: int = Field(10, ge=0)
    adapt_lr: float = Field(0.01, gt=0)
    distill_avg_steps: int = Field(100, ge=1)

    # orchestration
    mode: Literal["zo", "fo"] = "zo"
    max_iterations: int = Field(100, ge=0)
    batch_size: int = Field(4, ge=1)
    seed: int = 0
    output_dir: str = Config.OUTPUT_FOLDER
    checkpoint_every: int = Field(0, ge=0)
    fatal_error_threshold: int = Field(5, ge=1)

    @model_validator(mode="after")
    def _check_run(self):
        if self.mode == "fo" and not self.whitebox:
            raise ValueError("mode=fo requires a whitebox pool (whitebox=true)")
        self.scenario_config()
        self.generator_config()
        return self

    def scenario_config(self) -> ScenarioConfig:
        return ScenarioConfig(
            scenario=self.scenario,
            num_apis=self.num_apis,
            ways=self.ways,
            source_distributions=self.sources,
            arch_menu=self.arch_menu,
        )

    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(
            epochs=self.pretrain_epochs,
            lr=self.pretrain_lr,
            per_class=self.pretrain_per_class,
            batch_size=self.pretrain_batch_size,
            label_smoothing=self.pretrain_label_smoothing,
            accuracy_floor=self.accuracy_floor,
        )

    def input_shape(self) -> tuple[int, ...]:
        kind = self.sources[0].split(":", 1)[0]
        if kind == "gaussian":
            return (self.gaussian_dim,)
        return (1, self.img_size, self.img_size)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            latent_dim=self.latent_dim,
            out_shape=self.input_shape(),
            nf=self.gen_nf,
            mode=self.gen_mode,
        )

    def zo(self) -> ZoConfig:
        return ZoConfig(q=self.q, mu=self.mu, seed=self.seed)

    def boundary(self) -> BoundaryConfig:
        return BoundaryConfig(
            lambda_q=self.lambda_q if self.use_boundary else 0.0,
            recover_epochs=self.recover_epochs,
            batch_per_set=self.batch_per_set,
            gen_lr=self.gen_lr,
            exact_task_branch=self.exact_task_branch,
        )

    def inner_outer(self) -> InnerOuterConfig:
        return InnerOuterConfig(
            inner_steps=self.inner_steps,
            inner_lr=self.inner_lr,
            outer_lr=self.outer_lr,
            second_order=self.second_order,
            accumulate=self.accumulate,
        )

    def episode_spec(self) -> EpisodeSpec:
        return EpisodeSpec(
            ways=self.ways,
            shots=self.shots,
            query_shots=self.query_shots,
            num_episodes=self.num_episodes,
            adapt_steps=self.adapt_steps,
            adapt_lr=self.adapt_lr,
            seed=self.seed,
        )

    def bank_capacity(self) -> int:
        return self.memory_capacity or self.num_apis

    def effective_p_replay(self) -> float:
        return self.p_replay if self.use_replay else 0.0


# Desk profile: minutes on one core. The full profile is the field defaults.
PROFILES: dict[str, dict] = {
    "full": {},
    "desk": {
        "num_apis": 20,
        "sources": ("gaussian:0",),
        "arch_menu": ("mlp-2x64",),
        "meta_arch": "mlp-2x64",
        "gaussian_dim": 16,
        "source_classes": 40,
        "meta_train_classes": 30,
        "samples_per_class": 240,
        "pretrain_epochs": 20,
        "pretrain_per_class": 40,
        "pretrain_label_smoothing": 0.2,
        "latent_dim": 32,
        "gen_nf": 64,
        "gen_mode": "dense",
        "q": 50,
        "recover_epochs": 50,
        "gen_lr": 0.01,
        "replay_query_shots": 5,
        "num_episodes": 100,
        "max_iterations": 60,
        "batch_size": 4,
    },
}


def load_run_config(
    path: str | None = None, profile: str = "full", overrides: dict | None = None
) -> RunConfig:
    """Build a RunConfig from a profile, an optional flat JSON file and overrides."""
    from services.errors import ConfigurationError

    if profile not in PROFILES:
        raise ConfigurationError(f"Unknown profile: {profile}")

    values = dict(PROFILES[profile])
    if path:
        try:
            with open(path) as f:
                values.update(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read config file {path}: {e}") from e
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})

    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigurationError(str(e)) from e


def config_hash(cfg: BaseModel) -> str:
    """sha256 over the canonical JSON of every field."""
    payload = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()
