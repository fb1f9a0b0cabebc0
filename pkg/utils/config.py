"""
Configuration and constants for the DC-QFA pipeline
"""
import copy
import json
import os
from typing import Any, Dict, List, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.configspace import ModelDims, SearchSpace
from core.env import PushBoxEnv
from core.error_handler import ConfigError, safe_file_operation
from core.opd import OpdConfig
from core.search import SearchParams
from core.trainer import TrainConfig

# ===========================
# DIRECTORY CONFIGURATION
# ===========================

DEFAULT_OUT_DIR = 'runs/default'
EXAMPLE_CONFIG = 'data/run_config.json'

DEMOS_FILE = 'demos.bin'
PROFILES_FOLDER = 'profiles'
FIXTURES_FOLDER = 'profiles/fixtures'
SUPERNET_CKPT = 'supernet.ckpt'
TRAIN_METRICS = 'metrics.csv'
DISTILLED_CKPT = 'distilled.ckpt'
DISTILL_METRICS = 'distill_metrics.csv'
FRONTS_FOLDER = 'fronts'
EXPORT_FOLDER = 'export'
EVAL_FOLDER = 'eval'


def setup_directories(out_dir: str):
    """Create the output layout if it doesn't exist"""
    for folder in [PROFILES_FOLDER, FIXTURES_FOLDER, FRONTS_FOLDER, EXPORT_FOLDER, EVAL_FOLDER]:
        os.makedirs(os.path.join(out_dir, folder), exist_ok=True)


def artifact_path(out_dir: str, *parts: str) -> str:
    return normalize_path(os.path.join(out_dir, *parts))


# ===========================
# ENVIRONMENT PRESETS
# ===========================

PRESETS = {
    'desk': {
        'description': 'Acceptance-scale run: L=4, d_model=32, 50 demos, 2,000 + 500 steps',
        'config': {},
    },
    'smoke': {
        'description': 'Tiny run that finishes in seconds, for wiring checks',
        'config': {
            'space': {'n_layers': 2, 'r_menu': [1, 2], 'h_menu': [0.5, 1.0]},
            'model': {'d_model': 16, 'n_heads': 2, 'head_dim': 8, 'r_max': 2.0},
            'env': {'max_steps': 120},
            'demos': {'n_demos': 6},
            'quant': {'warmup_steps': 5, 'calibration_samples': 64},
            'train': {'steps': 20, 'batch_size': 16, 'log_every': 10},
            'opd': {'steps': 4, 'k_max': 3, 'rollouts': 4, 'trend_seeds': 3, 'trend_steps': 20,
                    'trend_T': 30, 'trend_pushbox_steps': 2, 'trend_pushbox_episodes': 2},
            'search': {'population': 8, 'generations': 3},
            'eval': {'n_episodes': 5},
        },
    },
}


def get_preset_name() -> str:
    return os.getenv('DCQFA_PRESET', 'desk')


def get_current_preset(name: Optional[str] = None) -> Dict:
    """Base run-config values for the active preset"""
    name = name or get_preset_name()
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name}; choose one of {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name]['config'])


# ===========================
# RUN CONFIG SCHEMA
# ===========================

class _Settings(BaseModel):
    model_config = ConfigDict(extra='forbid')


class SpaceSettings(_Settings):
    n_layers: int = 4
    r_menu: List[float] = [1, 2, 4]
    h_menu: List[float] = [0.5, 1.0]
    bw_menu: List[int] = [4, 8, 16]
    ba_menu: List[int] = [4, 8, 16]
    d_min: int = 1

    def to_space(self) -> SearchSpace:
        return SearchSpace(self.n_layers, tuple(self.r_menu), tuple(self.h_menu),
                           tuple(self.bw_menu), tuple(self.ba_menu), self.d_min)


class ModelSettings(_Settings):
    d_model: int = 32
    n_heads: int = 4
    head_dim: int = 8
    r_max: float = 4.0
    ln_eps: float = 1e-5

    def to_dims(self) -> ModelDims:
        return ModelDims(d_model=self.d_model, n_heads=self.n_heads, head_dim=self.head_dim,
                         r_max=self.r_max, ln_eps=self.ln_eps)


class EnvSettings(_Settings):
    dt: float = 0.05
    max_steps: int = 200
    success_threshold: float = 0.05

    def to_env(self) -> PushBoxEnv:
        return PushBoxEnv(dt=self.dt, max_steps=self.max_steps, success_threshold=self.success_threshold)


class DemoSettings(_Settings):
    n_demos: int = 50
    val_fraction: float = 0.2
    path: Optional[str] = None

    @field_validator('val_fraction')
    @classmethod
    def _fraction(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError('val_fraction must be in [0, 1)')
        return v


class QuantSettings(_Settings):
    ema_decay: float = 0.99
    warmup_steps: int = 200
    calibration_samples: int = 256


class TrainSettings(_Settings):
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    alpha: float = 0.1
    beta: float = 0.1
    sampling: str = 'sandwich'
    n_random: int = 2
    biased_candidates: int = 16
    check_gradient_masks: bool = True
    mask_check_every: int = 25
    log_every: int = 100


class OpdSettings(_Settings):
    gamma: float = 1.0
    k_min: int = 1
    k_max: int = 8
    schedule: str = 'linear'
    weighting: str = 'uniform'
    discount: float = 0.9
    steps: int = 500
    rollouts: int = 8
    trend_seeds: int = 10
    trend_T: int = 50
    trend_steps: int = 200
    trend_lr: float = 0.05
    trend_perturbation: float = 1.5
    trend_pushbox_steps: int = 100
    trend_pushbox_episodes: int = 20


class SearchSettings(_Settings):
    population: int = 64
    generations: int = 40
    p_mut: Optional[float] = None
    crossover_rate: float = 0.9
    objective: str = 'latency'
    selection: str = 'min-loss-under-budget'
    max_retries: int = 20
    use_distilled: bool = True
    mixed_precision_samples: int = 64


class ProfileSettings(_Settings):
    n_synthetic: int = 2
    include_jetson_fixture: bool = True
    paths: List[str] = []


class EvalSettings(_Settings):
    n_episodes: int = 100
    seed: int = 10_000


class RunConfig(_Settings):
    seed: int = 0
    out_dir: str = DEFAULT_OUT_DIR
    space: SpaceSettings = Field(default_factory=SpaceSettings)
    model: ModelSettings = Field(default_factory=ModelSettings)
    env: EnvSettings = Field(default_factory=EnvSettings)
    demos: DemoSettings = Field(default_factory=DemoSettings)
    quant: QuantSettings = Field(default_factory=QuantSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    opd: OpdSettings = Field(default_factory=OpdSettings)
    search: SearchSettings = Field(default_factory=SearchSettings)
    profiles: ProfileSettings = Field(default_factory=ProfileSettings)
    eval: EvalSettings = Field(default_factory=EvalSettings)

    @model_validator(mode='after')
    def _model_fits_space(self):
        if self.model.r_max < max(self.space.r_menu):
            raise ValueError(f'model.r_max {self.model.r_max} is below the largest r in space.r_menu')
        return self

    def train_config(self) -> TrainConfig:
        t, q = self.train, self.quant
        return TrainConfig(alpha=t.alpha, beta=t.beta, lr=t.lr, steps=t.steps, batch_size=t.batch_size,
                           sampling=t.sampling, n_random=t.n_random, biased_candidates=t.biased_candidates,
                           seed=self.seed, warmup_steps=q.warmup_steps, ema_decay=q.ema_decay,
                           calibration_samples=q.calibration_samples,
                           check_gradient_masks=t.check_gradient_masks, mask_check_every=t.mask_check_every,
                           log_every=t.log_every)

    def opd_config(self) -> OpdConfig:
        o = self.opd
        return OpdConfig(gamma=o.gamma, k_min=o.k_min, k_max=o.k_max, schedule=o.schedule,
                         weighting=o.weighting, discount=o.discount, steps=o.steps, rollouts=o.rollouts)

    def search_params(self) -> SearchParams:
        s = self.search
        return SearchParams(population=s.population, generations=s.generations, p_mut=s.p_mut,
                            crossover_rate=s.crossover_rate, objective=s.objective, max_retries=s.max_retries)


# ===========================
# LOADING AND OVERRIDES
# ===========================

def deep_merge(base: Dict, update: Dict) -> Dict:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(item: str):
    """'a.b.c=value' -> (['a', 'b', 'c'], value); value parsed as JSON, else kept as a string"""
    if '=' not in item:
        raise ConfigError(f"override must look like key=value, got '{item}'")
    key, raw = item.split('=', 1)
    path = [p for p in key.strip().split('.') if p]
    if not path:
        raise ConfigError(f"override has an empty key: '{item}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(raw: Dict, overrides: Sequence[str]) -> Dict:
    result = copy.deepcopy(raw)
    for item in overrides:
        path, value = parse_override(item)
        node = result
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item}: '{part}' is not a section")
            node = child
        node[path[-1]] = value
    return result


def _validation_message(error: ValidationError) -> str:
    parts = []
    for e in error.errors():
        where = '.'.join(str(p) for p in e['loc']) or '<root>'
        parts.append(f"{where}: {e['msg']}")
    return '; '.join(parts)


def build_run_config(raw: Dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid run config: {_validation_message(e)}")


def load_run_config(path: Optional[str] = None, overrides: Sequence[str] = (),
                    preset: Optional[str] = None) -> RunConfig:
    """Preset values, then the JSON file, then --set overrides; unknown keys are rejected"""
    raw = get_current_preset(preset)
    if path:
        def _read():
            with open(path, 'r', encoding='utf-8') as f:
                return f.read()
        text = safe_file_operation(_read, error_cls=ConfigError)
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})")
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: run config must be a JSON object")
        raw = deep_merge(raw, data)
    raw = apply_overrides(raw, overrides)
    return build_run_config(raw)


def config_summary(config: RunConfig) -> Dict[str, Any]:
    return config.model_dump()


# ===========================
# PATH HELPERS
# ===========================

def normalize_path(path):
    """
    Normalize file paths to use forward slashes consistently.
    """
    if path:
        return path.replace('\\', '/')
    return path
