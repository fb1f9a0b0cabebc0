"""
Stage I: device-conditioned quantization-aware supernet training.

Each step samples one device uniformly and a sandwich of configurations
(largest, smallest, n random), sums their behavior-cloning losses on one tape and
takes a single Adam step. The budget regularizers depend only on (config, device),
so they enter the reported base loss and, in the biased sampling mode, which
configurations get trained.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from core import numerics as nx
from core import storage
from core.configspace import (ModelDims, SearchSpace, SubnetConfig, config_hash, largest_config,
                              sample_uniform, smallest_config)
from core.costmodel import DeviceProfile, reg_latency, reg_memory
from core.env import ClosedLoopEnv, Trajectory, episode_rng, rollout_batch
from core.error_handler import ConfigError, EvaluationError, NumericsError, TrainingError
from core.numerics import Adam, Tensor
from core.supernet import Supernet, calibrate_bank

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['step', 'device_id', 'config_hash', 'L_policy', 'R_lat', 'R_mem', 'L_base']


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.1
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 64
    sampling: str = 'sandwich'
    n_random: int = 2
    biased_candidates: int = 16
    seed: int = 0
    warmup_steps: int = 200
    ema_decay: float = 0.99
    calibration_samples: int = 256
    check_gradient_masks: bool = True
    mask_check_every: int = 25
    log_every: int = 100

    def __post_init__(self):
        if self.mask_check_every < 1:
            raise ConfigError(f"mask_check_every must be >= 1, got {self.mask_check_every}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.sampling not in ('sandwich', 'biased'):
            raise ConfigError(f"unknown sampling mode {self.sampling}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainState:
    supernet: Supernet
    optimizer: Adam
    rng: np.random.Generator
    profiles: List[DeviceProfile]
    obs: np.ndarray
    actions: np.ndarray
    step: int = 0
    history: List[Dict] = field(default_factory=list)

    @property
    def space(self) -> SearchSpace:
        return self.supernet.space

    @property
    def dims(self) -> ModelDims:
        return self.supernet.dims


# ===========================
# DATA
# ===========================

def split_demos(demos: Sequence[Trajectory], val_fraction: float, seed: int) -> Tuple[List[Trajectory], List[Trajectory]]:
    """Hold out whole trajectories for validation"""
    if not demos:
        raise ConfigError("no demonstrations to split")
    order = np.random.default_rng(seed).permutation(len(demos))
    n_val = int(round(val_fraction * len(demos)))
    if len(demos) >= 2:
        n_val = min(max(n_val, 1), len(demos) - 1)
    else:
        n_val = 0
    val = [demos[i] for i in sorted(order[:n_val])]
    train = [demos[i] for i in sorted(order[n_val:])]
    return train, val


def stack_demos(demos: Sequence[Trajectory]) -> Tuple[np.ndarray, np.ndarray]:
    obs = np.concatenate([t.observations for t in demos]).astype(np.float32)
    act = np.concatenate([t.actions for t in demos]).astype(np.float32)
    return obs, act


# ===========================
# LOSSES
# ===========================

def policy_loss(supernet: Supernet, config: SubnetConfig, obs: np.ndarray, actions: np.ndarray,
                leaves: Optional[Dict[str, Tensor]] = None, calibrate: bool = False) -> Tensor:
    """Per-sample squared error summed over action dims, averaged over the batch"""
    pred = supernet.forward(config, obs, leaves=leaves, calibrate=calibrate)
    target = Tensor(np.asarray(actions).reshape(pred.shape))
    return nx.scale(nx.mse_loss(pred, target), float(pred.shape[-1]))


def base_loss(l_policy: float, r_lat: float, r_mem: float, alpha: float, beta: float) -> float:
    """L_policy + alpha * R_lat + beta * R_mem"""
    return float(l_policy + alpha * r_lat + beta * r_mem)


def regularizers(profile: DeviceProfile, config: SubnetConfig, dims: ModelDims) -> Tuple[float, float]:
    return reg_latency(profile, config), reg_memory(profile, config, dims)


def sample_step_configs(space: SearchSpace, dims: ModelDims, profile: DeviceProfile,
                        cfg: TrainConfig, rng: np.random.Generator) -> List[SubnetConfig]:
    """Largest + smallest + n_random configs (uniform, or weighted by exp(-regularized cost))"""
    configs = [largest_config(space), smallest_config(space)]
    if cfg.sampling == 'sandwich':
        configs.extend(sample_uniform(space, rng) for _ in range(cfg.n_random))
        return configs
    candidates = [sample_uniform(space, rng) for _ in range(cfg.biased_candidates)]
    energy = np.array([cfg.alpha * r_lat + cfg.beta * r_mem
                       for r_lat, r_mem in (regularizers(profile, c, dims) for c in candidates)])
    weights = np.exp(-(energy - energy.min()))
    picks = rng.choice(len(candidates), size=cfg.n_random, replace=True, p=weights / weights.sum())
    configs.extend(candidates[i] for i in picks)
    return configs


def _sum(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = nx.add(total, t)
    return total


def check_gradients(state: TrainState, grads: Dict[str, np.ndarray], configs: Sequence[SubnetConfig],
                    device_id: str, check_masks: bool):
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradients at step {state.step} for {bad[:5]}",
                            details={'step': state.step, 'device_id': device_id,
                                     'configs': [config_hash(c) for c in configs], 'params': bad})
    if not check_masks:
        return
    union = None
    for c in configs:
        masks = state.supernet.active_masks(c)
        union = masks if union is None else {n: union[n] | masks[n] for n in masks}
    leaks = [n for n, g in grads.items() if np.any(g[~union[n]] != 0)]
    if leaks:
        raise TrainingError(f"gradient outside active slices at step {state.step}: {leaks[:5]}",
                            details={'step': state.step, 'params': leaks})


def configs_loss(state: TrainState, configs: Sequence[SubnetConfig], obs: np.ndarray,
                 actions: np.ndarray, leaves: Dict[str, Tensor]) -> List[Tensor]:
    """Per-config policy losses; the caller owns the tape"""
    return [policy_loss(state.supernet, c, obs, actions, leaves, calibrate=True) for c in configs]


def mask_check_due(cfg: TrainConfig, step: int) -> bool:
    """Gradient-mask instrumentation runs on step 0 and every mask_check_every steps after"""
    return cfg.check_gradient_masks and step % cfg.mask_check_every == 0


def apply_gradients(state: TrainState, total: Tensor, tape: nx.Tape, leaves: Dict[str, Tensor],
                    configs: Sequence[SubnetConfig], device_id: str, cfg: TrainConfig):
    names = state.supernet.names
    grads = dict(zip(names, tape.backward(total, [leaves[n] for n in names])))
    check_gradients(state, grads, configs, device_id, mask_check_due(cfg, state.step))
    try:
        updated = state.optimizer.step(state.supernet.params, grads)
    except NumericsError as e:
        raise TrainingError(f"optimizer step failed at step {state.step}: {e.message}",
                            details={'step': state.step, 'device_id': device_id})
    state.supernet.update_params(updated)


def train_step(state: TrainState, cfg: TrainConfig) -> List[Dict]:
    """One optimizer step over a sandwich of configs; returns one metrics row per config"""
    rng = state.rng
    profile = state.profiles[int(rng.integers(len(state.profiles)))]
    configs = sample_step_configs(state.space, state.dims, profile, cfg, rng)
    idx = rng.integers(len(state.obs), size=cfg.batch_size)
    obs, act = state.obs[idx], state.actions[idx]

    leaves = state.supernet.leaves()
    try:
        with nx.Tape() as tape:
            losses = configs_loss(state, configs, obs, act, leaves)
            total = _sum(losses)
    except NumericsError as e:
        raise TrainingError(f"forward pass failed at step {state.step}: {e.message}",
                            details={'step': state.step, 'device_id': profile.device_id,
                                     'configs': [config_hash(c) for c in configs]})
    apply_gradients(state, total, tape, leaves, configs, profile.device_id, cfg)

    rows = []
    for c, loss in zip(configs, losses):
        r_lat, r_mem = regularizers(profile, c, state.dims)
        l_policy = loss.item()
        rows.append({
            'step': state.step,
            'device_id': profile.device_id,
            'config_hash': config_hash(c),
            'L_policy': l_policy,
            'R_lat': r_lat,
            'R_mem': r_mem,
            'L_base': base_loss(l_policy, r_lat, r_mem, cfg.alpha, cfg.beta),
        })
    state.step += 1
    return rows


def init_train_state(space: SearchSpace, dims: ModelDims, cfg: TrainConfig, profiles: Sequence[DeviceProfile],
                     demos: Sequence[Trajectory]) -> TrainState:
    if not profiles:
        raise ConfigError("training needs at least one device profile")
    obs, act = stack_demos(demos)
    supernet = Supernet(space, dims, seed=cfg.seed, ema_decay=cfg.ema_decay, warmup_steps=cfg.warmup_steps)
    calib_rng = np.random.default_rng([cfg.seed, 1])
    sample = obs[calib_rng.permutation(len(obs))[:cfg.calibration_samples]]
    calibrate_bank(supernet, sample)
    return TrainState(supernet, Adam(lr=cfg.lr), np.random.default_rng(cfg.seed), list(profiles), obs, act)


def train(state: TrainState, cfg: TrainConfig, steps: Optional[int] = None,
          metrics_path: Optional[str] = None, show_progress: bool = False) -> List[Dict]:
    steps = cfg.steps if steps is None else steps
    rows: List[Dict] = []
    for _ in tqdm(range(steps), desc="train", disable=not show_progress):
        step_rows = train_step(state, cfg)
        rows.extend(step_rows)
        if cfg.log_every and state.step % cfg.log_every == 0:
            mean_loss = float(np.mean([r['L_policy'] for r in step_rows]))
            logger.info(f"step {state.step}: device={step_rows[0]['device_id']} mean L_policy={mean_loss:.5f}")
    state.history.extend(rows)
    if metrics_path:
        storage.write_csv(rows, metrics_path, columns=METRIC_COLUMNS)
    return rows


# ===========================
# EVALUATION
# ===========================

@dataclass(frozen=True)
class EvalResult:
    success_rate: float
    mean_length: float
    successes: int
    n_episodes: int

    def to_dict(self) -> Dict:
        return {'success_rate': self.success_rate, 'mean_length': self.mean_length,
                'successes': self.successes, 'n_episodes': self.n_episodes}


def eval_seeds(base: int, n: int) -> List[int]:
    return [int(base) + i for i in range(n)]


def evaluate(policy: Callable[[np.ndarray], np.ndarray], env: ClosedLoopEnv, n_episodes: int,
             seed: int = 10_000, max_steps: Optional[int] = None,
             seeds: Optional[Sequence[int]] = None) -> EvalResult:
    """Closed-loop success rate and mean episode length over fixed seeds"""
    seeds = list(seeds) if seeds is not None else eval_seeds(seed, n_episodes)
    if len(seeds) == 0:
        raise EvaluationError("evaluation needs at least one episode")
    trajectories = rollout_batch(policy, env, seeds, max_steps)
    successes = sum(1 for t in trajectories if t.success)
    mean_length = float(np.mean([len(t) for t in trajectories]))
    return EvalResult(successes / len(seeds), mean_length, successes, len(seeds))


def evaluate_config(supernet: Supernet, config: SubnetConfig, env: ClosedLoopEnv, n_episodes: int,
                    seed: int = 10_000, max_steps: Optional[int] = None) -> EvalResult:
    return evaluate(lambda o: supernet.predict(config, o), env, n_episodes, seed, max_steps)


def validation_loss(supernet: Supernet, config: SubnetConfig, obs: np.ndarray, actions: np.ndarray) -> float:
    with nx.no_grad():
        return policy_loss(supernet, config, obs, actions).item()


def random_policy_floor(env: ClosedLoopEnv, n_episodes: int, seed: int = 10_000) -> EvalResult:
    """Success of uniformly random actions, the floor an untrained policy is compared to"""
    rng = episode_rng(seed)
    return evaluate(lambda o: rng.uniform(-1.0, 1.0, size=(np.atleast_2d(o).shape[0], env.act_dim)),
                    env, n_episodes, seed)


def median_loss_trend(rows: Sequence[Dict], fraction: float = 0.1) -> Tuple[float, float]:
    """(median L_policy over the first fraction of steps, over the last fraction)"""
    steps = sorted({r['step'] for r in rows})
    if not steps:
        raise TrainingError("no metrics rows")
    k = max(1, int(math.ceil(fraction * len(steps))))
    first, last = set(steps[:k]), set(steps[-k:])
    head = [r['L_policy'] for r in rows if r['step'] in first]
    tail = [r['L_policy'] for r in rows if r['step'] in last]
    return float(np.median(head)), float(np.median(tail))
