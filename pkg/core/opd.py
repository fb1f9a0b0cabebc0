"""
Multi-step on-policy distillation: the quantized student is rolled out for K
steps, and at every state it visits its action is pulled toward the frozen
full-precision teacher's. The horizon K grows with training progress.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from core import numerics as nx
from core import storage
from core.configspace import LayerChoice, SubnetConfig, config_hash, largest_config, uniform_bits_config
from core.env import (ClosedLoopEnv, LinearStudent, LinearSystem, LinearSystemEnv, accumulation_gap,
                      episode_rng)
from core.error_handler import ConfigError, EnvDivergenceError, NumericsError, TrainingError
from core.numerics import Adam, Tensor
from core.quant import PASS_THROUGH_BITS
from core.supernet import Supernet
from core.trainer import (TrainConfig, TrainState, _sum, apply_gradients, base_loss, configs_loss, evaluate,
                          regularizers, sample_step_configs)

logger = logging.getLogger(__name__)

DISTILL_COLUMNS = ['step', 'device_id', 'config_hash', 'L_policy', 'R_lat', 'R_mem', 'L_base',
                   'K', 'L_OPD', 'L_total']

StudentFn = Callable[[np.ndarray], Tensor]


@dataclass
class OpdConfig:
    gamma: float = 1.0
    k_min: int = 1
    k_max: int = 8
    schedule: str = 'linear'
    weighting: str = 'uniform'
    discount: float = 0.9
    steps: int = 500
    rollouts: int = 8

    def __post_init__(self):
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError(f"need 1 <= k_min <= k_max, got {self.k_min}, {self.k_max}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.schedule not in ('linear', 'constant'):
            raise ConfigError(f"unknown horizon schedule {self.schedule}")
        if self.weighting not in ('uniform', 'discount'):
            raise ConfigError(f"unknown weighting rule {self.weighting}")
        if self.weighting == 'discount' and not 0 < self.discount <= 1:
            raise ConfigError(f"discount must be in (0, 1], got {self.discount}")


class TeacherHandle:
    """The supernet's largest architecture at full precision, evaluated without gradient"""

    def __init__(self, supernet: Supernet):
        self.supernet = supernet
        top = largest_config(supernet.space)
        self.config = SubnetConfig(tuple(LayerChoice(1, c.r, c.h, PASS_THROUGH_BITS, PASS_THROUGH_BITS)
                                         for c in top.layers))

    def act(self, obs: np.ndarray) -> np.ndarray:
        return self.supernet.predict(self.config, obs)

    __call__ = act


def horizon(progress: float, cfg: OpdConfig) -> int:
    """K = round(K_min + progress * (K_max - K_min)), halves rounding up"""
    if cfg.schedule == 'constant':
        return cfg.k_max
    p = min(max(float(progress), 0.0), 1.0)
    return int(math.floor(cfg.k_min + p * (cfg.k_max - cfg.k_min) + 0.5))


def step_weights(K: int, cfg: OpdConfig) -> np.ndarray:
    if cfg.weighting == 'discount':
        return cfg.discount ** np.arange(K, dtype=np.float64)
    return np.ones(K, dtype=np.float64)


def combine_step_losses(step_losses: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """(1/K) * sum_t w_t * D_t"""
    K = len(step_losses)
    if K == 0:
        raise ConfigError("OPD horizon must be >= 1")
    weighted = [nx.scale(d, float(w)) for d, w in zip(step_losses, weights)]
    return nx.scale(_sum(weighted), 1.0 / K)


def total_loss(base: float, opd: float, gamma: float) -> float:
    return float(base + gamma * opd)


def opd_loss(student: StudentFn, teacher: Callable[[np.ndarray], np.ndarray], env: ClosedLoopEnv,
             K: int, start_states: np.ndarray, cfg: Optional[OpdConfig] = None) -> Tensor:
    """
    Roll the student out for K steps from each start state. At every visited
    observation, D_t = MSE(teacher, student) over action dims; states are advanced
    with the detached student action.
    """
    if K < 1:
        raise ConfigError(f"OPD horizon must be >= 1, got {K}")
    cfg = cfg or OpdConfig()
    states = np.array(start_states, dtype=np.float64)
    step_losses = []
    for t in range(K):
        obs = env.observe(states)
        student_action = student(obs)
        with nx.no_grad():
            target = np.asarray(teacher(obs), dtype=np.float64).reshape(student_action.shape)
        step_losses.append(nx.mse_loss(student_action, Tensor(target)))
        states, _ = env.step(states, student_action.numpy().astype(np.float64))
        if not np.all(np.isfinite(states)):
            raise EnvDivergenceError(f"student rollout diverged at step {t}", details={'step': t})
    return combine_step_losses(step_losses, step_weights(K, cfg))


def seeded_opd_loss(supernet: Supernet, config: SubnetConfig, teacher: Callable[[np.ndarray], np.ndarray],
                    env: ClosedLoopEnv, K: int, seed: int, cfg: Optional[OpdConfig] = None) -> Tensor:
    """L_OPD of one supernet config from `cfg.rollouts` start states drawn with `seed`"""
    cfg = cfg or OpdConfig()
    rng = episode_rng(seed)
    starts = np.stack([env.reset(rng) for _ in range(cfg.rollouts)])
    return opd_loss(lambda o: supernet.forward(config, o), teacher, env, K, starts, cfg)


# ===========================
# SUPERNET DISTILLATION
# ===========================

def sample_start_states(state: TrainState, n: int) -> np.ndarray:
    """Demonstration observations double as full environment states"""
    idx = state.rng.integers(len(state.obs), size=n)
    return state.obs[idx].astype(np.float64)


def distill_step(state: TrainState, train_cfg: TrainConfig, opd_cfg: OpdConfig, env: ClosedLoopEnv,
                 progress: float, teacher: Optional[TeacherHandle] = None) -> List[Dict]:
    """Base loss on the sampled configs plus gamma * L_OPD on every quantized student among them"""
    teacher = teacher or TeacherHandle(state.supernet)
    rng = state.rng
    profile = state.profiles[int(rng.integers(len(state.profiles)))]
    configs = sample_step_configs(state.space, state.dims, profile, train_cfg, rng)
    idx = rng.integers(len(state.obs), size=train_cfg.batch_size)
    obs, act = state.obs[idx], state.actions[idx]
    starts = sample_start_states(state, opd_cfg.rollouts)
    K = horizon(progress, opd_cfg)

    leaves = state.supernet.leaves()
    opd_terms: List[Optional[Tensor]] = []
    try:
        with nx.Tape() as tape:
            losses = configs_loss(state, configs, obs, act, leaves)
            terms = list(losses)
            for c in configs:
                if c == teacher.config or opd_cfg.gamma == 0:
                    opd_terms.append(None)
                    continue

                def student(o, _c=c):
                    return state.supernet.forward(_c, o, leaves=leaves)
                l_opd = opd_loss(student, teacher.act, env, K, starts, opd_cfg)
                opd_terms.append(l_opd)
                terms.append(nx.scale(l_opd, opd_cfg.gamma))
            total = _sum(terms)
    except NumericsError as e:
        raise TrainingError(f"distillation forward failed at step {state.step}: {e.message}",
                            details={'step': state.step, 'device_id': profile.device_id})
    apply_gradients(state, total, tape, leaves, configs, profile.device_id, train_cfg)

    rows = []
    for c, loss, l_opd in zip(configs, losses, opd_terms):
        r_lat, r_mem = regularizers(profile, c, state.dims)
        l_policy = loss.item()
        l_base = base_loss(l_policy, r_lat, r_mem, train_cfg.alpha, train_cfg.beta)
        opd_value = l_opd.item() if l_opd is not None else 0.0
        rows.append({
            'step': state.step,
            'device_id': profile.device_id,
            'config_hash': config_hash(c),
            'L_policy': l_policy,
            'R_lat': r_lat,
            'R_mem': r_mem,
            'L_base': l_base,
            'K': K,
            'L_OPD': opd_value,
            'L_total': total_loss(l_base, opd_value, opd_cfg.gamma),
        })
    state.step += 1
    return rows


def distill(state: TrainState, train_cfg: TrainConfig, opd_cfg: OpdConfig, env: ClosedLoopEnv,
            steps: Optional[int] = None, metrics_path: Optional[str] = None,
            show_progress: bool = False) -> List[Dict]:
    """Continue training with L_base + gamma * L_OPD; the horizon follows progress through the run"""
    steps = opd_cfg.steps if steps is None else steps
    teacher = TeacherHandle(state.supernet)
    rows: List[Dict] = []
    for i in tqdm(range(steps), desc="distill", disable=not show_progress):
        progress = i / max(steps - 1, 1)
        step_rows = distill_step(state, train_cfg, opd_cfg, env, progress, teacher)
        rows.extend(step_rows)
        if train_cfg.log_every and (i + 1) % train_cfg.log_every == 0:
            opd_values = [r['L_OPD'] for r in step_rows if r['L_OPD']]
            logger.info(f"distill step {i + 1}/{steps}: K={step_rows[0]['K']} "
                        f"mean L_OPD={np.mean(opd_values) if opd_values else 0.0:.5f}")
    state.history.extend(rows)
    if metrics_path:
        storage.write_csv(rows, metrics_path, columns=DISTILL_COLUMNS)
    return rows


# ===========================
# LINEAR-SYSTEM HORIZON EXPERIMENT
# ===========================

@dataclass
class HorizonTrial:
    seed: int
    gap_single_step: float
    gap_multi_step: float

    @property
    def multi_step_wins(self) -> bool:
        return self.gap_multi_step < self.gap_single_step


@dataclass
class HorizonComparison:
    trials: List[HorizonTrial]
    k_max: int
    T: int

    @property
    def wins(self) -> int:
        return sum(1 for t in self.trials if t.multi_step_wins)

    @property
    def p_value(self) -> float:
        return sign_test_p_value(self.wins, len(self.trials))

    @property
    def mean_gap_single_step(self) -> float:
        return float(np.mean([t.gap_single_step for t in self.trials]))

    @property
    def mean_gap_multi_step(self) -> float:
        return float(np.mean([t.gap_multi_step for t in self.trials]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{'seed': t.seed, 'gap_k1': t.gap_single_step, f'gap_k{self.k_max}': t.gap_multi_step,
                              'multi_step_wins': t.multi_step_wins} for t in self.trials])

    def summary(self) -> Dict:
        return {'k_max': self.k_max, 'T': self.T, 'n_seeds': len(self.trials), 'wins': self.wins,
                'p_value': self.p_value, 'mean_gap_k1': self.mean_gap_single_step,
                f'mean_gap_k{self.k_max}': self.mean_gap_multi_step}


def sign_test_p_value(wins: int, n: int) -> float:
    """One-sided P(X >= wins) for X ~ Binomial(n, 1/2)"""
    return float(sum(math.comb(n, i) for i in range(wins, n + 1)) / 2 ** n)


def fine_tune_linear_student(student: LinearStudent, env: LinearSystemEnv, opd_cfg: OpdConfig,
                             steps: int, lr: float, seed: int) -> LinearStudent:
    """Adam on the student's float weight through the STE; start states drawn per step"""
    optimizer = Adam(lr=lr)
    teacher = env.system.teacher_action
    rng = np.random.default_rng(seed)
    for i in range(steps):
        K = horizon(i / max(steps - 1, 1), opd_cfg)
        starts = np.stack([env.reset(rng) for _ in range(opd_cfg.rollouts)])
        w = Tensor(student.weight, requires_grad=True, name='W')
        with nx.Tape() as tape:
            loss = opd_loss(lambda o: student.forward(o, w), teacher, env, K, starts, opd_cfg)
        (grad,) = tape.backward(loss, [w])
        student.weight = optimizer.step({'W': student.weight}, {'W': grad})['W']
    return student


def compare_horizons_on_linear_system(system: LinearSystem, n_seeds: int = 10, k_max: int = 8, T: int = 50,
                                      steps: int = 200, lr: float = 0.05, w_bits: int = 4, a_bits: int = 4,
                                      perturbation: float = 1.5, rollouts: int = 8, eval_starts: int = 32,
                                      show_progress: bool = False) -> HorizonComparison:
    """
    For each seed: perturb the teacher gain into a quantized student, fine-tune one
    copy with K=1 and one with the K_max linear schedule (same step budget), and
    compare mean accumulation gaps at T over shared start states
    """
    env = LinearSystemEnv(system, max_steps=T)
    teacher = system.teacher_action
    trials = []
    for seed in tqdm(range(n_seeds), desc="opd-trend", disable=not show_progress):
        rng = np.random.default_rng([seed, 7])
        weight = -system.G.T + rng.uniform(-perturbation, perturbation, size=system.G.T.shape)
        base = LinearStudent(system, w_bits, a_bits, weight)
        calib = np.stack([env.reset(rng) for _ in range(64)])
        base.calibrate(calib)

        single = fine_tune_linear_student(base.copy(), env, OpdConfig(k_min=1, k_max=1, rollouts=rollouts),
                                          steps, lr, seed)
        multi = fine_tune_linear_student(base.copy(), env, OpdConfig(k_min=1, k_max=k_max, rollouts=rollouts),
                                         steps, lr, seed)
        starts = [env.reset(episode_rng(1_000_000 + seed * eval_starts + j)) for j in range(eval_starts)]
        gap_single = float(np.mean([accumulation_gap(system, teacher, single.act, T, x0) for x0 in starts]))
        gap_multi = float(np.mean([accumulation_gap(system, teacher, multi.act, T, x0) for x0 in starts]))
        trials.append(HorizonTrial(seed, gap_single, gap_multi))
        logger.info(f"seed {seed}: gap K=1 {gap_single:.5f} vs K={k_max} {gap_multi:.5f}")
    return HorizonComparison(trials, k_max, T)


# ===========================
# PUSHBOX HORIZON EXPERIMENT
# ===========================

@dataclass
class SuccessTrial:
    seed: int
    success_single_step: float
    success_multi_step: float

    @property
    def outcome(self) -> int:
        """+1 when the multi-step arm succeeds more often, -1 when less, 0 on a tie"""
        return int(np.sign(self.success_multi_step - self.success_single_step))


@dataclass
class SuccessComparison:
    trials: List[SuccessTrial]
    k_max: int
    steps: int
    n_episodes: int
    student_id: str

    @property
    def wins(self) -> int:
        return sum(1 for t in self.trials if t.outcome > 0)

    @property
    def losses(self) -> int:
        return sum(1 for t in self.trials if t.outcome < 0)

    @property
    def ties(self) -> int:
        return len(self.trials) - self.wins - self.losses

    @property
    def p_value(self) -> float:
        """Sign test over the untied seeds"""
        return sign_test_p_value(self.wins, self.wins + self.losses)

    @property
    def mean_success_single_step(self) -> float:
        return float(np.mean([t.success_single_step for t in self.trials]))

    @property
    def mean_success_multi_step(self) -> float:
        return float(np.mean([t.success_multi_step for t in self.trials]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{'seed': t.seed, 'success_k1': t.success_single_step,
                              f'success_k{self.k_max}': t.success_multi_step, 'outcome': t.outcome}
                             for t in self.trials])

    def summary(self) -> Dict:
        return {'k_max': self.k_max, 'steps': self.steps, 'n_seeds': len(self.trials),
                'n_episodes': self.n_episodes, 'student_config_id': self.student_id,
                'wins': self.wins, 'ties': self.ties, 'losses': self.losses, 'p_value': self.p_value,
                'mean_success_k1': self.mean_success_single_step,
                f'mean_success_k{self.k_max}': self.mean_success_multi_step}


def _distilled_success(load_state: Callable[[], TrainState], train_cfg: TrainConfig, opd_cfg: OpdConfig,
                       env: ClosedLoopEnv, steps: int, seed: int, student: Optional[SubnetConfig],
                       n_episodes: int, eval_seed: int) -> Tuple[float, SubnetConfig]:
    state = load_state()
    state.rng = np.random.default_rng([seed, 13])
    distill(state, train_cfg, opd_cfg, env, steps=steps)
    space = state.space
    student = student or uniform_bits_config(space, space.bw_menu[0], space.ba_menu[0])
    result = evaluate(lambda o: state.supernet.predict(student, o), env, n_episodes, seed=eval_seed)
    return result.success_rate, student


def compare_horizons_on_pushbox(load_state: Callable[[], TrainState], train_cfg: TrainConfig,
                                opd_cfg: OpdConfig, env: ClosedLoopEnv, n_seeds: int = 10, steps: int = 100,
                                n_episodes: int = 20, student: Optional[SubnetConfig] = None,
                                eval_seed: int = 20_000, show_progress: bool = False) -> SuccessComparison:
    """
    For each seed: distill two fresh copies of the same trained supernet, one at K=1
    and one on the K_min..K_max schedule, with the same step budget and the same
    sampling stream, then compare closed-loop success of the low-bit student.
    The default student is the largest architecture at the lowest bit-widths.
    """
    if n_seeds < 1 or n_episodes < 1:
        raise ConfigError(f"need n_seeds >= 1 and n_episodes >= 1, got {n_seeds}, {n_episodes}")
    single_cfg = replace(opd_cfg, k_min=1, k_max=1)
    trials = []
    student_id = ''
    for seed in tqdm(range(n_seeds), desc="opd-trend pushbox", disable=not show_progress):
        seed_eval = eval_seed + seed * n_episodes
        single, chosen = _distilled_success(load_state, train_cfg, single_cfg, env, steps, seed, student,
                                            n_episodes, seed_eval)
        multi, _ = _distilled_success(load_state, train_cfg, opd_cfg, env, steps, seed, chosen,
                                      n_episodes, seed_eval)
        student_id = config_hash(chosen)
        trials.append(SuccessTrial(seed, single, multi))
        logger.info(f"seed {seed}: success K=1 {single:.3f} vs K={opd_cfg.k_max} {multi:.3f}")
    return SuccessComparison(trials, opd_cfg.k_max, steps, n_episodes, student_id)
