"""
Closed-loop environments: a 2-D disk-pushing task with a scripted expert, and a
linear tracking system used as the error-accumulation oracle.

Environment functions are vectorized over leading batch axes: a PushBox state is
an array (..., 6) holding agent_xy, box_xy, goal_xy; a linear-system state is
its (..., n) state vector.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from core import numerics as nx
from core import quant
from core.error_handler import ConfigError, EnvDivergenceError

logger = logging.getLogger(__name__)

Policy = Callable[[np.ndarray], np.ndarray]


@dataclass
class Trajectory:
    """(o_t, a_t) pairs for t = 1..K and the terminal success flag"""
    observations: np.ndarray
    actions: np.ndarray
    success: bool
    final_state: Optional[np.ndarray] = field(default=None, compare=False)

    def __len__(self):
        return int(self.observations.shape[0])


class ClosedLoopEnv(Protocol):
    obs_dim: int
    act_dim: int
    max_steps: int

    def reset(self, rng: np.random.Generator) -> np.ndarray: ...

    def observe(self, states: np.ndarray) -> np.ndarray: ...

    def step(self, states: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]: ...

    def is_success(self, states: np.ndarray) -> np.ndarray: ...


def episode_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))


# ===========================
# PUSHBOX
# ===========================

@dataclass(frozen=True)
class PushBoxState:
    agent_xy: Tuple[float, float]
    box_xy: Tuple[float, float]
    goal_xy: Tuple[float, float]
    t: int = 0

    def to_array(self) -> np.ndarray:
        return np.array([*self.agent_xy, *self.box_xy, *self.goal_xy], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray, t: int = 0) -> "PushBoxState":
        a = np.asarray(arr, dtype=np.float64)
        return cls((float(a[0]), float(a[1])), (float(a[2]), float(a[3])), (float(a[4]), float(a[5])), t)


@dataclass(frozen=True)
class PushBoxEnv:
    dt: float = 0.05
    agent_radius: float = 0.05
    box_radius: float = 0.07
    success_threshold: float = 0.05
    max_steps: int = 200
    min_goal_distance: float = 0.2
    obs_dim: int = 6
    act_dim: int = 2

    @property
    def contact_radius(self) -> float:
        return self.agent_radius + self.box_radius

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        box = rng.uniform(0.25, 0.75, size=2)
        goal = rng.uniform(0.15, 0.85, size=2)
        while np.linalg.norm(goal - box) < self.min_goal_distance:
            goal = rng.uniform(0.15, 0.85, size=2)
        agent = rng.uniform(0.05, 0.95, size=2)
        while np.linalg.norm(agent - box) < self.contact_radius + 0.05:
            agent = rng.uniform(0.05, 0.95, size=2)
        return np.concatenate([agent, box, goal])

    def observe(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=np.float32).copy()

    def step(self, states: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Agent moves by dt*action; an overlapping box is displaced along the contact
        normal to touching distance; positions stay inside the unit square
        """
        s = np.asarray(states, dtype=np.float64)
        a = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0)
        agent = np.clip(s[..., 0:2] + self.dt * a, 0.0, 1.0)
        box = s[..., 2:4]
        goal = s[..., 4:6]
        R = self.contact_radius

        diff = box - agent
        dist = np.linalg.norm(diff, axis=-1, keepdims=True)
        fallback = np.where(np.linalg.norm(a, axis=-1, keepdims=True) > 0, a, np.array([1.0, 0.0]))
        fallback = fallback / np.linalg.norm(fallback, axis=-1, keepdims=True)
        normal = np.where(dist > 1e-12, diff / np.maximum(dist, 1e-12), fallback)
        touching = dist < R - 1e-9
        box = np.where(touching, np.clip(agent + normal * R, 0.0, 1.0), box)

        # a box pinned against the wall pushes the agent back out
        diff = box - agent
        dist = np.linalg.norm(diff, axis=-1, keepdims=True)
        normal = np.where(dist > 1e-12, diff / np.maximum(dist, 1e-12), normal)
        blocked = dist < R - 1e-9
        agent = np.where(blocked, np.clip(box - normal * R, 0.0, 1.0), agent)

        nxt = np.concatenate([agent, box, goal], axis=-1)
        return nxt, self.observe(nxt)

    def transition(self, state: PushBoxState, action) -> Tuple[PushBoxState, np.ndarray]:
        nxt, obs = self.step(state.to_array(), np.asarray(action))
        return PushBoxState.from_array(nxt, state.t + 1), obs

    def box_goal_distance(self, states: np.ndarray) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        return np.linalg.norm(s[..., 2:4] - s[..., 4:6], axis=-1)

    def is_success(self, states: np.ndarray) -> np.ndarray:
        return self.box_goal_distance(states) < self.success_threshold


def _toward(agent: np.ndarray, target: np.ndarray, dt: float) -> np.ndarray:
    v = (np.clip(target, 0.0, 1.0) - agent) / dt
    peak = np.max(np.abs(v))
    return v / peak if peak > 1.0 else v


def _rotate(v: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def scripted_expert(state: np.ndarray, env: PushBoxEnv = PushBoxEnv(), clearance: float = 0.08) -> np.ndarray:
    """
    Two-phase controller: circle the box at a safe radius to the point behind it
    on the box->goal line, then push along that line
    """
    s = np.asarray(state, dtype=np.float64)
    agent, box, goal = s[0:2], s[2:4], s[4:6]
    e = goal - box
    dist_bg = float(np.linalg.norm(e))
    if dist_bg < 0.6 * env.success_threshold:
        return np.zeros(2)
    u = e / dist_bg
    perp = np.array([-u[1], u[0]])
    R = env.contact_radius
    C = R + clearance
    rel = agent - box
    along = float(rel @ u)
    lateral = float(rel @ perp)

    if along < -0.5 * R and abs(lateral) < 0.3 * R:
        speed = float(np.clip(0.5 * dist_bg / env.dt, 0.2, 1.0))
        v = speed * u - 0.5 * lateral / env.dt * perp
        peak = np.max(np.abs(v))
        return v / peak if peak > 1.0 else v

    dist_ab = float(np.linalg.norm(rel))
    if dist_ab < 0.95 * C:
        return _toward(agent, box + rel / max(dist_ab, 1e-9) * C, env.dt)
    behind = -u
    angle_agent = np.arctan2(rel[1], rel[0])
    angle_behind = np.arctan2(behind[1], behind[0])
    delta = (angle_behind - angle_agent + np.pi) % (2 * np.pi) - np.pi
    if abs(delta) > np.pi / 6:
        step = np.sign(delta) * min(abs(delta), np.pi / 4)
        waypoint = box + _rotate(rel / dist_ab, step) * C
        return _toward(agent, waypoint, env.dt)
    return _toward(agent, box + behind * C, env.dt)


def expert_policy(env: PushBoxEnv) -> Policy:
    def act(obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs)
        if obs.ndim == 1:
            return scripted_expert(obs, env)
        return np.stack([scripted_expert(o, env) for o in obs])
    return act


# ===========================
# ROLLOUTS
# ===========================

def _check_actions(actions: np.ndarray, t: int):
    if not np.all(np.isfinite(actions)):
        raise EnvDivergenceError(f"non-finite action at step {t}", details={'step': t})


def rollout_from(policy: Policy, env: ClosedLoopEnv, state: np.ndarray, K: int) -> Trajectory:
    if K < 1:
        raise ConfigError(f"rollout horizon must be >= 1, got {K}")
    observations, actions = [], []
    success = False
    for t in range(K):
        obs = env.observe(state)
        action = np.asarray(policy(obs), dtype=np.float64).reshape(env.act_dim)
        _check_actions(action, t)
        observations.append(obs)
        actions.append(action.astype(np.float32))
        state, _ = env.step(state, action)
        if bool(env.is_success(state)):
            success = True
            break
    return Trajectory(np.stack(observations).astype(np.float32), np.stack(actions), success, state)


def rollout(policy: Policy, env: ClosedLoopEnv, K: int, seed: int) -> Trajectory:
    """Closed loop from the seed's initial state until K steps or success"""
    return rollout_from(policy, env, env.reset(episode_rng(seed)), K)


def rollout_batch(policy: Policy, env: ClosedLoopEnv, seeds: Sequence[int],
                  max_steps: Optional[int] = None) -> List[Trajectory]:
    """
    Lock-step rollouts of several episodes; the policy sees only the observations
    of episodes still running
    """
    max_steps = env.max_steps if max_steps is None else max_steps
    if max_steps < 1:
        raise ConfigError(f"rollout horizon must be >= 1, got {max_steps}")
    states = np.stack([env.reset(episode_rng(s)) for s in seeds])
    n = len(seeds)
    running = np.ones(n, dtype=bool)
    success = np.zeros(n, dtype=bool)
    obs_log: List[List[np.ndarray]] = [[] for _ in range(n)]
    act_log: List[List[np.ndarray]] = [[] for _ in range(n)]
    for t in range(max_steps):
        idx = np.flatnonzero(running)
        if idx.size == 0:
            break
        obs = env.observe(states[idx])
        actions = np.asarray(policy(obs), dtype=np.float64).reshape(idx.size, env.act_dim)
        _check_actions(actions, t)
        nxt, _ = env.step(states[idx], actions)
        states[idx] = nxt
        done = env.is_success(nxt)
        for j, i in enumerate(idx):
            obs_log[i].append(obs[j])
            act_log[i].append(actions[j].astype(np.float32))
        success[idx[done]] = True
        running[idx[done]] = False
    return [Trajectory(np.stack(obs_log[i]).astype(np.float32), np.stack(act_log[i]), bool(success[i]), states[i])
            for i in range(n)]


def generate_demos(env: PushBoxEnv, n: int, seed: int, max_steps: Optional[int] = None,
                   max_attempts: Optional[int] = None, show_progress: bool = False) -> List[Trajectory]:
    """n successful expert trajectories; failed expert episodes are skipped"""
    if n < 1:
        raise ConfigError(f"need at least one demonstration, got {n}")
    policy = expert_policy(env)
    max_attempts = max_attempts or 4 * n
    demos: List[Trajectory] = []
    skipped = 0
    attempt = 0
    bar = tqdm(total=n, desc="demos", disable=not show_progress)
    horizon = env.max_steps if max_steps is None else max_steps
    while len(demos) < n and attempt < max_attempts:
        traj = rollout(policy, env, horizon, seed=int(seed) * 100_003 + attempt)
        attempt += 1
        if traj.success:
            demos.append(traj)
            bar.update(1)
        else:
            skipped += 1
    bar.close()
    if len(demos) < n:
        raise EnvDivergenceError(f"expert succeeded on only {len(demos)} of {attempt} episodes")
    if skipped:
        logger.warning(f"skipped {skipped} failed expert episodes while collecting {n} demos")
    return demos


# ===========================
# LINEAR SYSTEM ORACLE
# ===========================

def spectral_radius(matrix: np.ndarray, iterations: int = 400, seed: int = 0) -> float:
    """Power iteration on a random start; growth rate averaged over the second half"""
    m = np.asarray(matrix, dtype=np.float64)
    v = np.random.default_rng(seed).normal(size=m.shape[0])
    v /= np.linalg.norm(v)
    logs = []
    for k in range(iterations):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        if k >= iterations // 2:
            logs.append(np.log(norm))
        v = w / norm
    return float(np.exp(np.mean(logs)))


class LinearSystem:
    """x_{t+1} = A x_t + B a_t with teacher a_t = -G x_t"""

    def __init__(self, A: np.ndarray, B: np.ndarray, G: np.ndarray, require_stable: bool = True):
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        self.G = np.asarray(G, dtype=np.float64)
        n, m = self.B.shape
        if self.A.shape != (n, n) or self.G.shape != (m, n):
            raise ConfigError(f"inconsistent shapes A{self.A.shape} B{self.B.shape} G{self.G.shape}")
        self.rho = spectral_radius(self.A - self.B @ self.G)
        if require_stable and self.rho >= 1.0:
            raise ConfigError(f"teacher gain is not stabilizing: spectral radius {self.rho:.4f} >= 1")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def act_dim(self) -> int:
        return self.B.shape[1]

    def step(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.A.T + np.asarray(a) @ self.B.T

    def teacher_action(self, x: np.ndarray) -> np.ndarray:
        return -np.asarray(x, dtype=np.float64) @ self.G.T


def double_integrator(dt: float = 0.1, kp: float = 2.0, kd: float = 3.0) -> LinearSystem:
    """Planar point mass, state (px, py, vx, vy), PD teacher"""
    eye = np.eye(2)
    zero = np.zeros((2, 2))
    A = np.block([[eye, dt * eye], [zero, eye]])
    B = np.vstack([0.5 * dt ** 2 * eye, dt * eye])
    G = np.hstack([kp * eye, kd * eye])
    return LinearSystem(A, B, G)


@dataclass(frozen=True)
class LinearSystemEnv:
    """ClosedLoopEnv view of a LinearSystem: start at rest, never 'succeeds'"""
    system: LinearSystem
    max_steps: int = 50
    init_scale: float = 1.0

    @property
    def obs_dim(self) -> int:
        return self.system.state_dim

    @property
    def act_dim(self) -> int:
        return self.system.act_dim

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        x = np.zeros(self.system.state_dim)
        half = self.system.state_dim // 2
        x[:half] = rng.uniform(-self.init_scale, self.init_scale, size=half)
        return x

    def observe(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=np.float64).copy()

    def step(self, states: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        nxt = self.system.step(states, actions)
        return nxt, self.observe(nxt)

    def is_success(self, states: np.ndarray) -> np.ndarray:
        return np.zeros(np.asarray(states).shape[:-1], dtype=bool)


def accumulation_gap(system: LinearSystem, teacher: Policy, student: Policy, T: int,
                     x0: np.ndarray, bound: float = 1e6) -> float:
    """||x_T(student) - x_T(teacher)|| from a shared x0, each acting on its own states"""
    xt = np.asarray(x0, dtype=np.float64)
    xs = xt.copy()
    for _ in range(T):
        xt = system.step(xt, np.asarray(teacher(xt), dtype=np.float64))
        xs = system.step(xs, np.asarray(student(xs), dtype=np.float64))
        if not (np.all(np.isfinite(xs)) and np.linalg.norm(xs) <= bound):
            return float('inf')
    return float(np.linalg.norm(xs - xt))


class LinearStudent:
    """
    Quantized linear feedback a = fq_a(x) @ fq_w(W), with W of shape
    (state_dim, act_dim). Weight scales follow the current W per output
    channel; the activation scale is fixed by `calibrate`.
    """

    def __init__(self, system: LinearSystem, w_bits: int = 4, a_bits: int = 4,
                 weight: Optional[np.ndarray] = None):
        self.system = system
        self.weight = np.asarray(weight if weight is not None else -system.G.T, dtype=np.float32)
        self.w_spec = quant.QuantizerSpec(w_bits, 'per_channel')
        self.a_spec = quant.QuantizerSpec(a_bits, 'per_tensor')

    def calibrate(self, states: np.ndarray):
        self.a_spec = quant.calibrate_current(self.a_spec, np.asarray(states))
        return self

    def forward(self, x: np.ndarray, weight: Optional[nx.Tensor] = None) -> nx.Tensor:
        w = weight if weight is not None else nx.Tensor(self.weight)
        w_spec = quant.calibrate_current(self.w_spec, w.data)
        xq = quant.fake_quant(self.a_spec, nx.Tensor(np.atleast_2d(x)))
        return nx.matmul(xq, quant.fake_quant(w_spec, w))

    def act(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        with nx.no_grad():
            out = self.forward(x).numpy().astype(np.float64)
        return out[0] if x.ndim == 1 else out

    def copy(self) -> "LinearStudent":
        twin = LinearStudent(self.system, self.w_spec.bits, self.a_spec.bits, self.weight.copy())
        twin.a_spec = self.a_spec
        return twin
