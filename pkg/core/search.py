"""
Stage II: constrained NSGA-II over subnet configurations.

Objectives (minimized): held-out policy loss and latency (or parameter count).
Latency and memory budgets enter through constrained dominance. Every evaluated
genome is kept in an archive; the returned front is the feasible nondominated
subset of that archive.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core import storage
from core.configspace import (Genome, ModelDims, SearchSpace, SubnetConfig, average_bits, canonical_genome,
                              config_hash, config_to_dict, crossover, decode, encode, genome_to_str,
                              largest_config, mixed_precision_space, mutate, sample_genome, smallest_config,
                              subnet_param_count)
from core.costmodel import DeviceProfile, is_feasible
from core.error_handler import ConfigError, SearchError

logger = logging.getLogger(__name__)

FRONT_COLUMNS = ['config_id', 'genome', 'latency_ms', 'memory_bytes', 'val_loss', 'feasible', 'rank']
Fitness = Callable[[SubnetConfig], float]


@dataclass
class SearchParams:
    population: int = 64
    generations: int = 40
    p_mut: Optional[float] = None
    crossover_rate: float = 0.9
    objective: str = 'latency'
    max_retries: int = 20
    log_every: int = 10

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError(f"population must be >= 2, got {self.population}")
        if self.objective not in ('latency', 'params'):
            raise ConfigError(f"unknown second objective {self.objective}")


@dataclass
class Individual:
    genome: Genome
    config: SubnetConfig
    val_loss: float
    latency_ms: float
    memory_bytes: float
    params: int
    feasible: bool
    violation: float
    objectives: Tuple[float, float] = (0.0, 0.0)
    rank: int = 0
    crowding: float = 0.0


@dataclass
class ParetoFront:
    members: List[Individual]
    feasible: bool = True
    highlighted: Optional[Individual] = None

    def __len__(self):
        return len(self.members)

    def objective_vectors(self) -> List[Tuple[float, float]]:
        return [m.objectives for m in self.members]


@dataclass
class SearchResult:
    front: ParetoFront
    population: List[Individual]
    archive: List[Individual]
    history: List[Optional[float]] = field(default_factory=list)


# ===========================
# DOMINANCE AND SORTING
# ===========================

def dominates(a: Individual, b: Individual) -> bool:
    """Constrained dominance, minimizing every objective"""
    if a.feasible != b.feasible:
        return a.feasible
    if not a.feasible:
        return a.violation < b.violation
    return (all(x <= y for x, y in zip(a.objectives, b.objectives))
            and any(x < y for x, y in zip(a.objectives, b.objectives)))


def nondominated_sort(population: Sequence[Individual]) -> List[List[int]]:
    """Fast nondominated sort; sets .rank (1-based) and returns fronts of indices"""
    n = len(population)
    dominated_by: List[List[int]] = [[] for _ in range(n)]
    counts = [0] * n
    fronts: List[List[int]] = [[]]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if dominates(population[i], population[j]):
                dominated_by[i].append(j)
            elif dominates(population[j], population[i]):
                counts[i] += 1
        if counts[i] == 0:
            population[i].rank = 1
            fronts[0].append(i)
    k = 0
    while fronts[k]:
        nxt = []
        for i in fronts[k]:
            for j in dominated_by[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    population[j].rank = k + 2
                    nxt.append(j)
        k += 1
        fronts.append(sorted(nxt))
    return fronts[:-1]


def crowding(objectives: Sequence[Sequence[float]]) -> List[float]:
    """
    Normalized-gap crowding distance. Boundary points are infinite; when every
    objective vector is identical all points are boundary.
    """
    pts = np.asarray(objectives, dtype=np.float64)
    n = len(pts)
    if n == 0:
        return []
    if n <= 2 or np.all(pts.max(axis=0) == pts.min(axis=0)):
        return [float('inf')] * n
    dist = np.zeros(n)
    for k in range(pts.shape[1]):
        span = pts[:, k].max() - pts[:, k].min()
        if span == 0:
            continue
        order = np.argsort(pts[:, k], kind='stable')
        dist[order[0]] = np.inf
        dist[order[-1]] = np.inf
        for pos in range(1, n - 1):
            dist[order[pos]] += (pts[order[pos + 1], k] - pts[order[pos - 1], k]) / span
    return [float(d) for d in dist]


def assign_crowding(population: Sequence[Individual], fronts: Sequence[Sequence[int]]):
    for front in fronts:
        values = crowding([population[i].objectives for i in front])
        for i, d in zip(front, values):
            population[i].crowding = d


def pareto_filter(individuals: Sequence[Individual]) -> List[Individual]:
    """Members not dominated by any other (constrained dominance)"""
    return [a for a in individuals if not any(dominates(b, a) for b in individuals if b is not a)]


# ===========================
# NSGA-II
# ===========================

class _Evaluator:
    def __init__(self, fitness: Fitness, profile: DeviceProfile, space: SearchSpace, dims: ModelDims,
                 objective: str):
        self.fitness = fitness
        self.profile = profile
        self.space = space
        self.dims = dims
        self.objective = objective
        self.archive: Dict[Genome, Individual] = {}

    def __call__(self, genome: Sequence[int]) -> Individual:
        genome = canonical_genome(genome, self.space)
        if genome in self.archive:
            return self.archive[genome]
        config = decode(genome, self.space)
        check = is_feasible(self.profile, config, self.dims)
        val_loss = float(self.fitness(config))
        if not np.isfinite(val_loss):
            raise SearchError(f"non-finite validation loss for config {config_hash(config)}")
        params = subnet_param_count(config, self.dims)
        second = check.latency_ms if self.objective == 'latency' else float(params)
        ind = Individual(genome, config, val_loss, check.latency_ms, check.memory_bytes, params,
                         check.feasible, check.violation, (val_loss, second))
        self.archive[genome] = ind
        return ind


def _tournament(population: Sequence[Individual], rng: np.random.Generator) -> Individual:
    a = population[int(rng.integers(len(population)))]
    b = population[int(rng.integers(len(population)))]
    if a.rank != b.rank:
        return a if a.rank < b.rank else b
    if a.crowding != b.crowding:
        return a if a.crowding > b.crowding else b
    return a if rng.random() < 0.5 else b


def _environmental_selection(combined: List[Individual], size: int) -> List[Individual]:
    fronts = nondominated_sort(combined)
    assign_crowding(combined, fronts)
    chosen: List[Individual] = []
    for front in fronts:
        members = [combined[i] for i in front]
        if len(chosen) + len(members) <= size:
            chosen.extend(members)
            continue
        members.sort(key=lambda ind: -ind.crowding)
        chosen.extend(members[:size - len(chosen)])
        break
    return chosen


def _best_feasible_loss(population: Sequence[Individual]) -> Optional[float]:
    losses = [ind.val_loss for ind in population if ind.feasible]
    return min(losses) if losses else None


def _fresh(genome: Genome, evaluator: _Evaluator, rng: np.random.Generator, retries: int) -> Genome:
    """Re-draw a genome already in the archive, a bounded number of times"""
    space = evaluator.space
    for _ in range(retries):
        if canonical_genome(genome, space) not in evaluator.archive:
            break
        genome = sample_genome(space, rng)
    return genome


def run_search(fitness: Fitness, profile: DeviceProfile, space: SearchSpace, dims: ModelDims,
               params: Optional[SearchParams] = None, seed: int = 0) -> SearchResult:
    """Constrained NSGA-II seeded with the largest and smallest configs"""
    params = params or SearchParams()
    rng = np.random.default_rng(seed)
    p_mut = params.p_mut if params.p_mut is not None else 1.0 / space.n_genes
    evaluator = _Evaluator(fitness, profile, space, dims, params.objective)

    population: List[Individual] = []
    for genome in (encode(largest_config(space), space), encode(smallest_config(space), space)):
        if genome not in evaluator.archive:
            population.append(evaluator(genome))
    # repeats are allowed once a small space is exhausted; _unique drops them
    while len(population) < params.population:
        genome = _fresh(sample_genome(space, rng), evaluator, rng, params.max_retries)
        population.append(evaluator(genome))
    population = _environmental_selection(_unique(population), params.population)
    history = [_best_feasible_loss(population)]

    for gen in range(params.generations):
        fronts = nondominated_sort(population)
        assign_crowding(population, fronts)
        offspring: List[Individual] = []
        while len(offspring) < params.population:
            a, b = _tournament(population, rng), _tournament(population, rng)
            if rng.random() < params.crossover_rate:
                c1, c2 = crossover(a.genome, b.genome, rng, space)
            else:
                c1, c2 = a.genome, b.genome
            for child in (c1, c2):
                child = mutate(child, p_mut, rng, space)
                child = _fresh(child, evaluator, rng, params.max_retries)
                offspring.append(evaluator(child))
        population = _environmental_selection(_unique(population + offspring), params.population)
        history.append(_best_feasible_loss(population))
        if params.log_every and (gen + 1) % params.log_every == 0:
            logger.info(f"{profile.device_id} generation {gen + 1}/{params.generations}: "
                        f"archive={len(evaluator.archive)} best feasible val_loss={history[-1]}")

    archive = [evaluator.archive[g] for g in sorted(evaluator.archive)]
    front = extract_front(archive)
    if not front.feasible:
        logger.warning(f"{profile.device_id}: no feasible configuration found; "
                       f"minimum violation {front.highlighted.violation:.4f}")
    return SearchResult(front, population, archive, history)


def _unique(individuals: Sequence[Individual]) -> List[Individual]:
    seen = set()
    out = []
    for ind in individuals:
        if ind.genome not in seen:
            seen.add(ind.genome)
            out.append(ind)
    return out


def extract_front(individuals: Sequence[Individual]) -> ParetoFront:
    """Feasible nondominated set sorted by the second objective; flagged when nothing is feasible"""
    if not individuals:
        raise SearchError("no evaluated individuals", error_code="EMPTY_FRONT")
    feasible = [ind for ind in individuals if ind.feasible]
    if feasible:
        members = pareto_filter(feasible)
        for m in members:
            m.rank = 1
        members.sort(key=lambda m: (m.objectives[1], m.objectives[0], m.genome))
        return ParetoFront(members, True, None)
    best = min(individuals, key=lambda ind: (ind.violation, ind.objectives, ind.genome))
    members = sorted(pareto_filter(individuals), key=lambda m: (m.objectives[1], m.objectives[0], m.genome))
    return ParetoFront(members, False, best)


def brute_force_front(fitness: Fitness, profile: DeviceProfile, space: SearchSpace, dims: ModelDims,
                      objective: str = 'latency') -> ParetoFront:
    """Exhaustive reference front over every canonical config"""
    from core.configspace import enumerate_configs
    evaluator = _Evaluator(fitness, profile, space, dims, objective)
    individuals = [evaluator(encode(c, space)) for c in enumerate_configs(space)]
    return extract_front(individuals)


# ===========================
# DEPLOYMENT SELECTION
# ===========================

def select_deployment(front: ParetoFront, rule: str = 'min-loss-under-budget') -> Individual:
    if not front.members:
        raise SearchError("cannot select from an empty front", error_code="EMPTY_FRONT")
    feasible = [m for m in front.members if m.feasible]
    if not feasible:
        raise SearchError("no feasible configuration on the front",
                          details={'min_violation': front.highlighted.violation if front.highlighted else None})
    if rule == 'min-loss-under-budget':
        return min(feasible, key=lambda m: (m.val_loss, m.objectives[1], m.genome))
    if rule == 'knee':
        return knee_point(feasible)
    raise SearchError(f"unknown selection rule {rule}")


def knee_point(members: Sequence[Individual]) -> Individual:
    """Member farthest from the line through the two extremes, in normalized objective space"""
    ordered = sorted(members, key=lambda m: (m.objectives[1], m.objectives[0]))
    if len(ordered) <= 2:
        return min(ordered, key=lambda m: m.val_loss)
    pts = np.array([m.objectives for m in ordered], dtype=np.float64)
    span = pts.max(axis=0) - pts.min(axis=0)
    span[span == 0] = 1.0
    norm = (pts - pts.min(axis=0)) / span
    a, b = norm[0], norm[-1]
    direction = b - a
    length = np.linalg.norm(direction)
    if length == 0:
        return ordered[0]
    rel = norm - a
    distance = np.abs(direction[0] * rel[:, 1] - direction[1] * rel[:, 0]) / length
    return ordered[int(np.argmax(distance))]


# ===========================
# EXPORT
# ===========================

def front_to_frame(front: ParetoFront) -> pd.DataFrame:
    rows = [{
        'config_id': config_hash(m.config),
        'genome': genome_to_str(m.genome),
        'latency_ms': m.latency_ms,
        'memory_bytes': m.memory_bytes,
        'val_loss': m.val_loss,
        'feasible': bool(m.feasible),
        'rank': m.rank,
    } for m in front.members]
    return pd.DataFrame(rows, columns=FRONT_COLUMNS)


def write_front_csv(front: ParetoFront, path: str) -> str:
    return storage.write_csv(front_to_frame(front).to_dict('records'), path, columns=FRONT_COLUMNS)


def front_to_dict(front: ParetoFront, device_id: str, objective: str = 'latency') -> Dict:
    def member(m: Individual) -> Dict:
        return {
            'config_id': config_hash(m.config),
            'genome': list(m.genome),
            'config': config_to_dict(m.config),
            'val_loss': m.val_loss,
            'latency_ms': m.latency_ms,
            'memory_bytes': m.memory_bytes,
            'params': m.params,
            'average_bits': average_bits(m.config),
            'feasible': m.feasible,
            'violation': m.violation,
            'rank': m.rank,
        }
    return {
        'device_id': device_id,
        'objective': objective,
        'feasible': front.feasible,
        'members': [member(m) for m in front.members],
        'highlighted': member(front.highlighted) if front.highlighted else None,
    }


def write_front_json(front: ParetoFront, path: str, device_id: str, objective: str = 'latency') -> str:
    return storage.save_json(front_to_dict(front, device_id, objective), path)


def front_from_dict(data: Dict, space: SearchSpace) -> ParetoFront:
    """Rebuild a front from its JSON mirror (for re-emission and export)"""
    def member(d: Dict) -> Individual:
        config = decode(d['genome'], space)
        second = d['latency_ms'] if data.get('objective', 'latency') == 'latency' else float(d['params'])
        return Individual(tuple(d['genome']), config, d['val_loss'], d['latency_ms'], d['memory_bytes'],
                          d['params'], d['feasible'], d['violation'], (d['val_loss'], second), d['rank'])
    highlighted = member(data['highlighted']) if data.get('highlighted') else None
    return ParetoFront([member(d) for d in data['members']], data['feasible'], highlighted)


# ===========================
# FITNESS AND SWEEPS
# ===========================

def supernet_fitness(supernet, val_obs: np.ndarray, val_act: np.ndarray) -> Fitness:
    """Held-out BC loss with inherited supernet weights, cached per config"""
    from core.trainer import validation_loss
    cache: Dict[SubnetConfig, float] = {}

    def fitness(config: SubnetConfig) -> float:
        if config not in cache:
            cache[config] = validation_loss(supernet, config, val_obs, val_act)
        return cache[config]
    return fitness


def mixed_precision_sweep(fitness: Fitness, space: SearchSpace, dims: ModelDims, n: int,
                          seed: int = 0) -> pd.DataFrame:
    """INT4/INT8 mixed configs: average bit-width against validation loss"""
    mixed = mixed_precision_space(space)
    rng = np.random.default_rng(seed)
    seen = set()
    rows = []
    for _ in range(20 * n):
        if len(rows) >= n:
            break
        config = decode(sample_genome(mixed, rng), mixed)
        if config in seen:
            continue
        seen.add(config)
        rows.append({'config_id': config_hash(config), 'average_bits': average_bits(config),
                     'val_loss': float(fitness(config)), 'params': subnet_param_count(config, dims)})
    frame = pd.DataFrame(rows, columns=['config_id', 'average_bits', 'val_loss', 'params'])
    return frame.sort_values(['average_bits', 'config_id'], kind='stable').reset_index(drop=True)
