"""
Search space of per-layer subnet configurations and the integer genome codec
used by the evolutionary search.

A genome holds five genes per layer, in the order (m, r, h, bw, ba); each gene is
an index into its (ascending) menu, so the all-minimum config is the all-zero
genome.
"""
import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from core.error_handler import ConfigError, ConfigSpaceError
from core.quant import SUPPORTED_BITS, scale_groups

logger = logging.getLogger(__name__)

GENES_PER_LAYER = 5
M_MENU = (0, 1)

Genome = Tuple[int, ...]


@dataclass(frozen=True)
class LayerChoice:
    """(m, r, h, bw, ba) for one elastic block"""
    m: int
    r: float
    h: float
    bw: int
    ba: int

    def key(self) -> Tuple[float, float, int, int]:
        return (float(self.r), float(self.h), int(self.bw), int(self.ba))


@dataclass(frozen=True)
class SubnetConfig:
    layers: Tuple[LayerChoice, ...]

    @property
    def n_active(self) -> int:
        return sum(1 for c in self.layers if c.m)

    def __len__(self):
        return len(self.layers)


@dataclass(frozen=True)
class SearchSpace:
    n_layers: int
    r_menu: Tuple[float, ...]
    h_menu: Tuple[float, ...]
    bw_menu: Tuple[int, ...]
    ba_menu: Tuple[int, ...]
    d_min: int = 1

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"search space needs at least one layer, got {self.n_layers}")
        for name in ('r_menu', 'h_menu', 'bw_menu', 'ba_menu'):
            menu = getattr(self, name)
            if not menu:
                raise ConfigError(f"{name} must not be empty")
            cast = int if name.startswith('b') else float
            object.__setattr__(self, name, tuple(sorted({cast(v) for v in menu})))
        for bits in self.bw_menu + self.ba_menu:
            if bits not in SUPPORTED_BITS:
                raise ConfigError(f"bit-width {bits} not in {SUPPORTED_BITS}")
        if any(r <= 0 for r in self.r_menu):
            raise ConfigError("r menu values must be positive")
        if any(not 0 < h <= 1.0 for h in self.h_menu):
            raise ConfigError("h menu values must be in (0, 1]")
        if not 0 <= self.d_min <= self.n_layers:
            raise ConfigError(f"d_min must be in [0, {self.n_layers}], got {self.d_min}")

    @property
    def block_choices(self) -> int:
        """A: number of distinct active-block settings"""
        return len(self.r_menu) * len(self.h_menu) * len(self.bw_menu) * len(self.ba_menu)

    @property
    def n_genes(self) -> int:
        return GENES_PER_LAYER * self.n_layers

    def gene_menus(self) -> List[Tuple]:
        per_layer = [M_MENU, self.r_menu, self.h_menu, self.bw_menu, self.ba_menu]
        return per_layer * self.n_layers

    def to_dict(self) -> Dict:
        return {
            'n_layers': self.n_layers,
            'r_menu': list(self.r_menu),
            'h_menu': list(self.h_menu),
            'bw_menu': list(self.bw_menu),
            'ba_menu': list(self.ba_menu),
            'd_min': self.d_min,
        }


@dataclass(frozen=True)
class ModelDims:
    """Supernet dimensions the analytic parameter counts depend on"""
    d_model: int = 32
    n_heads: int = 4
    head_dim: int = 8
    obs_dim: int = 6
    act_dim: int = 2
    token_dim: int = 5
    n_tokens: int = 3
    r_max: float = 4.0
    ln_eps: float = 1e-5

    def heads_for(self, h: float) -> int:
        return max(1, int(math.ceil(h * self.n_heads - 1e-9)))

    def hidden_for(self, r: float) -> int:
        return max(1, int(round(r * self.d_model)))

    @property
    def max_hidden(self) -> int:
        return self.hidden_for(self.r_max)

    def to_dict(self) -> Dict:
        return {
            'd_model': self.d_model,
            'n_heads': self.n_heads,
            'head_dim': self.head_dim,
            'obs_dim': self.obs_dim,
            'act_dim': self.act_dim,
            'token_dim': self.token_dim,
            'n_tokens': self.n_tokens,
            'r_max': self.r_max,
            'ln_eps': self.ln_eps,
        }


# ===========================
# CANONICAL FORM AND CODEC
# ===========================

def _minimum_choice(space: SearchSpace) -> LayerChoice:
    return LayerChoice(0, space.r_menu[0], space.h_menu[0], space.bw_menu[0], space.ba_menu[0])


def canonicalize(config: SubnetConfig, space: SearchSpace) -> SubnetConfig:
    """Skipped layers get menu minima so equal subnets encode equally"""
    minimum = _minimum_choice(space)
    return SubnetConfig(tuple(c if c.m else minimum for c in config.layers))


def validate_config(config: SubnetConfig, space: SearchSpace, check_depth: bool = True,
                    extra_bits: Sequence[int] = ()):
    """Every kept layer draws each gene from its menu; `extra_bits` widens both bit menus"""
    if len(config.layers) != space.n_layers:
        raise ConfigSpaceError(f"config has {len(config.layers)} layers, space has {space.n_layers}")
    for i, c in enumerate(config.layers):
        if c.m not in M_MENU:
            raise ConfigSpaceError(f"layer {i}: m={c.m} not in {M_MENU}")
        if not c.m:
            continue
        for value, menu, name in ((float(c.r), space.r_menu, 'r'), (float(c.h), space.h_menu, 'h'),
                                  (c.bw, space.bw_menu + tuple(extra_bits), 'bw'),
                                  (c.ba, space.ba_menu + tuple(extra_bits), 'ba')):
            if value not in menu:
                raise ConfigSpaceError(f"layer {i}: {name}={value} not in menu {menu}",
                                       details={'layer': i, 'gene': name})
    if check_depth and config.n_active < space.d_min:
        raise ConfigSpaceError(f"config keeps {config.n_active} layers, d_min is {space.d_min}")


def encode(config: SubnetConfig, space: SearchSpace) -> Genome:
    """One menu index per gene, of the canonical form"""
    validate_config(config, space, check_depth=False)
    genome: List[int] = []
    for c in canonicalize(config, space).layers:
        genome.extend([
            M_MENU.index(c.m),
            space.r_menu.index(float(c.r)),
            space.h_menu.index(float(c.h)),
            space.bw_menu.index(c.bw),
            space.ba_menu.index(c.ba),
        ])
    return tuple(genome)


def decode(genome: Sequence[int], space: SearchSpace) -> SubnetConfig:
    if len(genome) != space.n_genes:
        raise ConfigSpaceError(f"genome has {len(genome)} genes, expected {space.n_genes}")
    menus = space.gene_menus()
    for i, (g, menu) in enumerate(zip(genome, menus)):
        if not 0 <= int(g) < len(menu):
            raise ConfigSpaceError(f"gene {i} index {g} outside menu of size {len(menu)}",
                                   details={'gene': i, 'index': int(g)})
    layers = []
    for l in range(space.n_layers):
        m, r, h, bw, ba = (int(g) for g in genome[l * GENES_PER_LAYER:(l + 1) * GENES_PER_LAYER])
        layers.append(LayerChoice(M_MENU[m], space.r_menu[r], space.h_menu[h],
                                  space.bw_menu[bw], space.ba_menu[ba]))
    return canonicalize(SubnetConfig(tuple(layers)), space)


def canonical_genome(genome: Sequence[int], space: SearchSpace) -> Genome:
    return encode(decode(genome, space), space)


# ===========================
# SAMPLING AND VARIATION
# ===========================

def repair(genome: Sequence[int], space: SearchSpace, rng: np.random.Generator) -> Genome:
    """Flip random m genes to 1 until at least d_min layers are kept"""
    genes = list(genome)
    inactive = [l for l in range(space.n_layers) if genes[l * GENES_PER_LAYER] == 0]
    while space.n_layers - len(inactive) < space.d_min:
        pick = inactive.pop(int(rng.integers(len(inactive))))
        genes[pick * GENES_PER_LAYER] = 1
    return tuple(genes)


def sample_genome(space: SearchSpace, rng: np.random.Generator) -> Genome:
    raw = tuple(int(rng.integers(len(menu))) for menu in space.gene_menus())
    return repair(raw, space, rng)


def sample_uniform(space: SearchSpace, rng: np.random.Generator) -> SubnetConfig:
    """Every gene uniform over its menu, repaired to d_min, canonicalized"""
    return decode(sample_genome(space, rng), space)


def mutate(genome: Sequence[int], p_mut: float, rng: np.random.Generator, space: SearchSpace) -> Genome:
    """Resample each gene from its menu with probability p_mut"""
    genes = list(genome)
    for i, menu in enumerate(space.gene_menus()):
        if rng.random() < p_mut:
            genes[i] = int(rng.integers(len(menu)))
    return repair(genes, space, rng)


def crossover(a: Sequence[int], b: Sequence[int], rng: np.random.Generator,
              space: SearchSpace) -> Tuple[Genome, Genome]:
    """Uniform per-gene crossover"""
    if len(a) != len(b):
        raise ConfigSpaceError(f"parents differ in length: {len(a)} vs {len(b)}")
    swap = rng.random(len(a)) < 0.5
    child1 = [bj if s else aj for aj, bj, s in zip(a, b, swap)]
    child2 = [aj if s else bj for aj, bj, s in zip(a, b, swap)]
    return repair(child1, space, rng), repair(child2, space, rng)


def largest_config(space: SearchSpace) -> SubnetConfig:
    top = LayerChoice(1, space.r_menu[-1], space.h_menu[-1], space.bw_menu[-1], space.ba_menu[-1])
    return SubnetConfig((top,) * space.n_layers)


def smallest_config(space: SearchSpace) -> SubnetConfig:
    """First d_min layers kept at menu minima, the rest skipped"""
    minimum = _minimum_choice(space)
    kept = replace(minimum, m=1)
    return SubnetConfig(tuple(kept if l < space.d_min else minimum for l in range(space.n_layers)))


def uniform_bits_config(space: SearchSpace, bw: int, ba: int) -> SubnetConfig:
    """Largest architecture at fixed weight/activation bit-widths"""
    top = LayerChoice(1, space.r_menu[-1], space.h_menu[-1], bw, ba)
    config = SubnetConfig((top,) * space.n_layers)
    validate_config(config, space)
    return config


# ===========================
# ENUMERATION
# ===========================

def cardinality(space: SearchSpace) -> int:
    """|C| = sum_{k >= d_min} C(L, k) * A^k over canonical configs"""
    return sum(math.comb(space.n_layers, k) * space.block_choices ** k
               for k in range(space.d_min, space.n_layers + 1))


def enumerate_genomes(space: SearchSpace) -> Iterator[Genome]:
    """Every raw genome, canonical or not"""
    return itertools.product(*[range(len(menu)) for menu in space.gene_menus()])


def enumerate_configs(space: SearchSpace) -> Iterator[SubnetConfig]:
    """Every canonical config that keeps at least d_min layers, without duplicates"""
    minimum = _minimum_choice(space)
    active = [LayerChoice(1, r, h, bw, ba) for r, h, bw, ba in
              itertools.product(space.r_menu, space.h_menu, space.bw_menu, space.ba_menu)]
    for mask in itertools.product(M_MENU, repeat=space.n_layers):
        if sum(mask) < space.d_min:
            continue
        slots = [active if m else [minimum] for m in mask]
        for layers in itertools.product(*slots):
            yield SubnetConfig(tuple(layers))


# ===========================
# PARAMETER ACCOUNTING
# ===========================

def base_param_count(dims: ModelDims) -> int:
    """Embedding plus action head"""
    return dims.token_dim * dims.d_model + dims.d_model + dims.d_model * dims.act_dim + dims.act_dim


def block_param_count(choice: LayerChoice, dims: ModelDims) -> int:
    if not choice.m:
        return 0
    d = dims.d_model
    inner = dims.heads_for(choice.h) * dims.head_dim
    hidden = dims.hidden_for(choice.r)
    norms = 4 * d
    attention = 3 * d * inner + inner * d + d
    mlp = d * hidden + hidden + hidden * d
    return norms + attention + mlp


def block_mlp_param_count(choice: LayerChoice, dims: ModelDims) -> int:
    if not choice.m:
        return 0
    hidden = dims.hidden_for(choice.r)
    return hidden * (2 * dims.d_model + 1)


def block_weight_groups(choice: LayerChoice, dims: ModelDims) -> int:
    """Per-output-channel scales stored for one block's quantized weights"""
    if not choice.m:
        return 0
    d = dims.d_model
    inner = dims.heads_for(choice.h) * dims.head_dim
    channels = 3 * inner + d + dims.hidden_for(choice.r) + d
    return scale_groups('per_channel', channels, choice.bw)


def subnet_param_count(config: SubnetConfig, dims: ModelDims) -> int:
    return base_param_count(dims) + sum(block_param_count(c, dims) for c in config.layers)


def average_bits(config: SubnetConfig) -> float:
    """Mean of (bw + ba) / 2 over kept layers"""
    active = [c for c in config.layers if c.m]
    if not active:
        return 0.0
    return float(sum((c.bw + c.ba) / 2.0 for c in active) / len(active))


# ===========================
# IDENTITY AND SERIALIZATION
# ===========================

def fingerprint(space: SearchSpace, dims: Optional[ModelDims] = None) -> str:
    """sha256 of the canonical space (and model dims) declaration"""
    payload = {'space': space.to_dict()}
    if dims is not None:
        payload['dims'] = dims.to_dict()
    text = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def config_hash(config: SubnetConfig) -> str:
    text = json.dumps(config_to_dict(config), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:12]


def genome_to_str(genome: Sequence[int]) -> str:
    return '-'.join(str(int(g)) for g in genome)


def config_to_dict(config: SubnetConfig) -> Dict:
    return {'layers': [{'m': c.m, 'r': float(c.r), 'h': float(c.h), 'bw': c.bw, 'ba': c.ba}
                       for c in config.layers]}


def config_from_dict(data: Dict, space: Optional[SearchSpace] = None) -> SubnetConfig:
    try:
        layers = tuple(LayerChoice(int(l['m']), float(l['r']), float(l['h']), int(l['bw']), int(l['ba']))
                       for l in data['layers'])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigSpaceError(f"malformed config declaration: {e}")
    config = SubnetConfig(layers)
    if space is not None:
        validate_config(config, space)
        config = canonicalize(config, space)
    return config


def space_from_dict(data: Dict) -> SearchSpace:
    try:
        return SearchSpace(
            n_layers=int(data['n_layers']),
            r_menu=tuple(data['r_menu']),
            h_menu=tuple(data['h_menu']),
            bw_menu=tuple(data['bw_menu']),
            ba_menu=tuple(data['ba_menu']),
            d_min=int(data.get('d_min', 1)),
        )
    except KeyError as e:
        raise ConfigError(f"search space declaration missing {e}")


def jetson_fixture_space() -> SearchSpace:
    """Single whole-model block, full width; only the bit-widths vary"""
    return SearchSpace(n_layers=1, r_menu=(4,), h_menu=(1.0,), bw_menu=(4, 8, 16),
                       ba_menu=(4, 8, 16), d_min=1)


def mixed_precision_space(space: SearchSpace) -> SearchSpace:
    """Same architecture menus with bit-widths restricted to INT4/INT8"""
    return replace(space, bw_menu=(4, 8), ba_menu=(4, 8))
