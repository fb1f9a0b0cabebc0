"""
Test script for the subnet search space and genome codec
"""
import sys
import os
from collections import Counter

import numpy as np
import pytest

# Add repository root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core import configspace as cs
from core.configspace import LayerChoice, SearchSpace, SubnetConfig
from core.error_handler import ConfigError, ConfigSpaceError


def _binary_space(d_min=0):
    """L=2 with every menu of size 2: ten binary genes"""
    return SearchSpace(n_layers=2, r_menu=(2, 4), h_menu=(0.5, 1.0), bw_menu=(4, 8),
                       ba_menu=(4, 8), d_min=d_min)


def _desk_space():
    return SearchSpace(n_layers=4, r_menu=(1, 2, 4), h_menu=(0.5, 1.0), bw_menu=(4, 8, 16),
                       ba_menu=(4, 8, 16), d_min=1)


def _random_config(space, rng):
    """Random values in every field, inert ones included"""
    layers = []
    for _ in range(space.n_layers):
        layers.append(LayerChoice(int(rng.integers(2)), float(rng.choice(space.r_menu)),
                                  float(rng.choice(space.h_menu)), int(rng.choice(space.bw_menu)),
                                  int(rng.choice(space.ba_menu))))
    return SubnetConfig(tuple(layers))


# ===========================
# SPACE DECLARATION
# ===========================

def test_space_rejects_bad_menus():
    with pytest.raises(ConfigError):
        SearchSpace(n_layers=2, r_menu=(), h_menu=(1.0,), bw_menu=(8,), ba_menu=(8,))
    with pytest.raises(ConfigError):
        SearchSpace(n_layers=2, r_menu=(1,), h_menu=(1.0,), bw_menu=(3,), ba_menu=(8,))
    with pytest.raises(ConfigError):
        SearchSpace(n_layers=2, r_menu=(1,), h_menu=(1.5,), bw_menu=(8,), ba_menu=(8,))
    with pytest.raises(ConfigError):
        SearchSpace(n_layers=2, r_menu=(1,), h_menu=(1.0,), bw_menu=(8,), ba_menu=(8,), d_min=3)


def test_menus_are_sorted_and_deduplicated():
    space = SearchSpace(n_layers=1, r_menu=(4, 1, 4), h_menu=(1.0, 0.5), bw_menu=(16, 4),
                        ba_menu=(8,))
    assert space.r_menu == (1.0, 4.0)
    assert space.bw_menu == (4, 16)


# ===========================
# SAMPLING
# ===========================

def test_singleton_menus_give_the_unique_config():
    space = SearchSpace(n_layers=1, r_menu=(2,), h_menu=(1.0,), bw_menu=(8,), ba_menu=(8,), d_min=1)
    rng = np.random.default_rng(0)
    expected = SubnetConfig((LayerChoice(1, 2.0, 1.0, 8, 8),))
    for _ in range(20):
        assert cs.sample_uniform(space, rng) == expected


def test_sample_genome_is_uniform_per_gene():
    space = _binary_space()
    rng = np.random.default_rng(1)
    counts = np.zeros(space.n_genes)
    n = 10_000
    for _ in range(n):
        counts += np.array(cs.sample_genome(space, rng))
    freq = counts / n
    assert np.all(np.abs(freq - 0.5) < 0.05)


def test_sample_uniform_respects_d_min():
    space = SearchSpace(n_layers=4, r_menu=(1, 2), h_menu=(1.0,), bw_menu=(8,), ba_menu=(8,), d_min=3)
    rng = np.random.default_rng(2)
    for _ in range(500):
        assert cs.sample_uniform(space, rng).n_active >= 3


def test_largest_config():
    config = cs.largest_config(_desk_space())
    assert all(c == LayerChoice(1, 4.0, 1.0, 16, 16) for c in config.layers)
    assert config.n_active == 4


# ===========================
# CODEC
# ===========================

def test_encode_decode_roundtrip_is_canonicalization():
    space = _desk_space()
    rng = np.random.default_rng(3)
    for _ in range(1000):
        config = _random_config(space, rng)
        assert cs.decode(cs.encode(config, space), space) == cs.canonicalize(config, space)


def test_all_minimum_config_is_all_zero_genome():
    space = _desk_space()
    minimum = LayerChoice(0, 1.0, 0.5, 4, 4)
    genome = cs.encode(SubnetConfig((minimum,) * 4), space)
    assert genome == (0,) * space.n_genes
    assert cs.encode(cs.smallest_config(space), space)[0] == 1


def test_skipped_layers_share_an_encoding():
    space = _desk_space()
    a = SubnetConfig((LayerChoice(1, 2.0, 1.0, 8, 8), LayerChoice(0, 4.0, 1.0, 16, 16),
                      LayerChoice(1, 1.0, 0.5, 4, 8), LayerChoice(0, 1.0, 0.5, 4, 4)))
    b = SubnetConfig((LayerChoice(1, 2.0, 1.0, 8, 8), LayerChoice(0, 1.0, 0.5, 8, 4),
                      LayerChoice(1, 1.0, 0.5, 4, 8), LayerChoice(0, 2.0, 1.0, 16, 8)))
    assert cs.encode(a, space) == cs.encode(b, space)
    assert cs.config_hash(cs.canonicalize(a, space)) == cs.config_hash(cs.canonicalize(b, space))


def test_decode_rejects_bad_genomes():
    space = _binary_space()
    with pytest.raises(ConfigSpaceError):
        cs.decode((0,) * 9, space)
    with pytest.raises(ConfigSpaceError):
        cs.decode((2,) + (0,) * 9, space)


def test_validate_rejects_off_menu_values():
    space = _binary_space(d_min=1)
    off_menu = SubnetConfig((LayerChoice(1, 3.0, 1.0, 8, 8), LayerChoice(0, 2.0, 0.5, 4, 4)))
    with pytest.raises(ConfigSpaceError):
        cs.validate_config(off_menu, space)
    too_shallow = SubnetConfig((LayerChoice(0, 2.0, 0.5, 4, 4),) * 2)
    with pytest.raises(ConfigSpaceError):
        cs.validate_config(too_shallow, space)


# ===========================
# ENUMERATION
# ===========================

def test_raw_genome_count():
    space = _binary_space()
    assert sum(1 for _ in cs.enumerate_genomes(space)) == 2 ** 10


def test_enumeration_matches_closed_form():
    space = _binary_space()
    configs = list(cs.enumerate_configs(space))
    # A = 16 block settings: 1 + 2*16 + 16^2
    assert cs.cardinality(space) == 289
    assert len(configs) == 289
    assert len(set(configs)) == 289
    canonical = {cs.canonical_genome(g, space) for g in cs.enumerate_genomes(space)}
    assert len(canonical) == 289


def test_enumeration_honours_d_min():
    space = _binary_space(d_min=2)
    configs = list(cs.enumerate_configs(space))
    assert len(configs) == cs.cardinality(space) == 256
    assert all(c.n_active == 2 for c in configs)


# ===========================
# VARIATION OPERATORS
# ===========================

def test_mutate_with_zero_rate_is_identity():
    space = _desk_space()
    rng = np.random.default_rng(4)
    genome = cs.sample_genome(space, rng)
    assert cs.mutate(genome, 0.0, rng, space) == genome


def test_crossover_of_equal_parents():
    space = _desk_space()
    rng = np.random.default_rng(5)
    genome = cs.sample_genome(space, rng)
    assert cs.crossover(genome, genome, rng, space) == (genome, genome)


def test_mutation_rate_matches_expectation():
    space = _binary_space()
    rng = np.random.default_rng(6)
    genome = (0,) * space.n_genes
    changed = [sum(a != b for a, b in zip(genome, cs.mutate(genome, 0.1, rng, space)))
               for _ in range(10_000)]
    # a resample hits the same index with probability 1/2 on binary menus
    expected = space.n_genes * 0.1 * 0.5
    assert abs(np.mean(changed) - expected) < 0.15 * expected


def test_variation_repairs_depth():
    space = SearchSpace(n_layers=3, r_menu=(1, 2), h_menu=(1.0,), bw_menu=(8,), ba_menu=(8,), d_min=2)
    rng = np.random.default_rng(7)
    empty = (0,) * space.n_genes
    for _ in range(200):
        assert cs.decode(cs.mutate(empty, 1.0, rng, space), space).n_active >= 2
        a, b = cs.crossover(empty, cs.sample_genome(space, rng), rng, space)
        assert cs.decode(a, space).n_active >= 2 and cs.decode(b, space).n_active >= 2
    assert cs.decode(cs.repair(empty, space, rng), space).n_active == 2


def test_crossover_draws_each_gene_from_a_parent():
    space = _desk_space()
    rng = np.random.default_rng(8)
    a, b = cs.sample_genome(space, rng), cs.sample_genome(space, rng)
    c1, c2 = cs.crossover(a, b, rng, space)
    for i in range(space.n_genes):
        if i % cs.GENES_PER_LAYER:
            assert Counter((c1[i], c2[i])) == Counter((a[i], b[i]))


# ===========================
# ACCOUNTING AND IDENTITY
# ===========================

def test_halving_r_halves_mlp_params():
    dims = cs.ModelDims(d_model=32, r_max=4.0)
    wide = LayerChoice(1, 4.0, 1.0, 8, 8)
    narrow = LayerChoice(1, 2.0, 1.0, 8, 8)
    assert cs.block_mlp_param_count(wide, dims) == 2 * cs.block_mlp_param_count(narrow, dims)
    assert cs.block_param_count(LayerChoice(0, 4.0, 1.0, 8, 8), dims) == 0


def test_average_bits():
    config = SubnetConfig((LayerChoice(1, 1.0, 1.0, 4, 8), LayerChoice(1, 1.0, 1.0, 16, 16),
                           LayerChoice(0, 1.0, 1.0, 4, 4)))
    assert cs.average_bits(config) == pytest.approx(11.0)


def test_fingerprint_tracks_space_and_dims():
    space = _desk_space()
    dims = cs.ModelDims()
    assert cs.fingerprint(space, dims) == cs.fingerprint(_desk_space(), cs.ModelDims())
    assert cs.fingerprint(space, dims) != cs.fingerprint(cs.mixed_precision_space(space), dims)
    assert cs.fingerprint(space, dims) != cs.fingerprint(space, cs.ModelDims(d_model=16))


def test_config_from_dict_rejects_malformed():
    with pytest.raises(ConfigSpaceError):
        cs.config_from_dict({'layers': [{'m': 1, 'r': 1.0}]})
    space = _desk_space()
    config = cs.largest_config(space)
    assert cs.config_from_dict(cs.config_to_dict(config), space) == config


def main():
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith('test_') and callable(fn)]
    passed = 0
    for name, fn in tests:
        try:
            fn()
            print(f"✅ {name}")
            passed += 1
        except Exception as e:
            print(f"❌ {name}: {e}")
    print(f"\n📊 Test Results: {passed}/{len(tests)} tests passed")
    return passed == len(tests)


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
