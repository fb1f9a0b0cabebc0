"""
Test script for device profiles, cost aggregation and budget regularizers
"""
import sys
import os
import dataclasses
import json
import math
import tempfile

import numpy as np
import pytest

# Add repository root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core import configspace as cs
from core import costmodel as cm
from core.configspace import LayerChoice, ModelDims, SearchSpace, SubnetConfig
from core.costmodel import BlockKey, DeviceProfile, LutEntry
from core.error_handler import ProfileError


def _small_space():
    return SearchSpace(n_layers=3, r_menu=(1, 2), h_menu=(1.0,), bw_menu=(8,), ba_menu=(8,), d_min=0)


def _small_profile(budget_latency_ms=8.0, budget_memory_bytes=10 ** 9):
    lut = {BlockKey(1.0, 1.0, 8, 8): LutEntry(3.0, 100), BlockKey(2.0, 1.0, 8, 8): LutEntry(5.0, 200)}
    return DeviceProfile('unit', budget_latency_ms, budget_memory_bytes, 0.0, 0, lut)


def _two_blocks():
    return SubnetConfig((LayerChoice(1, 1.0, 1.0, 8, 8), LayerChoice(1, 2.0, 1.0, 8, 8),
                         LayerChoice(0, 1.0, 1.0, 8, 8)))


def _skipped():
    return SubnetConfig((LayerChoice(0, 1.0, 1.0, 8, 8),) * 3)


def _desk():
    space = SearchSpace(n_layers=4, r_menu=(1, 2, 4), h_menu=(0.5, 1.0), bw_menu=(4, 8, 16),
                        ba_menu=(4, 8, 16), d_min=1)
    return space, ModelDims()


# ===========================
# AGGREGATION
# ===========================

def test_latency_is_base_plus_block_sum():
    profile = _small_profile()
    assert cm.estimate_latency(profile, _two_blocks()) == pytest.approx(8.0)
    base = dataclasses.replace(profile, base_latency_ms=1.25)
    assert cm.estimate_latency(base, _skipped()) == pytest.approx(1.25)


def test_memory_of_skipped_config_is_base():
    profile = dataclasses.replace(_small_profile(), base_memory_bytes=4096)
    assert cm.estimate_memory(profile, _skipped(), ModelDims()) == 4096


def test_weight_payload_halves_from_16_to_8_bits():
    space, dims = _desk()
    profile = cm.generate_synthetic_profiles(space, dims, n=1, seed=0)[0]
    fp16 = cm.memory_breakdown(profile, cs.uniform_bits_config(space, 16, 16), dims)
    int8 = cm.memory_breakdown(profile, cs.uniform_bits_config(space, 8, 16), dims)
    assert fp16.weight_payload == 2 * int8.weight_payload
    assert fp16.scale_overhead == 0 and int8.scale_overhead > 0
    assert int8.weight_payload + int8.scale_overhead > fp16.weight_payload / 2


def test_aggregation_matches_independent_loop():
    space, dims = _desk()
    profile = cm.generate_synthetic_profiles(space, dims, n=1, seed=1)[0]
    rng = np.random.default_rng(0)
    for _ in range(200):
        config = cs.sample_uniform(space, rng)
        latency = profile.base_latency_ms
        memory = profile.base_memory_bytes
        for c in config.layers:
            if c.m:
                entry = profile.lut[BlockKey(c.r, c.h, c.bw, c.ba)]
                latency += entry.latency_ms
                groups = cs.block_weight_groups(c, dims)
                memory += (cs.block_param_count(c, dims) * c.bw + 32 * groups) / 8.0 + entry.act_mem_bytes
        assert cm.estimate_latency(profile, config) == pytest.approx(latency, rel=1e-12)
        assert cm.estimate_memory(profile, config, dims) == pytest.approx(memory, rel=1e-12)


def test_peak_memory_aggregation():
    profile = dataclasses.replace(_small_profile(), memory_aggregation='peak')
    dims = ModelDims(r_max=2.0)
    breakdown = cm.memory_breakdown(profile, _two_blocks(), dims)
    assert breakdown.activation == 200
    with pytest.raises(ProfileError):
        cm.aggregate_activation([1.0], 'median')


def test_costs_are_monotone_in_every_gene():
    space, dims = _desk()
    for profile in cm.generate_synthetic_profiles(space, dims, n=3, seed=2):
        cm.check_monotone(profile)
        rng = np.random.default_rng(3)
        for _ in range(100):
            genome = list(cs.sample_genome(space, rng))
            config = cs.decode(genome, space)
            gene = int(rng.integers(space.n_genes))
            menu = space.gene_menus()[gene]
            if genome[gene] + 1 >= len(menu):
                continue
            genome[gene] += 1
            bigger = cs.decode(genome, space)
            assert cm.estimate_latency(profile, bigger) >= cm.estimate_latency(profile, config)
            assert cm.estimate_memory(profile, bigger, dims) >= cm.estimate_memory(profile, config, dims)


# ===========================
# REGULARIZERS
# ===========================

def test_regularizer_fixtures():
    config = _two_blocks()
    assert cm.reg_latency(_small_profile(budget_latency_ms=8.0), config) == pytest.approx(math.log(2), abs=1e-9)
    assert cm.reg_latency(_small_profile(budget_latency_ms=4.0), config) == pytest.approx(1.313262, abs=1e-6)
    assert cm.reg_latency(_small_profile(budget_latency_ms=4.0), _skipped()) == pytest.approx(0.313262, abs=1e-6)


def test_memory_regularizer_at_budget_is_ln2():
    dims = ModelDims(r_max=2.0)
    memory = cm.estimate_memory(_small_profile(), _two_blocks(), dims)
    profile = _small_profile(budget_memory_bytes=int(memory))
    assert cm.reg_memory(profile, _two_blocks(), dims) == pytest.approx(math.log(2), abs=1e-9)


def test_softplus_is_stable_and_increasing():
    zs = np.linspace(-800, 800, 4001)
    values = np.array([cm.softplus(z) for z in zs])
    assert np.all(np.isfinite(values))
    assert np.all(values >= 0)
    assert np.all(np.diff(values) >= 0)
    near = np.array([cm.softplus(z) for z in np.linspace(-30, 30, 601)])
    assert np.all(near > 0) and np.all(np.diff(near) > 0)
    assert cm.softplus(1000.0) == pytest.approx(1000.0)
    assert cm.softplus(0.0) == pytest.approx(math.log(2), abs=1e-12)


# ===========================
# FEASIBILITY
# ===========================

def test_costs_at_budget_are_feasible():
    dims = ModelDims(r_max=2.0)
    memory = cm.estimate_memory(_small_profile(), _two_blocks(), dims)
    profile = _small_profile(budget_latency_ms=8.0, budget_memory_bytes=int(memory))
    result = cm.is_feasible(profile, _two_blocks(), dims)
    assert result.feasible and result.violation == 0.0


def test_violation_is_relative_overshoot():
    dims = ModelDims(r_max=2.0)
    memory = cm.estimate_memory(_small_profile(), _two_blocks(), dims)
    profile = _small_profile(budget_latency_ms=8.0 / 1.5, budget_memory_bytes=int(memory))
    result = cm.is_feasible(profile, _two_blocks(), dims)
    assert not result.feasible
    assert result.violation == pytest.approx(0.5)
    assert result.memory_violation == 0.0


def test_feasibility_agrees_with_recomputation():
    space, dims = _desk()
    profile = cm.generate_synthetic_profiles(space, dims, n=1, seed=4)[0]
    rng = np.random.default_rng(5)
    n_feasible = 0
    for _ in range(1000):
        config = cs.sample_uniform(space, rng)
        expected = (cm.estimate_latency(profile, config) <= profile.budget_latency_ms and
                    cm.estimate_memory(profile, config, dims) <= profile.budget_memory_bytes)
        result = cm.is_feasible(profile, config, dims)
        assert result.feasible == expected
        assert (result.violation == 0.0) == expected
        n_feasible += expected
    assert 0 < n_feasible < 1000


def test_synthetic_budgets_exclude_largest_w8a8():
    space, dims = _desk()
    profiles = cm.generate_synthetic_profiles(space, dims, n=3, seed=0)
    assert [p.device_id for p in profiles] == ['synth-0', 'synth-1', 'synth-2']
    for profile in profiles:
        assert not cm.is_feasible(profile, cs.uniform_bits_config(space, 8, 8), dims).feasible
        assert cm.is_feasible(profile, cs.smallest_config(space), dims).feasible


# ===========================
# JETSON FIXTURE
# ===========================

def test_fixture_profile_reproduces_measured_ratios():
    dims = ModelDims()
    space = cs.jetson_fixture_space()
    profile = cm.jetson_fixture_profile(dims)
    cm.check_completeness(profile, space)
    lat = {b: cm.estimate_latency(profile, cs.uniform_bits_config(space, b, b)) for b in (4, 8, 16)}
    mem = {b: cm.estimate_memory(profile, cs.uniform_bits_config(space, b, b), dims) for b in (4, 8, 16)}
    assert lat[16] == pytest.approx(644.74)
    assert lat[8] == pytest.approx(297.84)
    assert lat[4] == pytest.approx(217.38)
    assert abs(lat[16] / lat[8] - 2.16) < 0.01
    assert abs(lat[16] / lat[4] - 2.97) < 0.01
    assert mem[16] == pytest.approx(15.2e9, rel=1e-6)
    assert abs(mem[16] / mem[8] - 1.92) < 0.01
    assert abs(mem[16] / mem[4] - 3.80) < 0.01


# ===========================
# PROFILE FILES
# ===========================

def test_profile_file_roundtrip_and_checks():
    space, dims = _desk()
    profile = cm.generate_synthetic_profiles(space, dims, n=1, seed=6)[0]
    with tempfile.TemporaryDirectory() as tmp:
        (path,) = cm.write_profiles([profile], tmp)
        loaded = cm.load_profile(path, space)
        assert loaded.lut == profile.lut
        assert loaded.budget_memory_bytes == profile.budget_memory_bytes

        data = profile.to_dict()
        data['entries'] = data['entries'][1:]
        incomplete = os.path.join(tmp, 'incomplete.json')
        with open(incomplete, 'w', encoding='utf-8') as f:
            json.dump(data, f)
        with pytest.raises(ProfileError) as info:
            cm.load_profile(incomplete, space)
        assert info.value.error_code == 'PROFILE_INCOMPLETE'
        assert len(info.value.details['missing']) == 1

        with pytest.raises(ProfileError):
            cm.load_profiles([path, path], space)
        with pytest.raises(ProfileError) as missing:
            cm.load_profile(os.path.join(tmp, 'absent.json'), space)
        assert missing.value.error_code == 'ARTIFACT_MISSING'


def test_non_monotone_profile_is_rejected():
    data = _small_profile().to_dict()
    data['entries'][1]['latency_ms'] = 1.0
    with pytest.raises(ProfileError) as info:
        cm.profile_from_dict(data, _small_space())
    assert info.value.error_code == 'PROFILE_NOT_MONOTONE'


def test_schema_violations_are_rejected():
    data = _small_profile().to_dict()
    data['budget_latency_ms'] = 0
    with pytest.raises(ProfileError):
        cm.profile_from_dict(data)
    data = _small_profile().to_dict()
    data['entries'].append(dict(data['entries'][0]))
    with pytest.raises(ProfileError):
        cm.profile_from_dict(data)


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
