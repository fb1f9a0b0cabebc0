"""
Test script for deployment reports and front summaries
"""
import sys
import os

import pytest

# Add repository root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core import configspace as cs
from core import costmodel as cm
from core import report
from core.configspace import LayerChoice, ModelDims, SearchSpace, SubnetConfig
from core.error_handler import EvaluationError

DIMS = ModelDims(d_model=16, n_heads=2, head_dim=8, r_max=2.0)
SPACE = SearchSpace(n_layers=3, r_menu=(1, 2), h_menu=(0.5, 1.0), bw_menu=(4, 8, 16), ba_menu=(4, 8, 16))


def _mixed():
    return SubnetConfig((LayerChoice(1, 1.0, 0.5, 4, 8), LayerChoice(1, 2.0, 1.0, 8, 8),
                         LayerChoice(0, 1.0, 0.5, 4, 4)))


def test_bit_histogram_counts_active_layers_only():
    hist = report.bit_histogram(_mixed())
    assert hist == {'weights': {4: 1, 8: 1}, 'activations': {8: 2}}


def test_dominant_bits_prefers_lower_width_on_ties():
    assert report.dominant_bits(_mixed()) == 4
    assert report.dominant_bits(cs.uniform_bits_config(SPACE, 16, 8)) == 16
    skipped = SubnetConfig((LayerChoice(0, 1.0, 0.5, 4, 4),) * 3)
    assert report.dominant_bits(skipped) is None


def test_retention():
    assert report.retention(0.45, 0.9) == pytest.approx(0.5)
    assert report.retention(0.3, 0.0) is None


def test_deployment_report_of_a_feasible_config():
    profile = cm.generate_synthetic_profiles(SPACE, DIMS, n=1, seed=0)[0]
    config = cs.smallest_config(SPACE)
    doc = report.build_deployment_report(profile, config, SPACE, DIMS, val_loss=0.2,
                                         evaluation={'success_rate': 0.6}, teacher_evaluation={'success_rate': 0.8})
    assert doc['device_id'] == profile.device_id
    assert doc['config_id'] == cs.config_hash(config)
    assert doc['constraints'] == {'latency_satisfied': True, 'memory_satisfied': True,
                                  'feasible': True, 'violation': 0.0}
    assert doc['costs']['latency_ms'] == pytest.approx(cm.estimate_latency(profile, config))
    assert doc['params'] == cs.subnet_param_count(config, DIMS)
    assert doc['success_retention'] == pytest.approx(0.75)
    breakdown = doc['memory_breakdown']
    total = breakdown['base'] + breakdown['weight_payload'] + breakdown['scale_overhead'] + breakdown['activation']
    assert total == pytest.approx(cm.estimate_memory(profile, config, DIMS))


def test_deployment_report_flags_violations():
    profile = cm.generate_synthetic_profiles(SPACE, DIMS, n=1, seed=0)[0]
    doc = report.build_deployment_report(profile, cs.largest_config(SPACE), SPACE, DIMS)
    assert not doc['constraints']['feasible']
    assert doc['constraints']['violation'] > 0
    assert 'success_retention' not in doc


def test_summarize_fronts():
    fronts = {
        'b': {'feasible': True, 'members': [{'val_loss': 0.3, 'latency_ms': 2.0, 'memory_bytes': 10},
                                            {'val_loss': 0.1, 'latency_ms': 5.0, 'memory_bytes': 30}]},
        'a': {'feasible': False, 'members': [{'val_loss': 0.5, 'latency_ms': 9.0, 'memory_bytes': 50}]},
    }
    frame = report.summarize_fronts(fronts)
    assert list(frame['device_id']) == ['a', 'b']
    row = frame.iloc[1]
    assert row['n_members'] == 2 and row['min_val_loss'] == 0.1 and row['max_latency_ms'] == 5.0
    with pytest.raises(EvaluationError):
        report.summarize_fronts({'c': {'members': []}})


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
