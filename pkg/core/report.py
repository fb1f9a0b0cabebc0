"""
Deployment reports and run summaries
"""
import collections
import logging
from typing import Dict, Mapping, Optional

import pandas as pd

from core import storage
from core.configspace import (ModelDims, SearchSpace, SubnetConfig, average_bits, config_hash,
                              config_to_dict, encode, genome_to_str, subnet_param_count)
from core.costmodel import DeviceProfile, headroom, is_feasible, memory_breakdown
from core.error_handler import EvaluationError

logger = logging.getLogger(__name__)


def bit_histogram(config: SubnetConfig) -> Dict[str, Dict[int, int]]:
    """Active-layer counts per weight and activation bit-width"""
    weights = collections.Counter(c.bw for c in config.layers if c.m)
    acts = collections.Counter(c.ba for c in config.layers if c.m)
    return {'weights': dict(sorted(weights.items())), 'activations': dict(sorted(acts.items()))}


def dominant_bits(config: SubnetConfig) -> Optional[int]:
    """Most common weight bit-width among active layers (ties go to the lower width)"""
    counts = collections.Counter(c.bw for c in config.layers if c.m)
    if not counts:
        return None
    return min(counts, key=lambda b: (-counts[b], b))


def retention(student_rate: float, teacher_rate: float) -> Optional[float]:
    """Student success as a fraction of the teacher's; None when the teacher never succeeds"""
    if teacher_rate <= 0:
        return None
    return student_rate / teacher_rate


def build_deployment_report(profile: DeviceProfile, config: SubnetConfig, space: SearchSpace, dims: ModelDims,
                            val_loss: Optional[float] = None, evaluation: Optional[Dict] = None,
                            teacher_evaluation: Optional[Dict] = None) -> Dict:
    """Config, costs, budgets and headroom of one deployed subnet"""
    check = is_feasible(profile, config, dims)
    breakdown = memory_breakdown(profile, config, dims)
    report = {
        'device_id': profile.device_id,
        'config_id': config_hash(config),
        'genome': genome_to_str(encode(config, space)),
        'config': config_to_dict(config),
        'n_active_layers': config.n_active,
        'params': subnet_param_count(config, dims),
        'average_bits': average_bits(config),
        'bit_histogram': bit_histogram(config),
        'costs': headroom(profile, config, dims),
        'memory_breakdown': {
            'base': breakdown.base,
            'weight_payload': breakdown.weight_payload,
            'scale_overhead': breakdown.scale_overhead,
            'activation': breakdown.activation,
            'aggregation': profile.memory_aggregation,
        },
        'constraints': {
            'latency_satisfied': check.latency_violation == 0.0,
            'memory_satisfied': check.memory_violation == 0.0,
            'feasible': check.feasible,
            'violation': check.violation,
        },
        'val_loss': val_loss,
        'evaluation': evaluation,
        'teacher_evaluation': teacher_evaluation,
    }
    if evaluation is not None and teacher_evaluation is not None:
        report['success_retention'] = retention(evaluation['success_rate'], teacher_evaluation['success_rate'])
    if not check.feasible:
        logger.warning(f"{profile.device_id}: deployed config {report['config_id']} violates its budget "
                       f"(violation {check.violation:.4f})")
    return report


def write_report(report: Dict, path: str) -> str:
    return storage.save_json(report, path)


def summarize_fronts(fronts: Mapping[str, Dict]) -> pd.DataFrame:
    """
    One row per device from front JSON documents (see search.front_to_dict)
    Returns:
        DataFrame with member count, feasibility and objective ranges
    """
    rows = []
    for device_id in sorted(fronts):
        data = fronts[device_id]
        members = data.get('members', [])
        if not members:
            raise EvaluationError(f"front for {device_id} has no members", error_code="EMPTY_FRONT")
        rows.append({
            'device_id': device_id,
            'feasible': bool(data.get('feasible', False)),
            'n_members': len(members),
            'min_val_loss': min(m['val_loss'] for m in members),
            'min_latency_ms': min(m['latency_ms'] for m in members),
            'max_latency_ms': max(m['latency_ms'] for m in members),
            'min_memory_bytes': min(m['memory_bytes'] for m in members),
        })
    return pd.DataFrame(rows)
