"""
Device profiles: block-level latency / activation-memory lookup tables, subnet
cost aggregation, softplus budget regularizers and feasibility.
"""
import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from jsonschema import Draft7Validator

from core import storage
from core.configspace import (LayerChoice, ModelDims, SearchSpace, SubnetConfig, block_param_count,
                              block_weight_groups, largest_config, jetson_fixture_space)
from core.error_handler import ProfileError, safe_file_operation
from core.quant import PASS_THROUGH_BITS, quantized_size_bits

logger = logging.getLogger(__name__)

JETSON_FIXTURE_ID = 'orin-nx-paper'
# whole-model measurements per uniform bit-width (WxAx)
JETSON_LATENCY_MS = {16: 644.74, 8: 297.84, 4: 217.38}
JETSON_MEMORY_BYTES = {16: 15.2e9, 8: 7.9e9, 4: 4.0e9}

PROFILE_SCHEMA = {
    "type": "object",
    "required": ["device_id", "budget_latency_ms", "budget_memory_bytes",
                 "base_latency_ms", "base_memory_bytes", "entries"],
    "additionalProperties": False,
    "properties": {
        "device_id": {"type": "string", "minLength": 1},
        "budget_latency_ms": {"type": "number", "exclusiveMinimum": 0},
        "budget_memory_bytes": {"type": "integer", "exclusiveMinimum": 0},
        "base_latency_ms": {"type": "number", "minimum": 0},
        "base_memory_bytes": {"type": "integer", "minimum": 0},
        "memory_aggregation": {"enum": ["sum", "peak"]},
        "entries": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["r", "h", "bw", "ba", "latency_ms", "act_mem_bytes"],
                "additionalProperties": False,
                "properties": {
                    "r": {"type": "number", "exclusiveMinimum": 0},
                    "h": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    "bw": {"enum": [4, 8, 16]},
                    "ba": {"enum": [4, 8, 16]},
                    "latency_ms": {"type": "number", "exclusiveMinimum": 0},
                    "act_mem_bytes": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}


class BlockKey(NamedTuple):
    r: float
    h: float
    bw: int
    ba: int

    @classmethod
    def of(cls, choice: LayerChoice) -> "BlockKey":
        return cls(float(choice.r), float(choice.h), int(choice.bw), int(choice.ba))


class LutEntry(NamedTuple):
    latency_ms: float
    act_mem_bytes: int


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    budget_latency_ms: float
    budget_memory_bytes: int
    base_latency_ms: float
    base_memory_bytes: int
    lut: Dict[BlockKey, LutEntry] = field(hash=False)
    memory_aggregation: str = 'sum'

    def entry(self, choice: LayerChoice) -> LutEntry:
        key = BlockKey.of(choice)
        try:
            return self.lut[key]
        except KeyError:
            raise ProfileError(f"{self.device_id}: no LUT entry for {tuple(key)}", error_code="PROFILE_INCOMPLETE",
                               details={'missing': [list(key)]})

    def to_dict(self) -> Dict:
        return {
            'device_id': self.device_id,
            'budget_latency_ms': float(self.budget_latency_ms),
            'budget_memory_bytes': int(self.budget_memory_bytes),
            'base_latency_ms': float(self.base_latency_ms),
            'base_memory_bytes': int(self.base_memory_bytes),
            'memory_aggregation': self.memory_aggregation,
            'entries': [
                {'r': k.r, 'h': k.h, 'bw': k.bw, 'ba': k.ba,
                 'latency_ms': float(v.latency_ms), 'act_mem_bytes': int(v.act_mem_bytes)}
                for k, v in sorted(self.lut.items())
            ],
        }


@dataclass(frozen=True)
class MemoryBreakdown:
    base: float
    weight_payload: float
    scale_overhead: float
    activation: float

    @property
    def total(self) -> float:
        return self.base + self.weight_payload + self.scale_overhead + self.activation


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    violation: float
    latency_ms: float
    memory_bytes: float
    latency_violation: float
    memory_violation: float


# ===========================
# COST AGGREGATION
# ===========================

def estimate_latency(profile: DeviceProfile, config: SubnetConfig) -> float:
    """base + sum of LUT latencies over kept layers"""
    total = float(profile.base_latency_ms)
    for choice in config.layers:
        if choice.m:
            total += profile.entry(choice).latency_ms
    return total


def memory_breakdown(profile: DeviceProfile, config: SubnetConfig, dims: ModelDims) -> MemoryBreakdown:
    """
    Memory terms of a config. `weight_payload` is params * bw / 8 and is linear in
    the weight bit-width; the 32-bit per-channel scales are reported apart in
    `scale_overhead`, so only the payload halves when every bw goes 16 -> 8.
    """
    payload = 0.0
    scales = 0.0
    activations: List[float] = []
    for choice in config.layers:
        if not choice.m:
            continue
        params = block_param_count(choice, dims)
        groups = block_weight_groups(choice, dims)
        payload += params * choice.bw / 8.0
        scales += (quantized_size_bits(params, choice.bw, groups) - params * choice.bw) / 8.0
        activations.append(float(profile.entry(choice).act_mem_bytes))
    activation = aggregate_activation(activations, profile.memory_aggregation)
    return MemoryBreakdown(float(profile.base_memory_bytes), payload, scales, activation)


def aggregate_activation(values: Sequence[float], rule: str = 'sum') -> float:
    if not values:
        return 0.0
    if rule == 'peak':
        return float(max(values))
    if rule == 'sum':
        return float(sum(values))
    raise ProfileError(f"unknown memory aggregation rule {rule}")


def estimate_memory(profile: DeviceProfile, config: SubnetConfig, dims: ModelDims) -> float:
    """base + weight payload + scale overhead + aggregated LUT activation bytes"""
    return memory_breakdown(profile, config, dims).total


def softplus(z: float) -> float:
    return float(np.logaddexp(0.0, z))


def reg_latency(profile: DeviceProfile, config: SubnetConfig) -> float:
    c = estimate_latency(profile, config)
    return softplus((c - profile.budget_latency_ms) / profile.budget_latency_ms)


def reg_memory(profile: DeviceProfile, config: SubnetConfig, dims: ModelDims) -> float:
    c = estimate_memory(profile, config, dims)
    return softplus((c - profile.budget_memory_bytes) / profile.budget_memory_bytes)


def is_feasible(profile: DeviceProfile, config: SubnetConfig, dims: ModelDims) -> Feasibility:
    lat = estimate_latency(profile, config)
    mem = estimate_memory(profile, config, dims)
    lat_v = max(0.0, (lat - profile.budget_latency_ms) / profile.budget_latency_ms)
    mem_v = max(0.0, (mem - profile.budget_memory_bytes) / profile.budget_memory_bytes)
    feasible = lat <= profile.budget_latency_ms and mem <= profile.budget_memory_bytes
    return Feasibility(feasible, lat_v + mem_v, lat, mem, lat_v, mem_v)


def headroom(profile: DeviceProfile, config: SubnetConfig, dims: ModelDims) -> Dict:
    lat = estimate_latency(profile, config)
    mem = estimate_memory(profile, config, dims)
    return {
        'latency_ms': lat,
        'memory_bytes': mem,
        'budget_latency_ms': float(profile.budget_latency_ms),
        'budget_memory_bytes': int(profile.budget_memory_bytes),
        'latency_headroom_ms': profile.budget_latency_ms - lat,
        'memory_headroom_bytes': profile.budget_memory_bytes - mem,
        'latency_utilization': lat / profile.budget_latency_ms,
        'memory_utilization': mem / profile.budget_memory_bytes,
    }


# ===========================
# LOADING AND VALIDATION
# ===========================

def required_keys(space: SearchSpace) -> List[BlockKey]:
    return [BlockKey(r, h, bw, ba) for r, h, bw, ba in
            itertools.product(space.r_menu, space.h_menu, space.bw_menu, space.ba_menu)]


def check_completeness(profile: DeviceProfile, space: SearchSpace):
    missing = [list(k) for k in required_keys(space) if k not in profile.lut]
    if missing:
        raise ProfileError(f"{profile.device_id}: {len(missing)} LUT entries missing, e.g. {missing[:5]}",
                           error_code="PROFILE_INCOMPLETE", details={'missing': missing})


def check_monotone(profile: DeviceProfile) -> None:
    """Latency and activation memory must not drop when any one of r, h, bw, ba grows"""
    keys = sorted(profile.lut)
    axes = [sorted({k[i] for k in keys}) for i in range(4)]
    offending = []
    for key in keys:
        for i, menu in enumerate(axes):
            pos = menu.index(key[i])
            if pos + 1 >= len(menu):
                continue
            bigger = BlockKey(*[menu[pos + 1] if j == i else key[j] for j in range(4)])
            if bigger not in profile.lut:
                continue
            lo, hi = profile.lut[key], profile.lut[bigger]
            if hi.latency_ms < lo.latency_ms or hi.act_mem_bytes < lo.act_mem_bytes:
                offending.append([list(key), list(bigger)])
    if offending:
        raise ProfileError(f"{profile.device_id}: LUT not monotone at {len(offending)} key pairs, e.g. {offending[:3]}",
                           error_code="PROFILE_NOT_MONOTONE", details={'pairs': offending})


def profile_from_dict(data: Dict, space: Optional[SearchSpace] = None) -> DeviceProfile:
    errors = sorted(Draft7Validator(PROFILE_SCHEMA).iter_errors(data), key=lambda e: list(e.path))
    if errors:
        where = '/'.join(str(p) for p in errors[0].path) or '<root>'
        raise ProfileError(f"profile schema violation at {where}: {errors[0].message}",
                           details={'errors': [e.message for e in errors[:10]]})
    lut: Dict[BlockKey, LutEntry] = {}
    duplicates = []
    for e in data['entries']:
        key = BlockKey(float(e['r']), float(e['h']), int(e['bw']), int(e['ba']))
        if key in lut:
            duplicates.append(list(key))
        lut[key] = LutEntry(float(e['latency_ms']), int(e['act_mem_bytes']))
    if duplicates:
        raise ProfileError(f"{data['device_id']}: duplicate LUT keys {duplicates[:5]}")
    profile = DeviceProfile(
        device_id=data['device_id'],
        budget_latency_ms=float(data['budget_latency_ms']),
        budget_memory_bytes=int(data['budget_memory_bytes']),
        base_latency_ms=float(data['base_latency_ms']),
        base_memory_bytes=int(data['base_memory_bytes']),
        lut=lut,
        memory_aggregation=data.get('memory_aggregation', 'sum'),
    )
    if space is not None:
        check_completeness(profile, space)
    check_monotone(profile)
    return profile


def load_profile(path: str, space: Optional[SearchSpace] = None) -> DeviceProfile:
    def _read():
        with open(path, 'r', encoding='utf-8') as f:
            return f.read()
    text = safe_file_operation(_read, error_cls=ProfileError)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProfileError(f"{path}: invalid JSON ({e})")
    profile = profile_from_dict(data, space)
    logger.info(f"loaded profile {profile.device_id} with {len(profile.lut)} LUT entries from {path}")
    return profile


def save_profile(profile: DeviceProfile, path: str) -> str:
    storage.save_json(profile.to_dict(), path)
    return path


def load_profiles(paths: Sequence[str], space: SearchSpace) -> List[DeviceProfile]:
    profiles = [load_profile(p, space) for p in paths]
    ids = [p.device_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ProfileError(f"duplicate device ids among profiles: {ids}")
    return profiles


# ===========================
# GENERATED PROFILES
# ===========================

def _block_cost_profile(device_id, space, dims, coeff, const, act_coeff, base_latency,
                        lat_frac, mem_frac) -> DeviceProfile:
    lut = {}
    for key in required_keys(space):
        latency = coeff * key.r * key.h * np.sqrt(key.bw * key.ba) + const
        act = int(round(act_coeff * dims.d_model * dims.n_tokens * (1.0 + key.r * key.h) * key.ba / 8.0))
        lut[key] = LutEntry(round(float(latency), 6), act)
    base_mem = 4 * (dims.token_dim * dims.d_model + dims.d_model + dims.d_model * dims.act_dim + dims.act_dim)
    draft = DeviceProfile(device_id, 1.0, 1, round(base_latency, 6), base_mem, lut)
    full = largest_config(space)
    budget_lat = round(lat_frac * estimate_latency(draft, full), 6)
    budget_mem = int(mem_frac * estimate_memory(draft, full, dims))
    return DeviceProfile(device_id, budget_lat, budget_mem, draft.base_latency_ms, base_mem, lut)


def generate_synthetic_profiles(space: SearchSpace, dims: ModelDims, n: int = 2,
                                seed: int = 0) -> List[DeviceProfile]:
    """
    Distinct monotone LUTs: latency = a*r*h*sqrt(bw*ba) + c per block. Budgets sit
    at 35-45% of the largest full-precision subnet, so the largest W8A8 subnet is
    infeasible on every device.
    """
    rng = np.random.default_rng(seed)
    profiles = []
    for i in range(n):
        coeff = float(rng.uniform(0.02, 0.08))
        const = float(coeff * max(space.r_menu) * PASS_THROUGH_BITS * rng.uniform(0.04, 0.1))
        act_coeff = float(rng.uniform(0.5, 2.0))
        base_latency = float(rng.uniform(0.05, 0.2))
        lat_frac = float(rng.uniform(0.38, 0.45))
        mem_frac = float(rng.uniform(0.36, 0.45))
        profiles.append(_block_cost_profile(f'synth-{i}', space, dims, coeff, const, act_coeff,
                                            base_latency, lat_frac, mem_frac))
    return profiles


def jetson_fixture_profile(dims: ModelDims, budget_latency_ms: float = 300.0,
                          budget_memory_bytes: int = 8_000_000_000) -> DeviceProfile:
    """
    Whole-model LUT over jetson_fixture_space(): uniform WxAx entries reproduce the
    measured Jetson latency/memory; mixed keys use the geometric mean of their two
    uniform neighbours. Activation bytes absorb whatever the analytic weight bytes
    leave of the measured total.
    """
    space = jetson_fixture_space()
    lut = {}
    for key in required_keys(space):
        latency = float(np.sqrt(JETSON_LATENCY_MS[key.bw] * JETSON_LATENCY_MS[key.ba]))
        target = float(np.sqrt(JETSON_MEMORY_BYTES[key.bw] * JETSON_MEMORY_BYTES[key.ba]))
        choice = LayerChoice(1, key.r, key.h, key.bw, key.ba)
        params = block_param_count(choice, dims)
        weight_bytes = quantized_size_bits(params, key.bw, block_weight_groups(choice, dims)) / 8.0
        lut[key] = LutEntry(round(latency, 6), int(round(target - weight_bytes)))
    return DeviceProfile(JETSON_FIXTURE_ID, float(budget_latency_ms), int(budget_memory_bytes), 0.0, 0, lut)


def write_profiles(profiles: Sequence[DeviceProfile], directory: str) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    return [save_profile(p, os.path.join(directory, f'{p.device_id}.json')) for p in profiles]
