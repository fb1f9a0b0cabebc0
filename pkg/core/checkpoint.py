"""
Binary checkpoints for the supernet training state and for extracted subnets.

Layout: b'DCQF', little-endian uint32 format version, uint32 header length, the
header as sorted compact JSON, then every array listed in header['arrays'] as raw
little-endian float32 in that order. Nothing time-dependent is written, so
save -> load -> save reproduces the file byte for byte.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.configspace import (ModelDims, SearchSpace, config_from_dict, config_to_dict, fingerprint,
                              space_from_dict)
from core.costmodel import DeviceProfile
from core.error_handler import CheckpointError, safe_file_operation
from core.numerics import Adam
from core.quant import QuantizerBank, QuantizerSpec
from core.supernet import Subnet, Supernet, parameter_order

logger = logging.getLogger(__name__)

MAGIC = b'DCQF'
VERSION = 1
KIND_SUPERNET = 'supernet'
KIND_SUBNET = 'subnet'


@dataclass
class Checkpoint:
    header: Dict
    arrays: Dict[str, np.ndarray]

    @property
    def kind(self) -> str:
        return self.header['kind']

    @property
    def step(self) -> int:
        return int(self.header.get('step', 0))


# ===========================
# RAW CODEC
# ===========================

def encode_checkpoint(header: Dict, arrays: Sequence[Tuple[str, np.ndarray]]) -> bytes:
    header = dict(header)
    header['arrays'] = [{'name': name, 'shape': list(a.shape)} for name, a in arrays]
    text = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    chunks = [MAGIC, struct.pack('<II', VERSION, len(text)), text]
    for _, a in arrays:
        chunks.append(np.ascontiguousarray(a, dtype='<f4').tobytes())
    return b''.join(chunks)


def decode_checkpoint(blob: bytes, source: str = '<bytes>') -> Checkpoint:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack('<II', blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}",
                              details={'version': version, 'supported': VERSION})
    end = 12 + header_len
    if len(blob) < end:
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(blob[12:end].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: corrupt header ({e})")
    arrays: Dict[str, np.ndarray] = {}
    offset = end
    for entry in header.get('arrays', []):
        shape = tuple(entry['shape'])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{source}: truncated array {entry['name']}")
        arrays[entry['name']] = np.frombuffer(blob, dtype='<f4', count=count, offset=offset) \
            .reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - offset} trailing bytes")
    return Checkpoint(header, arrays)


def write_checkpoint(header: Dict, arrays: Sequence[Tuple[str, np.ndarray]], path: str) -> str:
    blob = encode_checkpoint(header, arrays)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)

    def _write():
        with open(path, 'wb') as f:
            f.write(blob)
    safe_file_operation(_write, error_cls=CheckpointError)
    logger.info(f"checkpoint written to {path} ({len(blob)} bytes)")
    return path


def read_checkpoint(path: str) -> Checkpoint:
    def _read():
        with open(path, 'rb') as f:
            return f.read()
    return decode_checkpoint(safe_file_operation(_read, error_cls=CheckpointError), path)


def check_fingerprint(ckpt: Checkpoint, space: SearchSpace, dims: ModelDims, source: str = 'checkpoint'):
    expected = fingerprint(space, dims)
    if ckpt.header.get('fingerprint') != expected:
        raise CheckpointError(f"{source} was written for a different search space or model",
                              error_code="CHECKPOINT_MISMATCH",
                              details={'expected': expected, 'found': ckpt.header.get('fingerprint')})


def _require_kind(ckpt: Checkpoint, kind: str, source: str):
    if ckpt.kind != kind:
        raise CheckpointError(f"{source}: expected a {kind} checkpoint, found {ckpt.kind}")


# ===========================
# SUPERNET TRAINING STATE
# ===========================

def supernet_arrays(supernet: Supernet, optimizer: Optional[Adam] = None) -> List[Tuple[str, np.ndarray]]:
    arrays = [(n, supernet.params[n]) for n in supernet.names]
    if optimizer is not None:
        for n in supernet.names:
            if n in optimizer.m:
                arrays.append((f'adam.m.{n}', optimizer.m[n]))
                arrays.append((f'adam.v.{n}', optimizer.v[n]))
    return arrays


def save_supernet(supernet: Supernet, path: str, optimizer: Optional[Adam] = None,
                  rng: Optional[np.random.Generator] = None, step: int = 0,
                  extra: Optional[Dict] = None) -> str:
    header = {
        'kind': KIND_SUPERNET,
        'fingerprint': fingerprint(supernet.space, supernet.dims),
        'space': supernet.space.to_dict(),
        'dims': supernet.dims.to_dict(),
        'bank': supernet.bank.state_dict(),
        'bank_settings': {'decay': supernet.bank.decay, 'warmup_steps': supernet.bank.warmup_steps},
        'optimizer': optimizer.state_dict() if optimizer is not None else None,
        'rng': rng.bit_generator.state if rng is not None else None,
        'step': int(step),
        'extra': extra or {},
    }
    return write_checkpoint(header, supernet_arrays(supernet, optimizer), path)


def save_train_state(state, path: str, extra: Optional[Dict] = None) -> str:
    return save_supernet(state.supernet, path, state.optimizer, state.rng, state.step, extra)


def restore_supernet(ckpt: Checkpoint, space: Optional[SearchSpace] = None,
                     dims: Optional[ModelDims] = None, source: str = 'checkpoint') -> Supernet:
    """Rebuild the supernet; with space/dims given, they must match the stored fingerprint"""
    _require_kind(ckpt, KIND_SUPERNET, source)
    stored_space = space_from_dict(ckpt.header['space'])
    stored_dims = ModelDims(**ckpt.header['dims'])
    if space is not None or dims is not None:
        check_fingerprint(ckpt, space or stored_space, dims or stored_dims, source)
    names = parameter_order(stored_space.n_layers)
    missing = [n for n in names if n not in ckpt.arrays]
    if missing:
        raise CheckpointError(f"{source}: missing parameters {missing[:5]}")
    settings = ckpt.header.get('bank_settings', {})
    bits = sorted(set(stored_space.bw_menu) | set(stored_space.ba_menu))
    bank = QuantizerBank(stored_space.n_layers, bits, decay=settings.get('decay', 0.99),
                         warmup_steps=settings.get('warmup_steps', 200))
    supernet = Supernet(stored_space, stored_dims, params={n: ckpt.arrays[n] for n in names}, bank=bank)
    # the constructor re-derives weight scales; the stored bank state wins
    supernet.bank.load_state_dict(ckpt.header['bank'])
    return supernet


def restore_optimizer(ckpt: Checkpoint, lr: float = 1e-3) -> Adam:
    optimizer = Adam(lr=lr)
    state = ckpt.header.get('optimizer')
    if state is None:
        return optimizer
    names = parameter_order(ckpt.header['space']['n_layers'])
    m = {n: ckpt.arrays[f'adam.m.{n}'] for n in names if f'adam.m.{n}' in ckpt.arrays}
    v = {n: ckpt.arrays[f'adam.v.{n}'] for n in names if f'adam.v.{n}' in ckpt.arrays}
    optimizer.load_state_dict(state, m, v)
    return optimizer


def restore_rng(ckpt: Checkpoint, seed: int = 0) -> np.random.Generator:
    rng = np.random.default_rng(seed)
    if ckpt.header.get('rng') is not None:
        rng.bit_generator.state = ckpt.header['rng']
    return rng


def load_train_state(path: str, profiles: Sequence[DeviceProfile], obs: np.ndarray, actions: np.ndarray,
                     space: Optional[SearchSpace] = None, dims: Optional[ModelDims] = None):
    """Resume a TrainState from disk (demos and profiles are supplied by the caller)"""
    from core.trainer import TrainState
    ckpt = read_checkpoint(path)
    supernet = restore_supernet(ckpt, space, dims, path)
    return TrainState(supernet, restore_optimizer(ckpt), restore_rng(ckpt), list(profiles),
                      obs, actions, step=ckpt.step)


def load_supernet(path: str, space: Optional[SearchSpace] = None, dims: Optional[ModelDims] = None) -> Supernet:
    return restore_supernet(read_checkpoint(path), space, dims, path)


# ===========================
# EXTRACTED SUBNET
# ===========================

def _spec_entry(key: Tuple[int, str], spec: QuantizerSpec) -> Dict:
    return {
        'layer': key[0],
        'tensor': key[1],
        'bits': spec.bits,
        'granularity': spec.granularity,
        'scale': None if spec.scale is None else [float(s) for s in spec.scale],
    }


def save_subnet(subnet: Subnet, path: str, space: SearchSpace, extra: Optional[Dict] = None) -> str:
    order = [n for n in parameter_order(len(subnet.config.layers)) if n in subnet.params]
    header = {
        'kind': KIND_SUBNET,
        'fingerprint': fingerprint(space, subnet.dims),
        'space': space.to_dict(),
        'dims': subnet.dims.to_dict(),
        'config': config_to_dict(subnet.config),
        'specs': [_spec_entry(k, subnet.specs[k]) for k in sorted(subnet.specs)],
        'extra': extra or {},
    }
    return write_checkpoint(header, [(n, subnet.params[n]) for n in order], path)


def load_subnet(path: str, space: Optional[SearchSpace] = None, dims: Optional[ModelDims] = None) -> Subnet:
    ckpt = read_checkpoint(path)
    _require_kind(ckpt, KIND_SUBNET, path)
    stored_space = space_from_dict(ckpt.header['space'])
    stored_dims = ModelDims(**ckpt.header['dims'])
    if space is not None or dims is not None:
        check_fingerprint(ckpt, space or stored_space, dims or stored_dims, path)
    specs = {}
    for e in ckpt.header['specs']:
        scale = None if e['scale'] is None else np.array(e['scale'], dtype=np.float32)
        specs[(e['layer'], e['tensor'])] = QuantizerSpec(e['bits'], e['granularity'], scale=scale)
    config = config_from_dict(ckpt.header['config'], stored_space)
    return Subnet(config, stored_dims, dict(ckpt.arrays), specs)
