"""
Artifact persistence: JSON documents, CSV tables and the demonstration file
"""
import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from core.error_handler import DatasetError, safe_file_operation

logger = logging.getLogger(__name__)

DEMO_MAGIC = b'DCQD'
DEMO_VERSION = 1


def convert_numpy_types(obj):
    """Convert numpy types to Python native types for JSON serialization"""
    if isinstance(obj, np.integer):
        return int(obj)
    elif isinstance(obj, np.floating):
        return float(obj)
    elif isinstance(obj, np.bool_):
        return bool(obj)
    elif isinstance(obj, np.ndarray):
        return obj.tolist()
    elif isinstance(obj, dict):
        return {key: convert_numpy_types(value) for key, value in obj.items()}
    elif isinstance(obj, (list, tuple)):
        return [convert_numpy_types(item) for item in obj]
    else:
        return obj


def _ensure_parent(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def save_json(data: Any, path: str) -> str:
    """Sorted keys and a trailing newline, so equal data gives equal bytes"""
    _ensure_parent(path)
    text = json.dumps(convert_numpy_types(data), indent=2, sort_keys=True)

    def _write():
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text + '\n')
    safe_file_operation(_write)
    return path


def load_json(path: str, default: Optional[Any] = None) -> Any:
    if not os.path.exists(path):
        if default is not None:
            return default
        raise DatasetError(f"File not found: {path}", error_code="ARTIFACT_MISSING")

    def _read():
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    try:
        return safe_file_operation(_read)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON ({e})")


def write_csv(rows: Sequence[Dict], path: str, columns: Optional[List[str]] = None) -> str:
    _ensure_parent(path)
    frame = pd.DataFrame(list(rows), columns=columns)
    frame.to_csv(path, index=False, float_format='%.10g', lineterminator='\n')
    return path


# ===========================
# DEMONSTRATION FILE
# ===========================

def save_demos(trajectories: Sequence, path: str) -> str:
    """
    Layout: magic, then little-endian uint32 (version, n_traj, obs_dim, act_dim),
    n_traj uint32 lengths, n_traj uint8 success flags, then each trajectory's
    observations followed by its actions as little-endian float32
    """
    if not trajectories:
        raise DatasetError("refusing to write an empty demonstration set")
    obs_dim = trajectories[0].observations.shape[1]
    act_dim = trajectories[0].actions.shape[1]
    header = np.array([DEMO_VERSION, len(trajectories), obs_dim, act_dim], dtype='<u4')
    lengths = np.array([len(t) for t in trajectories], dtype='<u4')
    flags = np.array([1 if t.success else 0 for t in trajectories], dtype='u1')
    parts = [DEMO_MAGIC, header.tobytes(), lengths.tobytes(), flags.tobytes()]
    for t in trajectories:
        if t.observations.shape[1] != obs_dim or t.actions.shape[1] != act_dim:
            raise DatasetError("trajectories disagree on observation/action dimensions")
        parts.append(np.asarray(t.observations, dtype='<f4').tobytes())
        parts.append(np.asarray(t.actions, dtype='<f4').tobytes())
    _ensure_parent(path)

    def _write():
        with open(path, 'wb') as f:
            f.write(b''.join(parts))
    safe_file_operation(_write)
    logger.info(f"wrote {len(trajectories)} trajectories ({int(lengths.sum())} steps) to {path}")
    return path


def load_demos(path: str) -> List:
    from core.env import Trajectory

    def _read():
        with open(path, 'rb') as f:
            return f.read()
    blob = safe_file_operation(_read)
    if blob[:4] != DEMO_MAGIC:
        raise DatasetError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, n, obs_dim, act_dim = np.frombuffer(blob, dtype='<u4', count=4, offset=4)
        if version != DEMO_VERSION:
            raise DatasetError(f"{path}: unsupported demo format version {version}")
        offset = 20
        lengths = np.frombuffer(blob, dtype='<u4', count=n, offset=offset)
        offset += 4 * int(n)
        flags = np.frombuffer(blob, dtype='u1', count=n, offset=offset)
        offset += int(n)
        trajectories = []
        for length, flag in zip(lengths, flags):
            k = int(length)
            obs = np.frombuffer(blob, dtype='<f4', count=k * int(obs_dim), offset=offset).reshape(k, obs_dim)
            offset += 4 * k * int(obs_dim)
            act = np.frombuffer(blob, dtype='<f4', count=k * int(act_dim), offset=offset).reshape(k, act_dim)
            offset += 4 * k * int(act_dim)
            trajectories.append(Trajectory(obs.astype(np.float32), act.astype(np.float32), bool(flag)))
    except ValueError as e:
        raise DatasetError(f"{path}: truncated demonstration file ({e})")
    if offset != len(blob):
        raise DatasetError(f"{path}: {len(blob) - offset} trailing bytes after last trajectory")
    return trajectories
