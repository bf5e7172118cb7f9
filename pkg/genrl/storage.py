"""
On-disk containers: the GNRL episode dataset format and stage checkpoints.

Dataset layout (all integers little-endian uint32, all floats little-endian float64):

    b"GNRL" | version | metadata length | metadata (UTF-8 JSON)
    then per episode: T | observations ((T+1) x 4) | actions (T x 2)

Checkpoints are uncompressed ``.npz`` archives: named parameter / optimizer
arrays plus a JSON ``__meta__`` record (stage tag, config hash and text, step,
RNG states).
"""

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .envs import ACT_DIM, ENV_ID, OBS_DIM, EpisodeRecord
from .errors import DatasetFormatError, StageOrderError
from .numerics import AdamState

MAGIC = b"GNRL"
FORMAT_VERSION = 1
CHECKPOINT_VERSION = 1

STAGES = ('wm', 'grounding', 'policy', 'revconn')
STAGE_PREREQUISITES = {
    'wm': (),
    'grounding': ('wm',),
    'policy': ('wm', 'grounding'),
    'revconn': ('wm',),
}

# Process-wide count of dataset file reads; data-free training must leave it
# untouched. One pipeline runs per process, so the counter is not thread-local.
io_stats = {'dataset_reads': 0}


def reset_io_stats():
    io_stats['dataset_reads'] = 0


# datasets

def encode_dataset(records: Sequence[EpisodeRecord], seed: int = 0,
                   policy_mix: Sequence[Tuple[str, float]] = ()) -> bytes:
    meta = {
        'env_id': records[0].env_id if records else ENV_ID,
        'seed': int(seed),
        'episodes': len(records),
        'obs_dim': OBS_DIM,
        'act_dim': ACT_DIM,
        'lengths': [int(r.length) for r in records],
        'episode_seeds': [int(r.seed) for r in records],
        'policy_ids': [r.policy_id for r in records],
        'policy_mix': [[name, float(frac)] for name, frac in policy_mix],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode('utf-8')
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack('<II', FORMAT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    for r in records:
        buf.write(struct.pack('<I', r.length))
        buf.write(np.ascontiguousarray(r.observations, dtype='<f8').tobytes())
        buf.write(np.ascontiguousarray(r.actions, dtype='<f8').tobytes())
    return buf.getvalue()


def decode_dataset(blob: bytes) -> Tuple[Dict[str, Any], List[EpisodeRecord]]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise DatasetFormatError("Not a GNRL dataset (bad magic)")
    version, meta_len = struct.unpack_from('<II', blob, 4)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"Unsupported dataset version {version} (reader supports {FORMAT_VERSION})")
    offset = 12
    try:
        meta = json.loads(blob[offset:offset + meta_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"Corrupt dataset metadata: {e}")
    offset += meta_len

    lengths = meta.get('lengths', [])
    obs_dim, act_dim = meta.get('obs_dim', OBS_DIM), meta.get('act_dim', ACT_DIM)
    expected = sum(4 + 8 * ((t + 1) * obs_dim + t * act_dim) for t in lengths)
    if len(lengths) != meta.get('episodes') or len(blob) - offset != expected:
        raise DatasetFormatError(
            f"Payload size {len(blob) - offset} does not match metadata ({expected} bytes for {len(lengths)} episodes)")

    records = []
    for i, t in enumerate(lengths):
        (prefix,) = struct.unpack_from('<I', blob, offset)
        if prefix != t:
            raise DatasetFormatError(f"Episode {i}: length prefix {prefix} != metadata length {t}")
        offset += 4
        n_obs = (t + 1) * obs_dim
        obs = np.frombuffer(blob, dtype='<f8', count=n_obs, offset=offset).reshape(t + 1, obs_dim)
        offset += 8 * n_obs
        n_act = t * act_dim
        act = np.frombuffer(blob, dtype='<f8', count=n_act, offset=offset).reshape(t, act_dim)
        offset += 8 * n_act
        records.append(EpisodeRecord(obs.astype(np.float64), act.astype(np.float64), meta.get('env_id', ENV_ID),
                                     meta['episode_seeds'][i], meta['policy_ids'][i]))
    return meta, records


def write_dataset(path: str, records: Sequence[EpisodeRecord], seed: int = 0,
                  policy_mix: Sequence[Tuple[str, float]] = ()) -> str:
    """Write the container and return its SHA-256 fingerprint."""
    blob = encode_dataset(records, seed, policy_mix)
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    with open(path, 'wb') as f:
        f.write(blob)
    return hashlib.sha256(blob).hexdigest()


def read_dataset(path: str) -> Tuple[Dict[str, Any], List[EpisodeRecord]]:
    if not os.path.exists(path):
        raise StageOrderError('dataset', path)
    io_stats['dataset_reads'] += 1
    with open(path, 'rb') as f:
        return decode_dataset(f.read())


def load_dataset(path: str) -> List[EpisodeRecord]:
    return read_dataset(path)[1]


def select_policies(records: Sequence[EpisodeRecord], policy_ids: Sequence[str]) -> List[EpisodeRecord]:
    wanted = set(policy_ids)
    return [r for r in records if r.policy_id in wanted]


# checkpoints

@dataclass
class Checkpoint:
    stage: str
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"Unknown checkpoint stage '{self.stage}'")

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        """Arrays stored under `prefix` with the prefix stripped."""
        n = len(prefix)
        return {k[n:]: v for k, v in self.arrays.items() if k.startswith(prefix)}

    def put_group(self, prefix: str, arrays: Dict[str, np.ndarray]):
        for k, v in arrays.items():
            self.arrays[f"{prefix}{k}"] = np.asarray(v, dtype=np.float64)

    def put_adam(self, prefix: str, state: AdamState):
        self.put_group(f"{prefix}.m::", state.m)
        self.put_group(f"{prefix}.v::", state.v)
        self.meta.setdefault('optimizers', {})[prefix] = {
            'lr': state.lr, 'beta1': state.beta1, 'beta2': state.beta2, 'eps': state.eps, 'step': state.step,
        }

    def get_adam(self, prefix: str) -> AdamState:
        hp = self.meta['optimizers'][prefix]
        return AdamState(hp['lr'], hp['beta1'], hp['beta2'], hp['eps'], hp['step'],
                         {k: v.copy() for k, v in self.group(f"{prefix}.m::").items()},
                         {k: v.copy() for k, v in self.group(f"{prefix}.v::").items()})


def save_checkpoint(path: str, ckpt: Checkpoint):
    meta = dict(ckpt.meta, stage=ckpt.stage, version=CHECKPOINT_VERSION)
    meta_bytes = np.frombuffer(json.dumps(meta, sort_keys=True).encode('utf-8'), dtype=np.uint8)
    os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
    with open(path, 'wb') as f:
        np.savez(f, __meta__=meta_bytes, **ckpt.arrays)


def load_checkpoint(path: str, stage: str) -> Checkpoint:
    """Load a checkpoint, insisting it carries the expected stage tag."""
    if not os.path.exists(path):
        raise StageOrderError(stage, path)
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(archive['__meta__'].tobytes().decode('utf-8'))
        arrays = {k: archive[k] for k in archive.files if k != '__meta__'}
    if meta.get('version') != CHECKPOINT_VERSION:
        raise DatasetFormatError(f"Unsupported checkpoint version {meta.get('version')} in {path}")
    if meta.get('stage') != stage:
        raise StageOrderError(stage, path)
    return Checkpoint(stage, arrays, meta)


def checkpoint_path(run_dir: str, stage: str, tag: str = "") -> str:
    suffix = f"_{tag}" if tag else ""
    return os.path.join(run_dir, f"{stage}{suffix}.npz")


def require_stages(run_dir: str, stage: str):
    """Raise StageOrderError naming the first missing prerequisite of `stage`."""
    for prereq in STAGE_PREREQUISITES[stage]:
        path = checkpoint_path(run_dir, prereq)
        if not os.path.exists(path):
            raise StageOrderError(prereq, path)
