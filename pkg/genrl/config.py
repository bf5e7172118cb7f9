"""
Run configuration.

A config file is plain text: ``[section]`` headers followed by ``key = value``
lines. Every key has a typed default below, so an empty file is a valid config.
The canonical text (``RunConfig.to_ini``) is hashed into every checkpoint and
CSV this package writes.
"""

import configparser
import hashlib
import os
from dataclasses import dataclass, field, fields
from typing import List, Optional, Tuple

from .errors import ConfigError


@dataclass
class RunSection:
    seed: int = 0
    run_dir: str = "runs/default"
    dataset: str = "data/default.gnrl"
    anchors: str = "runs/anchors.json"
    registry: str = ""  # empty -> built-in prompt registry


@dataclass
class EnvSection:
    episode_length: int = 200
    episodes: int = 300
    mix: str = "random:0.5,expert_reach_east:0.25,expert_run_fast:0.25"
    calibration_episodes: int = 50


@dataclass
class EmbedderSection:
    dim: int = 64
    window: int = 8
    hidden: int = 128
    seed: int = 7
    c_gap: float = 0.8
    rotation_seed: int = 11
    canonical_windows: int = 16


@dataclass
class WorldModelSection:
    latent_vars: int = 8
    latent_classes: int = 8
    hidden: int = 128
    mlp_hidden: int = 128
    batch_size: int = 16
    seq_len: int = 16
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 100.0
    kl_free_nats: float = 0.0
    steps: int = 5000
    log_every: int = 100


@dataclass
class GroundingSection:
    lr: float = 3e-4
    batch_size: int = 16
    steps: int = 5000
    aligner_sigma: float = 0.25
    log_every: int = 100


@dataclass
class BehaviorSection:
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    batch_size: int = 16
    steps: int = 2000
    horizon: int = 16
    align_window: int = 8
    gamma: float = 0.99
    lam: float = 0.95
    entropy_coef: float = 3e-4
    polyak: float = 0.98
    grad_clip: float = 100.0
    mlp_hidden: int = 128
    mode: str = "offline"
    use_aligner: bool = True
    distance: str = "cosine"
    reward: str = "genrl"
    warmup_steps: int = 5
    eval_episodes: int = 20
    revconn_hidden: int = 256
    revconn_layers: int = 4
    revconn_steps: int = 2000
    log_every: int = 100


SECTIONS: List[Tuple[str, type]] = [
    ('run', RunSection),
    ('env', EnvSection),
    ('embedder', EmbedderSection),
    ('worldmodel', WorldModelSection),
    ('grounding', GroundingSection),
    ('behavior', BehaviorSection),
]


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvSection = field(default_factory=EnvSection)
    embedder: EmbedderSection = field(default_factory=EmbedderSection)
    worldmodel: WorldModelSection = field(default_factory=WorldModelSection)
    grounding: GroundingSection = field(default_factory=GroundingSection)
    behavior: BehaviorSection = field(default_factory=BehaviorSection)

    def to_ini(self) -> str:
        """Canonical text form: fixed section and key order, repr'd floats."""
        lines = []
        for name, _ in SECTIONS:
            section = getattr(self, name)
            lines.append(f"[{name}]")
            for f in fields(section):
                value = getattr(section, f.name)
                if isinstance(value, bool):
                    text = 'true' if value else 'false'
                elif isinstance(value, float):
                    text = repr(value)
                else:
                    text = str(value)
                lines.append(f"{f.name} = {text}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode('utf-8')).hexdigest()[:16]

    def validate(self):
        e, b = self.embedder, self.behavior
        if not 0.0 < e.c_gap <= 1.0:
            raise ConfigError(f"embedder.c_gap must lie in (0, 1], got {e.c_gap}")
        if e.dim % 2 != 0:
            raise ConfigError("embedder.dim must be even (aligner bottleneck is dim/2)")
        if not 1 <= b.align_window <= b.horizon:
            raise ConfigError(f"behavior.align_window must satisfy 1 <= b <= horizon ({b.horizon})")
        if b.mode not in ('offline', 'datafree'):
            raise ConfigError(f"behavior.mode must be offline or datafree, got '{b.mode}'")
        if b.distance not in ('cosine', 'kl'):
            raise ConfigError(f"behavior.distance must be cosine or kl, got '{b.distance}'")
        if b.reward not in ('genrl', 'wmclip'):
            raise ConfigError(f"behavior.reward must be genrl or wmclip, got '{b.reward}'")
        if self.worldmodel.seq_len < 2:
            raise ConfigError("worldmodel.seq_len must be at least 2")
        return self


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"Bad value for {key}: '{raw}'")
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse config text; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"Malformed config: {e}")

    known = dict(SECTIONS)
    cfg = RunConfig()
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"Unknown config section [{name}]")
        section = getattr(cfg, name)
        defaults = {f.name: getattr(section, f.name) for f in fields(section)}
        for key, raw in parser.items(name):
            if key not in defaults:
                raise ConfigError(f"Unknown key '{key}' in [{name}]")
            setattr(section, key, _parse_value(raw, defaults[key], f"{name}.{key}"))
    return cfg


def load_config(path: Optional[str] = None) -> RunConfig:
    """Load a config file (or defaults) and apply environment overrides."""
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            cfg = parse_config(f.read())
    else:
        cfg = RunConfig()

    seed = os.getenv('GNRL_SEED')
    if seed:
        try:
            cfg.run.seed = int(seed)
        except ValueError:
            raise ConfigError(f"GNRL_SEED must be an integer, got '{seed}'")
    return cfg.validate()
