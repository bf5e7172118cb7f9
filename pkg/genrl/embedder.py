"""
Frozen mock video-language embedder.

Vision: a fixed random tanh MLP over a window of k observations, L2-normalised.
Language: for each registered prompt, the normalised median vision embedding
of expert windows for its task, rotated towards a shared gap direction so the
paired cosine equals ``c_gap``. Nothing here is ever trained.
"""

import os
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .config import EmbedderSection
from .envs import EPISODE_LENGTH, EXPERTS, OBS_DIM, TASKS, run_episode
from .errors import ConfigError, UnknownPromptError
from .logger import log_warning
from .numerics import Rng


@dataclass
class VisionEmbedding:
    vector: np.ndarray
    source: str = ""


@dataclass
class LanguageEmbedding:
    vector: np.ndarray
    prompt: str
    task: str


def default_registry() -> Dict[str, str]:
    return {spec.prompt: task_id for task_id, spec in TASKS.items()}


def load_prompt_registry(path: Optional[str] = None) -> Dict[str, str]:
    """Read `prompt_id task_id` pairs, one per line; '#' starts a comment."""
    if not path:
        return default_registry()
    if not os.path.exists(path):
        raise ConfigError(f"Prompt registry not found: {path}")
    registry: Dict[str, str] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ConfigError(f"{path}:{lineno}: expected 'prompt_id task_id'")
            prompt, task = parts
            if task not in TASKS:
                raise ConfigError(f"{path}:{lineno}: unknown task '{task}'")
            if prompt in registry:
                raise ConfigError(f"{path}:{lineno}: duplicate prompt '{prompt}'")
            registry[prompt] = task
    return registry


def _unit(v: np.ndarray, axis: int = -1) -> np.ndarray:
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


class MockEmbedder:
    def __init__(self, cfg: Optional[EmbedderSection] = None, registry: Optional[Dict[str, str]] = None,
                 episode_length: int = EPISODE_LENGTH):
        self.cfg = cfg or EmbedderSection()
        self.window = self.cfg.window
        self.dim = self.cfg.dim
        self.episode_length = episode_length
        self.registry = dict(registry) if registry is not None else default_registry()

        rng = Rng(self.cfg.seed)
        in_dim = self.window * OBS_DIM
        sizes = [in_dim, self.cfg.hidden, self.cfg.hidden, self.dim]
        self._weights = []
        self._biases = []
        for i in range(3):
            gain = 1.5 if i < 2 else 1.0
            w = rng.child(i, 0).normal((sizes[i], sizes[i + 1]), gain / np.sqrt(sizes[i]))
            b = rng.child(i, 1).normal(sizes[i + 1], 0.5 if i < 2 else 0.0)
            w.setflags(write=False)
            b.setflags(write=False)
            self._weights.append(w)
            self._biases.append(b)

        gap = Rng(self.cfg.rotation_seed).normal(self.dim)
        self._gap_direction = _unit(gap)
        self._canonical: Dict[str, np.ndarray] = {}
        self._language: Dict[str, np.ndarray] = {}
        self.language_calls = 0

    # vision

    def embed_vision_batch(self, windows: np.ndarray) -> np.ndarray:
        """(B, k, 4) windows -> (B, d) unit embeddings."""
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[1] != self.window or windows.shape[2] != OBS_DIM:
            raise ValueError(f"expected windows of shape (B, {self.window}, {OBS_DIM}), got {windows.shape}")
        h = windows.reshape(windows.shape[0], -1)
        for i, (w, b) in enumerate(zip(self._weights, self._biases)):
            h = h @ w + b
            if i < 2:
                h = np.tanh(h)
        return _unit(h)

    def embed_vision(self, window: np.ndarray, source: str = "") -> VisionEmbedding:
        window = np.asarray(window, dtype=np.float64)
        if window.ndim != 2 or window.shape[0] != self.window:
            raise ValueError(f"vision window must have exactly {self.window} frames, got shape {window.shape}")
        return VisionEmbedding(self.embed_vision_batch(window[None])[0], source)

    # language

    def prompt_task(self, prompt: str) -> str:
        if prompt not in self.registry:
            raise UnknownPromptError(prompt, self.registry)
        return self.registry[prompt]

    def expert_windows(self, task_id: str, count: Optional[int] = None) -> np.ndarray:
        """`count` k-frame windows from expert episodes, one per episode."""
        count = count or self.cfg.canonical_windows
        task_index = list(TASKS).index(task_id)
        rng = Rng(self.cfg.seed, 1000 + task_index)
        policy = EXPERTS[TASKS[task_id].expert]
        windows = []
        for i in range(count):
            episode = run_episode(policy, int(rng.integers(0, 2 ** 31 - 1)), self.episode_length)
            start = int(rng.integers(0, episode.observations.shape[0] - self.window + 1))
            windows.append(episode.observations[start:start + self.window])
        return np.stack(windows)

    def canonical_vision(self, prompt: str) -> np.ndarray:
        task_id = self.prompt_task(prompt)
        if prompt not in self._canonical:
            embeddings = self.embed_vision_batch(self.expert_windows(task_id))
            self._canonical[prompt] = _unit(np.median(embeddings, axis=0))
        return self._canonical[prompt]

    def _register(self, prompt: str) -> np.ndarray:
        e_v = self.canonical_vision(prompt)
        c = self.cfg.c_gap
        if c >= 1.0:
            e_l = e_v.copy()
        else:
            ortho = self._gap_direction - np.dot(self._gap_direction, e_v) * e_v
            ortho = _unit(ortho)
            e_l = _unit(c * e_v + np.sqrt(1.0 - c * c) * ortho)
        for other, vec in self._language.items():
            if float(np.dot(vec, e_l)) >= 0.999:
                log_warning(f"Prompts '{prompt}' and '{other}' have near-identical language embeddings")
        self._language[prompt] = e_l
        return e_l

    def embed_language(self, prompt: str) -> LanguageEmbedding:
        self.language_calls += 1
        task_id = self.prompt_task(prompt)
        vector = self._language.get(prompt)
        if vector is None:
            vector = self._register(prompt)
        return LanguageEmbedding(vector.copy(), prompt, task_id)

    def register_all(self):
        for prompt in self.registry:
            if prompt not in self._language:
                self._register(prompt)

    def gap_stats(self) -> List[Dict[str, object]]:
        """Measured cos(e_l, canonical e_v) for every registered prompt."""
        return [
            {'prompt': p, 'task': self.registry[p], 'cos': float(np.dot(e_l, self._canonical[p]))}
            for p, e_l in self._language.items()
        ]

    def lipschitz_ratio(self, windows: np.ndarray, delta: float, rng: Rng) -> float:
        """Worst ||e(w + d) - e(w)|| / delta over windows, with |d|_inf <= delta."""
        windows = np.asarray(windows, dtype=np.float64)
        base = self.embed_vision_batch(windows)
        perturbed = self.embed_vision_batch(windows + rng.uniform(-delta, delta, size=windows.shape))
        return float(np.max(np.linalg.norm(perturbed - base, axis=-1)) / delta)
