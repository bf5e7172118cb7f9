"""
PointMass2D: a deterministic point mass on the square [-1, 1]^2, with five
tasks, scripted experts, analytic per-step rewards and min-max score anchors.

Observation = [px, py, vx, vy]; action = 2-D acceleration command in [-1, 1].
"""

import json
import math
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CalibrationMissingError, ConfigError
from .logger import log_info, log_processing, log_success, log_warning
from .numerics import Rng

ENV_ID = "PointMass2D-v0"
V_MAX = 1.0
EPISODE_LENGTH = 200
OBS_DIM = 4
ACT_DIM = 2

Policy = Callable[[np.ndarray], np.ndarray]


@dataclass
class EnvState:
    position: np.ndarray
    velocity: np.ndarray
    step: int = 0

    def observation(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@dataclass
class TaskSpec:
    task_id: str
    prompt: str
    in_dataset: bool
    score_fn: str
    expert: str
    target: Tuple[float, float] = (0.0, 0.0)


TASKS: Dict[str, TaskSpec] = {
    'reach_east': TaskSpec('reach_east', 'go_right', True, 'reach', 'expert_reach_east', (0.7, 0.0)),
    'run_fast': TaskSpec('run_fast', 'run_fast', True, 'run', 'expert_run_fast'),
    'reach_west': TaskSpec('reach_west', 'go_left', False, 'reach', 'expert_reach_west', (-0.7, 0.0)),
    'reach_center': TaskSpec('reach_center', 'go_to_center', False, 'reach', 'expert_reach_center', (0.0, 0.0)),
    'stand_still': TaskSpec('stand_still', 'stay_still', False, 'stand', 'expert_stand_still'),
}

HELD_OUT_TASKS = [t for t, spec in TASKS.items() if not spec.in_dataset]


@dataclass
class EpisodeRecord:
    observations: np.ndarray  # (T+1, 4)
    actions: np.ndarray       # (T, 2)
    env_id: str = ENV_ID
    seed: int = 0
    policy_id: str = ""

    def __post_init__(self):
        if self.observations.shape[0] != self.actions.shape[0] + 1:
            raise ValueError("episode needs exactly one more observation than actions")

    @property
    def length(self) -> int:
        return self.actions.shape[0]


def get_task(task_id: str) -> TaskSpec:
    if task_id not in TASKS:
        raise ConfigError(f"Unknown task '{task_id}'. Known tasks: {', '.join(TASKS)}")
    return TASKS[task_id]


class PointMass2D:
    """v' = clip(0.9 v + 0.1 a, +-1); p' = clip(p + 0.05 v', +-1)."""

    def __init__(self, episode_length: int = EPISODE_LENGTH):
        self.episode_length = episode_length
        self.state: Optional[EnvState] = None
        self.clipped_actions = 0

    def reset(self, seed: int) -> np.ndarray:
        rng = Rng(seed)
        self.state = EnvState(rng.uniform(-0.9, 0.9, size=2), np.zeros(2), 0)
        return self.state.observation()

    def step(self, action: Sequence[float]) -> np.ndarray:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        if self.state.step >= self.episode_length:
            raise RuntimeError("episode is over")
        self.state, clipped = step_state(self.state, action)
        if clipped:
            self.clipped_actions += 1
            log_warning(f"Action {np.asarray(action).tolist()} outside [-1, 1] clipped at step {self.state.step}")
        return self.state.observation()

    @property
    def done(self) -> bool:
        return self.state is not None and self.state.step >= self.episode_length


def step_state(state: EnvState, action: Sequence[float]) -> Tuple[EnvState, bool]:
    """Pure transition; returns the next state and whether the action was clipped."""
    a = np.asarray(action, dtype=np.float64)
    clipped_a = np.clip(a, -1.0, 1.0)
    velocity = np.clip(0.9 * state.velocity + 0.1 * clipped_a, -V_MAX, V_MAX)
    position = np.clip(state.position + 0.05 * velocity, -1.0, 1.0)
    return EnvState(position, velocity, state.step + 1), bool(np.any(clipped_a != a))


# experts

def _pd_to(target: Sequence[float], kp: float = 8.0, kd: float = 3.5) -> Policy:
    goal = np.asarray(target, dtype=np.float64)

    def policy(obs: np.ndarray) -> np.ndarray:
        return np.clip(kp * (goal - obs[:2]) - kd * obs[2:], -1.0, 1.0)

    return policy


def _run_fast(obs: np.ndarray) -> np.ndarray:
    px, py, vx, vy = obs
    if vx > 0.0:
        direction = -1.0 if px >= 0.6 else 1.0
    elif vx < 0.0:
        direction = 1.0 if px <= -0.6 else -1.0
    else:
        direction = -1.0 if px > 0.0 else 1.0
    # keep the y coordinate away from the walls
    ay = np.clip(-4.0 * py - 2.0 * vy, -1.0, 1.0)
    return np.array([direction, ay])


EXPERTS: Dict[str, Policy] = {
    'expert_reach_east': _pd_to(TASKS['reach_east'].target),
    'expert_reach_west': _pd_to(TASKS['reach_west'].target),
    'expert_reach_center': _pd_to(TASKS['reach_center'].target),
    'expert_stand_still': _pd_to((0.0, 0.0), kp=6.0, kd=5.0),
    'expert_run_fast': _run_fast,
}


def expert_policy(task_id: str, obs: np.ndarray) -> np.ndarray:
    """Scripted controller for `task_id` evaluated at observation `obs`."""
    if task_id not in TASKS:
        raise ConfigError(f"Unknown task '{task_id}'")
    return EXPERTS[TASKS[task_id].expert](np.asarray(obs, dtype=np.float64))


def random_policy(rng: Rng) -> Policy:
    return lambda obs: rng.uniform(-1.0, 1.0, size=ACT_DIM)


def make_policy(policy_id: str, rng: Rng) -> Policy:
    if policy_id == 'random':
        return random_policy(rng)
    if policy_id in EXPERTS:
        return EXPERTS[policy_id]
    raise ConfigError(f"Unknown policy '{policy_id}'. Known: random, {', '.join(EXPERTS)}")


# scoring

def step_reward(task_id: str, obs: np.ndarray) -> float:
    spec = get_task(task_id)
    p, v = obs[:2], obs[2:]
    speed = float(np.linalg.norm(v))
    if spec.score_fn == 'reach':
        dist = float(np.linalg.norm(p - np.asarray(spec.target)))
        return max(0.0, 1.0 - min(1.0, dist / 0.2))
    if spec.score_fn == 'run':
        return min(1.0, speed / V_MAX)
    dist_center = float(np.linalg.norm(p))
    return (1.0 - min(1.0, speed)) * (1.0 - min(1.0, dist_center))


def task_score(episode: EpisodeRecord, task_id: str) -> float:
    """Mean per-step task reward over the observations reached after each action."""
    if episode.length == 0:
        raise ValueError("cannot score an empty episode")
    return float(np.mean([step_reward(task_id, o) for o in episode.observations[1:]]))


class ScoreAnchors:
    """Per-task raw scores of the random policy (min) and the expert (max)."""

    def __init__(self, anchors: Optional[Dict[str, Tuple[float, float]]] = None):
        self.anchors = dict(anchors or {})

    def normalized_score(self, raw: float, task_id: str) -> float:
        if task_id not in self.anchors:
            raise CalibrationMissingError(task_id)
        low, high = self.anchors[task_id]
        return (raw - low) / (high - low)

    def save(self, path: str):
        os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump({t: {'random': lo, 'expert': hi} for t, (lo, hi) in self.anchors.items()}, f, indent=2)

    @classmethod
    def load(cls, path: str) -> "ScoreAnchors":
        if not os.path.exists(path):
            raise CalibrationMissingError()
        with open(path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
        return cls({t: (v['random'], v['expert']) for t, v in raw.items()})


def normalized_score(raw: float, task_id: str, anchors: ScoreAnchors) -> float:
    return anchors.normalized_score(raw, task_id)


# rollouts

def run_episode(policy: Policy, seed: int, episode_length: int = EPISODE_LENGTH,
                policy_id: str = "", on_reset: Optional[Callable[[], None]] = None) -> EpisodeRecord:
    env = PointMass2D(episode_length)
    obs = env.reset(seed)
    if on_reset is not None:
        on_reset()
    observations = [obs]
    actions = []
    while not env.done:
        action = np.clip(np.asarray(policy(obs), dtype=np.float64), -1.0, 1.0)
        obs = env.step(action)
        observations.append(obs)
        actions.append(action)
    return EpisodeRecord(np.array(observations), np.array(actions).reshape(-1, ACT_DIM),
                         ENV_ID, seed, policy_id)


def episode_seed(seed: int, index: int) -> int:
    return int(Rng(seed, index).integers(0, 2 ** 31 - 1))


def calibrate_anchors(episodes: int = 50, seed: int = 0, episode_length: int = EPISODE_LENGTH,
                      tasks: Optional[List[str]] = None) -> ScoreAnchors:
    """Mean raw score of the random policy and the task expert over `episodes` episodes."""
    anchors = {}
    for task_id in tasks or list(TASKS):
        log_processing(f"Calibrating anchors for {task_id}")
        random_raw, expert_raw = [], []
        for i in range(episodes):
            ep_seed = episode_seed(seed, i)
            rnd = run_episode(random_policy(Rng(ep_seed, 1)), ep_seed, episode_length)
            exp = run_episode(EXPERTS[TASKS[task_id].expert], ep_seed, episode_length)
            random_raw.append(task_score(rnd, task_id))
            expert_raw.append(task_score(exp, task_id))
        anchors[task_id] = (float(np.mean(random_raw)), float(np.mean(expert_raw)))
        log_info(f"{task_id}: random={anchors[task_id][0]:.4f} expert={anchors[task_id][1]:.4f}")
    return ScoreAnchors(anchors)


# datasets

def parse_mix(text: str) -> List[Tuple[str, float]]:
    """'random:0.5,expert_reach_east:0.5' -> [(policy id, fraction), ...]."""
    mix = []
    for part in text.split(','):
        part = part.strip()
        if not part:
            continue
        if ':' not in part:
            raise ConfigError(f"Bad mix entry '{part}' (expected policy:fraction)")
        name, frac = part.rsplit(':', 1)
        try:
            mix.append((name.strip(), float(frac)))
        except ValueError:
            raise ConfigError(f"Bad fraction in mix entry '{part}'")
    return mix


def mix_counts(policy_mix: Sequence[Tuple[str, float]], episodes: int) -> List[Tuple[str, int]]:
    """
    Episodes per policy: round half up, then remove any surplus (or add any
    shortfall) starting from the last entry so the counts sum to `episodes`.
    """
    total = sum(f for _, f in policy_mix)
    if not policy_mix or abs(total - 1.0) > 1e-9:
        raise ConfigError(f"Policy mix fractions must sum to 1, got {total:.6g}")
    if any(f < 0 for _, f in policy_mix):
        raise ConfigError("Policy mix fractions must be non-negative")
    if episodes < 0:
        raise ConfigError(f"Episode count must be non-negative, got {episodes}")
    counts = [int(math.floor(f * episodes + 0.5)) for _, f in policy_mix]
    i = len(counts) - 1
    while sum(counts) != episodes:
        if sum(counts) > episodes and counts[i] > 0:
            counts[i] -= 1
        elif sum(counts) < episodes:
            counts[i] += 1
        i = (i - 1) % len(counts)
    return [(name, n) for (name, _), n in zip(policy_mix, counts)]


def collect_dataset(policy_mix: Sequence[Tuple[str, float]], episodes: int, seed: int,
                    episode_length: int = EPISODE_LENGTH, out_path: Optional[str] = None) -> List[EpisodeRecord]:
    """
    Roll out the policy mix. Episode i gets its own seeded stream, so the
    result does not depend on collection order. Rewards and prompts are never
    stored. With `out_path` the records are also written as a dataset container.
    """
    plan = mix_counts(policy_mix, episodes)
    for name, _ in plan:
        make_policy(name, Rng(0))  # validates ids before any rollout

    records = []
    index = 0
    for name, count in plan:
        log_processing(f"Collecting {count} episodes with {name}")
        for _ in range(count):
            ep_seed = episode_seed(seed, index)
            policy = make_policy(name, Rng(ep_seed, 1))
            records.append(run_episode(policy, ep_seed, episode_length, policy_id=name))
            index += 1
    if not records:
        log_warning("Collected an empty dataset")
    else:
        log_success(f"Collected {len(records)} episodes")
    if out_path:
        from .storage import write_dataset
        write_dataset(out_path, records, seed=seed, policy_mix=policy_mix)
    return records
