"""
Behavior learning in imagination.

An actor-critic is trained purely on world-model rollouts. Rewards compare
imagined latent states with the grounded target sequence of a prompt after
best-matching temporal alignment (cosine of g_phi projections), or, for the
WM-CLIP baseline, compare embeddings predicted from latent states with the
prompt embedding.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .config import BehaviorSection, RunConfig
from .embedder import MockEmbedder
from .envs import ACT_DIM, EPISODE_LENGTH, EpisodeRecord, ScoreAnchors, episode_seed, get_task, run_episode, task_score
from .errors import NumericsError, StageOrderError
from .grounding import Grounding, TargetSequence, sample_connector_states
from .layers import MLP, Module, copy_module_params, polyak_update
from .logger import logger
from .metrics import MetricsWriter, mean_and_stderr
from .numerics import AdamState, Rng, Tape, Tensor
from .storage import Checkpoint
from .worldmodel import Imagination, WorldModel, sample_sequences

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
EVAL_SEED_OFFSET = 100_000

RewardFn = Callable[[Imagination], Tensor]


def features(s, h) -> Tensor:
    """Flattened latent state concatenated with the hidden state."""
    s, h = nx.as_tensor(s), nx.as_tensor(h)
    flat = s.reshape(s.shape[:-2] + (s.shape[-2] * s.shape[-1],))
    return nx.concat([flat, h], axis=-1)


class Actor(Module):
    """Tanh-squashed Gaussian over 2-D actions."""

    def __init__(self, in_dim: int, hidden: int, rng: Rng):
        self.net = MLP([in_dim, hidden, hidden, 2 * ACT_DIM], rng)

    def distribution(self, feats) -> Tuple[Tensor, Tensor]:
        out = self.net(feats)
        return out[..., :ACT_DIM], nx.clip(out[..., ACT_DIM:], LOG_STD_MIN, LOG_STD_MAX)

    def sample(self, feats, rng: Rng) -> Tensor:
        mean, log_std = self.distribution(feats)
        return nx.tanh(mean + nx.exp(log_std) * rng.normal(mean.shape))

    def mode(self, feats) -> Tensor:
        return nx.tanh(self.distribution(feats)[0])

    def entropy(self, feats) -> Tensor:
        # entropy of the pre-squash Gaussian
        _, log_std = self.distribution(feats)
        return (log_std + 0.5 * np.log(2.0 * np.pi * np.e)).sum(axis=-1)

    def std(self, feats) -> np.ndarray:
        with nx.no_tape():
            return np.exp(self.distribution(feats)[1].data)


class Critic(Module):
    def __init__(self, in_dim: int, hidden: int, rng: Rng):
        self.net = MLP([in_dim, hidden, hidden, 1], rng, zero_last=True)

    def __call__(self, feats) -> Tensor:
        v = self.net(feats)
        return v.reshape(v.shape[:-1])


class ActorCritic(Module):
    def __init__(self, wm: WorldModel, section: BehaviorSection, rng: Rng):
        in_dim = wm.latent_dim + wm.hidden_size
        self.actor = Actor(in_dim, section.mlp_hidden, rng.child(0))
        self.critic = Critic(in_dim, section.mlp_hidden, rng.child(1))
        self.target_critic = Critic(in_dim, section.mlp_hidden, rng.child(1))
        copy_module_params(self.target_critic, self.critic)


# temporal alignment and rewards

def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def alignment_scores(imagined: np.ndarray, target: np.ndarray, b: int) -> np.ndarray:
    """
    Sum of cosines between imagined[d + i] and target[min(i, k-1)] for i < b,
    for every admissible shift d in [0, H - b]. imagined is (..., H, P).
    """
    horizon, k = imagined.shape[-2], target.shape[0]
    if not 1 <= b <= horizon:
        raise ValueError(f"alignment window b={b} must satisfy 1 <= b <= H={horizon}")
    sims = _unit_rows(imagined) @ _unit_rows(target).T
    cols = np.minimum(np.arange(b), k - 1)
    return np.stack([sims[..., d + np.arange(b), cols].sum(axis=-1) for d in range(horizon - b + 1)], axis=-1)


def best_alignment_offset(imagined: np.ndarray, target: np.ndarray, b: int):
    """argmax shift of the projected imagined sequence against the projected target; ties go to the smallest."""
    return np.argmax(alignment_scores(np.asarray(imagined), np.asarray(target), b), axis=-1)


def target_indices(offsets: np.ndarray, horizon: int, k: int) -> np.ndarray:
    """Target index per step: 0 before t_a, then t - t_a clamped to the last target state."""
    t = np.arange(horizon)
    offsets = np.asarray(offsets)[..., None]
    return np.where(t < offsets, 0, np.minimum(t - offsets, k - 1))


def genrl_reward(wm: Optional[WorldModel], states, target: TargetSequence, align_window: int,
                 distance: str = 'cosine', prior_logits=None) -> Tensor:
    """
    Per-step reward for imagined states (B, H, V, C) or (H, V, C).
    cosine: cos(g_phi(s_t), g_phi(target matched to t)), in [-1, 1].
    kl: -KL(onehot(matched target) || prior the state was drawn from).
    """
    if wm is None or not hasattr(wm, 'g_phi'):
        raise ValueError("genrl_reward needs a world model exposing g_phi")
    states = nx.as_tensor(states)
    single = states.ndim == 3
    if single:
        states = states.reshape((1,) + states.shape)
        if prior_logits is not None:
            prior_logits = nx.as_tensor(prior_logits).reshape((1,) + states.shape[1:])

    proj = wm.project(states)
    with nx.no_tape():
        target_proj = wm.project(target.states).data
    offsets = best_alignment_offset(proj.data, target_proj, align_window)
    idx = target_indices(offsets, states.shape[1], target.length)

    if distance == 'cosine':
        rewards = nx.cosine_similarity(proj, Tensor(target_proj[idx]))
    elif distance == 'kl':
        if prior_logits is None:
            raise ValueError("the kl distance needs the imagined prior logits")
        log_q = nx.log_softmax(prior_logits)
        rewards = (log_q * Tensor(target.states[idx])).sum(axis=-1).sum(axis=-1)
    else:
        raise ValueError(f"Unknown reward distance '{distance}'")
    return rewards[0] if single else rewards


def lambda_returns(rewards, values, gamma: float, lam: float) -> Tensor:
    """R_t = r_t + gamma * ((1 - lam) * v_{t+1} + lam * R_{t+1}), with R_H = v_H."""
    rewards, values = nx.as_tensor(rewards), nx.as_tensor(values)
    horizon = rewards.shape[-1]
    if values.shape[-1] != horizon + 1 or values.shape[:-1] != rewards.shape[:-1]:
        raise ValueError(f"values must have one more step than rewards: {values.shape} vs {rewards.shape}")
    ret = values[..., horizon]
    out = [None] * horizon
    for t in reversed(range(horizon)):
        ret = rewards[..., t] + gamma * ((1.0 - lam) * values[..., t + 1] + lam * ret)
        out[t] = ret
    return nx.stack(out, axis=-1)


class GenRLReward:
    def __init__(self, wm: WorldModel, target: TargetSequence, align_window: int, distance: str = 'cosine'):
        self.wm = wm
        self.target = target
        self.align_window = align_window
        self.distance = distance

    def __call__(self, imag: Imagination) -> Tensor:
        # r_t scores s_{t+1}, the state reached by a_t
        return genrl_reward(self.wm, imag.states[:, 1:], self.target, self.align_window,
                            self.distance, imag.prior_logits)


class ReversedConnector(Module):
    """Predicts a unit vision embedding from (s, h)."""

    def __init__(self, in_dim: int, emb_dim: int, hidden: int, layers: int, rng: Rng):
        self.net = MLP([in_dim] + [hidden] * (layers - 1) + [emb_dim], rng)
        self.trained = False

    def __call__(self, s, h) -> Tensor:
        return nx.normalize(self.net(features(s, h)))


def wmclip_reward(revconn: Optional[ReversedConnector], states, hiddens, e_task: np.ndarray) -> Tensor:
    if revconn is None or not revconn.trained:
        raise StageOrderError('revconn')
    return nx.cosine_similarity(revconn(states, hiddens), np.asarray(e_task, dtype=np.float64))


class WMClipReward:
    def __init__(self, revconn: ReversedConnector, e_task: np.ndarray):
        self.revconn = revconn
        self.e_task = e_task

    def __call__(self, imag: Imagination) -> Tensor:
        return wmclip_reward(self.revconn, imag.states[:, 1:], imag.hiddens[:, 1:], self.e_task)


# actor-critic

def imagine_with_actor(agent: ActorCritic, wm: WorldModel, s0, h0, horizon: int, rng: Rng,
                       sample: bool = True) -> Imagination:
    if sample:
        policy = lambda s, h: agent.actor.sample(features(s, h), rng)
    else:
        policy = lambda s, h: agent.actor.mode(features(s, h))
    return wm.imagine(policy, s0, h0, horizon, rng, sample=sample)


def actor_objective(agent: ActorCritic, wm: WorldModel, s0, h0, reward_fn: RewardFn,
                    section: BehaviorSection, rng: Rng) -> Tuple[Tensor, Dict[str, object]]:
    """
    Negative mean lambda-return (pathwise through the imagined dynamics) minus
    the entropy bonus. Values come from the main critic.
    """
    horizon = section.horizon
    imag = imagine_with_actor(agent, wm, s0, h0, horizon, rng)
    feats = features(imag.states, imag.hiddens)
    rewards = reward_fn(imag)
    values = agent.critic(feats)
    returns = lambda_returns(rewards, values, section.gamma, section.lam)
    entropy = agent.actor.entropy(feats[:, :horizon]).mean()
    loss = -(returns.mean() + section.entropy_coef * entropy)
    return loss, {'imag': imag, 'feats': feats, 'rewards': rewards, 'returns': returns, 'entropy': entropy}


def critic_loss(agent: ActorCritic, feats: np.ndarray, rewards: np.ndarray, section: BehaviorSection) -> Tensor:
    """Regression of v(s_t, h_t) onto stop-gradient lambda-returns bootstrapped from the target critic."""
    horizon = rewards.shape[-1]
    with nx.no_tape():
        targets = lambda_returns(rewards, agent.target_critic(feats).data, section.gamma, section.lam).data
    v = agent.critic(feats[:, :horizon])
    return (0.5 * (v - targets) ** 2).mean()


def actor_critic_update(agent: ActorCritic, wm: WorldModel, s0, h0, reward_fn: RewardFn,
                        section: BehaviorSection, actor_adam: AdamState, critic_adam: AdamState,
                        rng: Rng) -> Dict[str, float]:
    with Tape():
        actor_loss, parts = actor_objective(agent, wm, s0, h0, reward_fn, section, rng)
        returns = parts['returns'].data
        if not np.all(np.isfinite(returns)) or not np.isfinite(actor_loss.item()):
            raise NumericsError(
                f"Non-finite lambda-returns (rewards finite: {bool(np.all(np.isfinite(parts['rewards'].data)))}, "
                f"max |return|: {np.nanmax(np.abs(returns)) if np.any(np.isfinite(returns)) else 'nan'})")
        nx.optimize(actor_loss, agent.actor.named_parameters(), actor_adam, section.grad_clip)

    feats = parts['feats'].data
    rewards = parts['rewards'].data
    with Tape():
        c_loss = critic_loss(agent, feats, rewards, section)
        nx.optimize(c_loss, agent.critic.named_parameters(), critic_adam, section.grad_clip)
    polyak_update(agent.target_critic, agent.critic, section.polyak)
    return {
        'reward_mean': float(rewards.mean()),
        'return_mean': float(returns.mean()),
        'actor_loss': actor_loss.item(),
        'critic_loss': c_loss.item(),
        'entropy': parts['entropy'].item(),
    }


# initial states

@dataclass
class InitialStates:
    states: np.ndarray   # (n, V, C)
    hiddens: np.ndarray  # (n, Dh)
    warmup_steps: int = 0


def sample_initial_states(mode: str, n: int, wm: WorldModel, cfg: RunConfig, rng: Rng,
                          records: Optional[Sequence[EpisodeRecord]] = None,
                          grounding: Optional[Grounding] = None,
                          agent: Optional[ActorCritic] = None) -> InitialStates:
    """
    offline: final (s, h) of posterior unrolls over dataset subsequences.
    datafree: half uniform one-hot latents, half connector samples, then
    `warmup_steps` dynamics steps with a per-sample 50/50 mix of policy and
    uniform random actions. The world model has no learned initial hidden
    state, so h starts from zeros (`wm.initial_hidden`) and only the warmup
    moves it off the origin.
    """
    if mode == 'offline':
        if not records:
            raise StageOrderError('dataset', cfg.run.dataset)
        batch = sample_sequences(records, n, cfg.worldmodel.seq_len, rng)
        with nx.no_tape():
            out = wm.observe(batch.obs, batch.actions, rng)
        return InitialStates(out['states'].data[:, -1], out['hiddens'].data[:, -1])

    if mode != 'datafree':
        raise ValueError(f"Unknown initial-state mode '{mode}'")
    if grounding is None or agent is None:
        raise StageOrderError('grounding')
    n_uniform = n // 2
    uniform = nx.one_hot(rng.integers(0, wm.latent_classes, size=(n_uniform, wm.latent_vars)), wm.latent_classes)
    connected = sample_connector_states(grounding, n - n_uniform, cfg.embedder.dim, rng)
    s = np.concatenate([uniform, connected])
    h = wm.initial_hidden(n).data
    steps = 0
    with nx.no_tape():
        for _ in range(cfg.behavior.warmup_steps):
            policy_a = agent.actor.sample(features(s, h), rng).data
            random_a = rng.uniform(-1.0, 1.0, size=(n, ACT_DIM))
            use_policy = rng.uniform(size=(n, 1)) < 0.5
            h_next, prior = wm.dynamics_step(s, np.where(use_policy, policy_a, random_a), h)
            s = nx.categorical_sample_st(prior, rng).data
            h = h_next.data
            steps += 1
    return InitialStates(s, h, steps)


def phase_shifted_states(wm: WorldModel, target: TargetSequence, n: int) -> InitialStates:
    """Every start at the final target state, i.e. already past the target's opening phase."""
    s = np.repeat(target.states[-1][None], n, axis=0)
    return InitialStates(s, wm.initial_hidden(n).data)


class BehaviorTrainer:
    """Imagination loop: initial states -> H-step rollout -> reward -> one actor and one critic step."""

    columns = ['step', 'reward_mean', 'return_mean', 'actor_loss', 'critic_loss', 'entropy']

    def __init__(self, cfg: RunConfig, wm: WorldModel, reward_fn: RewardFn,
                 grounding: Optional[Grounding] = None, records: Optional[Sequence[EpisodeRecord]] = None,
                 mode: Optional[str] = None, agent: Optional[ActorCritic] = None,
                 initial_state_fn: Optional[Callable[[int, Rng], "InitialStates"]] = None):
        self.cfg = cfg
        self.section = cfg.behavior
        self.wm = wm
        self.grounding = grounding
        self.records = records
        self.reward_fn = reward_fn
        self.mode = mode or self.section.mode
        if initial_state_fn is None and self.mode == 'offline' and not records:
            raise StageOrderError('dataset', cfg.run.dataset)
        self.initial_state_fn = initial_state_fn
        self.agent = agent or ActorCritic(wm, self.section, Rng(cfg.run.seed, 30))
        b1, b2, eps = cfg.worldmodel.beta1, cfg.worldmodel.beta2, cfg.worldmodel.eps
        self.actor_adam = AdamState(self.section.actor_lr, b1, b2, eps)
        self.critic_adam = AdamState(self.section.critic_lr, b1, b2, eps)
        self.rng = Rng(cfg.run.seed, 31)
        self.step = 0

    def initial_states(self) -> InitialStates:
        n = self.section.batch_size
        if self.initial_state_fn is not None:
            return self.initial_state_fn(n, self.rng)
        return sample_initial_states(self.mode, n, self.wm, self.cfg, self.rng,
                                     self.records, self.grounding, self.agent)

    def train_step(self) -> Dict[str, float]:
        init = self.initial_states()
        values = actor_critic_update(self.agent, self.wm, init.states, init.hiddens, self.reward_fn,
                                     self.section, self.actor_adam, self.critic_adam, self.rng)
        self.step += 1
        return values

    def train(self, steps: int, writer: Optional[MetricsWriter] = None) -> List[Dict[str, float]]:
        history = []
        total = self.step + steps
        for _ in range(steps):
            values = self.train_step()
            row = dict(step=self.step, **values)
            history.append(row)
            if writer is not None:
                writer.write(**row)
            if self.step % self.section.log_every == 0 or self.step == total:
                logger.progress('policy', self.step, total, values)
        return history

    def to_checkpoint(self, **meta) -> Checkpoint:
        ckpt = Checkpoint('policy', meta=dict(meta, **{
            'config_hash': self.cfg.config_hash(),
            'config': self.cfg.to_ini(),
            'step': self.step,
            'rng_state': self.rng.get_state(),
            'mode': self.mode,
        }))
        ckpt.put_group('agent::', self.agent.state_dict())
        ckpt.put_adam('actor_adam', self.actor_adam)
        ckpt.put_adam('critic_adam', self.critic_adam)
        target = getattr(self.reward_fn, 'target', None)
        if target is not None:
            ckpt.put_group('target::', {'states': target.states})
        return ckpt

    def restore(self, ckpt: Checkpoint) -> "BehaviorTrainer":
        self.agent.load_state_dict(ckpt.group('agent::'))
        self.actor_adam = ckpt.get_adam('actor_adam')
        self.critic_adam = ckpt.get_adam('critic_adam')
        self.rng.set_state(ckpt.meta['rng_state'])
        self.step = int(ckpt.meta['step'])
        return self


def load_agent(ckpt: Checkpoint, cfg: RunConfig, wm: WorldModel) -> ActorCritic:
    agent = ActorCritic(wm, cfg.behavior, Rng(cfg.run.seed, 30))
    agent.load_state_dict(ckpt.group('agent::'))
    return agent


# reversed connector (WM-CLIP baseline)

class RevConnTrainer:
    """Regresses predicted embeddings onto embed_vision of the k-window ending at each latent state."""

    columns = ['step', 'loss']

    def __init__(self, cfg: RunConfig, records: Sequence[EpisodeRecord], wm: WorldModel,
                 embedder: MockEmbedder, revconn: Optional[ReversedConnector] = None):
        self.cfg = cfg
        self.section = cfg.behavior
        self.records = list(records)
        self.wm = wm
        self.embedder = embedder
        self.window = cfg.embedder.window
        self.length = max(cfg.worldmodel.seq_len, self.window)
        self.revconn = revconn or ReversedConnector(wm.latent_dim + wm.hidden_size, cfg.embedder.dim,
                                                    self.section.revconn_hidden, self.section.revconn_layers,
                                                    Rng(cfg.run.seed, 40))
        self.adam = AdamState(cfg.grounding.lr, cfg.worldmodel.beta1, cfg.worldmodel.beta2, cfg.worldmodel.eps)
        self.rng = Rng(cfg.run.seed, 41)
        self.step = 0

    def train_step(self) -> Dict[str, float]:
        k = self.window
        batch = sample_sequences(self.records, self.cfg.grounding.batch_size, self.length, self.rng)
        with nx.no_tape():
            out = self.wm.observe(batch.obs, batch.actions, self.rng)
        states = out['states'].data[:, k - 1:]
        hiddens = out['hiddens'].data[:, k - 1:]
        windows = np.stack([batch.obs[:, t - k + 1:t + 1] for t in range(k - 1, self.length)], axis=1)
        n_windows = windows.shape[1]
        targets = self.embedder.embed_vision_batch(windows.reshape(-1, k, windows.shape[-1]))
        targets = targets.reshape(windows.shape[0], n_windows, -1)
        with Tape():
            pred = self.revconn(states, hiddens)
            loss = ((pred - targets) ** 2).sum(axis=-1).mean()
            nx.optimize(loss, self.revconn.named_parameters(), self.adam, self.section.grad_clip)
        self.revconn.trained = True
        self.step += 1
        return {'loss': loss.item()}

    def train(self, steps: int, writer: Optional[MetricsWriter] = None) -> List[Dict[str, float]]:
        history = []
        total = self.step + steps
        for _ in range(steps):
            values = self.train_step()
            row = dict(step=self.step, **values)
            history.append(row)
            if writer is not None:
                writer.write(**row)
            if self.step % self.section.log_every == 0 or self.step == total:
                logger.progress('revconn', self.step, total, values)
        return history

    def to_checkpoint(self) -> Checkpoint:
        ckpt = Checkpoint('revconn', meta={
            'config_hash': self.cfg.config_hash(),
            'config': self.cfg.to_ini(),
            'step': self.step,
            'rng_state': self.rng.get_state(),
        })
        ckpt.put_group('revconn::', self.revconn.state_dict())
        ckpt.put_adam('revconn_adam', self.adam)
        return ckpt


def load_revconn(ckpt: Checkpoint, cfg: RunConfig, wm: WorldModel) -> ReversedConnector:
    b = cfg.behavior
    revconn = ReversedConnector(wm.latent_dim + wm.hidden_size, cfg.embedder.dim, b.revconn_hidden,
                                b.revconn_layers, Rng(cfg.run.seed, 40))
    revconn.load_state_dict(ckpt.group('revconn::'))
    revconn.trained = int(ckpt.meta.get('step', 0)) > 0
    return revconn


# evaluation

class LatentAgent:
    """
    Closed-loop controller for the real environment: the world-model GRU
    carries memory, the encoder's mode gives s_t, the actor's mean gives a_t.
    """

    def __init__(self, wm: WorldModel, actor: Actor):
        self.wm = wm
        self.actor = actor
        self.reset()

    def reset(self):
        self.s = np.zeros((1, self.wm.latent_vars, self.wm.latent_classes))
        self.a = np.zeros((1, ACT_DIM))
        self.h = self.wm.initial_hidden(1).data

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        with nx.no_tape():
            h, _ = self.wm.dynamics_step(self.s, self.a, self.h)
            s = nx.categorical_mode_st(self.wm.encode(np.asarray(obs, dtype=np.float64)[None]))
            a = self.actor.mode(features(s, h)).data
        self.s, self.h, self.a = s.data, h.data, a
        return a[0]


def evaluate_policy(policy: Callable[[np.ndarray], np.ndarray], task_id: str, episodes: int, seed: int,
                    anchors: ScoreAnchors, mode: str = "",
                    episode_length: int = EPISODE_LENGTH) -> Dict[str, object]:
    """Roll the policy out on fresh seeds; rows carry task, mode, seed, raw and normalized score."""
    get_task(task_id)
    on_reset = getattr(policy, 'reset', None)
    rows = []
    for i in range(episodes):
        ep_seed = episode_seed(seed, EVAL_SEED_OFFSET + i)
        raw = task_score(run_episode(policy, ep_seed, episode_length, on_reset=on_reset), task_id)
        rows.append({'task': task_id, 'mode': mode, 'seed': ep_seed, 'raw': raw,
                     'normalized': anchors.normalized_score(raw, task_id)})
    mean, stderr = mean_and_stderr([r['normalized'] for r in rows])
    raw_mean, _ = mean_and_stderr([r['raw'] for r in rows])
    return {'rows': rows, 'mean': mean, 'stderr': stderr, 'raw_mean': raw_mean}


def temporal_alignment_ablation(cfg: RunConfig, wm: WorldModel, target: TargetSequence,
                                b_values: Sequence[int], steps: int,
                                anchors: Optional[ScoreAnchors] = None, task_id: Optional[str] = None,
                                episodes: int = 0) -> List[Dict[str, object]]:
    """
    One agent per alignment window b, each trained from phase-shifted starts
    with identical seeds. Reports the mean imagined reward over the last
    quarter of training and, with anchors, the normalized env score.
    """
    rows = []
    for b in b_values:
        logger.processing(f"Temporal alignment ablation: b={b}")
        reward_fn = GenRLReward(wm, target, b, cfg.behavior.distance)
        trainer = BehaviorTrainer(
            cfg, wm, reward_fn, mode='shifted',
            initial_state_fn=lambda n, rng: phase_shifted_states(wm, target, n),
        )
        history = trainer.train(steps)
        tail = history[-max(1, len(history) // 4):] if history else []
        row = {'b': b, 'reward_mean': float(np.mean([r['reward_mean'] for r in tail])) if tail else float('nan'),
               'normalized': float('nan'), 'stderr': float('nan')}
        if anchors is not None and task_id is not None and episodes > 0:
            result = evaluate_policy(LatentAgent(wm, trainer.agent.actor), task_id, episodes, cfg.run.seed,
                                     anchors, mode=f"b={b}", episode_length=cfg.env.episode_length)
            row['normalized'], row['stderr'] = result['mean'], result['stderr']
        rows.append(row)
    return rows
