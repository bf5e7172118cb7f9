"""
Discrete-latent world model.

    encoder      q(s_t | x_t)            MLP, not conditioned on h
    decoder      p(x_t | s_t)            MLP, unit-variance Gaussian mean
    sequence     h_t = GRU([s_{t-1}, a_{t-1}], h_{t-1})
    dynamics     p(s_t | h_t)            MLP head

Loss per step: KL(q(s_t|x_t) || p(s_t|h_t)) summed over latent variables, plus
0.5 * squared reconstruction error; averaged over batch and time.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .config import RunConfig, WorldModelSection
from .envs import ACT_DIM, OBS_DIM, EpisodeRecord
from .errors import DatasetFormatError
from .layers import GRUCell, Linear, MLP, Module
from .logger import logger
from .metrics import MetricsWriter
from .numerics import AdamState, Rng, Tape, Tensor
from .storage import Checkpoint

PolicyFn = Callable[[Tensor, Tensor], Tensor]


@dataclass
class TrajectoryBatch:
    obs: np.ndarray      # (B, T, 4)
    actions: np.ndarray  # (B, T, 2); actions[:, t] follows obs[:, t]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.obs.shape[0], self.obs.shape[1]


@dataclass
class LatentState:
    onehot: np.ndarray
    logits: Optional[np.ndarray] = None

    def __post_init__(self):
        if not is_one_hot(self.onehot):
            raise ValueError("LatentState requires exactly one 1.0 per latent variable")
        if self.logits is not None and not np.all(np.isfinite(self.logits)):
            raise ValueError("LatentState logits must be finite")


@dataclass
class Imagination:
    states: Tensor        # (B, H+1, V, C)
    hiddens: Tensor       # (B, H+1, Dh)
    actions: Tensor       # (B, H, 2)
    prior_logits: Tensor  # (B, H, V, C), the distribution each states[:, t+1] was drawn from

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]


def is_one_hot(s: np.ndarray) -> bool:
    s = np.asarray(s)
    return bool(np.all((s == 0.0) | (s == 1.0)) and np.all(s.sum(axis=-1) == 1.0))


class WorldModel(Module):
    def __init__(self, cfg: WorldModelSection, rng: Rng):
        self.latent_vars = cfg.latent_vars
        self.latent_classes = cfg.latent_classes
        self.hidden_size = cfg.hidden
        flat = cfg.latent_vars * cfg.latent_classes
        self.encoder = MLP([OBS_DIM, cfg.mlp_hidden, cfg.mlp_hidden, flat], rng.child(0))
        self.decoder = MLP([flat, cfg.mlp_hidden, cfg.mlp_hidden, OBS_DIM], rng.child(1))
        self.gru = GRUCell(flat + ACT_DIM, cfg.hidden, rng.child(2))
        self.dynamics = MLP([cfg.hidden, cfg.mlp_hidden, flat], rng.child(3))

    @property
    def g_phi(self) -> Linear:
        """First affine map of the decoder; the reward projection shares it."""
        return self.decoder.layers[0]

    @property
    def latent_dim(self) -> int:
        return self.latent_vars * self.latent_classes

    def _latent_shape(self, lead: Tuple[int, ...]) -> Tuple[int, ...]:
        return tuple(lead) + (self.latent_vars, self.latent_classes)

    def encode(self, x) -> Tensor:
        """Posterior logits (..., V, C) from observations alone."""
        x = nx.as_tensor(x)
        if not np.all(np.isfinite(x.data)):
            raise ValueError("encode received a non-finite observation")
        if x.shape[-1] != OBS_DIM:
            raise ValueError(f"observations must have {OBS_DIM} entries, got shape {x.shape}")
        return self.encoder(x).reshape(self._latent_shape(x.shape[:-1]))

    def decode_flat(self, flat) -> Tensor:
        return self.decoder(flat)

    def decode(self, s) -> Tensor:
        s = nx.as_tensor(s)
        if s.shape[-2:] != (self.latent_vars, self.latent_classes) or not is_one_hot(s.data):
            raise ValueError("decode needs valid one-hot latent states of shape (..., V, C)")
        return self.decode_flat(s.reshape(s.shape[:-2] + (self.latent_dim,)))

    def project(self, s) -> Tensor:
        """g_phi applied to flattened latent states."""
        s = nx.as_tensor(s)
        return self.g_phi(s.reshape(s.shape[:-2] + (self.latent_dim,)))

    def dynamics_step(self, s_prev, a_prev, h_prev) -> Tuple[Tensor, Tensor]:
        s_prev, a_prev, h_prev = nx.as_tensor(s_prev), nx.as_tensor(a_prev), nx.as_tensor(h_prev)
        if s_prev.shape[-2:] != (self.latent_vars, self.latent_classes):
            raise ValueError(f"latent state shape {s_prev.shape} does not end in ({self.latent_vars}, {self.latent_classes})")
        if a_prev.shape[-1] != ACT_DIM or h_prev.shape[-1] != self.hidden_size:
            raise ValueError("action or hidden state has the wrong width")
        lead = s_prev.shape[:-2]
        x = nx.concat([s_prev.reshape(lead + (self.latent_dim,)), a_prev], axis=-1)
        h = self.gru(x, h_prev)
        return h, self.dynamics(h).reshape(self._latent_shape(lead))

    def initial_hidden(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden_size)))

    def observe(self, obs, actions, rng: Optional[Rng], sample: bool = True) -> Dict[str, Tensor]:
        """
        Posterior unroll over (B, T) sequences starting from zero s, a and h.
        Returns post/prior logits (B, T, V, C), latent states (B, T, V, C) and
        hidden states (B, T, Dh), where hiddens[:, t] pairs with states[:, t].
        """
        obs, actions = nx.as_tensor(obs), nx.as_tensor(actions)
        batch, steps = obs.shape[0], obs.shape[1]
        post_logits = self.encode(obs)
        if sample:
            states = nx.categorical_sample_st(post_logits, rng)
        else:
            states = nx.categorical_mode_st(post_logits)

        s_prev = Tensor(np.zeros(self._latent_shape((batch,))))
        a_prev = Tensor(np.zeros((batch, ACT_DIM)))
        h = self.initial_hidden(batch)
        priors, hiddens = [], []
        for t in range(steps):
            h, prior = self.dynamics_step(s_prev, a_prev, h)
            priors.append(prior)
            hiddens.append(h)
            s_prev = states[:, t]
            a_prev = actions[:, t]
        return {
            'post_logits': post_logits,
            'prior_logits': nx.stack(priors, axis=1),
            'states': states,
            'hiddens': nx.stack(hiddens, axis=1),
        }

    def loss_components(self, obs, unroll: Dict[str, Tensor], free_nats: float = 0.0) -> Dict[str, Tensor]:
        obs = nx.as_tensor(obs)
        kl = nx.kl_categorical(unroll['post_logits'], unroll['prior_logits']).sum(axis=-1)
        if free_nats > 0.0:
            kl = nx.clip(kl, low=free_nats)
        dyn = kl.mean()
        states = unroll['states']
        recon_mean = self.decode_flat(states.reshape(states.shape[:-2] + (self.latent_dim,)))
        recon = (0.5 * ((recon_mean - obs) ** 2).sum(axis=-1)).mean()
        return {'loss': dyn + recon, 'dyn': dyn, 'recon': recon}

    def wm_loss(self, batch: TrajectoryBatch, rng: Rng, free_nats: float = 0.0) -> Dict[str, Tensor]:
        """Scalar loss plus its dyn / recon components."""
        if batch.obs.shape[1] < 2:
            raise ValueError("wm_loss needs sequences of length T >= 2")
        unroll = self.observe(batch.obs, batch.actions, rng)
        return self.loss_components(batch.obs, unroll, free_nats)

    def imagine(self, policy: PolicyFn, s0, h0, horizon: int, rng: Optional[Rng] = None,
                sample: bool = True, latent_override: Optional[Sequence[Tensor]] = None) -> Imagination:
        """
        Autoregressive rollout: a_t = policy(s_t, h_t), (h_{t+1}, prior) = dynamics_step,
        s_{t+1} drawn straight-through from the prior (or its mode when `sample` is
        False). `latent_override[t]` replaces the draw for s_{t+1}.
        """
        if horizon < 1:
            raise ValueError("imagination horizon must be >= 1")
        s, h = nx.as_tensor(s0), nx.as_tensor(h0)
        states, hiddens, actions, priors = [s], [h], [], []
        for t in range(horizon):
            a = policy(s, h)
            h, prior = self.dynamics_step(s, a, h)
            if latent_override is not None:
                s = nx.as_tensor(latent_override[t])
            elif sample:
                s = nx.categorical_sample_st(prior, rng)
            else:
                s = nx.categorical_mode_st(prior)
            states.append(s)
            hiddens.append(h)
            actions.append(a)
            priors.append(prior)
        return Imagination(nx.stack(states, axis=1), nx.stack(hiddens, axis=1),
                           nx.stack(actions, axis=1), nx.stack(priors, axis=1))

    def reconstruction_report(self, episodes: Sequence[EpisodeRecord]) -> Dict[str, float]:
        """Mode-latent reconstruction MSE against the per-dimension observation variance."""
        obs = np.concatenate([e.observations for e in episodes])
        with nx.no_tape():
            recon = self.decode_flat(
                nx.categorical_mode_st(self.encode(obs)).reshape((obs.shape[0], self.latent_dim))).data
        mse = float(np.mean((recon - obs) ** 2))
        var = float(np.mean(np.var(obs, axis=0)))
        return {'mse': mse, 'var': var, 'ratio': mse / var if var > 0 else float('inf')}


def sample_sequences(records: Sequence[EpisodeRecord], batch: int, length: int, rng: Rng) -> TrajectoryBatch:
    """Uniformly sampled (episode, start) subsequences of `length` steps."""
    eligible = [r for r in records if r.length >= length]
    if not eligible:
        raise DatasetFormatError(f"No episode in the dataset has at least {length} steps")
    picks = rng.integers(0, len(eligible), size=batch)
    obs, acts = [], []
    for i in picks:
        r = eligible[int(i)]
        start = int(rng.integers(0, r.length - length + 1))
        obs.append(r.observations[start:start + length])
        acts.append(r.actions[start:start + length])
    return TrajectoryBatch(np.stack(obs), np.stack(acts))


class WorldModelTrainer:
    """Adam on wm_loss over sampled subsequences; resumable from a checkpoint."""

    columns = ['step', 'loss', 'dyn', 'recon']

    def __init__(self, cfg: RunConfig, records: Sequence[EpisodeRecord], model: Optional[WorldModel] = None):
        self.cfg = cfg
        self.section = cfg.worldmodel
        self.records = list(records)
        if not self.records:
            raise DatasetFormatError("World-model training needs a non-empty dataset")
        if max(r.length for r in self.records) < self.section.seq_len:
            raise DatasetFormatError(f"Dataset episodes are shorter than seq_len={self.section.seq_len}")
        seed = cfg.run.seed
        self.model = model or WorldModel(self.section, Rng(seed, 10))
        s = self.section
        self.adam = AdamState(s.lr, s.beta1, s.beta2, s.eps)
        self.rng = Rng(seed, 11)
        self.step = 0

    def train_step(self) -> Dict[str, float]:
        s = self.section
        batch = sample_sequences(self.records, s.batch_size, s.seq_len, self.rng)
        params = self.model.named_parameters()
        with Tape():
            parts = self.model.wm_loss(batch, self.rng, s.kl_free_nats)
            nx.optimize(parts['loss'], params, self.adam, s.grad_clip)
        self.step += 1
        return {k: v.item() for k, v in parts.items()}

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
                logger.progress('wm', self.step, total, values)
        return history

    def to_checkpoint(self) -> Checkpoint:
        ckpt = Checkpoint('wm', meta={
            'config_hash': self.cfg.config_hash(),
            'config': self.cfg.to_ini(),
            'step': self.step,
            'rng_state': self.rng.get_state(),
        })
        ckpt.put_group('wm::', self.model.state_dict())
        ckpt.put_adam('wm_adam', self.adam)
        return ckpt

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: RunConfig,
                        records: Sequence[EpisodeRecord]) -> "WorldModelTrainer":
        trainer = cls(cfg, records, load_world_model(ckpt, cfg))
        trainer.adam = ckpt.get_adam('wm_adam')
        trainer.rng.set_state(ckpt.meta['rng_state'])
        trainer.step = int(ckpt.meta['step'])
        return trainer


def load_world_model(ckpt: Checkpoint, cfg: RunConfig) -> WorldModel:
    model = WorldModel(cfg.worldmodel, Rng(cfg.run.seed, 10))
    model.load_state_dict(ckpt.group('wm::'))
    return model
