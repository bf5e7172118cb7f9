"""
Grounding networks: the connector (embedding -> k latent states) and the
aligner (denoiser pulling embeddings back onto the vision manifold).

Both are trained from vision-only windows of the unlabeled dataset. The
connector regresses onto stop-gradient world-model posteriors; the aligner
learns to undo noise added around vision embeddings.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import numerics as nx
from .config import RunConfig, WorldModelSection
from .embedder import MockEmbedder
from .envs import EpisodeRecord
from .errors import DatasetFormatError, StageOrderError
from .layers import GRUCell, Linear, MLP, Module, param_fingerprint
from .logger import logger
from .metrics import MetricsWriter
from .numerics import AdamState, Rng, Tape, Tensor
from .storage import Checkpoint
from .worldmodel import WorldModel, is_one_hot, sample_sequences


@dataclass
class TargetSequence:
    states: np.ndarray                      # (k, V, C) mode one-hots
    source: str = ""
    embedding: Optional[np.ndarray] = None  # the embedding the connector was fed
    logits: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.states.ndim != 3 or not is_one_hot(self.states):
            raise ValueError("TargetSequence states must be one-hot with shape (k, V, C)")

    @property
    def length(self) -> int:
        return self.states.shape[0]


class Connector(Module):
    """GRU fed the embedding at every step from a learned initial state; head emits prior logits."""

    def __init__(self, emb_dim: int, wm_cfg: WorldModelSection, window: int, rng: Rng):
        self.window = window
        self.latent_vars = wm_cfg.latent_vars
        self.latent_classes = wm_cfg.latent_classes
        self.gru = GRUCell(emb_dim, wm_cfg.hidden, rng.child(0))
        self.h_init = Tensor(np.zeros(wm_cfg.hidden), requires_grad=True)
        self.head = MLP([wm_cfg.hidden, wm_cfg.mlp_hidden, wm_cfg.latent_vars * wm_cfg.latent_classes], rng.child(1))

    def __call__(self, e, length: int) -> Tensor:
        """(B, d) embeddings -> (B, length, V, C) logits."""
        if length != self.window:
            raise ValueError(f"connector rollouts have fixed length {self.window}, got {length}")
        e = nx.as_tensor(e)
        batch = e.shape[0]
        h = self.h_init + Tensor(np.zeros((batch, self.h_init.shape[0])))
        logits = []
        for _ in range(length):
            h = self.gru(e, h)
            logits.append(self.head(h).reshape(batch, self.latent_vars, self.latent_classes))
        return nx.stack(logits, axis=1)


class Aligner(Module):
    """
    Bottleneck denoiser with a skip connection: e + dec(tanh(enc(e))),
    renormalised. The decoder starts at zero so the untrained aligner is the
    identity on the unit sphere.
    """

    def __init__(self, dim: int, rng: Rng):
        self.encoder = Linear(dim, dim // 2, rng.child(0))
        self.decoder = Linear(dim // 2, dim, rng.child(1), zero_init=True)

    def __call__(self, e) -> Tensor:
        e = nx.as_tensor(e)
        return nx.normalize(e + self.decoder(nx.tanh(self.encoder(e))))


class Grounding(Module):
    def __init__(self, cfg: RunConfig, rng: Rng):
        self.connector = Connector(cfg.embedder.dim, cfg.worldmodel, cfg.embedder.window, rng.child(0))
        self.aligner = Aligner(cfg.embedder.dim, rng.child(1))

    @property
    def window(self) -> int:
        return self.connector.window

    def embed_prompt(self, prompt: Union[str, np.ndarray], embedder: MockEmbedder,
                     use_aligner: Optional[bool] = None) -> np.ndarray:
        """Language ids go through the aligner by default; video windows do not."""
        if isinstance(prompt, str):
            e = embedder.embed_language(prompt).vector
            use_aligner = True if use_aligner is None else use_aligner
        else:
            e = embedder.embed_vision(prompt).vector
            use_aligner = False if use_aligner is None else use_aligner
        return aligner_apply(self.aligner, e) if use_aligner else e

    def targets(self, prompt: Union[str, np.ndarray], embedder: MockEmbedder,
                use_aligner: Optional[bool] = None) -> TargetSequence:
        return prompt_to_targets(prompt, self, embedder, use_aligner)


def aligner_apply(aligner: Aligner, e: np.ndarray) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("aligner_apply needs a nonzero embedding")
    with nx.no_tape():
        return aligner(e / norm).data


def noisy_embeddings(e_v: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    """
    Points around each e_v, back on the unit sphere. The noise scale is
    randomized per sample: each row draws its own scale from U(0, sigma) and
    multiplies isotropic Gaussian noise with it, so one batch mixes near and
    far corruptions. sigma = 0 returns e_v unchanged.
    """
    scales = rng.uniform(0.0, sigma, size=(e_v.shape[0], 1))
    noisy = e_v + scales * rng.normal(e_v.shape)
    return noisy / np.linalg.norm(noisy, axis=-1, keepdims=True)


def aligner_loss(aligner: Aligner, e_v: np.ndarray, sigma: float, rng: Rng) -> Tensor:
    """Squared distance between e_v and the aligned noisy copy, mean over the batch."""
    if sigma < 0:
        raise ValueError("aligner noise scale must be non-negative")
    e_v = np.asarray(e_v, dtype=np.float64)
    pred = aligner(noisy_embeddings(e_v, sigma, rng) if sigma > 0 else e_v)
    return ((pred - e_v) ** 2).sum(axis=-1).mean()


def connector_rollout(connector: Connector, e: np.ndarray, length: int, source: str = "") -> TargetSequence:
    e = np.asarray(e, dtype=np.float64)
    if np.linalg.norm(e) == 0.0:
        raise ValueError("connector_rollout needs a nonzero embedding")
    with nx.no_tape():
        logits = connector(e[None], length).data[0]
    return TargetSequence(nx.one_hot(logits.argmax(axis=-1), logits.shape[-1]), source, e.copy(), logits)


def connector_loss(connector: Connector, wm: Optional[WorldModel], windows: np.ndarray,
                   embeddings: np.ndarray) -> Tensor:
    """Sum over window steps of KL(connector prior || sg(posterior)), mean over the batch."""
    if wm is None:
        raise StageOrderError('wm')
    windows = np.asarray(windows, dtype=np.float64)
    with nx.no_tape():
        posterior = wm.encode(windows).data
    logits = connector(embeddings, windows.shape[1])
    kl = nx.kl_categorical(logits, Tensor(posterior)).sum(axis=-1)
    return kl.sum(axis=-1).mean()


def prompt_to_targets(prompt: Union[str, np.ndarray], grounding: Grounding, embedder: MockEmbedder,
                      use_aligner: Optional[bool] = None) -> TargetSequence:
    e = grounding.embed_prompt(prompt, embedder, use_aligner)
    source = prompt if isinstance(prompt, str) else "video"
    return connector_rollout(grounding.connector, e, grounding.window, source)


def sample_connector_states(grounding: Grounding, n: int, dim: int, rng: Rng) -> np.ndarray:
    """Aligned random unit embeddings -> sampled connector rollouts -> one random step each."""
    if n <= 0:
        return np.zeros((0, grounding.connector.latent_vars, grounding.connector.latent_classes))
    e = rng.normal((n, dim))
    e = e / np.linalg.norm(e, axis=-1, keepdims=True)
    with nx.no_tape():
        logits = grounding.connector(grounding.aligner(e), grounding.window)
        states = nx.categorical_sample_st(logits, rng).data
    steps = rng.integers(0, grounding.window, size=n)
    return states[np.arange(n), steps]


class GroundingTrainer:
    """Joint Adam on connector KL + aligner MSE, from dataset windows only."""

    columns = ['step', 'loss', 'conn_kl', 'align_mse']

    def __init__(self, cfg: RunConfig, records: Sequence[EpisodeRecord], wm: WorldModel,
                 embedder: MockEmbedder, grounding: Optional[Grounding] = None):
        self.cfg = cfg
        self.section = cfg.grounding
        self.records = list(records)
        self.window = cfg.embedder.window
        if not self.records or max(r.length for r in self.records) < self.window:
            raise DatasetFormatError(f"Grounding needs dataset windows of at least {self.window} steps")
        self.wm = wm
        self.embedder = embedder
        self.grounding = grounding or Grounding(cfg, Rng(cfg.run.seed, 20))
        wm_cfg = cfg.worldmodel
        self.adam = AdamState(self.section.lr, wm_cfg.beta1, wm_cfg.beta2, wm_cfg.eps)
        self.rng = Rng(cfg.run.seed, 21)
        self.step = 0

    def train_step(self) -> Dict[str, float]:
        s = self.section
        windows = sample_sequences(self.records, s.batch_size, self.window, self.rng).obs
        e_v = self.embedder.embed_vision_batch(windows)
        params = self.grounding.named_parameters()
        with Tape():
            conn = connector_loss(self.grounding.connector, self.wm, windows, e_v)
            align = aligner_loss(self.grounding.aligner, e_v, s.aligner_sigma, self.rng)
            total = conn + align
            nx.optimize(total, params, self.adam, self.cfg.worldmodel.grad_clip)
        self.step += 1
        return {'loss': total.item(), 'conn_kl': conn.item(), 'align_mse': align.item()}

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
                logger.progress('grounding', self.step, total, values)
        return history

    def to_checkpoint(self) -> Checkpoint:
        ckpt = Checkpoint('grounding', meta={
            'config_hash': self.cfg.config_hash(),
            'config': self.cfg.to_ini(),
            'step': self.step,
            'rng_state': self.rng.get_state(),
            'wm_fingerprint': param_fingerprint(self.wm),
            'language_calls': self.embedder.language_calls,
        })
        ckpt.put_group('grounding::', self.grounding.state_dict())
        ckpt.put_adam('grounding_adam', self.adam)
        return ckpt

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: RunConfig, records: Sequence[EpisodeRecord],
                        wm: WorldModel, embedder: MockEmbedder) -> "GroundingTrainer":
        trainer = cls(cfg, records, wm, embedder, load_grounding(ckpt, cfg))
        trainer.adam = ckpt.get_adam('grounding_adam')
        trainer.rng.set_state(ckpt.meta['rng_state'])
        trainer.step = int(ckpt.meta['step'])
        return trainer


def load_grounding(ckpt: Checkpoint, cfg: RunConfig) -> Grounding:
    grounding = Grounding(cfg, Rng(cfg.run.seed, 20))
    grounding.load_state_dict(ckpt.group('grounding::'))
    return grounding


def denoising_report(aligner: Aligner, e_v: np.ndarray, sigma: float, rng: Rng) -> Dict[str, float]:
    """Held-out cosine to e_v before and after the aligner, plus clean-input identity."""
    noisy = noisy_embeddings(e_v, sigma, rng)
    before = np.sum(noisy * e_v, axis=-1)
    after = np.sum(aligner_apply(aligner, noisy) * e_v, axis=-1)
    clean = np.sum(aligner_apply(aligner, e_v) * e_v, axis=-1)
    return {
        'cos_before': float(before.mean()),
        'cos_after': float(after.mean()),
        'improvement': float((after - before).mean()),
        'clean_cos': float(clean.mean()),
    }


def gap_bridging_report(aligner: Aligner, embedder: MockEmbedder) -> List[Dict[str, object]]:
    """cos(e_l, canonical e_v) with and without the aligner, per registered prompt."""
    rows = []
    for prompt in embedder.registry:
        e_l = embedder.embed_language(prompt).vector
        e_v = embedder.canonical_vision(prompt)
        rows.append({
            'prompt': prompt,
            'raw_cos': float(np.dot(e_l, e_v)),
            'aligned_cos': float(np.dot(aligner_apply(aligner, e_l), e_v)),
        })
    return rows
