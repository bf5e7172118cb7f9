"""
Shared pytest fixtures: tiny configurations so unit tests finish in seconds.
"""

import os

import pytest

from genrl.config import RunConfig
from genrl.embedder import MockEmbedder
from genrl.envs import collect_dataset, parse_mix
from genrl.numerics import Rng
from genrl.worldmodel import WorldModel

TINY_MIX = "random:0.5,expert_reach_east:0.25,expert_run_fast:0.25"


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: long desk-scale runs (set GNRL_ACCEPTANCE=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv('GNRL_ACCEPTANCE', '') not in ('', '0'):
        return
    skip = pytest.mark.skip(reason="acceptance run; set GNRL_ACCEPTANCE=1")
    for item in items:
        if 'acceptance' in item.keywords:
            item.add_marker(skip)


def tiny_config(root: str = "") -> RunConfig:
    cfg = RunConfig()
    if root:
        cfg.run.run_dir = os.path.join(root, 'run')
        cfg.run.dataset = os.path.join(root, 'data', 'tiny.gnrl')
        cfg.run.anchors = os.path.join(root, 'anchors.json')
    cfg.env.episode_length = 40
    cfg.env.episodes = 12
    cfg.env.mix = TINY_MIX
    cfg.env.calibration_episodes = 4
    cfg.embedder.dim = 16
    cfg.embedder.hidden = 32
    cfg.embedder.canonical_windows = 4
    w = cfg.worldmodel
    w.latent_vars, w.latent_classes, w.hidden, w.mlp_hidden = 4, 4, 16, 16
    w.batch_size, w.seq_len, w.steps, w.log_every = 4, 10, 20, 10
    g = cfg.grounding
    g.batch_size, g.steps, g.log_every = 4, 10, 10
    b = cfg.behavior
    b.batch_size, b.steps, b.horizon, b.align_window, b.mlp_hidden = 4, 5, 6, 3, 16
    b.revconn_hidden, b.revconn_layers, b.revconn_steps, b.eval_episodes, b.log_every = 16, 3, 5, 2, 5
    return cfg.validate()


@pytest.fixture
def tiny_cfg(tmp_path):
    return tiny_config(str(tmp_path))


@pytest.fixture(scope='session')
def tiny_records():
    return collect_dataset(parse_mix(TINY_MIX), 12, 0, episode_length=40)


@pytest.fixture
def tiny_wm(tiny_cfg):
    return WorldModel(tiny_cfg.worldmodel, Rng(0))


@pytest.fixture
def tiny_embedder(tiny_cfg):
    return MockEmbedder(tiny_cfg.embedder, episode_length=tiny_cfg.env.episode_length)
