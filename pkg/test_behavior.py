"""
Tests for temporal alignment, GenRL and WM-CLIP rewards, lambda-returns, the
imagination actor-critic and policy evaluation.
"""

import numpy as np
import pytest

from genrl import numerics as nx
from genrl.behavior import (ActorCritic, BehaviorTrainer, GenRLReward, InitialStates, LatentAgent,
                            ReversedConnector, RevConnTrainer, actor_objective, best_alignment_offset,
                            critic_loss, evaluate_policy, features, genrl_reward, lambda_returns, load_agent,
                            load_revconn, phase_shifted_states, sample_initial_states,
                            temporal_alignment_ablation, wmclip_reward)
from genrl.envs import EXPERTS, TASKS, ScoreAnchors, calibrate_anchors, random_policy
from genrl.errors import CalibrationMissingError, StageOrderError
from genrl.grounding import Grounding, TargetSequence
from genrl.layers import param_fingerprint
from genrl.numerics import Rng, Tape, Tensor
from genrl.storage import io_stats, reset_io_stats


def _random_states(shape, classes, seed):
    return nx.one_hot(np.random.default_rng(seed).integers(0, classes, size=shape), classes)


def _target(k=3, seed=0):
    return TargetSequence(_random_states((k, 4), 4, seed), 'test')


def _uniform_starts(wm, n, seed=0):
    return InitialStates(_random_states((n, wm.latent_vars), wm.latent_classes, seed), wm.initial_hidden(n).data)


# ============================================================================
# temporal alignment
# ============================================================================

def test_best_offset_finds_the_embedded_target():
    basis = np.eye(8)
    target = basis[[0, 1, 2]]
    imagined = basis[[5, 6, 7, 0, 1, 2, 5, 6]]
    assert best_alignment_offset(imagined, target, 3) == 3


def test_full_window_admits_only_offset_zero():
    imagined = np.random.default_rng(0).normal(size=(6, 5))
    assert best_alignment_offset(imagined, imagined[:2], 6) == 0


def test_ties_resolve_to_the_smallest_offset():
    imagined = np.ones((6, 4))
    assert best_alignment_offset(imagined, np.ones((2, 4)), 2) == 0


def test_alignment_window_must_fit_the_horizon():
    with pytest.raises(ValueError):
        best_alignment_offset(np.ones((4, 3)), np.ones((2, 3)), 5)
    with pytest.raises(ValueError):
        best_alignment_offset(np.ones((4, 3)), np.ones((2, 3)), 0)


def _brute_force_reward(proj, target_proj, b):
    def cos(u, v):
        return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))

    horizon, k = proj.shape[0], target_proj.shape[0]
    scores = [sum(cos(proj[d + i], target_proj[min(i, k - 1)]) for i in range(b)) for d in range(horizon - b + 1)]
    best = max(scores)
    offset = next(d for d, s in enumerate(scores) if s == best)
    out = []
    for t in range(horizon):
        j = 0 if t < offset else min(t - offset, k - 1)
        out.append(cos(proj[t], target_proj[j]))
    return np.array(out)


def test_genrl_reward_matches_brute_force(tiny_wm):
    target = _target(k=3, seed=1)
    states = _random_states((5, 6, 4), 4, 2)
    rewards = genrl_reward(tiny_wm, states, target, 3).data
    proj = tiny_wm.project(states).data
    target_proj = tiny_wm.project(target.states).data
    for i in range(5):
        assert np.allclose(rewards[i], _brute_force_reward(proj[i], target_proj, 3), atol=1e-10)


def test_genrl_reward_is_a_bounded_cosine(tiny_wm):
    rewards = genrl_reward(tiny_wm, _random_states((8, 6, 4), 4, 3), _target(k=8, seed=4), 6).data
    assert rewards.shape == (8, 6)
    assert np.all(rewards >= -1.0) and np.all(rewards <= 1.0)


def test_genrl_reward_accepts_a_single_sequence(tiny_wm):
    states = _random_states((6, 4), 4, 5)
    single = genrl_reward(tiny_wm, states, _target(), 2).data
    batched = genrl_reward(tiny_wm, states[None], _target(), 2).data[0]
    assert single.shape == (6,)
    assert np.allclose(single, batched)


def test_target_on_trajectory_scores_one(tiny_wm):
    target = _target(k=3, seed=6)
    states = np.concatenate([target.states, np.repeat(target.states[-1:], 3, axis=0)])
    assert np.allclose(genrl_reward(tiny_wm, states, target, 3).data, 1.0)


def test_genrl_reward_is_invariant_to_projection_scale(tiny_wm):
    states = _random_states((4, 6, 4), 4, 7)
    target = _target(seed=8)
    before = genrl_reward(tiny_wm, states, target, 3).data
    tiny_wm.g_phi.weight.data = tiny_wm.g_phi.weight.data * 3.0
    tiny_wm.g_phi.bias.data = tiny_wm.g_phi.bias.data * 3.0
    assert np.allclose(genrl_reward(tiny_wm, states, target, 3).data, before, atol=1e-12)


def test_genrl_reward_needs_a_world_model():
    with pytest.raises(ValueError):
        genrl_reward(None, _random_states((6, 4), 4, 0), _target(), 2)


def test_kl_distance_scores_log_prior_of_the_target(tiny_wm):
    target = _target(k=1, seed=9)
    states = _random_states((2, 4, 4), 4, 10)
    prior = np.random.default_rng(11).normal(size=(2, 4, 4, 4))
    rewards = genrl_reward(tiny_wm, states, target, 1, distance='kl', prior_logits=prior).data
    log_q = prior - np.log(np.exp(prior).sum(-1, keepdims=True))
    expected = (log_q * target.states[0]).sum(axis=(-1, -2))
    assert np.allclose(rewards, expected)
    assert np.all(rewards <= 0.0)
    with pytest.raises(ValueError):
        genrl_reward(tiny_wm, states, target, 1, distance='kl')


# ============================================================================
# lambda returns
# ============================================================================

def _returns_oracle(r, v, gamma, lam):
    horizon = len(r)
    out = np.zeros(horizon)
    nxt = v[horizon]
    for t in reversed(range(horizon)):
        nxt = r[t] + gamma * ((1 - lam) * v[t + 1] + lam * nxt)
        out[t] = nxt
    return out


def test_lambda_returns_match_oracle():
    gen = np.random.default_rng(0)
    r, v = gen.normal(size=7), gen.normal(size=8)
    assert np.allclose(lambda_returns(r, v, 0.99, 0.95).data, _returns_oracle(r, v, 0.99, 0.95), atol=1e-12)


def test_lambda_zero_is_one_step_bootstrap():
    gen = np.random.default_rng(1)
    r, v = gen.normal(size=(3, 5)), gen.normal(size=(3, 6))
    assert np.allclose(lambda_returns(r, v, 0.9, 0.0).data, r + 0.9 * v[:, 1:])


def test_lambda_one_is_discounted_monte_carlo():
    gen = np.random.default_rng(2)
    r, v = gen.normal(size=4), gen.normal(size=5)
    expected = [sum(0.9 ** i * r[t + i] for i in range(4 - t)) + 0.9 ** (4 - t) * v[4] for t in range(4)]
    assert np.allclose(lambda_returns(r, v, 0.9, 1.0).data, expected)


def test_lambda_returns_are_monotone_in_rewards():
    gen = np.random.default_rng(3)
    r, v = gen.normal(size=6), gen.normal(size=7)
    base = lambda_returns(r, v, 0.99, 0.95).data
    higher = lambda_returns(r + np.abs(gen.normal(size=6)), v, 0.99, 0.95).data
    assert np.all(higher >= base)


def test_lambda_returns_need_one_extra_value():
    with pytest.raises(ValueError):
        lambda_returns(np.zeros(4), np.zeros(4), 0.99, 0.95)


# ============================================================================
# actor-critic
# ============================================================================

def test_features_concatenate_state_and_hidden(tiny_wm):
    f = features(_random_states((3, 4), 4, 0), np.ones((3, 16)))
    assert f.shape == (3, 32)


def test_zero_reward_gives_zero_critic_loss(tiny_cfg, tiny_wm):
    agent = ActorCritic(tiny_wm, tiny_cfg.behavior, Rng(0))
    feats = np.random.default_rng(0).normal(size=(4, 7, 32))
    loss = critic_loss(agent, feats, np.zeros((4, 6)), tiny_cfg.behavior)
    assert loss.item() == 0.0


def test_critic_gradient_matches_finite_differences(tiny_cfg, tiny_wm):
    agent = ActorCritic(tiny_wm, tiny_cfg.behavior, Rng(5))
    agent.critic.net.layers[-1].weight.data = Rng(6).normal((16, 1), 0.3)
    gen = np.random.default_rng(7)
    feats = gen.normal(size=(3, 7, 32))
    rewards = gen.normal(size=(3, 6))
    params = list(agent.critic.named_parameters().values())
    err = nx.finite_diff_check(lambda: critic_loss(agent, feats, rewards, tiny_cfg.behavior), params)
    assert err < 1e-6

    targets = list(agent.target_critic.named_parameters().values())
    with Tape():
        grads = nx.grad(critic_loss(agent, feats, rewards, tiny_cfg.behavior), targets)
    assert all(not np.any(g) for g in grads)


def test_actor_gradient_matches_finite_differences(tiny_cfg, tiny_wm):
    section = tiny_cfg.behavior
    section.horizon = 4
    agent = ActorCritic(tiny_wm, section, Rng(1))
    agent.critic.net.layers[-1].weight.data = Rng(2).normal((16, 1), 0.3)
    starts = _uniform_starts(tiny_wm, 2, seed=3)
    reward_fn = GenRLReward(tiny_wm, _target(seed=4), 2, distance='kl')
    params = list(agent.actor.named_parameters().values())

    def loss():
        return actor_objective(agent, tiny_wm, starts.states, starts.hiddens, reward_fn, section, Rng(5))[0]

    with nx.frozen_sampling():
        assert nx.finite_diff_check(loss, params, max_entries=5) < 1e-4


def test_entropy_bonus_widens_the_policy(tiny_cfg, tiny_wm):
    section = tiny_cfg.behavior
    section.entropy_coef = 1.0
    section.actor_lr = 1e-2
    zero_reward = lambda imag: Tensor(np.zeros(imag.actions.shape[:2]))
    trainer = BehaviorTrainer(tiny_cfg, tiny_wm, zero_reward,
                              initial_state_fn=lambda n, rng: _uniform_starts(tiny_wm, n))
    starts = _uniform_starts(tiny_wm, tiny_cfg.behavior.batch_size)
    probe = features(starts.states, starts.hiddens)
    before = trainer.agent.actor.std(probe).mean()
    trainer.train(5)
    assert trainer.agent.actor.std(probe).mean() > before


def test_training_history_is_finite(tiny_cfg, tiny_wm, tiny_records):
    trainer = BehaviorTrainer(tiny_cfg, tiny_wm, GenRLReward(tiny_wm, _target(), 3), records=tiny_records)
    history = trainer.train(2)
    assert [row['step'] for row in history] == [1, 2]
    for row in history:
        assert all(np.isfinite(row[c]) for c in BehaviorTrainer.columns)
        assert -1.0 <= row['reward_mean'] <= 1.0


def test_agent_checkpoint_restores_training_state(tiny_cfg, tiny_wm, tiny_records):
    reward_fn = GenRLReward(tiny_wm, _target(), 3)
    trainer = BehaviorTrainer(tiny_cfg, tiny_wm, reward_fn, records=tiny_records)
    trainer.train(1)
    ckpt = trainer.to_checkpoint(prompt='go_right')
    assert ckpt.meta['prompt'] == 'go_right'
    assert np.array_equal(ckpt.group('target::')['states'], reward_fn.target.states)
    assert param_fingerprint(load_agent(ckpt, tiny_cfg, tiny_wm)) == param_fingerprint(trainer.agent)

    restored = BehaviorTrainer(tiny_cfg, tiny_wm, reward_fn, records=tiny_records).restore(ckpt)
    trainer.train(1)
    restored.train(1)
    assert param_fingerprint(restored.agent) == param_fingerprint(trainer.agent)


# ============================================================================
# initial states
# ============================================================================

def test_offline_mode_needs_the_dataset(tiny_cfg, tiny_wm):
    with pytest.raises(StageOrderError) as exc:
        BehaviorTrainer(tiny_cfg, tiny_wm, GenRLReward(tiny_wm, _target(), 3), mode='offline')
    assert exc.value.missing_stage == 'dataset'
    with pytest.raises(StageOrderError):
        sample_initial_states('offline', 4, tiny_wm, tiny_cfg, Rng(0))


def test_offline_starts_come_from_posterior_unrolls(tiny_cfg, tiny_wm, tiny_records):
    init = sample_initial_states('offline', 4, tiny_wm, tiny_cfg, Rng(0), records=tiny_records)
    assert init.states.shape == (4, 4, 4)
    assert init.hiddens.shape == (4, 16)
    assert init.warmup_steps == 0


def test_datafree_starts_warm_up_without_the_dataset(tiny_cfg, tiny_wm):
    grounding = Grounding(tiny_cfg, Rng(0))
    agent = ActorCritic(tiny_wm, tiny_cfg.behavior, Rng(1))
    reset_io_stats()
    init = sample_initial_states('datafree', 6, tiny_wm, tiny_cfg, Rng(2), grounding=grounding, agent=agent)
    assert init.warmup_steps == 5
    assert init.states.shape == (6, 4, 4)
    assert io_stats['dataset_reads'] == 0


def test_datafree_starts_without_warmup_have_zero_hiddens(tiny_cfg, tiny_wm):
    tiny_cfg.behavior.warmup_steps = 0
    grounding = Grounding(tiny_cfg, Rng(0))
    agent = ActorCritic(tiny_wm, tiny_cfg.behavior, Rng(1))
    init = sample_initial_states('datafree', 6, tiny_wm, tiny_cfg, Rng(2), grounding=grounding, agent=agent)
    assert init.warmup_steps == 0
    assert np.array_equal(init.hiddens, np.zeros((6, 16)))


def test_datafree_training_reads_no_data(tiny_cfg, tiny_wm):
    grounding = Grounding(tiny_cfg, Rng(0))
    reward_fn = GenRLReward(tiny_wm, _target(), 3)
    reset_io_stats()
    trainer = BehaviorTrainer(tiny_cfg, tiny_wm, reward_fn, grounding=grounding, mode='datafree')
    trainer.train(2)
    assert io_stats['dataset_reads'] == 0


def test_datafree_mode_needs_grounding(tiny_cfg, tiny_wm):
    with pytest.raises(StageOrderError):
        sample_initial_states('datafree', 4, tiny_wm, tiny_cfg, Rng(0))


def test_phase_shifted_starts_sit_on_the_last_target_state(tiny_wm):
    target = _target(k=4, seed=3)
    init = phase_shifted_states(tiny_wm, target, 5)
    assert np.array_equal(init.states, np.repeat(target.states[-1:], 5, axis=0))
    assert np.array_equal(init.hiddens, np.zeros((5, 16)))


# ============================================================================
# WM-CLIP baseline
# ============================================================================

def test_wmclip_reward_needs_a_trained_reversed_connector(tiny_wm):
    states, hiddens = _random_states((2, 4), 4, 0), np.zeros((2, 16))
    with pytest.raises(StageOrderError):
        wmclip_reward(None, states, hiddens, np.ones(16))
    revconn = ReversedConnector(32, 16, 16, 3, Rng(0))
    with pytest.raises(StageOrderError) as exc:
        wmclip_reward(revconn, states, hiddens, np.ones(16))
    assert exc.value.missing_stage == 'revconn'


def test_reversed_connector_training(tiny_cfg, tiny_records, tiny_wm, tiny_embedder):
    trainer = RevConnTrainer(tiny_cfg, tiny_records, tiny_wm, tiny_embedder)
    history = trainer.train(2)
    assert np.isfinite(history[-1]['loss'])
    assert trainer.revconn.trained
    restored = load_revconn(trainer.to_checkpoint(), tiny_cfg, tiny_wm)
    assert restored.trained
    rewards = wmclip_reward(restored, _random_states((3, 4), 4, 1), np.zeros((3, 16)),
                            tiny_embedder.embed_language('go_right').vector).data
    assert rewards.shape == (3,)
    assert np.all(np.abs(rewards) <= 1.0)


# ============================================================================
# evaluation
# ============================================================================

def test_evaluate_policy_rows_and_summary():
    anchors = ScoreAnchors({'reach_east': (0.0, 1.0)})
    result = evaluate_policy(EXPERTS['expert_reach_east'], 'reach_east', 3, 0, anchors, 'expert', 40)
    assert len(result['rows']) == 3
    assert len({r['seed'] for r in result['rows']}) == 3
    assert result['mean'] == pytest.approx(result['raw_mean'])
    assert result['stderr'] >= 0.0


def test_evaluate_policy_needs_anchors():
    with pytest.raises(CalibrationMissingError):
        evaluate_policy(EXPERTS['expert_reach_east'], 'reach_east', 1, 0, ScoreAnchors(), episode_length=10)


@pytest.mark.parametrize('task_id', ['reach_east', 'run_fast', 'reach_west', 'reach_center', 'stand_still'])
def test_expert_scores_near_one_and_random_near_zero(task_id):
    anchors = calibrate_anchors(episodes=50, seed=0, tasks=[task_id])
    expert = evaluate_policy(EXPERTS[TASKS[task_id].expert], task_id, 40, 0, anchors, 'expert')
    rnd = evaluate_policy(random_policy(Rng(0, 77)), task_id, 40, 0, anchors, 'random')
    assert expert['mean'] >= 0.95
    assert abs(rnd['mean']) < 0.25
    assert expert['mean'] - rnd['mean'] > 0.7


def test_latent_agent_acts_in_range(tiny_cfg, tiny_wm):
    agent = LatentAgent(tiny_wm, ActorCritic(tiny_wm, tiny_cfg.behavior, Rng(0)).actor)
    action = agent(np.array([0.1, -0.2, 0.0, 0.0]))
    assert action.shape == (2,)
    assert np.all(np.abs(action) <= 1.0)
    agent.reset()
    assert np.array_equal(agent.h, np.zeros((1, 16)))


def test_temporal_alignment_ablation_rows(tiny_cfg, tiny_wm):
    rows = temporal_alignment_ablation(tiny_cfg, tiny_wm, _target(k=4), [1, 3], steps=2)
    assert [row['b'] for row in rows] == [1, 3]
    assert all(np.isfinite(row['reward_mean']) for row in rows)
    assert all(np.isnan(row['normalized']) for row in rows)
