"""
Tests for the autodiff tape, categorical machinery, RNG streams and Adam.
"""

import math
import threading

import numpy as np
import pytest

from genrl import numerics as nx
from genrl.errors import NumericsError
from genrl.layers import GRUCell, MLP, Linear, param_fingerprint
from genrl.numerics import AdamState, Rng, Tape, Tensor


def test_kl_categorical_matches_direct_sum():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(1000, 8)) * 3
    q = rng.normal(size=(1000, 8)) * 3
    pp = np.exp(p) / np.exp(p).sum(-1, keepdims=True)
    qq = np.exp(q) / np.exp(q).sum(-1, keepdims=True)
    direct = (pp * (np.log(pp) - np.log(qq))).sum(-1)
    assert np.allclose(nx.kl_categorical(p, q).data, direct, atol=1e-12, rtol=0)
    assert np.all(nx.kl_categorical(p, q).data >= -1e-15)


def test_kl_of_identical_logits_is_zero():
    logits = np.random.default_rng(1).normal(size=(5, 8, 8))
    assert np.allclose(nx.kl_categorical(logits, logits).data, 0.0, atol=1e-15)


def test_kl_shape_mismatch_raises():
    with pytest.raises(ValueError):
        nx.kl_categorical(np.zeros((2, 8)), np.zeros((2, 4)))


def test_straight_through_forward_is_exact_one_hot():
    logits = np.random.default_rng(2).normal(size=(1000, 8)) * 2
    s = nx.categorical_sample_st(logits, Rng(0)).data
    assert set(np.unique(s)) <= {0.0, 1.0}
    assert np.all(s.sum(-1) == 1.0)
    m = nx.categorical_mode_st(logits).data
    assert np.array_equal(m.argmax(-1), logits.argmax(-1))


def test_straight_through_backward_equals_softmax_path():
    gen = np.random.default_rng(3)
    logits = Tensor(gen.normal(size=(1000, 8)), requires_grad=True)
    upstream = gen.normal(size=(1000, 8))
    with Tape():
        loss = (nx.categorical_sample_st(logits, Rng(1)) * upstream).sum()
        (g_st,) = nx.grad(loss, [logits])
    with Tape():
        loss = (nx.softmax(logits) * upstream).sum()
        (g_soft,) = nx.grad(loss, [logits])
    assert np.allclose(g_st, g_soft, atol=1e-12, rtol=0)


def test_sampling_rejects_non_finite_logits():
    with pytest.raises(ValueError):
        nx.categorical_sample_st(np.array([[0.0, np.nan]]), Rng(0))


def test_frozen_sampling_returns_constants():
    logits = Tensor(np.zeros((3, 4)), requires_grad=True)
    with Tape() as tape:
        with nx.frozen_sampling():
            s = nx.categorical_sample_st(logits, Rng(0))
        assert not s.requires_grad
        assert len(tape) == 0
        s2 = nx.categorical_sample_st(logits, Rng(0))
        assert s2.requires_grad
    assert np.array_equal(s.data, s2.data)


def test_sample_is_deterministic_per_seed():
    logits = np.random.default_rng(4).normal(size=(50, 8))
    a = nx.categorical_sample_st(logits, Rng(9, 1)).data
    b = nx.categorical_sample_st(logits, Rng(9, 1)).data
    c = nx.categorical_sample_st(logits, Rng(9, 2)).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_mlp_gradient_matches_finite_differences():
    rng = Rng(0)
    mlp = MLP([3, 5, 2], rng)
    x = rng.child(9).normal((4, 3))
    y = rng.child(10).normal((4, 2))
    params = list(mlp.named_parameters().values())
    err = nx.finite_diff_check(lambda: ((mlp(x) - y) ** 2).sum(), params)
    assert err < 1e-6


def test_composite_ops_match_finite_differences():
    gen = np.random.default_rng(5)
    a = Tensor(gen.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(gen.uniform(0.5, 2.0, size=(4,)), requires_grad=True)

    def f():
        u = nx.concat([nx.sigmoid(a), nx.silu(a)[:, 1:]], axis=-1)
        v = nx.log(b) * nx.sqrt(b)
        picked = a[np.array([0, 2, 2])]
        sims = nx.cosine_similarity(a + 0.1, b)
        return (u.sum(axis=0)[:4] * v).sum() + nx.stack([picked, picked], axis=1).mean() + sims.sum() \
            + nx.normalize(a).sum() + nx.log_softmax(a).sum() / b.sum()

    assert nx.finite_diff_check(f, [a, b]) < 1e-6


def test_gru_cell_matches_finite_differences():
    rng = Rng(1)
    cell = GRUCell(3, 4, rng)
    x = rng.child(5).normal((2, 3))
    h = rng.child(6).normal((2, 4))
    params = list(cell.named_parameters().values())
    assert nx.finite_diff_check(lambda: cell(x, cell(x, h)).sum(), params) < 1e-6


def test_gru_zero_fixed_point():
    cell = GRUCell(3, 4, Rng(2))
    out = cell(np.zeros((1, 3)), np.zeros((1, 4)))
    assert np.array_equal(out.data, np.zeros((1, 4)))


def test_gru_rejects_bad_shapes():
    cell = GRUCell(3, 4, Rng(2))
    with pytest.raises(ValueError):
        cell(np.zeros((1, 5)), np.zeros((1, 4)))
    with pytest.raises(ValueError):
        cell(np.zeros((1, 3)), np.zeros((2, 4)))


def test_grad_gives_zeros_off_the_ancestry():
    used = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    with Tape():
        g_used, g_unused = nx.grad((used * 2.0).sum(), [used, unused])
    assert np.array_equal(g_used, np.full(3, 2.0))
    assert np.array_equal(g_unused, np.zeros(2))


def test_grad_requires_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        with pytest.raises(ValueError):
            nx.grad(x * 2.0, [x])


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with nx.no_tape():
            y = (x * 3.0).sum()
        assert len(tape) == 0
    assert y.is_leaf


def test_clip_blocks_gradient_outside_bounds():
    x = Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True)
    with Tape():
        (g,) = nx.grad(nx.clip(x, -1.0, 1.0).sum(), [x])
    assert np.array_equal(g, np.array([0.0, 1.0, 0.0]))


def test_cosine_similarity_bounds_and_zero_norm():
    gen = np.random.default_rng(6)
    u, v = gen.normal(size=(100, 5)), gen.normal(size=(100, 5))
    c = nx.cosine_similarity(u, v).data
    assert np.all(np.abs(c) <= 1.0)
    assert np.allclose(nx.cosine_similarity(u, u).data, 1.0)
    with pytest.raises(ValueError):
        nx.cosine_similarity(np.zeros(5), np.ones(5))
    with pytest.raises(ValueError):
        nx.normalize(np.zeros(5))


def test_matmul_rejects_unsupported_shapes():
    with pytest.raises(ValueError):
        nx.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_rng_state_round_trip():
    rng = Rng(3, 4)
    rng.normal(10)
    state = rng.get_state()
    first = rng.normal(5)
    rng.set_state(state)
    assert np.array_equal(rng.normal(5), first)


def test_rng_children_are_independent_and_reproducible():
    assert np.array_equal(Rng(1).child(2).uniform(size=4), Rng(1, 2).uniform(size=4))
    assert not np.array_equal(Rng(1, 2).uniform(size=4), Rng(1, 3).uniform(size=4))


def test_adam_moves_against_the_gradient():
    w = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    with Tape():
        nx.optimize((w * w).sum(), {'w': w}, state)
    assert np.allclose(w.data, [0.9, -0.9])
    assert state.step == 1


def test_adam_global_norm_clip_reports_pre_clip_norm():
    w = Tensor(np.zeros(2), requires_grad=True)
    state = AdamState(lr=0.1)
    _, _, norm = nx.adam_step({'w': w}, {'w': np.array([3.0, 4.0])}, state, clip_norm=1.0)
    assert norm == pytest.approx(5.0)
    assert np.allclose(state.m['w'], 0.1 * np.array([0.6, 0.8]))


def test_adam_rejects_nan_gradients():
    w = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(NumericsError, match="'w'"):
        nx.adam_step({'w': w}, {'w': np.array([np.nan, 0.0])}, AdamState())


def test_linear_zero_init_and_fingerprint():
    a = Linear(3, 2, Rng(0), zero_init=True)
    assert np.array_equal(a.weight.data, np.zeros((3, 2)))
    b = Linear(3, 2, Rng(0))
    c = Linear(3, 2, Rng(0))
    assert param_fingerprint(b) == param_fingerprint(c)
    c.weight.data = c.weight.data + 1e-9
    assert param_fingerprint(b) != param_fingerprint(c)


def test_state_dict_round_trip():
    mlp = MLP([2, 3, 1], Rng(0))
    other = MLP([2, 3, 1], Rng(1))
    other.load_state_dict(mlp.state_dict())
    assert param_fingerprint(mlp) == param_fingerprint(other)
    with pytest.raises(ValueError):
        MLP([2, 4, 1], Rng(0)).load_state_dict(mlp.state_dict())


# ============================================================================
# closed forms and scalar references
# ============================================================================

def test_kl_and_cosine_closed_forms():
    kl = nx.kl_categorical(np.array([0.0, -1000.0]), np.array([0.0, 0.0])).data
    assert float(kl) == pytest.approx(math.log(2.0), abs=1e-12)
    cos = nx.cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 1.0])).data
    assert float(cos) == pytest.approx(math.sqrt(2.0) / 2.0, abs=1e-12)


def test_confident_logits_sample_their_argmax():
    logits = np.tile([20.0, 0.0, 0.0, 0.0], (10_000, 1))
    picks = nx.categorical_sample_st(logits, Rng(11)).data.argmax(-1)
    assert np.mean(picks == 0) > 0.999


def test_uniform_logits_sample_uniform_frequencies():
    picks = nx.categorical_sample_st(np.zeros((100_000, 4)), Rng(12)).data.argmax(-1)
    freqs = np.bincount(picks, minlength=4) / picks.size
    assert np.all(np.abs(freqs - 0.25) <= 0.02)


def test_adam_zero_gradient_leaves_params_unchanged():
    w = Tensor(np.array([0.5, -2.0, 3.0]), requires_grad=True)
    before = w.data.copy()
    state = AdamState(lr=0.1)
    nx.adam_step({'w': w}, {'w': np.zeros(3)}, state)
    assert np.array_equal(w.data, before)
    assert state.step == 1


def test_adam_two_steps_match_scalar_reference():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    w = Tensor(np.array([0.5]), requires_grad=True)
    state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)

    ref, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate((0.3, -0.7), start=1):
        nx.adam_step({'w': w}, {'w': np.array([g])}, state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert w.data[0] == pytest.approx(ref, abs=1e-12)


def _scalar_gru(x, h, wx, wh, wc, b):
    sig = lambda a: 1.0 / (1.0 + math.exp(-a))
    r = sig(x * wx[0] + b[0] + h * wh[0])
    z = sig(x * wx[1] + b[1] + h * wh[1])
    n = math.tanh(x * wx[2] + b[2] + (r * h) * wc)
    return (1.0 - z) * h + z * n


def test_gru_cell_matches_scalar_reference():
    cell = GRUCell(1, 1, Rng(0))
    wx, wh, wc, b = [0.3, -0.2, 0.5], [0.4, -0.6], 0.7, [0.1, -0.1, 0.05]
    cell.wx.data = np.array([wx])
    cell.wh_gates.data = np.array([wh])
    cell.wh_cand.data = np.array([[wc]])
    cell.bias.data = np.array(b)
    for x, h in ((0.8, -0.3), (-1.5, 0.9), (0.0, 0.0)):
        out = cell(np.array([[x]]), np.array([[h]])).data
        assert out[0, 0] == pytest.approx(_scalar_gru(x, h, wx, wh, wc, b), abs=1e-12)


def test_saturated_update_gate_returns_the_candidate():
    cell = GRUCell(3, 4, Rng(3))
    bias = np.zeros(12)
    bias[4:8] = 50.0
    cell.bias.data = bias
    gen = np.random.default_rng(7)
    x, h = gen.normal(size=(5, 3)), gen.normal(size=(5, 4))

    sig = lambda a: 1.0 / (1.0 + np.exp(-a))
    r = sig(x @ cell.wx.data[:, :4] + h @ cell.wh_gates.data[:, :4])
    candidate = np.tanh(x @ cell.wx.data[:, 8:] + (r * h) @ cell.wh_cand.data)
    assert np.allclose(cell(x, h).data, candidate, atol=1e-12, rtol=0)


# ============================================================================
# threads
# ============================================================================

def test_tape_and_frozen_sampling_do_not_cross_threads():
    seen = {}

    def worker():
        seen['tape'] = nx.active_tape()
        logits = Tensor(np.zeros((2, 3)), requires_grad=True)
        with Tape():
            seen['requires_grad'] = nx.categorical_sample_st(logits, Rng(0)).requires_grad

    with Tape() as tape:
        with nx.frozen_sampling():
            thread = threading.Thread(target=worker)
            thread.start()
            thread.join()
            frozen = Tensor(np.zeros((2, 3)), requires_grad=True)
            assert not nx.categorical_sample_st(frozen, Rng(0)).requires_grad
        assert nx.active_tape() is tape
    assert seen['tape'] is None
    assert seen['requires_grad'] is True
    assert nx.active_tape() is None
