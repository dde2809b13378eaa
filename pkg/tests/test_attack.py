import math

import numpy as np
import pytest

from fdcheck import numeric_grad, rel_err
from tagleak import attack as A
from tagleak.attack import (
    AttackConfig,
    AttackDivergedError,
    DummyState,
    adam_update,
    alpha_schedule,
    gradient_distance,
    project_to_tokens,
    recover_label,
    run_attack,
)
from tagleak.autodiff import Tensor
from tagleak.model import ConfigError, GradientSet, Param, TransformerClassifier, model_gradient, preset
from tagleak.weights import InitSpec, init_weights


@pytest.fixture(scope="module")
def tiny():
    cfg = preset("tiny", vocab_size=16, max_seq_len=4)
    return TransformerClassifier(cfg, init_weights(cfg, InitSpec("normal", std=0.02, seed=0)))


def gset(*arrays, layers=None):
    layers = layers or range(len(arrays))
    return GradientSet(Param(f"p{i}", l, Tensor(a)) for i, (a, l) in enumerate(zip(arrays, layers)))


# ---------------------------------------------------------------- schedule and distance

def test_alpha_schedule():
    assert [alpha_schedule(i, 3, 0.0, 0.85) for i in range(3)] == [0.0, 0.0, 0.0]
    assert [alpha_schedule(i, 3, 0.2, 1.0) for i in range(3)] == [0.2, 0.2, 0.2]
    assert [alpha_schedule(i, 3, 1.0, 0.5) for i in range(3)] == [1.0, 0.5, 0.25]
    vals = [alpha_schedule(i, 10, 0.01, 0.85) for i in range(10)]
    assert vals == sorted(vals, reverse=True)
    with pytest.raises(ValueError):
        alpha_schedule(3, 3, 1.0, 0.5)


def test_config_validation():
    for kw in (dict(lr=0), dict(max_iters=0), dict(gamma=0), dict(gamma=1.5), dict(alpha0=-1), dict(mode="x")):
        with pytest.raises(ConfigError):
            AttackConfig(**kw)
    assert AttackConfig(mode="dlg", alpha0=0.3).effective_alpha0 == 0.0


def test_distance_identity_and_l2_reduction():
    rng = np.random.default_rng(0)
    a = gset(rng.normal(size=(2, 3)), rng.normal(size=4))
    b = gset(rng.normal(size=(2, 3)), rng.normal(size=4))
    assert gradient_distance(a, a, A.make_schedule(0.5, 0.9, 2)).item() == 0.0
    l2 = sum(np.linalg.norm(x.tensor.data - y.tensor.data) for x, y in zip(a, b))
    assert gradient_distance(a, b, A.make_schedule(0.0, 0.9, 2)).item() == pytest.approx(l2, abs=1e-12)
    assert gradient_distance(a, b).item() == pytest.approx(l2, abs=1e-12)


def test_distance_hand_values():
    a = gset(np.array([3.0, 0.0]), np.array([[1.0, -1.0]]), layers=[0, 1])
    b = gset(np.array([0.0, 4.0]), np.array([[0.0, 1.0]]), layers=[0, 1])
    # layer 0: L2 = 5, L1 = 7, alpha 2;  layer 1: L2 = sqrt(5), L1 = 3, alpha 1
    expected = 5 + 2 * 7 + math.sqrt(5) + 1 * 3
    got = gradient_distance(a, b, A.make_schedule(2.0, 0.5, 2)).item()
    assert abs(got - expected) <= 1e-12


def test_distance_symmetric_nonnegative():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = gset(rng.normal(size=5)), gset(rng.normal(size=5))
        s = A.make_schedule(0.3, 0.8, 1)
        d = gradient_distance(a, b, s).item()
        assert d > 0 and d == gradient_distance(b, a, s).item()


def test_distance_structural_mismatch():
    with pytest.raises(ValueError):
        gradient_distance(gset(np.ones(2)), gset(np.ones(3)))
    with pytest.raises(ValueError):
        gradient_distance(gset(np.ones(2)), gset(np.ones(2), np.ones(2)))


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_is_noop():
    s = DummyState(np.array([[1.0, -2.0]]), np.array([0.5]))
    s2 = adam_update(s, np.zeros((1, 2)), np.zeros(1), 0.05, 1)
    np.testing.assert_array_equal(s2.x, s.x)
    np.testing.assert_array_equal(s2.y, s.y)


def test_adam_first_step_by_hand():
    g = np.array([0.3, -2.0])
    s = DummyState(np.array([[1.0, 1.0]]), np.zeros(1))
    s2 = adam_update(s, g[None, :], np.zeros(1), 0.05, 1)
    # m_hat = g, v_hat = g^2, so each step is lr * g / (|g| + eps)
    expected = 1.0 - 0.05 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(s2.x[0], expected, rtol=0, atol=1e-15)


def test_adam_second_step_by_hand():
    g1, g2 = 0.5, -0.25
    s = DummyState(np.array([[0.0]]), np.zeros(1))
    s = adam_update(s, np.array([[g1]]), np.zeros(1), 0.1, 1)
    s = adam_update(s, np.array([[g2]]), np.zeros(1), 0.1, 2)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
    step2 = 0.1 * (m / (1 - 0.9**2)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert s.x[0, 0] == pytest.approx(-0.1 * g1 / (abs(g1) + 1e-8) - step2, abs=1e-15)


def test_adam_shape_check():
    with pytest.raises(ValueError):
        adam_update(DummyState(np.zeros((1, 2)), np.zeros(1)), np.zeros(2), np.zeros(1), 0.1, 1)


# ---------------------------------------------------------------- projection

def test_projection_exact_and_scaled():
    emb = np.random.default_rng(2).normal(size=(16, 8))
    assert project_to_tokens(emb[[7]], emb) == [7]
    assert project_to_tokens(2.5 * emb[[7]], emb) == [7]


def test_projection_against_exhaustive_argmax():
    rng = np.random.default_rng(3)
    emb, x = rng.normal(size=(16, 8)), rng.normal(size=(5, 8))
    expected = []
    for row in x:
        best, best_score = None, -np.inf
        for i, e in enumerate(emb):
            score = row @ e / (np.linalg.norm(row) * np.linalg.norm(e))
            if score > best_score:
                best, best_score = i, score
        expected.append(best)
    assert project_to_tokens(x, emb) == expected


def test_projection_ties_and_zero_rows():
    emb = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    assert project_to_tokens(np.array([[3.0, 0.0]]), emb) == [0]
    assert project_to_tokens(np.zeros((1, 2)), emb) == [A.UNK_ID]
    with pytest.raises(ValueError):
        project_to_tokens(np.zeros((1, 3)), emb)


def test_recover_label():
    assert recover_label([0.1, 2.0]) == 1
    assert recover_label([5.0, 5.0]) == 0


# ---------------------------------------------------------------- the loop

def test_dummy_gradient_fd(tiny):
    tokens, label = [3, 9, 12], 1
    target = model_gradient(tiny, tokens, label)
    sched = A.make_schedule(0.01, 0.85, tiny.config.num_layer_groups)
    state = DummyState.random(3, 8, 2, seed=4)
    _, gx, gy = A.distance_and_grads(tiny, target, state, sched)

    def dist(x):
        return A.distance_and_grads(tiny, target, DummyState(x, state.y), sched)[0]

    coords = np.random.default_rng(4).choice(24, size=12, replace=False)
    assert rel_err(gx.reshape(-1)[coords], numeric_grad(dist, state.x, coords)) <= 1e-3
    dist_y = lambda y: A.distance_and_grads(tiny, target, DummyState(state.x, y), sched)[0]
    assert rel_err(gy, numeric_grad(dist_y, state.y)) <= 1e-3


def test_trace_shape_and_determinism(tiny):
    target = model_gradient(tiny, [1, 5, 7], 0)
    cfg = AttackConfig(max_iters=15, seed=3, seq_len=3)
    a = run_attack(tiny, target, cfg, oracle_tokens=[1, 5, 7])
    b = run_attack(tiny, target, cfg, oracle_tokens=[1, 5, 7])
    assert [r.iter for r in a.records] == list(range(15))
    assert a.same_as(b)
    assert not a.same_as(run_attack(tiny, target, AttackConfig(max_iters=15, seed=4, seq_len=3)))


def test_dlg_equals_tag_with_zero_alpha(tiny):
    target = model_gradient(tiny, [2, 2, 9], 1)
    tag = run_attack(tiny, target, AttackConfig(max_iters=10, alpha0=0.0, seq_len=3))
    dlg = run_attack(tiny, target, AttackConfig(max_iters=10, mode="dlg", alpha0=0.5, seq_len=3))
    assert tag.same_as(dlg)


def test_attack_leaves_inputs_untouched(tiny):
    target = model_gradient(tiny, [4, 6, 8], 1)
    weights, grads = tiny.params.snapshot(), [g.copy() for g in target.arrays()]
    run_attack(tiny, target, AttackConfig(max_iters=5, seq_len=3))
    assert all(np.array_equal(a, b) for a, b in zip(weights, tiny.params.snapshot()))
    assert all(np.array_equal(a, b) for a, b in zip(grads, target.arrays()))


def test_plateau_stopping(tiny):
    target = model_gradient(tiny, [4, 6, 8], 1)
    cfg = AttackConfig(max_iters=400, stopping="plateau", patience=5, seq_len=3)
    trace = run_attack(tiny, target, cfg, oracle_tokens=[4, 6, 8])
    assert trace.stopped_early and len(trace.records) < 400
    with pytest.raises(ValueError):
        run_attack(tiny, target, cfg)


def test_structural_mismatch(tiny):
    target = model_gradient(tiny, [4, 6, 8], 1)
    with pytest.raises(ValueError):
        run_attack(tiny, GradientSet(list(target)[:-1]), AttackConfig(max_iters=1, seq_len=3))


def test_divergence_reported(tiny):
    target = model_gradient(tiny, [4, 6, 8], 1)
    huge = GradientSet(Param(g.name, g.layer, Tensor(np.full(g.tensor.shape, 1e200))) for g in target)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(AttackDivergedError) as info:
        run_attack(tiny, huge, AttackConfig(max_iters=3, seq_len=3))
    assert info.value.iteration == 0
    assert np.isfinite(info.value.trace.final_x).all()


def test_first_iterations_reduce_distance(tiny):
    target = model_gradient(tiny, [3, 9, 12], 1)
    trace = run_attack(tiny, target, AttackConfig(max_iters=201, seq_len=3, seed=1))
    assert trace.losses[200] < trace.losses[0]


@pytest.mark.slow
def test_tiny_end_to_end_recovery():
    # vocab 16, length 3, default budget: most seeds should end fully recovered
    full = 0
    for seed in range(10):
        cfg = preset("tiny", vocab_size=16, max_seq_len=4)
        model = TransformerClassifier(cfg, init_weights(cfg, InitSpec("normal", std=0.02, seed=seed)))
        tokens = [5 + (seed + 3 * k) % 11 for k in range(3)]
        trace = run_attack(model, model_gradient(model, tokens, seed % 2), AttackConfig(seed=seed, seq_len=3), tokens)
        full += trace.tokens == tokens
    assert full > 5, f"{full}/10 seeds fully recovered"
