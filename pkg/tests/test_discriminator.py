import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import reachable_within, step_successors
from tdil.discriminator import (
    EPS, OracleDiscriminator, TabularDiscriminator, TransitionDiscriminator, evaluate_accuracy,
    oracle_agreement, oracle_reachable, oracle_reachable_k, reachability_within,
)
from tdil.env import ADVANCE, ChainEnv, GridSpec, GridWorld, default_grid
from tdil.replay import CONTRASTIVE, POSITIVE, REVERSED, PairBatch, ReplayBuffer, build_negative_batch, build_positive_batch


def grid(w, h, goal=(0, 0), barriers=()):
    return GridWorld(GridSpec(w, h, frozenset(frozenset(b) for b in barriers), goal, None))


def batch(pairs, label):
    left, right = zip(*pairs) if pairs else ((), ())
    return PairBatch(np.array(left, np.int64), np.array(right, np.int64), label)


def uniform_buffer(env, n, seed=0, holdout_every=20):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(rng_seed=seed, holdout_every=holdout_every)
    for _ in range(n):
        buf.push(env.transition(int(rng.integers(env.n_states)), int(rng.integers(env.n_actions))))
    return buf


def train(d, buf, steps, n=64):
    losses = []
    for _ in range(steps):
        pos = build_positive_batch(buf, n)
        losses.append(d.train_step(pos, build_negative_batch(buf, n // 2, n // 2)))
    return losses


def test_untrained_zero_net_predicts_half():
    env = default_grid()
    d = TransitionDiscriminator(env.features, zero_init=True)
    assert d.predict(env.state(0), env.state(63)) == 0.5
    assert np.all(d.predict_matrix(range(64), range(64)) == 0.5)


def test_half_predictor_loss_is_log2():
    env = default_grid()
    d = TransitionDiscriminator(env.features, zero_init=True)
    pos = batch([(0, 1), (1, 2)], POSITIVE)
    negs = [batch([(0, 9)], CONTRASTIVE), batch([(1, 0)], REVERSED)]
    assert d.loss(pos, negs) == pytest.approx(math.log(2), abs=1e-15)
    assert d.train_step(pos, negs) == pytest.approx(math.log(2), abs=1e-15)


def test_perfect_predictor_loss_near_zero():
    env = ChainEnv(4)
    d = OracleDiscriminator(env)
    pos = batch([(0, 1), (1, 2)], POSITIVE)
    negs = [batch([(2, 1)], REVERSED)]
    from tdil.discriminator import bce_terms
    loss = bce_terms(d.predict_ids(pos.left, pos.right), d.predict_ids(negs[0].left, negs[0].right), 0.99)
    assert loss <= 2 * -math.log(1 - EPS)


def test_clamp_keeps_loss_finite():
    from tdil.discriminator import bce_terms
    assert np.isfinite(bce_terms(np.array([0.0]), np.array([1.0]), 0.5))


def test_alpha_validated():
    with pytest.raises(ValueError):
        TransitionDiscriminator(default_grid().features, alpha=1.0)


def test_oracle_cases():
    env = grid(4, 4)
    a, b, c = env.cell_id(1, 1), env.cell_id(1, 2), env.cell_id(1, 3)
    assert oracle_reachable(env, a, b) == 1
    assert oracle_reachable(env, a, c) == 0
    chain = ChainEnv(6)
    assert oracle_reachable(chain, 2, 3) == 1 and oracle_reachable(chain, 3, 2) == 0


def test_k1_equivalence_exhaustive_4x4():
    env = grid(4, 4, goal=(3, 3), barriers=[((1, 1), (1, 2)), ((2, 0), (3, 0))])
    for i in range(16):
        for j in range(16):
            assert oracle_reachable_k(env, i, j, 1) == oracle_reachable(env, i, j) == int(j in step_successors(env, i))


def test_corridor_multistep():
    env = grid(5, 1, goal=(4, 0))
    assert oracle_reachable_k(env, 0, 3, 3) == 1
    assert oracle_reachable_k(env, 0, 3, 2) == 0


def test_self_reachable_with_blocked_direction():
    env = default_grid()
    corner = env.cell_id(0, 0)
    for k in (1, 2, 5):
        assert oracle_reachable_k(env, corner, corner, k) == 1


def test_k_must_be_positive():
    with pytest.raises(ValueError):
        oracle_reachable_k(ChainEnv(3), 0, 1, 0)
    with pytest.raises(ValueError):
        reachability_within(ChainEnv(3), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 63), st.integers(0, 63))
def test_bfs_oracle_matches_reference_and_is_monotone(k, i, j):
    env = default_grid()
    r = oracle_reachable_k(env, i, j, k)
    assert r == int(reachable_within(env, i, j, k))
    assert reachability_within(env, k)[i, j] == bool(r)
    assert oracle_reachable_k(env, i, j, k + 1) >= r


def test_oracle_as_discriminator_scores_one():
    env = default_grid()
    buf = uniform_buffer(env, 2000)
    rep = evaluate_accuracy(OracleDiscriminator(env), env, buf.heldout)
    assert rep.acc_positive == rep.acc_contrastive == 1.0
    # on an open 4-connected grid every reversal is itself a legal move
    assert rep.n_reversed == 0 and math.isnan(rep.acc_reversed)
    assert rep.n_reversed_excluded == rep.n_positive
    assert oracle_agreement(OracleDiscriminator(env), env) == 1.0
    chain = ChainEnv(8)
    rep = evaluate_accuracy(OracleDiscriminator(chain), chain, uniform_buffer(chain, 2000).heldout)
    assert rep.acc_positive == rep.acc_contrastive == rep.acc_reversed == 1.0


def test_empty_heldout_rejected():
    env = ChainEnv(5)
    with pytest.raises(ValueError):
        evaluate_accuracy(OracleDiscriminator(env), env, ReplayBuffer())


def test_chain_training_separates_directions():
    env = ChainEnv(10)
    buf = uniform_buffer(env, 3000, seed=1)
    d = TransitionDiscriminator(env.features, learning_rate=3e-3, seed=1)
    losses = train(d, buf, 1500)
    assert np.median(losses[-300:]) < np.median(losses[:300])
    for p in range(9):
        assert d.predict_ids([p], [p + 1])[0] > 0.5
        assert d.predict_ids([p + 1], [p])[0] < 0.5
    rep = evaluate_accuracy(d, env, buf.heldout)
    assert rep.acc_reversed > 0.9


def test_grid_positive_after_training():
    env = default_grid()
    buf = uniform_buffer(env, 3000, seed=2)
    d = TransitionDiscriminator(env.features, learning_rate=3e-3, seed=2)
    train(d, buf, 1500)
    data = buf.contents()
    assert np.mean(d.predict_ids(data.s[:200], data.s_next[:200]) > 0.5) > 0.9


def test_target_lag_convexity():
    env = ChainEnv(6)
    buf = uniform_buffer(env, 200)
    d = TransitionDiscriminator(env.features, lam=0.5)
    for _ in range(5):
        old_target = d.target.flat.copy()
        d.train_step(build_positive_batch(buf, 16), build_negative_batch(buf, 8, 8))
        lo = np.minimum(old_target, d.online.flat) - 1e-15
        hi = np.maximum(old_target, d.online.flat) + 1e-15
        assert np.all((d.target.flat >= lo) & (d.target.flat <= hi))


def test_non_finite_loss_aborts():
    env = ChainEnv(4)
    d = TransitionDiscriminator(env.features)
    d.online.flat[:] = np.nan
    with pytest.raises(FloatingPointError):
        d.train_step(batch([(0, 1)], POSITIVE), [batch([(1, 0)], REVERSED)])


def test_checkpoint_round_trip(tmp_path):
    env = ChainEnv(5)
    d = TransitionDiscriminator(env.features, alpha=0.9, lam=0.3, seed=4)
    train(d, uniform_buffer(env, 100), 3, n=8)
    d.save(tmp_path / "d.bin")
    back = TransitionDiscriminator.load(tmp_path / "d.bin", env.features)
    assert (back.alpha, back.lam) == (0.9, 0.3)
    assert back.online.flat.tobytes() == d.online.flat.tobytes()
    assert back.target.flat.tobytes() == d.target.flat.tobytes()
    with pytest.raises(ValueError):
        (tmp_path / "bad.bin").write_bytes(b"junk")
        TransitionDiscriminator.load(tmp_path / "bad.bin", env.features)


def test_tabular_backend_learns_chain():
    env = ChainEnv(6)
    buf = ReplayBuffer()
    for p in range(5):
        buf.push(env.transition(p, ADVANCE))
    d = TabularDiscriminator(env.n_states, alpha=0.9, lam=0.0, learning_rate=5.0)
    for _ in range(300):
        d.train_step(build_positive_batch(buf, 32), build_negative_batch(buf, 16, 16))
    for p in range(5):
        assert d.predict_ids([p], [p + 1])[0] > 0.5
        assert d.predict_ids([p + 1], [p])[0] < 0.5
