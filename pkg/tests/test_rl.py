import math

import numpy as np
import pytest

from dreamlane.core import HORIZON, SeededRng
from dreamlane.env import Scene, make_centerline, simulate_rewards_batch
from dreamlane.nn import AdamW, gradient_check
from dreamlane.rl import (
    EPS_FLOOR,
    PolicyBatch,
    PolicyHead,
    RLConfig,
    RLState,
    actor_loss,
    actor_loss_grad,
    bc_loss,
    dense_final_reward,
    fuse_reward,
    gaussian_logpdf,
    group_advantages,
    kl_loss,
    mahalanobis,
    policy_loss,
    rl_train_step,
    sample_candidates,
    sample_candidates_random_baseline,
    second_difference_energy,
    sigma_schedule,
)
from dreamlane.vocab import generate_library_array
from dreamlane.worldmodel import FEATURE_SCALE, N_FEATURES, history_poses, observation_features

import reference as ref

SIGMA = sigma_schedule()
W_SAFE, W_TASK = np.ones(4), np.full(4, 0.25)


def test_fuse_examples():
    assert fuse_reward(np.ones(8)) == 0.0
    r = np.ones(8)
    r[0] = 0.0
    assert fuse_reward(r) == pytest.approx(math.log(EPS_FLOOR))
    assert fuse_reward(r) < -13.8
    assert fuse_reward([1, 1, 1, 1, 0.5, 1, 1, 1]) == pytest.approx(math.log(0.875))
    assert fuse_reward([1, 1, 1, 1, 0.5, 1, 1, 1]) == pytest.approx(-0.1335, abs=1e-4)
    with pytest.raises(ValueError):
        fuse_reward(np.ones(8), w_task=[0.5, 0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        fuse_reward(np.ones(8), variant="product")


def test_fuse_upper_bound_and_log_sigmoid_variant():
    rng = np.random.default_rng(0)
    r = rng.uniform(size=(500, 8))
    assert np.all(fuse_reward(r) <= math.log(W_TASK.sum()) + 1e-12)
    ls = fuse_reward(r, variant="log_sigmoid")
    ref_ls = np.sum(np.log(1 / (1 + np.exp(-r[:, :4]))), axis=1) + np.log(r[:, 4:] @ W_TASK)
    assert np.allclose(ls, ref_ls, atol=1e-12)


def test_dense_reward_examples():
    rng = np.random.default_rng(1)
    row = rng.uniform(0.2, 1, size=8)
    table = np.tile(row, (8, 1))
    assert dense_final_reward(table) == pytest.approx(fuse_reward(row))
    table = rng.uniform(0.2, 1, size=(8, 8))
    onehot = np.eye(8)[7]
    assert dense_final_reward(table, onehot) == pytest.approx(fuse_reward(table[7]))
    safe = np.ones((8, 8))
    crash = safe.copy()
    crash[4:, 0] = 0.0
    gap = dense_final_reward(safe) - dense_final_reward(crash)
    assert gap >= (4 / 8) * abs(math.log(EPS_FLOOR)) - 1e-9
    with pytest.raises(ValueError):
        dense_final_reward(safe, np.ones(7))


def test_mahalanobis_examples():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(8, 3))
    assert mahalanobis(m, m, SIGMA) == 0.0
    x = m.copy()
    x[3, 1] += SIGMA[3, 1]
    assert mahalanobis(x, m, SIGMA) == pytest.approx(1.0)
    a, b = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    assert mahalanobis(a, b, SIGMA) == pytest.approx(ref.mahalanobis(a, b, SIGMA), abs=1e-12)
    with pytest.raises(ValueError):
        mahalanobis(a, b, np.zeros((8, 3)))
    assert np.all(SIGMA > 0)
    assert np.isfinite(gaussian_logpdf(a, b, SIGMA))


def test_formulas_match_reference_on_random_inputs():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        r = rng.uniform(size=8)
        r[rng.uniform(size=8) < 0.1] = 0.0
        ws = rng.uniform(0, 2, size=4)
        wt = rng.dirichlet(np.ones(4))
        assert abs(fuse_reward(r, ws, wt) - ref.fuse(r, ws, wt)) < 1e-10
        table = rng.uniform(size=(8, 8))
        w_time = rng.dirichlet(np.ones(8))
        assert abs(dense_final_reward(table, w_time, w_safe=ws, w_task=wt) - ref.dense(table, w_time, ws, wt)) < 1e-10
        a, b = rng.normal(size=(8, 3)) * 5, rng.normal(size=(8, 3)) * 5
        sig = rng.uniform(0.1, 2, size=(8, 3))
        assert abs(mahalanobis(a, b, sig) - ref.mahalanobis(a, b, sig)) < 1e-10
        rew = rng.normal(size=16) * rng.uniform(0.1, 10)
        assert np.max(np.abs(group_advantages(rew) - ref.advantages(rew))) < 1e-10
        adv, ln, lo = rng.normal(size=16), rng.normal(size=16) * 0.3, rng.normal(size=16) * 0.3
        eps = rng.uniform(0.05, 0.5)
        assert abs(actor_loss(adv, ln, lo, eps) - ref.actor(adv, ln, lo, eps)) < 1e-10


def test_group_advantage_examples():
    assert np.allclose(group_advantages([1, 2, 3]), [-1.2247, 0, 1.2247], atol=1e-4)
    assert np.array_equal(group_advantages([2.0, 2.0, 2.0]), np.zeros(3))
    rng = np.random.default_rng(4)
    r = rng.normal(size=16) * 3 + 1
    a = group_advantages(r)
    assert abs(a.mean()) < 1e-10 and abs(a.std() - 1) < 1e-6
    assert np.allclose(group_advantages(2.5 * r - 7.0), a, atol=1e-6)
    with pytest.raises(ValueError):
        group_advantages([1.0])


def test_actor_loss_examples_and_gradient():
    assert actor_loss([1.0], [0.0], [0.0]) == -1.0
    assert actor_loss([1.0], [math.log(1.5)], [0.0], 0.2) == pytest.approx(-1.2)
    assert actor_loss([-1.0], [math.log(0.5)], [0.0], 0.2) == pytest.approx(0.8)
    rng = np.random.default_rng(5)
    adv = rng.normal(size=8)
    lo = rng.normal(size=8)
    ln = lo + rng.uniform(-0.15, 0.15, size=8)  # every ratio inside the clip band
    assert actor_loss(adv, ln, lo) == pytest.approx(np.mean(-adv * np.exp(ln - lo)))
    ln = lo + rng.normal(size=8) * 0.4
    g = actor_loss_grad(adv, ln, lo)
    h = 1e-7
    for i in range(8):
        up, dn = ln.copy(), ln.copy()
        up[i] += h
        dn[i] -= h
        assert (actor_loss(adv, up, lo) - actor_loss(adv, dn, lo)) / (2 * h) == pytest.approx(g[i], abs=1e-6)
    with pytest.raises(ValueError):
        actor_loss(adv, np.full(8, np.nan), lo)


def vocab16():
    rng = np.random.default_rng(6)
    base = np.cumsum(np.tile([[5.0, 0.0, 0.0]], (8, 1)), axis=0)
    return base + rng.normal(size=(16, 8, 3)) * [0.3, 0.3, 0.02], base


def test_candidate_set_examples():
    vocab, mean = vocab16()
    d = mahalanobis(vocab, mean, SIGMA)
    nearest = sample_candidates(vocab, mean, SIGMA, 0, 5, 1.0, SeededRng(0))
    assert list(nearest.vocab_indices) == list(np.argsort(d)[:5])
    mixed = sample_candidates(vocab, mean, SIGMA, 6, 6, 50.0, SeededRng(1))
    assert len(mixed) == 12 and len(set(mixed.vocab_indices)) == 12
    assert mixed.sources == ["softmax"] * 6 + ["neighborhood"] * 6
    with pytest.raises(ValueError):
        sample_candidates(vocab, mean, SIGMA, 10, 10, 1.0, SeededRng(1))
    with pytest.raises(ValueError):
        sample_candidates(vocab, mean, SIGMA, 1, 1, 0.0, SeededRng(1))


def test_softmax_branch_frequencies():
    vocab, mean = vocab16()
    temp = 20.0
    d = mahalanobis(vocab, mean, SIGMA)
    p = np.exp(-(d - d.min()) / temp)
    p /= p.sum()
    rng = SeededRng(7)
    n = 100_000
    counts = np.zeros(16)
    for _ in range(n):
        counts[sample_candidates(vocab, mean, SIGMA, 1, 0, temp, rng).vocab_indices[0]] += 1
    sd = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sd + 1)


def test_low_temperature_concentrates_on_nearest():
    vocab, mean = vocab16()
    d = mahalanobis(vocab, mean, SIGMA)
    best = set(np.argsort(d)[:3])
    rng = SeededRng(8)
    hits = sum(set(sample_candidates(vocab, mean, SIGMA, 3, 0, 1e-4, rng).vocab_indices) == best for _ in range(10_000))
    assert hits >= 9900


def test_random_baseline():
    _, mean = vocab16()
    tight = sample_candidates_random_baseline(mean, np.full((8, 3), 1e-12), 5, SeededRng(9))
    assert np.allclose(tight.trajs, mean, atol=1e-10)
    n = 10_000
    draws = sample_candidates_random_baseline(mean, SIGMA, n, SeededRng(10)).trajs
    assert np.all(np.abs(draws.mean(axis=0) - mean) <= 4 * SIGMA / math.sqrt(n))


def test_baseline_candidates_are_jerkier_than_vocabulary():
    lib = generate_library_array(SeededRng(0, 3), 2048)
    mean = np.cumsum(np.tile([[4.0, 0.0, 0.0]], (8, 1)), axis=0)
    sigma = np.full((8, 3), 0.5)
    sigma[:, 2] = 0.05
    vocab_set = sample_candidates(lib, mean, sigma, 8, 8, 50.0, SeededRng(11))
    base_set = sample_candidates_random_baseline(mean, sigma, 16, SeededRng(11))
    assert second_difference_energy(base_set.trajs) > second_difference_energy(vocab_set.trajs)


def test_bc_and_kl_losses():
    rng = np.random.default_rng(12)
    m = rng.normal(size=(3, 8, 3))
    assert bc_loss(m, m)[0] == 0.0
    loss, g = bc_loss(m + 0.5, m)
    assert loss == pytest.approx(0.5) and np.allclose(g, 1 / m.size)
    assert kl_loss(m, m, SIGMA)[0] == 0.0
    shifted = m.copy()
    shifted[:, 2, 0] += SIGMA[2, 0]
    assert kl_loss(shifted, m, SIGMA)[0] == pytest.approx(0.5)


def small_policy(seed=0, L=4):
    return PolicyHead(N_FEATURES, L, 4, SeededRng(seed), hidden=16)


def policy_inputs(rng, b, L=4):
    feats = rng.normal(size=(b, N_FEATURES)) / FEATURE_SCALE * 0.3
    feats[:, 2] = rng.uniform(3, 10, size=b)
    return feats, rng.normal(size=(b, 4, L))


def test_policy_mean_starts_at_nominal_speed():
    pol = small_policy()
    pol.net.params["W2"][...] = 0
    pol.net.params["b2"][...] = 0
    feats, hist = policy_inputs(np.random.default_rng(0), 2)
    mean = pol.mean(feats, hist, FEATURE_SCALE)
    assert np.allclose(mean[:, :, 0], feats[:, 2:3] * 0.5 * np.arange(1, 9))
    assert np.all(mean[:, :, 1:] == 0)


def test_policy_composite_gradient_check():
    pol = small_policy(seed=1)
    pol.astype(np.float64)
    rng = np.random.default_rng(13)
    b, g = 3, 6
    feats, hist = policy_inputs(rng, b)
    mu_old = pol.mean(feats, hist, FEATURE_SCALE)
    cands = mu_old[:, None] + rng.normal(size=(b, g, 8, 3)) * SIGMA
    adv = np.stack([group_advantages(rng.normal(size=g)) for _ in range(b)])
    anchors = mu_old + rng.normal(size=mu_old.shape)
    ref_mean = mu_old + rng.normal(size=mu_old.shape) * 0.1
    cfg = RLConfig()
    # move off the snapshot so some ratios leave the clip band
    pol.net.params["b2"] += rng.normal(size=pol.net.params["b2"].shape) * 0.02

    def loss_and_grad():
        pol.zero_grad()
        mean = pol.forward(feats, hist, FEATURE_SCALE)
        losses, grad = policy_loss(mean, cands, adv, mu_old, anchors, ref_mean, cfg)
        pol.backward(grad)
        return losses["total"]

    assert gradient_check(loss_and_grad, pol, 32, rng, h=1e-6).max() < 1e-3


def obstacle_batch(L=4):
    scene = Scene(make_centerline(0.0), static_obstacles=np.array([[22.0, 0.0, 1.0, 1.0]]), ego_speed=8.0, speed_limit=10.0)
    feats = observation_features(scene, *history_poses(scene))[-1:]
    lib = generate_library_array(SeededRng(0, 4), 2048)
    return scene, PolicyBatch(feats, np.zeros((1, 4, L)), np.zeros((1, 8, 3)), [lib])


def oracle_scorer(scene):
    return lambda hist, trajs, rng: simulate_rewards_batch(scene, trajs)


def test_degenerate_step_has_zero_actor_and_kl():
    scene, batch = obstacle_batch()
    pol = small_policy(seed=2)
    ref_pol = small_policy(seed=2)
    state = RLState(pol, ref_pol, AdamW(lr=1e-3), RLConfig(lambda_bc=0.0), FEATURE_SCALE)
    out = rl_train_step(state, None, None, batch, SeededRng(0), scorer=lambda h, t, r: np.ones((len(t), 8, 8)))
    assert out["actor"] == 0.0 and out["kl"] == 0.0


def test_rl_steps_deterministic():
    def run():
        scene, batch = obstacle_batch()
        state = RLState(small_policy(seed=3), small_policy(seed=3), AdamW(lr=1e-3), RLConfig(temperature=30.0), FEATURE_SCALE)
        rng = SeededRng(5)
        return [rl_train_step(state, None, None, batch, rng, scorer=oracle_scorer(scene)) for _ in range(3)]

    assert run() == run()


def test_rl_removes_collision_on_single_scene():
    scene, batch = obstacle_batch()
    pol = small_policy(seed=4)
    pol.net.params["W2"][...] = 0
    pol.net.params["b2"][...] = 0
    cfg = RLConfig(lambda_bc=0.0, lambda_kl=0.0, temperature=30.0, lr=3e-3, batch_scenes=1)
    state = RLState(pol, small_policy(seed=4), AdamW(lr=cfg.lr), cfg, FEATURE_SCALE)

    def collides():
        mean = pol.mean(batch.feats, batch.hist, FEATURE_SCALE)
        return simulate_rewards_batch(scene, mean)[0, -1, 0] < 0.5

    assert collides()
    rng = SeededRng(6)
    for _ in range(200):
        rl_train_step(state, None, None, batch, rng, scorer=oracle_scorer(scene))
    assert not collides()
