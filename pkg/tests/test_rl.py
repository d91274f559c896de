import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare, norm

from egret.nn import MLP, Adam, clip_grad_norm, pack
from egret.rl import checkpoint
from egret.rl.normalize import ReturnScaler, RunningMeanStd, normalize
from egret.rl.policy import (ActorCritic, PolicyConfig, composite_entropy, composite_log_prob,
                             masked_log_softmax, price_transform, rank_prices)
from egret.rl.ppo import HyperParams, TrajectoryBuffer, gae, loss_and_grads, make_optimizers, ppo_update, surrogate
from egret.harness.runner import baseline_policy


def small_policy(seed=0, n=3, m=2, hidden=(4, 4), **kw):
    cfg = PolicyConfig(hidden=hidden, **kw)
    return ActorCritic(2 * n + m, n, m, cfg, np.random.default_rng(seed))


# ---- sampling -----------------------------------------------------------------

def test_masked_client_has_zero_probability():
    pol = small_policy()
    rng = np.random.default_rng(0)
    obs = rng.standard_normal((1, pol.obs_dim))
    seen = set()
    for _ in range(2000):
        seen.add(pol.sample_action(obs, np.array([1, 0, 1], bool), rng).client)
    assert seen == {0, 2}
    z, _, _ = pol.heads(obs)
    p = np.exp(masked_log_softmax(z, np.array([[1, 0, 1]], bool)))
    assert p[0, 1] == 0.0


def test_single_valid_client():
    pol = small_policy(learn_prices=False)
    rng = np.random.default_rng(1)
    obs = rng.standard_normal((1, pol.obs_dim))
    for _ in range(50):
        a = pol.sample_action(obs, np.array([0, 1, 0], bool), rng)
        assert a.client == 1 and a.logp == 0.0


def test_all_masked_raises():
    pol = small_policy()
    with pytest.raises(ValueError):
        pol.sample_action(np.zeros((1, pol.obs_dim)), np.zeros(3, bool), np.random.default_rng(0))


def test_sampling_deterministic_under_seed():
    pol = small_policy()
    obs = np.ones((1, pol.obs_dim))
    mask = np.ones(3, bool)
    a = pol.sample_action(obs, mask, np.random.default_rng(5))
    b = pol.sample_action(obs, mask, np.random.default_rng(5))
    assert a.client == b.client and (a.raw == b.raw).all() and a.logp == b.logp


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_log_prob_matches_independent_density(seed):
    pol = small_policy(seed % 17)
    rng = np.random.default_rng(seed)
    obs = rng.standard_normal((1, pol.obs_dim))
    mask = rng.random(3) < 0.7
    mask[rng.integers(3)] = True
    a = pol.sample_action(obs, mask, rng)
    z, mean, _ = pol.heads(obs)
    logits = z[0][mask]
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    idx = list(np.flatnonzero(mask)).index(a.client)
    ref = math.log(probs[idx]) + norm.logpdf(a.raw, mean[0], np.exp(pol.log_std)).sum()
    assert math.isfinite(a.logp)
    assert abs(a.logp - ref) <= 1e-10


def test_ranking_keeps_log_prob():
    ranked, plain = small_policy(3, rank=True), small_policy(3, rank=False)
    obs = np.ones((1, ranked.obs_dim))
    mask = np.ones(3, bool)
    a = ranked.sample_action(obs, mask, np.random.default_rng(9))
    b = plain.sample_action(obs, mask, np.random.default_rng(9))
    assert a.logp == b.logp and (a.raw == b.raw).all()
    assert (a.posted == np.sort(b.posted)).all()
    buf_a = TrajectoryBuffer(1, ranked.obs_dim, 3, 2)
    buf_b = TrajectoryBuffer(1, ranked.obs_dim, 3, 2)
    buf_a.add(obs, mask, a.client, a.raw, a.logp, 0.0, a.value, False)
    buf_b.add(obs, mask, b.client, b.raw, b.logp, 0.0, b.value, False)
    assert (buf_a.raw == buf_b.raw).all() and (buf_a.logp == buf_b.logp).all()


def test_rank_prices():
    assert list(rank_prices([3.0, 1.0, 2.0])) == [1.0, 2.0, 3.0]
    assert list(rank_prices([1.0, 2.0, 3.0])) == [1.0, 2.0, 3.0]
    out = rank_prices(np.random.default_rng(0).uniform(0, 9, 10))
    assert (np.diff(out) >= 0).all()


def test_egretn_equals_egret_when_sorted():
    raw = np.array([-1.0, 0.5, 2.0])
    a = small_policy(m=3, rank=True).post(raw)
    b = small_policy(m=3, rank=False).post(raw)
    assert (a == b).all()
    assert (price_transform(raw, 10.0) > 0).all()


def test_rop_uniform_client_frequencies():
    pol = baseline_policy("ROP", 10, 4, 2, PolicyConfig(hidden=(4,)), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    obs = np.zeros((1, 10))
    mask = np.array([1, 1, 0, 1], bool)
    counts = np.zeros(4)
    for _ in range(10_000):
        counts[pol.sample_action(obs, mask, rng).client] += 1
    assert counts[2] == 0
    assert chisquare(counts[mask]).pvalue > 1e-3


def test_rpp_prices_uniform_on_range():
    pol = baseline_policy("RPP", 10, 4, 3, PolicyConfig(hidden=(4,), rank=False), np.random.default_rng(0))
    rng = np.random.default_rng(2)
    raws = np.array([pol.sample_action(np.zeros((1, 10)), np.ones(4, bool), rng).posted for _ in range(3000)])
    assert raws.min() >= 0 and raws.max() <= 50
    assert raws.mean() == pytest.approx(25.0, abs=0.6)


def test_baseline_kinds():
    for kind, attr, val in (("EgretN", "rank", False), ("ROP", "learn_client", False),
                            ("RPP", "learn_prices", False), ("BEgret", "full_state", True)):
        pol = baseline_policy(kind, 10, 4, 2, rng=np.random.default_rng(0))
        assert getattr(pol.cfg, attr) == val
    assert baseline_policy("DeepSPM", 10, 4, 2, rng=np.random.default_rng(0)).cfg == PolicyConfig()
    with pytest.raises(ValueError):
        baseline_policy("nope", 10, 4, 2)


def test_batched_sampling_matches_masks():
    pol = small_policy(n=5, m=3)
    rng = np.random.default_rng(0)
    masks = rng.random((64, 5)) < 0.5
    masks[:, 0] |= ~masks.any(axis=1)
    c, raw, posted, logp, v = pol.sample_actions(rng.standard_normal((64, pol.obs_dim)), masks, rng)
    assert masks[np.arange(64), c].all()
    assert raw.shape == posted.shape == (64, 3) and logp.shape == v.shape == (64,)
    assert (np.diff(posted, axis=1) >= 0).all()


# ---- GAE ------------------------------------------------------------------------

def test_gae_hand_example():
    adv, ret = gae([1.0, 1.0], [0.5, 0.5, 0.0], [False, True], 1.0, 1.0)
    assert np.allclose(adv, [1.5, 0.5], atol=1e-15)
    assert np.allclose(ret, [2.0, 1.0])


def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(0)
    r, v = rng.standard_normal(6), rng.standard_normal(7)
    d = np.array([0, 0, 1, 0, 0, 0], bool)
    adv, _ = gae(r, v, d, 0.9, 0.0)
    nxt = np.where(d, 0.0, v[1:])
    assert np.allclose(adv, r + 0.9 * nxt - v[:-1], atol=1e-15)


def test_gae_monte_carlo_limit():
    rng = np.random.default_rng(1)
    for _ in range(10):
        r, v = rng.standard_normal(4), rng.standard_normal(5)
        d = np.array([0, 0, 0, 1], bool)
        adv, ret = gae(r, v, d, 1.0, 1.0)
        mc = np.array([r[t:].sum() for t in range(4)])
        assert np.allclose(adv, mc - v[:4], atol=1e-12)
        assert np.allclose(ret, mc, atol=1e-12)


def test_gae_zero_rewards_constant_values():
    adv, _ = gae(np.zeros(5), np.full(6, 2.0), np.zeros(5, bool), 1.0, 0.95)
    assert (adv == 0).all()


def test_gae_bootstraps_at_truncation():
    adv, ret = gae([0.0], [0.0, 3.0], [False], 0.5, 1.0)
    assert adv[0] == 1.5 and ret[0] == 1.5
    with pytest.raises(ValueError):
        gae([0.0], [0.0], [False], 1.0, 1.0)


def test_buffer_per_env_columns():
    buf = TrajectoryBuffer(4, 1, 2, 1, n_envs=2)
    for t in range(2):
        buf.add(np.zeros((2, 1)), np.ones((2, 2), bool), [0, 0], np.zeros((2, 1)), [0, 0],
                [1.0, 10.0], [0.0, 0.0], [t == 1, False])
    assert buf.full
    buf.finish([100.0, 5.0], HyperParams(gamma=1.0, lam=1.0))
    # env 0 terminates at t=1, env 1 bootstraps from 5
    assert list(buf.target) == [2.0, 25.0, 1.0, 15.0]
    with pytest.raises(IndexError):
        buf.add(*([None] * 8))


# ---- losses and gradients ---------------------------------------------------------

def test_surrogate_clip():
    assert surrogate(np.array([1.3]), np.array([1.0]), 0.2)[0] == pytest.approx(1.2)
    assert surrogate(np.array([0.5]), np.array([-1.0]), 0.2)[0] == pytest.approx(-0.8)


def make_batch(pol, rng, B=8):
    obs = rng.standard_normal((B, pol.obs_dim))
    masks = rng.random((B, pol.n_clients)) < 0.7
    masks[:, 0] = True
    c, raw, _, logp, _ = pol.sample_actions(obs, masks, rng)
    return dict(obs=obs, mask=masks, client=c, raw=raw,
                logp=logp + 0.3 * rng.standard_normal(B),  # off-policy so some ratios clip
                adv=rng.standard_normal(B), target=rng.standard_normal(B))


def loss_at(pol, batch, hp):
    rep, _, _ = loss_and_grads(pol, batch, hp)
    return rep["loss"]


def test_gradients_match_finite_differences():
    hp = HyperParams(clip=0.2, c1=0.5, c2=0.05)
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        pol = small_policy(seed, hidden=(2, 2))
        pol.log_std[:] = rng.uniform(-1, 0.5, 2)
        batch = make_batch(pol, rng)
        _, ag, cg = loss_and_grads(pol, batch, hp)
        for flat, grads in ((pol.actor_flat, ag), (pol.critic_flat, cg)):
            g = np.concatenate([x.ravel() for x in grads])
            k = rng.integers(flat.size, size=6)
            for i in k:
                old = flat[i]
                flat[i] = old + 1e-5
                up = loss_at(pol, batch, hp)
                flat[i] = old - 1e-5
                dn = loss_at(pol, batch, hp)
                flat[i] = old
                fd = (up - dn) / 2e-5
                err = abs(fd - g[i]) / max(1e-6, abs(fd) + abs(g[i]))
                worst = max(worst, err)
    assert worst < 1e-4


def test_zero_advantage_only_entropy_moves_policy():
    rng = np.random.default_rng(0)
    pol = small_policy()
    batch = make_batch(pol, rng)
    batch["adv"] = np.zeros(8)
    hp = HyperParams(c2=0.0, norm_adv=False)
    _, ag, _ = loss_and_grads(pol, batch, hp)
    assert all(np.abs(g).max() == 0 for g in ag)
    hp = HyperParams(c2=0.1, norm_adv=False)
    _, ag, _ = loss_and_grads(pol, batch, hp)
    assert np.abs(ag[-1]).max() > 0


def test_large_clip_reduces_to_plain_surrogate():
    rng = np.random.default_rng(4)
    pol = small_policy()
    batch = make_batch(pol, rng, 16)
    out, _ = pol.actor.forward(batch["obs"])
    cur = composite_log_prob(out[:, :3], out[:, 3:], pol.log_std, batch["client"], batch["raw"], batch["mask"])
    batch["logp"] = cur + rng.uniform(-0.5, 0.5, 16)      # ratios in (0.6, 1.65)
    hp = HyperParams(clip=0.999999, c1=0.0, c2=0.0, norm_adv=False)
    _, ag, _ = loss_and_grads(pol, batch, hp)
    g_ppo = np.concatenate([g.ravel() for g in ag])
    # plain importance-weighted objective mean(ratio * A): gradient by finite differences
    flat = pol.actor_flat

    def plain():
        out, _ = pol.actor.forward(batch["obs"])
        z, mean = out[:, :3], out[:, 3:]
        lp = composite_log_prob(z, mean, pol.log_std, batch["client"], batch["raw"], batch["mask"])
        return -float((np.exp(lp - batch["logp"]) * batch["adv"]).mean())

    fd = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + 1e-6
        up = plain()
        flat[i] = old - 1e-6
        dn = plain()
        flat[i] = old
        fd[i] = (up - dn) / 2e-6
    # ratios stay well inside (1 - eps, 1 + eps) here, so the clip never binds
    cos = g_ppo @ fd / (np.linalg.norm(g_ppo) * np.linalg.norm(fd))
    assert cos > 1 - 1e-8
    assert np.allclose(g_ppo, fd, rtol=1e-5, atol=1e-9)


def test_entropy_matches_formula():
    z = np.array([[0.0, 1.0, 2.0]])
    mask = np.array([[1, 0, 1]], bool)
    h = composite_entropy(z, np.array([0.0, -1.0]), mask)
    p = np.exp([0.0, 2.0]) / np.exp([0.0, 2.0]).sum()
    ref = -(p * np.log(p)).sum() + sum(0.5 + 0.5 * math.log(2 * math.pi) + s for s in (0.0, -1.0))
    assert h[0] == pytest.approx(ref, rel=1e-12)


def test_ppo_update_clears_buffer_and_changes_params():
    rng = np.random.default_rng(0)
    pol = small_policy()
    hp = HyperParams(T=16, minibatch=8, epochs=2)
    buf = TrajectoryBuffer(16, pol.obs_dim, 3, 2)
    for _ in range(16):
        obs = rng.standard_normal((1, pol.obs_dim))
        a = pol.sample_action(obs, np.ones(3, bool), rng)
        buf.add(obs, np.ones(3, bool), a.client, a.raw, a.logp, rng.random(), a.value, False)
    buf.finish(0.0, hp)
    before = pol.actor_flat.copy()
    rep = ppo_update(pol, buf, hp, make_optimizers(pol, hp), rng)
    assert buf.n == 0 and not (pol.actor_flat == before).all()
    assert set(rep) >= {"policy_loss", "value_loss", "entropy", "approx_kl"}


def test_ppo_update_rejects_non_finite():
    rng = np.random.default_rng(0)
    pol = small_policy()
    hp = HyperParams(T=4, minibatch=4, epochs=1)
    buf = TrajectoryBuffer(4, pol.obs_dim, 3, 2)
    for _ in range(4):
        buf.add(np.zeros((1, pol.obs_dim)), np.ones(3, bool), 0, np.zeros(2), 0.0, np.nan, 0.0, False)
    buf.finish(0.0, hp)
    with pytest.raises(FloatingPointError):
        ppo_update(pol, buf, hp, make_optimizers(pol, hp), rng)


def test_hyperparam_validation():
    for bad in (dict(clip=0.0), dict(clip=1.0), dict(lam=1.5), dict(gamma=0.0), dict(optimizer="x")):
        with pytest.raises(ValueError):
            HyperParams(**bad)


def test_sga_optimizer_ascends():
    rng = np.random.default_rng(0)
    pol = small_policy()
    hp = HyperParams(T=8, minibatch=8, epochs=1, optimizer="sga", lr=1e-2)
    a_opt, c_opt = make_optimizers(pol, hp)
    batch = make_batch(pol, rng)
    rep0, ag, _ = loss_and_grads(pol, batch, hp)
    ag, _ = clip_grad_norm([np.concatenate([g.ravel() for g in ag])], 0.5)
    a_opt.step(ag, 1e-3)
    rep1, _, _ = loss_and_grads(pol, batch, hp)
    assert rep1["policy_loss"] - hp.c2 * rep1["entropy"] < rep0["policy_loss"] - hp.c2 * rep0["entropy"]


# ---- normaliser, network helpers, checkpoints --------------------------------------

def test_normalizer_constant_stream():
    r = RunningMeanStd(())
    for _ in range(100):
        r.update(np.array([3.0]))
    assert abs(normalize(r, 3.0)) < 1e-12


def test_normalizer_gaussian_stream():
    rng = np.random.default_rng(0)
    r = RunningMeanStd(())
    x = rng.normal(5.0, 2.0, 100_000)
    for chunk in np.array_split(x, 97):
        r.update(chunk)
    y = r.normalize(x)
    assert abs(y.mean()) < 0.01 and abs(y.std() - 1.0) < 0.01
    assert r.mean == pytest.approx(x.mean(), rel=1e-12) and r.var == pytest.approx(x.var(), rel=1e-9)


def test_normalizer_frozen_is_order_independent():
    rng = np.random.default_rng(1)
    r = RunningMeanStd((3,))
    r.update(rng.standard_normal((50, 3)))
    r.frozen = True
    data = rng.standard_normal((20, 3))
    a = r.normalize(data)
    r.update(data)
    b = r.normalize(data[::-1])[::-1]
    assert (a == b).all()


def test_reward_scaling_is_not_centred():
    r = RunningMeanStd((), center=False)
    r.update(np.array([1.0, 3.0]))
    assert r.normalize(2.0) == pytest.approx(2.0 / math.sqrt(1.0 + 1e-8))


def test_return_scaler_uses_discounted_return():
    # constant reward 1 with gamma 0.5: the return climbs 1, 1.5, 1.75, ...
    rms = RunningMeanStd((), clip=0, center=False)
    sc = ReturnScaler(rms, 1, 0.5)
    for _ in range(3):
        sc([1.0], [False])
    rets = np.array([1.0, 1.5, 1.75])
    assert rms.var == pytest.approx(rets.var(), rel=1e-12)
    # terminating every step makes the return equal the reward
    rms2 = RunningMeanStd((), clip=0, center=False)
    sc2 = ReturnScaler(rms2, 2, 0.99)
    rng = np.random.default_rng(0)
    r = rng.uniform(0, 3, (50, 2))
    for row in r:
        out = sc2(row, [True, True])
    assert rms2.var == pytest.approx(r.var(), rel=1e-10)
    assert out == pytest.approx(r[-1] / np.sqrt(r.var() + rms2.eps), rel=1e-10)


def test_pack_views_share_memory():
    flat, views = pack([np.ones((2, 3)), np.zeros(2)])
    views[0][1, 2] = 7.0
    assert flat[5] == 7.0 and flat.size == 8


def test_adam_matches_reference_step():
    p = np.array([1.0, -2.0])
    opt = Adam([p], lr=0.1)
    g = np.array([0.5, -0.25])
    opt.step([g])
    # first bias-corrected step has magnitude lr * |g| / (|g| + eps)
    assert p == pytest.approx([1.0 - 0.1 * 0.5 / (0.5 + 1e-5), -2.0 + 0.1 * 0.25 / (0.25 + 1e-5)])


def test_mlp_orthogonal_init():
    net = MLP([6, 6, 2], np.random.default_rng(0), out_gain=0.01)
    W = net.params[0]
    assert np.allclose(W.T @ W, 2.0 * np.eye(6), atol=1e-12)
    assert np.abs(net.params[2]).max() < 0.02


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    pol = small_policy(7, hidden=(5, 3))
    rng = np.random.default_rng(0)
    pol.actor_flat[:] = rng.standard_normal(pol.actor_flat.size) * 1e-3
    pol.obs_rms.update(rng.standard_normal((10, pol.obs_dim)))
    pol.rew_rms.update(rng.standard_normal(10))
    path = tmp_path / "ck.json"
    checkpoint.save(pol, str(path), meta=dict(method="egret"))
    back, meta = checkpoint.load(str(path))
    assert meta == dict(method="egret")
    assert (back.actor_flat == pol.actor_flat).all() and (back.critic_flat == pol.critic_flat).all()
    assert (back.obs_rms.mean == pol.obs_rms.mean).all() and back.rew_rms.var == pol.rew_rms.var
    assert back.cfg == pol.cfg
    assert checkpoint.dumps(back, dict(method="egret")) == path.read_text()
    # the loaded parameters are wired into the optimiser buffers
    back.actor.params[0][0, 0] = 42.0
    assert back.actor_flat[0] == 42.0


def test_checkpoint_rejects_wrong_shapes():
    pol = small_policy()
    d = checkpoint.to_dict(pol)
    d["actor"]["layers"][0]["shape"] = [1, 1]
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.from_dict(d)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.from_dict(dict(format="other"))
