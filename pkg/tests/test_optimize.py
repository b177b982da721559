import numpy as np
import pytest

from batches import random_batch
from dualrl.advantage import AdvantageBatch
from dualrl.optimize import (
    Aggregation,
    KLMode,
    NonFiniteGradient,
    OptimConfig,
    OptimState,
    apply_update,
    flatten,
    kl_terms,
    kl_to_old,
    surrogate,
    surrogate_loss,
)
from dualrl.policy import FeatureMap, PolicyParams, Role, log_softmax, logprob_and_grad, masked_logits
from dualrl.synthenv import ConfigError, EnvConfig


@pytest.fixture
def small_fmap():
    return FeatureMap(EnvConfig(K=3, C=2, S=2))


def fd_check(cur, old, tb, cfg, rng, n_dirs=3, h=1e-5):
    """Largest relative error between analytic and central-difference directional derivatives."""
    res = surrogate(cur, old, tb, cfg)
    worst, checked = 0.0, 0
    for _ in range(n_dirs):
        U = rng.normal(size=cur.weights.shape)
        lp = surrogate(PolicyParams(cur.weights + h * U), old, tb, cfg)
        lm = surrogate(PolicyParams(cur.weights - h * U), old, tb, cfg)
        if not (np.array_equal(lp.clipped, res.clipped) and np.array_equal(lm.clipped, res.clipped)):
            continue  # the step crossed a clip boundary; the loss has a kink there
        fd = (lp.loss - lm.loss) / (2 * h)
        an = float(np.sum(res.grad * U))
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
        checked += 1
    return worst, checked


@pytest.mark.parametrize("beta", [0.0, 0.01])
@pytest.mark.parametrize("agg", list(Aggregation))
def test_gradient_matches_finite_differences(small_fmap, beta, agg):
    rng = np.random.default_rng(17 + int(beta * 100))
    cfg = OptimConfig(beta=beta, kl_mode="exact" if beta else "none", aggregation=agg)
    for _ in range(5):
        old, cur, _, tb = random_batch(small_fmap, rng, temperature=float(rng.choice([1.0, 0.8])))
        worst, checked = fd_check(cur, old, tb, cfg, rng)
        assert checked > 0 and worst < 1e-5


def test_some_tokens_get_clipped(small_fmap):
    old, cur, _, tb = random_batch(small_fmap, np.random.default_rng(0), drift=0.6)
    res = surrogate(cur, old, tb, OptimConfig())
    assert 0 < res.clipped.sum() < tb.n_tokens


def test_on_policy_matches_reinforce(small_fmap):
    rng = np.random.default_rng(5)
    for agg in Aggregation:
        old, _, batch, tb = random_batch(small_fmap, rng)
        res = surrogate(old, old, tb, OptimConfig(aggregation=agg))
        assert np.all(np.abs(res.ratios - 1) <= 1e-12)
        ents = [e for e in batch.entries if len(e.traj)]
        n_tok = sum(len(e.traj) for e in ents)
        ref = np.zeros_like(old.weights)
        for e in ents:
            _, g = logprob_and_grad(old, e.traj, small_fmap)
            w = 1 / n_tok if agg == Aggregation.TOKEN_MEAN else 1 / (len(ents) * len(e.traj))
            ref -= w * e.advantage * g
        assert np.max(np.abs(res.grad - ref)) <= 1e-10


def test_on_policy_loss_is_zero_for_centered_equal_lengths(small_fmap):
    rng = np.random.default_rng(2)
    old, _, batch, _ = random_batch(small_fmap, rng)
    # keep one solver group whose answers all have the same length
    grp = [e for e in batch.entries if e.role == Role.SOLVER and len(e.traj) == 2][:4]
    b = AdvantageBatch()
    b.add_group([e.traj for e in grp], [1.5, -0.5, -0.5, -0.5], Role.SOLVER)
    loss, _ = surrogate_loss(old, old, b, OptimConfig(), small_fmap.vocab)
    assert abs(loss) < 1e-12


def test_clip_arithmetic(small_fmap):
    old, _, _, tb = random_batch(small_fmap, np.random.default_rng(3))
    lp = log_softmax(masked_logits(old.weights, tb.phi, tb.legal))[np.arange(tb.n_tokens), tb.tokens]
    i = 0
    tb.advantages = np.zeros(tb.n_tokens)
    tb.advantages[i] = 2.0
    tb.behavior_logprobs = lp.copy()
    tb.behavior_logprobs[i] = lp[i] - np.log(1.5)  # ratio 1.5 on token i
    res = surrogate(old, old, tb, OptimConfig())
    assert res.ratios[i] == pytest.approx(1.5)
    assert res.clipped[i] and res.clipped.sum() == 1
    assert res.policy_loss == pytest.approx(-1.28 * 2.0 / tb.n_tokens)
    assert np.all(res.grad == 0)
    # the same ratio with a negative advantage is not clipped (only ratios below 0.8 are)
    tb.advantages[i] = -2.0
    res = surrogate(old, old, tb, OptimConfig())
    assert not res.clipped[i] and np.any(res.grad != 0)


def test_clip_mask_consistent_with_ratios(small_fmap):
    rng = np.random.default_rng(8)
    cfg = OptimConfig()
    for _ in range(5):
        old, cur, _, tb = random_batch(small_fmap, rng, drift=0.5)
        r = surrogate(cur, old, tb, cfg)
        A = tb.advantages
        expect = ((A > 0) & (r.ratios > 1 + cfg.eps_high)) | ((A < 0) & (r.ratios < 1 - cfg.eps_low))
        assert np.array_equal(r.clipped, expect)


def direct_kl(Wp, Wq, tb):
    out = []
    for n in range(tb.n_tokens):
        legal = tb.legal[n]
        zp = (Wp @ tb.phi[n])[legal] / tb.temperature[n]
        zq = (Wq @ tb.phi[n])[legal] / tb.temperature[n]
        p = np.exp(zp - zp.max())
        p /= p.sum()
        q = np.exp(zq - zq.max())
        q /= q.sum()
        out.append(float(np.sum(p * np.log(p / q))))
    return np.array(out)


def test_kl_matches_direct_summation(small_fmap):
    rng = np.random.default_rng(11)
    for _ in range(5):
        old, cur, _, tb = random_batch(small_fmap, rng)
        kl, _ = kl_terms(cur.weights, old.weights, tb)
        ref = direct_kl(cur.weights, old.weights, tb)
        assert np.max(np.abs(kl - ref)) <= 1e-10
        assert np.all(kl >= -1e-15)
        assert kl_to_old(cur, old, tb) == pytest.approx(ref.mean(), abs=1e-12)
        assert kl_to_old(old, old, tb) == 0.0


def test_kl_reported_without_penalty(small_fmap):
    old, cur, _, tb = random_batch(small_fmap, np.random.default_rng(1))
    r0 = surrogate(cur, old, tb, OptimConfig(kl_mode="exact", beta=0.0))
    r1 = surrogate(cur, old, tb, OptimConfig())
    assert r0.kl > 0 and r1.kl == 0
    assert r0.loss == r1.loss


def test_empty_batch(small_fmap):
    tb = flatten(AdvantageBatch(), small_fmap.vocab)
    p = PolicyParams(np.ones((len(small_fmap.vocab), small_fmap.dim)))
    res = surrogate(p, p, tb, OptimConfig())
    assert res.loss == 0 and not res.grad.any()


def test_shape_mismatch(small_fmap):
    old, cur, _, tb = random_batch(small_fmap, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        surrogate(PolicyParams(cur.weights[:, :-1]), old, tb, OptimConfig())


def test_config_validation():
    for bad in (dict(eps_low=0), dict(eps_high=-1), dict(learning_rate=0), dict(beta=-0.1),
                dict(update_epochs=0), dict(optimizer="rmsprop")):
        with pytest.raises(ConfigError):
            OptimConfig(**bad)


def test_sgd_arithmetic():
    p = PolicyParams(np.zeros((2, 3)), 4)
    q = apply_update(p, np.ones((2, 3)), OptimConfig(optimizer="sgd", learning_rate=0.1))
    assert np.allclose(q.weights, -0.1) and q.version == 5
    z = apply_update(p, np.zeros((2, 3)), OptimConfig(optimizer="sgd"))
    assert np.array_equal(z.weights, p.weights) and z.version == 5


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    cfg = OptimConfig(learning_rate=0.01)
    p = PolicyParams(rng.normal(size=(3, 4)))
    st = OptimState()
    m = v = np.zeros((3, 4))
    W = p.weights.copy()
    for t in range(1, 4):
        g = rng.normal(size=(3, 4))
        p = apply_update(p, g, cfg, st)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        W = W - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p.weights, W, atol=1e-14)
    assert st.t == 3


def test_adam_zero_grad_is_noop_and_deterministic():
    p = PolicyParams(np.ones((2, 2)))
    q = apply_update(p, np.zeros((2, 2)), OptimConfig(), OptimState())
    assert np.array_equal(q.weights, p.weights)
    g = np.arange(4.0).reshape(2, 2)
    a = apply_update(p, g, OptimConfig(), OptimState())
    b = apply_update(p, g, OptimConfig(), OptimState())
    assert np.array_equal(a.weights, b.weights)


def test_non_finite_gradient_raises():
    with pytest.raises(NonFiniteGradient):
        apply_update(PolicyParams(np.zeros((1, 2))), np.array([[np.nan, 0.0]]), OptimConfig())


def test_enum_coercion():
    cfg = OptimConfig(aggregation="seq_mean_of_means", kl_mode="exact")
    assert cfg.aggregation is Aggregation.SEQ_MEAN_OF_MEANS and cfg.kl_mode is KLMode.EXACT
