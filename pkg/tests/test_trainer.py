import dataclasses
import json

import numpy as np
import pytest

import dualrl.trainer as tr
from dualrl.advantage import AdvantageBatch
from dualrl.policy import FeatureMap, Role
from dualrl.rollout import rollout_flat
from dualrl.synthenv import ConfigError
from dualrl.trainer import (
    TrainConfig,
    TrainState,
    load_checkpoint,
    matched_baseline,
    new_state,
    preset,
    run_training,
    save_checkpoint,
    train_step,
)


def tiny(algorithm="prco", **kw):
    base = dict(steps=4, rollout_batch=3, G_O=2, G_S=3, G=4, warmup_steps=2 if algorithm == "prco" else 0,
                eval_interval=2, eval_size=20)
    base.update(kw)
    return preset(algorithm, **base)


def test_preset_values():
    p = preset("prco")
    assert (p.steps, p.rollout_batch, p.G_O, p.G_S, p.warmup_steps) == (200, 32, 4, 8, 40)
    assert (p.env.K, p.env.C, p.env.S) == (4, 3, 2)
    assert (p.optim.eps_low, p.optim.eps_high, p.optim.beta) == (0.2, 0.28, 0.0)
    assert p.temperature == 1.0 and p.reward.lam == 0.9
    g = preset("grpo")
    assert g.optim.beta == 0.01 and g.optim.kl_mode.value == "exact" and not g.dynamic_sampling
    d = preset("dapo")
    assert d.optim.eps_high == 0.28 and d.max_retries == 20 and d.dynamic_sampling
    assert preset("prco", "large").rollout_batch == 384


def test_matched_budget():
    p = preset("prco")
    g = matched_baseline(p, "grpo")
    assert p.rollouts_per_step() == 32 * (4 + 32) == 1152
    assert g.rollout_batch * g.G == 1152 and g.algorithm == "grpo"
    assert g.master_seed == p.master_seed and g.features == p.features and g.init == p.init


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(no_observer_update=True, no_solver_update=True)
    with pytest.raises(ConfigError):
        TrainConfig(steps=10, warmup_steps=20)
    with pytest.raises(ConfigError):
        TrainConfig(algorithm="ppo")
    with pytest.raises(ConfigError):
        TrainConfig(G_O=1)
    assert TrainConfig(no_warmup=True).warmup_steps == 0


def test_warmup_schedule():
    cfg = preset("prco")
    assert not cfg.solver_image_at(0) and not cfg.solver_image_at(39)
    assert cfg.solver_image_at(40) and cfg.solver_image_at(199)
    assert preset("prco", no_warmup=True).solver_image_at(0)
    assert not preset("prco", solver_image_never=True).solver_image_at(150)


def test_warmup_hides_scene_from_solver_contexts(monkeypatch):
    seen = []
    real = tr._update

    def spy(state, old, batch, cfg, fmap):
        seen.append((state.step, [e for e in batch.entries if e.role == Role.SOLVER], fmap))
        return real(state, old, batch, cfg, fmap)

    monkeypatch.setattr(tr, "_update", spy)
    run_training(tiny(steps=3, warmup_steps=2))
    for step, ents, fmap in seen:
        scene = np.concatenate([e.traj.contexts[:, fmap.blocks["scene"]] for e in ents])
        assert scene.any() == (step >= 2)


@pytest.mark.parametrize("flag,role", [("no_observer_update", Role.OBSERVER), ("no_solver_update", Role.SOLVER)])
def test_role_ablations_drop_entries(monkeypatch, flag, role):
    roles = []
    real = tr._update

    def spy(state, old, batch, cfg, fmap):
        roles.append(batch.roles())
        return real(state, old, batch, cfg, fmap)

    monkeypatch.setattr(tr, "_update", spy)
    run_training(tiny(steps=2, **{flag: True}))
    assert all(role not in r for r in roles)


def test_fixed_estimator_never_changes():
    cfg = tiny(fixed_utility_estimator=True)
    fmap = FeatureMap(cfg.env, cfg.features)
    state = new_state(cfg, fmap)
    frozen = state.fixed.weights.copy()
    for _ in range(3):
        train_step(state, cfg, fmap)
    assert np.array_equal(state.fixed.weights, frozen)
    assert not np.array_equal(state.params.weights, frozen)


def test_leakage_checker_disabled_runs():
    res = run_training(tiny(steps=2, leakage_checker_disabled=True))
    assert len(res.metrics) == 2


def test_zero_steps():
    cfg = tiny(steps=0, warmup_steps=0)
    res = run_training(cfg)
    fmap = FeatureMap(cfg.env, cfg.features)
    assert res.metrics == [] and res.evals == []
    assert np.array_equal(res.params.weights, new_state(cfg, fmap).params.weights)


@pytest.mark.parametrize("algorithm", ["prco", "grpo", "dapo"])
def test_metrics_logs_are_byte_identical(tmp_path, algorithm):
    cfg = tiny(algorithm)
    run_training(cfg, tmp_path / "a")
    run_training(cfg, tmp_path / "b")
    for name in ("metrics.jsonl", "metrics.csv", "evals.jsonl", "params.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seeds_differ(tmp_path):
    a = run_training(tiny(master_seed=1))
    b = run_training(tiny(master_seed=2))
    assert not np.array_equal(a.params.weights, b.params.weights)


def test_run_outputs(tmp_path):
    cfg = tiny()
    res = run_training(cfg, tmp_path)
    assert [m.step for m in res.metrics] == [1, 2, 3, 4]
    assert [e.step for e in res.evals] == [0, 2, 4]
    assert res.metrics[1].eval_accuracy == res.evals[1].accuracy
    assert res.metrics[0].eval_accuracy is None
    assert res.params.version == 4
    assert json.loads((tmp_path / "config.json").read_text())["algorithm"] == "prco"
    for m in res.metrics:
        assert 0 <= m.mean_solver_reward <= 1 and 0 <= m.mean_observer_reward <= 1
        assert 0 <= m.leakage_rate <= 1 and 0 <= m.degenerate_group_rate <= 1
        assert m.attempts >= cfg.rollout_batch and m.n_tokens > 0
    assert [m.solver_image for m in res.metrics] == [False, False, True, True]


def test_resume_matches_uninterrupted(tmp_path):
    full = run_training(tiny(steps=4), tmp_path / "full")
    run_training(tiny(steps=2), tmp_path / "half")
    resumed = run_training(tiny(steps=4), tmp_path / "rest", resume_from=tmp_path / "half" / "checkpoint")
    assert np.array_equal(full.params.weights, resumed.params.weights)
    assert [m.to_json() for m in full.metrics[2:]] == [m.to_json() for m in resumed.metrics]


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny(fixed_utility_estimator=True)
    fmap = FeatureMap(cfg.env, cfg.features)
    state = new_state(cfg, fmap)
    train_step(state, cfg, fmap)
    save_checkpoint(tmp_path, state, cfg)
    back = load_checkpoint(tmp_path)
    assert back.step == state.step == 1
    assert np.array_equal(back.params.weights, state.params.weights)
    assert np.array_equal(back.optim_state.m, state.optim_state.m) and back.optim_state.t == 1
    assert np.array_equal(back.fixed.weights, state.fixed.weights)


def test_non_finite_gradient_aborts(monkeypatch):
    cfg = tiny()
    fmap = FeatureMap(cfg.env, cfg.features)
    state = new_state(cfg, fmap)
    real = tr.surrogate

    def poisoned(*a, **k):
        r = real(*a, **k)
        r.grad[0, 0] = np.nan
        return r

    monkeypatch.setattr(tr, "surrogate", poisoned)
    with pytest.raises(tr.TrainingAborted) as ei:
        train_step(state, cfg, fmap)
    assert ei.value.step == 0


def test_stale_trajectories_rejected():
    cfg = tiny()
    fmap = FeatureMap(cfg.env, cfg.features)
    state = new_state(cfg, fmap)
    g = rollout_flat(state.params, fmap, tr.eval_instances(1, cfg.env)[0], rng=np.random.default_rng(0))
    batch = AdvantageBatch()
    batch.add_group(g.answer_trajs, np.zeros(len(g.answer_trajs)), Role.SOLVER)
    old = dataclasses.replace(state.params, version=7)
    with pytest.raises(RuntimeError):
        tr._update(state, old, batch, cfg, fmap)
