import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualrl.advantage import (
    AdvantageBatch,
    build_flat_advantages,
    build_prco_advantages,
    centered_advantages,
    select_caption_index,
    zscore_advantages,
)
from dualrl.policy import Role, Trajectory, Vocab
from dualrl.rollout import RolloutTree
from dualrl.synthenv import ConfigError, EnvConfig, generate_instance

rewards_st = st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=16)


def dummy(role=Role.SOLVER, n=2):
    return Trajectory(role, np.zeros(n, np.int64), np.zeros((n, 1)), np.zeros(n), None)


def scored_tree(solver_rewards, observer_rewards):
    sr = np.asarray(solver_rewards, dtype=float)
    G_O, G_S = sr.shape
    return RolloutTree(
        generate_instance(0), [dummy(Role.OBSERVER) for _ in range(G_O)],
        [[dummy() for _ in range(G_S)] for _ in range(G_O)], Vocab(EnvConfig()),
        solver_rewards=sr, observer_rewards=np.asarray(observer_rewards, dtype=float),
    )


def test_zscore_hand_vectors():
    assert np.allclose(zscore_advantages([1, 0]), [0.5 / (0.5 + 1e-6), -0.5 / (0.5 + 1e-6)], atol=1e-12, rtol=0)
    a = zscore_advantages([1, 1, 0, 0])
    assert np.sign(a).tolist() == [1, 1, -1, -1]
    assert abs(a.mean()) < 1e-12
    assert np.all(zscore_advantages([0.3] * 5) == 0)


def test_centered_hand_vectors():
    assert np.allclose(centered_advantages([1, 0, 0, 1]), [0.5, -0.5, -0.5, 0.5], atol=1e-12, rtol=0)
    assert np.allclose(centered_advantages([1, 0, 0, 0]), [0.75, -0.25, -0.25, -0.25], atol=1e-12, rtol=0)
    assert np.all(centered_advantages([0.7] * 3) == 0)


def test_group_size_checks():
    with pytest.raises(ConfigError):
        centered_advantages([1.0])
    with pytest.raises(ConfigError):
        zscore_advantages([1.0, 0.0], eps_norm=0)


@given(rewards_st)
def test_groups_sum_to_zero(r):
    assert abs(zscore_advantages(r).sum()) < 1e-9
    assert abs(centered_advantages(r).sum()) < 1e-9


@given(rewards_st, st.floats(-5, 5))
def test_centering_shift_invariance(r, c):
    assert np.allclose(centered_advantages(np.add(r, c)), centered_advantages(r), atol=1e-9)


@given(rewards_st)
def test_zscore_is_bounded_by_sqrt_group(r):
    # |z_i| <= sqrt(G - 1) for population std
    assert np.all(np.abs(zscore_advantages(r)) <= np.sqrt(len(r) - 1) + 1e-9)


def test_selection_only_qualifying_caption():
    tree = scored_tree([[1, 1], [1, 0.1], [0, 0]], [1, 0.5, 0])
    rng = np.random.default_rng(0)
    assert {select_caption_index(tree, rng) for _ in range(200)} == {1}
    assert select_caption_index(scored_tree([[1, 1], [0, 0]], [1, 0]), rng) is None


def test_selection_is_uniform_over_qualifying():
    tree = scored_tree([[1, 0], [0.1, 0.1], [0, 1], [1, 1]], [0.5, 0, 0.5, 1])
    rng = np.random.default_rng(2024)
    draws = np.array([select_caption_index(tree, rng) for _ in range(10_000)])
    assert set(draws.tolist()) == {0, 2}
    assert abs((draws == 0).mean() - 0.5) <= 0.02


def test_prco_batch_contents():
    tree = scored_tree([[1, 0.1, 1, 0], [1, 1, 1, 1], [0, 0, 0, 0], [0, 0, 0, 0]], [1, 0, 0, 0])
    batch, k = build_prco_advantages(tree, np.random.default_rng(0))
    assert k == 0
    obs = [e.advantage for e in batch.entries if e.role == Role.OBSERVER]
    sol = [e.advantage for e in batch.entries if e.role == Role.SOLVER]
    assert obs == pytest.approx([0.75, -0.25, -0.25, -0.25])
    assert sol == pytest.approx([0.475, -0.425, 0.475, -0.525])
    assert all(e.traj is tree.answer_trajs[0][i] for i, e in enumerate(batch.entries[4:]))
    assert all(abs(s) < 1e-9 for s in batch.group_sums().values())


def test_prco_fully_degenerate_tree():
    tree = scored_tree([[1, 1], [0, 0]], [0.5, 0.5])
    batch, k = build_prco_advantages(tree, np.random.default_rng(0))
    assert k is None
    assert batch.roles() == {Role.OBSERVER}
    assert all(e.advantage == 0 for e in batch.entries)


def test_prco_requires_scored_tree():
    tree = scored_tree([[1, 0]], [1])
    tree.observer_rewards = None
    with pytest.raises(ValueError):
        build_prco_advantages(tree, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.lists(rewards_st, min_size=1, max_size=5))
def test_batch_groups_stay_separate(groups):
    batch = AdvantageBatch()
    for r in groups:
        batch.extend(build_flat_advantages([dummy() for _ in r], r))
    sums = batch.group_sums()
    assert len(sums) == len(groups)
    assert all(abs(s) < 1e-9 for s in sums.values())


def test_drop_role():
    batch = AdvantageBatch()
    batch.add_group([dummy(Role.OBSERVER)] * 2, [1, -1], Role.OBSERVER)
    batch.add_group([dummy()] * 2, [1, -1], Role.SOLVER)
    assert batch.drop_role(Role.OBSERVER).roles() == {Role.SOLVER}
    assert len(batch) == 4
