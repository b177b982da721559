"""Group-relative advantages and role-wise grouping for dual-role trees."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .policy import Role, Trajectory
from .rollout import RolloutTree, all_equal
from .synthenv import ConfigError


def _as_group(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ConfigError(f"a reward group needs at least 2 members, got shape {r.shape}")
    return r


def zscore_advantages(rewards: Sequence[float], eps_norm: float = 1e-6) -> np.ndarray:
    """(r - mean) / (population std + eps_norm)."""
    if eps_norm <= 0:
        raise ConfigError("eps_norm must be > 0")
    r = _as_group(rewards)
    if all_equal(r):
        return np.zeros_like(r)  # exact zeros, free of mean round-off
    return (r - r.mean()) / (r.std() + eps_norm)


def centered_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = _as_group(rewards)
    if all_equal(r):
        return np.zeros_like(r)
    return r - r.mean()


def select_caption_index(tree: RolloutTree, rng: np.random.Generator) -> int | None:
    """Uniform draw among captions whose answer rewards are not all equal."""
    ok = [k for k, row in enumerate(tree.solver_rewards) if not all_equal(row)]
    if not ok:
        return None
    return ok[int(rng.integers(len(ok)))]


@dataclass
class AdvEntry:
    traj: Trajectory
    advantage: float
    role: Role
    group: int


@dataclass
class AdvantageBatch:
    entries: list[AdvEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def _next_group(self) -> int:
        return 1 + max((e.group for e in self.entries), default=-1)

    def extend(self, other: "AdvantageBatch") -> None:
        """Append ``other``, renumbering its groups after ours."""
        off = self._next_group()
        self.entries.extend(AdvEntry(e.traj, e.advantage, e.role, e.group + off) for e in other.entries)

    def add_group(self, trajs: Sequence[Trajectory], advs: Sequence[float], role: Role) -> None:
        gid = self._next_group()
        for t, a in zip(trajs, advs):
            self.entries.append(AdvEntry(t, float(a), role, gid))

    def drop_role(self, role: Role) -> "AdvantageBatch":
        return AdvantageBatch([e for e in self.entries if e.role != role])

    def roles(self) -> set[Role]:
        return {e.role for e in self.entries}

    def group_sums(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for e in self.entries:
            out[e.group] = out.get(e.group, 0.0) + e.advantage
        return out


def build_prco_advantages(tree: RolloutTree, rng: np.random.Generator) -> tuple[AdvantageBatch, int | None]:
    """Centered caption advantages plus centered answer advantages for one selected caption.

    Returns the batch and the selected caption index (None when no caption
    had reward spread, in which case there are no Solver entries).
    """
    if tree.observer_rewards is None or tree.solver_rewards is None:
        raise ValueError("score the tree before building advantages")
    batch = AdvantageBatch()
    batch.add_group(tree.caption_trajs, centered_advantages(tree.observer_rewards), Role.OBSERVER)
    k = select_caption_index(tree, rng)
    if k is not None:
        batch.add_group(tree.answer_trajs[k], centered_advantages(tree.solver_rewards[k]), Role.SOLVER)
    return batch, k


def build_flat_advantages(trajs: Sequence[Trajectory], rewards, eps_norm: float = 1e-6) -> AdvantageBatch:
    batch = AdvantageBatch()
    batch.add_group(trajs, zscore_advantages(rewards, eps_norm), Role.SOLVER)
    return batch
