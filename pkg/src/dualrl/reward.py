"""Solver and Observer rewards."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rollout import FlatGroup, RolloutTree
from .synthenv import DIGIT, ConfigError, Question, Token, format_score, verify


@dataclass(frozen=True)
class RewardConfig:
    lam: float = 0.9
    leakage_enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")


def solver_reward(answer: Sequence[Token], gold: int, cfg: RewardConfig = RewardConfig()) -> float:
    return cfg.lam * verify(answer, gold) + (1.0 - cfg.lam) * format_score(answer)


def leakage_indicator(question: Question, caption: Sequence[Token]) -> int:
    """A caption leaks when it carries any answer-vocabulary (digit) token."""
    return int(any(t.kind == DIGIT for t in caption))


def observer_reward(tree: RolloutTree, k: int, cfg: RewardConfig = RewardConfig()) -> float:
    """(1 - leak) times the mean verifier score of the answers drawn for caption k."""
    v = tree.vocab
    gold = tree.instance.gold
    scores = [verify(v.decode(a.tokens), gold) for a in tree.utility_answers(k)]
    if not scores:
        raise ValueError(f"caption {k} has no solver rollouts")
    mean = float(np.mean(scores))
    if not cfg.leakage_enabled:
        return mean
    leak = leakage_indicator(tree.instance.question, v.decode(tree.caption_trajs[k].tokens))
    return (1 - leak) * mean


def score_tree(tree: RolloutTree, cfg: RewardConfig = RewardConfig()) -> RolloutTree:
    v = tree.vocab
    gold = tree.instance.gold
    q = tree.instance.question
    tree.solver_rewards = np.array(
        [[solver_reward(v.decode(a.tokens), gold, cfg) for a in row] for row in tree.answer_trajs]
    )
    tree.verifier_scores = np.array(
        [[verify(v.decode(a.tokens), gold) for a in tree.utility_answers(k)] for k in range(tree.G_O)],
        dtype=float,
    )
    tree.leak = np.array([leakage_indicator(q, v.decode(c.tokens)) for c in tree.caption_trajs])
    tree.observer_rewards = np.array([observer_reward(tree, k, cfg) for k in range(tree.G_O)])
    return tree


def score_flat(group: FlatGroup, cfg: RewardConfig = RewardConfig()) -> FlatGroup:
    v = group.vocab
    gold = group.instance.gold
    group.rewards = np.array([solver_reward(v.decode(a.tokens), gold, cfg) for a in group.answer_trajs])
    group.verifier_scores = np.array([verify(v.decode(a.tokens), gold) for a in group.answer_trajs], dtype=float)
    return group
