"""Rollout trees (captions x answers) and flat answer groups."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Generic, Sequence, TypeVar

import numpy as np

from .policy import FeatureMap, PolicyParams, Role, Trajectory, Vocab, sample_batch
from .synthenv import ConfigError, Instance, instance_to_dict

T = TypeVar("T")


@dataclass
class RolloutTree:
    instance: Instance
    caption_trajs: list[Trajectory]
    answer_trajs: list[list[Trajectory]]
    vocab: Vocab
    # answers scored for the Observer's utility; same objects as answer_trajs
    # unless a frozen estimator produced separate ones
    utility_trajs: list[list[Trajectory]] | None = None
    solver_rewards: np.ndarray | None = None  # (G_O, G_S)
    verifier_scores: np.ndarray | None = None  # (G_O, G_S), on utility answers
    leak: np.ndarray | None = None  # (G_O,)
    observer_rewards: np.ndarray | None = None  # (G_O,)
    degenerate: bool = False

    @property
    def G_O(self) -> int:
        return len(self.caption_trajs)

    @property
    def G_S(self) -> int:
        return len(self.answer_trajs[0])

    def utility_answers(self, k: int) -> list[Trajectory]:
        return (self.utility_trajs or self.answer_trajs)[k]


@dataclass
class FlatGroup:
    instance: Instance
    answer_trajs: list[Trajectory]
    vocab: Vocab
    rewards: np.ndarray | None = None
    verifier_scores: np.ndarray | None = None
    degenerate: bool = False


def _make_trajs(samples, role, instances, captions, params, temperature, image_visible):
    out = []
    for (toks, ctxs, lps, trunc, legal), inst, cap, vis in zip(samples, instances, captions, image_visible):
        out.append(Trajectory(
            role, toks, ctxs, lps, inst,
            caption=cap, truncated=trunc, policy_version=params.version,
            temperature=temperature, image_visible=vis, legal=legal,
        ))
    return out


def rollout_prco_batch(
    params: PolicyParams,
    fmap: FeatureMap,
    instances: Sequence[Instance],
    rngs: Sequence[np.random.Generator],
    G_O: int = 4,
    G_S: int = 8,
    image_visible_solver: bool = True,
    temperature: float = 1.0,
    utility_params: PolicyParams | None = None,
) -> list[RolloutTree]:
    """Dual-role rollouts for many instances, batched per role.

    Each instance draws its own uniforms from its own generator, so a tree
    does not depend on which other instances share the batch.
    """
    if G_O < 2 or G_S < 2:
        raise ConfigError(f"group sizes must be >= 2, got G_O={G_O}, G_S={G_S}")
    Lo, Ls = fmap.max_len[Role.OBSERVER], fmap.max_len[Role.SOLVER]
    n = len(instances)
    u_cap, u_ans, u_util = [], [], []
    for rng in rngs:
        u_cap.append(rng.random((G_O, Lo)))
        u_ans.append(rng.random((G_O * G_S, Ls)))
        if utility_params is not None:
            u_util.append(rng.random((G_O * G_S, Ls)))

    cap_inst = [inst for inst in instances for _ in range(G_O)]
    cap_bases = np.stack([fmap.base(Role.OBSERVER, inst, True, None) for inst in cap_inst])
    cap_samples = sample_batch(params, fmap, Role.OBSERVER, cap_bases, np.concatenate(u_cap), temperature)
    captions = _make_trajs(cap_samples, Role.OBSERVER, cap_inst, [None] * len(cap_inst),
                           params, temperature, [True] * len(cap_inst))

    ans_inst, ans_caps, ans_bases = [], [], []
    for j, c in enumerate(captions):
        cap = tuple(int(t) for t in c.tokens)
        base = fmap.base(Role.SOLVER, c.instance, image_visible_solver, cap)
        for _ in range(G_S):
            ans_inst.append(c.instance)
            ans_caps.append(cap)
            ans_bases.append(base)
    ans_bases = np.stack(ans_bases)
    vis = [image_visible_solver] * len(ans_inst)

    def answers(p, uniforms):
        s = sample_batch(p, fmap, Role.SOLVER, ans_bases, np.concatenate(uniforms), temperature)
        return _make_trajs(s, Role.SOLVER, ans_inst, ans_caps, p, temperature, vis)

    ans = answers(params, u_ans)
    util = answers(utility_params, u_util) if utility_params is not None else None

    trees = []
    for i in range(n):
        a = ans[i * G_O * G_S:(i + 1) * G_O * G_S]
        tree = RolloutTree(
            instance=instances[i],
            caption_trajs=captions[i * G_O:(i + 1) * G_O],
            answer_trajs=[a[k * G_S:(k + 1) * G_S] for k in range(G_O)],
            vocab=fmap.vocab,
        )
        if util is not None:
            w = util[i * G_O * G_S:(i + 1) * G_O * G_S]
            tree.utility_trajs = [w[k * G_S:(k + 1) * G_S] for k in range(G_O)]
        trees.append(tree)
    return trees


def rollout_prco(
    params: PolicyParams,
    fmap: FeatureMap,
    instance: Instance,
    G_O: int = 4,
    G_S: int = 8,
    image_visible_solver: bool = True,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
    utility_params: PolicyParams | None = None,
) -> RolloutTree:
    rng = rng if rng is not None else np.random.default_rng()
    return rollout_prco_batch(params, fmap, [instance], [rng], G_O, G_S,
                              image_visible_solver, temperature, utility_params)[0]


def rollout_flat_batch(
    params: PolicyParams,
    fmap: FeatureMap,
    instances: Sequence[Instance],
    rngs: Sequence[np.random.Generator],
    G: int = 8,
    temperature: float = 1.0,
) -> list[FlatGroup]:
    """Solver-role groups conditioned on (image, question) with an empty caption."""
    if G < 2:
        raise ConfigError(f"group size must be >= 2, got G={G}")
    Ls = fmap.max_len[Role.SOLVER]
    us = np.concatenate([rng.random((G, Ls)) for rng in rngs]) if len(rngs) else np.zeros((0, Ls))
    inst = [x for x in instances for _ in range(G)]
    if not inst:
        return []
    bases = np.stack([fmap.base(Role.SOLVER, x, True, ()) for x in instances])
    bases = np.repeat(bases, G, axis=0)
    s = sample_batch(params, fmap, Role.SOLVER, bases, us, temperature)
    trajs = _make_trajs(s, Role.SOLVER, inst, [()] * len(inst), params, temperature, [True] * len(inst))
    return [FlatGroup(x, trajs[i * G:(i + 1) * G], fmap.vocab) for i, x in enumerate(instances)]


def rollout_flat(
    params: PolicyParams,
    fmap: FeatureMap,
    instance: Instance,
    G: int = 8,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
) -> FlatGroup:
    rng = rng if rng is not None else np.random.default_rng()
    return rollout_flat_batch(params, fmap, [instance], [rng], G, temperature)[0]


def _listed(x):
    return None if x is None else np.asarray(x).tolist()


def tree_to_dict(tree: RolloutTree) -> dict:
    """JSON-ready view of a scored tree with tokens rendered as text."""
    v = tree.vocab
    show = lambda tr: [repr(t) for t in v.decode(tr.tokens)]  # noqa: E731
    return {
        "instance": instance_to_dict(tree.instance),
        "captions": [show(c) for c in tree.caption_trajs],
        "answers": [[show(a) for a in row] for row in tree.answer_trajs],
        "solver_rewards": _listed(tree.solver_rewards),
        "observer_rewards": _listed(tree.observer_rewards),
        "leak": _listed(tree.leak),
        "degenerate": tree.degenerate,
    }


def all_equal(rewards) -> bool:
    r = np.asarray(rewards, dtype=float)
    return bool(r.size == 0 or np.all(r == r.flat[0]))


def flat_degenerate(group: FlatGroup) -> bool:
    return all_equal(group.rewards)


def tree_degenerate(tree: RolloutTree) -> bool:
    """No caption has reward spread among its answers and all captions score alike."""
    no_solver_signal = all(all_equal(row) for row in tree.solver_rewards)
    return no_solver_signal and all_equal(tree.observer_rewards)


@dataclass
class Sampled(Generic[T]):
    result: T
    attempts: int
    degenerate: bool


def dynamic_sample(
    generator: Callable[[], T],
    degenerate: Callable[[T], bool],
    max_retries: int = 20,
) -> Sampled[T]:
    """First non-degenerate result within ``1 + max_retries`` draws.

    If every draw is degenerate the last one is returned, flagged.
    """
    if max_retries < 0:
        raise ConfigError("max_retries must be >= 0")
    attempts = 0
    while True:
        result = generator()
        attempts += 1
        bad = degenerate(result)
        if not bad or attempts > max_retries:
            return Sampled(result, attempts, bad)
