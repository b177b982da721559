"""Training loops for dual-role PRCO and the flat GRPO / DAPO baselines."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .advantage import AdvantageBatch, build_flat_advantages, build_prco_advantages
from .metrics import EvalResult, MetricsLog, StepMetrics, eval_instances, evaluate
from .optimize import (
    Aggregation,
    KLMode,
    NonFiniteGradient,
    OptimConfig,
    OptimState,
    apply_update,
    flatten,
    surrogate,
)
from .policy import FeatureConfig, FeatureMap, InitConfig, PolicyParams, Role, init_params, load_params, save_params
from .reward import RewardConfig, score_flat, score_tree
from .rollout import (
    RolloutTree,
    flat_degenerate,
    rollout_flat_batch,
    rollout_prco_batch,
    tree_degenerate,
)
from .synthenv import ConfigError, EnvConfig, generate_instance

log = logging.getLogger(__name__)

ALGORITHMS = ("grpo", "dapo", "prco")
FLAGS = (
    "no_observer_update",
    "no_solver_update",
    "no_warmup",
    "solver_image_never",
    "fixed_utility_estimator",
    "leakage_checker_disabled",
)


@dataclass
class TrainConfig:
    algorithm: str = "prco"
    steps: int = 200
    rollout_batch: int = 32
    G_O: int = 4
    G_S: int = 8
    G: int = 8
    warmup_steps: int = 40
    temperature: float = 1.0
    dynamic_sampling: bool = True
    max_retries: int = 20
    eps_norm: float = 1e-6
    no_observer_update: bool = False
    no_solver_update: bool = False
    no_warmup: bool = False
    solver_image_never: bool = False
    fixed_utility_estimator: bool = False
    leakage_checker_disabled: bool = False
    eval_interval: int = 20
    eval_size: int = 200
    master_seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    init: InitConfig = field(default_factory=InitConfig)

    def __post_init__(self):
        self.algorithm = self.algorithm.lower()
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.no_warmup:
            self.warmup_steps = 0
        if self.steps < 0 or self.rollout_batch < 1:
            raise ConfigError("steps must be >= 0 and rollout_batch >= 1")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ConfigError(f"warmup_steps={self.warmup_steps} must lie in [0, steps={self.steps}]")
        if self.no_observer_update and self.no_solver_update:
            raise ConfigError("no_observer_update and no_solver_update together leave nothing to update")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if self.algorithm == "prco" and (self.G_O < 2 or self.G_S < 2):
            raise ConfigError("G_O and G_S must be >= 2")
        if self.algorithm != "prco" and self.G < 2:
            raise ConfigError("G must be >= 2")

    @property
    def eval_protocol(self) -> str:
        return "dual" if self.algorithm == "prco" else "flat"

    def solver_image_at(self, step: int) -> bool:
        if self.solver_image_never:
            return False
        return step >= self.warmup_steps

    def rollouts_per_step(self) -> int:
        if self.algorithm == "prco":
            return self.rollout_batch * (self.G_O + self.G_O * self.G_S)
        return self.rollout_batch * self.G

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


BASELINE_OPTIM = {
    "grpo": dict(eps_low=0.2, eps_high=0.3, beta=0.01, kl_mode="exact", aggregation="seq_mean_of_means"),
    "dapo": dict(eps_low=0.2, eps_high=0.28, beta=0.0, kl_mode="none", aggregation="token_mean"),
    "prco": dict(eps_low=0.2, eps_high=0.28, beta=0.0, kl_mode="none", aggregation="token_mean"),
}


def preset(algorithm: str = "prco", scale: str = "desk", **overrides) -> TrainConfig:
    """Shipped settings; ``scale="large"`` uses the 384-instance rollout batch."""
    algorithm = algorithm.lower()
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    if scale not in ("desk", "large"):
        raise ConfigError(f"unknown scale {scale!r}")
    optim_kw = dict(BASELINE_OPTIM[algorithm])
    optim_kw.update(overrides.pop("optim", {}))
    kw = dict(
        algorithm=algorithm,
        steps=200,
        rollout_batch={"desk": 32, "large": 384}[scale],
        warmup_steps=40 if algorithm == "prco" else 0,
        dynamic_sampling=algorithm != "grpo",
        optim=OptimConfig(**optim_kw),
    )
    kw.update(overrides)
    return TrainConfig(**kw)


def matched_baseline(prco: TrainConfig, algorithm: str = "grpo", **overrides) -> TrainConfig:
    """Baseline preset whose per-step trajectory count matches ``prco``'s."""
    base = preset(algorithm, steps=prco.steps, G=prco.G, master_seed=prco.master_seed, env=prco.env,
                  reward=prco.reward, features=prco.features, init=prco.init,
                  eval_interval=prco.eval_interval, eval_size=prco.eval_size, temperature=prco.temperature,
                  optim={"learning_rate": prco.optim.learning_rate}, **overrides)
    base.rollout_batch = -(-prco.rollouts_per_step() // base.G)
    return base


# --- state ------------------------------------------------------------------

@dataclass
class TrainState:
    params: PolicyParams
    optim_state: OptimState
    step: int = 0
    fixed: PolicyParams | None = None  # frozen utility estimator


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"training aborted at step {step}: {cause}")
        self.step = step
        self.cause = cause


def new_state(cfg: TrainConfig, fmap: FeatureMap) -> TrainState:
    p = init_params(fmap, cfg.init)
    return TrainState(p, OptimState(), 0, p.copy() if cfg.fixed_utility_estimator else None)


def _step_seq(cfg: TrainConfig, step: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg.master_seed, step])


def _slot_rngs(cfg: TrainConfig, step: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in _step_seq(cfg, step).spawn(n)]


def _fresh_instance(rng: np.random.Generator, env: EnvConfig):
    return generate_instance(int(rng.integers(1 << 40)), env)


def _update(state: TrainState, old: PolicyParams, batch: AdvantageBatch, cfg: TrainConfig, fmap: FeatureMap):
    stale = [e for e in batch.entries if e.traj.policy_version != old.version]
    if stale:
        raise RuntimeError(f"{len(stale)} trajectories were not sampled from the step snapshot")
    tb = flatten(batch, fmap.vocab)
    res = None
    params = state.params
    for _ in range(cfg.optim.update_epochs):
        res = surrogate(params, old, tb, cfg.optim)
        try:
            params = apply_update(params, res.grad, cfg.optim, state.optim_state)
        except NonFiniteGradient as e:
            raise TrainingAborted(state.step, e) from e
    state.params = params
    state.step += 1
    return res, tb


def _round_robin(cfg: TrainConfig, step: int, n: int, roll, degenerate):
    """Per-slot dynamic sampling, batched across slots round by round.

    Every slot draws instances and rollout noise only from its own generator,
    so the outcome equals running ``dynamic_sample`` slot by slot.
    """
    rngs = _slot_rngs(cfg, step, n)
    retries = cfg.max_retries if cfg.dynamic_sampling else 0
    results: list = [None] * n
    attempts = [0] * n
    n_degenerate = 0
    pending = list(range(n))
    while pending:
        insts = [_fresh_instance(rngs[i], cfg.env) for i in pending]
        outs = roll(insts, [rngs[i] for i in pending])
        still = []
        for i, out in zip(pending, outs):
            attempts[i] += 1
            bad = degenerate(out)
            n_degenerate += bad
            out.degenerate = bad
            if bad and attempts[i] <= retries:
                still.append(i)
            else:
                results[i] = out
        pending = still
    return results, rngs, sum(attempts), n_degenerate


def train_step_prco(state: TrainState, cfg: TrainConfig, fmap: FeatureMap,
                    tree_sink: Callable[[int, list[RolloutTree]], None] | None = None) -> StepMetrics:
    step = state.step
    old = state.params.copy()
    vis = cfg.solver_image_at(step)
    rcfg = dataclasses.replace(cfg.reward, leakage_enabled=not cfg.leakage_checker_disabled)
    utility = state.fixed if cfg.fixed_utility_estimator else None

    def roll(insts, rngs):
        trees = rollout_prco_batch(old, fmap, insts, rngs, cfg.G_O, cfg.G_S, vis, cfg.temperature, utility)
        return [score_tree(t, rcfg) for t in trees]

    trees, rngs, attempts, n_deg = _round_robin(cfg, step, cfg.rollout_batch, roll, tree_degenerate)
    if tree_sink is not None:
        tree_sink(step, trees)
    batch = AdvantageBatch()
    for tree, rng in zip(trees, rngs):
        b, _ = build_prco_advantages(tree, rng)
        batch.extend(b)
    if cfg.no_observer_update:
        batch = batch.drop_role(Role.OBSERVER)
    if cfg.no_solver_update:
        batch = batch.drop_role(Role.SOLVER)
    res, tb = _update(state, old, batch, cfg, fmap)
    return StepMetrics(
        step=state.step,
        mean_solver_reward=float(np.mean([t.solver_rewards.mean() for t in trees])),
        mean_observer_reward=float(np.mean([t.observer_rewards.mean() for t in trees])),
        caption_reward_std=float(np.mean([t.observer_rewards.std() for t in trees])),
        leakage_rate=float(np.mean([t.leak.mean() for t in trees])),
        degenerate_group_rate=n_deg / attempts,
        attempts=attempts,
        n_tokens=tb.n_tokens,
        loss=res.loss,
        clip_fraction=res.clip_fraction,
        kl=res.kl,
        solver_image=vis,
    )


def train_step_baseline(state: TrainState, cfg: TrainConfig, fmap: FeatureMap) -> StepMetrics:
    step = state.step
    old = state.params.copy()

    def roll(insts, rngs):
        groups = rollout_flat_batch(old, fmap, insts, rngs, cfg.G, cfg.temperature)
        return [score_flat(g, cfg.reward) for g in groups]

    groups, _, attempts, n_deg = _round_robin(cfg, step, cfg.rollout_batch, roll, flat_degenerate)
    batch = AdvantageBatch()
    for g in groups:
        batch.extend(build_flat_advantages(g.answer_trajs, g.rewards, cfg.eps_norm))
    res, tb = _update(state, old, batch, cfg, fmap)
    return StepMetrics(
        step=state.step,
        mean_solver_reward=float(np.mean([g.rewards.mean() for g in groups])),
        degenerate_group_rate=n_deg / attempts,
        attempts=attempts,
        n_tokens=tb.n_tokens,
        loss=res.loss,
        clip_fraction=res.clip_fraction,
        kl=res.kl,
    )


def train_step(state: TrainState, cfg: TrainConfig, fmap: FeatureMap, tree_sink=None) -> StepMetrics:
    if cfg.algorithm == "prco":
        return train_step_prco(state, cfg, fmap, tree_sink)
    return train_step_baseline(state, cfg, fmap)


# --- runs -------------------------------------------------------------------

@dataclass
class EvalRecord:
    step: int
    accuracy: float
    error_rates: dict[str, float]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclass
class RunResult:
    params: PolicyParams
    metrics: list[StepMetrics]
    evals: list[EvalRecord]
    config: TrainConfig


def run_eval(params: PolicyParams, cfg: TrainConfig, fmap: FeatureMap, eval_set) -> EvalResult:
    return evaluate(params, fmap, eval_set, protocol=cfg.eval_protocol,
                    image_visible_solver=not cfg.solver_image_never)


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_params(state.params, path / "params.txt", algorithm=cfg.algorithm,
                K=cfg.env.K, C=cfg.env.C, S=cfg.env.S)
    arrays = {}
    if state.optim_state.m is not None:
        arrays["m"], arrays["v"] = state.optim_state.m, state.optim_state.v
    if state.fixed is not None:
        arrays["fixed"] = state.fixed.weights
    np.savez(path / "optim.npz", **arrays)
    (path / "state.json").write_text(json.dumps({"step": state.step, "adam_t": state.optim_state.t}) + "\n")


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    params, _ = load_params(path / "params.txt")
    meta = json.loads((path / "state.json").read_text())
    z = np.load(path / "optim.npz")
    ost = OptimState(z["m"] if "m" in z else None, z["v"] if "v" in z else None, meta["adam_t"])
    fixed = PolicyParams(z["fixed"], 0) if "fixed" in z else None
    return TrainState(params, ost, meta["step"], fixed)


def run_training(
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    on_step: Callable[[StepMetrics], None] | None = None,
    eval_set=None,
    tree_sink: Callable[[int, list[RolloutTree]], None] | None = None,
) -> RunResult:
    """Run ``cfg.steps`` updates; evaluates at step 0, every ``eval_interval`` and at the end."""
    fmap = FeatureMap(cfg.env, cfg.features)
    state = load_checkpoint(resume_from) if resume_from else new_state(cfg, fmap)
    if eval_set is None:
        eval_set = eval_instances(cfg.eval_size, cfg.env)
    out = Path(out_dir) if out_dir else None
    mlog = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, default=str, indent=1) + "\n")
        mlog = MetricsLog(out / "metrics.jsonl", out / "metrics.csv")
        open(out / "evals.jsonl", "w").close()

    metrics: list[StepMetrics] = []
    evals: list[EvalRecord] = []

    def do_eval(m: StepMetrics | None):
        r = run_eval(state.params, cfg, fmap, eval_set)
        rec = EvalRecord(state.step, r.accuracy, r.error_rates)
        evals.append(rec)
        if out is not None:
            with open(out / "evals.jsonl", "a") as f:
                f.write(rec.to_json() + "\n")
        if m is not None:
            m.eval_accuracy = r.accuracy
            m.error_rates = r.error_rates

    if cfg.steps > 0 and state.step == 0:
        do_eval(None)
    while state.step < cfg.steps:
        m = train_step(state, cfg, fmap, tree_sink)
        if state.step % cfg.eval_interval == 0 or state.step == cfg.steps:
            do_eval(m)
        metrics.append(m)
        if mlog is not None:
            mlog.append(m)
        if on_step is not None:
            on_step(m)
        log.debug("step %d reward %.3f", m.step, m.mean_solver_reward)
    if out is not None:
        save_params(state.params, out / "params.txt", algorithm=cfg.algorithm,
                    K=cfg.env.K, C=cfg.env.C, S=cfg.env.S)
        save_checkpoint(out / "checkpoint", state, cfg)
    return RunResult(state.params, metrics, evals, cfg)


def default_out_dir() -> Path:
    return Path(os.environ.get("DUALRL_OUT", "runs"))
