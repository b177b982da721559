"""Evaluation, error categories, pass@k and per-step training records."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .policy import FeatureMap, PolicyParams, Role, sample_batch
from .synthenv import FACT, Instance, Question, Scene, Token, format_score, slot_attr, verify


class ErrorCategory(str, enum.Enum):
    CORRECT = "correct"
    PERCEPTION = "perception"
    REASONING = "reasoning"
    OTHER = "other"


ERROR_KINDS = (ErrorCategory.PERCEPTION, ErrorCategory.REASONING, ErrorCategory.OTHER)


def caption_contradicts(scene: Scene, caption: Sequence[Token]) -> bool:
    for t in caption:
        if t.kind == FACT and (t.slot >= scene.K or slot_attr(scene.slots[t.slot], t.attr) != t.value):
            return True
    return False


def caption_omits(scene: Scene, question: Question, caption: Sequence[Token]) -> bool:
    """True if some slot lacks a stated value for an attribute kind the question targets."""
    stated = {(t.slot, t.attr) for t in caption if t.kind == FACT}
    return any((i, a) not in stated for i in range(scene.K) for a in question.targeted_attrs)


def categorize_error(scene: Scene, question: Question, caption: Sequence[Token],
                     answer: Sequence[Token], gold: int) -> ErrorCategory:
    if verify(answer, gold):
        return ErrorCategory.CORRECT
    if not format_score(answer):
        return ErrorCategory.OTHER
    if caption_contradicts(scene, caption) or caption_omits(scene, question, caption):
        return ErrorCategory.PERCEPTION
    return ErrorCategory.REASONING


# --- pass@k -----------------------------------------------------------------

def pass_at_k_single(n: int, c: int, k: int) -> Fraction:
    """Exact 1 - C(n-c, k) / C(n, k) as a fraction (Python ints never overflow)."""
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got n={n}, c={c}")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    total = math.comb(n, k)
    return Fraction(total - math.comb(n - c, k), total)


def pass_at_k(counts: Sequence[tuple[int, int]], k: int) -> float:
    """Mean unbiased pass@k over questions, given (samples, correct) per question."""
    if not counts:
        raise ValueError("no questions")
    s = sum((pass_at_k_single(n, c, k) for n, c in counts), Fraction(0))
    return float(s / len(counts))


# --- evaluation -------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    counts: list[tuple[int, int]]  # (samples, correct) per question
    categories: dict[str, int]
    n_answers: int

    @property
    def error_rates(self) -> dict[str, float]:
        return {c.value: self.categories.get(c.value, 0) / self.n_answers for c in ERROR_KINDS}


def eval_instances(n: int, env, base_seed: int = 1 << 41) -> list[Instance]:
    from .synthenv import generate_instance

    return [generate_instance(base_seed + i, env) for i in range(n)]


def evaluate(
    params: PolicyParams,
    fmap: FeatureMap,
    eval_set: Sequence[Instance],
    protocol: str = "dual",
    mode: str = "greedy",
    n: int = 1,
    temperature: float = 1.0,
    image_visible_solver: bool = True,
    seed: int = 0,
    top_p: float = 1.0,
) -> EvalResult:
    """Greedy (argmax every step) or sampled evaluation.

    ``protocol="dual"`` decodes an Observer caption and then a Solver answer;
    ``"flat"`` answers directly from (image, question) with an empty caption.
    """
    if not eval_set:
        raise ValueError("eval_set is empty")
    if protocol not in ("dual", "flat"):
        raise ValueError(f"unknown protocol {protocol!r}")
    greedy = mode == "greedy"
    if greedy:
        n = 1
    elif mode != "sampled":
        raise ValueError(f"unknown mode {mode!r}")
    v = fmap.vocab
    rng = np.random.default_rng([seed, 7])
    insts = [x for x in eval_set for _ in range(n)]
    if protocol == "dual":
        bases = np.stack([fmap.base(Role.OBSERVER, x, True, None) for x in insts])
        u = None if greedy else rng.random((len(insts), fmap.max_len[Role.OBSERVER]))
        caps = [tuple(int(t) for t in s[0]) for s in
                sample_batch(params, fmap, Role.OBSERVER, bases, u, temperature, greedy, top_p)]
        sol_vis = image_visible_solver
    else:
        caps = [()] * len(insts)
        sol_vis = True
    bases = np.stack([fmap.base(Role.SOLVER, x, sol_vis, c) for x, c in zip(insts, caps)])
    u = None if greedy else rng.random((len(insts), fmap.max_len[Role.SOLVER]))
    answers = [s[0] for s in sample_batch(params, fmap, Role.SOLVER, bases, u, temperature, greedy, top_p)]

    cats: dict[str, int] = {c.value: 0 for c in ErrorCategory}
    correct = np.zeros(len(eval_set), dtype=int)
    for j, (x, c, a) in enumerate(zip(insts, caps, answers)):
        ans = v.decode(a)
        cat = categorize_error(x.scene, x.question, v.decode(c), ans, x.gold)
        cats[cat.value] += 1
        correct[j // n] += cat == ErrorCategory.CORRECT
    acc = float(correct.sum() / len(insts))
    return EvalResult(acc, [(n, int(c)) for c in correct], cats, len(insts))


# --- step records -----------------------------------------------------------

@dataclass
class StepMetrics:
    step: int
    mean_solver_reward: float
    mean_observer_reward: float | None = None
    caption_reward_std: float | None = None
    leakage_rate: float | None = None
    eval_accuracy: float | None = None
    error_rates: dict[str, float] | None = None
    degenerate_group_rate: float = 0.0
    attempts: int = 0
    n_tokens: int = 0
    loss: float = 0.0
    clip_fraction: float = 0.0
    kl: float = 0.0
    solver_image: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "StepMetrics":
        d = json.loads(line)
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


CSV_FIELDS = [f.name for f in fields(StepMetrics) if f.name != "error_rates"] + [
    f"error_{c.value}" for c in ERROR_KINDS
]


def csv_row(m: StepMetrics) -> dict:
    d = asdict(m)
    er = d.pop("error_rates") or {}
    for c in ERROR_KINDS:
        d[f"error_{c.value}"] = er.get(c.value)
    return {k: ("" if v is None else v) for k, v in d.items()}


class MetricsLog:
    """Append-only JSON-lines log with a CSV mirror."""

    def __init__(self, jsonl_path, csv_path=None):
        self.jsonl_path = jsonl_path
        self.csv_path = csv_path
        open(jsonl_path, "w").close()
        if csv_path:
            with open(csv_path, "w", newline="") as f:
                csv.DictWriter(f, CSV_FIELDS).writeheader()

    def append(self, m: StepMetrics) -> None:
        with open(self.jsonl_path, "a") as f:
            f.write(m.to_json() + "\n")
        if self.csv_path:
            with open(self.csv_path, "a", newline="") as f:
                csv.DictWriter(f, CSV_FIELDS).writerow(csv_row(m))


def read_metrics(path) -> list[StepMetrics]:
    with open(path) as f:
        return [StepMetrics.from_json(line) for line in f if line.strip()]


def first_drop_below(values: Sequence[float], frac: float = 0.5, window: int = 5) -> int | None:
    """Index where the trailing ``window``-mean first falls below ``frac`` of the first window's mean."""
    x = np.asarray(values, dtype=float)
    if x.size < window:
        return None
    smooth = np.convolve(x, np.ones(window) / window, mode="valid")
    ref = smooth[0]
    hits = np.flatnonzero(smooth < frac * ref)
    return int(hits[0]) + window - 1 if hits.size else None


def plot_curves(series: dict[str, Sequence[float]], path, title: str = "", ylabel: str = "") -> None:
    """Write a line chart (format taken from the file suffix, e.g. .svg)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, ys in series.items():
        ax.plot(range(1, len(ys) + 1), ys, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
