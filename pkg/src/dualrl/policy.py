"""Shared role-conditioned linear-softmax sequence policy.

Logits are ``W @ phi(ctx)`` restricted to the tokens legal for the role; the
distribution at temperature ``tau`` is ``softmax(logits / tau)``. Everything
is exact, so log-probabilities and their gradients can be checked against
finite differences.

Feature blocks (concatenated, fixed order):

    bias | role | position | question | scene | scene x question
    | caption bag | caption support | history bag

``scene`` and ``scene x question`` are zero when the image is hidden.
``caption bag`` and ``caption support`` are zero for the Observer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .synthenv import (
    DIGIT,
    EOC_TOKEN,
    EOS_TOKEN,
    FACT,
    ConfigError,
    EnvConfig,
    Instance,
    Question,
    Scene,
    Token,
    digit,
    fact,
    slot_attr,
)


class Role(str, enum.Enum):
    OBSERVER = "observer"
    SOLVER = "solver"


ROLES = (Role.OBSERVER, Role.SOLVER)


class Vocab:
    """Dense token ids: facts (slot-major, colors then shapes), digits 0..K, EOC, EOS."""

    def __init__(self, env: EnvConfig):
        self.env = env
        toks: list[Token] = []
        for i in range(env.K):
            toks += [fact(i, "color", v) for v in range(env.C)]
            toks += [fact(i, "shape", v) for v in range(env.S)]
        self.n_facts = len(toks)
        toks += [digit(d) for d in range(env.K + 1)]
        toks += [EOC_TOKEN, EOS_TOKEN]
        self.tokens = tuple(toks)
        self._ids = {t: i for i, t in enumerate(toks)}
        self.eoc = self._ids[EOC_TOKEN]
        self.eos = self._ids[EOS_TOKEN]
        self.is_fact = np.array([t.kind == FACT for t in toks])
        self.is_digit = np.array([t.kind == DIGIT for t in toks])
        self.digit_ids = np.flatnonzero(self.is_digit)
        obs = self.is_fact | self.is_digit
        obs[self.eoc] = True
        sol = self.is_fact | self.is_digit
        sol[self.eos] = True
        self.legal = {Role.OBSERVER: obs, Role.SOLVER: sol}
        self.terminal = {Role.OBSERVER: self.eoc, Role.SOLVER: self.eos}

    def __len__(self):
        return len(self.tokens)

    def id(self, tok: Token) -> int:
        return self._ids[tok]

    def encode(self, toks: Sequence[Token]) -> np.ndarray:
        return np.array([self._ids[t] for t in toks], dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> tuple[Token, ...]:
        return tuple(self.tokens[int(i)] for i in ids)


@dataclass(frozen=True)
class FeatureConfig:
    observer_max_len: int = 16
    solver_max_len: int = 4
    # "none": raw slot one-hots only; "agree": per-slot target-agreement flags;
    # "full": (slot attribute value) x (question target value) crosses
    scene_cross: str = "full"
    # "full": counts of every caption token; "digits": digit tokens only, so
    # fact content reaches the Solver solely through the support count
    caption_bag: str = "digits"
    # a caption is a set of facts: an emitted fact is illegal afterwards
    observer_no_repeat: bool = True

    def __post_init__(self):
        if self.scene_cross not in ("none", "agree", "full"):
            raise ConfigError(f"unknown scene_cross {self.scene_cross!r}")
        if self.caption_bag not in ("full", "digits"):
            raise ConfigError(f"unknown caption_bag {self.caption_bag!r}")
        if self.observer_max_len < 1 or self.solver_max_len < 2:
            raise ConfigError("max lengths must allow at least one observer token and digit+EOS")


class FeatureMap:
    def __init__(self, env: EnvConfig, fcfg: FeatureConfig | None = None):
        self.env = env
        self.fcfg = fcfg or FeatureConfig()
        self.vocab = Vocab(env)
        K, C, S, V = env.K, env.C, env.S, len(self.vocab)
        self.max_len = {Role.OBSERVER: self.fcfg.observer_max_len, Role.SOLVER: self.fcfg.solver_max_len}
        L = max(self.max_len.values())
        if self.fcfg.scene_cross == "full":
            n_cross = K * C * C + K * S * S
        elif self.fcfg.scene_cross == "agree":
            n_cross = 2 * K
        else:
            n_cross = 0
        sizes = [
            ("bias", 1),
            ("role", 2),
            ("position", L),
            ("question", 3 + C + S),
            ("scene", K * (C + S)),
            ("scene_cross", n_cross),
            ("caption", V if self.fcfg.caption_bag == "full" else K + 1),
            ("support", K + 1),
            ("history", V),
        ]
        self.blocks: dict[str, slice] = {}
        off = 0
        for name, n in sizes:
            self.blocks[name] = slice(off, off + n)
            off += n
        self.dim = off

    def _at(self, block: str, i: int = 0) -> int:
        return self.blocks[block].start + i

    # -- pieces ---------------------------------------------------------------

    def question_vec(self, q: Question, out: np.ndarray) -> None:
        C = self.env.C
        kinds = ("count_color", "count_shape", "count_color_shape")
        out[self._at("question", kinds.index(q.kind.value))] = 1.0
        if q.target_color is not None:
            out[self._at("question", 3 + q.target_color)] = 1.0
        if q.target_shape is not None:
            out[self._at("question", 3 + C + q.target_shape)] = 1.0

    def scene_vec(self, scene: Scene, q: Question, out: np.ndarray) -> None:
        K, C, S = self.env.K, self.env.C, self.env.S
        if scene.K != K:
            raise ConfigError(f"scene has {scene.K} slots, feature map expects {K}")
        for i, s in enumerate(scene.slots):
            out[self._at("scene", i * (C + S) + s.color)] = 1.0
            out[self._at("scene", i * (C + S) + C + s.shape)] = 1.0
        mode = self.fcfg.scene_cross
        if mode == "agree":
            for i, s in enumerate(scene.slots):
                if q.target_color is not None and s.color == q.target_color:
                    out[self._at("scene_cross", 2 * i)] = 1.0
                if q.target_shape is not None and s.shape == q.target_shape:
                    out[self._at("scene_cross", 2 * i + 1)] = 1.0
        elif mode == "full":
            shape_off = K * C * C
            for i, s in enumerate(scene.slots):
                if q.target_color is not None:
                    out[self._at("scene_cross", (i * C + s.color) * C + q.target_color)] = 1.0
                if q.target_shape is not None:
                    out[self._at("scene_cross", shape_off + (i * S + s.shape) * S + q.target_shape)] = 1.0

    def caption_vec(self, q: Question, caption: Sequence[int], out: np.ndarray) -> None:
        v = self.vocab
        for t in caption:
            t = int(t)
            if self.fcfg.caption_bag == "full":
                out[self._at("caption", t)] += 1.0
            elif v.is_digit[t]:
                out[self._at("caption", t - v.n_facts)] += 1.0
        if len(caption):  # no caption at all carries no evidence
            out[self._at("support", support_count(q, self.vocab.decode(caption), self.env.K))] = 1.0

    def base(self, role: Role, inst: Instance, image_visible: bool, caption: Sequence[int] | None) -> np.ndarray:
        """Features that stay fixed over one sequence (no position, no history)."""
        out = np.zeros(self.dim)
        out[self._at("bias")] = 1.0
        out[self._at("role", ROLES.index(role))] = 1.0
        self.question_vec(inst.question, out)
        if image_visible:
            self.scene_vec(inst.scene, inst.question, out)
        if role == Role.SOLVER:
            self.caption_vec(inst.question, caption if caption is not None else (), out)
        return out

    def legal(self, role: Role, history: np.ndarray) -> np.ndarray:
        """Legal-token mask for each row of ``history`` (token counts so far)."""
        base = self.vocab.legal[role]
        history = np.asarray(history)
        mask = np.broadcast_to(base, history.shape).copy()
        if role == Role.OBSERVER and self.fcfg.observer_no_repeat:
            mask &= ~(self.vocab.is_fact & (history > 0))
        return mask

    def step(self, base: np.ndarray, history: np.ndarray, t: int) -> np.ndarray:
        """Full features for position ``t``; ``history`` holds token counts (rows x V)."""
        phi = np.array(base, dtype=float, copy=True)
        phi[..., self._at("position", t)] = 1.0
        phi[..., self.blocks["history"]] += history
        return phi


def support_count(q: Question, caption: Sequence[Token], K: int) -> int:
    """Number of slots the caption asserts to carry every targeted attribute value."""
    asserted: set[tuple[int, str, int]] = {(t.slot, t.attr, t.value) for t in caption if t.kind == FACT}
    n = 0
    for i in range(K):
        if all((i, a, q.target(a)) in asserted for a in q.targeted_attrs):
            n += 1
    return n


@dataclass
class Context:
    """One decision point; ``features`` turns it into phi."""

    role: Role
    instance: Instance
    image_visible: bool
    caption: tuple[int, ...] | None
    history: tuple[int, ...]
    position: int

    def history_counts(self, fmap: FeatureMap) -> np.ndarray:
        hist = np.zeros(len(fmap.vocab))
        for t in self.history:
            hist[t] += 1
        return hist

    def features(self, fmap: FeatureMap) -> np.ndarray:
        hist = self.history_counts(fmap)
        return fmap.step(fmap.base(self.role, self.instance, self.image_visible, self.caption), hist, self.position)


@dataclass
class PolicyParams:
    weights: np.ndarray
    version: int = 0

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.weights.copy(), self.version)


@dataclass
class Trajectory:
    role: Role
    tokens: np.ndarray
    contexts: np.ndarray  # (T, D) features used at each emission
    behavior_logprobs: np.ndarray
    instance: Instance
    caption: tuple[int, ...] | None = None
    truncated: bool = False
    policy_version: int = 0
    temperature: float = 1.0
    image_visible: bool = True
    legal: np.ndarray | None = None  # (T, V) masks in force at each emission

    def __post_init__(self):
        n = len(self.tokens)
        if self.contexts.shape[0] != n or len(self.behavior_logprobs) != n:
            raise ValueError("tokens, contexts and behavior_logprobs must have equal length")
        if self.legal is not None and self.legal.shape[0] != n:
            raise ValueError("legal masks must have one row per token")

    def legal_masks(self, vocab: Vocab) -> np.ndarray:
        if self.legal is not None:
            return self.legal
        return np.broadcast_to(vocab.legal[self.role], (len(self.tokens), len(vocab)))

    def __len__(self):
        return len(self.tokens)


# --- distributions ----------------------------------------------------------

def _check_dims(params: PolicyParams, fmap: FeatureMap | None = None, dim: int | None = None) -> None:
    if fmap is not None and params.weights.shape != (len(fmap.vocab), fmap.dim):
        raise ConfigError(f"params shape {params.weights.shape} != ({len(fmap.vocab)}, {fmap.dim})")
    if dim is not None and params.weights.shape[1] != dim:
        raise ConfigError(f"feature length {dim} != params feature_dim {params.weights.shape[1]}")


def masked_logits(weights: np.ndarray, phi: np.ndarray, legal: np.ndarray) -> np.ndarray:
    z = phi @ weights.T
    return np.where(legal, z, -np.inf)


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    s = z - m
    with np.errstate(invalid="ignore"):
        lse = np.log(np.sum(np.exp(s), axis=-1, keepdims=True))
    return s - lse


def logits(params: PolicyParams, ctx: Context, fmap: FeatureMap) -> np.ndarray:
    """Role-masked logits; illegal tokens are -inf."""
    phi = ctx.features(fmap)
    _check_dims(params, fmap)
    return masked_logits(params.weights, phi, fmap.legal(ctx.role, ctx.history_counts(fmap)))


def probs_from_logits(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax(z / temperature))


# --- sampling ---------------------------------------------------------------

def sample_batch(
    params: PolicyParams,
    fmap: FeatureMap,
    role: Role,
    bases: np.ndarray,
    uniforms: np.ndarray | None,
    temperature: float = 1.0,
    greedy: bool = False,
    top_p: float = 1.0,
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, bool]]:
    """Sample one sequence per row of ``bases``.

    ``uniforms`` has one pre-drawn U(0,1) per (row, position); passing them in
    makes every row's outcome independent of how rows are batched.
    Returns (tokens, contexts, behavior_logprobs, truncated, legal masks) per row.
    """
    if not greedy and temperature <= 0:
        raise ConfigError("temperature must be > 0 when sampling")
    B = bases.shape[0]
    V = len(fmap.vocab)
    L = fmap.max_len[role]
    stop = fmap.vocab.terminal[role]
    W = params.weights
    _check_dims(params, dim=bases.shape[1])
    tau = 1.0 if greedy else temperature
    hist = np.zeros((B, V))
    toks = np.full((B, L), -1, dtype=np.int64)
    lps = np.zeros((B, L))
    ctxs = np.zeros((B, L, fmap.dim))
    masks = np.zeros((B, L, V), dtype=bool)
    lengths = np.zeros(B, dtype=np.int64)
    active = np.ones(B, dtype=bool)
    for t in range(L):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        phi = fmap.step(bases[rows], hist[rows], t)
        legal = fmap.legal(role, hist[rows])
        logp = log_softmax(masked_logits(W, phi, legal) / tau)
        if greedy:
            choice = np.argmax(logp, axis=1)
        else:
            p = np.exp(logp)
            if top_p < 1.0:
                p = _nucleus(p, top_p)
            cdf = np.cumsum(p, axis=1)
            u = uniforms[rows, t] * cdf[:, -1]
            choice = np.minimum((cdf < u[:, None]).sum(axis=1), V - 1)
            # never land on a zero-probability token through rounding
            bad = p[np.arange(rows.size), choice] == 0
            if bad.any():
                choice[bad] = np.argmax(p[bad], axis=1)
        toks[rows, t] = choice
        lps[rows, t] = logp[np.arange(rows.size), choice]
        ctxs[rows, t] = phi
        masks[rows, t] = legal
        lengths[rows] = t + 1
        hist[rows, choice] += 1
        active[rows[choice == stop]] = False
    out = []
    for b in range(B):
        n = lengths[b]
        out.append((toks[b, :n].copy(), ctxs[b, :n].copy(), lps[b, :n].copy(), bool(toks[b, n - 1] != stop),
                    masks[b, :n].copy()))
    return out


def _nucleus(p: np.ndarray, top_p: float) -> np.ndarray:
    order = np.argsort(-p, axis=1, kind="stable")
    sp = np.take_along_axis(p, order, axis=1)
    keep_sorted = (np.cumsum(sp, axis=1) - sp) < top_p
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=1)
    q = np.where(keep, p, 0.0)
    return q / q.sum(axis=1, keepdims=True)


def sample_sequence(
    params: PolicyParams,
    fmap: FeatureMap,
    role: Role,
    instance: Instance,
    image_visible: bool,
    caption: Sequence[int] | None,
    temperature: float,
    rng: np.random.Generator,
    greedy: bool = False,
) -> Trajectory:
    if role == Role.SOLVER and caption is None:
        raise ConfigError("the solver needs a caption (pass () for an empty one)")
    role = Role(role)
    base = fmap.base(role, instance, image_visible, caption)[None]
    u = rng.random((1, fmap.max_len[role]))
    (toks, ctxs, lps, trunc, legal), = sample_batch(params, fmap, role, base, u, temperature, greedy)
    return Trajectory(
        role, toks, ctxs, lps, instance,
        caption=tuple(int(c) for c in caption) if caption is not None else None,
        truncated=trunc, policy_version=params.version, temperature=temperature,
        image_visible=image_visible, legal=legal,
    )


# --- log-probabilities and gradients ----------------------------------------

def logprob_and_grad(params: PolicyParams, traj: Trajectory, fmap: FeatureMap) -> tuple[float, np.ndarray]:
    """Sum of token log-probs and its exact gradient w.r.t. the weights."""
    _check_dims(params, dim=traj.contexts.shape[1])
    legal = traj.legal_masks(fmap.vocab)
    tau = traj.temperature
    logp = log_softmax(masked_logits(params.weights, traj.contexts, legal) / tau)
    idx = np.arange(len(traj.tokens))
    total = float(logp[idx, traj.tokens].sum())
    resid = -np.exp(logp)
    resid[idx, traj.tokens] += 1.0
    grad = resid.T @ traj.contexts / tau
    return total, grad


# --- initialization and persistence -----------------------------------------

@dataclass(frozen=True)
class InitConfig:
    """Hand-set starting point standing in for a pretrained base model.

    ``format_prior`` makes the Solver mostly emit ``DIGIT EOS`` and keeps the
    Observer away from digits; ``perception_prior`` nudges the Observer toward
    facts that are true in the visible scene. ``reading_prior`` ties the
    caption support count ``d`` to the digit ``d``. ``noise`` adds N(0, noise^2).
    """

    format_prior: float = 1.0
    perception_prior: float = 1.4
    reading_prior: float = 2.0
    noise: float = 0.0
    seed: int = 0


def init_params(fmap: FeatureMap, icfg: InitConfig | None = None) -> PolicyParams:
    icfg = icfg or InitConfig()
    v = fmap.vocab
    W = np.zeros((len(v), fmap.dim))
    f = icfg.format_prior
    ro, rs = fmap._at("role", 0), fmap._at("role", 1)
    W[v.is_digit, ro] -= 3.0 * f
    W[v.eoc, ro] += 1.5 * f
    W[v.is_digit, rs] += 2.0 * f
    W[v.is_fact, rs] -= 2.0 * f
    W[v.eos, fmap._at("position", 0)] -= 3.0 * f
    for t in range(1, max(fmap.max_len.values())):
        W[v.eos, fmap._at("position", t)] += 4.0 * f
        W[v.is_digit, fmap._at("position", t)] -= 2.0 * f
    p = icfg.perception_prior
    if p:
        # each fact gets at most +p from the scene; the Solver role takes it back
        W[v.is_fact, rs] -= p
        C, S = fmap.env.C, fmap.env.S
        for i in range(fmap.env.K):
            for c in range(C):
                W[v.id(fact(i, "color", c)), fmap._at("scene", i * (C + S) + c)] += p
            for s in range(S):
                W[v.id(fact(i, "shape", s)), fmap._at("scene", i * (C + S) + C + s)] += p
    if icfg.reading_prior:
        r = icfg.reading_prior
        for d in range(fmap.env.K + 1):
            W[v.id(digit(d)), fmap._at("support", d)] += r
        # only the first answer token should read the caption
        for t in range(1, max(fmap.max_len.values())):
            W[v.is_digit, fmap._at("position", t)] -= r
    if icfg.noise:
        W += np.random.default_rng(icfg.seed).normal(0.0, icfg.noise, W.shape)
    return PolicyParams(W, 0)


PARAMS_MAGIC = "# dualrl-params v1"


def save_params(params: PolicyParams, path, **meta) -> None:
    """Text matrix: a header line of key=value pairs, then one row per token."""
    V, D = params.weights.shape
    head = {"vocab": V, "feature_dim": D, "version": params.version, **meta}
    with open(path, "w") as fh:
        fh.write(PARAMS_MAGIC + " " + " ".join(f"{k}={v}" for k, v in head.items()) + "\n")
        for row in params.weights:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_params(path) -> tuple[PolicyParams, dict[str, str]]:
    with open(path) as fh:
        head = fh.readline().strip()
        if not head.startswith(PARAMS_MAGIC):
            raise ValueError(f"{path}: not a params file")
        meta = dict(kv.split("=", 1) for kv in head[len(PARAMS_MAGIC):].split())
        rows = [[float(x) for x in line.split()] for line in fh if line.strip()]
    W = np.array(rows, dtype=float)
    V, D = int(meta["vocab"]), int(meta["feature_dim"])
    if W.shape != (V, D):
        raise ValueError(f"{path}: header says {V}x{D}, body is {W.shape}")
    return PolicyParams(W, int(meta["version"])), meta
