"""Clipped surrogate objective, exact KL to the old policy, and the update step."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .advantage import AdvantageBatch
from .policy import PolicyParams, Role, Vocab, log_softmax, masked_logits
from .synthenv import ConfigError


class Aggregation(str, enum.Enum):
    TOKEN_MEAN = "token_mean"
    SEQ_MEAN_OF_MEANS = "seq_mean_of_means"


class KLMode(str, enum.Enum):
    NONE = "none"
    EXACT = "exact"


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    eps_low: float = 0.2
    eps_high: float = 0.28
    beta: float = 0.0
    aggregation: Aggregation = Aggregation.TOKEN_MEAN
    learning_rate: float = 0.05
    update_epochs: int = 1
    kl_mode: KLMode = KLMode.NONE
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        object.__setattr__(self, "kl_mode", KLMode(self.kl_mode))
        if self.eps_low <= 0 or self.eps_high <= 0:
            raise ConfigError("clip thresholds must be > 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.update_epochs < 1:
            raise ConfigError("update_epochs must be >= 1")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TokenBatch:
    """All tokens of an advantage batch, flattened in entry order."""

    phi: np.ndarray  # (N, D)
    tokens: np.ndarray  # (N,)
    legal: np.ndarray  # (N, V) bool
    behavior_logprobs: np.ndarray
    advantages: np.ndarray  # per token (copied from its sequence)
    seq_index: np.ndarray
    seq_lengths: np.ndarray
    temperature: np.ndarray  # per token
    roles: np.ndarray  # per token, 0 observer / 1 solver

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    def weights(self, agg: Aggregation) -> np.ndarray:
        if self.n_tokens == 0:
            return np.zeros(0)
        if agg == Aggregation.TOKEN_MEAN:
            return np.full(self.n_tokens, 1.0 / self.n_tokens)
        n_seq = len(self.seq_lengths)
        return 1.0 / (n_seq * self.seq_lengths[self.seq_index])


def flatten(batch: AdvantageBatch, vocab: Vocab) -> TokenBatch:
    V = len(vocab)
    ents = [e for e in batch.entries if len(e.traj) > 0]
    if not ents:
        D = 0
        return TokenBatch(np.zeros((0, D)), np.zeros(0, np.int64), np.zeros((0, V), bool), np.zeros(0),
                          np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64))
    lengths = np.array([len(e.traj) for e in ents])
    seq = np.repeat(np.arange(len(ents)), lengths)
    role_ix = np.array([0 if e.role == Role.OBSERVER else 1 for e in ents])
    return TokenBatch(
        phi=np.concatenate([e.traj.contexts for e in ents]),
        tokens=np.concatenate([e.traj.tokens for e in ents]),
        legal=np.concatenate([e.traj.legal_masks(vocab) for e in ents]),
        behavior_logprobs=np.concatenate([e.traj.behavior_logprobs for e in ents]),
        advantages=np.repeat([e.advantage for e in ents], lengths).astype(float),
        seq_index=seq,
        seq_lengths=lengths,
        temperature=np.repeat([e.traj.temperature for e in ents], lengths).astype(float),
        roles=role_ix[seq],
    )


@dataclass
class SurrogateResult:
    loss: float
    grad: np.ndarray
    policy_loss: float
    kl: float
    ratios: np.ndarray
    clipped: np.ndarray  # bool per token

    @property
    def clip_fraction(self) -> float:
        return float(self.clipped.mean()) if self.clipped.size else 0.0


def _dist(W: np.ndarray, tb: TokenBatch) -> np.ndarray:
    return log_softmax(masked_logits(W, tb.phi, tb.legal) / tb.temperature[:, None])


def kl_terms(W: np.ndarray, W_old: np.ndarray, tb: TokenBatch) -> tuple[np.ndarray, np.ndarray]:
    """Per-context KL(current || old) and d KL / d logits (before the 1/tau factor)."""
    lp = _dist(W, tb)
    lq = _dist(W_old, tb)
    p = np.exp(lp)
    with np.errstate(invalid="ignore"):
        diff = np.where(tb.legal, lp - lq, 0.0)
    kl = np.sum(p * diff, axis=1)
    dz = p * (diff - kl[:, None])
    return kl, dz


def kl_to_old(params: PolicyParams, old_params: PolicyParams, contexts: TokenBatch) -> float:
    """Mean over contexts of the exact categorical KL between current and old policies."""
    if contexts.n_tokens == 0:
        return 0.0
    kl, _ = kl_terms(params.weights, old_params.weights, contexts)
    return float(np.mean(kl))


def surrogate(params: PolicyParams, old_params: PolicyParams, tb: TokenBatch, cfg: OptimConfig) -> SurrogateResult:
    W = params.weights
    if W.shape != old_params.weights.shape:
        raise ConfigError(f"params {W.shape} and old_params {old_params.weights.shape} differ in shape")
    if tb.n_tokens and tb.phi.shape[1] != W.shape[1]:
        raise ConfigError(f"batch features have dim {tb.phi.shape[1]}, params expect {W.shape[1]}")
    if tb.n_tokens == 0:
        return SurrogateResult(0.0, np.zeros_like(W), 0.0, 0.0, np.zeros(0), np.zeros(0, bool))
    n = tb.n_tokens
    idx = np.arange(n)
    lp = _dist(W, tb)
    logp = lp[idx, tb.tokens]
    ratio = np.exp(logp - tb.behavior_logprobs)
    A = tb.advantages
    lo, hi = 1.0 - cfg.eps_low, 1.0 + cfg.eps_high
    # a ratio exactly on a boundary counts as unclipped
    clipped = ((A > 0) & (ratio > hi)) | ((A < 0) & (ratio < lo))
    obj = np.where(clipped, np.clip(ratio, lo, hi) * A, ratio * A)
    w = tb.weights(cfg.aggregation)
    policy_loss = -float(np.sum(w * obj))

    # d(-w*rho*A)/d logits = -w*A*rho*(onehot - p) / tau on unclipped tokens
    coef = np.where(clipped, 0.0, -w * A * ratio) / tb.temperature
    M = -np.exp(lp) * coef[:, None]
    M[idx, tb.tokens] += coef
    grad = M.T @ tb.phi

    kl = 0.0
    if cfg.kl_mode == KLMode.EXACT and cfg.beta > 0:
        kls, dz = kl_terms(W, old_params.weights, tb)
        kl = float(np.mean(kls))
        grad = grad + cfg.beta * ((dz / tb.temperature[:, None]).T @ tb.phi) / n
    elif cfg.kl_mode == KLMode.EXACT:
        kl = float(np.mean(kl_terms(W, old_params.weights, tb)[0]))
    loss = policy_loss + (cfg.beta * kl if cfg.kl_mode == KLMode.EXACT else 0.0)
    return SurrogateResult(loss, grad, policy_loss, kl, ratio, clipped)


def surrogate_loss(params: PolicyParams, old_params: PolicyParams, batch, cfg: OptimConfig,
                   vocab: Vocab | None = None) -> tuple[float, np.ndarray]:
    """Clipped surrogate loss (plus beta * KL when enabled) and its exact gradient."""
    tb = batch if isinstance(batch, TokenBatch) else flatten(batch, vocab)
    r = surrogate(params, old_params, tb, cfg)
    return r.loss, r.grad


@dataclass
class OptimState:
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def copy(self) -> "OptimState":
        return OptimState(
            None if self.m is None else self.m.copy(),
            None if self.v is None else self.v.copy(),
            self.t,
        )


def apply_update(params: PolicyParams, grad: np.ndarray, cfg: OptimConfig,
                 state: OptimState | None = None) -> PolicyParams:
    """One descent step; mutates ``state`` (Adam moments) and returns new params."""
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"non-finite gradient entries: {int(np.sum(~np.isfinite(grad)))}")
    W = params.weights
    lr = cfg.learning_rate
    if cfg.optimizer == "sgd":
        new = W - lr * grad
    else:
        state = state if state is not None else OptimState()
        if state.m is None:
            state.m = np.zeros_like(W)
            state.v = np.zeros_like(W)
        state.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        state.m = b1 * state.m + (1 - b1) * grad
        state.v = b2 * state.v + (1 - b2) * grad * grad
        mhat = state.m / (1 - b1 ** state.t)
        vhat = state.v / (1 - b2 ** state.t)
        new = W - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    if cfg.weight_decay:
        new = new - lr * cfg.weight_decay * W
    return PolicyParams(new, params.version + 1)
