"""Objective-weight policy: contextual actor-critic with soft target tracking.

The actor maps [consumer state | context] through three sigmoid hidden
layers to n logits and softmaxes them onto the weight simplex.  The critic
scores [state | weights | context] with the same trunk shape and a linear
scalar head.  Both keep lagged target copies, blended toward the primaries
by `soft_update`.  Training is off-policy from a FIFO replay buffer:

    y      = r + gamma * Q'(s', mu'(s', C'), C')        (r alone if terminal)
    critic : one SGD step on mean |Q(s, a, C) - y|^2
    actor  : one SGD ascent step on mean Q(s, mu(s, C), C)

Updates are isolated: the critic step never moves actor weights and the
actor step never moves critic weights (the critic's intermediate gradients
are cleared so its next update starts clean).  Exploration adds Gaussian
noise to the pre-softmax logits, annealed linearly to zero across the first
half of training.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor, constant
from .encoder import CTX_DIM


@dataclass(frozen=True)
class PolicyConfig:
    n_objectives: int = 2
    state_dim: int = 64
    ctx_dim: int = CTX_DIM
    hidden: int = 64
    replay_capacity: int = 10_000

    def validate(self) -> None:
        if min(self.n_objectives, self.state_dim, self.ctx_dim, self.hidden) < 1:
            raise ValueError("policy dimensions must be positive")
        if self.replay_capacity < 1:
            raise ValueError("replay capacity must be positive")


@dataclass
class ActorCriticParams:
    config: PolicyConfig
    actor: ParameterStore
    critic: ParameterStore
    actor_target: ParameterStore
    critic_target: ParameterStore


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    context: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    next_context: np.ndarray
    terminal: bool = False


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform sampling."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self._buf: deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._buf)

    @property
    def capacity(self) -> int:
        return self._buf.maxlen

    def push(self, t: Transition) -> None:
        if not np.isfinite(t.reward):
            raise ValueError("non-finite reward")
        self._buf.append(t)

    def sample(self, batch: int, rng: np.random.Generator) -> list[Transition]:
        if not self._buf:
            raise ValueError("sampling from an empty replay buffer")
        idx = rng.integers(0, len(self._buf), size=batch)
        return [self._buf[i] for i in idx]


_N_HIDDEN = 3


def _init_mlp(store: ParameterStore, rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int) -> None:
    d = in_dim
    for i in range(1, _N_HIDDEN + 1):
        store.add(f"l{i}_w", ad.uniform_param(rng, (d, hidden)))
        store.add(f"l{i}_b", ad.zero_param((1, hidden)))
        d = hidden
    store.add("out_w", ad.uniform_param(rng, (d, out_dim)))
    store.add("out_b", ad.zero_param((1, out_dim)))


def _mlp(store: ParameterStore, x: Tensor) -> Tensor:
    a = x
    for i in range(1, _N_HIDDEN + 1):
        a = ad.sigmoid(ad.add_row(ad.matmul(a, store[f"l{i}_w"]), store[f"l{i}_b"]))
    return ad.add_row(ad.matmul(a, store["out_w"]), store["out_b"])


def init_policy(config: PolicyConfig, rng: np.random.Generator) -> ActorCriticParams:
    """Primary nets plus target copies initialized as exact snapshots."""
    config.validate()
    actor = ParameterStore()
    critic = ParameterStore()
    _init_mlp(actor, rng, config.state_dim + config.ctx_dim, config.hidden, config.n_objectives)
    _init_mlp(critic, rng, config.state_dim + config.n_objectives + config.ctx_dim, config.hidden, 1)
    return ActorCriticParams(config, actor, critic, actor.snapshot(), critic.snapshot())


def actor_logits(params: ActorCriticParams, s: Tensor, c: Tensor, target: bool = False) -> Tensor:
    cfg = params.config
    if s.shape[1] != cfg.state_dim or c.shape[1] != cfg.ctx_dim:
        raise ad.ShapeError(
            f"actor input widths ({s.shape[1]}, {c.shape[1]}) != configured ({cfg.state_dim}, {cfg.ctx_dim})"
        )
    store = params.actor_target if target else params.actor
    return _mlp(store, ad.concat([s, c], axis=1))


def actor_forward(params: ActorCriticParams, s: Tensor, c: Tensor, target: bool = False) -> Tensor:
    """Objective weights on the simplex, (B, n)."""
    return ad.softmax(actor_logits(params, s, c, target))


def noise_schedule(step: int, total_steps: int, start: float = 0.5) -> float:
    """Linear decay from `start` to zero across the first half of training."""
    if total_steps <= 0:
        return 0.0
    half = 0.5 * total_steps
    return start * max(0.0, 1.0 - step / half)


def select_action(
    params: ActorCriticParams,
    s: np.ndarray,
    c: np.ndarray,
    noise_std: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Exploratory weights: Gaussian noise on logits, then softmax."""
    if noise_std < 0.0:
        raise ValueError("noise_std must be nonnegative")
    logits = actor_logits(params, constant(np.atleast_2d(s)), constant(np.atleast_2d(c))).data
    if noise_std > 0.0:
        logits = logits + rng.normal(0.0, noise_std, size=logits.shape)
    return ad._softmax(logits)


def critic_forward(params: ActorCriticParams, s: Tensor, a: Tensor, c: Tensor, target: bool = False) -> Tensor:
    """Scalar action values, (B, 1)."""
    cfg = params.config
    if a.shape[1] != cfg.n_objectives:
        raise ad.ShapeError(f"action width {a.shape[1]} != {cfg.n_objectives} objectives")
    store = params.critic_target if target else params.critic
    return _mlp(store, ad.concat([s, a, c], axis=1))


def _stack(batch: list[Transition]):
    s = np.stack([t.state for t in batch])
    c = np.stack([t.context for t in batch])
    a = np.stack([t.action for t in batch])
    r = np.array([[t.reward] for t in batch])
    s2 = np.stack([t.next_state for t in batch])
    c2 = np.stack([t.next_context for t in batch])
    live = np.array([[0.0 if t.terminal else 1.0] for t in batch])
    return s, c, a, r, s2, c2, live


def td_targets(params: ActorCriticParams, batch: list[Transition], gamma: float) -> np.ndarray:
    """Bootstrap labels y = r + gamma * Q'(s', mu'(s', C'), C'); r if terminal.

    Evaluated with the target networks and no gradient flow.
    """
    if not batch:
        raise ValueError("empty batch")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    _, _, _, r, s2, c2, live = _stack(batch)
    a2 = actor_forward(params, constant(s2), constant(c2), target=True)
    q2 = critic_forward(params, constant(s2), a2, constant(c2), target=True)
    return r + gamma * live * q2.data


def critic_update(params: ActorCriticParams, batch: list[Transition], lr: float, gamma: float) -> float:
    """One SGD step on the critic's TD error; returns the pre-step MSE."""
    y = td_targets(params, batch, gamma)
    s, c, a, _, _, _, _ = _stack(batch)
    tape = ad.Tape()
    with tape:
        q = critic_forward(params, constant(s), constant(a), constant(c))
        loss = ad.mse_mean(q, constant(y))
    tape.backward(loss, params.critic)
    ad.sgd_step(params.critic, lr)
    return loss.item()


def actor_update(params: ActorCriticParams, batch: list[Transition], lr: float, critic_fn=None) -> float:
    """One SGD ascent step on mean Q under the current actor.

    `critic_fn(s, a, c) -> (B, 1)` may replace the learned critic (used by
    diagnostics); the learned critic's weights are never moved here and its
    leftover gradients are cleared.
    """
    if not batch:
        raise ValueError("empty batch")
    s, c, _, _, _, _, _ = _stack(batch)
    score = critic_fn if critic_fn is not None else (
        lambda st, at, ct: critic_forward(params, st, at, ct)
    )
    mean_row = constant(np.full((1, len(batch)), 1.0 / len(batch)))
    tape = ad.Tape()
    with tape:
        a = actor_forward(params, constant(s), constant(c))
        q = score(constant(s), a, constant(c))
        mean_q = ad.matmul(mean_row, q)
        loss = ad.scale(mean_q, -1.0)
    tape.backward(loss, params.actor)
    ad.sgd_step(params.actor, lr)
    params.critic.zero_grads()
    return mean_q.item()


def soft_update(params: ActorCriticParams, tau: float) -> None:
    """theta_target <- tau * theta + (1 - tau) * theta_target, both nets."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for primary, target in (
        (params.actor, params.actor_target),
        (params.critic, params.critic_target),
    ):
        for name, t in primary.items():
            tgt = target[name]
            tgt.data[:] = tau * t.data + (1.0 - tau) * tgt.data
