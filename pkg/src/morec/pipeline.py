"""End-to-end recommendation loop.

Per interaction: encode the consumer's recent history into a state, predict
per-objective values for every candidate, obtain objective weights, rank by
utility sum_k alpha_k * yhat_k, recommend the top-K slate, observe the
consumed item's realized objectives, and store both a supervised example
(for the predictor) and a transition (for the policy).  Training
interleaves one environment step with one update of each learner
(predictor, critic, actor, soft target sync).

Modes
-----
adaptive : hypernetwork predictor + actor-critic weights (the full model)
fixed    : shared-bottom predictor + a constant weight vector
random   : uniformly random slates (no learner involved in ranking)

Ablation variants: 1 disables the encoder's self-attention, 2 removes the
time gate, 4 swaps the predictor for the shared-bottom net.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor, constant
from .encoder import (
    CTX_DIM,
    EncoderConfig,
    EncoderParams,
    encode_arrays,
    history_arrays,
    init_encoder,
)
from .policy import (
    ActorCriticParams,
    PolicyConfig,
    ReplayBuffer,
    Transition,
    actor_update,
    critic_update,
    init_policy,
    noise_schedule,
    select_action,
    soft_update,
)
from .predictor import (
    HyperNetParams,
    PredictorConfig,
    SharedBottomParams,
    init_hypernet,
    init_shared_bottom,
    l1_batch_loss,
    predict,
    shared_bottom_predict,
)
from .rng import substream
from .simenv import InteractionRecord, World, context_vec, tradeoff_coeff
from .simenv import step as world_step


class PipelineError(RuntimeError):
    """Training divergence or pipeline contract violation."""


_MODES = ("adaptive", "fixed", "random")


@dataclass(frozen=True)
class PipelineConfig:
    n_objectives: int = 2
    top_k: int = 1
    history_window: int = 10
    candidate_pool: int | None = None  # None = full catalog
    # shared hyperparameters
    lr: float = 0.01
    gamma: float = 0.99
    tau: float = 0.05
    hidden: int = 64
    batch_size: int = 32
    # encoder / predictor widths
    embed_dim: int = 16
    enc_input_dim: int = 32
    gen_hidden: int = 64
    target_hidden: int = 16
    embed_e: int = 16
    trunk_hidden: int = 64
    mixture: bool = True
    attention_sign: str = "similarity"
    # policy
    replay_capacity: int = 10_000
    noise_start: float = 0.5
    # training / evaluation spans
    train_steps: int = 2000
    eval_steps: int = 30
    # ablation flags
    attention_off: bool = False
    time_gate_off: bool = False
    shared_bottom_on: bool = False
    # baseline switches
    mode: str = "adaptive"
    alpha_fixed: tuple[float, ...] | None = None
    # feed the true trade-off coefficient c(u, i, t) to the predictor
    informed: bool = False
    reward_weights: tuple[float, ...] | None = None
    seed: int = 0

    def validate(self, n_items: int | None = None) -> None:
        if self.mode not in _MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n_objectives < 1 or self.top_k < 1 or self.history_window < 1:
            raise ValueError("counts must be positive")
        if self.train_steps < 0 or self.eval_steps < 1 or self.batch_size < 1:
            raise ValueError("bad step counts")
        pool = self.candidate_pool
        if pool is not None and self.top_k > pool:
            raise ValueError("top_k exceeds candidate pool")
        if n_items is not None and self.top_k > n_items:
            raise ValueError("top_k exceeds catalog")
        if self.mode == "fixed":
            if self.alpha_fixed is None:
                raise ValueError("fixed mode needs alpha_fixed")
            a = np.asarray(self.alpha_fixed, dtype=np.float64)
            if a.shape != (self.n_objectives,) or np.any(a < 0.0) or abs(a.sum() - 1.0) > 1e-9:
                raise ValueError("alpha_fixed must lie on the weight simplex")
        if self.reward_weights is not None:
            w = np.asarray(self.reward_weights, dtype=np.float64)
            if w.shape != (self.n_objectives,) or np.any(w < 0.0):
                raise ValueError("reward_weights must be nonnegative, one per objective")

    @property
    def uses_hypernet(self) -> bool:
        return self.mode == "adaptive" and not self.shared_bottom_on

    @property
    def uses_policy(self) -> bool:
        return self.mode == "adaptive"


@dataclass(frozen=True)
class SupExample:
    """Encoder inputs at interaction time plus the realized outcome."""

    ids: np.ndarray      # (W,)
    deltas: np.ndarray   # (W,)
    ctxs: np.ndarray     # (W, CTX_DIM)
    item: int
    y: np.ndarray        # (n,)
    extra: np.ndarray | None = None


@dataclass
class Learners:
    config: PipelineConfig
    encoder: EncoderParams
    hyper: HyperNetParams | None
    shared: SharedBottomParams | None
    policy: ActorCriticParams | None
    replay: ReplayBuffer
    supervised: deque = field(default_factory=lambda: deque(maxlen=10_000))

    def stores(self) -> dict[str, ParameterStore]:
        out = {"encoder": self.encoder.store}
        if self.hyper is not None:
            out["predictor"] = self.hyper.store
        if self.shared is not None:
            out["predictor"] = self.shared.store
        if self.policy is not None:
            out["actor"] = self.policy.actor
            out["critic"] = self.policy.critic
            out["actor_target"] = self.policy.actor_target
            out["critic_target"] = self.policy.critic_target
        return out


@dataclass
class EpisodeResult:
    user_id: int
    slates: list[list[int]]
    consumed: list[int]
    realized: np.ndarray   # (T, n)
    predicted: np.ndarray  # (T, n); NaN when no predictor ranks (random mode)
    alphas: np.ndarray     # (T, n)
    means: np.ndarray      # (n,)
    metadata: dict[str, str] = field(default_factory=dict)


def init_learners(world: World, config: PipelineConfig) -> Learners:
    config.validate(world.config.n_items)
    if config.n_objectives != world.config.n_objectives:
        raise ValueError("pipeline and world disagree on objective count")
    enc_cfg = EncoderConfig(
        n_items=world.config.n_items,
        embed_dim=config.embed_dim,
        input_dim=config.enc_input_dim,
        hidden=config.hidden,
        window=config.history_window,
        attention=not config.attention_off,
        time_gate=not config.time_gate_off,
        attention_sign=config.attention_sign,
    )
    encoder = init_encoder(enc_cfg, substream(config.seed, "init", "encoder"))
    pred_cfg = PredictorConfig(
        n_objectives=config.n_objectives,
        state_dim=config.hidden,
        item_dim=config.embed_dim,
        extra_dim=1 if config.informed else 0,
        gen_hidden=config.gen_hidden,
        target_hidden=config.target_hidden,
        embed_e=config.embed_e,
        mixture=config.mixture,
    )
    hyper = shared = None
    if config.uses_hypernet:
        hyper = init_hypernet(pred_cfg, substream(config.seed, "init", "predictor"))
    else:
        shared = init_shared_bottom(
            pred_cfg, substream(config.seed, "init", "predictor"), trunk_hidden=config.trunk_hidden
        )
    policy = None
    if config.uses_policy:
        policy = init_policy(
            PolicyConfig(
                n_objectives=config.n_objectives,
                state_dim=config.hidden,
                ctx_dim=CTX_DIM,
                hidden=config.hidden,
                replay_capacity=config.replay_capacity,
            ),
            substream(config.seed, "init", "policy"),
        )
    return Learners(
        config=config,
        encoder=encoder,
        hyper=hyper,
        shared=shared,
        policy=policy,
        replay=ReplayBuffer(config.replay_capacity),
        supervised=deque(maxlen=config.replay_capacity),
    )


def encode_state(learners: Learners, history: list[InteractionRecord], ctx: np.ndarray) -> np.ndarray:
    """Consumer state for one history, untracked; shape (1, hidden)."""
    ids, deltas, ctxs = history_arrays([history], learners.config.history_window, [ctx])
    return encode_arrays(learners.encoder, ids, deltas, ctxs).data


def _predict_batch(learners: Learners, s_u: Tensor, s_i: Tensor, extra: Tensor | None) -> Tensor:
    if learners.hyper is not None:
        return predict(learners.hyper, s_u, s_i, extra).y_hat
    return shared_bottom_predict(learners.shared, s_u, s_i, extra)


def score_candidates(
    learners: Learners,
    s_u: np.ndarray,
    candidates,
    alpha: np.ndarray,
    extra: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rank candidates by utility sum_k alpha_k yhat_k, descending.

    Ties break toward the smaller item id.  Returns (ranked ids, utilities,
    predicted values), all in ranked order.
    """
    cand = np.asarray(list(candidates), dtype=np.intp)
    if cand.size == 0:
        raise ValueError("empty candidate set")
    n_items = learners.encoder.config.n_items
    if np.any(cand < 0) or np.any(cand >= n_items):
        raise LookupError("candidate outside catalog")
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (learners.config.n_objectives,) or np.any(alpha < -1e-12):
        raise ValueError("alpha must be a nonnegative weight vector")
    if abs(alpha.sum() - 1.0) > 1e-6:
        raise ValueError("alpha must lie on the simplex")
    s_rows = constant(np.repeat(np.atleast_2d(s_u), cand.size, axis=0))
    items = constant(learners.encoder.store["encoder/embed"].data[cand])
    extra_t = None if extra is None else constant(np.asarray(extra, dtype=np.float64).reshape(cand.size, -1))
    y_hat = _predict_batch(learners, s_rows, items, extra_t).data
    utils = y_hat @ alpha
    order = np.lexsort((cand, -utils))
    return cand[order], utils[order], y_hat[order]


def _reward(config: PipelineConfig, objectives: np.ndarray) -> float:
    if config.reward_weights is None:
        return float(objectives.sum())
    return float(np.dot(np.asarray(config.reward_weights), objectives))


def _candidates(world: World, config: PipelineConfig, rng: np.random.Generator) -> np.ndarray:
    n = world.config.n_items
    if config.candidate_pool is None or config.candidate_pool >= n:
        return np.arange(n, dtype=np.intp)
    return np.sort(rng.choice(n, size=config.candidate_pool, replace=False))


def _choose_alpha(
    learners: Learners,
    config: PipelineConfig,
    s_u: np.ndarray,
    ctx: np.ndarray,
    noise: float,
    rng: np.random.Generator,
) -> np.ndarray:
    if config.mode == "fixed":
        return np.asarray(config.alpha_fixed, dtype=np.float64)
    if config.mode == "random":
        return rng.dirichlet(np.ones(config.n_objectives))
    return select_action(learners.policy, s_u, ctx, noise, rng)[0]


def _run_interaction(
    world: World,
    learners: Learners,
    config: PipelineConfig,
    user_id: int,
    history: list[InteractionRecord],
    tick: int,
    rng: np.random.Generator,
    noise: float,
    collect: bool,
    terminal: bool,
):
    ctx = context_vec(world.config, tick)
    s_u = encode_state(learners, history, ctx)
    alpha = _choose_alpha(learners, config, s_u, ctx, noise, rng)
    cand = _candidates(world, config, rng)
    if config.mode == "random":
        slate = [int(i) for i in rng.choice(cand, size=config.top_k, replace=False)]
        y_top = np.full(config.n_objectives, np.nan)
    else:
        extra = None
        if config.informed:
            extra = tradeoff_coeff(world, user_id, cand, tick).reshape(-1, 1)
        ranked, _, y_rank = score_candidates(learners, s_u, cand, alpha, extra)
        slate = [int(i) for i in ranked[: config.top_k]]
        y_top = y_rank[0]
    rec = world_step(world, user_id, slate, tick, rng)
    if collect:
        ids, deltas, ctxs = history_arrays([history], config.history_window, [ctx])
        extra_row = None
        if config.informed:
            extra_row = np.array([tradeoff_coeff(world, user_id, rec.item_id, tick)])
        learners.supervised.append(
            SupExample(ids[0], deltas[0], ctxs[0], rec.item_id, rec.objectives.copy(), extra_row)
        )
    history.append(rec)
    next_tick = tick + int(rec.delta_t)
    if collect and learners.policy is not None:
        next_ctx = context_vec(world.config, next_tick)
        s_next = encode_state(learners, history, next_ctx)
        learners.replay.push(
            Transition(
                state=s_u[0].copy(),
                context=ctx,
                action=alpha,
                reward=_reward(config, rec.objectives),
                next_state=s_next[0].copy(),
                next_context=next_ctx,
                terminal=terminal,
            )
        )
    return rec, alpha, slate, y_top, next_tick


def run_episode(
    world: World,
    learners: Learners,
    config: PipelineConfig,
    user_id: int,
    steps: int,
    rng: np.random.Generator,
    noise: float = 0.0,
    collect: bool = False,
    metadata: dict[str, str] | None = None,
) -> EpisodeResult:
    """Roll one user forward `steps` interactions from a fresh history."""
    if steps < 1:
        raise ValueError("episode needs at least one step")
    history: list[InteractionRecord] = []
    tick = int(rng.integers(0, world.config.period))
    slates: list[list[int]] = []
    consumed: list[int] = []
    realized = np.zeros((steps, config.n_objectives))
    predicted = np.zeros((steps, config.n_objectives))
    alphas = np.zeros((steps, config.n_objectives))
    for t in range(steps):
        rec, alpha, slate, y_top, tick = _run_interaction(
            world, learners, config, user_id, history, tick, rng, noise,
            collect, terminal=(t == steps - 1),
        )
        slates.append(slate)
        consumed.append(rec.item_id)
        realized[t] = rec.objectives
        predicted[t] = y_top
        alphas[t] = alpha
    meta = {"mode": config.mode}
    meta.update(metadata or {})
    return EpisodeResult(
        user_id=user_id,
        slates=slates,
        consumed=consumed,
        realized=realized,
        predicted=predicted,
        alphas=alphas,
        means=realized.mean(axis=0),
        metadata=meta,
    )


def _sup_arrays(examples: list[SupExample]):
    ids = np.stack([e.ids for e in examples])
    deltas = np.stack([e.deltas for e in examples])
    ctxs = np.stack([e.ctxs for e in examples])
    items = np.array([e.item for e in examples], dtype=np.intp)
    y = np.stack([e.y for e in examples])
    extra = None
    if examples[0].extra is not None:
        extra = np.stack([e.extra for e in examples])
    return ids, deltas, ctxs, items, y, extra


def predictor_update(learners: Learners, examples: list[SupExample], lr: float) -> float:
    """Joint supervised step on encoder + predictor; returns pre-step loss."""
    if not examples:
        raise ValueError("empty supervised batch")
    ids, deltas, ctxs, items, y, extra = _sup_arrays(examples)
    pred_store = learners.hyper.store if learners.hyper is not None else learners.shared.store
    tape = ad.Tape()
    with tape:
        s_u = encode_arrays(learners.encoder, ids, deltas, ctxs)
        s_i = ad.take_rows(learners.encoder.store["encoder/embed"], items)
        extra_t = None if extra is None else constant(extra)
        y_hat = _predict_batch(learners, s_u, s_i, extra_t)
        loss = l1_batch_loss(y_hat, constant(y))
    tape.backward(loss, learners.encoder.store, pred_store)
    ad.sgd_step(learners.encoder.store, lr)
    ad.sgd_step(pred_store, lr)
    return loss.item()


def train(world: World, config: PipelineConfig, users=None) -> tuple[Learners, list[dict]]:
    """Interleaved training: one interaction then one update of each learner.

    Updates start once both buffers hold a full batch.  Any non-finite loss
    aborts with a diagnostics dump of the last logged row.
    """
    learners = init_learners(world, config)
    users = list(range(world.config.n_users)) if users is None else list(users)
    if not users:
        raise ValueError("no training users")
    roll_rng = substream(config.seed, "train", "rollout")
    sup_rng = substream(config.seed, "train", "supervised")
    rep_rng = substream(config.seed, "train", "replay")
    histories: dict[int, list[InteractionRecord]] = {u: [] for u in users}
    ticks: dict[int, int] = {u: int(roll_rng.integers(0, world.config.period)) for u in users}
    log: list[dict] = []
    for step_i in range(config.train_steps):
        u = users[step_i % len(users)]
        sigma = noise_schedule(step_i, config.train_steps, config.noise_start)
        rec, alpha, _, _, ticks[u] = _run_interaction(
            world, learners, config, u, histories[u], ticks[u], roll_rng,
            noise=sigma if config.uses_policy else 0.0, collect=True, terminal=False,
        )
        histories[u] = histories[u][-config.history_window:]
        row = {
            "step": float(step_i),
            "reward": _reward(config, rec.objectives),
            "noise": sigma,
            "pred_loss": np.nan,
            "critic_loss": np.nan,
            "actor_q": np.nan,
        }
        for k in range(config.n_objectives):
            row[f"alpha_{k}"] = float(alpha[k])
        can_update = len(learners.supervised) >= config.batch_size
        if can_update and config.mode != "random":
            idx = sup_rng.integers(0, len(learners.supervised), size=config.batch_size)
            batch = [learners.supervised[i] for i in idx]
            row["pred_loss"] = predictor_update(learners, batch, config.lr)
        if config.uses_policy and len(learners.replay) >= config.batch_size:
            tb = learners.replay.sample(config.batch_size, rep_rng)
            row["critic_loss"] = critic_update(learners.policy, tb, config.lr, config.gamma)
            tb = learners.replay.sample(config.batch_size, rep_rng)
            row["actor_q"] = actor_update(learners.policy, tb, config.lr)
            soft_update(learners.policy, config.tau)
        for key in ("pred_loss", "critic_loss", "actor_q"):
            v = row[key]
            if v is not None and not np.isnan(v) and not np.isfinite(v):
                raise PipelineError(f"non-finite {key} at step {step_i}: {row}")
        log.append(row)
    return learners, log


def evaluate(
    world: World,
    learners: Learners,
    config: PipelineConfig,
    users,
    seed: int,
    steps: int | None = None,
    metadata: dict[str, str] | None = None,
) -> tuple[np.ndarray, list[EpisodeResult]]:
    """Frozen-parameter episodes for each user; returns (per-objective means
    averaged across users, per-user results)."""
    users = list(users)
    if not users:
        raise ValueError("no evaluation users")
    steps = config.eval_steps if steps is None else steps
    results = []
    for u in users:
        rng = substream(seed, "eval", str(u))
        results.append(
            run_episode(world, learners, config, u, steps, rng, noise=0.0, metadata=metadata)
        )
    means = np.stack([r.means for r in results]).mean(axis=0)
    return means, results


def run_baseline_fixed(
    world: World,
    config: PipelineConfig,
    alpha_fixed,
    users=None,
    eval_users=None,
    eval_seed: int | None = None,
):
    """Train and evaluate the static baseline: shared bottom + constant weights."""
    alpha = tuple(float(a) for a in np.asarray(alpha_fixed, dtype=np.float64))
    cfg = replace(config, mode="fixed", alpha_fixed=alpha, shared_bottom_on=True)
    learners, log = train(world, cfg, users)
    means, results = evaluate(
        world, learners, cfg,
        eval_users if eval_users is not None else (users or range(world.config.n_users)),
        seed=cfg.seed if eval_seed is None else eval_seed,
        metadata={"alpha_fixed": ",".join(f"{a:.6f}" for a in alpha)},
    )
    return learners, log, means, results


ABLATION_VARIANTS = {
    1: {"attention_off": True},
    2: {"time_gate_off": True},
    4: {"shared_bottom_on": True},
}


def run_ablation(
    world: World,
    config: PipelineConfig,
    variant: int,
    users=None,
    eval_users=None,
    eval_seed: int | None = None,
):
    """Train and evaluate one ablation variant (1, 2, or 4)."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unsupported ablation variant {variant}")
    cfg = replace(config, **ABLATION_VARIANTS[variant])
    learners, log = train(world, cfg, users)
    means, results = evaluate(
        world, learners, cfg,
        eval_users if eval_users is not None else (users or range(world.config.n_users)),
        seed=cfg.seed if eval_seed is None else eval_seed,
        metadata={"variant": str(variant)},
    )
    return learners, log, means, results


def log_to_examples(records: list[InteractionRecord], window: int) -> list[SupExample]:
    """Per-record supervised examples with each user's own preceding history."""
    by_user: dict[int, list[InteractionRecord]] = {}
    out = []
    for rec in records:
        hist = by_user.setdefault(rec.user_id, [])
        ids, deltas, ctxs = history_arrays([hist], window, [rec.context])
        out.append(SupExample(ids[0], deltas[0], ctxs[0], rec.item_id, rec.objectives.copy()))
        hist.append(rec)
        del hist[:-window]
    return out
