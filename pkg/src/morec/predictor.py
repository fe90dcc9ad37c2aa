"""Objective-value predictors.

Mixture of hypernetworks (the main predictor)
---------------------------------------------
For every objective k a generator net maps the joint input
x = [consumer state | item vector | optional extra features] to the full
flattened parameter block of a small per-sample target net:

    theta_k = sig(sig(x G1 + c1) G2 + c2) G3 + c3               (B, P)

(three fully connected layers, sigmoid on the hidden two; the output layer
is linear because the block it emits is a set of real-valued weights).  P is
exactly the target net's parameter count: one hidden layer of width
`target_hidden` with sigmoid, then a linear map to an objective embedding of
width `embed_e`.  Applying the generated net to the same x yields W_k, the
objective's embedding of this (consumer, item) pair.  The objectives then
exchange information through an attention mixture over embeddings,

    e_kl = softmax_l( -|W_k - W_l|^2 ),     What_k = sum_l e_kl W_l,

and a per-objective head reads out yhat_k = sig(What_k h_k + b_k).  Heads are
not shared across objectives.  Training minimizes the batch mean of
sum_k |yhat_k - y_k| by plain SGD.

The `mixture` switch turns the exchange off (What_k = W_k), leaving fully
independent per-objective predictors.

Shared-bottom baseline
----------------------
One sigmoid trunk over the same input with independent sigmoid heads; same
loss.  This is both the ablation that replaces the hypernetworks and the
predictor used by the fixed-weight baselines.

Generated-weight application uses only rank-2 primitives: repeating input
columns against the flat block and summing with a constant block-pattern
matrix is algebraically the per-sample matmul.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor, constant


@dataclass(frozen=True)
class PredictorConfig:
    n_objectives: int = 2
    state_dim: int = 64
    item_dim: int = 16
    extra_dim: int = 0
    gen_hidden: int = 64
    target_hidden: int = 16
    embed_e: int = 16
    mixture: bool = True

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.item_dim + self.extra_dim

    @property
    def target_param_count(self) -> int:
        d, th, e = self.input_dim, self.target_hidden, self.embed_e
        return d * th + th + th * e + e

    def validate(self) -> None:
        if self.n_objectives < 1:
            raise ValueError("need at least one objective")
        if min(self.state_dim, self.item_dim, self.gen_hidden, self.target_hidden, self.embed_e) < 1:
            raise ValueError("predictor dimensions must be positive")
        if self.extra_dim < 0:
            raise ValueError("extra_dim must be nonnegative")


@dataclass
class HyperNetParams:
    config: PredictorConfig
    store: ParameterStore


@dataclass
class SharedBottomParams:
    config: PredictorConfig
    trunk_hidden: int
    store: ParameterStore


@dataclass
class Prediction:
    y_hat: Tensor                      # (B, n) in (0, 1)
    embeddings: list[Tensor]           # per objective, (B, embed_e)
    attention: list[Tensor] | None     # per objective, (B, n) softmax rows


_BLOCK_SUM: dict[tuple[int, int], np.ndarray] = {}


def _block_sum(d: int, h: int) -> Tensor:
    """Constant (d*h, h) matrix with M[i*h + j, j] = 1.

    mul(repeat_cols(x, h), flat_block) @ M == per-sample x @ reshape(block).
    """
    key = (d, h)
    m = _BLOCK_SUM.get(key)
    if m is None:
        m = np.zeros((d * h, h))
        m[np.arange(d * h), np.tile(np.arange(h), d)] = 1.0
        _BLOCK_SUM[key] = m
    return constant(m)


def init_hypernet(config: PredictorConfig, rng: np.random.Generator) -> HyperNetParams:
    config.validate()
    store = ParameterStore()
    d, gh, p = config.input_dim, config.gen_hidden, config.target_param_count
    for k in range(config.n_objectives):
        store.add(f"hyper/{k}/g1_w", ad.uniform_param(rng, (d, gh)))
        store.add(f"hyper/{k}/g1_b", ad.zero_param((1, gh)))
        store.add(f"hyper/{k}/g2_w", ad.uniform_param(rng, (gh, gh)))
        store.add(f"hyper/{k}/g2_b", ad.zero_param((1, gh)))
        store.add(f"hyper/{k}/g3_w", ad.uniform_param(rng, (gh, p)))
        store.add(f"hyper/{k}/g3_b", ad.zero_param((1, p)))
        store.add(f"hyper/{k}/head_w", ad.uniform_param(rng, (config.embed_e, 1)))
        store.add(f"hyper/{k}/head_b", ad.zero_param((1, 1)))
    return HyperNetParams(config, store)


def generate_target_block(params: HyperNetParams, k: int, x: Tensor) -> Tensor:
    """Flat generated parameter block theta_k(x), shape (B, P)."""
    store = params.store
    a = x
    for layer in ("g1", "g2"):
        a = ad.sigmoid(
            ad.add_row(ad.matmul(a, store[f"hyper/{k}/{layer}_w"]), store[f"hyper/{k}/{layer}_b"])
        )
    return ad.add_row(ad.matmul(a, store[f"hyper/{k}/g3_w"]), store[f"hyper/{k}/g3_b"])


def apply_target_net(config: PredictorConfig, theta: Tensor, x: Tensor) -> Tensor:
    """Run each row's generated net on that row's input; returns (B, embed_e)."""
    d, th, e = config.input_dim, config.target_hidden, config.embed_e
    ofs = 0
    w1 = ad.slice_cols(theta, ofs, ofs + d * th)
    ofs += d * th
    b1 = ad.slice_cols(theta, ofs, ofs + th)
    ofs += th
    w2 = ad.slice_cols(theta, ofs, ofs + th * e)
    ofs += th * e
    b2 = ad.slice_cols(theta, ofs, ofs + e)
    hidden = ad.sigmoid(ad.add(ad.matmul(ad.mul(ad.repeat_cols(x, th), w1), _block_sum(d, th)), b1))
    return ad.add(ad.matmul(ad.mul(ad.repeat_cols(hidden, e), w2), _block_sum(th, e)), b2)


def mixture_attention(embeddings: list[Tensor], embed_e: int) -> tuple[list[Tensor], list[Tensor]]:
    """Cross-objective softmax over negated squared embedding distances."""
    ones_col = constant(np.ones((embed_e, 1)))
    mixed = []
    rows = []
    for w_k in embeddings:
        logits = []
        for w_l in embeddings:
            diff = ad.sub(w_k, w_l)
            logits.append(ad.scale(ad.matmul(ad.mul(diff, diff), ones_col), -1.0))
        e_k = ad.softmax(ad.concat(logits, axis=1))
        acc = ad.mul_col(embeddings[0], ad.slice_cols(e_k, 0, 1))
        for l in range(1, len(embeddings)):
            acc = ad.add(acc, ad.mul_col(embeddings[l], ad.slice_cols(e_k, l, l + 1)))
        mixed.append(acc)
        rows.append(e_k)
    return mixed, rows


def predict(params: HyperNetParams, s_u: Tensor, s_i: Tensor, extra: Tensor | None = None) -> Prediction:
    """Per-objective predicted values for a batch of (state, item) rows."""
    cfg = params.config
    parts = [s_u, s_i] + ([extra] if extra is not None else [])
    x = ad.concat(parts, axis=1)
    if x.shape[1] != cfg.input_dim:
        raise ad.ShapeError(f"predictor input width {x.shape[1]} != configured {cfg.input_dim}")
    embeddings = []
    for k in range(cfg.n_objectives):
        theta = generate_target_block(params, k, x)
        embeddings.append(apply_target_net(cfg, theta, x))
    if cfg.mixture and cfg.n_objectives > 1:
        mixed, rows = mixture_attention(embeddings, cfg.embed_e)
    else:
        mixed, rows = embeddings, None
    outs = []
    for k in range(cfg.n_objectives):
        head = ad.matmul(mixed[k], params.store[f"hyper/{k}/head_w"])
        outs.append(ad.sigmoid(ad.add_row(head, params.store[f"hyper/{k}/head_b"])))
    y_hat = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
    return Prediction(y_hat=y_hat, embeddings=embeddings, attention=rows)


def l1_batch_loss(y_hat: Tensor, y: Tensor) -> Tensor:
    """Batch mean of the per-sample L1 sum across objectives."""
    return ad.scale(ad.l1_sum(y_hat, y), 1.0 / y.shape[0])


def train_step(params: HyperNetParams, s_u: np.ndarray, s_i: np.ndarray, y: np.ndarray, lr: float) -> float:
    """One SGD step on fixed input rows; returns the pre-step batch loss."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0.0) or np.any(y > 1.0):
        raise ValueError("targets must lie in [0, 1]")
    tape = ad.Tape()
    with tape:
        pred = predict(params, constant(s_u), constant(s_i))
        loss = l1_batch_loss(pred.y_hat, constant(y))
    tape.backward(loss, params.store)
    ad.sgd_step(params.store, lr)
    return loss.item()


# -- shared bottom -------------------------------------------------------------


def init_shared_bottom(config: PredictorConfig, rng: np.random.Generator, trunk_hidden: int = 64) -> SharedBottomParams:
    config.validate()
    store = ParameterStore()
    d = config.input_dim
    store.add("shared/trunk_w", ad.uniform_param(rng, (d, trunk_hidden)))
    store.add("shared/trunk_b", ad.zero_param((1, trunk_hidden)))
    for k in range(config.n_objectives):
        store.add(f"shared/{k}/head_w", ad.uniform_param(rng, (trunk_hidden, 1)))
        store.add(f"shared/{k}/head_b", ad.zero_param((1, 1)))
    return SharedBottomParams(config, trunk_hidden, store)


def shared_bottom_predict(params: SharedBottomParams, s_u: Tensor, s_i: Tensor, extra: Tensor | None = None) -> Tensor:
    cfg = params.config
    parts = [s_u, s_i] + ([extra] if extra is not None else [])
    x = ad.concat(parts, axis=1)
    if x.shape[1] != cfg.input_dim:
        raise ad.ShapeError(f"predictor input width {x.shape[1]} != configured {cfg.input_dim}")
    trunk = ad.sigmoid(ad.add_row(ad.matmul(x, params.store["shared/trunk_w"]), params.store["shared/trunk_b"]))
    outs = []
    for k in range(cfg.n_objectives):
        head = ad.matmul(trunk, params.store[f"shared/{k}/head_w"])
        outs.append(ad.sigmoid(ad.add_row(head, params.store[f"shared/{k}/head_b"])))
    return outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)


def shared_train_step(params: SharedBottomParams, s_u: np.ndarray, s_i: np.ndarray, y: np.ndarray, lr: float) -> float:
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0.0) or np.any(y > 1.0):
        raise ValueError("targets must lie in [0, 1]")
    tape = ad.Tape()
    with tape:
        y_hat = shared_bottom_predict(params, constant(s_u), constant(s_i))
        loss = l1_batch_loss(y_hat, constant(y))
    tape.backward(loss, params.store)
    ad.sgd_step(params.store, lr)
    return loss.item()
