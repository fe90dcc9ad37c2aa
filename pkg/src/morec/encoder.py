"""Consumer-state encoder: causal self-attention feeding a time-gated LSTM.

Each history record becomes an input row x_k through a learned projection of
(item embedding | dwell time | context).  A causal attention pass re-expresses
every position as a similarity-weighted sum over its prefix,

    e_k = softmax_{i <= k}( -|x_k - x_i|^2 )      (similarity sign; the raw
                                                   distance variant stays
                                                   reachable via config)
    xt_k = sum_i e_ki * (x_i @ W_attn)

and a six-gate recurrent cell folds the sequence, with a multiplicative time
gate driven by both the attended input and the dwell time:

    i_k = sig(xt_k Wxi + h_{k-1} Whi + b_i)           f_k, o_k analogous
    T_k = sig(xt_k Wxt + sig(dt_k Wht) + b_t)
    c_k = f_k * c_{k-1} + i_k * T_k * tanh(xt_k Wxc + h_{k-1} Whc + b_c)
    h_k = o_k * tanh(c_k)

The consumer state is h_n over the last `window` records, h_0 = c_0 = 0.
Histories shorter than the window are left-padded with a neutral record
(embedding index 0, zero dwell, the caller's current context), which also
covers the cold-start case of an empty history.  Ablation switches: attention
off means xt_k = x_k; time gate off forces T_k = 1 (a standard LSTM).

Everything operates on (batch, feature) rows so one forward pass serves both
taped training and untaped evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor, constant

CTX_DIM = 3


@dataclass(frozen=True)
class EncoderConfig:
    n_items: int
    embed_dim: int = 16
    input_dim: int = 32
    hidden: int = 64
    window: int = 10
    attention: bool = True
    time_gate: bool = True
    attention_sign: str = "similarity"  # or "paper_literal"

    def validate(self) -> None:
        if self.attention_sign not in ("similarity", "paper_literal"):
            raise ValueError(f"unknown attention_sign {self.attention_sign!r}")
        if min(self.n_items, self.embed_dim, self.input_dim, self.hidden, self.window) < 1:
            raise ValueError("encoder dimensions must be positive")


@dataclass
class EncoderParams:
    config: EncoderConfig
    store: ParameterStore

    @property
    def embeddings(self) -> Tensor:
        return self.store["encoder/embed"]


_GATES = ("i", "f", "o")


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    """Uniform +-1/sqrt(fan_in) weights, zero biases.

    The projection row that reads the dwell-time feature is re-drawn until
    every entry is nonzero, so records differing only in dwell time can never
    collapse to the same input row.
    """
    config.validate()
    store = ParameterStore()
    raw_dim = config.embed_dim + 1 + CTX_DIM
    x, h = config.input_dim, config.hidden
    store.add("encoder/embed", ad.uniform_param(rng, (config.n_items, config.embed_dim), fan_in=config.embed_dim))
    proj = ad.uniform_param(rng, (raw_dim, x))
    delta_row = config.embed_dim
    while np.any(proj.data[delta_row] == 0.0):
        proj = ad.uniform_param(rng, (raw_dim, x))
    store.add("encoder/proj_w", proj)
    store.add("encoder/proj_b", ad.zero_param((1, x)))
    store.add("encoder/attn_w", ad.uniform_param(rng, (x, x)))
    for g in _GATES:
        store.add(f"encoder/w_x{g}", ad.uniform_param(rng, (x, h)))
        store.add(f"encoder/w_h{g}", ad.uniform_param(rng, (h, h)))
        store.add(f"encoder/b_{g}", ad.zero_param((1, h)))
    store.add("encoder/w_xc", ad.uniform_param(rng, (x, h)))
    store.add("encoder/w_hc", ad.uniform_param(rng, (h, h)))
    store.add("encoder/b_c", ad.zero_param((1, h)))
    store.add("encoder/w_xt", ad.uniform_param(rng, (x, h)))
    store.add("encoder/w_ht", ad.uniform_param(rng, (1, h), fan_in=1))
    store.add("encoder/b_t", ad.zero_param((1, h)))
    return EncoderParams(config, store)


def history_arrays(histories, window: int, pad_contexts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Marshal variable-length histories into rectangular (B, W) arrays.

    Keeps the last `window` records of each history, left-padding short ones
    with the neutral record (item 0, dwell 0, that sample's pad context).
    """
    b = len(histories)
    ids = np.zeros((b, window), dtype=np.intp)
    deltas = np.zeros((b, window))
    ctxs = np.zeros((b, window, CTX_DIM))
    for row, (history, pad_ctx) in enumerate(zip(histories, pad_contexts)):
        tail = list(history)[-window:]
        pad = window - len(tail)
        ctxs[row, :pad] = np.asarray(pad_ctx)
        for k, rec in enumerate(tail):
            ids[row, pad + k] = rec.item_id
            deltas[row, pad + k] = rec.delta_t
            ctxs[row, pad + k] = rec.context
    return ids, deltas, ctxs


def embed_records(params: EncoderParams, ids_k: np.ndarray, deltas_k: np.ndarray, ctxs_k: np.ndarray) -> Tensor:
    """Input rows x_k for one sequence position across the batch."""
    emb = ad.take_rows(params.store["encoder/embed"], ids_k)
    raw = ad.concat([emb, constant(deltas_k.reshape(-1, 1)), constant(ctxs_k)], axis=1)
    return ad.add_row(ad.matmul(raw, params.store["encoder/proj_w"]), params.store["encoder/proj_b"])


def self_attend(params: EncoderParams, xs: list[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
    """Causal prefix attention; returns (attended rows, per-position weights).

    Weight rows are (B, k+1) softmax outputs.  With attention disabled the
    rows pass through untouched and the weights degenerate to single ones.
    """
    cfg = params.config
    if not cfg.attention:
        ones = constant(np.ones((xs[0].shape[0], 1)))
        return list(xs), [ones for _ in xs]
    w_attn = params.store["encoder/attn_w"]
    ones_col = constant(np.ones((cfg.input_dim, 1)))
    projected = [ad.matmul(x, w_attn) for x in xs]
    sign = -1.0 if cfg.attention_sign == "similarity" else 1.0
    attended = []
    weights = []
    for k, x_k in enumerate(xs):
        logits = []
        for i in range(k + 1):
            diff = ad.sub(x_k, xs[i])
            dist = ad.matmul(ad.mul(diff, diff), ones_col)
            logits.append(ad.scale(dist, sign))
        e_k = ad.softmax(ad.concat(logits, axis=1))
        mixed = ad.mul_col(projected[0], ad.slice_cols(e_k, 0, 1))
        for i in range(1, k + 1):
            mixed = ad.add(mixed, ad.mul_col(projected[i], ad.slice_cols(e_k, i, i + 1)))
        attended.append(mixed)
        weights.append(e_k)
    return attended, weights


def time_lstm_step(
    params: EncoderParams,
    xt: Tensor,
    delta: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
) -> tuple[Tensor, Tensor]:
    """One recurrent update; returns (h_k, c_k)."""
    store = params.store

    def gate(name: str) -> Tensor:
        pre = ad.add(ad.matmul(xt, store[f"encoder/w_x{name}"]), ad.matmul(h_prev, store[f"encoder/w_h{name}"]))
        return ad.sigmoid(ad.add_row(pre, store[f"encoder/b_{name}"]))

    i_k = gate("i")
    f_k = gate("f")
    o_k = gate("o")
    cand = ad.tanh(
        ad.add_row(
            ad.add(ad.matmul(xt, store["encoder/w_xc"]), ad.matmul(h_prev, store["encoder/w_hc"])),
            store["encoder/b_c"],
        )
    )
    if params.config.time_gate:
        t_pre = ad.add(ad.matmul(xt, store["encoder/w_xt"]), ad.sigmoid(ad.matmul(delta, store["encoder/w_ht"])))
        t_k = ad.sigmoid(ad.add_row(t_pre, store["encoder/b_t"]))
        inflow = ad.mul(i_k, ad.mul(t_k, cand))
    else:
        inflow = ad.mul(i_k, cand)
    c_k = ad.add(ad.mul(f_k, c_prev), inflow)
    h_k = ad.mul(o_k, ad.tanh(c_k))
    return h_k, c_k


def encode_arrays(params: EncoderParams, ids: np.ndarray, deltas: np.ndarray, ctxs: np.ndarray) -> Tensor:
    """Consumer states (B, hidden) from marshaled history arrays."""
    cfg = params.config
    b, window = ids.shape
    xs = [embed_records(params, ids[:, k], deltas[:, k], ctxs[:, k]) for k in range(window)]
    attended, _ = self_attend(params, xs)
    h = constant(np.zeros((b, cfg.hidden)))
    c = constant(np.zeros((b, cfg.hidden)))
    for k in range(window):
        h, c = time_lstm_step(params, attended[k], constant(deltas[:, k].reshape(-1, 1)), h, c)
    return h


def encode(params: EncoderParams, histories, pad_contexts) -> Tensor:
    """Consumer states for a batch of histories (lists of InteractionRecord)."""
    ids, deltas, ctxs = history_arrays(histories, params.config.window, pad_contexts)
    return encode_arrays(params, ids, deltas, ctxs)
