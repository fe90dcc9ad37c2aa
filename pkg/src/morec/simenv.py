"""Synthetic multi-objective consumer environment.

World structure
---------------
Each item i carries a latent quality r_i ~ N(item_mean, item_std^2).  When
user u consumes item i at tick t the realized objectives are

    o_1 = logistic(r_i + eta),            eta ~ N(0, noise_std^2)
    o_2 = 1 - c(u, i, t) * o_1
    o_j = logistic(r_i * w_j + eta_j)     for extra objectives j >= 3

so objective 2 trades off against objective 1 exactly as strongly as the
coefficient c says.  c is deterministic given (u, i, t):

    c = clamp01(base_u + amplitude * sin(2*pi*(t mod P)/P + phase_u) + shift_i)

base_u ~ Uniform(base_tradeoff +- spread/2) gives persistent user
heterogeneity, the sinusoid gives a daily context cycle (P ticks per day),
and shift_i is a small per-item perturbation.  Phases concentrate around a
shared daily rhythm (sigma 0.3 rad) so the cycle survives aggregation across
users; item shifts have sigma 0.08.  Both constants are internals of the
generator, not tuning knobs.

Time between consecutive interactions is Exponential(1) quantized to the
tick grid.  All draws flow through explicitly passed numpy Generators; the
world itself is deterministic given its seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import _sigmoid
from .rng import substream

ITEM_SHIFT_STD = 0.08
PHASE_STD = 0.3
_DAYS_CYCLE = 7


class WorldError(ValueError):
    """Invalid world configuration or environment contract violation."""


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 100
    n_items: int = 100
    n_objectives: int = 2
    user_hetero_spread: float = 0.0
    context_amplitude: float = 0.0
    base_tradeoff: float = 0.5
    noise_std: float = 0.1
    item_mean: float = 0.5
    item_std: float = 1.0
    period: int = 24
    seed: int = 0

    def validate(self) -> None:
        if self.n_users < 1 or self.n_items < 1:
            raise WorldError("n_users and n_items must be positive")
        if self.n_objectives < 2:
            raise WorldError("need at least the two structural objectives")
        if self.user_hetero_spread < 0 or self.context_amplitude < 0:
            raise WorldError("spread and amplitude must be nonnegative")
        if self.noise_std < 0 or self.item_std < 0:
            raise WorldError("standard deviations must be nonnegative")
        if self.period < 1:
            raise WorldError("period must be a positive tick count")


@dataclass
class World:
    config: WorldConfig
    item_quality: np.ndarray
    base_tradeoff: np.ndarray
    user_phase: np.ndarray
    item_shift: np.ndarray
    extra_mix: np.ndarray


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    item_id: int
    delta_t: float
    context: np.ndarray
    objectives: np.ndarray
    timestamp: int


def logistic(x):
    """Numerically stable 1 / (1 + exp(-x)), elementwise."""
    return _sigmoid(np.asarray(x, dtype=np.float64))


def build_world(config: WorldConfig) -> World:
    """Deterministic world from config.seed; draw order is part of the format."""
    config.validate()
    rng = substream(config.seed, "world")
    item_quality = rng.normal(config.item_mean, config.item_std, size=config.n_items)
    half = config.user_hetero_spread / 2.0
    base = rng.uniform(config.base_tradeoff - half, config.base_tradeoff + half, size=config.n_users)
    base = np.clip(base, 0.0, 1.0)
    phase = rng.normal(0.0, PHASE_STD, size=config.n_users)
    shift = rng.normal(0.0, ITEM_SHIFT_STD, size=config.n_items)
    extra = rng.uniform(-1.0, 1.0, size=max(config.n_objectives - 2, 0))
    return World(config, item_quality, base, phase, shift, extra)


def tradeoff_coeff(world: World, user_id: int, item_id, tick: int):
    """c(u, i, t) in [0, 1]; deterministic.  `item_id` may be a vector."""
    cfg = world.config
    frac = (tick % cfg.period) / cfg.period
    wave = cfg.context_amplitude * np.sin(2.0 * np.pi * frac + world.user_phase[user_id])
    c = world.base_tradeoff[user_id] + wave + world.item_shift[item_id]
    return np.clip(c, 0.0, 1.0)


def context_vec(config: WorldConfig, tick: int) -> np.ndarray:
    """Global context at a tick: daily phase as sin/cos plus a day index."""
    frac = (tick % config.period) / config.period
    day = (tick // config.period) % _DAYS_CYCLE
    return np.array(
        [np.sin(2.0 * np.pi * frac), np.cos(2.0 * np.pi * frac), day / _DAYS_CYCLE]
    )


def sample_objectives(world: World, user_id: int, item_id, tick: int, rng: np.random.Generator) -> np.ndarray:
    """Realized objective vector(s) for consuming item(s) at a tick.

    Scalar item_id -> shape (n_objectives,); vector of m ids -> (m, n).
    Draw order (o_1 noise, then each extra objective's noise) is fixed.
    """
    cfg = world.config
    item_arr = np.atleast_1d(np.asarray(item_id))
    r = world.item_quality[item_arr]
    eta = rng.normal(0.0, cfg.noise_std, size=item_arr.shape)
    o1 = logistic(r + eta)
    c = tradeoff_coeff(world, user_id, item_arr, tick)
    cols = [o1, 1.0 - c * o1]
    for j in range(cfg.n_objectives - 2):
        eta_j = rng.normal(0.0, cfg.noise_std, size=item_arr.shape)
        cols.append(logistic(r * world.extra_mix[j] + eta_j))
    out = np.stack(cols, axis=-1)
    return out[0] if np.isscalar(item_id) or np.ndim(item_id) == 0 else out


def step(world: World, user_id: int, slate, tick: int, rng: np.random.Generator) -> InteractionRecord:
    """Consume the top item of a ranked slate and emit the interaction.

    Consumption is deterministic (always the head); randomness enters only
    through objective noise and the Exponential(1) dwell time, quantized to
    whole ticks.
    """
    slate = list(slate)
    if not slate:
        raise WorldError("empty slate")
    item = int(slate[0])
    if not 0 <= item < world.config.n_items:
        raise WorldError(f"slate head {item} outside catalog")
    if not 0 <= user_id < world.config.n_users:
        raise WorldError(f"unknown user {user_id}")
    objectives = sample_objectives(world, user_id, item, tick, rng)
    delta = float(np.round(rng.exponential(1.0)))
    return InteractionRecord(
        user_id=user_id,
        item_id=item,
        delta_t=delta,
        context=context_vec(world.config, tick),
        objectives=objectives,
        timestamp=int(tick),
    )


def simulate_log(
    world: World,
    steps_per_user: int,
    rng: np.random.Generator,
    user_ids=None,
) -> list[InteractionRecord]:
    """Uniform-random recommendations for each user; the model-free corpus
    used by the correlation and regression studies."""
    records = []
    users = range(world.config.n_users) if user_ids is None else user_ids
    for u in users:
        tick = int(rng.integers(0, world.config.period))
        for _ in range(steps_per_user):
            item = int(rng.integers(0, world.config.n_items))
            rec = step(world, u, [item], tick, rng)
            records.append(rec)
            tick += int(rec.delta_t)
    return records


# -- log files ---------------------------------------------------------------


def log_columns(n_objectives: int) -> list[str]:
    cols = ["user_id", "item_id", "tick", "delta_t", "ctx_sin", "ctx_cos", "ctx_day"]
    cols += [f"obj_{k}" for k in range(n_objectives)]
    return cols


def export_log(records: list[InteractionRecord], path: str, n_objectives: int | None = None) -> None:
    """CSV with one row per interaction; floats use exact repr round-trip."""
    if n_objectives is None:
        n_objectives = len(records[0].objectives) if records else 2
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(log_columns(n_objectives))
        for rec in records:
            row = [rec.user_id, rec.item_id, rec.timestamp, repr(rec.delta_t)]
            row += [repr(float(v)) for v in rec.context]
            row += [repr(float(v)) for v in rec.objectives]
            writer.writerow(row)


def parse_log(path: str) -> list[InteractionRecord]:
    with open(path, "r", newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_obj = sum(1 for c in header if c.startswith("obj_"))
        if header != log_columns(n_obj):
            raise WorldError(f"{path}: unrecognized log header")
        out = []
        for row in reader:
            out.append(
                InteractionRecord(
                    user_id=int(row[0]),
                    item_id=int(row[1]),
                    timestamp=int(row[2]),
                    delta_t=float(row[3]),
                    context=np.array([float(v) for v in row[4:7]]),
                    objectives=np.array([float(v) for v in row[7 : 7 + n_obj]]),
                )
            )
    return out
