"""Evaluation mathematics for multi-objective runs.

Dominance and hypervolume over frontier points (maximization, reference at
the origin since objectives are normalized), frontier protocols (fixed-weight
sweep for baselines, multi-initialization for the adaptive model), per-group
objective correlations, OLS treatment-effect estimation with robust standard
errors, and sensitivity/scalability sweeps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .pipeline import (
    PipelineConfig,
    evaluate,
    init_learners,
    log_to_examples,
    predictor_update,
    run_baseline_fixed,
    train,
)
from .rng import substream
from .simenv import InteractionRecord, World, simulate_log


@dataclass(frozen=True)
class FrontierPoint:
    """Per-objective mean performance with a provenance label."""

    values: np.ndarray
    label: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("frontier point must be a finite vector")
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise ValueError("frontier point components must lie in [0, 1]")
        object.__setattr__(self, "values", v)


def _as_matrix(points) -> tuple[np.ndarray, list]:
    pts = list(points)
    if not pts:
        return np.zeros((0, 0)), []
    if isinstance(pts[0], FrontierPoint):
        return np.stack([p.values for p in pts]), pts
    m = np.asarray(pts, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    return m, pts


def dominates(a, b) -> bool:
    """a weakly improves every objective and strictly improves at least one."""
    a = np.asarray(a.values if isinstance(a, FrontierPoint) else a, dtype=np.float64)
    b = np.asarray(b.values if isinstance(b, FrontierPoint) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(a >= b) and np.any(a > b))


def non_dominated(points):
    """Points dominated by no other point, input order preserved.

    Accepts a matrix/sequence of vectors or a list of FrontierPoints and
    returns the matching subset in the same form.
    """
    m, originals = _as_matrix(points)
    if m.size == 0:
        return []
    ge = np.all(m[:, None, :] <= m[None, :, :], axis=-1)   # ge[i, j]: m[j] >= m[i]
    gt = np.any(m[:, None, :] < m[None, :, :], axis=-1)    # gt[i, j]: m[j] > m[i] somewhere
    dominated = np.any(ge & gt, axis=1)
    return [p for p, d in zip(originals, dominated) if not d]


def _check_reference(m: np.ndarray, reference: np.ndarray) -> None:
    if reference.shape != (m.shape[1],):
        raise ValueError("reference dimension mismatch")
    if np.any(m < reference):
        raise ValueError("every point must weakly dominate the reference")


def hypervolume(points, reference=None) -> float:
    """Volume dominated between `reference` and the points (maximization).

    Exact for one or two objectives; three or more fall back to the
    Monte Carlo estimate (see hypervolume_mc for the standard error).
    """
    m, _ = _as_matrix(points)
    if m.size == 0:
        raise ValueError("hypervolume of an empty set")
    ref = np.zeros(m.shape[1]) if reference is None else np.asarray(reference, dtype=np.float64)
    _check_reference(m, ref)
    if m.shape[1] == 1:
        return float(m[:, 0].max() - ref[0])
    if m.shape[1] == 2:
        hv = 0.0
        best_y = ref[1]
        for x, y in sorted(map(tuple, m), reverse=True):  # descending x slabs
            if y > best_y:
                hv += (x - ref[0]) * (y - best_y)
                best_y = y
        return float(hv)
    return hypervolume_mc(points, reference)[0]


def hypervolume_mc(points, reference=None, samples: int = 10**6, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo hypervolume: (estimate, standard error)."""
    m, _ = _as_matrix(points)
    if m.size == 0:
        raise ValueError("hypervolume of an empty set")
    ref = np.zeros(m.shape[1]) if reference is None else np.asarray(reference, dtype=np.float64)
    _check_reference(m, ref)
    top = m.max(axis=0)
    box = float(np.prod(top - ref))
    if box == 0.0:
        return 0.0, 0.0
    rng = substream(seed, "hypervolume_mc")
    draws = rng.uniform(ref, top, size=(samples, m.shape[1]))
    covered = np.zeros(samples, dtype=bool)
    for p in m:  # point count is small; vectorize over samples
        covered |= np.all(draws <= p, axis=1)
    p_hat = covered.mean()
    se = box * float(np.sqrt(p_hat * (1.0 - p_hat) / samples))
    return box * float(p_hat), se


# -- correlations -------------------------------------------------------------


def pearson(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 2:
        raise ValueError("pearson needs two equal-length vectors of size >= 2")
    if np.ptp(xs) == 0.0 or np.ptp(ys) == 0.0:
        raise ValueError("degenerate input: zero variance")
    return float(np.corrcoef(xs, ys)[0, 1])


def group_correlations(
    records: list[InteractionRecord],
    group_by: str,
    period: int = 24,
) -> tuple[dict, int]:
    """Per-group Pearson between the first two objectives.

    Groups are users or context buckets (tick mod period).  Groups with fewer
    than two records or zero variance are omitted; the count of omissions is
    returned alongside the map.
    """
    if group_by not in ("user", "context_bucket"):
        raise ValueError(f"unknown grouping {group_by!r}")
    groups: dict = {}
    for rec in records:
        key = rec.user_id if group_by == "user" else int(rec.timestamp) % period
        groups.setdefault(key, []).append(rec.objectives)
    out: dict = {}
    omitted = 0
    for key in sorted(groups):
        obj = np.stack(groups[key])
        if obj.shape[0] < 2 or np.ptp(obj[:, 0]) == 0.0 or np.ptp(obj[:, 1]) == 0.0:
            omitted += 1
            continue
        out[key] = pearson(obj[:, 0], obj[:, 1])
    return out, omitted


# -- OLS with robust standard errors ------------------------------------------


@dataclass(frozen=True)
class RegressionResult:
    names: list[str]
    coef: np.ndarray
    se: np.ndarray
    r_squared: float
    n_obs: int
    dropped: list[str]

    def __getitem__(self, name: str) -> tuple[float, float]:
        i = self.names.index(name)
        return float(self.coef[i]), float(self.se[i])

    @property
    def treatment_effect(self) -> float:
        return self["treatment"][0]

    @property
    def treatment_se(self) -> float:
        return self["treatment"][1]


def _independent_columns(x: np.ndarray, names: list[str], protected: int) -> tuple[np.ndarray, list[str], list[str]]:
    """Greedily drop collinear columns beyond the first `protected` ones."""
    keep = list(range(protected))
    base_rank = np.linalg.matrix_rank(x[:, keep])
    if base_rank < protected:
        raise ValueError("degenerate design: intercept/treatment block is rank deficient")
    dropped = []
    for j in range(protected, x.shape[1]):
        trial = x[:, keep + [j]]
        if np.linalg.matrix_rank(trial) > len(keep):
            keep.append(j)
        else:
            dropped.append(names[j])
    return x[:, keep], [names[j] for j in keep], dropped


def ols_treatment_effect(
    y,
    treatment,
    covariates=None,
    time_index=None,
) -> RegressionResult:
    """OLS of y on [intercept, treatment, covariate block, time fixed effects].

    Uses a pseudo-inverse solve; standard errors are heteroskedasticity-robust
    (HC1 sandwich).  Collinear covariate or fixed-effect columns are dropped
    with their names recorded in `dropped`.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    t = np.asarray(treatment, dtype=np.float64).ravel()
    if y.shape != t.shape:
        raise ValueError("y and treatment lengths differ")
    n = y.size
    arms = np.unique(t)
    if arms.size < 2:
        raise ValueError("degenerate design: treatment flag is constant")
    if min(np.sum(t == a) for a in arms) < 2:
        raise ValueError("need at least two observations per treatment arm")
    cols = [np.ones(n), t]
    names = ["intercept", "treatment"]
    if covariates is not None:
        cov = np.asarray(covariates, dtype=np.float64)
        if cov.ndim == 1:
            cov = cov[:, None]
        if cov.shape[0] != n:
            raise ValueError("covariate rows must match y")
        for j in range(cov.shape[1]):
            cols.append(cov[:, j])
            names.append(f"x{j}")
    if time_index is not None:
        ti = np.asarray(time_index).ravel()
        if ti.shape != (n,):
            raise ValueError("time index length must match y")
        levels = np.unique(ti)
        for lv in levels[1:]:  # first level absorbed by the intercept
            cols.append((ti == lv).astype(np.float64))
            names.append(f"t{lv}")
    x = np.column_stack(cols)
    x, names, dropped = _independent_columns(x, names, protected=2)
    beta, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ beta
    xtx_inv = np.linalg.pinv(x.T @ x)
    k = x.shape[1]
    meat = (x * (resid**2)[:, None]).T @ x
    cov_b = xtx_inv @ meat @ xtx_inv * (n / max(n - k, 1))
    se = np.sqrt(np.clip(np.diag(cov_b), 0.0, None))
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if sst == 0.0 else 1.0 - float(resid @ resid) / sst
    return RegressionResult(names, beta, se, r2, n, dropped)


# -- frontier protocols --------------------------------------------------------


def train_eval_split(n_users: int) -> tuple[list[int], list[int]]:
    """Deterministic 80/20 user split; evaluation users are held out."""
    if n_users < 2:
        raise ValueError("need at least two users to hold any out")
    n_eval = max(1, n_users // 5)
    ids = list(range(n_users))
    return ids[: n_users - n_eval], ids[n_users - n_eval :]


def weight_sweep(world: World, config: PipelineConfig, m: int, eval_seed: int | None = None) -> list[FrontierPoint]:
    """Fixed-weight baseline frontier: trains one static model per grid weight."""
    if m < 2:
        raise ValueError("grid needs at least two weights")
    if config.n_objectives != 2:
        raise ValueError("weight grid is defined for two objectives")
    train_users, eval_users = train_eval_split(world.config.n_users)
    eval_seed = config.seed if eval_seed is None else eval_seed
    points = []
    for a1 in np.linspace(0.0, 1.0, m):
        _, _, means, _ = run_baseline_fixed(
            world, config, (float(a1), float(1.0 - a1)),
            users=train_users, eval_users=eval_users, eval_seed=eval_seed,
        )
        points.append(FrontierPoint(np.clip(means, 0.0, 1.0), f"fixed:{a1:.4f}"))
    return points


def multi_seed_frontier(
    world: World,
    config: PipelineConfig,
    seeds,
    eval_seed: int | None = None,
) -> list[FrontierPoint]:
    """Adaptive-model frontier: one full train per initialization seed,
    evaluated on held-out users with frozen parameters and a shared
    environment seed so points pair with the baseline sweep."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    train_users, eval_users = train_eval_split(world.config.n_users)
    eval_seed = config.seed if eval_seed is None else eval_seed
    points = []
    for s in seeds:
        cfg = replace(config, mode="adaptive", seed=int(s))
        learners, _ = train(world, cfg, users=train_users)
        means, _ = evaluate(world, learners, cfg, eval_users, seed=eval_seed)
        points.append(FrontierPoint(np.clip(means, 0.0, 1.0), f"seed:{s}"))
    return points


def sensitivity_sweep(world: World, config: PipelineConfig, axis: str, values, seeds=None) -> list[dict]:
    """Per-objective means while varying one hyperparameter, all else fixed."""
    field = {"gamma": "gamma", "tau": "tau", "hidden_units": "hidden"}.get(axis)
    if field is None:
        raise ValueError(f"unknown sensitivity axis {axis!r}")
    values = list(values)
    if not values:
        raise ValueError("no values to sweep")
    seeds = [config.seed] if seeds is None else list(seeds)
    train_users, eval_users = train_eval_split(world.config.n_users)
    rows = []
    for v in values:
        for s in seeds:
            cfg = replace(config, **{field: type(getattr(config, field))(v)}, seed=int(s))
            learners, _ = train(world, cfg, users=train_users)
            means, _ = evaluate(world, learners, cfg, eval_users, seed=config.seed)
            row = {"axis": axis, "value": float(v), "seed": int(s)}
            for k, mv in enumerate(means):
                row[f"mean_{k}"] = float(mv)
            rows.append(row)
    return rows


# -- scalability ---------------------------------------------------------------


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares line y ~ a + b x; returns (slope, intercept, r_squared)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ValueError("need at least two points to fit a line")
    b, a = np.polyfit(x, y, 1)
    resid = y - (a + b * x)
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if sst == 0.0 else 1.0 - float(resid @ resid) / sst
    return float(b), float(a), r2


@dataclass(frozen=True)
class TimingResult:
    sizes: list[int]
    seconds: list[float]
    slope: float | None
    intercept: float | None
    r_squared: float | None


def scalability_timing(
    world: World,
    config: PipelineConfig,
    sizes,
    epochs: int = 1,
    seed: int = 0,
) -> TimingResult:
    """Wall time of fixed-epoch supervised training on log subsamples.

    One master log covers the largest size; each size gets a seeded uniform
    subsample in chronological order.  Only the update loop is timed.  With a
    single size the linear fit is undefined and reported as None.
    """
    sizes = [int(s) for s in sizes]
    if not sizes or min(sizes) < config.batch_size:
        raise ValueError("every size must cover at least one batch")
    steps_per_user = -(-max(sizes) // world.config.n_users)
    records = simulate_log(world, steps_per_user, substream(seed, "timing", "log"))
    examples = log_to_examples(records, config.history_window)
    seconds = []
    for size in sizes:
        pick_rng = substream(seed, "timing", "pick", str(size))
        idx = np.sort(pick_rng.choice(len(examples), size=size, replace=False))
        subset = [examples[i] for i in idx]
        learners = init_learners(world, replace(config, seed=seed))
        order_rng = substream(seed, "timing", "order", str(size))
        t0 = time.perf_counter()
        for _ in range(epochs):
            perm = order_rng.permutation(size)
            for lo in range(0, size - config.batch_size + 1, config.batch_size):
                batch = [subset[i] for i in perm[lo : lo + config.batch_size]]
                predictor_update(learners, batch, config.lr)
        seconds.append(time.perf_counter() - t0)
    if len(sizes) < 2:
        return TimingResult(sizes, seconds, None, None, None)
    slope, intercept, r2 = linear_fit(sizes, seconds)
    return TimingResult(sizes, seconds, slope, intercept, r2)
