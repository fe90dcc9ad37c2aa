"""Paired multi-seed studies composed from the pipeline and analytics layers.

Each study trains matched model pairs under shared seeds so that differences
reflect the manipulated factor (information, adaptivity, ablated component)
rather than draw luck, then reduces the evaluations to frontier or
regression summaries.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .analytics import (
    FrontierPoint,
    RegressionResult,
    dominates,
    group_correlations,
    hypervolume,
    multi_seed_frontier,
    ols_treatment_effect,
    train_eval_split,
    weight_sweep,
)
from .pipeline import PipelineConfig, evaluate, run_baseline_fixed, train
from .rng import substream
from .simenv import World, WorldConfig, build_world, simulate_log


@dataclass(frozen=True)
class StudyResult:
    rows: list[dict]
    summary: dict


def informed_world(seed: int = 0, n_users: int = 100, n_items: int = 100) -> World:
    """Discrete-choice world with purely personal trade-off coefficients:
    item quality N(0.5, 1), observation noise N(0, 0.1), c uniform over [0, 1]."""
    return build_world(
        WorldConfig(
            n_users=n_users,
            n_items=n_items,
            user_hetero_spread=1.0,
            context_amplitude=0.0,
            seed=seed,
        )
    )


def heterogeneous_world(seed: int = 0, n_users: int = 60, n_items: int = 60) -> World:
    """Context-modulated heterogeneous world: spread 0.5, amplitude 0.3."""
    return build_world(
        WorldConfig(
            n_users=n_users,
            n_items=n_items,
            user_hetero_spread=0.5,
            context_amplitude=0.3,
            seed=seed,
        )
    )


def informed_frontier_study(
    config: PipelineConfig,
    seeds,
    m: int = 5,
    world: World | None = None,
) -> StudyResult:
    """Weight-sweep frontiers with and without the true trade-off coefficient
    as a predictor feature, paired per seed.

    The summary reports the mean informed-minus-blind hypervolume margin and
    the across-seed standard deviation of that margin.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ValueError("paired margins need at least two seeds")
    world = informed_world() if world is None else world
    rows = []
    for s in seeds:
        pts_inf = weight_sweep(world, replace(config, informed=True, seed=s), m, eval_seed=config.seed)
        pts_bli = weight_sweep(world, replace(config, informed=False, seed=s), m, eval_seed=config.seed)
        hv_inf = hypervolume(pts_inf)
        hv_bli = hypervolume(pts_bli)
        rows.append(
            {
                "seed": s,
                "hv_informed": hv_inf,
                "hv_blind": hv_bli,
                "margin": hv_inf - hv_bli,
                "points_informed": pts_inf,
                "points_blind": pts_bli,
            }
        )
    margins = np.array([r["margin"] for r in rows])
    summary = {
        "margin_mean": float(margins.mean()),
        "margin_std": float(margins.std(ddof=1)),
        "seeds": len(seeds),
    }
    return StudyResult(rows, summary)


def adaptive_vs_static_study(
    config: PipelineConfig,
    seeds,
    m: int = 5,
    world: World | None = None,
) -> StudyResult:
    """Adaptive model against the fixed-weight sweep, paired per seed.

    Per seed: one adaptive train/evaluate and one full static sweep (the grid
    contains the uniform weight when m is odd).  The summary compares the
    adaptive frontier's hypervolume with the best single static point and
    counts seeds where the adaptive point strictly dominates the uniform one.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    if m % 2 == 0:
        raise ValueError("use an odd grid so the uniform weight is a sweep cell")
    world = heterogeneous_world() if world is None else world
    adaptive_points = []
    rows = []
    best_fixed_hv = 0.0
    for s in seeds:
        pt = multi_seed_frontier(world, config, [s], eval_seed=config.seed)[0]
        adaptive_points.append(pt)
        sweep = weight_sweep(world, replace(config, seed=s), m, eval_seed=config.seed)
        uniform = next(p for p in sweep if abs(float(p.label.split(":")[1]) - 0.5) < 1e-9)
        best_fixed_hv = max(best_fixed_hv, max(hypervolume([p]) for p in sweep))
        rows.append(
            {
                "seed": s,
                "adaptive": pt,
                "sweep": sweep,
                "uniform": uniform,
                "dominates_uniform": dominates_strictly(pt.values, uniform.values),
            }
        )
    hv_adaptive = hypervolume(adaptive_points)
    summary = {
        "hv_adaptive": hv_adaptive,
        "best_fixed_hv": best_fixed_hv,
        "dominating_seeds": sum(r["dominates_uniform"] for r in rows),
        "seeds": len(seeds),
    }
    return StudyResult(rows, summary)


def dominates_strictly(a: np.ndarray, b: np.ndarray) -> bool:
    """Strict improvement on every objective."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    return bool(np.all(a > b))


def ablation_study(
    config: PipelineConfig,
    seeds,
    variants=(1, 2, 4),
    world: World | None = None,
) -> StudyResult:
    """Full model vs encoder/predictor ablations under paired seeds.

    Counts, per variant, the seeds where the full model is at least as good
    on every objective.
    """
    from .pipeline import run_ablation

    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    world = heterogeneous_world() if world is None else world
    train_users, eval_users = train_eval_split(world.config.n_users)
    rows = []
    for s in seeds:
        cfg = replace(config, seed=s)
        learners, _ = train(world, cfg, users=train_users)
        full_means, _ = evaluate(world, learners, cfg, eval_users, seed=config.seed)
        row = {"seed": s, "full": full_means}
        for v in variants:
            _, _, means, _ = run_ablation(
                world, cfg, v, users=train_users, eval_users=eval_users, eval_seed=config.seed
            )
            row[f"variant_{v}"] = means
        rows.append(row)
    counts = {
        v: sum(bool(np.all(r["full"] >= r[f"variant_{v}"])) for r in rows) for v in variants
    }
    summary = {"weak_domination_counts": counts, "seeds": len(seeds)}
    return StudyResult(rows, summary)


def heterogeneity_report(
    records_per_user: int = 1000,
    spread: float = 0.5,
    amplitude: float = 0.3,
    n_users: int = 30,
    n_items: int = 60,
    seed: int = 0,
) -> dict:
    """Correlation-dispersion evidence on a simulated log.

    Returns the std of per-user objective correlations and the range of
    per-context-bucket correlations for the given world settings.
    """
    world = build_world(
        WorldConfig(
            n_users=n_users,
            n_items=n_items,
            user_hetero_spread=spread,
            context_amplitude=amplitude,
            seed=seed,
        )
    )
    records = simulate_log(world, records_per_user, substream(seed, "hetero", "log"))
    by_user, omitted_u = group_correlations(records, "user")
    by_bucket, omitted_b = group_correlations(records, "context_bucket", period=world.config.period)
    user_vals = np.array(list(by_user.values()))
    bucket_vals = np.array(list(by_bucket.values()))
    return {
        "spread": spread,
        "amplitude": amplitude,
        "user_corr_std": float(user_vals.std()),
        "user_groups": len(by_user),
        "bucket_corr_range": float(np.ptp(bucket_vals)) if bucket_vals.size else 0.0,
        "bucket_groups": len(by_bucket),
        "omitted": omitted_u + omitted_b,
    }


def ab_experiment(
    config: PipelineConfig,
    world: World | None = None,
    objective: int = 0,
    use_covariates: bool = True,
    use_time_fe: bool = True,
    seed: int = 0,
) -> tuple[list[dict], RegressionResult]:
    """Simulated A/B test: adaptive system for treatment users, uniform-weight
    baseline for control, then an OLS treatment-effect fit on the pooled
    per-interaction outcomes with optional consumer covariates and
    time-of-day fixed effects."""
    world = heterogeneous_world() if world is None else world
    users = np.arange(world.config.n_users)
    assign = substream(seed, "ab", "assign").permutation(users)
    treated = set(int(u) for u in assign[: len(users) // 2])
    t_users = sorted(treated)
    c_users = sorted(set(int(u) for u in users) - treated)
    cfg_t = replace(config, mode="adaptive", seed=seed)
    learners_t, _ = train(world, cfg_t, users=t_users)
    n = config.n_objectives
    learners_c, _, _, _ = run_baseline_fixed(
        world, replace(config, seed=seed), tuple([1.0 / n] * n),
        users=c_users, eval_users=c_users[:1], eval_seed=seed,
    )
    rows = []
    for arm, learners, arm_users in (
        (1, learners_t, t_users),
        (0, learners_c, c_users),
    ):
        _, results = evaluate(world, learners, learners.config, arm_users, seed=seed)
        for res in results:
            for step in range(res.realized.shape[0]):
                rows.append(
                    {
                        "user_id": res.user_id,
                        "treatment": arm,
                        "step": step,
                        "bucket": step % world.config.period,
                        "base_tradeoff": float(world.base_tradeoff[res.user_id]),
                        "phase": float(world.user_phase[res.user_id]),
                        **{f"objective_{k}": float(res.realized[step, k]) for k in range(n)},
                    }
                )
    y = np.array([r[f"objective_{objective}"] for r in rows])
    t = np.array([float(r["treatment"]) for r in rows])
    cov = None
    if use_covariates:
        cov = np.column_stack(
            [[r["base_tradeoff"] for r in rows], [r["phase"] for r in rows]]
        )
    ti = np.array([r["bucket"] for r in rows]) if use_time_fe else None
    result = ols_treatment_effect(y, t, covariates=cov, time_index=ti)
    return rows, result
