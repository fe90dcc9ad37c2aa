"""Experiment front-end: dispatch configured runs and emit verified artifacts.

Every run writes CSV artifacts plus learner snapshots into the output
directory, then finalizes a manifest (resolved config, seeds, wall time,
sha256 per artifact) via an atomic rename.  The exit status is zero only if
every declared artifact exists and matches its checksum, and an interrupted
run never leaves a manifest behind.  Environment variables are never read.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analytics import (
    hypervolume,
    multi_seed_frontier,
    scalability_timing,
    sensitivity_sweep,
    weight_sweep,
)
from .config import ConfigError, ExperimentSpec, parse_config, spec_as_dict
from .experiments import ab_experiment, ablation_study, heterogeneity_report
from .pipeline import evaluate, train
from .simenv import build_world

MANIFEST = "manifest.json"


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, np.floating):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    """Deterministic CSV: fixed newline, repr-exact floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _episode_rows(results) -> list[list]:
    rows = []
    for res in results:
        n = res.realized.shape[1]
        for step in range(res.realized.shape[0]):
            rows.append(
                [res.user_id, step, res.consumed[step]]
                + [res.realized[step, k] for k in range(n)]
                + [res.predicted[step, k] for k in range(n)]
                + [res.alphas[step, k] for k in range(n)]
            )
    return rows


def _episode_header(n: int) -> list[str]:
    return (
        ["user_id", "step", "item_id"]
        + [f"realized_{k}" for k in range(n)]
        + [f"predicted_{k}" for k in range(n)]
        + [f"alpha_{k}" for k in range(n)]
    )


def _frontier_rows(points) -> list[list]:
    return [[p.label] + [v for v in p.values] for p in points]


def _run_train(spec: ExperimentSpec, out: Path) -> list[str]:
    world = build_world(spec.world)
    artifacts = []
    for seed in spec.seeds:
        cfg = replace(spec.pipeline, seed=seed)
        learners, log = train(world, cfg)
        n = cfg.n_objectives
        tag = f"seed{seed}"
        log_path = out / f"training_log_{tag}.csv"
        keys = ["step", "reward", "noise", "pred_loss", "critic_loss", "actor_q"] + [
            f"alpha_{k}" for k in range(n)
        ]
        write_csv(log_path, keys, [[row[k] for k in keys] for row in log])
        artifacts.append(log_path.name)
        means, results = evaluate(world, learners, cfg, range(world.config.n_users), seed=seed)
        ep_path = out / f"eval_episodes_{tag}.csv"
        write_csv(ep_path, _episode_header(n), _episode_rows(results))
        artifacts.append(ep_path.name)
        means_path = out / f"eval_means_{tag}.csv"
        write_csv(means_path, [f"mean_{k}" for k in range(n)], [[m for m in means]])
        artifacts.append(means_path.name)
        for name, store in learners.stores().items():
            snap = out / f"params_{name}_{tag}.txt"
            store.save(str(snap))
            artifacts.append(snap.name)
    return artifacts


def _run_sweep(spec: ExperimentSpec, out: Path) -> list[str]:
    world = build_world(spec.world)
    m = spec.options.get("grid_points", 5)
    points = weight_sweep(world, spec.pipeline, m)
    path = out / "frontier_fixed.csv"
    n = spec.pipeline.n_objectives
    write_csv(path, ["label"] + [f"mean_{k}" for k in range(n)], _frontier_rows(points))
    return [path.name]


def _run_frontier(spec: ExperimentSpec, out: Path) -> list[str]:
    world = build_world(spec.world)
    m = spec.options.get("grid_points", 5)
    fixed = weight_sweep(world, spec.pipeline, m)
    adaptive = multi_seed_frontier(world, spec.pipeline, spec.seeds)
    n = spec.pipeline.n_objectives
    header = ["label"] + [f"mean_{k}" for k in range(n)]
    fixed_path = out / "frontier_fixed.csv"
    write_csv(fixed_path, header, _frontier_rows(fixed))
    adaptive_path = out / "frontier_adaptive.csv"
    write_csv(adaptive_path, header, _frontier_rows(adaptive))
    summary_path = out / "frontier_summary.csv"
    write_csv(
        summary_path,
        ["model", "hypervolume"],
        [["fixed", hypervolume(fixed)], ["adaptive", hypervolume(adaptive)]],
    )
    return [fixed_path.name, adaptive_path.name, summary_path.name]


def _run_ablate(spec: ExperimentSpec, out: Path) -> list[str]:
    world = build_world(spec.world)
    variants = spec.options.get("variants", (1, 2, 4))
    study = ablation_study(spec.pipeline, spec.seeds, variants=variants, world=world)
    n = spec.pipeline.n_objectives
    rows = []
    for row in study.rows:
        rows.append([row["seed"], "full"] + [v for v in row["full"]])
        for v in variants:
            rows.append([row["seed"], f"variant_{v}"] + [x for x in row[f"variant_{v}"]])
    path = out / "ablation.csv"
    write_csv(path, ["seed", "model"] + [f"mean_{k}" for k in range(n)], rows)
    summary = out / "ablation_summary.csv"
    counts = study.summary["weak_domination_counts"]
    write_csv(
        summary,
        ["variant", "full_weakly_dominates_in_seeds", "seeds"],
        [[v, counts[v], study.summary["seeds"]] for v in variants],
    )
    return [path.name, summary.name]


def _run_sensitivity(spec: ExperimentSpec, out: Path) -> list[str]:
    world = build_world(spec.world)
    rows = sensitivity_sweep(
        world, spec.pipeline, spec.options["axis"], spec.options["values"], seeds=spec.seeds
    )
    keys = list(rows[0].keys())
    path = out / "sensitivity.csv"
    write_csv(path, keys, [[r[k] for k in keys] for r in rows])
    return [path.name]


def _run_timing(spec: ExperimentSpec, out: Path) -> list[str]:
    world = build_world(spec.world)
    res = scalability_timing(
        world,
        spec.pipeline,
        spec.options["sizes"],
        epochs=spec.options.get("epochs", 1),
        seed=spec.pipeline.seed,
    )
    path = out / "timing.csv"
    write_csv(path, ["size", "seconds"], [[s, t] for s, t in zip(res.sizes, res.seconds)])
    fit_path = out / "timing_fit.csv"
    write_csv(
        fit_path,
        ["slope", "intercept", "r_squared"],
        [[res.slope, res.intercept, res.r_squared]],
    )
    return [path.name, fit_path.name]


def _run_analyze(spec: ExperimentSpec, out: Path) -> list[str]:
    world = build_world(spec.world)
    from .analytics import group_correlations
    from .rng import substream
    from .simenv import simulate_log

    per_user = spec.options.get("records_per_user", 500)
    records = simulate_log(world, per_user, substream(spec.pipeline.seed, "analyze", "log"))
    by_user, om_u = group_correlations(records, "user")
    by_bucket, om_b = group_correlations(records, "context_bucket", period=world.config.period)
    user_path = out / "correlations_user.csv"
    write_csv(user_path, ["user_id", "pearson_objective_0_vs_1"], [[k, v] for k, v in by_user.items()])
    bucket_path = out / "correlations_bucket.csv"
    write_csv(bucket_path, ["bucket", "pearson_objective_0_vs_1"], [[k, v] for k, v in by_bucket.items()])
    disp_path = out / "dispersion.csv"
    uv = np.array(list(by_user.values()))
    bv = np.array(list(by_bucket.values()))
    write_csv(
        disp_path,
        ["user_corr_std", "bucket_corr_range", "omitted_groups"],
        [[float(uv.std()) if uv.size else 0.0, float(np.ptp(bv)) if bv.size else 0.0, om_u + om_b]],
    )
    objective = spec.options.get("objective", 0)
    _, result = ab_experiment(spec.pipeline, world=world, objective=objective, seed=spec.pipeline.seed)
    ols_path = out / "ab_ols.csv"
    write_csv(
        ols_path,
        ["term", "coefficient", "robust_se"],
        [[nm, c, s] for nm, c, s in zip(result.names, result.coef, result.se)],
    )
    return [user_path.name, bucket_path.name, disp_path.name, ols_path.name]


_RUNNERS = {
    "train": _run_train,
    "sweep": _run_sweep,
    "frontier": _run_frontier,
    "ablate": _run_ablate,
    "sensitivity": _run_sensitivity,
    "timing": _run_timing,
    "analyze": _run_analyze,
}


def run(spec: ExperimentSpec) -> int:
    """Execute one experiment; returns the process exit status."""
    out = spec.out
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    artifacts = _RUNNERS[spec.kind](spec, out)
    config_copy = out / "config_resolved.json"
    config_copy.write_text(json.dumps(spec_as_dict(spec), indent=2, sort_keys=True) + "\n")
    artifacts = list(artifacts) + [config_copy.name]
    manifest = {
        "kind": spec.kind,
        "seeds": list(spec.seeds),
        "config": spec_as_dict(spec),
        "wall_time_s": time.perf_counter() - t0,
        "artifacts": {name: sha256_file(out / name) for name in sorted(artifacts)},
    }
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out / MANIFEST)  # atomic finalize: no partial manifest
    return 0 if verify_artifacts(out) else 1


def verify_artifacts(out: Path) -> bool:
    """True iff the manifest exists and every artifact matches its checksum."""
    manifest_path = Path(out) / MANIFEST
    if not manifest_path.is_file():
        return False
    manifest = json.loads(manifest_path.read_text())
    for name, digest in manifest.get("artifacts", {}).items():
        target = Path(out) / name
        if not target.is_file() or sha256_file(target) != digest:
            return False
    return True


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="morec",
        description="Deterministic multi-objective recommender experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in _RUNNERS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=None, help="override the output directory")
    args = parser.parse_args(argv)
    try:
        spec = parse_config(args.config, seed_override=args.seed, out_override=args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if spec.kind != args.command:
        print(
            f"error: config declares kind {spec.kind!r} but subcommand is {args.command!r}",
            file=sys.stderr,
        )
        return 2
    try:
        return run(spec)
    except Exception as exc:  # diagnostic, nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
