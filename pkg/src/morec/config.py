"""Experiment configuration: TOML with strict unknown-key rejection.

Three sections: [experiment] names the kind, output directory, seed list,
and kind-specific options; [world] and [pipeline] override environment and
model defaults.  Every key is validated against a schema so typos fail
loudly instead of silently running with a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # py3.10
    import tomli as tomllib

from .pipeline import PipelineConfig
from .simenv import WorldConfig


class ConfigError(ValueError):
    """Bad experiment configuration, with the offending field named."""


KINDS = ("train", "sweep", "frontier", "ablate", "sensitivity", "timing", "analyze")

# experiment-section options and the kinds that may use them
_EXPERIMENT_KEYS = {
    "kind": KINDS,
    "out": KINDS,
    "seeds": KINDS,
    "grid_points": ("sweep", "frontier"),
    "variants": ("ablate",),
    "axis": ("sensitivity",),
    "values": ("sensitivity",),
    "sizes": ("timing",),
    "epochs": ("timing",),
    "records_per_user": ("analyze",),
    "objective": ("analyze",),
}

_REQUIRED = {
    "sensitivity": ("axis", "values"),
    "timing": ("sizes",),
}


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    world: WorldConfig
    pipeline: PipelineConfig
    out: Path
    seeds: tuple[int, ...]
    options: dict = field(default_factory=dict)


def _fields(cls) -> dict[str, type]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def _coerce(section: str, key: str, value, target):
    if target is bool or target == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: expected a boolean, got {value!r}")
        return value
    if target is int or target == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
        return value
    if target is float or target == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
        return float(value)
    if target is str or target == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key}: expected a string, got {value!r}")
        return value
    return value


_OPTIONAL_FIELD_TYPES = {
    # dataclass fields whose annotations are unions; coerced by hand
    ("pipeline", "candidate_pool"): int,
    ("pipeline", "alpha_fixed"): tuple,
    ("pipeline", "reward_weights"): tuple,
}


def _build_section(section: str, cls, data: dict):
    known = _fields(cls)
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        special = _OPTIONAL_FIELD_TYPES.get((section, key))
        if special is tuple:
            if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
            ):
                raise ConfigError(f"{section}.{key}: expected a list of numbers")
            kwargs[key] = tuple(float(v) for v in value)
            continue
        if special is int:
            kwargs[key] = _coerce(section, key, value, int)
            continue
        ann = str(known[key])
        if "bool" in ann:
            kwargs[key] = _coerce(section, key, value, bool)
        elif "int" in ann:
            kwargs[key] = _coerce(section, key, value, int)
        elif "float" in ann:
            kwargs[key] = _coerce(section, key, value, float)
        elif "str" in ann:
            kwargs[key] = _coerce(section, key, value, str)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _experiment_options(exp: dict) -> tuple[str, str, list[int] | None, dict]:
    if "kind" not in exp:
        raise ConfigError("experiment.kind is required")
    kind = exp["kind"]
    if kind not in KINDS:
        raise ConfigError(f"experiment.kind: unknown kind {kind!r}; choose from {', '.join(KINDS)}")
    for key in exp:
        allowed = _EXPERIMENT_KEYS.get(key)
        if allowed is None:
            raise ConfigError(f"unknown key experiment.{key}")
        if kind not in allowed:
            raise ConfigError(f"experiment.{key} does not apply to kind {kind!r}")
    for req in _REQUIRED.get(kind, ()):
        if req not in exp:
            raise ConfigError(f"experiment.{req} is required for kind {kind!r}")
    out = exp.get("out", "out")
    if not isinstance(out, str):
        raise ConfigError("experiment.out: expected a string path")
    seeds = exp.get("seeds")
    if seeds is not None:
        if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in seeds
        ):
            raise ConfigError("experiment.seeds: expected a nonempty list of integers")
    options: dict = {}
    if "grid_points" in exp:
        options["grid_points"] = _coerce("experiment", "grid_points", exp["grid_points"], int)
    if "variants" in exp:
        v = exp["variants"]
        if not isinstance(v, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in v):
            raise ConfigError("experiment.variants: expected a list of integers")
        options["variants"] = tuple(v)
    if "axis" in exp:
        options["axis"] = _coerce("experiment", "axis", exp["axis"], str)
    if "values" in exp:
        v = exp["values"]
        if not isinstance(v, list) or not v:
            raise ConfigError("experiment.values: expected a nonempty list")
        options["values"] = tuple(float(x) for x in v)
    if "sizes" in exp:
        v = exp["sizes"]
        if not isinstance(v, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in v):
            raise ConfigError("experiment.sizes: expected a list of integers")
        options["sizes"] = tuple(v)
    if "epochs" in exp:
        options["epochs"] = _coerce("experiment", "epochs", exp["epochs"], int)
    if "records_per_user" in exp:
        options["records_per_user"] = _coerce("experiment", "records_per_user", exp["records_per_user"], int)
    if "objective" in exp:
        options["objective"] = _coerce("experiment", "objective", exp["objective"], int)
    return kind, out, seeds, options


def parse_config(path, seed_override: int | None = None, out_override: str | None = None) -> ExperimentSpec:
    """Parse and validate an experiment file; flags may override seed and
    output directory (the resolved values land in the manifest)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: parse failure: {exc}") from exc
    for section in raw:
        if section not in ("experiment", "world", "pipeline"):
            raise ConfigError(f"unknown section [{section}]")
    if "experiment" not in raw:
        raise ConfigError("missing [experiment] section")
    kind, out, seeds, options = _experiment_options(raw["experiment"])
    world = _build_section("world", WorldConfig, raw.get("world", {}))
    pipeline = _build_section("pipeline", PipelineConfig, raw.get("pipeline", {}))
    if seed_override is not None:
        pipeline = replace(pipeline, seed=int(seed_override))
        seeds = [int(seed_override)]
    if seeds is None:
        seeds = [pipeline.seed]
    if out_override is not None:
        out = out_override
    try:
        world.validate()
        pipeline.validate(world.n_items)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if pipeline.n_objectives != world.n_objectives:
        raise ConfigError("pipeline.n_objectives must match world.n_objectives")
    return ExperimentSpec(
        kind=kind,
        world=world,
        pipeline=pipeline,
        out=Path(out),
        seeds=tuple(int(s) for s in seeds),
        options=options,
    )


def spec_as_dict(spec: ExperimentSpec) -> dict:
    """Resolved configuration for the manifest (flag overrides applied)."""
    return {
        "experiment": {"kind": spec.kind, "out": str(spec.out), "seeds": list(spec.seeds), **spec.options},
        "world": dataclasses.asdict(spec.world),
        "pipeline": {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in dataclasses.asdict(spec.pipeline).items()
        },
    }
