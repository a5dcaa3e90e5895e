"""Experiment configuration: one JSON document, one schema.

Sections: exactly one of ``workload`` (explicit latency tables) or
``generator`` (synthetic recipe), plus ``scheduler``, ``jitter``,
``tp``, ``live`` and ``output``.  Dotted-path overrides come from the
CLI as ``--set key.sub=value``.  Validation failures name the offending
field path so they can be fixed without reading source.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .arbitration import HINT_KINDS, HintOrder, TpGroup
from .jitter import PRESETS as JITTER_PRESETS
from .jitter import JitterConfig
from .workload import GeneratorSpec, Workload, WorkloadError, generate_workload

__all__ = ["ConfigError", "RunConfig", "load_config", "resolve_config",
           "apply_overrides", "run_id_for"]


class ConfigError(ValueError):
    """Schema violation; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


_DEFAULTS = {
    "seed": 0,
    "scheduler": {"kind": "rrfp", "hint": "bf", "buffer_limit": 32},
    "jitter": "J0",
    "tp": {"coordination_round_cost": 5, "skew_lo": 0, "skew_hi": 0},
    "live": {"time_scale": 1.0, "watchdog_secs": 30.0},
    "output": {"dir": "out"},
}


@dataclass
class RunConfig:
    """A fully resolved, validated experiment configuration."""

    raw: dict
    seed: int
    workload: Workload
    scheduler_kind: str
    hint: HintOrder
    buffer_limit: int
    jitter: JitterConfig
    tp: TpGroup
    time_scale: float
    watchdog_secs: float
    output_dir: str

    def run_id(self) -> str:
        return run_id_for(self.raw)


def run_id_for(resolved: dict) -> str:
    digest = hashlib.sha256(
        json.dumps(resolved, sort_keys=True).encode()).hexdigest()
    return digest[:12]


def _require(obj: dict, path: str, key: str, types, default=None):
    if key not in obj:
        if default is not None:
            return default
        raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
    val = obj[key]
    if not isinstance(val, types) or isinstance(val, bool) and types is not bool:
        tn = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ConfigError(f"{path}.{key}" if path else key, f"expected {tn}")
    return val


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``key.path=value`` overrides; values parse as JSON when
    possible and fall back to strings."""
    doc = json.loads(json.dumps(doc))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        path, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = path.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(path, "override path crosses a non-object")
        node[parts[-1]] = value
    return doc


def load_config(path: str, overrides: list[str] | None = None) -> RunConfig:
    with open(path) as f:
        doc = json.load(f)
    if overrides:
        doc = apply_overrides(doc, overrides)
    return resolve_config(doc)


def resolve_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a JSON object")
    merged = json.loads(json.dumps(_DEFAULTS))
    for k, v in doc.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k].update(v)
        else:
            merged[k] = v

    seed = _require(merged, "", "seed", int)

    has_w = "workload" in merged
    has_g = "generator" in merged
    if has_w == has_g:
        raise ConfigError("workload", "exactly one of workload/generator required")
    try:
        if has_w:
            workload = Workload.from_json(_require(merged, "", "workload", dict))
        else:
            gen = GeneratorSpec.from_json(_require(merged, "", "generator", dict))
            workload = generate_workload(gen, seed)
    except WorkloadError as e:
        raise ConfigError("workload" if has_w else "generator", str(e))
    except (KeyError, TypeError) as e:
        raise ConfigError("workload" if has_w else "generator",
                          f"malformed: {e}")

    sched = merged["scheduler"]
    kind = _require(sched, "scheduler", "kind", str)
    if kind not in ("rrfp", "1f1b"):
        raise ConfigError("scheduler.kind", "must be rrfp or 1f1b")
    hint_name = _require(sched, "scheduler", "hint", str)
    try:
        if hint_name.startswith("file:"):
            with open(hint_name[5:]) as f:
                spec = json.load(f)
            hint = HintOrder(kind="external",
                             ranked=tuple(tuple(e) for e in spec["order"]))
        else:
            if hint_name not in HINT_KINDS:
                raise ValueError(f"unknown hint kind: {hint_name}")
            hint = HintOrder(kind=hint_name)
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError("scheduler.hint", str(e))
    limit = _require(sched, "scheduler", "buffer_limit", int)
    if limit < 1:
        raise ConfigError("scheduler.buffer_limit", "must be >= 1")

    jit = merged["jitter"]
    if isinstance(jit, str):
        if jit not in JITTER_PRESETS:
            raise ConfigError("jitter", f"unknown level {jit}; use J0..J3 or an object")
        jitter = JITTER_PRESETS[jit]
    elif isinstance(jit, dict):
        try:
            jitter = JitterConfig.from_json(jit)
        except (TypeError, ValueError) as e:
            raise ConfigError("jitter", str(e))
    else:
        raise ConfigError("jitter", "must be a level name or an object")

    tp_doc = merged["tp"]
    try:
        tp = TpGroup(group_size=workload.tp_group_size,
                     coordination_round_cost=_require(tp_doc, "tp",
                                                      "coordination_round_cost", int),
                     skew_lo=_require(tp_doc, "tp", "skew_lo", int),
                     skew_hi=_require(tp_doc, "tp", "skew_hi", int))
    except ValueError as e:
        raise ConfigError("tp", str(e))

    live = merged["live"]
    scale = _require(live, "live", "time_scale", (int, float))
    if scale <= 0:
        raise ConfigError("live.time_scale", "must be positive")
    watchdog = _require(live, "live", "watchdog_secs", (int, float))

    out_dir = _require(merged["output"], "output", "dir", str)

    return RunConfig(raw=merged, seed=seed, workload=workload,
                     scheduler_kind=kind, hint=hint, buffer_limit=limit,
                     jitter=jitter, tp=tp, time_scale=float(scale),
                     watchdog_secs=float(watchdog), output_dir=out_dir)
