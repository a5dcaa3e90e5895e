"""Bundled experiment presets.

Each preset pins every knob (stages, microbatches, chunks, tensor
group, latency distributions, seeds, schedulers), so results reproduce
from the repository alone.  ``sweep_units`` expands a preset into the
independent runs a sweep executes.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["Preset", "experiment_presets", "sweep_units"]


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    base: dict                      # config document (generator + scheduler...)
    axis: str                       # which knob the sweep varies
    points: tuple                   # values along the axis
    schedulers: tuple               # (kind, hint) pairs compared at each point
    seeds: tuple


def _gen(n, m, forward, backward, **kw) -> dict:
    doc = {"num_stages": n, "num_microbatches": m,
           "forward": forward, "backward": backward}
    doc.update(kw)
    return doc


def experiment_presets() -> dict[str, Preset]:
    seeds10 = tuple(range(10))
    return {p.name: p for p in [
        Preset(
            name="hint-sensitivity",
            description="BF / FB / B-priority / F-priority on one forward-heavy "
                        "workload with shared seeds",
            base={"generator": _gen(8, 32,
                                    {"kind": "uniform", "lo": 330, "hi": 510},
                                    {"kind": "uniform", "lo": 110, "hi": 170}),
                  "scheduler": {"kind": "rrfp", "hint": "bf", "buffer_limit": 8}},
            axis="hint",
            points=("bf", "fb", "bprio", "fprio"),
            schedulers=(("rrfp", None),),
            seeds=seeds10,
        ),
        Preset(
            name="buffer-limit",
            description="buffer-size limit sweep on a deep forward-heavy pipeline",
            base={"generator": _gen(10, 48,
                                    {"kind": "uniform", "lo": 120, "hi": 180},
                                    {"kind": "uniform", "lo": 60, "hi": 100}),
                  "scheduler": {"kind": "rrfp", "hint": "bf", "buffer_limit": 32}},
            axis="limit",
            points=(4, 8, 16, 32, 48),
            schedulers=(("rrfp", "bf"),),
            seeds=seeds10,
        ),
        Preset(
            name="jitter",
            description="paired-seed robustness sweep J0..J3, 1F1B vs BF on a "
                        "heterogeneous workload",
            base={"generator": _gen(
                      8, 24,
                      {"kind": "lognormal", "mu": 10.0, "sigma": 0.35,
                       "lo": 8_000, "hi": 60_000},
                      {"kind": "lognormal", "mu": 10.2, "sigma": 0.35,
                       "lo": 8_000, "hi": 70_000}),
                  "scheduler": {"kind": "rrfp", "hint": "bf", "buffer_limit": 32}},
            axis="jitter",
            points=("J0", "J1", "J2", "J3"),
            schedulers=(("1f1b", None), ("rrfp", "bf")),
            seeds=seeds10,
        ),
        Preset(
            name="depth",
            description="pipeline-depth sweep at fixed total work per microbatch",
            base={"scheduler": {"kind": "rrfp", "hint": "bf", "buffer_limit": 32}},
            axis="depth",
            points=(4, 8, 16),
            schedulers=(("1f1b", None), ("rrfp", "bf")),
            seeds=seeds10,
        ),
        Preset(
            name="imbalance",
            description="vision-prefix skew sweep (multimodal imbalance analogue)",
            base={"generator": _gen(8, 24,
                                    {"kind": "uniform", "lo": 150, "hi": 250},
                                    {"kind": "uniform", "lo": 150, "hi": 250}),
                  "scheduler": {"kind": "rrfp", "hint": "bf", "buffer_limit": 32}},
            axis="imbalance",
            points=(1.0, 1.5, 2.5, 4.0),
            schedulers=(("1f1b", None), ("rrfp", "bf")),
            seeds=seeds10,
        ),
        Preset(
            name="batch",
            description="global-batch (microbatch count) sweep",
            base={"generator": _gen(8, 16,
                                    {"kind": "uniform", "lo": 150, "hi": 250},
                                    {"kind": "uniform", "lo": 150, "hi": 250}),
                  "scheduler": {"kind": "rrfp", "hint": "bf", "buffer_limit": 32}},
            axis="batch",
            points=(16, 32, 64),
            schedulers=(("1f1b", None), ("rrfp", "bf")),
            seeds=seeds10,
        ),
        Preset(
            name="corollary-decay",
            description="makespan/L decay with microbatch count on a last-stage-"
                        "dominant corpus",
            base={"generator": _gen(4, 8,
                                    {"kind": "uniform", "lo": 80, "hi": 120},
                                    {"kind": "uniform", "lo": 80, "hi": 120},
                                    heavy_last=3.0),
                  "scheduler": {"kind": "rrfp", "hint": "bf", "buffer_limit": 32}},
            axis="batch",
            points=(8, 16, 32, 64),
            schedulers=(("rrfp", "bf"),),
            seeds=seeds10,
        ),
    ]}


def sweep_units(preset: Preset) -> list[dict]:
    """Expand a preset into one config document per (point, scheduler, seed)."""
    units = []
    for point in preset.points:
        for kind, hint in preset.schedulers:
            for seed in preset.seeds:
                doc = _apply_point(preset, point)
                doc["seed"] = seed
                sched = doc.setdefault("scheduler", {})
                sched["kind"] = kind
                if preset.axis == "hint":
                    sched["hint"] = point
                elif hint is not None:
                    sched["hint"] = hint
                doc["_sweep"] = {"preset": preset.name, "axis": preset.axis,
                                 "point": point, "scheduler": kind
                                 if kind != "rrfp" else f"rrfp-{sched.get('hint', 'bf')}"}
                units.append(doc)
    return units


def _apply_point(preset: Preset, point) -> dict:
    import json
    doc = json.loads(json.dumps(preset.base))
    gen = doc.get("generator")
    if preset.axis == "jitter":
        doc["jitter"] = point
    elif preset.axis == "limit":
        doc.setdefault("scheduler", {})["buffer_limit"] = point
    elif preset.axis == "batch":
        gen["num_microbatches"] = point
    elif preset.axis == "imbalance":
        gen["heavy_prefix"] = point
    elif preset.axis == "depth":
        # fixed total work: per-stage compute shrinks as the pipeline deepens
        mean = 2400 // point
        spread = mean // 4
        doc["generator"] = _gen(point, 32,
                                {"kind": "uniform", "lo": mean - spread,
                                 "hi": mean + spread},
                                {"kind": "uniform", "lo": mean - spread,
                                 "hi": mean + spread})
    elif preset.axis == "hint":
        pass
    else:
        raise ValueError(f"unknown sweep axis {preset.axis}")
    return doc
