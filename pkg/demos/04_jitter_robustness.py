"""Paired-seed jitter sweep.

Each compute task may receive an extra delay drawn from a stage-local
model (EMA of compute times, probabilistic gate, uniform magnitude).
Injection tables are materialized per task before a run, so at a fixed
seed the fixed-order baseline and the readiness-driven run experience
byte-identical perturbations; only their reactions differ.
"""

import statistics

from rrfp import GeneratorSpec, build_1f1b_schedule, generate_workload
from rrfp.baselines import run_fixed
from rrfp.engine import run_rrfp
from rrfp.jitter import PRESETS, build_injection_table
from rrfp.workload import lognormal

spec = GeneratorSpec(
    num_stages=8,
    num_microbatches=24,
    forward=lognormal(10.0, 0.35, 8_000, 60_000),
    backward=lognormal(10.2, 0.35, 8_000, 70_000),
)
seeds = range(10)

print(f"{'level':>6s} {'p':>4s} {'base':>7s} {'scale':>5s}   "
      f"{'1F1B (s)':>10s} {'BF (s)':>10s}  slowdowns")
base = {}
for level in ("J0", "J1", "J2", "J3"):
    cfg = PRESETS[level]
    acc = {"1f1b": [], "bf": []}
    for seed in seeds:
        w = generate_workload(spec, seed)
        table = build_injection_table(w, cfg, seed)
        _, m_fixed = run_fixed(build_1f1b_schedule(w), w,
                               injected_delays=table, record_trace=False)
        _, m_ready = run_rrfp(w, "bf", 32, seed, jitter=cfg,
                              record_trace=False)
        acc["1f1b"].append(m_fixed.makespan)
        acc["bf"].append(m_ready.makespan)
    means = {k: statistics.mean(v) for k, v in acc.items()}
    if level == "J0":
        base = dict(means)
    slow = {k: 100 * (means[k] / base[k] - 1) for k in means}
    print(f"{level:>6s} {cfg.probability:>4.1f} {cfg.base_delay:>6d}u "
          f"{cfg.scale:>5.1f}   {means['1f1b'] / 1e6:>10.3f} "
          f"{means['bf'] / 1e6:>10.3f}  "
          f"1f1b +{slow['1f1b']:.1f}%  bf +{slow['bf']:.1f}%")

print("\nreadiness-driven dispatch degrades more slowly because stages"
      "\nabsorb a late task by running whatever else is already ready.")
