"""Makespan bounds and the exhaustive-search oracle.

In the analytic setting (non-interleaved, zero communication delay) the
backward-first hint admits a closed upper bound: single-direction
reference makespans plus per-microbatch stage-imbalance sums.  The
total last-stage work L lower-bounds any schedule.  On instances small
enough for exhaustive search the optimum sits between the two.
"""

from rrfp import (
    GeneratorSpec,
    brute_force_makespan,
    corollary_ratio_curve,
    generate_workload,
    run_rrfp,
    theorem_bound,
)
from rrfp.workload import uniform

spec = GeneratorSpec(num_stages=3, num_microbatches=2,
                     forward=uniform(50, 200), backward=uniform(50, 200))
workload = generate_workload(spec, seed=5)

report = theorem_bound(workload)
opt = brute_force_makespan(workload)
_, metrics = run_rrfp(workload, "bf", buffer_limit=32, seed=5)

print("tiny instance (3 stages x 2 microbatches):")
print(f"  lower bound L            = {report.lower_bound}")
print(f"  exhaustive optimum       = {opt}")
print(f"  BF makespan              = {metrics.makespan}")
print(f"  upper bound              = {report.upper_bound}")
print(f"    = forward ref {report.forward_ref} + backward ref "
      f"{report.backward_ref} + imbalance "
      f"{report.forward_imbalance + report.backward_imbalance}")
assert report.lower_bound <= opt <= metrics.makespan <= report.upper_bound

# The bound is loose by at most the imbalance terms; with a dominant
# last stage C/L decays toward 1 as microbatches grow.
base = GeneratorSpec(num_stages=4, num_microbatches=8,
                     forward=uniform(80, 120), backward=uniform(80, 120),
                     heavy_last=3.0)
print("\nmakespan/L on a last-stage-dominant corpus (mean of 10 seeds):")
for row in corollary_ratio_curve(base, [8, 16, 32, 64], seeds=list(range(10))):
    bar = "#" * int((row["mean_ratio"] - 1) * 200)
    print(f"  M={row['num_microbatches']:>3d}: {row['mean_ratio']:.4f} {bar}")
