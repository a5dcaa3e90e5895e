"""Backpressure: bounded buffers without deadlock.

A stage stops dispatching forwards once its lead D = n_f - n_b reaches
the configured limit, draining backwards instead (or, when interleaved,
finishing one microbatch at a time in its fixed local order).  That
caps every buffer at the limit (+C when interleaved) while keeping the
pipeline live even at limit 1.
"""

import statistics

from rrfp import GeneratorSpec, generate_workload
from rrfp.engine import run_rrfp
from rrfp.workload import uniform

# iteration time vs buffer limit on a deep forward-heavy pipeline
spec = GeneratorSpec(num_stages=10, num_microbatches=48,
                     forward=uniform(120, 180), backward=uniform(60, 100))
print("buffer-limit sweep (mean makespan over 10 seeds, deep pipeline):")
base = None
for limit in (1, 2, 4, 8, 16, 32, 48):
    vals = []
    for seed in range(10):
        w = generate_workload(spec, seed)
        _, m = run_rrfp(w, "bf", limit, seed, record_trace=False)
        vals.append(m.makespan)
    mean = statistics.mean(vals)
    base = base or mean
    print(f"  limit {limit:>2d}: {mean:>10.0f} us  "
          + "#" * int(40 * mean / base))

# recorded occupancy never exceeds the bound, interleaved or not
print("\nmax recorded buffer occupancy vs bound:")
for chunks, limit in [(1, 1), (1, 4), (2, 2), (4, 2)]:
    s = GeneratorSpec(num_stages=4, num_microbatches=12, num_chunks=chunks,
                      forward=uniform(80, 160), backward=uniform(80, 160))
    w = generate_workload(s, seed=1)
    _, m = run_rrfp(w, "bf", limit, 1)
    cap = limit if chunks == 1 else limit + chunks
    print(f"  C={chunks} limit={limit}: occupancy {m.max_occupancy()} "
          f"<= bound {cap}")
