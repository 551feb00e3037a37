"""Timing comparison of the compiled kernels against the pure-Python
fallback on the training hot path.

Runs each workload in a subprocess so the backend choice (via
NTKADAPT_PURE_PYTHON) is made at import time, exactly as a user would see
it.  Reports the median of repeated runs.

Usage: python scripts/benchmark_backends.py [--steps 20] [--repeats 3]
"""

import argparse
import json
import os
import subprocess
import sys

_WORKLOAD = r"""
import json
import sys
import time

import numpy as np

import ntkadapt.kernels as kernels
import ntkadapt.trainer as tr
from ntkadapt.model import init_xavier
from ntkadapt.problems import (GroupLayout, ResidualOp, poisson1d,
                               sample_collocation, wave1d)

steps = int(sys.argv[1])
results = {"backend": kernels.BACKEND}

# Wave training steps: the dominant cost of the wave experiment.
spec = wave1d()
layout = GroupLayout((("D", 300), ("D_i", 300), ("B_i", 100),
                      ("B1", 100), ("B2", 100)))
theta0 = init_xavier(spec.model, seed=0)
cfg = tr.TrainConfig(eta=1e-6, steps=steps, weight_mode="sketch",
                     sketch_alpha=1e-3, layout=layout, resample=True,
                     seed=0)
t0 = time.perf_counter()
tr.train(spec, theta0, cfg)
results["wave_step_ms"] = (time.perf_counter() - t0) / steps * 1e3

# Dense Poisson Jacobian: the exact-kernel path.
spec = poisson1d()
layout = GroupLayout((("D", 64), ("B1", 1), ("B2", 1)))
pts = sample_collocation(spec, layout, 0)
rop = ResidualOp(spec, pts)
theta = init_xavier(spec.model, seed=0).values
t0 = time.perf_counter()
for _ in range(max(1, steps // 2)):
    rop.jacobian(theta)
results["poisson_jacobian_ms"] = ((time.perf_counter() - t0)
                                  / max(1, steps // 2) * 1e3)
print(json.dumps(results))
"""


def run(pure, steps):
    env = dict(os.environ)
    if pure:
        env["NTKADAPT_PURE_PYTHON"] = "1"
    else:
        env.pop("NTKADAPT_PURE_PYTHON", None)
    out = subprocess.run([sys.executable, "-c", _WORKLOAD, str(steps)],
                         env=env, capture_output=True, text=True,
                         check=True)
    return json.loads(out.stdout.strip().split("\n")[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--steps", type=int, default=20,
                    help="training steps per timing run")
    ap.add_argument("--repeats", type=int, default=3,
                    help="runs per backend; medians are reported")
    args = ap.parse_args()

    rows = {}
    for pure in (False, True):
        runs = [run(pure, args.steps) for _ in range(args.repeats)]
        backend = runs[0]["backend"]
        rows[backend] = {
            key: sorted(r[key] for r in runs)[len(runs) // 2]
            for key in ("wave_step_ms", "poisson_jacobian_ms")
        }

    print(f"{'workload':<24}{'compiled':>12}{'python':>12}{'speedup':>10}")
    for key, label in (("wave_step_ms", "wave train step (ms)"),
                       ("poisson_jacobian_ms", "poisson jacobian (ms)")):
        c = rows["compiled"][key]
        p = rows["python"][key]
        print(f"{label:<24}{c:>12.2f}{p:>12.2f}{p / c:>9.1f}x")


if __name__ == "__main__":
    main()
