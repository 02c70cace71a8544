"""All six policies on the same desk-scale workloads.

Run: python demos/scheduler_comparison.py [n_seeds]
"""

from __future__ import annotations

import sys

from ftfair.experiments import compare_schedulers


def main(n_seeds: int = 2) -> None:
    for share in (0.0, 0.4, 1.0):
        print(f"network-class share {share:.0%}")
        print(f"  {'policy':<9} {'max rho':>8} {'jain':>6} {'GPU-s':>10}")
        for name, p in compare_schedulers(range(n_seeds), share).items():
            print(f"  {name:<9} {p.median_max_rho:>8.3f} {p.median_jain:>6.3f} {p.median_gpu_time:>10.0f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 2)
