"""Lambda sweep on the committed conflict benchmark; prints the retention table.

    python scripts/run_sweep.py --out runs/sweep --workers 4
"""

import argparse
import math
from pathlib import Path

import numpy as np

from frpo_lab.downstream import conflict_benchmark, lambda_sweep

LAMBDAS = (math.inf, 5.0, 2.0, 1.0, 0.5, 0.2, 0.1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    bench = conflict_benchmark()
    res = lambda_sweep(bench, LAMBDAS, range(args.seeds), workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "retention.csv").write_text(res.retention_csv())
    (out / "sweep_summary.csv").write_text(res.summary_csv())

    grpo = res.mean_retention(math.inf)
    print("lambda  " + "  ".join(f"KL={k:<5}" for k in bench.kl_grid) + "  end-metric")
    for lam in res.lambdas():
        ret = res.mean_retention(lam)
        end = np.mean([c.trace.downstream_metric[-1] for c in res.cells_for(lam)])
        mark = "" if math.isinf(lam) else f"  (gap {np.mean(ret - grpo):+.3f})"
        print(f"{lam:<7} " + "  ".join(f"{v:8.4f}" for v in ret) + f"  {end:8.4f}{mark}")


if __name__ == "__main__":
    main()
