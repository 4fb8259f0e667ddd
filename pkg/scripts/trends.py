"""Reduced-scale trend runs over several seeds, one summary line per seed.

Usage: python scripts/trends.py [--seeds 0 1 2 3 4] [--out runs/trends]
"""

import argparse
import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from test_acceptance import trend_config  # noqa: E402

from cshift.graph import EdgeTrainer  # noqa: E402
from cshift.pipeline import ablation, node_sweep, run_pipeline, weak_expert  # noqa: E402


def summarize(seed: int, root: Path) -> str:
    cfg = trend_config(seed)
    trainer = EdgeTrainer()
    run = run_pipeline(cfg, root / "run", trainer=trainer)
    t = {(r.iteration, r.task, r.method): r.value for r in run.rows}
    change = {d: 100 * (t[(2, d, "cshift")] / t[(1, d, "cshift")] - 1) for d in cfg.tasks}
    sweep = node_sweep(cfg, root / "sweep", trainer=trainer)
    weak = weak_expert(cfg, root / "weak", trainer=trainer)
    abl = ablation(cfg, root / "ablation", trainer=trainer)
    return (f"seed {seed}: depth it1 {t[(1, 'depth', 'cshift')]:.2f} "
            f"(expert {t[(1, 'depth', 'expert')]:.2f}); it2 change % "
            + " ".join(f"{d}={v:+.1f}" for d, v in change.items())
            + "; sweep " + " ".join(f"{o}:{c[0][1]:.2f}->{c[-1][1]:.2f}" for o, c in sweep.items())
            + "; boost % " + "/".join(f"{r[-1]:.1f}" for r in weak)
            + "; ablation " + " ".join(f"{r[0]}={r[4]:.2f}" for r in abl if r[1] == "depth"))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="runs/trends")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    for seed in args.seeds:
        print(summarize(seed, Path(args.out) / f"seed{seed}"), flush=True)


if __name__ == "__main__":
    main()
