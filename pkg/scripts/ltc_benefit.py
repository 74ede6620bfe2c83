"""Short vs long temporal extent, flow vs RGB, and late fusion on the synthetic benchmark.

    python scripts/ltc_benefit.py --root /tmp/ltc-bench --seeds 0 1 2

Trains flow at each --extents value and RGB at the longest one, every arm with
the same desk budget, then prints per-seed video accuracy and the flow+RGB
fusion.  Roughly 4-5 minutes per 64-frame arm on one core.
"""
import argparse
import json
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from ltc import eval as ev
from ltc import experiment as ex
from ltc.data import Manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, default=Path("ltc-bench"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--extents", type=int, nargs="+", default=[16, 64])
    ap.add_argument("--iterations", type=int, default=ex.DeskConfig.iterations)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--json", type=Path, help="write the summary here")
    args = ap.parse_args()

    desk = ex.DeskConfig(iterations=args.iterations)
    root = ex.ensure_benchmark(args.root)
    longest = max(args.extents)
    arms = {}
    with threadpool_limits(limits=args.threads):
        for modality, extents in (("flow", args.extents), ("rgb", [longest])):
            splits = ex.load_benchmark(root, modality)
            for t in extents:
                runs = []
                for s in args.seeds:
                    r = ex.run_arm(root, modality, t, s, desk, splits)
                    print(f"{modality:4s} {t:3d}f seed {s}: acc {r.video_accuracy:.3f}  "
                          f"loss {r.final_loss:.3f}  {r.seconds:.0f}s", flush=True)
                    runs.append(r)
                arms[modality, t] = runs

    labels = Manifest.load(root, manifest="manifest_flow.tsv").labels()
    fused = [ev.video_accuracy(ev.late_fusion([f.table, r.table]), labels)
             for f, r in zip(arms["flow", longest], arms["rgb", longest])]
    summary = {f"{m}_{t}f": [r.video_accuracy for r in runs] for (m, t), runs in arms.items()}
    summary[f"fusion_{longest}f"] = fused
    print()
    for name, accs in summary.items():
        print(f"{name:12s} mean {np.mean(accs):.3f}  {np.round(accs, 3).tolist()}")
    if args.json:
        args.json.write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
