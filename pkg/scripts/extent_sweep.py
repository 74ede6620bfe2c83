"""Per-class accuracy across temporal extents, followed by the extent analysis.

    python scripts/extent_sweep.py --root /tmp/ltc-bench --extents 16 32 48 64

Trains one flow network per extent (same seed and budget), measures per-class
video accuracy on the test split and reports, for each extent, the classes
that peak there and their mean max-minus-min accuracy gap.
"""
import argparse
import json
from pathlib import Path

from threadpoolctl import threadpool_limits

from ltc import eval as ev
from ltc import experiment as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, default=Path("ltc-bench"))
    ap.add_argument("--extents", type=int, nargs="+", default=[16, 32, 48, 64])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--modality", choices=("flow", "rgb"), default="flow")
    ap.add_argument("--iterations", type=int, default=ex.DeskConfig.iterations)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--json", type=Path)
    args = ap.parse_args()

    root = ex.ensure_benchmark(args.root)
    splits = ex.load_benchmark(root, args.modality)
    manifest = splits[0]
    labels = manifest.labels()
    columns = []
    with threadpool_limits(limits=args.threads):
        for t in args.extents:
            r = ex.run_arm(root, args.modality, t, args.seed, ex.DeskConfig(iterations=args.iterations), splits)
            pc = ev.per_class_accuracy(r.table, labels)
            print(f"{t:3d}f: video acc {r.video_accuracy:.3f}  " + "  ".join(f"{c} {a:.2f}" for c, a in pc.items()),
                  flush=True)
            columns.append([pc[c] for c in manifest.classes])

    p = [list(row) for row in zip(*columns)]
    res = ev.extent_analysis(p, args.extents, manifest.classes)
    print()
    for t in args.extents:
        d = "-" if res.gain[t] is None else f"{res.gain[t]:.3f}"
        print(f"{t:3d}f: |M| = {len(res.best[t])}  d = {d}  {res.best[t]}")
    if args.json:
        args.json.write_text(json.dumps(res.to_dict(), indent=2))


if __name__ == "__main__":
    main()
