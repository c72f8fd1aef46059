"""Desk-scale comparison of the five systems through the ``lsv`` CLI.

For each seed: generate a 40-speaker corpus (32 train, 8 test), train every
requested system for 15 epochs with EER logged every 3 epochs, score the test
trials with the cosine backend, and merge the results. Writes per-seed
``eval.csv`` files, ``report/comparison.csv`` and ``report/eer_curve.csv`` per
seed, and a ``summary.csv`` with one row per (seed, system).

    python scripts/run_desk_experiment.py --out desk --seeds 0,1,2,3,4
"""

import argparse
import csv
import sys
import time
from pathlib import Path

from lsv import cli

ALL_SYSTEMS = ("d-vector", "d-ladder", "x-vector", "x-ladder", "x-multi")


def run(cmd):
    code = cli.main(cmd)
    if code != 0:
        sys.exit(f"lsv {' '.join(cmd)} failed with exit code {code}")


def run_seed(out: Path, seed: int, systems, args):
    root = out / f"seed{seed}"
    corpus = root / "corpus"
    run(["gen", "--corpus", str(corpus), "--speakers", "40", "--test-speakers", "8", "--utts", "20",
         "--feat-dim", "24", "--separation", str(args.separation), "--seed", str(seed)])
    runs = []
    for system in systems:
        run_dir = root / "runs" / system
        t0 = time.perf_counter()
        run(["train", "--corpus", str(corpus), "--system", system, "--run-dir", str(run_dir),
             "--epochs", str(args.epochs), "--width", str(args.width), "--seed", str(seed),
             "--eval-trials", str(corpus / "trials.tsv"), "--backend", "cosine"])
        print(f"seed {seed} {system}: trained in {time.perf_counter() - t0:.0f}s", flush=True)
        runs += ["--run", str(run_dir)]
    run(["eval", "--corpus", str(corpus), *runs, "--backend", "cosine", "--out", str(root / "eval.csv")])
    run(["report", *runs, "--out", str(root / "report")])
    with open(root / "eval.csv", newline="") as f:
        return [(seed, r["system"], r["eer_percent"]) for r in csv.DictReader(f)]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="desk_experiment")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--systems", default=",".join(ALL_SYSTEMS))
    p.add_argument("--ladder-seeds-only", action="store_true",
                   help="after the first seed, train only d-vector and d-ladder")
    p.add_argument("--separation", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--width", type=int, default=64)
    args = p.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    systems = [s for s in args.systems.split(",") if s]
    rows = []
    for i, seed in enumerate(int(s) for s in args.seeds.split(",")):
        use = systems if i == 0 or not args.ladder_seeds_only else [s for s in systems if s.startswith("d")]
        rows += run_seed(out, seed, use, args)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("seed", "system", "eer_percent"))
        w.writerows(rows)
    for system in systems:
        vals = [float(e) for _, s, e in rows if s == system]
        if vals:
            print(f"{system}: mean EER {sum(vals) / len(vals):.2f}% over {len(vals)} seed(s)")


if __name__ == "__main__":
    main()
