"""Pretrain and benchmark the reference config end to end.

    python3 scripts/run_reference.py [out_dir] [--jobs N]

Equivalent to ``dplbench pretrain`` followed by ``dplbench benchmark`` on an
empty config file; prints the table and the wall time.
"""
import argparse
import logging
import time
from pathlib import Path

from dplbench import benchharness as bh
from dplbench import cli
from dplbench.config import RunConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", nargs="?", default="runs/reference")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    cfg = RunConfig(output_dir=str(out))
    t0 = time.perf_counter()
    cli.cmd_pretrain(cfg, out)
    t1 = time.perf_counter()
    table = cli.cmd_benchmark(cfg, out / cli.ENCODERS_FILE, out, args.jobs)
    t2 = time.perf_counter()
    print(bh.report(table), end="")
    print(f"pretrain {t1 - t0:.1f} s, benchmark {t2 - t1:.1f} s")


if __name__ == "__main__":
    main()
