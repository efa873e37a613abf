"""Frozen probe vs fine-tuning, with and without benchmark styles in the
pretraining pool.

    python3 scripts/erm_trend.py [--trials 20]
"""
import argparse
import dataclasses

from dplbench import benchharness as bh
from dplbench import cli
from dplbench import worldgen as wg
from dplbench.config import RunConfig


def run(in_pool: bool, trials: int) -> bh.BenchmarkTable:
    cfg = RunConfig(world=dataclasses.replace(wg.WorldConfig(), benchmark_in_pool=in_pool),
                    protocol=bh.ProtocolConfig(methods=("erm_frozen", "erm_finetune"), trials=trials))
    _, enc, summary = cli.run_pretrain(cfg)
    print(f"pool covers benchmark styles: {in_pool}; held-out zero-shot {summary['held_out_zero_shot']:.3f}")
    bench = bh.prepare_benchmark(cli.build_world(cfg), enc, cfg.protocol, cfg.fingerprint())
    table, _ = bh.leave_one_out_benchmark(bench)
    print(bh.report(table))
    return table


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=20)
    args = ap.parse_args()
    for in_pool in (True, False):
        t = run(in_pool, args.trials)
        gap = 100 * (t.average("erm_frozen") - t.average("erm_finetune"))
        print(f"frozen - finetune: {gap:+.1f} points\n")


if __name__ == "__main__":
    main()
