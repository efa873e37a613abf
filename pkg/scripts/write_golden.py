"""Pretrain the reference encoders and record the golden zero-shot values.

    python3 scripts/write_golden.py [tests/golden.json]

The acceptance suite checks that a fresh pretraining run reproduces these
numbers, so rerun this only when the reference model is changed on purpose.
"""
import json
import sys
import time
from pathlib import Path

from dplbench.cli import run_pretrain
from dplbench.config import RunConfig


def main(path="tests/golden.json"):
    cfg = RunConfig()
    t0 = time.perf_counter()
    _, enc, summary = run_pretrain(cfg)
    golden = {
        "config_fingerprint": cfg.pretrain_fingerprint(),
        "encoder_fingerprint": enc.fingerprint,
        "in_pool_zero_shot": summary["in_pool_zero_shot"],
        "held_out_zero_shot": summary["held_out_zero_shot"],
        "retrieval_top1": summary["retrieval_top1"],
    }
    Path(path).write_text(json.dumps(golden, indent=2, sort_keys=True) + "\n")
    print(json.dumps(golden, indent=2), f"\n({time.perf_counter() - t0:.1f} s)")


if __name__ == "__main__":
    main(*sys.argv[1:])
