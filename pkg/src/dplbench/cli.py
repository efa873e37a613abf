"""Command-line entry points: pretrain, benchmark, eval, report.

``DPL_OUT_DIR`` overrides the output directory from the config file; an
explicit ``--out`` wins over both. All files are written atomically.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import benchharness as bh
from . import checkpoints as ck
from . import clipcore as cc
from . import promptlab as pl
from . import worldgen as wg
from .config import RunConfig, dump_config, parse_config
from .errors import ConfigError, FingerprintMismatch, FormatError, ReportError

log = logging.getLogger("dplbench")

OUT_ENV = "DPL_OUT_DIR"
ENCODERS_FILE = "encoders.dple"


def _out_dir(arg, cfg: RunConfig | None) -> Path:
    if arg:
        return Path(arg)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if cfg is None:
        raise ConfigError(f"no output directory: pass --out or set {OUT_ENV}")
    return Path(cfg.output_dir)


def _write_text(path: Path, text: str) -> None:
    cc._atomic_write(path, text.encode())


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def build_world(cfg: RunConfig) -> wg.WorldSpec:
    return wg.make_world(cfg.world, cfg.seed)


def run_pretrain(cfg: RunConfig):
    """Returns (world, frozen encoders, summary dict)."""
    world = build_world(cfg)
    corpus = wg.make_pretrain_corpus(world, cfg.pretrain.n_per_domain, cfg.seed, cfg.pretrain.domain_token_prob)
    enc = cc.pretrain(world, corpus, cfg.pretrain, cfg.encoder)
    summary = {
        "config_fingerprint": cfg.pretrain_fingerprint(),
        "encoder_fingerprint": enc.fingerprint,
        "in_pool_zero_shot": cc.zero_shot_accuracy(enc, world, world.pretrain_domains, seed=cfg.seed),
        "held_out_zero_shot": cc.zero_shot_accuracy(enc, world, world.benchmark_domains, seed=cfg.seed),
        "retrieval_top1": cc.retrieval_top1(enc, corpus, world),
        "encoder_params": enc.n_params(),
    }
    return world, enc, summary


def cmd_pretrain(cfg: RunConfig, out: Path) -> Path:
    _, enc, summary = run_pretrain(cfg)
    path = out / ENCODERS_FILE
    ck.save_encoders(enc, path, cfg.pretrain_fingerprint(), build_world(cfg).vocab)
    _write_json(out / "pretrain.json", summary)
    _write_text(out / "config.ini", dump_config(cfg))
    log.info("in-pool zero-shot %.3f, retrieval %.3f", summary["in_pool_zero_shot"], summary["retrieval_top1"])
    return path


def cmd_benchmark(cfg: RunConfig, encoders: Path, out: Path, jobs: int = 1) -> bh.BenchmarkTable:
    if not Path(encoders).is_file():
        raise FileNotFoundError(f"encoder checkpoint {encoders} not found; run `pretrain` first")
    enc = ck.load_encoders(encoders, cfg.pretrain_fingerprint())
    world = build_world(cfg)
    fp = cfg.fingerprint()
    bench = bh.prepare_benchmark(world, enc, cfg.protocol, fp)

    cache = Path(cfg.cache_dir) if cfg.cache_dir else out / "cache"
    for d, ds in bench.datasets.items():
        # the cache format has no provenance field, so the file name carries it
        cc.write_cache(cc.embed_dataset(enc, ds), cache / f"emb_{enc.fingerprint[:16]}_D{d}.dplc")
        _write_json(out / "data" / f"D{d}.json",
                    {"kind": "dataset", "config_fingerprint": fp, **ds.to_dict()})

    def progress(done, total):
        if done % 100 == 0 or done == total:
            log.info("trial %d / %d", done, total)

    t0 = time.perf_counter()
    table, records = bh.leave_one_out_benchmark(bench, jobs, out / "trials.jsonl", progress)
    log.info("benchmark finished in %.1f s", time.perf_counter() - t0)
    _write_tables(table, out)
    if "dpl" in cfg.protocol.methods:
        _save_selected_generators(bench, records, out / "generators")
    return table


def _write_tables(table: bh.BenchmarkTable, out: Path) -> None:
    _write_text(out / "table.csv", bh.report(table, "csv"))
    _write_text(out / "table.json", bh.report(table, "json"))


def _save_selected_generators(bench: bh.Benchmark, records, out: Path) -> None:
    """Retrain the selected DPL trial of every cell (training is deterministic)."""
    groups = {}
    for r in records:
        if r.method == "dpl":
            groups.setdefault((r.held_out_domain, r.seed), []).append(r)
    for (d, s), group in sorted(groups.items()):
        chosen = bh.select_model(group)
        again, gen = bh.run_trial(bench, "dpl", d, chosen.hp, s, chosen.trial_index, keep_model=True)
        if again.to_json() != chosen.to_json():
            raise RuntimeError(f"retraining DPL D{d}/seed{s} did not reproduce the logged trial")
        ck.save_generator(gen, out / f"dpl_D{d}_seed{s}.dplg", bench.fingerprint, bench.enc.fingerprint,
                          bench.world.vocab)


def load_dataset_dump(path) -> tuple[wg.DomainDataset, str]:
    try:
        data = json.loads(Path(path).read_text())
        return wg.DomainDataset.from_dict(data), data.get("config_fingerprint", "")
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: not a dataset dump ({exc})") from exc


def cmd_eval(encoders: Path, generator: Path, data: Path, batch: int = 64) -> float:
    """DPL accuracy on a dataset dump, one generated prompt per batch."""
    for p in (encoders, generator, data):
        if not Path(p).is_file():
            raise FileNotFoundError(f"{p} not found")
    enc = ck.load_encoders(encoders)
    gen = ck.load_generator(generator, encoder_fingerprint=enc.fingerprint)
    dataset, data_fp = load_dataset_dump(data)
    gen_fp = ck.read_config_fingerprint(generator)
    if data_fp and gen_fp and data_fp != gen_fp:
        raise FingerprintMismatch(f"{data} comes from config {data_fp[:12]}, generator from {gen_fp[:12]}")
    if dataset.x.shape[1] != enc.input_dim:
        raise FormatError(f"{data}: input dim {dataset.x.shape[1]} != encoder input dim {enc.input_dim}")
    vocab = ck.read_vocab(generator) or ck.read_vocab(encoders)
    if vocab is None:
        raise FormatError(f"neither {generator} nor {encoders} records a vocabulary")
    return bh.batched_accuracy(lambda x: pl.dpl_predict_batch(enc, gen, x, vocab), dataset, batch)


def cmd_report(log_path: Path, out: Path) -> bh.BenchmarkTable:
    if not Path(log_path).is_file():
        raise FileNotFoundError(f"trial log {log_path} not found")
    table = bh.table_from_log(log_path)
    _write_tables(table, out)
    return table


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dplbench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="contrastive pretraining; writes an encoder checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--out")

    s = sub.add_parser("benchmark", help="leave-one-domain-out benchmark")
    s.add_argument("--config", required=True)
    s.add_argument("--encoders", required=True)
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("eval", help="DPL accuracy of a generator on a dataset dump")
    s.add_argument("--encoders", required=True)
    s.add_argument("--generator", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--batch", type=int, default=64)

    s = sub.add_parser("report", help="rebuild tables from a trial log")
    s.add_argument("--log", required=True)
    s.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "pretrain":
            cfg = parse_config(args.config)
            print(cmd_pretrain(cfg, _out_dir(args.out, cfg)))
        elif args.command == "benchmark":
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            cfg = parse_config(args.config)
            table = cmd_benchmark(cfg, Path(args.encoders), _out_dir(args.out, cfg), args.jobs)
            print(bh.report(table), end="")
        elif args.command == "eval":
            acc = cmd_eval(Path(args.encoders), Path(args.generator), Path(args.data), args.batch)
            print(f"accuracy {acc:.4f}")
        elif args.command == "report":
            table = cmd_report(Path(args.log), _out_dir(args.out, None))
            print(bh.report(table), end="")
    except (ConfigError, FingerprintMismatch, FormatError, ReportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
