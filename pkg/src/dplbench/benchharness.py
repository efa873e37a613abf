"""Leave-one-domain-out evaluation with training-domain validation.

For every (method, held-out domain, seed) cell, a fixed number of random
hyperparameter trials are trained on the remaining benchmark domains. The
trial with the best mean source-domain validation accuracy is selected, and
only its held-out test accuracy enters the table.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from . import clipcore as cc
from . import numkit as nk
from . import promptlab as pl
from . import worldgen as wg
from .errors import ContractError, ReportError, SelectionError, TrialFailure

log = logging.getLogger(__name__)

METHODS = ("zero_shot", "zero_shot_template", "coop", "dpl", "erm_frozen", "erm_finetune")
ZERO_SHOT_METHODS = ("zero_shot", "zero_shot_template")

# search space; not given by the method description, fixed here for reproducibility
LR_RANGE = (1e-3, 1e-1)
MOMENTA = (0.0, 0.9)
BATCH_SIZES = (16, 32, 64)
STEPS = (500, 1000, 2000)
N_CTX = (2, 4, 8)
HIDDEN_WIDTHS = (8, 16, 32)


@dataclass(frozen=True)
class HyperParams:
    method: str
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    steps: int = 0
    n_ctx: int = 4
    hidden_width: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.lr > 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be positive and momentum in [0, 1)")
        if self.batch_size < 1 or self.steps < 0 or self.n_ctx < 1 or self.hidden_width < 1:
            raise ValueError("batch_size, n_ctx, hidden_width must be positive; steps >= 0")

    def with_seed(self, seed: int) -> "HyperParams":
        return HyperParams(**{**asdict(self), "seed": seed})


@dataclass(frozen=True)
class ProtocolConfig:
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = (1, 2, 3)
    trials: int = 20
    n_per_domain: int = 500
    train_fraction: float = 0.8
    test_batch: int = 64
    hparam_seed: int = 0
    data_seed: int = 0
    step_choices: tuple[int, ...] = STEPS


def sample_hparams(rng: nk.Rng, method: str, step_choices=STEPS) -> HyperParams:
    if method in ZERO_SHOT_METHODS:
        return HyperParams(method)
    lo, hi = np.log10(LR_RANGE[0]), np.log10(LR_RANGE[1])
    lr = float(10 ** rng.uniform(lo, hi))
    pick = lambda options: options[int(rng.integers(0, len(options)))]  # noqa: E731
    return HyperParams(
        method,
        lr=lr,
        momentum=pick(MOMENTA),
        batch_size=pick(BATCH_SIZES),
        steps=pick(tuple(step_choices)),
        n_ctx=pick(N_CTX),
        hidden_width=pick(HIDDEN_WIDTHS),
    )


def trial_seed(method: str, domain: int, seed: int, trial: int) -> int:
    """Training seed of one trial, keyed only by its identity."""
    return int(nk.Rng(seed, ("trial", method, domain, trial)).integers(0, 2**31 - 1))


def trials_for(method: str, protocol: ProtocolConfig) -> int:
    return 1 if method in ZERO_SHOT_METHODS else protocol.trials


def count_trials(protocol: ProtocolConfig, n_domains: int, collapse_zero_shot: bool = True) -> int:
    per_cell = sum(
        trials_for(m, protocol) if collapse_zero_shot else protocol.trials for m in protocol.methods
    )
    return per_cell * n_domains * len(protocol.seeds)


# --------------------------------------------------------------------------
# data shared by all trials of one benchmark
# --------------------------------------------------------------------------


@dataclass
class Benchmark:
    world: wg.WorldSpec
    enc: cc.FrozenEncoders
    protocol: ProtocolConfig
    datasets: dict[int, wg.DomainDataset]
    fingerprint: str = ""

    @property
    def domains(self) -> list[int]:
        return sorted(self.datasets)


def prepare_benchmark(world, enc, protocol: ProtocolConfig, fingerprint: str = "") -> Benchmark:
    if len(world.benchmark_domains) < 2:
        raise ContractError("leave-one-out needs at least 2 benchmark domains")
    if {"coop", "dpl"} & set(protocol.methods) and max(N_CTX) + 1 > enc.max_len:
        raise ContractError(f"encoder max_len {enc.max_len} cannot hold {max(N_CTX)} context tokens + class")
    datasets = {
        d: wg.sample_domain_dataset(world, d, protocol.n_per_domain, protocol.data_seed * 7919 + d, "benchmark")
        for d in world.benchmark_domains
    }
    return Benchmark(world, enc, protocol, datasets, fingerprint)


# --------------------------------------------------------------------------
# ERM baselines
# --------------------------------------------------------------------------


@dataclass
class ErmClassifier:
    head: nk.MlpParams
    image: nk.MlpParams | None = None  # trainable encoder copy (finetune only)

    def predict(self, enc: cc.FrozenEncoders, x: np.ndarray) -> np.ndarray:
        feats = nk.mlp_forward(self.image, x)[0] if self.image is not None else cc.image_encode(enc, x)
        return self.predict_features(feats)

    def predict_features(self, feats: np.ndarray) -> np.ndarray:
        return np.argmax(nk.mlp_forward(self.head, nk.l2_normalize(feats)[0])[0], axis=-1)


def linear_head_loss_and_grad(head: nk.MlpParams, feats: np.ndarray, labels: np.ndarray):
    """Mean CE of a linear head on L2-normalised features.

    Returns (loss, head grads, grads wrt the unnormalised features).
    """
    unit, norms = nk.l2_normalize(feats)
    logits, tape = nk.mlp_forward(head, unit)
    losses, d = nk.softmax_cross_entropy_batch(logits, labels)
    grads, d_unit = nk.mlp_backward(head, tape, d / len(labels))
    return float(losses.mean()), grads, nk.l2_normalize_backward(unit, norms, d_unit)


def erm_train(enc: cc.FrozenEncoders, sources, variant: str, hp, num_classes: int) -> ErmClassifier:
    """Pooled-source CE training of a linear head (and, for ``finetune``, of a
    copy of the image encoder). The text tower is never used."""
    if variant not in ("frozen", "finetune"):
        raise ValueError("variant must be 'frozen' or 'finetune'")
    if not sources:
        raise ContractError("need at least one source domain")
    rng = nk.Rng(hp.seed, ("erm", variant))
    head = nk.init_mlp(rng.spawn("head"), [enc.emb_dim, num_classes])
    brng = rng.spawn("batches")
    if variant == "frozen":
        tables = [cc.embed_dataset(enc, s) for s in sources]
        state = nk.init_optimizer(head, hp.lr, hp.momentum)
        for step in range(hp.steps):
            idx = [brng.integers(0, len(t), size=hp.batch_size) for t in tables]
            feats = np.concatenate([t.emb[i] for t, i in zip(tables, idx)])
            labels = np.concatenate([t.labels[i] for t, i in zip(tables, idx)])
            loss, grads, _ = linear_head_loss_and_grad(head, feats, labels)
            try:
                nk.check_finite("erm loss", loss)
                head, state = nk.sgd_momentum_step(head, grads, state)
            except ArithmeticError as exc:
                raise TrialFailure(f"erm diverged: {exc}", step) from exc
        return ErmClassifier(head)

    image = enc.image.copy()
    state = nk.init_optimizer(head.arrays() + image.arrays(), hp.lr, hp.momentum)
    n_head = len(head.arrays())
    for step in range(hp.steps):
        idx = [brng.integers(0, len(s), size=hp.batch_size) for s in sources]
        x = np.concatenate([s.x[i] for s, i in zip(sources, idx)])
        labels = np.concatenate([s.y[i] for s, i in zip(sources, idx)])
        feats, tape = nk.mlp_forward(image, x)
        loss, g_head, d_feats = linear_head_loss_and_grad(head, feats, labels)
        g_image, _ = nk.mlp_backward(image, tape, d_feats)
        try:
            nk.check_finite("erm loss", loss)
            flat, state = nk.sgd_momentum_step(
                head.arrays() + image.arrays(), g_head.arrays() + g_image.arrays(), state
            )
        except ArithmeticError as exc:
            raise TrialFailure(f"erm diverged: {exc}", step) from exc
        head, image = head.with_arrays(flat[:n_head]), image.with_arrays(flat[n_head:])
    return ErmClassifier(head, image)


# --------------------------------------------------------------------------
# trials
# --------------------------------------------------------------------------


@dataclass
class TrialRecord:
    method: str
    held_out_domain: int
    seed: int
    trial_index: int
    hp: HyperParams
    val_acc: dict[int, float] = field(default_factory=dict)
    val_mean: float = float("nan")
    test_acc: float = float("nan")
    bayes_test_acc: float = float("nan")
    status: str = "ok"
    error: str = ""
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def key(self) -> tuple:
        return (self.method, self.held_out_domain, self.seed, self.trial_index)

    def to_json(self) -> dict:
        """Serialisable form; wall time is left out so logs are reproducible."""
        return {
            "kind": "trial",
            "method": self.method,
            "held_out_domain": self.held_out_domain,
            "seed": self.seed,
            "trial_index": self.trial_index,
            "hp": asdict(self.hp),
            "val_acc": {str(k): v for k, v in sorted(self.val_acc.items())},
            "val_mean": _nan_to_none(self.val_mean),
            "test_acc": _nan_to_none(self.test_acc),
            "bayes_test_acc": _nan_to_none(self.bayes_test_acc),
            "status": self.status,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, data: dict) -> "TrialRecord":
        return cls(
            method=data["method"],
            held_out_domain=data["held_out_domain"],
            seed=data["seed"],
            trial_index=data["trial_index"],
            hp=HyperParams(**data["hp"]),
            val_acc={int(k): v for k, v in data["val_acc"].items()},
            val_mean=_none_to_nan(data["val_mean"]),
            test_acc=_none_to_nan(data["test_acc"]),
            bayes_test_acc=_none_to_nan(data["bayes_test_acc"]),
            status=data["status"],
            error=data["error"],
        )


def _nan_to_none(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def _none_to_nan(v):
    return float("nan") if v is None else v


class _Predictor:
    """Batch predictor for one trained method; ``predict(x)`` labels one batch."""

    def __init__(self, bench: Benchmark, method: str, model):
        self.enc, self.vocab, self.method, self.model = bench.enc, bench.world.vocab, method, model
        if method in ZERO_SHOT_METHODS:
            prompts = cc.make_class_prompts(self.enc, self.vocab, template=method == "zero_shot_template")
            self.class_embs = np.stack([p.embedding for p in prompts])

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.method == "erm_finetune":
            return self.model.predict(self.enc, x)
        feats = cc.image_encode(self.enc, x)
        if self.method in ZERO_SHOT_METHODS:
            return cc.predict_with_embeddings(feats, self.class_embs)
        if self.method == "coop":
            return pl.predict_with_context(self.enc, self.model, feats, self.vocab)
        if self.method == "dpl":
            return pl.dpl_predict_features(self.model, self.enc, feats, self.vocab)
        return self.model.predict_features(feats)


def batched_accuracy(predict, dataset: wg.DomainDataset, batch: int) -> float:
    """Accuracy over consecutive batches; the last ragged batch is used as is."""
    hits = 0
    for start in range(0, len(dataset), batch):
        stop = start + batch
        hits += int(np.sum(predict(dataset.x[start:stop]) == dataset.y[start:stop]))
    return hits / len(dataset)


def train_method(bench: Benchmark, method: str, sources: list[wg.DomainDataset], hp: HyperParams):
    enc, vocab = bench.enc, bench.world.vocab
    if method in ZERO_SHOT_METHODS:
        return None
    if method == "coop":
        return pl.coop_optimize(enc, sources, hp, vocab)
    if method == "dpl":
        return pl.dpl_train(enc, sources, hp, vocab)
    variant = "frozen" if method == "erm_frozen" else "finetune"
    return erm_train(enc, sources, variant, hp, bench.world.num_classes)


def run_trial(bench: Benchmark, method: str, held_out_domain: int, hp: HyperParams, seed: int,
              trial_index: int = 0, keep_model: bool = False):
    """Train on all benchmark domains but ``held_out_domain`` and evaluate.

    Returns a TrialRecord, or ``(record, model)`` with ``keep_model``.
    """
    if held_out_domain not in bench.datasets:
        raise ContractError(f"domain {held_out_domain} is not a benchmark domain")
    t0 = time.perf_counter()
    protocol = bench.protocol
    record = TrialRecord(method, held_out_domain, seed, trial_index, hp)
    splits = {
        d: wg.split_train_val(ds, protocol.train_fraction, seed)
        for d, ds in bench.datasets.items()
        if d != held_out_domain
    }
    model = None
    try:
        model = train_method(bench, method, [tr for tr, _ in splits.values()], hp)
        predictor = _Predictor(bench, method, model)
        record.val_acc = {
            d: batched_accuracy(predictor.predict, val, protocol.test_batch) for d, (_, val) in splits.items()
        }
        record.val_mean = float(np.mean(list(record.val_acc.values())))
        test = bench.datasets[held_out_domain]
        record.test_acc = batched_accuracy(predictor.predict, test, protocol.test_batch)
        record.bayes_test_acc = wg.bayes_accuracy(bench.world, test)
    except (TrialFailure, ArithmeticError) as exc:
        log.warning("trial %s failed: %s", record.key, exc)
        record.status, record.error = "failed", str(exc)
    record.wall_time = time.perf_counter() - t0
    return (record, model) if keep_model else record


def select_model(records: list[TrialRecord]) -> TrialRecord:
    """Highest mean source validation accuracy; ties go to the earliest trial.

    Only ``ok``, ``val_mean`` and ``trial_index`` are read, never test results.
    """
    best = None
    for r in sorted((r for r in records if r.ok), key=lambda r: r.trial_index):
        if best is None or r.val_mean > best.val_mean:
            best = r
    if best is None:
        raise SelectionError("every trial in this cell failed")
    return best


# --------------------------------------------------------------------------
# full benchmark
# --------------------------------------------------------------------------


def schedule(bench: Benchmark) -> list[tuple[str, int, int, int, HyperParams]]:
    """All (method, domain, seed, trial, hp) tasks in canonical order."""
    p = bench.protocol
    tasks = []
    for method in p.methods:
        for trial in range(trials_for(method, p)):
            base = sample_hparams(nk.Rng(p.hparam_seed, ("hparams", method, trial)), method, p.step_choices)
            for domain in bench.domains:
                for seed in p.seeds:
                    hp = base.with_seed(trial_seed(method, domain, seed, trial))
                    tasks.append((method, domain, seed, trial, hp))
    return tasks


_WORKER_BENCH: Benchmark | None = None


def _init_worker(bench):
    global _WORKER_BENCH
    _WORKER_BENCH = bench


def _run_task(task):
    method, domain, seed, trial, hp = task
    return run_trial(_WORKER_BENCH, method, domain, hp, seed, trial)


def run_all_trials(bench: Benchmark, jobs: int = 1, progress=None) -> list[TrialRecord]:
    tasks = schedule(bench)
    if jobs <= 1:
        records = []
        for task in tasks:
            records.append(run_trial(bench, task[0], task[1], task[4], task[2], task[3]))
            if progress:
                progress(len(records), len(tasks))
    else:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(bench,)) as pool:
            records = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    return sorted(records, key=lambda r: r.key)


@dataclass
class BenchmarkTable:
    methods: list[str]
    domains: list[int]
    seeds: list[int]
    # cells[method][domain][seed] = selected test accuracy (fraction)
    cells: dict[str, dict[int, dict[int, float]]]
    bayes: dict[int, float] = field(default_factory=dict)
    config_fingerprint: str = ""

    def cell(self, method: str, domain: int) -> list[float]:
        per_seed = self.cells.get(method, {}).get(domain, {})
        return [per_seed[s] for s in self.seeds if s in per_seed]

    def missing(self) -> list[str]:
        out = []
        for m in self.methods:
            for d in self.domains:
                for s in self.seeds:
                    if s not in self.cells.get(m, {}).get(d, {}):
                        out.append(f"{m}/D{d}/seed{s}")
        return out

    def mean(self, method: str, domain: int) -> float:
        return float(np.mean(self.cell(method, domain)))

    def std(self, method: str, domain: int) -> float:
        return float(np.std(self.cell(method, domain)))

    def average(self, method: str) -> float:
        """Mean over domains of the per-domain means."""
        return float(np.mean([self.mean(method, d) for d in self.domains]))

    def to_json(self) -> dict:
        return {
            "methods": list(self.methods),
            "domains": list(self.domains),
            "seeds": list(self.seeds),
            "cells": {
                m: {str(d): {str(s): a for s, a in sorted(ds.items())} for d, ds in sorted(dm.items())}
                for m, dm in self.cells.items()
            },
            "summary": {
                m: {
                    **{f"D{d}": {"mean": self.mean(m, d), "std": self.std(m, d)} for d in self.domains},
                    "average": self.average(m),
                }
                for m in self.methods
                if not any(x.startswith(m + "/") for x in self.missing())
            },
            "bayes": {str(d): a for d, a in sorted(self.bayes.items())},
            "config_fingerprint": self.config_fingerprint,
        }

    @classmethod
    def from_json(cls, data: dict) -> "BenchmarkTable":
        return cls(
            methods=list(data["methods"]),
            domains=[int(d) for d in data["domains"]],
            seeds=[int(s) for s in data["seeds"]],
            cells={
                m: {int(d): {int(s): a for s, a in ds.items()} for d, ds in dm.items()}
                for m, dm in data["cells"].items()
            },
            bayes={int(d): a for d, a in data.get("bayes", {}).items()},
            config_fingerprint=data.get("config_fingerprint", ""),
        )

    def __eq__(self, other):
        return isinstance(other, BenchmarkTable) and self.to_json() == other.to_json()


def aggregate(records: list[TrialRecord], methods, domains, seeds, fingerprint: str = "") -> BenchmarkTable:
    """Select one trial per (method, domain, seed) and tabulate its test accuracy."""
    groups: dict[tuple, list[TrialRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.held_out_domain, r.seed), []).append(r)
    cells: dict = {m: {} for m in methods}
    bayes = {}
    for (m, d, s), group in sorted(groups.items()):
        try:
            chosen = select_model(group)
        except SelectionError:
            log.warning("no successful trial for %s / D%d / seed %d", m, d, s)
            continue
        cells.setdefault(m, {}).setdefault(d, {})[s] = chosen.test_acc
        bayes[d] = chosen.bayes_test_acc
    return BenchmarkTable(list(methods), list(domains), list(seeds), cells, bayes, fingerprint)


def leave_one_out_benchmark(bench: Benchmark, jobs: int = 1, log_path=None, progress=None):
    """Run every scheduled trial and aggregate; returns (table, records)."""
    records = run_all_trials(bench, jobs, progress)
    if log_path is not None:
        write_trial_log(log_path, bench, records)
    p = bench.protocol
    table = aggregate(records, p.methods, bench.domains, p.seeds, bench.fingerprint)
    return table, records


# --------------------------------------------------------------------------
# logs and reports
# --------------------------------------------------------------------------


def protocol_header(bench: Benchmark) -> dict:
    p = bench.protocol
    return {
        "kind": "protocol",
        "methods": list(p.methods),
        "domains": bench.domains,
        "seeds": list(p.seeds),
        "expected_trials": count_trials(p, len(bench.domains)),
        "config_fingerprint": bench.fingerprint,
    }


def write_trial_log(path, bench: Benchmark, records: list[TrialRecord]) -> None:
    lines = [json.dumps(protocol_header(bench), sort_keys=True)]
    lines += [json.dumps({**r.to_json(), "config_fingerprint": bench.fingerprint}, sort_keys=True) for r in records]
    cc._atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_trial_log(path) -> tuple[dict, list[TrialRecord]]:
    header, records = None, []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ReportError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
        if data.get("kind") == "protocol":
            header = data
        else:
            records.append(TrialRecord.from_json(data))
    if header is None:
        raise ReportError(f"{path}: no protocol header line")
    if len(records) != header["expected_trials"]:
        raise ReportError(
            f"{path}: partial trial log, {len(records)} of {header['expected_trials']} trials present"
        )
    return header, records


def table_from_log(path) -> BenchmarkTable:
    header, records = read_trial_log(path)
    return aggregate(records, header["methods"], header["domains"], header["seeds"], header["config_fingerprint"])


def format_cell(mean_pct: float, std_pct: float) -> str:
    """``mean ± std`` in percent with one decimal, halves rounded up."""
    q = Decimal("0.1")
    m = Decimal(repr(round(mean_pct, 9))).quantize(q, ROUND_HALF_UP)
    s = Decimal(repr(round(std_pct, 9))).quantize(q, ROUND_HALF_UP)
    return f"{m} ± {s}"


def report(table: BenchmarkTable, fmt: str = "csv") -> str:
    missing = table.missing()
    if missing:
        raise ReportError("incomplete table, missing cells: " + ", ".join(missing))
    if fmt == "json":
        return json.dumps(table.to_json(), indent=2, sort_keys=True) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method"] + [f"D{d}" for d in table.domains] + ["average"])
    for m in table.methods:
        row = [m]
        for d in table.domains:
            row.append(format_cell(100 * table.mean(m, d), 100 * table.std(m, d)))
        avg = Decimal(repr(round(100 * table.average(m), 9))).quantize(Decimal("0.1"), ROUND_HALF_UP)
        writer.writerow(row + [str(avg)])
    return buf.getvalue()
