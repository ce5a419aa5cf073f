"""
Metrics and measurement for (pruned) models: perplexity, recall-at-3, FLOPs
fraction and single-query latency, plus the method x operating-point sweep
that produces the accuracy/efficiency tradeoff table.
"""
import csv
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from src import gates as l0, model as qrnn, pruning, sru as single_rank, tensor
from src.data import Corpus, TokenStream
from src.errors import ConfigError, DataError, KnobError, MissingPrerequisiteError
from src.model import ModelConfig, QrnnModel

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "target_flops", "achieved_flops", "val_ppl", "test_ppl", "r_at_3", "ms_per_query", "sru", "seed")
DEFAULT_QUERIES = 350
DEFAULT_WARMUP = 50
PPL_CEILING = 100.0
L0_TOLERANCE = 0.05

# latency measurements never overlap, whatever else is running
_BENCH_LOCK = threading.Lock()


@dataclass
class EvalReport:
    split: str
    perplexity: float
    r_at_3: float
    top1: float
    flops_fraction: float
    tokens_evaluated: int
    tag: str = ""
    ms_per_query: Optional[float] = None
    energy_mj: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatencyReport:
    mean_ms: float
    std_ms: float
    queries: int
    warmup: int


def _with_sru(model: QrnnModel, sru: Optional["single_rank.SruUpdate"]) -> QrnnModel:
    return single_rank.apply_sru(model, sru) if sru is not None else model


def _ranks(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Rank of each true token in its column; equal logits rank the lower token id first."""
    columns = np.arange(len(targets))
    truth = logits[targets, columns]
    ids = np.arange(logits.shape[0])[:, None]
    above = np.sum(logits > truth, axis=0)
    tied_before = np.sum((logits == truth) & (ids < targets[None, :]), axis=0)
    return above + tied_before


def evaluate(
    model: QrnnModel,
    stream: TokenStream,
    sru: Optional["single_rank.SruUpdate"] = None,
    reference: Optional[ModelConfig] = None,
    tag: str = "",
    chunk: int = 256,
) -> EvalReport:
    """
    One pass over ``stream`` with batch 1 and the hidden state carried across
    the whole split. ``reference`` is the unpruned configuration the FLOPs
    fraction is measured against (defaults to the model's own).
    """
    ids = stream.ids
    if len(ids) < 2:
        raise DataError(f"stream '{stream.split}' is too short to evaluate")
    eff = _with_sru(model, sru)
    states = qrnn.init_states(eff)
    nll, hits3, hits1 = 0.0, 0, 0
    for start in range(0, len(ids) - 1, chunk):
        targets = ids[start + 1:start + 1 + chunk]
        inputs = ids[start:start + len(targets)]
        logits, states, _, _ = qrnn.run(eff, inputs, states)
        log_probs = tensor.log_softmax(logits.astype(np.float64), axis=0)
        nll -= float(np.sum(log_probs[targets, np.arange(len(targets))]))
        ranks = _ranks(logits, targets)
        hits3 += int(np.sum(ranks < 3))
        hits1 += int(np.sum(ranks == 0))
    count = len(ids) - 1
    fraction = pruning.flops_per_token(model.config) / pruning.flops_per_token(reference or model.config)
    report = EvalReport(
        split=stream.split,
        perplexity=float(np.exp(nll / count)),
        r_at_3=hits3 / count,
        top1=hits1 / count,
        flops_fraction=fraction,
        tokens_evaluated=count,
        tag=tag,
    )
    logger.debug("%s %s: ppl %.3f, R@3 %.4f over %d tokens", tag or "model", stream.split, report.perplexity, report.r_at_3, count)
    return report


def perplexity(model: QrnnModel, stream: TokenStream, sru=None) -> float:
    return evaluate(model, stream, sru).perplexity


def recall_at_3(model: QrnnModel, stream: TokenStream, sru=None) -> float:
    return evaluate(model, stream, sru).r_at_3


def top1_accuracy(model: QrnnModel, stream: TokenStream, sru=None) -> float:
    return evaluate(model, stream, sru).top1


def bench_latency(
    model: QrnnModel,
    stream: TokenStream,
    queries: int = DEFAULT_QUERIES,
    warmup: int = DEFAULT_WARMUP,
    sru=None,
) -> LatencyReport:
    """Wall-clock of single-token ``step`` calls, averaged over ``queries`` after ``warmup``."""
    if queries < 1:
        raise ConfigError(f"queries must be positive, got {queries}")
    if len(stream) == 0:
        raise DataError(f"stream '{stream.split}' has no tokens to query with")
    eff = _with_sru(model, sru)
    ids = stream.ids
    timings = []
    with _BENCH_LOCK:
        states = qrnn.init_states(eff)
        for index in range(warmup + queries):
            token = int(ids[index % len(ids)])
            started = time.perf_counter()
            _, states = qrnn.step(eff, states, token)
            elapsed = time.perf_counter() - started
            if index >= warmup:
                timings.append(1000.0 * elapsed)
    report = LatencyReport(float(np.mean(timings)), float(np.std(timings)), queries, warmup)
    logger.debug("latency %.3f ± %.3f ms/q over %d queries", report.mean_ms, report.std_ms, queries)
    return report


def pearson_r2(xs: Sequence[float], ys: Sequence[float]) -> float:
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if len(xs) != len(ys) or len(xs) < 2:
        raise ConfigError(f"need two equally long series of at least 2 points, got {len(xs)} and {len(ys)}")
    if np.std(xs) == 0 or np.std(ys) == 0:
        raise ConfigError("correlation is undefined for a constant series")
    return float(np.corrcoef(xs, ys)[0, 1] ** 2)


@dataclass
class SweepRow:
    method: str
    target_flops: float
    achieved_flops: Optional[float] = None
    val_ppl: Optional[float] = None
    test_ppl: Optional[float] = None
    r_at_3: Optional[float] = None
    ms_per_query: Optional[float] = None
    sru: bool = False
    seed: int = 0
    above_ceiling: bool = False
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class _Cell:
    row: SweepRow
    model: Optional[QrnnModel] = None


@dataclass
class _GateCandidate:
    tag: str
    fraction: float
    pruned: QrnnModel


def _gate_candidates(model: QrnnModel, gate_sets, scale: float = 1.0) -> List[_GateCandidate]:
    candidates = []
    for gates in gate_sets:
        try:
            mask, pruned = l0.gates_to_mask_and_scale(model, gates)
        except ConfigError as e:
            logger.warning("gate set %r is unusable: %s", gates.tag, e)
            continue
        candidates.append(_GateCandidate(gates.tag, scale * pruning.flops_fraction(model.config, mask), pruned))
    return candidates


def _pruned_for(method, target, model, seed, stats, candidates, l0_tolerance, scale=1.0) -> QrnnModel:
    """``target`` and ``scale`` (the model's own share of the reference FLOPs) are reference fractions."""
    if target >= min(1.0, scale):
        return model
    if method == "l0":
        if not candidates:
            raise MissingPrerequisiteError("trained gates", "train-gates")
        best = min(candidates, key=lambda c: (abs(c.fraction - target), c.tag))
        if abs(best.fraction - target) > l0_tolerance:
            raise MissingPrerequisiteError(
                f"gates trained near {target:.0%} FLOPs (closest is {best.tag!r} at {best.fraction:.1%})", "train-gates"
            )
        return best.pruned
    fraction = pruning.solve_operating_point(model.config, target / scale)
    mask = pruning.mask_for_fraction(method, model, fraction, seed, stats)
    return pruning.apply_mask(model, mask)


def sweep(
    model: QrnnModel,
    methods: Sequence[str],
    targets: Sequence[float],
    corpus: Corpus,
    seed: int = 0,
    stats: Optional[pruning.ActivationStats] = None,
    gate_sets: Sequence["l0.HardConcreteGates"] = (),
    with_sru: bool = False,
    sru_steps: int = 2000,
    sru_lr: float = 5e-3,
    bench_queries: int = DEFAULT_QUERIES,
    bench_warmup: int = DEFAULT_WARMUP,
    ppl_ceiling: float = PPL_CEILING,
    l0_tolerance: float = L0_TOLERANCE,
    threads: int = 1,
    progress: bool = True,
    reference: Optional[ModelConfig] = None,
) -> List[SweepRow]:
    """
    Evaluate every (method, target) cell plus an unpruned reference row.
    A cell whose prerequisites are missing becomes an error row and the sweep
    goes on. Metric cells may run on ``threads`` workers; latency is measured
    afterwards, one cell at a time. ``bench_queries=0`` skips latency.
    Targets and achieved fractions are relative to ``reference``, the
    unpruned configuration ``model`` descends from (defaults to its own).
    """
    for method in methods:
        if method not in pruning.METHODS:
            raise ConfigError(f"unknown method {method!r}; expected one of {pruning.METHODS}")
    reference = reference or model.config
    full_flops = pruning.flops_per_token(reference)
    scale = pruning.flops_per_token(model.config) / full_flops
    candidates = _gate_candidates(model, gate_sets, scale) if "l0" in methods else []

    plan = [("unpruned", 1.0, False)]
    for method in methods:
        for target in targets:
            plan.append((method, float(target), False))
            if with_sru and target < 1.0:
                plan.append((method, float(target), True))

    def run_cell(plan_item) -> _Cell:
        method, target, use_sru = plan_item
        row = SweepRow(method, target, sru=use_sru, seed=seed)
        try:
            pruned = _pruned_for(method, target, model, seed, stats, candidates, l0_tolerance, scale)
            row.achieved_flops = pruning.flops_per_token(pruned.config) / full_flops
            update = None
            if use_sru:
                update = single_rank.train_sru(
                    pruned, corpus.train, steps=sru_steps, lr=sru_lr, seed=seed,
                    progress=False, log_every=0, flops_fraction=row.achieved_flops,
                )
                pruned = single_rank.apply_sru(pruned, update)
            valid = evaluate(pruned, corpus.valid, reference=reference)
            test = evaluate(pruned, corpus.test, reference=reference)
            row.val_ppl, row.test_ppl, row.r_at_3 = valid.perplexity, test.perplexity, test.r_at_3
            row.above_ceiling = test.perplexity > ppl_ceiling
            return _Cell(row, pruned)
        except KnobError as e:
            logger.warning("sweep cell %s @ %.2f failed: %s", method, target, e)
            row.error = str(e)
            return _Cell(row)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(tqdm(pool.map(run_cell, plan), total=len(plan), desc="sweep", disable=not progress, leave=False))
    else:
        cells = [run_cell(item) for item in tqdm(plan, desc="sweep", disable=not progress, leave=False)]

    if bench_queries > 0:
        for cell in cells:
            if cell.model is not None:
                cell.row.ms_per_query = bench_latency(cell.model, corpus.test, bench_queries, bench_warmup).mean_ms

    rows = [cell.row for cell in cells]
    logger.info(
        "sweep: %d rows, %d errors, %d above perplexity %.0f",
        len(rows), sum(not r.ok for r in rows), sum(r.above_ceiling for r in rows), ppl_ceiling,
    )
    return rows


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_csv(rows: Sequence[SweepRow], path: str):
    """Only successful rows are plotting input; error rows keep their metric fields empty."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(getattr(row, column)) for column in CSV_COLUMNS])


def write_json(rows: Sequence[SweepRow], path: str):
    with open(path, "w", encoding="utf-8") as f:
        json.dump([asdict(row) for row in rows], f, indent=2, sort_keys=True)
        f.write("\n")
