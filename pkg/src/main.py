import argparse
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import yaml

from src import data, eval as metrics, gates as l0, grad, model as qrnn, pruning, sru as single_rank, storage
from src.config_loader import ConfigLoader
from src.console import Term, setup_logging
from src.errors import ConfigError, DataError, KnobError, MissingPrerequisiteError, OutputError
from src.model import ModelConfig

PACKAGE_VERSION = "0.1.0"


@contextmanager
def writing(path):
    try:
        yield
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e


@dataclass
class RunConfig:
    """Merged parameters of one command (flags > environment > config file)."""

    command: str
    seed: int
    corpus_dir: Optional[str]
    out: Optional[str]
    progress: bool = True
    params: dict = field(default_factory=dict)

    def stamp(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "corpus_dir": self.corpus_dir,
            "out": self.out,
            "params": self.params,
            "checkpoint_format": storage.VERSION,
            "package_version": PACKAGE_VERSION,
        }

    def write_stamp(self) -> Optional[str]:
        if not self.out:
            return None
        path = f"{self.out}.stamp.yml"
        with writing(path):
            with open(path, "w") as f:
                yaml.safe_dump(self.stamp(), f, sort_keys=True)
        return path


def _pick(flag, section: dict, key, default=None):
    if flag is not None:
        return flag
    value = section.get(key) if section else None
    return default if value is None else value


def _int_list(text, what):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be a comma-separated list of integers, got {text!r}")


def _float_list(text, what):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be a comma-separated list of numbers, got {text!r}")


def _str_list(text):
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _run_config(args, config, **params) -> RunConfig:
    corpus_dir = getattr(args, "corpus", None) or config.get("corpus_dir")
    seed = _pick(getattr(args, "seed", None), config, "seed", 0)
    return RunConfig(
        command=args.command,
        seed=int(seed),
        corpus_dir=corpus_dir,
        out=getattr(args, "out", None),
        progress=bool(config.get("progress", True)),
        params={k: v for k, v in sorted(params.items())},
    )


def _corpus_for(checkpoint: storage.Checkpoint, corpus_dir: str) -> data.Corpus:
    """Rebuild the vocabulary the checkpoint was trained with and refuse a different one."""
    text = data.read_split(corpus_dir, "train")
    vocab = data.build_vocab(text, checkpoint.model.config.vocab_size)
    if checkpoint.vocab_digest and vocab.digest() != checkpoint.vocab_digest:
        raise DataError(f"corpus in {corpus_dir} does not produce the vocabulary this checkpoint was trained on")
    if len(vocab) != checkpoint.model.config.vocab_size:
        raise DataError(f"corpus vocabulary has {len(vocab)} tokens, model expects {checkpoint.model.config.vocab_size}")
    return data.load_corpus(corpus_dir, vocab=vocab)


def _require(value, flag):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


def _save(run: RunConfig, checkpoint: storage.Checkpoint, sru_width: int = 4):
    written = storage.save_checkpoint(_require(run.out, "--out"), checkpoint, sru_width)
    run.write_stamp()
    Term.success(f"Wrote {run.out} ({written} bytes)")


def cmd_gen_corpus(args, config):
    section = config.get("corpus", {})
    out = _require(args.out or config.get("corpus_dir"), "--out")
    args.out = out
    run = _run_config(
        args,
        config,
        seed=int(_pick(args.seed, section, "seed", 1234)),
        vocab_size=int(_pick(args.vocab_size, section, "vocab_size", 500)),
        train_tokens=int(_pick(args.train_tokens, section, "train_tokens", 60000)),
        valid_tokens=int(section.get("valid_tokens", 6000)),
        test_tokens=int(section.get("test_tokens", 6000)),
    )
    Term.header("Synthetic Corpus")
    with writing(out):
        data.generate_markov_corpus(out, **run.params)
    run.out = os.path.join(out, "corpus")
    run.write_stamp()
    Term.success(f"Corpus written to {out}")
    return 0


def cmd_train_baseline(args, config):
    section, model_section = config["baseline"], config["model"]
    hidden = _int_list(_pick(args.hidden, model_section, "hidden"), "--hidden")
    window = _int_list(_pick(args.window, model_section, "window"), "--window")
    layers = int(_pick(args.layers, {}, None, len(hidden)))
    run = _run_config(
        args,
        config,
        vocab_cap=int(_pick(args.vocab_cap, model_section, "vocab_cap", 10000)),
        embed=int(_pick(args.embed, model_section, "embed")),
        hidden=hidden,
        window=window,
        layers=layers,
        steps=int(_pick(args.steps, section, "steps", 3000)),
        lr=float(_pick(args.lr, section, "lr", 2e-3)),
        batch_size=int(section.get("batch_size", 16)),
        bptt=int(section.get("bptt", 35)),
        clip_norm=float(section.get("clip_norm", 0.25)),
        log_every=int(section.get("log_every", 200)),
    )
    p = run.params
    Term.header("Baseline Training")
    corpus = data.load_corpus(_require(run.corpus_dir, "--corpus"), p["vocab_cap"])
    model_config = ModelConfig(len(corpus.vocab), p["embed"], layers, tuple(hidden), tuple(window))
    Term.info(f"Vocabulary {len(corpus.vocab)}, layers {hidden}, windows {window}, embed {p['embed']}")
    model = qrnn.init_model(model_config, run.seed)
    trained, history = grad.train_baseline(
        model, corpus.train, p["steps"], p["lr"], p["batch_size"], p["bptt"], p["clip_norm"],
        valid=corpus.valid, log_every=p["log_every"], progress=run.progress,
    )
    report = metrics.evaluate(trained, corpus.valid, tag="baseline")
    oracle = data.unigram_perplexity(corpus.train, corpus.valid, len(corpus.vocab))
    Term.info(f"Validation perplexity {report.perplexity:.2f} (unigram oracle {oracle:.2f})")
    _save(run, storage.Checkpoint(trained, corpus.vocab.digest(), meta={"trained_steps": len(history)}))
    return 0


def cmd_collect_stats(args, config):
    section = config.get("stats", {})
    checkpoint = storage.load(args.model)
    run = _run_config(args, config, model=args.model, max_tokens=_pick(args.max_tokens, section, "max_tokens"))
    Term.header("Activation Statistics")
    corpus = _corpus_for(checkpoint, _require(run.corpus_dir, "--corpus"))
    checkpoint.stats = pruning.collect_activation_stats(checkpoint.model, corpus.train, run.params["max_tokens"])
    Term.info(f"Collected over {checkpoint.stats.tokens} tokens")
    _save(run, checkpoint)
    return 0


def _pick_gates(checkpoint: storage.Checkpoint, tag: Optional[str]) -> "l0.HardConcreteGates":
    if tag is not None:
        if tag not in checkpoint.gates:
            raise MissingPrerequisiteError(f"gates tagged {tag!r}", "train-gates")
        return checkpoint.gates[tag]
    if len(checkpoint.gates) == 1:
        return next(iter(checkpoint.gates.values()))
    if not checkpoint.gates:
        raise MissingPrerequisiteError("trained gates", "train-gates")
    raise ConfigError(f"checkpoint holds gate sets {sorted(checkpoint.gates)}; choose one with --gates")


def cmd_prune(args, config):
    checkpoint = storage.load(args.model)
    source = checkpoint.model
    run = _run_config(
        args, config, model=args.model, method=args.method, target_flops=args.target_flops, gates=args.gates,
        stats=args.stats,
    )
    Term.header(f"Pruning ({args.method})")
    meta = {"method": args.method, "source_config": checkpoint.source_config.to_dict()}
    if args.method == "l0":
        gates = _pick_gates(checkpoint, args.gates)
        mask, pruned = l0.gates_to_mask_and_scale(source, gates)
        meta["gates"] = gates.tag
    else:
        if args.target_flops is None:
            raise ConfigError("--target-flops is required for fraction-driven pruning")
        stats = checkpoint.stats
        if args.stats:
            stats = storage.load(args.stats).stats
        fraction = pruning.solve_operating_point(source.config, args.target_flops)
        mask = pruning.mask_for_fraction(args.method, source, fraction, run.seed, stats)
        pruned = pruning.apply_mask(source, mask)
        meta.update(target_flops=float(args.target_flops), drop_fraction=float(fraction))
    achieved = pruning.flops_per_token(pruned.config) / pruning.flops_per_token(checkpoint.source_config)
    meta["achieved_flops"] = float(achieved)
    Term.info(f"Filters kept per layer: {list(pruned.config.hidden_sizes)}")
    Term.success(f"Achieved FLOPs fraction {achieved:.4f}")
    _save(run, storage.Checkpoint(pruned, checkpoint.vocab_digest, meta=meta))
    return 0


def cmd_train_gates(args, config):
    section = config["gates"]
    checkpoint = storage.load(args.model)
    lam = float(_pick(args.lam, section, "lambda", 0.01))
    run = _run_config(
        args,
        config,
        model=args.model,
        lam=lam,
        steps=int(_pick(args.steps, section, "steps", 5000)),
        lr=float(_pick(args.lr, section, "lr", 5e-3)),
        batch_size=int(section.get("batch_size", 16)),
        bptt=int(section.get("bptt", 35)),
        init_log_alpha=float(section.get("init_log_alpha", l0.INIT_LOG_ALPHA)),
        log_every=int(section.get("log_every", 200)),
        tag=args.tag or f"l0-{lam:g}",
    )
    p = run.params
    Term.header(f"Gate Training (λ={lam:g})")
    corpus = _corpus_for(checkpoint, _require(run.corpus_dir, "--corpus"))
    gates = l0.train_gates(
        checkpoint.model, corpus.train, lam, p["steps"], p["lr"], run.seed, p["batch_size"], p["bptt"],
        p["init_log_alpha"], p["log_every"], run.progress, p["tag"],
    )
    fraction = gates.extra.get("flops_fraction")
    if fraction is not None:
        Term.success(f"Gates {p['tag']!r}: {sum(gates.zero_counts())} filters closed, {fraction:.1%} FLOPs")
    checkpoint.gates[p["tag"]] = gates
    _save(run, checkpoint)
    return 0


def cmd_train_sru(args, config):
    section = config["sru"]
    checkpoint = storage.load(args.model)
    run = _run_config(
        args,
        config,
        model=args.model,
        steps=int(_pick(args.steps, section, "steps", 2000)),
        lr=float(_pick(args.lr, section, "lr", 5e-3)),
        batch_size=int(section.get("batch_size", 16)),
        bptt=int(section.get("bptt", 35)),
        std=float(section.get("std", single_rank.INIT_STD)),
        element_width=int(_pick(args.element_width, section, "element_width", 4)),
        tag=args.tag or checkpoint.model.mask_digest,
    )
    p = run.params
    Term.header("Single-Rank Update Training")
    corpus = _corpus_for(checkpoint, _require(run.corpus_dir, "--corpus"))
    update = single_rank.train_sru(
        checkpoint.model, corpus.train, p["steps"], p["lr"], run.seed, p["batch_size"], p["bptt"], p["std"],
        progress=run.progress, tag=p["tag"], flops_fraction=float(checkpoint.meta.get("achieved_flops", 1.0)),
    )
    before = metrics.evaluate(checkpoint.model, corpus.valid).perplexity
    after = metrics.evaluate(checkpoint.model, corpus.valid, sru=update).perplexity
    Term.info(f"Validation perplexity {before:.2f} -> {after:.2f} with the update")
    Term.info(f"Update storage {single_rank.sru_storage_bytes(update, p['element_width'])} bytes")
    checkpoint.sru[p["tag"]] = update
    _save(run, checkpoint, p["element_width"])
    return 0


def _pick_sru(checkpoint: storage.Checkpoint, tag):
    if tag is None:
        return None
    if tag:
        if tag not in checkpoint.sru:
            raise MissingPrerequisiteError(f"update tagged {tag!r}", "train-sru")
        return checkpoint.sru[tag]
    if len(checkpoint.sru) != 1:
        raise MissingPrerequisiteError("exactly one stored update (or pass --sru TAG)", "train-sru")
    return next(iter(checkpoint.sru.values()))


def cmd_eval(args, config):
    checkpoint = storage.load(args.model)
    run = _run_config(args, config, model=args.model, split=args.split, sru=args.sru)
    update = _pick_sru(checkpoint, args.sru)
    corpus = _corpus_for(checkpoint, _require(run.corpus_dir, "--corpus"))
    report = metrics.evaluate(
        checkpoint.model, corpus.split(args.split), update, reference=checkpoint.source_config,
        tag=update.tag if update else "",
    )
    Term.header("Evaluation")
    Term.print_table(
        [report.to_dict()], ["split", "perplexity", "r_at_3", "top1", "flops_fraction", "tokens_evaluated", "tag"]
    )
    return 0


def cmd_bench(args, config):
    section = config["bench"]
    checkpoint = storage.load(args.model)
    run = _run_config(
        args,
        config,
        model=args.model,
        queries=int(_pick(args.queries, section, "queries", metrics.DEFAULT_QUERIES)),
        warmup=int(_pick(args.warmup, section, "warmup", metrics.DEFAULT_WARMUP)),
    )
    update = _pick_sru(checkpoint, args.sru)
    corpus = _corpus_for(checkpoint, _require(run.corpus_dir, "--corpus"))
    Term.header("Latency Benchmark")
    report = metrics.bench_latency(checkpoint.model, corpus.test, run.params["queries"], run.params["warmup"], update)
    fraction = pruning.flops_per_token(checkpoint.model.config) / pruning.flops_per_token(checkpoint.source_config)
    Term.success(
        f"{report.mean_ms:.3f} ± {report.std_ms:.3f} ms/query over {report.queries} queries "
        f"({fraction:.1%} FLOPs)"
    )
    return 0


def cmd_sweep(args, config):
    section, sru_section, bench_section = config["sweep"], config["sru"], config["bench"]
    checkpoint = storage.load(args.model)
    run = _run_config(
        args,
        config,
        model=args.model,
        methods=_str_list(_pick(args.methods, section, "methods")),
        targets=_float_list(_pick(args.targets, section, "targets"), "--targets"),
        with_sru=bool(args.with_sru or section.get("with_sru", False)),
        ppl_ceiling=float(_pick(args.ppl_ceiling, section, "ppl_ceiling", metrics.PPL_CEILING)),
        l0_tolerance=float(section.get("l0_tolerance", metrics.L0_TOLERANCE)),
        threads=int(_pick(args.threads, section, "threads", 1)),
        sru_steps=int(sru_section.get("steps", 2000)),
        sru_lr=float(sru_section.get("lr", 5e-3)),
        bench_queries=int(_pick(args.bench_queries, bench_section, "queries", metrics.DEFAULT_QUERIES)),
        bench_warmup=int(bench_section.get("warmup", metrics.DEFAULT_WARMUP)),
    )
    p = run.params
    corpus = _corpus_for(checkpoint, _require(run.corpus_dir, "--corpus"))
    Term.header("Tradeoff Sweep")
    rows = metrics.sweep(
        checkpoint.model, p["methods"], p["targets"], corpus, run.seed,
        stats=checkpoint.stats, gate_sets=list(checkpoint.gates.values()), with_sru=p["with_sru"],
        sru_steps=p["sru_steps"], sru_lr=p["sru_lr"], bench_queries=p["bench_queries"],
        bench_warmup=p["bench_warmup"], ppl_ceiling=p["ppl_ceiling"], l0_tolerance=p["l0_tolerance"],
        threads=p["threads"], progress=run.progress, reference=checkpoint.source_config,
    )
    out = _require(run.out, "--out")
    with writing(out):
        metrics.write_csv(rows, out)
        metrics.write_json(rows, os.path.splitext(out)[0] + ".json")
    run.write_stamp()
    Term.print_table([vars(r) for r in rows], list(metrics.CSV_COLUMNS) + ["error"])
    for row in rows:
        if row.above_ceiling:
            Term.warning(f"{row.method} @ {row.target_flops:.2f}: test perplexity {row.test_ppl:.1f} above ceiling")
    timed = [r for r in rows if r.ok and r.ms_per_query is not None]
    if len(timed) >= 2:
        try:
            r2 = metrics.pearson_r2([r.achieved_flops for r in timed], [r.ms_per_query for r in timed])
            Term.info(f"Pearson r² between FLOPs and ms/query over {len(timed)} points: {r2:.3f}")
        except ConfigError as e:
            Term.warning(f"Cannot correlate latency with FLOPs: {e}")
    Term.success(f"Wrote {len(rows)} rows to {out}")
    return 0


def cmd_storage_report(args, config):
    Term.header("Storage Accounting")
    Term.print_table(
        single_rank.ptb_storage_report(),
        ["target_flops", "achieved_flops", "element_width", "bytes", "kib"],
        title="Single-rank update size, 4-layer 1550-unit configuration",
    )
    if args.model:
        checkpoint = storage.load(args.model)
        rows = [{"kind": "checkpoint", "tag": os.path.basename(args.model), "bytes": os.path.getsize(args.model)}]
        for tag, gates in sorted(checkpoint.gates.items()):
            rows.append({"kind": "gates", "tag": tag, "bytes": l0.gate_storage_bytes(gates)})
        for tag, update in sorted(checkpoint.sru.items()):
            width = int(storage.read_manifest(args.model)["sru"][tag]["element_width"])
            rows.append({"kind": "sru", "tag": tag, "bytes": single_rank.sru_storage_bytes(update, width)})
        if checkpoint.stats is not None:
            rows.append({"kind": "stats", "tag": "-", "bytes": checkpoint.stats.storage_bytes()})
        Term.print_table(rows, ["kind", "tag", "bytes"], title=args.model)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(description="QRNN pruning knob: prune, recover and measure language models")
    parser.add_argument("--config", default=None, help="Path to config file (default: config.yml or $QRNZ_CONFIG)")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads for sweep cells")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="Warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="Write the synthetic Markov desk corpus")
    p.add_argument("--out", help="Directory for train/valid/test.txt")
    p.add_argument("--seed", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--train-tokens", type=int)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train-baseline", help="Train a desk-scale QRNN from scratch")
    p.add_argument("--corpus")
    p.add_argument("--vocab-cap", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", help="Comma-separated hidden sizes, e.g. 64,32")
    p.add_argument("--embed", type=int)
    p.add_argument("--window", help="Comma-separated window sizes, e.g. 2,1")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("collect-stats", help="Mean absolute activation per filter")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus")
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_collect_stats)

    p = sub.add_parser("prune", help="Prune to an operating point")
    p.add_argument("--model", required=True)
    p.add_argument("--method", required=True, choices=pruning.METHODS)
    p.add_argument("--target-flops", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--stats", help="Checkpoint holding activation statistics")
    p.add_argument("--gates", help="Gate set tag (l0 only)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("train-gates", help="Learn hard concrete gates for L0 pruning")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--tag")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_gates)

    p = sub.add_parser("train-sru", help="Learn a single-rank update for a pruned model")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--tag")
    p.add_argument("--element-width", type=int, choices=(2, 4))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_sru)

    p = sub.add_parser("eval", help="Perplexity, R@3 and FLOPs fraction on one split")
    p.add_argument("--model", required=True)
    p.add_argument("--sru", nargs="?", const="", default=None, help="Apply the stored update (optionally by tag)")
    p.add_argument("--corpus")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="Single-query latency")
    p.add_argument("--model", required=True)
    p.add_argument("--sru", nargs="?", const="", default=None)
    p.add_argument("--corpus")
    p.add_argument("--queries", type=int)
    p.add_argument("--warmup", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="Method x operating-point tradeoff table")
    p.add_argument("--model", required=True)
    p.add_argument("--methods", help="Comma-separated methods")
    p.add_argument("--targets", help="Comma-separated FLOPs fractions")
    p.add_argument("--corpus")
    p.add_argument("--seed", type=int)
    p.add_argument("--with-sru", action="store_true")
    p.add_argument("--ppl-ceiling", type=float)
    p.add_argument("--bench-queries", type=int, help="0 skips latency measurement")
    p.add_argument("--out", required=True, help="CSV path; a .json twin is written beside it")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("storage-report", help="Gate and update storage accounting")
    p.add_argument("--model")
    p.set_defaults(func=cmd_storage_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        config = ConfigLoader(args.config).load_config()
        return args.func(args, config)
    except KnobError as e:
        Term.error(str(e))
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
