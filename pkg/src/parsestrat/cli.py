"""Command-line entry point: ``parsestrat <subcommand> [options]``.

Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .beamsearch import BeamEmpty
from .models import ModelError
from .autodiff import NoLegalAction
from .regress import JoinFailure, NonConvergence, RegressError, Singular
from .subword import SubwordError
from .synth import GrammarSpec, ImproperGrammar, LayoutParams, RtParams, synth_corpus, write_frequency_tsv, write_rt_csv
from .treebank import TreebankError, write_treebank

log = logging.getLogger("parsestrat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="key = value experiment file")
    p.add_argument("--out-dir", help="output directory (overrides config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("--models", help="comma-separated subset of LSTM,TD,LC")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--beams", help="comma-separated action beam sizes")


def _cell_args(p: argparse.ArgumentParser, beam: bool = True) -> None:
    p.add_argument("--model", choices=["LSTM", "TD", "LC"], help="restrict to one model")
    p.add_argument("--seed", type=int, help="restrict to one seed")
    if beam:
        p.add_argument("--beam", type=int, help="restrict to one action beam size")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="parsestrat", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample a synthetic treebank and reading-time table")
    p.add_argument("--out", required=True, help="directory for treebank.txt, reading.csv, freq.tsv")
    p.add_argument("--sentences", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--branching-bias", type=float, default=0.9)
    p.add_argument("--gamma", type=float, default=RtParams.surprisal, help="log-RT slope per nat of surprisal")
    p.add_argument("--noise-sd", type=float, default=RtParams.noise_sd)
    p.add_argument("--article-sd", type=float, default=RtParams.article_sd)
    p.add_argument("--subject-sd", type=float, default=RtParams.subject_sd)
    p.add_argument("--articles", type=int, default=LayoutParams.articles)
    p.add_argument("--subjects", type=int, default=LayoutParams.subjects)
    p.add_argument("--surprisal-source", choices=["pcfg", "lc-rnng"], default="pcfg",
                   help="what drives the simulated reading times")
    p.add_argument("--ref-epochs", type=int, default=10)
    p.add_argument("--ref-dim", type=int, default=64)
    p.add_argument("--ref-seed", type=int, default=1000)
    p.add_argument("--ref-lr", type=float, default=0.001)
    p.add_argument("--ref-batch-size", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=8000)
    p.add_argument("--split-seed", type=int, default=0)

    p = sub.add_parser("train", help="train models (all cells unless restricted)")
    _config_args(p)
    _cell_args(p, beam=False)

    p = sub.add_parser("parse", help="test-split perplexity and F1 per cell")
    _config_args(p)
    _cell_args(p)

    p = sub.add_parser("surprisal", help="reading-corpus surprisals per cell")
    _config_args(p)
    _cell_args(p)

    for name, text in (("regress", "mixed-model comparisons over existing surprisal tables"),
                       ("stats", "seed-averaged metrics and the relative-beam grid"),
                       ("run", "every stage in order")):
        p = sub.add_parser(name, help=text)
        _config_args(p)

    p = sub.add_parser("report", help="write or re-render the report bundle")
    _config_args(p)
    p.add_argument("--bundle", help="re-render figures from an existing bundle.json")
    p.add_argument("--render-dir", help="where re-rendered figures go (default: next to the bundle)")
    return ap


def load_config(args, check_paths: bool = True) -> pl.ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise pl.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    for flag, key in (("models", "models"), ("seeds", "seeds"), ("beams", "beams"), ("out_dir", "out_dir")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    if args.config:
        cfg = pl.ExperimentConfig.from_file(args.config, overrides)
    else:
        cfg = pl.ExperimentConfig.from_mapping(overrides)
    return cfg.validate(check_paths)


def _restrict(cfg: pl.ExperimentConfig, args) -> pl.ExperimentConfig:
    if getattr(args, "model", None):
        cfg.models = (args.model,)
    if getattr(args, "seed", None) is not None:
        cfg.seeds = (args.seed,)
    if getattr(args, "beam", None) is not None:
        if args.beam < 10:
            raise pl.ConfigError("beam sizes must be >= 10")
        cfg.beams = (args.beam,)
    return cfg


def cmd_synth(args) -> None:
    spec = GrammarSpec(branching_bias=args.branching_bias)
    rt = RtParams(surprisal=args.gamma, noise_sd=args.noise_sd, article_sd=args.article_sd,
                  subject_sd=args.subject_sd)
    layout = LayoutParams(articles=args.articles, subjects=args.subjects)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fn = None
    if args.surprisal_source == "lc-rnng":
        ref = pl.ReferenceConfig(split_seed=args.split_seed, vocab_size=args.vocab_size,
                                 epochs=args.ref_epochs, dim=args.ref_dim, seed=args.ref_seed,
                                 lr=args.ref_lr, batch_size=args.ref_batch_size)
        fn = pl.reference_lc_surprisal(ref, out_dir=out)
    corpus = synth_corpus(spec, args.sentences, args.seed, rt=rt, layout=layout, surprisal_fn=fn)
    write_treebank(out / "treebank.txt", corpus.trees, corpus.sources)
    write_treebank(out / "reading_trees.txt", corpus.reading_trees, corpus.reading_ids)
    write_rt_csv(out / "reading.csv", corpus.rt_rows)
    write_frequency_tsv(out / "freq.tsv", corpus.frequencies)
    (out / "grammar.pcfg").write_text(spec.build().to_text(), encoding="utf-8")
    (out / "experiment.cfg").write_text(
        "treebank = treebank.txt\nrt_table = reading.csv\nfrequency_table = freq.tsv\n"
        f"out_dir = run\nsplit_seed = {args.split_seed}\nvocab_size = {args.vocab_size}\n",
        encoding="utf-8")
    print(f"wrote {len(corpus.trees)} trees and {len(corpus.rt_rows)} reading-time rows to {out}")


def cmd_cells(args, stage) -> None:
    cfg = _restrict(load_config(args), args)
    corpus = pl.stage_data(cfg)
    if stage == "train":
        for m in cfg.models:
            for s in cfg.seeds:
                pl.stage_train(cfg, corpus, m, s)
        return
    fn = pl.stage_parse if stage == "parse" else pl.stage_surprisal
    for m, s, k in pl.cells(cfg):
        metrics = fn(cfg, corpus, m, s, k)
        print(pl.cell_name(m, s, k), " ".join(f"{key}={metrics[key]:.4f}" for key in sorted(metrics)
                                              if key.endswith(("perplexity", "f1"))))


def cmd_regress(args) -> None:
    cfg = load_config(args)
    summary = pl.stage_regress(cfg)
    for seed, rec in sorted(summary["seeds"].items()):
        print(f"seed {seed}: " + ", ".join(f"{m} ΔD={v:.3f}" for m, v in rec["delta_d"].items()))


def cmd_report(args) -> None:
    if args.bundle:
        for p in pl.render_report(args.bundle, args.render_dir):
            print(p)
        return
    print(pl.stage_report(load_config(args)))


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            cmd_synth(args)
        elif args.command in ("train", "parse", "surprisal"):
            cmd_cells(args, args.command)
        elif args.command == "regress":
            cmd_regress(args)
        elif args.command == "stats":
            pl.stage_stats(load_config(args))
        elif args.command == "report":
            cmd_report(args)
        elif args.command == "run":
            print(pl.run_experiment(load_config(args)))
    except pl.ConfigError as e:
        print(f"parsestrat: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (Singular, NonConvergence, BeamEmpty, NoLegalAction, FloatingPointError) as e:
        print(f"parsestrat: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pl.DataError, TreebankError, SubwordError, JoinFailure, RegressError, ImproperGrammar,
            ModelError, FileNotFoundError, KeyError) as e:
        print(f"parsestrat: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
