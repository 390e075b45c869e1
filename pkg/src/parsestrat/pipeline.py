"""Experiment stages: data, training, parsing, surprisal, regression, statistics, report.

Every stage reads and writes files under ``ExperimentConfig.out_dir``; outputs
are keyed by (model, seed, beam) cell so that stages can be rerun or resumed
independently. Nothing written depends on wall-clock time.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import torch

from . import regress as rg
from .beamsearch import (
    DEFAULT_BEAMS, THRESHOLDS, BeamConfig, BeamEmpty, best_parse, lm_surprisals, marginal_surprisals,
    relative_beam_stats, summarize_across_seeds, word_sync_search, write_beam_stats_csv,
    write_surprisal_csv,
)
from .evaluation import SurprisalTable, corpus_f1, phrasal_surprisal
from .models import LstmLm, Rnng, TrainConfig, load_model, rnng_action_nll, save_model, train
from .oracle import GEN, Strategy, tree_to_actions
from .plots import Point, write_scatter
from .subword import BpeModel, encode_sentence, encode_tree, train_bpe
from .treebank import CorpusSplit, Tree, read_treebank, split_corpus, write_treebank

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STRATEGIES = {"TD": Strategy.TOP_DOWN, "LC": Strategy.LEFT_CORNER}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class BundleVersionMismatch(DataError):
    def __init__(self, found, expected=SCHEMA_VERSION):
        super().__init__(f"report bundle schema {found!r}, this version reads {expected}")
        self.found = found


# -- configuration -------------------------------------------------------------

@dataclass
class ExperimentConfig:
    treebank: str = ""
    rt_table: str = ""
    frequency_table: str = ""
    out_dir: str = "out"
    models: tuple[str, ...] = rg.MODEL_ORDER
    beams: tuple[int, ...] = DEFAULT_BEAMS
    seeds: tuple[int, ...] = (1, 2, 3)
    split_seed: int = 0
    vocab_size: int = 8000
    coverage: float = 0.9995
    epochs: int = 40
    dim: int = 256
    num_layers: int = 2
    batch_size: int = 64
    rnng_lr: float = 0.001
    lstm_lr: float = 20.0
    # test sentences used for perplexity and F1; 0 keeps the whole test split
    eval_sentences: int = 0
    sd_cut: float = 3.0
    select_predictors: bool = True
    # also enter each model's surprisal of the preceding segment
    spillover: bool = False
    alpha: float = rg.ALPHA

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        bad = [m for m in self.models if m not in rg.MODEL_ORDER]
        if bad or not self.models:
            raise ConfigError(f"unknown models {bad}; choose from {list(rg.MODEL_ORDER)}")
        if any(k < 10 for k in self.beams):
            raise ConfigError("beam sizes must be >= 10")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if check_paths:
            for name in ("treebank", "rt_table", "frequency_table"):
                p = getattr(self, name)
                if not p or not Path(p).is_file():
                    raise DataError(f"{name}: no such file {p!r}")
        return self

    def train_config(self, model: str) -> TrainConfig:
        common = dict(epochs=self.epochs, batch_size=self.batch_size, dim=self.dim,
                      num_layers=self.num_layers, seeds=self.seeds)
        if model == "LSTM":
            return TrainConfig.for_model("lstm", lr=self.lstm_lr, **common)
        return TrainConfig.for_model("rnng", lr=self.rnng_lr, **common)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("models", "beams", "seeds"):
            d[k] = list(d[k])
        return d

    def portable_dict(self) -> dict:
        """``to_dict`` with inputs recorded by file name and content digest, for artifacts."""
        d = self.to_dict()
        for k in ("treebank", "rt_table", "frequency_table"):
            if d[k]:
                path = Path(d[k])
                digest = hashlib.sha256(path.read_bytes()).hexdigest() if path.is_file() else None
                d[k] = {"name": path.name, "sha256": digest}
        d["out_dir"] = "."
        return d

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        """Read ``key = value`` lines; section headers are optional and ignored.

        Relative paths are taken relative to the config file.
        """
        text = Path(path).read_text(encoding="utf-8")
        if not text.lstrip().startswith("["):
            text = "[experiment]\n" + text
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(str(e)) from e
        raw = {}
        for section in parser.sections():
            raw.update(parser[section])
        raw.update(overrides or {})
        cfg = cls.from_mapping(raw)
        base = Path(path).resolve().parent
        for name in ("treebank", "rt_table", "frequency_table", "out_dir"):
            p = getattr(cfg, name)
            if p and not Path(p).is_absolute() and name not in (overrides or {}):
                setattr(cfg, name, str(base / p))
        return cfg

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            name = key.strip().replace("-", "_")
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(cls.__dataclass_fields__[name].default, value, key)
        return cls(**kwargs)


def _coerce(default, value, key):
    if not isinstance(value, str):
        return value
    v = value.strip().strip('"').strip("'")
    try:
        if isinstance(default, bool):
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        if isinstance(default, tuple):
            items = [x.strip().strip('"').strip("'") for x in v.strip("[]()").split(",") if x.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(x) for x in items)
            return tuple(items)
        if isinstance(default, int):
            return int(v)
        if isinstance(default, float):
            return float(v)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {value!r}") from e
    return v


# -- small file helpers --------------------------------------------------------

def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cell_name(model: str, seed: int, beam: int) -> str:
    return f"{model}|s{seed}" if model == "LSTM" else f"{model}|s{seed}|b{beam}"


def model_dir(cfg: ExperimentConfig, model: str, seed: int) -> Path:
    return Path(cfg.out_dir) / "models" / model / f"seed{seed}"


def cell_dir(cfg: ExperimentConfig, model: str, seed: int, beam: int) -> Path:
    sub = "lm" if model == "LSTM" else f"beam{beam}"
    return Path(cfg.out_dir) / "cells" / model / f"seed{seed}" / sub


def cells(cfg: ExperimentConfig) -> list[tuple[str, int, int]]:
    out = []
    for m in cfg.models:
        for s in cfg.seeds:
            for k in ([0] if m == "LSTM" else cfg.beams):
                out.append((m, s, k))
    return out


# -- data ----------------------------------------------------------------------

@dataclass
class Corpus:
    split: CorpusSplit
    bpe: BpeModel
    labels: list[str]
    reading: list[tuple[str, list[str]]] = field(default_factory=list)

    @property
    def piece_ids(self) -> dict[str, int]:
        return {p: i for i, p in enumerate(self.bpe.vocab)}

    def lm_data(self, trees: Sequence[Tree]) -> list[list[int]]:
        return [encode_sentence(self.bpe, t.leaves())[0] for t in trees]

    def action_data(self, trees: Sequence[Tree], strategy: Strategy):
        ids = self.piece_ids
        return [tree_to_actions(encode_tree(self.bpe, t), strategy, vocab=ids) for t in trees]


def tree_labels(trees: Sequence[Tree]) -> list[str]:
    seen = set()

    def walk(node):
        if isinstance(node, Tree):
            seen.add(node.label)
            for c in node.children:
                walk(c)

    for t in trees:
        walk(t)
    return sorted(seen)


def build_corpus(trees, sources, split_seed: int, vocab_size: int, coverage: float) -> Corpus:
    split = split_corpus(trees, split_seed, sources)
    if not split.train:
        raise DataError("training split is empty")
    bpe = train_bpe([t.leaves() for t in split.train], vocab_size, coverage)
    return Corpus(split, bpe, tree_labels(split.train))


def reading_sentences(rows: Sequence[dict]) -> list[tuple[str, list[str]]]:
    """Sentences of the reading corpus in first-seen order, segments by index."""
    order: list[str] = []
    segs: dict[str, dict[int, str]] = {}
    for r in rows:
        sid = r["sentence_id"]
        if sid not in segs:
            order.append(sid)
            segs[sid] = {}
        k = int(r["segment_index"])
        prev = segs[sid].setdefault(k, r["surface"])
        if prev != r["surface"]:
            raise DataError(f"segment {sid}:{k} has conflicting surfaces {prev!r} and {r['surface']!r}")
    out = []
    for sid in order:
        idx = sorted(segs[sid])
        if idx != list(range(len(idx))):
            raise DataError(f"sentence {sid} has non-contiguous segment indices")
        out.append((sid, [segs[sid][k] for k in idx]))
    return out


def stage_data(cfg: ExperimentConfig) -> Corpus:
    """Split the treebank, train BPE on the training part; cached under data/."""
    data = Path(cfg.out_dir) / "data"
    trees, sources = read_treebank(cfg.treebank)
    split = split_corpus(trees, cfg.split_seed, sources)
    bpe_path = data / "bpe.model"
    if bpe_path.exists():
        bpe = BpeModel.load(bpe_path)
        labels = (data / "labels.txt").read_text(encoding="utf-8").split()
        corpus = Corpus(split, bpe, labels)
    else:
        corpus = build_corpus(trees, sources, cfg.split_seed, cfg.vocab_size, cfg.coverage)
        data.mkdir(parents=True, exist_ok=True)
        corpus.bpe.save(bpe_path)
        (data / "labels.txt").write_text("\n".join(corpus.labels) + "\n", encoding="utf-8")
        for part in ("train", "validation", "test"):
            write_treebank(data / f"{part}.txt", getattr(split, part), getattr(split, f"{part}_sources"))
    corpus.reading = reading_sentences(rg.read_rt_csv(cfg.rt_table))
    return corpus


# -- training ------------------------------------------------------------------

def new_model(cfg: ExperimentConfig, corpus: Corpus, model: str):
    tc = cfg.train_config(model)
    if model == "LSTM":
        return LstmLm(corpus.bpe.size, tc.dim, tc.num_layers, tc.dropout)
    return Rnng(corpus.bpe.size, corpus.labels, STRATEGIES[model], tc.dim, tc.num_layers, tc.dropout)


def stage_train(cfg: ExperimentConfig, corpus: Corpus, model: str, seed: int):
    """Train one (model, seed) cell unless its selected checkpoint already exists."""
    out = model_dir(cfg, model, seed)
    best = out / "model.ckpt"
    if best.exists():
        return load_model(best)[0]
    net = new_model(cfg, corpus, model)
    if model == "LSTM":
        tr, va = corpus.lm_data(corpus.split.train), corpus.lm_data(corpus.split.validation)
    else:
        s = STRATEGIES[model]
        tr, va = corpus.action_data(corpus.split.train, s), corpus.action_data(corpus.split.validation, s)
    # record only this cell's seed so a --seed rerun writes identical bytes
    tc = replace(cfg.train_config(model), seeds=(seed,))
    torch.manual_seed(seed)
    result = train(net, tr, tc, seed=seed, valid=va or None, out_dir=out)
    save_model(net, best, {"epoch": result.best_epoch, "seed": seed, "train": asdict(tc)})
    write_json(out / "train.json", {"best_epoch": result.best_epoch, "best_valid_nll": result.best_valid_nll,
                                     "model": model, "seed": seed})
    return net


def load_trained(cfg: ExperimentConfig, model: str, seed: int):
    path = model_dir(cfg, model, seed) / "model.ckpt"
    if not path.exists():
        raise DataError(f"missing checkpoint {path}; run the train stage first")
    return load_model(path)[0]


# -- per-sentence scoring ------------------------------------------------------

def score_sentence(net, ids, beam: int):
    """Subword surprisals and, for the RNNG, the search result."""
    if isinstance(net, LstmLm):
        return lm_surprisals(net, ids), None
    res = word_sync_search(net, ids, BeamConfig(beam))
    return marginal_surprisals(res), res


def stage_parse(cfg: ExperimentConfig, corpus: Corpus, model: str, seed: int, beam: int) -> dict:
    """Test-split perplexity and (RNNG) labeled F1 of the best parse."""
    out = cell_dir(cfg, model, seed, beam)
    done = out / "parse.json"
    if done.exists():
        return read_json(done)
    net = load_trained(cfg, model, seed)
    test = corpus.split.test[:cfg.eval_sentences] if cfg.eval_sentences else corpus.split.test
    total, count, excluded = 0.0, 0, 0
    pairs, lines = [], []
    for t in test:
        ids = encode_sentence(corpus.bpe, t.leaves())[0]
        try:
            s, res = score_sentence(net, ids, beam)
        except BeamEmpty:
            excluded += 1
            lines.append("")
            continue
        total += math.fsum(s)
        count += len(s)
        if res is not None:
            pred = best_parse(res, vocab=corpus.bpe.vocab)
            pairs.append((encode_tree(corpus.bpe, t), pred))
            lines.append(str(pred))
    out.mkdir(parents=True, exist_ok=True)
    metrics = {
        "model": model, "seed": seed, "beam": beam,
        "test_perplexity": math.exp(total / count) if count else math.nan,
        "test_subwords": count, "test_sentences": len(test), "test_excluded": excluded,
    }
    if pairs:
        rep = corpus_f1(pairs)
        metrics.update(f1=rep.f1, precision=rep.precision, recall=rep.recall)
        (out / "parses.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_json(done, metrics)
    return metrics


def stage_surprisal(cfg: ExperimentConfig, corpus: Corpus, model: str, seed: int, beam: int) -> dict:
    """Segment surprisals on the reading corpus, its perplexity and relative beam counts."""
    out = cell_dir(cfg, model, seed, beam)
    done = out / "surprisal.json"
    if done.exists():
        return read_json(done)
    net = load_trained(cfg, model, seed)
    table = SurprisalTable()
    sub_rows, results = [], []
    total, count, excluded = 0.0, 0, 0
    for sid, segs in corpus.reading:
        ids, lengths, unks = encode_sentence(corpus.bpe, segs)
        keys = [rg.segment_key(sid, k) for k in range(len(segs))]
        try:
            s, res = score_sentence(net, ids, beam)
        except BeamEmpty:
            excluded += 1
            # unscorable sentences are flagged like unknown segments and dropped downstream
            s, res, unks = [math.nan] * len(ids), None, [True] * len(segs)
        else:
            total += math.fsum(s)
            count += len(s)
        if res is not None:
            results.append(res)
        table.extend(phrasal_surprisal(s, lengths, keys, segs, unks))
        mass = 0.0
        for i, (sub, v) in enumerate(zip(ids, s)):
            mass -= v
            sub_rows.append((sid, i, sub, v, mass))
    out.mkdir(parents=True, exist_ok=True)
    table.write_csv(out / "segments.csv")
    write_surprisal_csv(out / "subwords.csv", sub_rows)
    metrics = {
        "model": model, "seed": seed, "beam": beam,
        "rt_perplexity": math.exp(total / count) if count else math.nan,
        "rt_subwords": count, "rt_sentences": len(corpus.reading), "rt_excluded": excluded,
    }
    if results:
        stats = relative_beam_stats(results, THRESHOLDS)
        metrics["beam_counts"] = {_tkey(t): v for t, v in stats.items()}
    write_json(done, metrics)
    return metrics


def _tkey(t: float) -> str:
    return f"1/{1 / t:.1f}"


# -- regression ----------------------------------------------------------------

def load_surprisals(cfg: ExperimentConfig) -> dict[str, dict[str, tuple[float, bool]]]:
    out = {}
    for m, s, k in cells(cfg):
        path = cell_dir(cfg, m, s, k) / "segments.csv"
        if not path.exists():
            raise DataError(f"missing surprisal table {path}; run the surprisal stage first")
        out[cell_name(m, s, k)] = {r.segment_id: (r.surprisal, r.unk) for r in SurprisalTable.read_csv(path)}
    return out


def stage_regress(cfg: ExperimentConfig) -> dict:
    """ΔD of every cell over the baseline and, per seed, the pairwise comparison matrix.

    For each seed the beam giving an RNNG its largest ΔD represents that model
    in the comparison matrix.
    """
    out = Path(cfg.out_dir) / "regress"
    rows = rg.read_rt_csv(cfg.rt_table)
    from .synth import read_frequency_tsv
    freq = read_frequency_tsv(cfg.frequency_table)
    surprisals = load_surprisals(cfg)
    names = list(surprisals)
    if cfg.spillover:
        surprisals = rg.with_spillover(surprisals)

    def terms(name):
        return [name, name + rg.SPILLOVER] if cfg.spillover else [name]

    data = rg.prepare(rows, surprisals, freq, cfg.sd_cut)
    predictors = [p for p in rg.BASELINE_PREDICTORS if p in data.columns]
    if cfg.select_predictors:
        keep, dropped, base = rg.baseline_predictor_selection(data, predictors)
    else:
        keep, dropped, base = predictors, [], rg.fit_lmm(data, predictors)
    delta = {}
    for name in names:
        delta[name] = rg.delta_deviance(base, rg.fit_lmm(data, keep + terms(name)))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "delta_d.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "seed", "beam", "delta_d"])
        for m, s, k in cells(cfg):
            w.writerow([m, s, k, f"{delta[cell_name(m, s, k)]:.10f}"])
    per_seed = {}
    for s in cfg.seeds:
        chosen = {}
        for m in cfg.models:
            options = [k for mm, ss, k in cells(cfg) if mm == m and ss == s]
            chosen[m] = max(options, key=lambda k: (delta[cell_name(m, s, k)], -k))
            for src, dst in zip(terms(cell_name(m, s, chosen[m])), terms(m)):
                data.columns[dst] = data.columns[src]
        models = [m for m in rg.MODEL_ORDER if m in cfg.models]
        comp, fits = rg.comparison_matrix(data, keep, models, cfg.alpha, {m: terms(m) for m in models})
        d = out / f"seed{s}"
        d.mkdir(parents=True, exist_ok=True)
        rg.write_comparison_csv(d / "comparison.csv", comp)
        rg.write_fit_report(d / "fits.json", fits, data.counts, dropped)
        per_seed[str(s)] = {
            "chosen_beam": chosen,
            "delta_d": rg.delta_d_table(fits, models),
            "comparisons": [asdict(r) for r in comp],
        }
        for m in cfg.models:
            for name in terms(m):
                del data.columns[name]
    summary = {
        "alpha": cfg.alpha, "baseline_predictors": keep, "dropped_predictors": dropped,
        "counts": data.counts, "baseline_deviance": base.deviance,
        "delta_d": {k: delta[k] for k in sorted(delta)}, "seeds": per_seed,
    }
    write_json(out / "summary.json", summary)
    return summary


def read_delta_d(path) -> dict[tuple[str, int, int], float]:
    with open(path, encoding="utf-8") as fh:
        return {(r["model"], int(r["seed"]), int(r["beam"])): float(r["delta_d"]) for r in csv.DictReader(fh)}


# -- statistics ----------------------------------------------------------------

def _mean_sd(vals: Sequence[float]) -> tuple[float, float]:
    vals = [v for v in vals if v is not None and math.isfinite(v)]
    if not vals:
        return math.nan, math.nan
    m = math.fsum(vals) / len(vals)
    return m, math.sqrt(math.fsum((v - m) ** 2 for v in vals) / len(vals))


def stage_stats(cfg: ExperimentConfig) -> dict:
    """Seed-averaged metrics per (model, beam) and the relative-beam grid."""
    out = Path(cfg.out_dir) / "stats"
    delta = read_delta_d(Path(cfg.out_dir) / "regress" / "delta_d.csv")
    groups: dict[tuple[str, int], list[dict]] = {}
    for m, s, k in cells(cfg):
        d = cell_dir(cfg, m, s, k)
        rec = {**read_json(d / "surprisal.json"), **read_json(d / "parse.json"), "delta_d": delta[m, s, k]}
        groups.setdefault((m, k), []).append(rec)
    summary, grid = [], []
    for (m, k), recs in groups.items():
        row = {"model": m, "beam": k, "seeds": len(recs)}
        for key in ("rt_perplexity", "test_perplexity", "f1", "delta_d"):
            mean, sd = _mean_sd([r.get(key) for r in recs])
            row[f"{key}_mean"], row[f"{key}_sd"] = mean, sd
        summary.append(row)
        if m != "LSTM":
            per_seed = [{t: r["beam_counts"][_tkey(t)] for t in THRESHOLDS} for r in recs if "beam_counts" in r]
            if per_seed:
                for t, (mean, sd) in summarize_across_seeds(per_seed).items():
                    grid.append({"model": m, "threshold": _tkey(t), "word_beam": BeamConfig(k).word_beam,
                                 "mean": f"{mean:.6f}", "sd": f"{sd:.6f}"})
    out.mkdir(parents=True, exist_ok=True)
    write_beam_stats_csv(out / "beam_stats.csv", grid)
    cols = ["model", "beam", "seeds"] + [f"{k}_{s}" for k in ("rt_perplexity", "test_perplexity", "f1", "delta_d")
                                         for s in ("mean", "sd")]
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in summary:
            w.writerow({c: (f"{row[c]:.10g}" if isinstance(row[c], float) else row[c]) for c in cols})
    result = {"summary": summary, "beam_stats": grid}
    write_json(out / "stats.json", result)
    return result


# -- report --------------------------------------------------------------------

def stage_report(cfg: ExperimentConfig) -> Path:
    """Assemble the versioned bundle and render its figures."""
    root = Path(cfg.out_dir)
    bundle = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.portable_dict(),
        "stats": read_json(root / "stats" / "stats.json"),
        "regression": read_json(root / "regress" / "summary.json"),
    }
    path = root / "report" / "bundle.json"
    write_json(path, bundle)
    render_report(path)
    return path


def load_bundle(path) -> dict:
    bundle = read_json(path)
    if bundle.get("schema_version") != SCHEMA_VERSION:
        raise BundleVersionMismatch(bundle.get("schema_version"))
    return bundle


def render_report(bundle_path, out_dir=None) -> list[Path]:
    bundle = load_bundle(bundle_path)
    out = Path(out_dir) if out_dir else Path(bundle_path).parent
    out.mkdir(parents=True, exist_ok=True)
    rows = bundle["stats"]["summary"]

    def label(r):
        return "" if r["model"] == "LSTM" else f"k={r['beam']}"

    ppl = [Point(r["model"], label(r), r["rt_perplexity_mean"], r["delta_d_mean"],
                 _zero(r["rt_perplexity_sd"]), _zero(r["delta_d_sd"])) for r in rows]
    f1 = [Point(r["model"], label(r), r["f1_mean"], r["delta_d_mean"], _zero(r["f1_sd"]), _zero(r["delta_d_sd"]))
          for r in rows if r["model"] != "LSTM"]
    write_scatter(out / "delta_d_vs_perplexity.svg", out / "delta_d_vs_perplexity.csv", ppl,
                  "perplexity (reading corpus)", "psychometric predictive power (ΔD)",
                  "ΔD against perplexity")
    write_scatter(out / "delta_d_vs_f1.svg", out / "delta_d_vs_f1.csv", f1,
                  "parsing accuracy (labeled F1)", "psychometric predictive power (ΔD)",
                  "ΔD against parsing accuracy")
    lines = ["# Report", "", "| model | beam | seeds | PPL (reading) | PPL (test) | F1 | ΔD |",
             "|---|---|---|---|---|---|---|"]
    for r in rows:
        cells_ = [f"{r[k + '_mean']:.3f} ± {r[k + '_sd']:.3f}" if math.isfinite(r[k + "_mean"]) else "-"
                  for k in ("rt_perplexity", "test_perplexity", "f1", "delta_d")]
        lines.append(f"| {r['model']} | {r['beam'] or '-'} | {r['seeds']} | " + " | ".join(cells_) + " |")
    lines += ["", "## Nested model comparisons", ""]
    for seed, rec in sorted(bundle["regression"]["seeds"].items()):
        lines.append(f"Seed {seed}; beams chosen: {json.dumps(rec['chosen_beam'], sort_keys=True)}")
        lines.append("")
        lines.append("| comparison | χ² | df | p | significant |")
        lines.append("|---|---|---|---|---|")
        for c in rec["comparisons"]:
            lines.append(f"| {c['label']} | {c['chi2']:.4f} | {c['df']} | {c['p']:.4g} | {'yes' if c['significant'] else 'no'} |")
        lines.append("")
    (out / "report.md").write_text("\n".join(lines), encoding="utf-8")
    return [out / "delta_d_vs_perplexity.svg", out / "delta_d_vs_f1.svg", out / "report.md"]


def _zero(v: float) -> float:
    return v if math.isfinite(v) else 0.0


# -- whole experiment ----------------------------------------------------------

def run_experiment(cfg: ExperimentConfig) -> Path:
    cfg.validate()
    corpus = stage_data(cfg)
    write_json(Path(cfg.out_dir) / "config.json", cfg.portable_dict())
    for m in cfg.models:
        for s in cfg.seeds:
            log.info("train %s seed %d", m, s)
            stage_train(cfg, corpus, m, s)
    for m, s, k in cells(cfg):
        log.info("score %s seed %d beam %d", m, s, k)
        stage_parse(cfg, corpus, m, s, k)
        stage_surprisal(cfg, corpus, m, s, k)
    stage_regress(cfg)
    stage_stats(cfg)
    return stage_report(cfg)


# -- synthetic surprisal from a reference left-corner RNNG ---------------------

def split_at_gen(costs: Sequence[float], actions) -> list[float]:
    """Per-subword cost: actions up to and including each GEN; the tail goes to the last."""
    out, acc = [], 0.0
    for c, a in zip(costs, actions):
        acc += c
        if a.kind == GEN:
            out.append(acc)
            acc = 0.0
    if not out:
        raise DataError("derivation generates no words")
    out[-1] += acc
    return out


@dataclass
class ReferenceConfig:
    split_seed: int = 0
    vocab_size: int = 8000
    coverage: float = 0.9995
    epochs: int = 10
    dim: int = 64
    num_layers: int = 2
    lr: float = 0.001
    batch_size: int = 64
    seed: int = 1000


def reference_lc_surprisal(ref: ReferenceConfig, out_dir=None):
    """A ``surprisal_fn`` for synthesis: gold-tree LC-RNNG derivation cost per segment.

    A left-corner RNNG is trained on the treebank's training split (same split
    and subword model as the experiment would build); each reading sentence's
    gold derivation is scored and its action costs are attributed to the
    subword whose GEN closes them, then summed per segment.
    """

    def fn(trees, sources, reading, ids):
        corpus = build_corpus(trees, sources, ref.split_seed, ref.vocab_size, ref.coverage)
        corpus.labels = tree_labels(list(trees) + list(reading))
        tc = TrainConfig.for_model("rnng", epochs=ref.epochs, dim=ref.dim, num_layers=ref.num_layers,
                                   lr=ref.lr, batch_size=ref.batch_size, seeds=(ref.seed,))
        net = Rnng(corpus.bpe.size, corpus.labels, Strategy.LEFT_CORNER, tc.dim, tc.num_layers, tc.dropout)
        s = Strategy.LEFT_CORNER
        torch.manual_seed(ref.seed)
        train(net, corpus.action_data(corpus.split.train, s), tc, seed=ref.seed,
              valid=corpus.action_data(corpus.split.validation, s) or None)
        if out_dir is not None:
            save_model(net, Path(out_dir) / "reference_lc.ckpt", {"seed": ref.seed, "train": asdict(tc)})
        table = {}
        pieces = corpus.piece_ids
        for sid, tree in zip(ids, reading):
            seq = tree_to_actions(encode_tree(corpus.bpe, tree), s, vocab=pieces)
            costs, _ = rnng_action_nll(net, seq)
            sub = split_at_gen(costs, seq.actions)
            _, lengths, _ = encode_sentence(corpus.bpe, tree.leaves())
            pos = 0
            for k, n in enumerate(lengths):
                table[(sid, k)] = math.fsum(sub[pos:pos + n])
                pos += n
        return table

    return fn
