"""Synthetic stand-ins for the licensed corpora.

A head-final PCFG produces the treebank; a reading corpus laid out in
articles/screens/lines is paired with simulated first-pass reading times
whose log is linear in the usual baseline factors plus a surprisal term and
article/subject intercepts.
"""

from __future__ import annotations

import csv
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .treebank import Tree, yield_terminals


class ImproperGrammar(ValueError):
    pass


@dataclass
class Pcfg:
    """PCFG whose right-hand sides mix nonterminals and ``@class`` lexical slots.

    A lexical slot emits one word directly under the rule's parent, so trees
    carry phrase labels only (no preterminals).
    """

    start: str
    rules: dict[str, list[tuple[tuple[str, ...], float]]]
    lexicon: dict[str, list[tuple[str, float]]]
    max_depth: int = 40

    def __post_init__(self):
        for lhs, alts in self.rules.items():
            total = sum(p for _, p in alts)
            if not math.isclose(total, 1.0, abs_tol=1e-9):
                raise ImproperGrammar(f"rules for {lhs} sum to {total}")
            for rhs, _ in alts:
                for sym in rhs:
                    if sym.startswith("@"):
                        if sym[1:] not in self.lexicon:
                            raise ImproperGrammar(f"unknown lexical class {sym}")
                    elif sym not in self.rules:
                        raise ImproperGrammar(f"nonterminal {sym} has no rules")
        for cls, words in self.lexicon.items():
            total = sum(p for _, p in words)
            if not math.isclose(total, 1.0, abs_tol=1e-9):
                raise ImproperGrammar(f"lexical class {cls} sums to {total}")
        self.check_proper()

    @property
    def nonterminals(self) -> list[str]:
        return sorted(self.rules)

    def expectation_matrix(self) -> np.ndarray:
        nts = self.nonterminals
        idx = {n: i for i, n in enumerate(nts)}
        m = np.zeros((len(nts), len(nts)))
        for lhs, alts in self.rules.items():
            for rhs, p in alts:
                for sym in rhs:
                    if not sym.startswith("@"):
                        m[idx[lhs], idx[sym]] += p
        return m

    def check_proper(self) -> None:
        """Raise unless derivations terminate with probability one (subcritical branching)."""
        m = self.expectation_matrix()
        radius = max(abs(np.linalg.eigvals(m))) if m.size else 0.0
        if radius >= 1.0 - 1e-12:
            raise ImproperGrammar(f"expected offspring spectral radius {radius:.4f} >= 1")

    def _pick(self, rng: random.Random, items):
        r = rng.random()
        acc = 0.0
        for item, p in items:
            acc += p
            if r < acc:
                return item
        return items[-1][0]

    def sample(self, rng: random.Random, max_tries: int = 1000) -> Tree:
        for _ in range(max_tries):
            try:
                return self._expand(self.start, rng, 1)
            except _TooDeep:
                continue
        raise ImproperGrammar("could not sample a tree within the depth cap")

    def _expand(self, sym: str, rng: random.Random, depth: int) -> Tree:
        if depth > self.max_depth:
            raise _TooDeep()
        rhs = self._pick(rng, self.rules[sym])
        kids = []
        for s in rhs:
            if s.startswith("@"):
                kids.append(self._pick(rng, self.lexicon[s[1:]]))
            else:
                kids.append(self._expand(s, rng, depth + 1))
        return Tree(sym, tuple(kids))

    def word_logprob(self, cls: str, word: str) -> float:
        for w, p in self.lexicon[cls]:
            if w == word:
                return math.log(p)
        return -math.inf

    def rule_logprob(self, lhs: str, rhs: tuple[str, ...]) -> float:
        for r, p in self.rules[lhs]:
            if r == rhs:
                return math.log(p)
        return -math.inf

    def to_text(self) -> str:
        lines = [f"start {self.start}"]
        for lhs in self.nonterminals:
            for rhs, p in self.rules[lhs]:
                lines.append(f"{lhs} -> {' '.join(rhs)} : {p!r}")
        for cls in sorted(self.lexicon):
            alts = " | ".join(f"{w} {p!r}" for w, p in self.lexicon[cls])
            lines.append(f"@{cls} = {alts}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, max_depth: int = 40) -> "Pcfg":
        start = None
        rules: dict = {}
        lexicon: dict = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("start "):
                start = line.split()[1]
            elif line.startswith("@"):
                name, alts = line[1:].split("=", 1)
                entries = []
                for alt in alts.split("|"):
                    w, p = alt.split()
                    entries.append((w, float(p)))
                lexicon[name.strip()] = entries
            else:
                lhs, rest = line.split("->", 1)
                rhs, p = rest.rsplit(":", 1)
                rules.setdefault(lhs.strip(), []).append((tuple(rhs.split()), float(p)))
        if start is None:
            raise ImproperGrammar("grammar without a start line")
        return cls(start, rules, lexicon, max_depth)


class _TooDeep(Exception):
    pass


@dataclass
class GrammarSpec:
    """Parameters of the head-final phrase grammar.

    ``branching_bias`` is the probability that a recursive expansion puts
    its complex child on the left; at 1.0 every tree is strictly
    left-branching.
    """

    branching_bias: float = 0.9
    recursion: dict[str, float] = field(default_factory=lambda: {"VP": 0.8, "PP": 0.7, "NP": 0.5})
    nouns: int = 60
    verbs: int = 40
    modifiers: int = 20
    zipf: float = 1.1
    lexicon_seed: int = 7
    max_depth: int = 40

    def build(self) -> Pcfg:
        return japanese_like_grammar(self)


_SYLLABLES = ["ka", "ki", "ku", "ke", "ko", "sa", "shi", "su", "se", "so", "ta", "chi", "tsu",
              "te", "to", "na", "ni", "nu", "ne", "no", "ha", "hi", "fu", "he", "ho", "ma", "mi",
              "mu", "me", "mo", "ya", "yu", "yo", "ra", "ri", "ru", "re", "ro", "wa", "n", "ga",
              "gi", "gu", "ge", "go", "da", "de", "do", "ba", "bi", "bu", "be", "bo"]


def _zipf(words: list[str], s: float) -> list[tuple[str, float]]:
    weights = [1.0 / (r + 1) ** s for r in range(len(words))]
    z = sum(weights)
    return [(w, x / z) for w, x in zip(words, weights)]


def _make_words(rng: random.Random, n: int, lo: int, hi: int, taken: set) -> list[str]:
    out = []
    while len(out) < n:
        w = "".join(rng.choice(_SYLLABLES) for _ in range(rng.randint(lo, hi)))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def japanese_like_grammar(spec: GrammarSpec) -> Pcfg:
    b = spec.branching_bias
    if not 0.0 <= b <= 1.0:
        raise ValueError("branching_bias must lie in [0, 1]")
    rng = random.Random(spec.lexicon_seed)
    taken: set = set()
    lex = {
        "noun": _zipf(_make_words(rng, spec.nouns, 1, 3, taken), spec.zipf),
        "verb": _zipf(_make_words(rng, spec.verbs, 1, 3, taken), spec.zipf),
        "mod": _zipf(_make_words(rng, spec.modifiers, 2, 3, taken), spec.zipf),
        "case": _zipf(["ga", "wo", "ni", "de", "to", "kara", "made"], spec.zipf),
        "gen": _zipf(["no"], spec.zipf),
        "aux": _zipf(["ta", "teiru", "rareta", "nai", "masu", "tai"], spec.zipf),
        "final": _zipf(["yo", "ne", "ka", "da"], spec.zipf),
    }
    r_vp, r_pp, r_np = (spec.recursion[k] for k in ("VP", "PP", "NP"))

    def recursive(lhs_rules, rate, left, right):
        # left: complex child first (head-final), right: modifier word then complex child
        out = []
        for rhs, p in left:
            out.append((rhs, rate * b * p))
        for rhs, p in right:
            out.append((rhs, rate * (1 - b) * p))
        out.extend((rhs, (1 - rate) * p) for rhs, p in lhs_rules)
        return [(rhs, p) for rhs, p in out if p > 0]

    rules = {
        "S": [(("VP", "@final"), 1.0)],
        "VP": recursive(
            [(("@verb",), 0.6), (("@verb", "@aux"), 0.4)], r_vp,
            [(("PP", "@verb"), 0.5), (("VP", "@aux"), 0.2), (("NP", "@verb"), 0.3)],
            [(("@mod", "VP"), 1.0)],
        ),
        "PP": recursive(
            [(("@noun", "@case"), 1.0)], r_pp,
            [(("NP", "@case"), 1.0)],
            [(("@mod", "PP"), 1.0)],
        ),
        "NP": recursive(
            [(("@noun",), 0.7), (("@mod", "@noun"), 0.3)], r_np,
            [(("NP", "@gen", "@noun"), 0.4), (("VP", "@noun"), 0.6)],
            [(("@mod", "NP"), 1.0)],
        ),
    }
    return Pcfg("S", rules, lex, spec.max_depth)


def is_strictly_left_branching(tree: Tree) -> bool:
    for i, child in enumerate(tree.children):
        if isinstance(child, Tree):
            if i != 0 or not is_strictly_left_branching(child):
                return False
    return True


def sample_treebank(grammar: Pcfg, n: int, seed: int, n_sources: int = 1) -> tuple[list[Tree], list[str]]:
    rng = random.Random(seed)
    trees = [grammar.sample(rng) for _ in range(n)]
    sources = [f"src{i % n_sources:02d}" for i in range(n)]
    return trees, sources


def pcfg_lc_surprisals(grammar: Pcfg, tree: Tree) -> list[float]:
    """Per-terminal derivation cost of the generating PCFG charged in left-corner order.

    A node's rule cost is paid at its left-corner OPEN and a word's lexical
    cost at its GEN; costs after the final word go to the last word.
    """
    rule_cost: dict[int, float] = {}
    lex_cost: dict[tuple[int, int], float] = {}

    def analyse(node: Tree):
        best = None
        for cand, p in grammar.rules[node.label]:
            if len(cand) != len(node.children):
                continue
            lex = {}
            ok = True
            for k, (child, sym) in enumerate(zip(node.children, cand)):
                if isinstance(child, Tree):
                    ok = ok and child.label == sym
                elif sym.startswith("@"):
                    lex[k] = -grammar.word_logprob(sym[1:], child)
                else:
                    ok = False
            if ok and (best is None or -math.log(p) + sum(lex.values()) < best[0]):
                best = (-math.log(p) + sum(lex.values()), -math.log(p), lex)
        if best is None:
            raise ImproperGrammar(f"tree node {node.label} not derivable by the grammar")
        rule_cost[id(node)] = best[1]
        for k, v in best[2].items():
            lex_cost[id(node), k] = v
        for child in node.children:
            if isinstance(child, Tree):
                analyse(child)

    analyse(tree)
    costs: list[float] = []
    pending = 0.0

    def visit(node: Tree):
        nonlocal pending
        for k, child in enumerate(node.children):
            if isinstance(child, Tree):
                visit(child)
            else:
                costs.append(pending + lex_cost[id(node), k])
                pending = 0.0
            if k == 0:
                pending += rule_cost[id(node)]

    visit(tree)
    costs[-1] += pending
    return costs


# -- reading corpus ------------------------------------------------------------

@dataclass
class LayoutParams:
    articles: int = 20
    sentences_per_article: int = 8
    segments_per_line: int = 8
    lines_per_screen: int = 3
    subjects: int = 24
    skip_rate: float = 0.05
    title_sentences: int = 1


@dataclass
class RtParams:
    """Generating coefficients for log first-pass reading time."""

    intercept: float = 5.6
    surprisal: float = 0.05
    article_sd: float = 0.08
    subject_sd: float = 0.15
    noise_sd: float = 0.25
    coefficients: dict[str, float] = field(default_factory=lambda: {
        "length": 0.03, "prev_length": 0.01, "freq": -0.02, "prev_freq": -0.005,
        "is_first": 0.06, "is_last": 0.04, "is_second_last": 0.0,
        "screenN": -0.01, "lineN": -0.005, "segmentN": 0.0,
    })


@dataclass
class Segment:
    article: str
    sentence_id: str
    segment_index: int
    surface: str
    screenN: int
    lineN: int
    segmentN: int
    is_first: int
    is_last: int
    is_second_last: int
    main_text: int


def layout_reading_corpus(trees: Sequence[Tree], params: LayoutParams) -> tuple[list[Segment], list[str]]:
    """Assign sentences to articles and segments (terminals) to screens and lines."""
    per = params.sentences_per_article
    segs: list[Segment] = []
    sentence_ids = []
    for a in range(params.articles):
        article = f"A{a:03d}"
        lines: list[list[tuple]] = [[]]
        for s in range(per):
            idx = a * per + s
            if idx >= len(trees):
                break
            sid = f"{article}-S{s:02d}"
            sentence_ids.append(sid)
            for k, w in enumerate(yield_terminals(trees[idx])):
                if len(lines[-1]) == params.segments_per_line:
                    lines.append([])
                lines[-1].append((sid, k, w, int(s < params.title_sentences)))
        seg_no = 0
        for line_no, line in enumerate(lines):
            for pos, (sid, k, w, title) in enumerate(line):
                seg_no += 1
                segs.append(Segment(
                    article, sid, k, w,
                    screenN=line_no // params.lines_per_screen + 1,
                    lineN=line_no % params.lines_per_screen + 1,
                    segmentN=seg_no,
                    is_first=int(pos == 0),
                    is_last=int(pos == len(line) - 1),
                    is_second_last=int(pos == len(line) - 2),
                    main_text=1 - title,
                ))
    return segs, sentence_ids


def log_geometric_mean_frequency(surface: str, freq: dict[str, int]) -> float:
    toks = surface.split() or [surface]
    return sum(math.log(freq.get(t, 0) + 1) for t in toks) / len(toks)


RT_COLUMNS = ["article", "subj", "sentence_id", "segment_index", "surface", "length", "prev_length",
              "is_first", "is_last", "is_second_last", "screenN", "lineN", "segmentN",
              "main_text", "fixated", "time"]


def simulate_reading_times(
    segments: Sequence[Segment],
    surprisal: dict[tuple[str, int], float],
    freq: dict[str, int],
    params: RtParams,
    layout: LayoutParams,
    seed: int,
) -> list[dict]:
    """One row per (subject, segment); time in ms, 0 when the segment was skipped."""
    rng = np.random.default_rng(seed)
    articles = sorted({s.article for s in segments})
    art_fx = dict(zip(articles, rng.normal(0, params.article_sd, len(articles))))
    subjects = [f"P{i:03d}" for i in range(layout.subjects)]
    subj_fx = dict(zip(subjects, rng.normal(0, params.subject_sd, len(subjects))))
    prev_len: dict[int, int] = {}
    prev_frq: dict[int, float] = {}
    for i, s in enumerate(segments):
        if i > 0 and segments[i - 1].article == s.article:
            prev_len[i] = len(segments[i - 1].surface)
            prev_frq[i] = log_geometric_mean_frequency(segments[i - 1].surface, freq)
        else:
            prev_len[i], prev_frq[i] = 0, 0.0
    rows = []
    c = params.coefficients
    for subj in subjects:
        skips = rng.random(len(segments)) < layout.skip_rate
        noise = rng.normal(0, params.noise_sd, len(segments))
        for i, s in enumerate(segments):
            x = {
                "length": len(s.surface), "prev_length": prev_len[i],
                "freq": log_geometric_mean_frequency(s.surface, freq), "prev_freq": prev_frq[i],
                "is_first": s.is_first, "is_last": s.is_last, "is_second_last": s.is_second_last,
                "screenN": s.screenN, "lineN": s.lineN, "segmentN": s.segmentN,
            }
            eta = params.intercept + sum(c.get(k, 0.0) * v for k, v in x.items())
            eta += params.surprisal * surprisal[(s.sentence_id, s.segment_index)]
            eta += art_fx[s.article] + subj_fx[subj] + noise[i]
            fixated = 0 if skips[i] else 1
            rows.append({
                "article": s.article, "subj": subj, "sentence_id": s.sentence_id,
                "segment_index": s.segment_index, "surface": s.surface,
                "length": x["length"], "prev_length": x["prev_length"],
                "is_first": s.is_first, "is_last": s.is_last, "is_second_last": s.is_second_last,
                "screenN": s.screenN, "lineN": s.lineN, "segmentN": s.segmentN,
                "main_text": s.main_text, "fixated": fixated,
                "time": f"{math.exp(eta):.3f}" if fixated else "0",
            })
    return rows


def word_frequencies(trees: Sequence[Tree]) -> Counter:
    c: Counter = Counter()
    for t in trees:
        c.update(yield_terminals(t))
    return c


def write_rt_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=RT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_frequency_tsv(path, freq: Counter) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tok, n in sorted(freq.items(), key=lambda kv: (-kv[1], kv[0])):
            fh.write(f"{tok}\t{n}\n")


def read_frequency_tsv(path) -> dict[str, int]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                tok, n = line.rstrip("\n").split("\t")
                out[tok] = int(n)
    return out


@dataclass
class SynthCorpus:
    trees: list[Tree]
    sources: list[str]
    reading_trees: list[Tree]
    reading_ids: list[str]
    segments: list[Segment]
    frequencies: Counter
    rt_rows: list[dict]


def synth_corpus(
    spec: GrammarSpec | Pcfg,
    n_sentences: int,
    seed: int,
    rt: RtParams | None = None,
    layout: LayoutParams | None = None,
    surprisal_fn: Callable[[list[Tree], list[str], list[Tree], list[str]], dict] | None = None,
    n_sources: int = 1,
) -> SynthCorpus:
    """Treebank plus a separately sampled reading corpus with simulated reading times.

    ``surprisal_fn(treebank, sources, reading_trees, sentence_ids)`` returns the
    per-segment surprisal ``{(sentence_id, index): nats}`` driving the reading
    times; by default the generating grammar's own left-corner-ordered
    derivation cost is used.
    """
    grammar = spec.build() if isinstance(spec, GrammarSpec) else spec
    rt = rt or RtParams()
    layout = layout or LayoutParams()
    trees, sources = sample_treebank(grammar, n_sentences, seed, n_sources)
    rng = random.Random(f"reading:{seed}")
    n_read = layout.articles * layout.sentences_per_article
    reading = [grammar.sample(rng) for _ in range(n_read)]
    segments, ids = layout_reading_corpus(reading, layout)
    freq = word_frequencies(trees)
    if surprisal_fn is None:
        table = {}
        for sid, t in zip(ids, reading):
            for k, v in enumerate(pcfg_lc_surprisals(grammar, t)):
                table[(sid, k)] = v
    else:
        table = surprisal_fn(trees, sources, reading, ids)
    rows = simulate_reading_times(segments, table, freq, rt, layout, seed)
    return SynthCorpus(trees, sources, reading, ids, segments, freq, rows)
