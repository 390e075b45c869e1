"""Word-synchronous beam search over RNNG derivations.

Items are expanded in rounds. Every round scores all legal successors of the
current frontier, keeps the best ``k`` and routes those that generate the
next subword into the word beam; the best ``fast_track`` lexical successors
enter the word beam even when they miss the action-beam cut. A word step ends
when the word beam is full or the frontier runs dry.

After the last subword the surviving items are driven to completion and the
finished derivations form the final beam. Surprisal of the last subword is
measured against that final beam, so the per-subword surprisals of a
sentence add up to its marginal NLL.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch

from .models import GEN_COL, LstmLm, Rnng, lm_nll
from .oracle import GEN, INITIAL, OPEN, REDUCE, Action, ActionSequence, State, actions_to_tree, legal_actions, step

THRESHOLDS = (1 / 3.8, 1 / 5.6)
DEFAULT_BEAMS = (100, 200, 400, 600, 800, 1000)


class BeamEmpty(RuntimeError):
    def __init__(self, word_index: int):
        super().__init__(f"no derivation survived at subword {word_index}")
        self.word_index = word_index


@dataclass(frozen=True)
class BeamConfig:
    action_beam: int = 100

    def __post_init__(self):
        if self.action_beam < 10:
            raise ValueError("action beam must be at least 10")

    @property
    def word_beam(self) -> int:
        return max(1, self.action_beam // 10)

    @property
    def fast_track(self) -> int:
        return max(1, self.action_beam // 100)


@dataclass
class BeamItem:
    actions: tuple[Action, ...]
    state: State
    logp: float
    words: int
    # tensor stack; None until the item survives a cut and gets expanded
    stack: tuple | None = None
    parent: "BeamItem | None" = field(default=None, repr=False)

    def sequence(self, strategy) -> ActionSequence:
        return ActionSequence(strategy, self.actions)


@dataclass
class SearchResult:
    word_beams: list[list[BeamItem]]
    final: list[BeamItem]
    strategy: object = None

    @property
    def n_words(self) -> int:
        return len(self.word_beams)


def logsumexp(values: Iterable[float]) -> float:
    vals = list(values)
    if not vals:
        return -math.inf
    top = max(vals)
    if top == -math.inf:
        return top
    return top + math.log(math.fsum(math.exp(v - top) for v in vals))


def _materialize(model: Rnng, items: list[BeamItem]) -> None:
    todo = [it for it in items if it.stack is None]
    if not todo:
        return
    new = model.advance_batch(
        [it.parent.stack for it in todo], [it.parent.state for it in todo], [it.actions[-1] for it in todo]
    )
    for it, st in zip(todo, new):
        it.stack = st
        it.parent = None


def _expand(model: Rnng, frontier: list[BeamItem], word: int | None, remaining: int):
    """Scored successors of every frontier item, in deterministic enqueue order."""
    pruned = [legal_actions(it.state, model.strategy, model.limits, words_remaining=remaining) for it in frontier]
    frontier = [it for it, kinds in zip(frontier, pruned) if kinds]
    pruned = [kinds for kinds in pruned if kinds]
    if not frontier:
        return []
    _materialize(model, frontier)
    masks = [model.mask_row(legal_actions(it.state, model.strategy, model.limits)) for it in frontier]
    act, wrd = model.step_logprobs([it.stack for it in frontier], masks)
    act = act.tolist()
    wlp = wrd[:, word].tolist() if word is not None else None
    out = []
    for r, (it, kinds) in enumerate(zip(frontier, pruned)):
        for kind in (GEN, REDUCE, OPEN):
            if kind not in kinds:
                continue
            if kind == GEN:
                a = Action(GEN, word)
                cols = [(GEN_COL, a, act[r][GEN_COL] + wlp[r])]
            elif kind == REDUCE:
                cols = [(1, Action(REDUCE), act[r][1])]
            else:
                cols = [(c, model.column_action(c), act[r][c]) for c in range(2, model.n_actions)]
            for _, a, lp in cols:
                if lp == -math.inf:
                    continue
                out.append(BeamItem(
                    it.actions + (a,), step(it.state, a, model.strategy), it.logp + lp,
                    it.words + (a.kind == GEN), None, it,
                ))
    return out


def _top(items: list[BeamItem], n: int) -> list[BeamItem]:
    # stable: ties keep enqueue order
    return sorted(items, key=lambda it: -it.logp)[:n]


def word_sync_search(model: Rnng, ids: Sequence[int], cfg: BeamConfig) -> SearchResult:
    if not ids:
        raise ValueError("empty subword sequence")
    k, kw, kf = cfg.action_beam, cfg.word_beam, cfg.fast_track
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            root = BeamItem((), INITIAL, 0.0, 0, model.initial_stack())
            current = [root]
            beams: list[list[BeamItem]] = []
            n = len(ids)
            for i, w in enumerate(ids):
                remaining = n - i
                frontier = current
                next_word: list[BeamItem] = []
                while frontier:
                    succ = _expand(model, frontier, int(w), remaining)
                    kept = _top(succ, k)
                    kept_ids = {id(x) for x in kept}
                    lexical = [x for x in succ if x.actions[-1].kind == GEN]
                    fast = [x for x in _top(lexical, kf) if id(x) not in kept_ids]
                    next_word.extend(x for x in kept if x.actions[-1].kind == GEN)
                    next_word.extend(fast)
                    next_word = _top(next_word, kw)
                    frontier = [x for x in kept if x.actions[-1].kind != GEN]
                    # full once no frontier descendant can still enter: scores only decrease
                    if len(next_word) >= kw and frontier and frontier[0].logp <= next_word[-1].logp:
                        break
                if not next_word:
                    raise BeamEmpty(i)
                current = _top(next_word, kw)
                beams.append(current)
            final: list[BeamItem] = []
            frontier = current
            while frontier:
                live = []
                for it in frontier:
                    if not legal_actions(it.state, model.strategy, model.limits, words_remaining=0):
                        if it.state.is_complete():
                            final.append(it)
                    else:
                        live.append(it)
                if not live:
                    break
                frontier = _top(_expand(model, live, None, 0), k)
            if not final:
                raise BeamEmpty(n - 1)
            return SearchResult(beams, _top(final, k), model.strategy)
    finally:
        model.train(was_training)


def marginal_surprisals(result: SearchResult, complete: bool = True) -> list[float]:
    """I(w_i) = logsumexp(beam i-1) - logsumexp(beam i).

    With ``complete`` the last subword is measured against the final beam of
    finished derivations, otherwise against its own word beam.
    """
    if not result.word_beams or not all(result.word_beams):
        raise BeamEmpty(next((i for i, b in enumerate(result.word_beams) if not b), 0))
    masses = [logsumexp(it.logp for it in beam) for beam in result.word_beams]
    if complete:
        if not result.final:
            raise BeamEmpty(result.n_words - 1)
        masses[-1] = logsumexp(it.logp for it in result.final)
    out, prev = [], 0.0
    for m in masses:
        out.append(prev - m)
        prev = m
    return out


def best_parse(result: SearchResult, vocab: Sequence[str] | None = None):
    if not result.final:
        raise BeamEmpty(max(result.n_words - 1, 0))
    top = result.final[0]
    return actions_to_tree(top.sequence(result.strategy), vocab=vocab)


def relative_counts(scores: Sequence[float], threshold: float) -> int:
    best = max(scores)
    cut = best + math.log(threshold)
    return sum(1 for s in scores if s >= cut - 1e-12)


def relative_beam_stats(results: Iterable[SearchResult], thresholds=THRESHOLDS) -> dict[float, float]:
    """Mean number of word-beam items within ``threshold`` of the best, over all positions."""
    totals = {t: 0 for t in thresholds}
    positions = 0
    for res in results:
        for beam in res.word_beams:
            scores = [it.logp for it in beam]
            positions += 1
            for t in thresholds:
                totals[t] += relative_counts(scores, t)
    return {t: (totals[t] / positions if positions else math.nan) for t in thresholds}


def summarize_across_seeds(per_seed: Sequence[dict[float, float]]) -> dict[float, tuple[float, float]]:
    """(mean, population sd) per threshold across seeds."""
    out = {}
    for t in per_seed[0]:
        vals = [d[t] for d in per_seed]
        mean = sum(vals) / len(vals)
        sd = math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))
        out[t] = (mean, sd)
    return out


@dataclass
class PerplexityReport:
    perplexity: float
    subwords: int
    sentences: int
    excluded: int


def lm_surprisals(model: LstmLm, ids: Sequence[int]) -> list[float]:
    """Subword surprisals with the end-sentinel cost folded into the last one."""
    surps, _ = lm_nll(model, ids, eos=True)
    out = surps[:-1]
    out[-1] += surps[-1]
    return out


def sentence_surprisals(model, ids: Sequence[int], cfg: BeamConfig | None = None) -> tuple[list[float], list[float]]:
    """Per-subword surprisals and beam masses (0 for the LSTM)."""
    if isinstance(model, LstmLm):
        s = lm_surprisals(model, ids)
        return s, [0.0] * len(s)
    res = word_sync_search(model, ids, cfg or BeamConfig())
    s = marginal_surprisals(res)
    return s, [-m for m in itertools.accumulate(s)]


def marginal_perplexity(model, sentences: Sequence[Sequence[int]], cfg: BeamConfig | None = None) -> PerplexityReport:
    total, count, used, excluded = 0.0, 0, 0, 0
    for ids in sentences:
        try:
            s, _ = sentence_surprisals(model, ids, cfg)
        except BeamEmpty:
            excluded += 1
            continue
        total += math.fsum(s)
        count += len(s)
        used += 1
    ppl = math.exp(total / count) if count else math.nan
    return PerplexityReport(ppl, count, used, excluded)


SURPRISAL_COLUMNS = ["sentence_id", "word_index", "subword_id", "surprisal_nats", "beam_mass"]


def write_surprisal_csv(path, rows: Iterable[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SURPRISAL_COLUMNS)
        for sid, i, sub, s, mass in rows:
            w.writerow([sid, i, sub, repr(float(s)), repr(float(mass))])


def read_surprisal_csv(path) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {}
    with open(path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["sentence_id"], []).append(float(row["surprisal_nats"]))
    return out


def write_beam_stats_csv(path, rows: Iterable[dict]) -> None:
    """Rows: model, threshold, word_beam, mean, sd."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["model", "threshold", "word_beam", "mean", "sd"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
