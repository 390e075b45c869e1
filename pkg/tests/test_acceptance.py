"""Acceptance checks, one per criterion; each prints a PASS/FAIL line.

Criterion 8 runs the reduced end-to-end experiment and takes tens of minutes.
"""

import contextlib
import filecmp
import json
import math
import random
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from parsestrat import autodiff as ad
from parsestrat.beamsearch import (
    BeamConfig, best_parse, logsumexp, marginal_surprisals, relative_counts, word_sync_search,
)
from parsestrat.cli import main
from parsestrat.evaluation import corpus_f1, labeled_f1
from parsestrat.models import Rnng, TrainConfig, seed_model, train
from parsestrat.oracle import (
    GEN, INITIAL, OPEN, Limits, Strategy, actions_to_tree, first_touch_order, legal_actions, step,
    transitions, tree_to_actions,
)
from parsestrat.regress import Dataset, chi_square_test, fit_lmm, ols_deviance
from parsestrat.subword import encode_tree, train_bpe
from parsestrat.treebank import Tree, parse_tree

from conftest import left_branching, random_tree

TD, LC = Strategy.TOP_DOWN, Strategy.LEFT_CORNER


@contextlib.contextmanager
def criterion(capsys, number: int, title: str):
    start = time.perf_counter()
    detail = {}
    try:
        yield detail
    except BaseException as e:
        msg = (str(e).splitlines() or [""])[0][:400]
        with capsys.disabled():
            print(f"\ncriterion {number}: FAIL {title} ({type(e).__name__}: {msg})")
        raise
    took = time.perf_counter() - start
    extra = "; ".join(f"{k}={v}" for k, v in detail.items())
    with capsys.disabled():
        print(f"\ncriterion {number}: PASS {title} [{took:.1f}s] {extra}")


def test_criterion_01_oracle(capsys):
    with criterion(capsys, 1, "oracle round trip and first-touch order") as d:
        rng = random.Random(2024)
        for s in (TD, LC):
            for _ in range(1000):
                t = random_tree(rng)
                assert actions_to_tree(tree_to_actions(t, s)) == t
        fig = parse_tree("(X3 (X2 (X1 a b) c) d)")
        assert first_touch_order(tree_to_actions(fig, TD)) == ["X3", "X2", "X1", "a", "b", "c", "d"]
        assert first_touch_order(tree_to_actions(fig, LC)) == ["a", "X1", "b", "X2", "c", "X3", "d"]
        d["trees"] = 2000


def test_criterion_02_left_corner_memory(capsys):
    with criterion(capsys, 2, "left-branching OPEN runs") as d:
        for depth in range(2, 21):
            t = left_branching(depth)
            td = [a.kind for a in tree_to_actions(t, TD)]
            assert td[:depth] == [OPEN] * depth and td[depth] == GEN
            lc = [a.kind for a in tree_to_actions(t, LC)]
            assert not any(x == y == OPEN for x, y in zip(lc, lc[1:]))
        d["depths"] = "2..20"


def _rel(a, b):
    return float((a - b).abs().max() / max(float(a.abs().max()), float(b.abs().max()), 1e-8))


def test_criterion_03_gradients(capsys):
    with criterion(capsys, 3, "finite-difference gradient checks") as d:
        gen = torch.Generator().manual_seed(33)
        worst = 0.0
        for dim in (8, 12, 16):
            mk = lambda *s: (torch.randn(*s, generator=gen) * 0.5).requires_grad_()
            params = [mk(dim), mk(dim), mk(dim), mk(4 * dim, dim), mk(4 * dim, dim), mk(4 * dim)]
            w = torch.randn(dim, generator=gen)
            lstm_loss = lambda: (ad.lstm_cell(*params)[0] * w).sum() + (ad.lstm_cell(*params)[1] ** 2).sum()
            for p, g in zip(params, torch.autograd.grad(lstm_loss(), params)):
                worst = max(worst, _rel(g, ad.numeric_gradient(lstm_loss, p)))

            logits = torch.randn(3, dim, generator=gen).requires_grad_()
            mask = torch.rand(3, dim, generator=gen) < 0.6
            mask[:, 0] = True
            ww = torch.randn(3, dim, generator=gen)
            sm_loss = lambda: (ad.masked_log_softmax(logits, mask).masked_fill(~mask, 0.0) * ww).sum()
            (g,) = torch.autograd.grad(sm_loss(), logits)
            worst = max(worst, _rel(g, ad.numeric_gradient(sm_loss, logits)))

            m = Rnng(5, ["X", "Y"], LC, dim=dim, num_layers=1, dropout=0.0)
            seed_model(m, dim)
            with torch.no_grad():
                for p in m.parameters():
                    p.add_(torch.randn(p.shape, generator=gen) * 0.3)
            kids = [torch.randn(dim, generator=gen, dtype=torch.float64).requires_grad_() for _ in range(3)]
            wc = torch.randn(dim, generator=gen)
            comp_loss = lambda: (m.compose("X", kids) * wc).sum()
            grads = torch.autograd.grad(comp_loss(), kids)
            for k, g in zip(kids, grads):
                worst = max(worst, _rel(g, ad.numeric_gradient(comp_loss, k)))

            m.eval()
            seq = tree_to_actions(parse_tree("(X (Y a b) c)"), LC, vocab={"a": 1, "b": 2, "c": 3})
            nll_loss = lambda: m.batch_nll([seq])[0].sum()
            params_m = [m.action_w, m.word_emb, m.comp_w]
            for p, g in zip(params_m, torch.autograd.grad(nll_loss(), params_m)):
                worst = max(worst, _rel(g, ad.numeric_gradient(nll_loss, p)))
        assert worst < 1e-4
        d["max_rel_error"] = f"{worst:.2e}"


def _enumerate(model, ids):
    n = len(ids)
    prefix = [[] for _ in range(n)]
    complete = []

    def dfs(actions, state, i, logp):
        kinds = legal_actions(state, model.strategy, model.limits, words_remaining=n - i)
        if not kinds:
            if i == n and state.is_complete():
                complete.append(logp)
            return
        act, word = model.next_action_logprobs(list(actions))
        for a in transitions(state, model.strategy, kinds, model.labels, word=ids[i] if i < n else None):
            lp = float(act[model.action_column(a)])
            if a.kind == GEN:
                lp += float(word[a.arg])
                prefix[i].append(logp + lp)
            dfs(actions + (a,), step(state, a, model.strategy), i + (a.kind == GEN), logp + lp)

    dfs((), INITIAL, 0, 0.0)
    return prefix, complete


def test_criterion_04_beam_exactness(capsys):
    with criterion(capsys, 4, "exhaustive beam equals enumeration") as d:
        worst, most = 0.0, 0
        for strategy, ids in [(TD, [0, 1]), (LC, [0, 1]), (LC, [2, 0, 1]), (TD, [1]), (LC, [1])]:
            m = Rnng(3, ["X", "Y"], strategy, dim=8, num_layers=1, limits=Limits(2, 20, 2))
            seed_model(m, 4)
            m.eval()
            prefix, complete = _enumerate(m, ids)
            assert 0 < len(complete) <= 50
            most = max(most, len(complete))
            masses = [logsumexp(p) for p in prefix]
            masses[-1] = logsumexp(complete)
            want = [a - b for a, b in zip([0.0] + masses[:-1], masses)]
            got = marginal_surprisals(word_sync_search(m, ids, BeamConfig(1000)))
            worst = max(worst, max(abs(a - b) for a, b in zip(got, want)))
            worst = max(worst, abs(math.fsum(got) + logsumexp(complete)))
        assert worst < 1e-6
        d["max_abs_error"] = f"{worst:.1e}"
        d["max_derivations"] = most


def test_criterion_05_chi_square(capsys):
    with criterion(capsys, 5, "chi-square p-values") as d:
        for chi2, df, p in [(2.9406, 1, 0.08638), (4.5609, 1, 0.03271), (0.708, 1, 0.4001)]:
            assert abs(chi_square_test(chi2, df) - p) <= 1e-4
        d["pairs"] = 3


def _crossed(rng, n_a=50, n_s=20, sa=0.3, ss=0.5, beta=(5.0, 0.3, -0.2)):
    a = np.repeat(np.arange(n_a), n_s)
    s = np.tile(np.arange(n_s), n_a)
    n = len(a)
    x1, x2 = rng.normal(size=n), rng.normal(size=n)
    y = beta[0] + beta[1] * x1 + beta[2] * x2 + rng.normal(0, sa, n_a)[a] + rng.normal(0, ss, n_s)[s] \
        + rng.normal(0, 1, n)
    return Dataset(y, {"x1": x1, "x2": x2}, {"article": a.astype(str).astype(object),
                                             "subj": s.astype(str).astype(object)})


def test_criterion_06_lmm(capsys):
    with criterion(capsys, 6, "mixed model oracles") as d:
        rng = np.random.default_rng(606)
        zero = _crossed(rng, sa=0.0, ss=0.0)
        X = np.column_stack([np.ones(len(zero)), zero.columns["x1"], zero.columns["x2"]])
        Z = np.hstack([(zero.groups[g][:, None] == np.unique(zero.groups[g])[None, :]).astype(float)
                       for g in ("article", "subj")])
        e = rng.normal(size=len(zero))
        W = np.hstack([X, Z])
        e -= W @ np.linalg.lstsq(W, e, rcond=None)[0]
        zero.y = X @ np.array([5.0, 0.3, -0.2]) + e
        gap = abs(fit_lmm(zero, ["x1", "x2"]).deviance - ols_deviance(zero, ["x1", "x2"]))
        assert gap < 1e-6
        hits = 0
        truth = {"(Intercept)": 5.0, "x1": 0.3, "x2": -0.2}
        for _ in range(100):
            fit = fit_lmm(_crossed(rng), ["x1", "x2"])
            hits += all(abs(fit.beta[i] - truth[n]) <= 3 * fit.se[i] for i, n in enumerate(fit.names))
        assert hits >= 95
        d["ols_gap"] = f"{gap:.1e}"
        d["covered"] = f"{hits}/100"


def test_criterion_07_relative_beam(capsys):
    with criterion(capsys, 7, "relative beam counts") as d:
        scores = [math.log(x) for x in (0.5, 0.2, 0.12, 0.05)]
        assert relative_counts(scores, 1 / 3.8) == 2 and relative_counts(scores, 1 / 5.6) == 3
        m = Rnng(4, ["X", "Y"], LC, dim=8, num_layers=1, limits=Limits(4, 60, 4))
        seed_model(m, 6)
        m.eval()
        beams = 0
        for ids in ([0, 1, 2], [3, 3, 1, 0], [2, 2]):
            for beam in word_sync_search(m, ids, BeamConfig(200)).word_beams:
                s = [it.logp for it in beam]
                assert relative_counts(s, 1 / 3.8) <= relative_counts(s, 1 / 5.6)
                beams += 1
        d["beams_checked"] = beams


# -- end-to-end ----------------------------------------------------------------

E2E_SYNTH = ["--sentences", "2000", "--seed", "11", "--surprisal-source", "lc-rnng",
             "--ref-epochs", "10", "--ref-dim", "64", "--ref-lr", "0.003", "--ref-batch-size", "16"]
E2E_RUN = ["--seeds", "1,2", "--beams", "100,200", "--set", "epochs=10", "--set", "dim=64",
           "--set", "rnng_lr=0.003", "--set", "batch_size=16"]


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    start = time.perf_counter()
    assert main(["synth", "--out", str(root), *E2E_SYNTH]) == 0
    assert main(["run", "-c", str(root / "experiment.cfg"), *E2E_RUN]) == 0
    return root, time.perf_counter() - start


def test_criterion_08_end_to_end(capsys, e2e):
    with criterion(capsys, 8, "end-to-end recovery of the left-corner generator") as d:
        root, took = e2e
        summary = json.loads((root / "run" / "regress" / "summary.json").read_text())
        wins = 0
        for seed, rec in sorted(summary["seeds"].items()):
            dd = rec["delta_d"]
            rows = {r["label"]: r for r in rec["comparisons"]}
            ok = (dd["LC"] > dd["TD"] and dd["LC"] > dd["LSTM"]
                  and rows["TD<LC"]["significant"] and rows["LSTM<LC"]["significant"])
            wins += ok
            d[f"seed{seed}"] = (f"dD LSTM={dd['LSTM']:.1f} TD={dd['TD']:.1f} LC={dd['LC']:.1f} "
                                f"p(TD<LC)={rows['TD<LC']['p']:.2g} p(LSTM<LC)={rows['LSTM<LC']['p']:.2g}")
        d["minutes"] = f"{took / 60:.1f}"
        assert wins == len(summary["seeds"]) == 2, "; ".join(f"{k} {v}" for k, v in d.items())


def _toy_treebank(rng, n):
    nouns, verbs = ["a", "b", "c"], ["x", "y"]
    out = []
    for _ in range(n):
        k = rng.randrange(3)
        nn, v = rng.choice(nouns), rng.choice(verbs)
        if k == 0:
            out.append(Tree("S", (Tree("NP", (nn,)), Tree("VP", (v,)))))
        elif k == 1:
            out.append(Tree("S", (Tree("NP", (nn,)), Tree("VP", (Tree("NP", (rng.choice(nouns),)), v)))))
        else:
            out.append(Tree("S", (Tree("PP", (nn, "ga")), Tree("VP", (v,)))))
    return out


def test_criterion_09_f1(capsys):
    with criterion(capsys, 9, "F1 on unambiguous toy sentences") as d:
        gold, pred = parse_tree("(S (A a) (B b))"), parse_tree("(S (B a) (A b))")
        r = labeled_f1(gold, pred)
        assert abs(r.f1 - 1 / 3) < 1e-12 and abs(r.precision - 1 / 3) < 1e-12
        r = labeled_f1(parse_tree("(S (X (Y a b) c) d)"), parse_tree("(S a b c d)"))
        assert abs(r.recall - 1 / 3) < 1e-12 and r.precision == 1.0
        rng = random.Random(9)
        trees = _toy_treebank(rng, 300)
        bpe = train_bpe([t.leaves() for t in trees], vocab_size=40)
        ids = {p: i for i, p in enumerate(bpe.vocab)}
        distinct = {str(t): t for t in trees}
        for s in (TD, LC):
            m = Rnng(bpe.size, ["NP", "PP", "S", "VP"], s, dim=16, num_layers=1, dropout=0.0)
            data = [tree_to_actions(encode_tree(bpe, t), s, vocab=ids) for t in trees]
            train(m, data, TrainConfig.for_model("rnng", lr=0.01, epochs=15, batch_size=16), seed=3)
            m.limits = Limits(max_open=3, max_actions=16, max_structural=3)
            pairs = []
            for t in distinct.values():
                g = encode_tree(bpe, t)
                res = word_sync_search(m, [ids[w] for w in g.leaves()], BeamConfig(1000))
                pairs.append((g, best_parse(res, vocab=bpe.vocab)))
            rep = corpus_f1(pairs)
            assert rep.f1 == 1.0, rep.to_json()
            d[s.value] = f"F1={rep.f1} over {len(pairs)} sentences"


def test_criterion_10_determinism(capsys, e2e, tmp_path):
    with criterion(capsys, 10, "byte-identical reruns") as d:
        root, _ = e2e
        again = tmp_path / "synth"
        assert main(["synth", "--out", str(again), *E2E_SYNTH]) == 0
        for name in ("treebank.txt", "reading.csv", "freq.tsv", "reading_trees.txt", "reference_lc.ckpt"):
            assert filecmp.cmp(root / name, again / name, shallow=False), name
        work = tmp_path / "rerun"
        shutil.copytree(root / "run", work)
        for stage in ("regress", "stats", "report"):
            shutil.rmtree(work / stage)
        cell = work / "cells" / "LC" / "seed1" / "beam100"
        shutil.rmtree(cell)
        shutil.rmtree(work / "models" / "TD" / "seed2")
        cfg = str(root / "experiment.cfg")
        assert main(["train", "-c", cfg, "--out-dir", str(work), *E2E_RUN, "--model", "TD", "--seed", "2"]) == 0
        assert main(["surprisal", "-c", cfg, "--out-dir", str(work), *E2E_RUN, "--model", "LC", "--seed", "1",
                     "--beam", "100"]) == 0
        assert main(["parse", "-c", cfg, "--out-dir", str(work), *E2E_RUN, "--model", "LC", "--seed", "1",
                     "--beam", "100"]) == 0
        for stage in ("regress", "stats", "report"):
            assert main([stage, "-c", cfg, "--out-dir", str(work), *E2E_RUN]) == 0
        files = sorted(str(p.relative_to(root / "run")) for p in (root / "run").rglob("*") if p.is_file())
        assert files == sorted(str(p.relative_to(work)) for p in work.rglob("*") if p.is_file())
        _, mismatch, errors = filecmp.cmpfiles(root / "run", work, files, shallow=False)
        assert not mismatch and not errors, mismatch
        d["files_compared"] = len(files) + 5
