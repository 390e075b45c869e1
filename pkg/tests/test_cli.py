import filecmp
import json
import shutil
from pathlib import Path

import pytest

from parsestrat import pipeline as pl
from parsestrat.cli import main

FIXTURES = Path(__file__).parent / "fixtures" / "smoke"
TINY = ["--set", "epochs=1", "--set", "dim=8", "--set", "num_layers=1", "--set", "eval_sentences=3",
        "--seeds", "1,2", "--beams", "10"]


def synth(out, *extra):
    return main(["synth", "--out", str(out), "--sentences", "120", "--seed", "2", "--articles", "2",
                 "--subjects", "4", "--vocab-size", "60", *extra])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    assert synth(root / "data") == 0
    assert main(["run", "-c", str(root / "data" / "experiment.cfg"), "--out-dir", str(root / "run"), *TINY]) == 0
    return root


def tree_files(root: Path) -> list[str]:
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["no-such-command"])
    assert err.value.code == 2
    cfg = tmp_path / "c.cfg"
    cfg.write_text("beams = 5\n")
    assert main(["stats", "-c", str(cfg)]) == 2
    cfg.write_text("colour = blue\n")
    assert main(["stats", "-c", str(cfg)]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_missing_input_exits_3(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("treebank = nowhere.txt\nrt_table = nowhere.csv\nfrequency_table = f.tsv\n")
    assert main(["train", "-c", str(cfg)]) == 3


def test_config_file_parsing(tmp_path):
    for name in ("tb.txt", "rt.csv", "f.tsv"):
        (tmp_path / name).write_text("")
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("[paths]\ntreebank = tb.txt\nrt_table = rt.csv\nfrequency_table = f.tsv\n"
                   "[grid]\nbeams = [100, 400]  # two sizes\nseeds = 4, 5\nmodels = LC, TD\n"
                   "select_predictors = no\nrnng_lr = 0.01\n")
    c = pl.ExperimentConfig.from_file(cfg, {"epochs": "3"}).validate()
    assert c.beams == (100, 400) and c.seeds == (4, 5) and c.models == ("LC", "TD")
    assert c.select_predictors is False and c.rnng_lr == 0.01 and c.epochs == 3
    assert Path(c.treebank) == tmp_path / "tb.txt"
    assert c.train_config("LC").lr == 0.01 and c.train_config("LSTM").optimizer == "sgd"


def test_synth_byte_identical(tmp_path):
    assert synth(tmp_path / "a") == 0 and synth(tmp_path / "b") == 0
    names = tree_files(tmp_path / "a")
    assert names == tree_files(tmp_path / "b")
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors


def test_run_writes_bundle_and_plots(tiny_run):
    rep = tiny_run / "run" / "report"
    bundle = json.loads((rep / "bundle.json").read_text())
    assert bundle["schema_version"] == pl.SCHEMA_VERSION
    models = {r["model"] for r in bundle["stats"]["summary"]}
    assert models == {"LSTM", "TD", "LC"}
    for r in bundle["stats"]["summary"]:
        assert r["seeds"] == 2 and r["delta_d_sd"] >= 0
    svg = (rep / "delta_d_vs_perplexity.svg").read_text()
    assert svg.startswith("<svg") and "perplexity" in svg and "predictive power" in svg
    assert "parsing accuracy" in (rep / "delta_d_vs_f1.svg").read_text()
    twin = (rep / "delta_d_vs_f1.csv").read_text().splitlines()
    assert twin[0] == "model,label,x,x_sd,y,y_sd" and len(twin) == 3
    comp = (tiny_run / "run" / "regress" / "seed1" / "comparison.csv").read_text().splitlines()
    assert len(comp) == 10
    grid = (tiny_run / "run" / "stats" / "beam_stats.csv").read_text().splitlines()
    assert grid[0] == "model,threshold,word_beam,mean,sd" and len(grid) == 5


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    assert main(["run", "-c", str(tiny_run / "data" / "experiment.cfg"), "--out-dir", str(tmp_path), *TINY]) == 0
    names = tree_files(tiny_run / "run")
    assert names == tree_files(tmp_path)
    _, mismatch, errors = filecmp.cmpfiles(tiny_run / "run", tmp_path, names, shallow=False)
    assert not mismatch and not errors


def test_single_seed_retrain_is_byte_identical(tiny_run, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(tiny_run / "run", out)
    shutil.rmtree(out / "models" / "TD" / "seed2")
    assert main(["train", "-c", str(tiny_run / "data" / "experiment.cfg"), "--out-dir", str(out),
                 "--model", "TD", "--seed", "2", *TINY]) == 0
    sub = Path("models") / "TD" / "seed2"
    names = tree_files(tiny_run / "run" / sub)
    _, mismatch, errors = filecmp.cmpfiles(tiny_run / "run" / sub, out / sub, names, shallow=False)
    assert not mismatch and not errors, mismatch


def test_resume_skips_finished_cells(tiny_run, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(tiny_run / "run", out)
    ckpt = out / "models" / "LC" / "seed1" / "model.ckpt"
    before = ckpt.stat().st_mtime_ns
    (out / "cells" / "LC" / "seed1" / "beam10" / "surprisal.json").unlink()
    assert main(["surprisal", "-c", str(tiny_run / "data" / "experiment.cfg"), "--out-dir", str(out),
                 "--model", "LC", "--seed", "1", "--beam", "10", *TINY[:8]]) == 0
    assert ckpt.stat().st_mtime_ns == before
    assert filecmp.cmp(out / "cells" / "LC" / "seed1" / "beam10" / "surprisal.json",
                       tiny_run / "run" / "cells" / "LC" / "seed1" / "beam10" / "surprisal.json", shallow=False)


def test_report_refuses_other_schema(tiny_run, tmp_path):
    bundle = json.loads((tiny_run / "run" / "report" / "bundle.json").read_text())
    bundle["schema_version"] = pl.SCHEMA_VERSION + 1
    path = tmp_path / "bundle.json"
    path.write_text(json.dumps(bundle))
    assert main(["report", "--bundle", str(path)]) == 3
    bundle["schema_version"] = pl.SCHEMA_VERSION
    path.write_text(json.dumps(bundle))
    assert main(["report", "--bundle", str(path), "--render-dir", str(tmp_path / "fig")]) == 0
    assert (tmp_path / "fig" / "delta_d_vs_f1.svg").exists()


def test_stage_needs_previous_outputs(tiny_run, tmp_path):
    cfg = tiny_run / "data" / "experiment.cfg"
    assert main(["regress", "-c", str(cfg), "--out-dir", str(tmp_path)]) == 3


def test_split_at_gen():
    from parsestrat.oracle import Action, GEN, OPEN, REDUCE
    acts = [Action(GEN, 1), Action(OPEN, "X"), Action(GEN, 2), Action(REDUCE)]
    assert pl.split_at_gen([1.0, 2.0, 3.0, 0.5], acts) == [1.0, 5.5]


def test_regress_reproduces_smoke_fixture(tmp_path):
    work = tmp_path / "smoke"
    shutil.copytree(FIXTURES, work)
    assert main(["regress", "-c", str(work / "experiment.cfg")]) == 0
    got = pl.read_delta_d(work / "run" / "regress" / "delta_d.csv")
    want = pl.read_delta_d(work / "expected_delta_d.csv")
    assert got.keys() == want.keys()
    for k in want:
        assert got[k] == pytest.approx(want[k], abs=1e-6)


def test_regress_with_spillover(tmp_path):
    work = tmp_path / "smoke"
    shutil.copytree(FIXTURES, work)
    assert main(["regress", "-c", str(work / "experiment.cfg"), "--set", "spillover=yes"]) == 0
    summary = json.loads((work / "run" / "regress" / "summary.json").read_text())
    rows = summary["seeds"]["1"]["comparisons"]
    assert {r["df"] for r in rows} == {2}


def test_reference_uses_experiment_split(monkeypatch):
    seen = {}

    class Stop(Exception):
        pass

    def fake(trees, sources, *rest):
        seen["sources"] = sources
        raise Stop

    monkeypatch.setattr(pl, "build_corpus", fake)
    fn = pl.reference_lc_surprisal(pl.ReferenceConfig())
    with pytest.raises(Stop):
        fn(["t1", "t2"], ["src00", "src01"], [], [])
    assert seen["sources"] == ["src00", "src01"]
