"""Regenerate the frozen smoke fixtures used by the ``regress`` test.

Usage: python tests/fixtures/build_smoke.py

Runs a tiny synthetic experiment, keeps only what the regression stage reads
(reading times, frequencies, per-cell segment surprisals) and stores the
resulting ΔD table as ``expected_delta_d.csv``.
"""

import shutil
import tempfile
from pathlib import Path

import torch

from parsestrat.cli import main

HERE = Path(__file__).parent / "smoke"
ARGS = ["--set", "epochs=1", "--set", "dim=8", "--set", "num_layers=1", "--set", "eval_sentences=2",
        "--seeds", "1", "--beams", "10"]


def build() -> None:
    torch.set_default_dtype(torch.float64)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        assert main(["synth", "--out", str(tmp), "--sentences", "100", "--seed", "9", "--articles", "2",
                     "--subjects", "4", "--vocab-size", "60"]) == 0
        assert main(["run", "-c", str(tmp / "experiment.cfg"), *ARGS]) == 0
        if HERE.exists():
            shutil.rmtree(HERE)
        HERE.mkdir(parents=True)
        for name in ("treebank.txt", "reading.csv", "freq.tsv"):
            shutil.copy(tmp / name, HERE / name)
        for seg in sorted((tmp / "run" / "cells").rglob("segments.csv")):
            dest = HERE / "run" / seg.relative_to(tmp / "run")
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copy(seg, dest)
        shutil.copy(tmp / "run" / "regress" / "delta_d.csv", HERE / "expected_delta_d.csv")
        (HERE / "experiment.cfg").write_text(
            "treebank = treebank.txt\nrt_table = reading.csv\nfrequency_table = freq.tsv\nout_dir = run\n"
            "seeds = 1\nbeams = 10\n", encoding="utf-8")


if __name__ == "__main__":
    build()
