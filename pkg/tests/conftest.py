import random

import pytest
import torch

from parsestrat.treebank import Tree

torch.set_default_dtype(torch.float64)

LABELS = ["S", "NP", "VP", "PP", "X"]
WORDS = ["a", "b", "c", "d", "e", "f", "ga", "no", "wo"]


def random_tree(rng: random.Random, max_depth: int = 5, max_kids: int = 3) -> Tree:
    def build(depth):
        n = rng.randint(1, max_kids)
        kids = []
        for _ in range(n):
            if depth < max_depth and rng.random() < 0.4:
                kids.append(build(depth + 1))
            else:
                kids.append(rng.choice(WORDS))
        return Tree(rng.choice(LABELS), tuple(kids))

    return build(1)


def left_branching(depth: int, label: str = "X") -> Tree:
    """(X (X ... (X w0 w1) w2) ...) with ``depth`` internal nodes."""
    tree = Tree(label, ("w0", "w1"))
    for i in range(2, depth + 1):
        tree = Tree(label, (tree, f"w{i}"))
    return tree


@pytest.fixture
def rng():
    return random.Random(1234)
