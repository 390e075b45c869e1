"""Bracketed constituency treebanks: parsing, normalization, splitting, I/O."""

from __future__ import annotations

import configparser
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union


class TreebankError(ValueError):
    pass


class UnbalancedBrackets(TreebankError):
    def __init__(self, line: int, detail: str = ""):
        super().__init__(f"line {line}: unbalanced brackets{': ' + detail if detail else ''}")
        self.line = line


class EmptyLabel(TreebankError):
    def __init__(self, line: int):
        super().__init__(f"line {line}: constituent without a label")
        self.line = line


class NormalizedToEmpty(TreebankError):
    pass


@dataclass(frozen=True)
class Tree:
    """Labeled constituency tree; leaves are plain strings."""

    label: str
    children: tuple[Union["Tree", str], ...]

    def __post_init__(self):
        if not self.label:
            raise ValueError("empty label")
        if not self.children:
            raise ValueError(f"node {self.label!r} has no children")
        object.__setattr__(self, "children", tuple(self.children))

    def __str__(self) -> str:
        return serialize(self)

    def leaves(self) -> list[str]:
        return yield_terminals(self)

    def internal_count(self) -> int:
        return 1 + sum(c.internal_count() for c in self.children if isinstance(c, Tree))

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children if isinstance(c, Tree)), default=0)


Node = Union[Tree, str]


@dataclass(frozen=True)
class NormalizationConfig:
    tag_delimiter: str = "-"
    trace_tokens: frozenset[str] = frozenset({"*T*", "*pro*", "*"})

    @classmethod
    def from_config(cls, path_or_parser, section: str = "normalize") -> "NormalizationConfig":
        if isinstance(path_or_parser, configparser.ConfigParser):
            parser = path_or_parser
        else:
            parser = configparser.ConfigParser()
            parser.read(path_or_parser, encoding="utf-8")
        if not parser.has_section(section):
            return cls()
        sec = parser[section]
        delim = sec.get("tag_delimiter", cls.tag_delimiter)
        traces = sec.get("trace_tokens")
        tokens = frozenset(traces.split()) if traces is not None else cls.trace_tokens
        return cls(tag_delimiter=delim, trace_tokens=tokens)


@dataclass
class CorpusSplit:
    train: list[Tree] = field(default_factory=list)
    validation: list[Tree] = field(default_factory=list)
    test: list[Tree] = field(default_factory=list)
    train_sources: list[str] = field(default_factory=list)
    validation_sources: list[str] = field(default_factory=list)
    test_sources: list[str] = field(default_factory=list)

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


def _tokenize(line: str) -> list[str]:
    return line.replace("(", " ( ").replace(")", " ) ").split()


def _parse_line(line: str, lineno: int) -> Tree:
    tokens = _tokenize(line)
    if not tokens or tokens[0] != "(":
        raise UnbalancedBrackets(lineno, "tree must start with '('")
    pos = 0

    def parse_node() -> Tree:
        nonlocal pos
        pos += 1  # consume "("
        if pos >= len(tokens):
            raise UnbalancedBrackets(lineno)
        label = tokens[pos]
        if label in ("(", ")"):
            raise EmptyLabel(lineno)
        pos += 1
        children: list[Node] = []
        while True:
            if pos >= len(tokens):
                raise UnbalancedBrackets(lineno, f"unclosed constituent {label!r}")
            tok = tokens[pos]
            if tok == ")":
                pos += 1
                break
            if tok == "(":
                children.append(parse_node())
            else:
                children.append(tok)
                pos += 1
        if not children:
            raise UnbalancedBrackets(lineno, f"constituent {label!r} has no children")
        return Tree(label, tuple(children))

    tree = parse_node()
    if pos != len(tokens):
        raise UnbalancedBrackets(lineno, "trailing material after tree")
    return tree


def parse_bracketed(text: str) -> list[Tree]:
    """Parse one Penn-style tree per non-blank line."""
    trees = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            trees.append(_parse_line(line, lineno))
    return trees


def parse_tree(text: str) -> Tree:
    return _parse_line(text, 1)


def serialize(tree: Tree) -> str:
    parts = []
    for child in tree.children:
        parts.append(serialize(child) if isinstance(child, Tree) else child)
    return f"({tree.label} {' '.join(parts)})"


def yield_terminals(tree: Node) -> list[str]:
    out: list[str] = []
    stack: list[Node] = [tree]
    while stack:
        node = stack.pop()
        if isinstance(node, Tree):
            stack.extend(reversed(node.children))
        else:
            out.append(node)
    return out


def strip_function_tag(label: str, delimiter: str = "-") -> str:
    # labels that start with the delimiter (e.g. -NONE-) are kept verbatim
    if not delimiter or label.startswith(delimiter):
        return label
    head = label.split(delimiter, 1)[0]
    return head or label


def normalize(tree: Tree, rules: NormalizationConfig | None = None) -> Tree:
    """Delete trace leaves (and nodes left empty by that) and strip function tags."""
    rules = rules or NormalizationConfig()

    def walk(node: Tree) -> Tree | None:
        kids: list[Node] = []
        for child in node.children:
            if isinstance(child, Tree):
                sub = walk(child)
                if sub is not None:
                    kids.append(sub)
            elif child not in rules.trace_tokens:
                kids.append(child)
        if not kids:
            return None
        return Tree(strip_function_tag(node.label, rules.tag_delimiter), tuple(kids))

    out = walk(tree)
    if out is None:
        raise NormalizedToEmpty(f"tree {serialize(tree)} has an empty yield after normalization")
    return out


def split_corpus(
    trees: Sequence[Tree],
    seed: int,
    sources: Sequence[str] | None = None,
    ratios: tuple[float, float, float] = (0.9, 0.05, 0.05),
) -> CorpusSplit:
    """Per-source train/validation/test split.

    Validation and test sizes are floored per source; every remaining
    sentence goes to train. Within a partition the corpus order is kept.
    """
    if sources is None:
        sources = ["0"] * len(trees)
    if len(sources) != len(trees):
        raise ValueError("one source id per tree required")
    by_source: dict[str, list[int]] = defaultdict(list)
    for i, src in enumerate(sources):
        by_source[src].append(i)

    assignment = ["train"] * len(trees)
    for src in sorted(by_source):
        idx = list(by_source[src])
        rng = random.Random(f"{seed}:{src}")
        rng.shuffle(idx)
        n = len(idx)
        n_val = math.floor(n * ratios[1] + 1e-9)
        n_test = math.floor(n * ratios[2] + 1e-9)
        for i in idx[:n_val]:
            assignment[i] = "validation"
        for i in idx[n_val:n_val + n_test]:
            assignment[i] = "test"

    split = CorpusSplit()
    for i, part in enumerate(assignment):
        getattr(split, part).append(trees[i])
        getattr(split, f"{part}_sources").append(sources[i])
    return split


def read_treebank(path) -> tuple[list[Tree], list[str]]:
    """Read a treebank file; lines may carry a ``source<TAB>`` prefix."""
    trees, sources = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            src = "0"
            if "\t" in line:
                src, line = line.split("\t", 1)
            trees.append(_parse_line(line, lineno))
            sources.append(src.strip())
    return trees, sources


def write_treebank(path, trees: Iterable[Tree], sources: Iterable[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if sources is None:
            for t in trees:
                fh.write(serialize(t) + "\n")
        else:
            for t, s in zip(trees, sources):
                fh.write(f"{s}\t{serialize(t)}\n")
