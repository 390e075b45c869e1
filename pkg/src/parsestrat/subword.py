"""Byte-pair-encoding subwords shared by every language model.

Merges never cross a terminal boundary: each terminal is encoded on its own,
so a reading-time segment maps onto a contiguous run of subwords.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

UNK = "<unk>"
FORMAT_VERSION = 1


class SubwordError(ValueError):
    pass


class VocabTooSmall(SubwordError):
    pass


class IdOutOfRange(SubwordError):
    pass


@dataclass(frozen=True)
class Encoding:
    ids: tuple[int, ...]
    has_unk: bool


@dataclass
class BpeModel:
    vocab: list[str]
    merges: list[tuple[str, str]]
    character_coverage: float = 0.9995
    unk_id: int = 0
    _index: dict[str, int] = field(init=False, repr=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _cache: dict[str, Encoding] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {piece: i for i, piece in enumerate(self.vocab)}
        if len(self._index) != len(self.vocab):
            raise SubwordError("duplicate vocabulary entries")
        if not 0 <= self.unk_id < len(self.vocab):
            raise SubwordError("unk_id out of range")
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache = {}

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def size(self) -> int:
        return len(self.vocab)

    def piece_to_id(self, piece: str) -> int:
        return self._index.get(piece, self.unk_id)

    def id_to_piece(self, i: int) -> str:
        if not 0 <= i < len(self.vocab):
            raise IdOutOfRange(f"id {i} outside [0, {len(self.vocab)})")
        return self.vocab[i]

    def encode(self, word: str) -> Encoding:
        return encode(self, word)

    def segment(self, word: str) -> list[str]:
        return [self.vocab[i] for i in encode(self, word).ids]

    def decode(self, ids: Sequence[int]) -> str:
        return decode(self, ids)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"#bpe v{FORMAT_VERSION} coverage={self.character_coverage!r} unk_id={self.unk_id}\n")
            fh.write(f"vocab {len(self.vocab)}\n")
            for piece in self.vocab:
                fh.write(_escape(piece) + "\n")
            fh.write(f"merges {len(self.merges)}\n")
            for a, b in self.merges:
                fh.write(f"{_escape(a)} {_escape(b)}\n")

    @classmethod
    def load(cls, path) -> "BpeModel":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        header = lines[0].split()
        if header[:2] != ["#bpe", f"v{FORMAT_VERSION}"]:
            raise SubwordError(f"unsupported model header {lines[0]!r}")
        meta = dict(kv.split("=", 1) for kv in header[2:])
        n_vocab = int(lines[1].split()[1])
        vocab = [_unescape(x) for x in lines[2:2 + n_vocab]]
        pos = 2 + n_vocab
        n_merges = int(lines[pos].split()[1])
        merges = []
        for line in lines[pos + 1:pos + 1 + n_merges]:
            a, b = line.split(" ")
            merges.append((_unescape(a), _unescape(b)))
        return cls(vocab, merges, float(meta["coverage"]), int(meta["unk_id"]))


def _escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace(" ", "\\s").replace("\n", "\\n")


def _unescape(s: str) -> str:
    out, i = [], 0
    while i < len(s):
        if s[i] == "\\" and i + 1 < len(s):
            out.append({"\\": "\\", "s": " ", "n": "\n"}[s[i + 1]])
            i += 2
        else:
            out.append(s[i])
            i += 1
    return "".join(out)


def covered_characters(char_counts: Counter, coverage: float) -> list[str]:
    """Most frequent characters whose cumulative share reaches ``coverage``."""
    total = sum(char_counts.values())
    ordered = sorted(char_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept, running = [], 0
    for ch, n in ordered:
        if kept and running >= coverage * total:
            break
        kept.append(ch)
        running += n
    return kept


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    a, b = pair
    out, i = [], 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def train_bpe(
    sentences: Iterable[Sequence[str]],
    vocab_size: int = 8000,
    coverage: float = 0.9995,
) -> BpeModel:
    """Greedy most-frequent-pair merging over terminal types.

    ``vocab_size`` counts the unknown piece. Equal-count pairs are broken
    lexicographically. Training stops early when no pair is left to merge.
    """
    word_counts: Counter = Counter()
    for sent in sentences:
        word_counts.update(sent)
    if not word_counts:
        raise SubwordError("empty corpus")
    char_counts: Counter = Counter()
    for w, n in word_counts.items():
        for ch in w:
            char_counts[ch] += n
    chars = sorted(covered_characters(char_counts, coverage))
    if len(chars) + 1 > vocab_size:
        raise VocabTooSmall(f"{len(chars)} characters plus unk exceed vocab_size={vocab_size}")

    vocab = [UNK] + chars
    known = set(vocab)
    charset = set(chars)
    words = {
        tuple(ch if ch in charset else UNK for ch in w): 0 for w in word_counts
    }
    for w, n in word_counts.items():
        words[tuple(ch if ch in charset else UNK for ch in w)] += n

    merges: list[tuple[str, str]] = []
    while len(vocab) < vocab_size:
        pairs: Counter = Counter()
        for symbols, n in words.items():
            for a, b in zip(symbols, symbols[1:]):
                if a != UNK and b != UNK and a + b != UNK:
                    pairs[a, b] += n
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        merged = best[0] + best[1]
        if merged not in known:
            known.add(merged)
            vocab.append(merged)
        new_words: dict[tuple[str, ...], int] = {}
        for symbols, n in words.items():
            key = _merge_word(symbols, best) if best[0] in symbols else symbols
            new_words[key] = new_words.get(key, 0) + n
        words = new_words
    return BpeModel(vocab, merges, coverage, 0)


def encode(model: BpeModel, word: str) -> Encoding:
    """Apply merges by rank; uncovered characters become the unknown id."""
    hit = model._cache.get(word)
    if hit is not None:
        return hit
    symbols = [ch if ch in model._index else UNK for ch in word]
    ranks = model._ranks
    while len(symbols) > 1:
        best_rank, best_pos = None, -1
        for i in range(len(symbols) - 1):
            r = ranks.get((symbols[i], symbols[i + 1]))
            if r is not None and (best_rank is None or r < best_rank):
                best_rank, best_pos = r, i
        if best_rank is None:
            break
        symbols = list(_merge_word(tuple(symbols), model.merges[best_rank]))
    ids = tuple(model._index[s] for s in symbols)
    enc = Encoding(ids, model.unk_id in ids)
    model._cache[word] = enc
    return enc


def decode(model: BpeModel, ids: Sequence[int]) -> str:
    return "".join(model.id_to_piece(int(i)) for i in ids)


def encode_sentence(model: BpeModel, words: Sequence[str]) -> tuple[list[int], list[int], list[bool]]:
    """Encode terminals; returns flat ids, per-terminal subword counts, per-terminal unk flags."""
    ids, lengths, unks = [], [], []
    for w in words:
        enc = encode(model, w)
        ids.extend(enc.ids)
        lengths.append(len(enc.ids))
        unks.append(enc.has_unk)
    return ids, lengths, unks


def encode_tree(model: BpeModel, tree):
    """Replace every terminal by its subword pieces (siblings under the same parent)."""
    from .treebank import Tree

    def walk(node: Tree) -> Tree:
        kids = []
        for child in node.children:
            if isinstance(child, Tree):
                kids.append(walk(child))
            else:
                kids.extend(model.vocab[i] for i in encode(model, child).ids)
        return Tree(node.label, tuple(kids))

    return walk(tree)
