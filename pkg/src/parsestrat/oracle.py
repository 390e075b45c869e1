"""Generative transition systems: top-down and arc-standard left-corner.

Both strategies share the OPEN(X) / GEN(w) / REDUCE inventory and a stack of
frames. An open frame is a nonterminal still collecting children; a done
frame is a terminal or a finished constituent. Top-down OPEN pushes a new
open frame; left-corner OPEN lifts the finished top-of-stack subtree under a
new open parent (it becomes that parent's first child).
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence, Union

from .treebank import Tree

OPEN = "OPEN"
GEN = "GEN"
REDUCE = "REDUCE"


class Strategy(str, enum.Enum):
    TOP_DOWN = "top_down"
    LEFT_CORNER = "left_corner"

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        key = name.lower().replace("-", "_")
        aliases = {"td": cls.TOP_DOWN, "lc": cls.LEFT_CORNER}
        return aliases.get(key) or cls(key)

    @property
    def short(self) -> str:
        return "TD" if self is Strategy.TOP_DOWN else "LC"


class IllFormed(ValueError):
    def __init__(self, position: int, reason: str):
        super().__init__(f"ill-formed action sequence at {position}: {reason}")
        self.position = position
        self.reason = reason


class Action(NamedTuple):
    kind: str
    arg: Union[str, int, None] = None

    def __str__(self) -> str:
        if self.kind == OPEN:
            return f"NT({self.arg})"
        if self.kind == GEN:
            return f"GEN({self.arg})"
        return "REDUCE"


def Open(label: str) -> Action:
    return Action(OPEN, label)


def Gen(word) -> Action:
    return Action(GEN, word)


Reduce = Action(REDUCE)


@dataclass(frozen=True)
class ActionSequence:
    strategy: Strategy
    actions: tuple[Action, ...]

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def dump(self) -> str:
        return " ".join(str(a) for a in self.actions)


_ACTION_RE = re.compile(r"^(?:NT\((?P<nt>.+)\)|GEN\((?P<gen>.+)\)|(?P<red>REDUCE))$")


def parse_actions(line: str, strategy: Strategy, int_words: bool = True) -> ActionSequence:
    """Inverse of :meth:`ActionSequence.dump`."""
    acts = []
    for tok in line.split():
        m = _ACTION_RE.match(tok)
        if m is None:
            raise ValueError(f"bad action token {tok!r}")
        if m.group("nt") is not None:
            acts.append(Open(m.group("nt")))
        elif m.group("gen") is not None:
            w = m.group("gen")
            acts.append(Gen(int(w) if int_words else w))
        else:
            acts.append(Reduce)
    return ActionSequence(strategy, tuple(acts))


@dataclass(frozen=True)
class Limits:
    max_open: int = 100
    max_actions: int = 800
    # consecutive OPEN/REDUCE actions allowed between two GENs (and after the last)
    max_structural: int = 40


UNLIMITED = Limits(10**9, 10**9, 10**9)


@dataclass(frozen=True)
class Frame:
    is_open: bool
    label: str | None = None
    node: Union[Tree, str, int, None] = None


@dataclass(frozen=True)
class State:
    """Symbolic partial derivation."""

    stack: tuple[Frame, ...] = ()
    n_open: int = 0
    n_words: int = 0
    n_actions: int = 0
    structural_run: int = 0

    @property
    def top_done(self) -> bool:
        return bool(self.stack) and not self.stack[-1].is_open

    def is_complete(self) -> bool:
        return len(self.stack) == 1 and self.n_open == 0 and isinstance(self.stack[0].node, Tree)


INITIAL = State()


def legal_actions(
    state: State,
    strategy: Strategy,
    limits: Limits = Limits(),
    words_remaining: int | None = None,
) -> frozenset[str]:
    """Action kinds allowed in ``state``.

    Without ``words_remaining`` this is the generative action set used to
    normalize model probabilities. With it, transitions that can no longer
    lead to a complete derivation of exactly that many further words are
    removed as well (used by search to prune, never to renormalize).
    """
    if state.n_actions >= limits.max_actions:
        return frozenset()
    structural_ok = state.structural_run < limits.max_structural
    can_open_more = state.n_open < limits.max_open
    kinds = set()
    if strategy is Strategy.TOP_DOWN:
        if not state.stack:
            return frozenset({OPEN}) if state.n_actions == 0 and structural_ok and can_open_more else frozenset()
        if state.n_open == 0:
            return frozenset()
        kinds.add(GEN)
        if structural_ok and can_open_more:
            kinds.add(OPEN)
        if structural_ok and state.top_done:
            kinds.add(REDUCE)
    else:
        if not state.stack:
            return frozenset({GEN}) if state.n_actions == 0 else frozenset()
        if state.n_open > 0:
            kinds.add(GEN)
            if structural_ok and state.top_done:
                kinds.add(REDUCE)
        # a just-lifted left corner cannot be lifted again: that would only
        # reach trees whose own derivation opens the inner parent first
        lifted = len(state.stack) >= 2 and state.stack[-2].is_open
        if structural_ok and can_open_more and state.top_done and not lifted:
            kinds.add(OPEN)

    if words_remaining is not None:
        if words_remaining <= 0:
            kinds.discard(GEN)
            if strategy is Strategy.TOP_DOWN:
                kinds.discard(OPEN)
            elif state.is_complete():
                # a lone finished constituent at the end of input is final
                kinds.clear()
        elif strategy is Strategy.TOP_DOWN and state.n_open == 1:
            kinds.discard(REDUCE)
    return frozenset(kinds)


def _apply(state: State, action: Action) -> State:
    # GEN, REDUCE and top-down OPEN; no legality checks
    kind = action.kind
    if kind == GEN:
        return State(
            state.stack + (Frame(False, None, action.arg),),
            state.n_open, state.n_words + 1, state.n_actions + 1, 0,
        )
    if kind == OPEN:
        return State(
            state.stack + (Frame(True, action.arg),),
            state.n_open + 1, state.n_words, state.n_actions + 1, state.structural_run + 1,
        )
    if kind == REDUCE:
        stack = list(state.stack)
        children = []
        while stack and not stack[-1].is_open:
            children.append(stack.pop().node)
        if not stack:
            raise IllFormed(state.n_actions, "REDUCE without an open constituent")
        parent = stack.pop()
        if not children:
            raise IllFormed(state.n_actions, "REDUCE of a constituent without children")
        children.reverse()
        stack.append(Frame(False, parent.label, Tree(parent.label, tuple(children))))
        return State(tuple(stack), state.n_open - 1, state.n_words, state.n_actions + 1,
                     state.structural_run + 1)
    raise ValueError(f"unknown action kind {kind!r}")


def step(state: State, action: Action, strategy: Strategy) -> State:
    """Apply ``action`` under ``strategy`` (no legality check)."""
    if action.kind == OPEN and strategy is Strategy.LEFT_CORNER:
        top = state.stack[-1]
        return State(
            state.stack[:-1] + (Frame(True, action.arg), top),
            state.n_open + 1, state.n_words, state.n_actions + 1, state.structural_run + 1,
        )
    return _apply(state, action)


def tree_to_actions(
    tree: Tree,
    strategy: Strategy,
    vocab: Mapping[str, int] | None = None,
    unk_id: int | None = None,
) -> ActionSequence:
    """Oracle derivation of ``tree``; ``vocab`` maps terminals to GEN ids."""
    out: list[Action] = []

    def word(leaf):
        if vocab is None:
            return leaf
        if leaf in vocab:
            return vocab[leaf]
        if unk_id is None:
            raise KeyError(f"terminal {leaf!r} not in vocabulary")
        return unk_id

    def visit(node):
        if not isinstance(node, Tree):
            out.append(Gen(word(node)))
            return
        if strategy is Strategy.TOP_DOWN:
            out.append(Open(node.label))
            for child in node.children:
                visit(child)
        else:
            visit(node.children[0])
            out.append(Open(node.label))
            for child in node.children[1:]:
                visit(child)
        out.append(Reduce)

    visit(tree)
    return ActionSequence(strategy, tuple(out))


def actions_to_tree(
    seq: ActionSequence | Sequence[Action],
    strategy: Strategy | None = None,
    vocab: Sequence[str] | None = None,
) -> Tree:
    """Decode a derivation; ``vocab`` maps GEN ids back to terminal strings."""
    if isinstance(seq, ActionSequence):
        strategy = strategy or seq.strategy
        actions = seq.actions
    else:
        actions = tuple(seq)
    if strategy is None:
        raise ValueError("strategy required")
    state = INITIAL
    for pos, action in enumerate(actions):
        if action.kind not in legal_actions(state, strategy, UNLIMITED):
            raise IllFormed(pos, f"{action} not allowed here")
        if action.kind == GEN and vocab is not None:
            action = Gen(vocab[int(action.arg)])
        state = step(state, action, strategy)
    if not state.is_complete():
        raise IllFormed(len(actions), "derivation does not end in a single finished tree")
    return state.stack[0].node


def first_touch_order(seq: ActionSequence) -> list:
    """Items in the order their node is first built: OPEN labels and GEN words."""
    return [a.arg for a in seq.actions if a.kind != REDUCE]


def transitions(state: State, strategy: Strategy, kinds, labels: Sequence[str], word=None):
    """Expand the action kinds in ``kinds`` into concrete actions."""
    for kind in (GEN, REDUCE, OPEN):
        if kind not in kinds:
            continue
        if kind == OPEN:
            for lab in labels:
                yield Open(lab)
        elif kind == GEN:
            yield Gen(word)
        else:
            yield Reduce
