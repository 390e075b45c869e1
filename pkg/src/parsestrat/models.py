"""Sequential LSTM LM and stack-only RNNG, with their training loop.

The RNNG conditions every decision on the stack alone: each stack element
carries its embedding and the stack-LSTM state obtained by pushing it onto
the element below. Generating a word is factored into the structural GEN
decision followed by a word softmax.
"""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from . import autodiff as ad
from .autodiff import DTYPE, StackedLstm, masked_log_softmax
from .oracle import (
    GEN, INITIAL, OPEN, REDUCE, Action, ActionSequence, Limits, State, Strategy, legal_actions,
    step,
)

log = logging.getLogger(__name__)

GEN_COL, REDUCE_COL, OPEN_COL = 0, 1, 2


class ModelError(ValueError):
    pass


class IllegalActionInSequence(ModelError):
    def __init__(self, position: int, action):
        super().__init__(f"action {action} at position {position} is not legal")
        self.position = position


class EmptyCorpus(ModelError):
    pass


class IdOutOfRange(ModelError):
    pass


class LstmLm(nn.Module):
    """Two-layer LSTM over subwords with begin/end sentinels.

    Input ids ``vocab_size`` and ``vocab_size + 1`` are BOS and EOS; the
    output layer covers the subwords plus EOS.
    """

    kind = "lstm"

    def __init__(self, vocab_size: int, dim: int = 256, num_layers: int = 2, dropout: float = 0.2):
        super().__init__()
        self.vocab_size = vocab_size
        self.dim = dim
        self.num_layers = num_layers
        self.dropout = dropout
        self.bos = vocab_size
        self.eos = vocab_size + 1
        self.emb = nn.Parameter(torch.zeros(vocab_size + 2, dim, dtype=DTYPE))
        self.rnn = StackedLstm(dim, dim, num_layers, dropout)
        self.out_w = nn.Parameter(torch.zeros(vocab_size + 1, dim, dtype=DTYPE))
        self.out_b = nn.Parameter(torch.zeros(vocab_size + 1, dtype=DTYPE))
        self.generator = torch.Generator().manual_seed(0)

    @property
    def output_size(self) -> int:
        return self.vocab_size + 1

    def hyperparameters(self) -> dict:
        return {"kind": self.kind, "vocab_size": self.vocab_size, "dim": self.dim,
                "num_layers": self.num_layers, "dropout": self.dropout}

    def _target(self, i: int) -> int:
        return self.vocab_size if i == self.eos else i

    def batch_logprobs(self, batch: Sequence[Sequence[int]], eos: bool = True):
        """Per-position log p(w_i | w_<i), padded; returns (logp [B, T], mask [B, T])."""
        for ids in batch:
            for i in ids:
                if not 0 <= i < self.vocab_size:
                    raise IdOutOfRange(f"subword id {i} outside [0, {self.vocab_size})")
        seqs = [[self.bos, *ids] + ([self.eos] if eos else []) for ids in batch]
        steps = max(len(s) for s in seqs) - 1
        inp = torch.full((len(seqs), steps), self.bos, dtype=torch.long)
        tgt = torch.zeros((len(seqs), steps), dtype=torch.long)
        mask = torch.zeros((len(seqs), steps), dtype=torch.bool)
        for b, s in enumerate(seqs):
            n = len(s) - 1
            inp[b, :n] = torch.tensor(s[:-1])
            tgt[b, :n] = torch.tensor([self._target(x) for x in s[1:]])
            mask[b, :n] = True
        x = ad.dropout(F.embedding(inp, self.emb), self.dropout, self.generator, self.training)
        state = self.rnn.zero_state(len(seqs))
        outs = []
        for t in range(steps):
            state = self.rnn(x[:, t], state, self.generator)
            outs.append(state[-1][0])
        h = ad.dropout(torch.stack(outs, dim=1), self.dropout, self.generator, self.training)
        logp = torch.log_softmax(h @ self.out_w.T + self.out_b, dim=-1)
        picked = logp.gather(2, tgt.unsqueeze(-1)).squeeze(-1)
        return picked.masked_fill(~mask, 0.0), mask

    def next_distribution(self, prefix: Sequence[int]):
        """Full log-distribution over subwords+EOS after ``prefix``."""
        with torch.no_grad():
            state = self.rnn.zero_state()
            for i in [self.bos, *prefix]:
                state = self.rnn(self.emb[i], state)
            return torch.log_softmax(self.out_w @ state[-1][0] + self.out_b, dim=-1)


def lm_nll(model: LstmLm, ids: Sequence[int], eos: bool = True):
    """Surprisal (nats) at every predicted position and their sum."""
    with torch.no_grad():
        logp, mask = model.batch_logprobs([list(ids)], eos=eos)
    surprisals = [-float(x) for x in logp[0][mask[0]]]
    return surprisals, sum(surprisals)


@dataclass
class TensorEntry:
    elem: torch.Tensor
    state: tuple


class Rnng(nn.Module):
    """Stack-only RNNG shared by the top-down and left-corner strategies."""

    kind = "rnng"

    def __init__(
        self,
        vocab_size: int,
        labels: Sequence[str],
        strategy: Strategy,
        dim: int = 256,
        num_layers: int = 2,
        dropout: float = 0.3,
        limits: Limits = Limits(),
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.labels = list(labels)
        self.label_index = {lab: i for i, lab in enumerate(self.labels)}
        self.strategy = Strategy(strategy)
        self.dim = dim
        self.num_layers = num_layers
        self.dropout = dropout
        self.limits = limits
        self.n_actions = OPEN_COL + len(self.labels)
        self.word_emb = nn.Parameter(torch.zeros(vocab_size, dim, dtype=DTYPE))
        self.nt_emb = nn.Parameter(torch.zeros(len(self.labels), dim, dtype=DTYPE))
        self.bottom_emb = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.stack_rnn = StackedLstm(dim, dim, num_layers, dropout)
        self.comp_fwd = ad.LstmCell(dim, dim)
        self.comp_bwd = ad.LstmCell(dim, dim)
        self.comp_w = nn.Parameter(torch.zeros(dim, 2 * dim, dtype=DTYPE))
        self.comp_b = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.action_w = nn.Parameter(torch.zeros(self.n_actions, dim, dtype=DTYPE))
        self.action_b = nn.Parameter(torch.zeros(self.n_actions, dtype=DTYPE))
        self.word_w = nn.Parameter(torch.zeros(vocab_size, dim, dtype=DTYPE))
        self.word_b = nn.Parameter(torch.zeros(vocab_size, dtype=DTYPE))
        self.generator = torch.Generator().manual_seed(0)

    def hyperparameters(self) -> dict:
        return {"kind": self.kind, "vocab_size": self.vocab_size, "labels": self.labels,
                "strategy": self.strategy.value, "dim": self.dim, "num_layers": self.num_layers,
                "dropout": self.dropout, "limits": asdict(self.limits)}

    # -- action encoding -------------------------------------------------

    def action_column(self, action: Action) -> int:
        if action.kind == GEN:
            return GEN_COL
        if action.kind == REDUCE:
            return REDUCE_COL
        return OPEN_COL + self.label_index[action.arg]

    def column_action(self, col: int, word=None) -> Action:
        if col == GEN_COL:
            return Action(GEN, word)
        if col == REDUCE_COL:
            return Action(REDUCE)
        return Action(OPEN, self.labels[col - OPEN_COL])

    def mask_row(self, kinds) -> list[bool]:
        row = [False] * self.n_actions
        if GEN in kinds:
            row[GEN_COL] = True
        if REDUCE in kinds:
            row[REDUCE_COL] = True
        if OPEN in kinds:
            row[OPEN_COL:] = [True] * len(self.labels)
        return row

    # -- stack machinery ---------------------------------------------------

    def _drop(self, t):
        return ad.dropout(t, self.dropout, self.generator, self.training)

    def initial_stack(self) -> tuple:
        state = self.stack_rnn(self._drop(self.bottom_emb), self.stack_rnn.zero_state(), self.generator)
        return (TensorEntry(self.bottom_emb, state),)

    def compose(self, label: str, children: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.compose_batch([self.label_index[label]], [list(children)])[0]

    def compose_batch(self, label_ids: Sequence[int], children: Sequence[Sequence[torch.Tensor]]):
        """Bidirectional read of [label, c1..cn] / [label, cn..c1] -> one vector per row."""
        n = len(label_ids)
        if any(len(ch) == 0 for ch in children):
            raise ModelError("composition needs at least one child")
        nt = self._drop(self.nt_emb[torch.tensor(label_ids)])
        width = max(len(ch) for ch in children)
        zero = torch.zeros(self.dim, dtype=DTYPE)
        lens = torch.tensor([len(ch) for ch in children])
        h_f = c_f = h_b = c_b = torch.zeros(n, self.dim, dtype=DTYPE)
        h_f, c_f = self.comp_fwd(nt, (h_f, c_f))
        h_b, c_b = self.comp_bwd(nt, (h_b, c_b))
        for pos in range(width):
            live = (lens > pos).unsqueeze(-1)
            xf = torch.stack([ch[pos] if pos < len(ch) else zero for ch in children])
            xb = torch.stack([ch[len(ch) - 1 - pos] if pos < len(ch) else zero for ch in children])
            nf = self.comp_fwd(xf, (h_f, c_f))
            nb = self.comp_bwd(xb, (h_b, c_b))
            h_f, c_f = torch.where(live, nf[0], h_f), torch.where(live, nf[1], c_f)
            h_b, c_b = torch.where(live, nb[0], h_b), torch.where(live, nb[1], c_b)
        return torch.tanh(torch.cat([h_f, h_b], dim=-1) @ self.comp_w.T + self.comp_b).unbind(0)

    def _push_batch(self, elems: list, belows: list) -> list:
        if not elems:
            return []
        x = torch.stack(elems)
        state = self.stack_rnn(x, ad.stack_states(belows), self.generator)
        return ad.unstack_state(state)

    def advance_batch(self, stacks: Sequence[tuple], states: Sequence[State], actions: Sequence[Action]):
        """Apply one action per row to tensor stacks mirroring the symbolic ``states``."""
        n = len(actions)
        bases: list = [None] * n
        elems: list = [None] * n
        lifted: dict[int, torch.Tensor] = {}
        word_rows, word_ids, nt_rows, nt_ids = [], [], [], []
        red_rows, red_labels, red_children = [], [], []
        lc = self.strategy is Strategy.LEFT_CORNER
        for i, (st, sym, a) in enumerate(zip(stacks, states, actions)):
            if a.kind == GEN:
                bases[i] = st
                word_rows.append(i)
                word_ids.append(int(a.arg))
            elif a.kind == OPEN:
                if lc:
                    bases[i] = st[:-1]
                    lifted[i] = st[-1].elem
                else:
                    bases[i] = st
                nt_rows.append(i)
                nt_ids.append(self.label_index[a.arg])
            else:
                k = 0
                for fr in reversed(sym.stack):
                    if fr.is_open:
                        break
                    k += 1
                bases[i] = st[:-(k + 1)]
                open_frame = sym.stack[-(k + 1)]
                red_rows.append(i)
                red_labels.append(self.label_index[open_frame.label])
                red_children.append([e.elem for e in st[-k:]])
        if word_rows:
            for i, v in zip(word_rows, self._drop(self.word_emb[torch.tensor(word_ids)]).unbind(0)):
                elems[i] = v
        if nt_rows:
            for i, v in zip(nt_rows, self._drop(self.nt_emb[torch.tensor(nt_ids)]).unbind(0)):
                elems[i] = v
        if red_rows:
            for i, v in zip(red_rows, self.compose_batch(red_labels, red_children)):
                elems[i] = v
        new_states = self._push_batch(elems, [b[-1].state for b in bases])
        out = [b + (TensorEntry(e, s),) for b, e, s in zip(bases, elems, new_states)]
        if lifted:
            rows = sorted(lifted)
            second = self._push_batch([lifted[i] for i in rows], [out[i][-1].state for i in rows])
            for i, s in zip(rows, second):
                out[i] = out[i] + (TensorEntry(lifted[i], s),)
        return out

    def head_logits(self, stacks: Sequence[tuple]):
        h = self._drop(torch.stack([st[-1].state[-1][0] for st in stacks]))
        return h @ self.action_w.T + self.action_b, h @ self.word_w.T + self.word_b

    def step_logprobs(self, stacks: Sequence[tuple], masks):
        """(action log-probs [k, A] with -inf on illegal columns, word log-probs [k, V])."""
        act, word = self.head_logits(stacks)
        return masked_log_softmax(act, torch.as_tensor(masks)), torch.log_softmax(word, dim=-1)

    # -- teacher forcing ---------------------------------------------------

    def compile(self, seq: ActionSequence) -> tuple[list[Action], list[list[bool]], list[State]]:
        """Legal masks and symbolic states along a derivation."""
        if seq.strategy is not self.strategy:
            raise ModelError(f"{seq.strategy.value} sequence for a {self.strategy.value} model")
        state = INITIAL
        masks, states = [], []
        for pos, a in enumerate(seq.actions):
            kinds = legal_actions(state, self.strategy, self.limits)
            if a.kind not in kinds or (a.kind == OPEN and a.arg not in self.label_index):
                raise IllegalActionInSequence(pos, a)
            if a.kind == GEN and not 0 <= int(a.arg) < self.vocab_size:
                raise IdOutOfRange(f"subword id {a.arg} outside [0, {self.vocab_size})")
            masks.append(self.mask_row(kinds))
            states.append(state)
            state = step(state, a, self.strategy)
        return list(seq.actions), masks, states

    def batch_nll(self, batch: Sequence):
        """Per-action surprisals (structural + word) for compiled sequences; list of [T_b] tensors."""
        progs = [p if isinstance(p, tuple) else self.compile(p) for p in batch]
        n = len(progs)
        init = self.initial_stack()
        stacks = [init] * n
        per_row: list[list] = [[] for _ in range(n)]
        horizon = max(len(p[0]) for p in progs)
        for t in range(horizon):
            rows = [b for b in range(n) if t < len(progs[b][0])]
            acts = [progs[b][0][t] for b in rows]
            masks = [progs[b][1][t] for b in rows]
            act_logp, word_logp = self.step_logprobs([stacks[b] for b in rows], masks)
            cols = torch.tensor([self.action_column(a) for a in acts])
            nll = -act_logp.gather(1, cols.unsqueeze(1)).squeeze(1)
            gen = [j for j, a in enumerate(acts) if a.kind == GEN]
            if gen:
                gi = torch.tensor(gen)
                wid = torch.tensor([int(acts[j].arg) for j in gen])
                nll = nll.index_add(0, gi, -word_logp[gi, wid])
            for j, b in enumerate(rows):
                per_row[b].append(nll[j])
            new = self.advance_batch([stacks[b] for b in rows], [progs[b][2][t] for b in rows], acts)
            for b, st in zip(rows, new):
                stacks[b] = st
        return [torch.stack(r) for r in per_row]

    def next_action_logprobs(self, prefix: Sequence[Action]):
        """Action and word log-probs after a derivation prefix (no dropout)."""
        with torch.no_grad():
            stack = self.initial_stack()
            state = INITIAL
            for a in prefix:
                (stack,) = self.advance_batch([stack], [state], [a])
                state = step(state, a, self.strategy)
            mask = self.mask_row(legal_actions(state, self.strategy, self.limits))
            act, word = self.step_logprobs([stack], [mask])
            return act[0], word[0]


def rnng_action_nll(model: Rnng, seq: ActionSequence):
    """Per-action surprisal (nats) and the joint NLL -log p(tree, words)."""
    with torch.no_grad():
        (row,) = model.batch_nll([seq])
    vals = [float(x) for x in row]
    return vals, sum(vals)


def compose(model: Rnng, children: Sequence[torch.Tensor], label: str) -> torch.Tensor:
    return model.compose(label, children)


# -- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 0.001
    dropout: float = 0.3
    seeds: tuple[int, ...] = (1, 2, 3)
    clip: float = 5.0
    dim: int = 256
    num_layers: int = 2
    # divide the SGD learning rate by this after an epoch without validation gain
    anneal: float = 4.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed required")
        self.seeds = tuple(self.seeds)

    @classmethod
    def for_model(cls, kind: str, **overrides) -> "TrainConfig":
        if kind == "lstm":
            base = dict(optimizer="sgd", lr=20.0, dropout=0.2, clip=0.25)
        else:
            base = dict(optimizer="adam", lr=0.001, dropout=0.3)
        base.update(overrides)
        return cls(**base)

    def make_optimizer(self) -> ad.OptimizerState:
        if self.optimizer == "sgd":
            return ad.OptimizerState.sgd(self.lr)
        return ad.OptimizerState.adam(self.lr)


@dataclass
class TrainResult:
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_nll: float = math.inf
    checkpoints: list[str] = field(default_factory=list)

    @property
    def best_checkpoint(self) -> str | None:
        return self.checkpoints[self.best_epoch - 1] if self.checkpoints else None


def build_model(hp: dict) -> nn.Module:
    if hp["kind"] == "lstm":
        return LstmLm(hp["vocab_size"], hp["dim"], hp["num_layers"], hp["dropout"])
    return Rnng(hp["vocab_size"], hp["labels"], Strategy(hp["strategy"]), hp["dim"],
                hp["num_layers"], hp["dropout"], Limits(**hp.get("limits", {})))


def save_model(model: nn.Module, path, extra: dict | None = None) -> None:
    header = {"version": 1, "model": model.hyperparameters(), **(extra or {})}
    ad.save_checkpoint(path, header, dict(model.state_dict()))


def load_model(path) -> tuple[nn.Module, dict]:
    header, tensors = ad.load_checkpoint(path)
    model = build_model(header["model"])
    model.load_state_dict(tensors)
    model.eval()
    return model, header


def seed_model(model: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    ad.init_parameters(model, gen)
    model.generator = torch.Generator().manual_seed(seed + 1)


def _batch_loss(model, batch):
    """Summed NLL of a batch and its subword count."""
    if isinstance(model, LstmLm):
        logp, mask = model.batch_logprobs(batch)
        return -logp.sum(), int(mask.sum()) - len(batch)
    rows = model.batch_nll(batch)
    words = sum(sum(1 for a in p[0] if a.kind == GEN) for p in batch)
    return torch.stack([r.sum() for r in rows]).sum(), words


def evaluate_nll(model, data, batch_size: int = 64) -> float:
    """Mean NLL per subword (nats)."""
    if not data:
        return math.nan
    model.eval()
    total, words = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            loss, n = _batch_loss(model, data[i:i + batch_size])
            total += float(loss)
            words += n
    return total / max(words, 1)


def prepare_data(model, corpus):
    """Subword-id lists for the LSTM, compiled programs for the RNNG."""
    if isinstance(model, LstmLm):
        return [list(x) for x in corpus]
    return [model.compile(seq) for seq in corpus]


def train(
    model: nn.Module,
    corpus: Sequence,
    config: TrainConfig,
    seed: int = 1,
    valid: Sequence | None = None,
    out_dir=None,
    init: bool = True,
) -> TrainResult:
    """Sentence-level minibatch training; a checkpoint per epoch, best by validation NLL.

    The model is left holding the weights of the selected epoch.

    ``corpus`` holds subword-id lists (LSTM) or ActionSequences (RNNG). The
    loss is the batch NLL divided by the batch size for the RNNG and by the
    number of predicted tokens for the LSTM.
    """
    if not corpus:
        raise EmptyCorpus("training corpus is empty")
    if init:
        seed_model(model, seed)
    train_data = prepare_data(model, corpus)
    valid_data = prepare_data(model, valid) if valid else []
    opt = config.make_optimizer()
    params = [p for _, p in sorted(model.named_parameters())]
    order_rng = random.Random(seed)
    result = TrainResult()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    initial_valid = evaluate_nll(model, valid_data) if valid_data else math.nan
    result.curve.append({"epoch": 0, "train_nll": math.nan, "valid_nll": initial_valid, "lr": opt.lr})
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = list(range(len(train_data)))
        order_rng.shuffle(order)
        total, words = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_data[i] for i in order[start:start + config.batch_size]]
            loss_sum, n_words = _batch_loss(model, batch)
            denom = (n_words + len(batch)) if isinstance(model, LstmLm) else len(batch)
            loss = loss_sum / denom
            for p in params:
                p.grad = None
            loss.backward()
            ad.clip_grad_norm(params, config.clip)
            ad.step(opt, params)
            total += float(loss_sum.detach())
            words += n_words
        train_nll = total / max(words, 1)
        valid_nll = evaluate_nll(model, valid_data) if valid_data else math.nan
        result.curve.append({"epoch": epoch, "train_nll": train_nll, "valid_nll": valid_nll, "lr": opt.lr})
        log.info("%s epoch %d train %.4f valid %.4f", model.kind, epoch, train_nll, valid_nll)
        score = valid_nll if valid_data else train_nll
        if opt.kind == "sgd" and result.best_epoch and score >= result.best_valid_nll and config.anneal > 1:
            opt.lr /= config.anneal
        if score < result.best_valid_nll or result.best_epoch == 0:
            result.best_valid_nll = score
            result.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if out is not None:
            path = out / f"epoch{epoch:03d}.ckpt"
            save_model(model, path, {"epoch": epoch, "seed": seed, "train": asdict(config)})
            result.checkpoints.append(str(path))
    if out is not None:
        write_curve(out / "loss_curve.csv", result.curve)
    model.load_state_dict(best_state)
    model.eval()
    return result


def write_curve(path, curve: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_nll", "valid_nll", "lr"], extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
