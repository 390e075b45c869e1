"""Differentiable building blocks on top of torch's reverse-mode engine.

Everything runs in float64. The LSTM cell, masked softmax, dropout and the
two optimizers are written out here so their exact semantics (gate order,
mask handling, bias correction, inverted dropout) are pinned down and can be
checked against finite differences.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"PSCKPT01"


class ShapeMismatch(ValueError):
    pass


class NoLegalAction(ValueError):
    pass


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


def lstm_cell(x, h_prev, c_prev, w_ih, w_hh, bias):
    """One LSTM step. Gate blocks in ``w_ih``/``w_hh``/``bias`` are ordered i, f, g, o."""
    hidden = h_prev.shape[-1]
    _check(w_ih.shape == (4 * hidden, x.shape[-1]), f"w_ih {tuple(w_ih.shape)} vs input {x.shape[-1]}")
    _check(w_hh.shape == (4 * hidden, hidden), f"w_hh {tuple(w_hh.shape)} vs hidden {hidden}")
    _check(bias.shape == (4 * hidden,), f"bias {tuple(bias.shape)}")
    _check(c_prev.shape == h_prev.shape, "h/c shape mismatch")
    _check(x.shape[:-1] == h_prev.shape[:-1], "batch shape mismatch")
    gates = x @ w_ih.T + h_prev @ w_hh.T + bias
    i, f, g, o = gates.chunk(4, dim=-1)
    c = torch.sigmoid(f) * c_prev + torch.sigmoid(i) * torch.tanh(g)
    h = torch.sigmoid(o) * torch.tanh(c)
    return h, c


def masked_log_softmax(logits, legal_mask):
    """Log-probabilities renormalized over legal entries; illegal entries get -inf."""
    mask = torch.as_tensor(legal_mask, dtype=torch.bool)
    if logits.shape[-1:] != mask.shape[-1:]:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs mask {tuple(mask.shape)}")
    if not bool(mask.any(dim=-1).all()):
        raise NoLegalAction("row without a legal entry")
    neg = torch.finfo(logits.dtype).min
    masked = logits.masked_fill(~mask, neg)
    top = masked.max(dim=-1, keepdim=True).values.detach()
    shifted = masked - top
    log_z = torch.log(torch.exp(shifted).masked_fill(~mask, 0.0).sum(dim=-1, keepdim=True))
    return (shifted - log_z).masked_fill(~mask, -math.inf)


def dropout(t, rate: float, generator: torch.Generator | None = None, training: bool = True):
    """Inverted dropout: kept entries are scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return t
    keep = torch.rand(t.shape, generator=generator, dtype=t.dtype) >= rate
    return t * keep / (1.0 - rate)


class LstmCell(nn.Module):
    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.w_ih = nn.Parameter(torch.zeros(4 * hidden_dim, input_dim, dtype=DTYPE))
        self.w_hh = nn.Parameter(torch.zeros(4 * hidden_dim, hidden_dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(4 * hidden_dim, dtype=DTYPE))

    def forward(self, x, state):
        h, c = state
        return lstm_cell(x, h, c, self.w_ih, self.w_hh, self.bias)


class StackedLstm(nn.Module):
    """Multi-layer LSTM advanced one element at a time.

    A state is a tuple of per-layer ``(h, c)`` pairs; the top-layer ``h`` is
    the output. Dropout is applied between layers while training.
    """

    def __init__(self, input_dim: int, hidden_dim: int, num_layers: int = 2, dropout: float = 0.0):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.dropout = dropout
        self.cells = nn.ModuleList(
            LstmCell(input_dim if i == 0 else hidden_dim, hidden_dim) for i in range(num_layers)
        )

    def zero_state(self, batch: int | None = None):
        shape = (self.hidden_dim,) if batch is None else (batch, self.hidden_dim)
        z = torch.zeros(shape, dtype=DTYPE)
        return tuple((z, z) for _ in range(self.num_layers))

    def forward(self, x, state, generator=None):
        out = []
        inp = x
        for i, cell in enumerate(self.cells):
            if i > 0:
                inp = dropout(inp, self.dropout, generator, self.training)
            h, c = cell(inp, state[i])
            out.append((h, c))
            inp = h
        return tuple(out)


def stack_states(states):
    """Batch a list of StackedLstm states (one per row)."""
    n_layers = len(states[0])
    return tuple(
        (torch.stack([s[l][0] for s in states]), torch.stack([s[l][1] for s in states]))
        for l in range(n_layers)
    )


def unstack_state(state):
    """Inverse of :func:`stack_states`."""
    hs = [(h.unbind(0), c.unbind(0)) for h, c in state]
    n = len(hs[0][0])
    return [tuple((hs[l][0][i], hs[l][1][i]) for l in range(len(hs))) for i in range(n)]


def init_parameters(module: nn.Module, generator: torch.Generator, emb_range: float = 0.1) -> None:
    """Uniform embeddings, Xavier-uniform matrices, zero biases, forget-gate bias 1."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if "emb" in leaf:
                p.uniform_(-emb_range, emb_range, generator=generator)
            elif p.dim() >= 2:
                fan_out, fan_in = p.shape[0], p.shape[1]
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                p.uniform_(-bound, bound, generator=generator)
            else:
                p.zero_()
        for m in module.modules():
            if isinstance(m, LstmCell):
                h = m.hidden_dim
                m.bias[h:2 * h] = 1.0


def zero_parameters(module: nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def sgd(cls, lr: float) -> "OptimizerState":
        return cls("sgd", lr)

    @classmethod
    def adam(cls, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        return cls("adam", lr, beta1, beta2, eps)


def step(opt: OptimizerState, params: list, grads: list | None = None) -> None:
    """In-place parameter update; ``grads`` defaults to each parameter's ``.grad``."""
    if grads is None:
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
    if len(grads) != len(params):
        raise ShapeMismatch("one gradient per parameter required")
    for p, g in zip(params, grads):
        _check(p.shape == g.shape, f"param {tuple(p.shape)} vs grad {tuple(g.shape)}")
    with torch.no_grad():
        if opt.kind == "sgd":
            for p, g in zip(params, grads):
                p.sub_(opt.lr * g)
            opt.steps += 1
            return
        if opt.kind != "adam":
            raise ValueError(f"unknown optimizer {opt.kind!r}")
        if not opt.m:
            opt.m = [torch.zeros_like(p) for p in params]
            opt.v = [torch.zeros_like(p) for p in params]
        for buf, p in zip(opt.m, params):
            _check(buf.shape == p.shape, "moment buffer shape mismatch")
        opt.steps += 1
        t = opt.steps
        c1 = 1.0 - opt.beta1 ** t
        c2 = 1.0 - opt.beta2 ** t
        for p, g, m, v in zip(params, grads, opt.m, opt.v):
            m.mul_(opt.beta1).add_(g, alpha=1.0 - opt.beta1)
            v.mul_(opt.beta2).addcmul_(g, g, value=1.0 - opt.beta2)
            p.sub_(opt.lr * (m / c1) / (torch.sqrt(v / c2) + opt.eps))


def clip_grad_norm(params: Iterable, max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    if not params:
        return 0.0
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad.mul_(scale)
    return total


def save_checkpoint(path, header: Mapping, tensors: Mapping[str, torch.Tensor]) -> None:
    """Magic, JSON header, then named blocks: shape as little-endian int64, payload as <f8."""
    meta = json.dumps(dict(header), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<Q", len(tensors)))
        for name in sorted(tensors):
            arr = tensors[name].detach().cpu().numpy().astype("<f8", copy=False)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        (count,) = struct.unpack("<Q", fh.read(8))
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack("<Q", fh.read(8))
            name = fh.read(ln).decode("utf-8")
            (ndim,) = struct.unpack("<Q", fh.read(8))
            shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            tensors[name] = torch.tensor(arr, dtype=DTYPE)
    return header, tensors


def numeric_gradient(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of scalar ``fn()`` with respect to ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x)
    flat = x.detach().view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad
