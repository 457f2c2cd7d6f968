"""Per-modality tabular transformer backbone and the fused prediction head.

Each input feature gets its own affine token ``x_j * W_j + b_j``; a learned
readout token is prepended, ``L`` pre-norm transformer blocks are applied and
the final state of the readout position is the modality representation.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import check_finite, make_rng, uniform_

TASKS = ("regression", "classification")


def dropout(x: torch.Tensor, p: float, gen: Optional[torch.Generator]) -> torch.Tensor:
    if p <= 0.0 or gen is None:
        return x
    keep = torch.rand(x.shape, generator=gen) >= p
    return x * keep / (1.0 - p)


class Affine(nn.Module):
    """Linear map with bias, initialised uniformly in +-1/sqrt(fan_in)."""

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = nn.Parameter(torch.zeros(n_out, n_in))
        self.bias = nn.Parameter(torch.zeros(n_out))

    def reset_parameters(self, rng: np.random.Generator) -> None:
        bound = 1.0 / math.sqrt(self.n_in)
        uniform_(self.weight, bound, rng)
        uniform_(self.bias, bound, rng)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight, self.bias)


class FeatureTokenizer(nn.Module):
    """One (W_j, b_j) pair of width ``d`` per input feature."""

    def __init__(self, n_features: int, d: int):
        super().__init__()
        self.n_features, self.d = n_features, d
        self.weight = nn.Parameter(torch.zeros(n_features, d))
        self.bias = nn.Parameter(torch.zeros(n_features, d))

    def reset_parameters(self, rng: np.random.Generator) -> None:
        bound = 1.0 / math.sqrt(self.d)
        uniform_(self.weight, bound, rng)
        uniform_(self.bias, bound, rng)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[-1]}")
        # (..., m) -> (..., m, d); row j is x_j * W_j + b_j
        return x.unsqueeze(-1) * self.weight + self.bias


def tokenize(x: torch.Tensor, tok: FeatureTokenizer) -> torch.Tensor:
    return tok(x)


class TransformerBlock(nn.Module):
    """Pre-norm block: multi-head self-attention then a GELU feed-forward of width 2d."""

    def __init__(self, d: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d={d} is not divisible by n_heads={n_heads}")
        self.d, self.n_heads, self.p = d, n_heads, dropout
        self.norm1 = nn.LayerNorm(d)
        self.query = Affine(d, d)
        self.key = Affine(d, d)
        self.value = Affine(d, d)
        self.out = Affine(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ff1 = Affine(d, 2 * d)
        self.ff2 = Affine(2 * d, d)
        self.dropout_gen: Optional[torch.Generator] = None
        self.keep_attention = False
        self.last_attention: Optional[torch.Tensor] = None

    def reset_parameters(self, rng: np.random.Generator) -> None:
        for lin in (self.query, self.key, self.value, self.out, self.ff1, self.ff2):
            lin.reset_parameters(rng)

    def _drop(self, x):
        return dropout(x, self.p, self.dropout_gen if self.training else None)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, d = x.shape
        hd = d // self.n_heads

        def heads(t):
            return t.reshape(*lead, n, self.n_heads, hd).transpose(-3, -2)

        q, k, v = heads(self.query(x)), heads(self.key(x)), heads(self.value(x))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        if self.keep_attention:
            self.last_attention = attn.detach()
        ctx = (self._drop(attn) @ v).transpose(-3, -2).reshape(*lead, n, d)
        return self.out(ctx)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self._drop(self.attention(self.norm1(x)))
        h = F.gelu(self.ff1(self.norm2(x)))
        return x + self._drop(self.ff2(h))


class TabularBackbone(nn.Module):
    """Feature tokenizer + readout token + ``n_layers`` transformer blocks."""

    def __init__(self, n_features: int, d: int = 32, n_layers: int = 2,
                 n_heads: int = 4, dropout: float = 0.1):
        super().__init__()
        self.n_features, self.d = n_features, d
        self.tokenizer = FeatureTokenizer(n_features, d)
        self.readout = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(TransformerBlock(d, n_heads, dropout) for _ in range(n_layers))

    @property
    def out_dim(self) -> int:
        return self.d

    def reset_parameters(self, rng: np.random.Generator) -> None:
        self.tokenizer.reset_parameters(rng)
        uniform_(self.readout, 1.0 / math.sqrt(self.d), rng)
        for blk in self.blocks:
            blk.reset_parameters(rng)

    def set_dropout_generator(self, gen: Optional[torch.Generator]) -> None:
        for blk in self.blocks:
            blk.dropout_gen = gen

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.tokenizer(x)
        lead = tokens.shape[:-2]
        cls = self.readout.expand(*lead, 1, self.d)
        h = torch.cat([cls, tokens], dim=-2)
        for blk in self.blocks:
            h = blk(h)
        return h[..., 0, :]


class MLPBackbone(nn.Module):
    """Two-layer GELU network; the backbone ablation with no token interactions."""

    def __init__(self, n_features: int, d: int = 32, dropout: float = 0.1):
        super().__init__()
        self.n_features, self.d, self.p = n_features, d, dropout
        self.fc1 = Affine(n_features, 2 * d)
        self.fc2 = Affine(2 * d, d)
        self.dropout_gen: Optional[torch.Generator] = None

    @property
    def out_dim(self) -> int:
        return self.d

    def reset_parameters(self, rng: np.random.Generator) -> None:
        self.fc1.reset_parameters(rng)
        self.fc2.reset_parameters(rng)

    def set_dropout_generator(self, gen: Optional[torch.Generator]) -> None:
        self.dropout_gen = gen

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[-1]}")
        h = F.gelu(self.fc1(x))
        h = dropout(h, self.p, self.dropout_gen if self.training else None)
        return self.fc2(h)


def backbone_forward(x: torch.Tensor, bb: nn.Module) -> torch.Tensor:
    z = bb(x)
    return check_finite(z, "backbone_forward")


class FusionHead(nn.Module):
    """Affine map on the concatenation of modality representations."""

    def __init__(self, in_widths: Sequence[int], n_out: int = 1):
        super().__init__()
        self.in_widths = tuple(in_widths)
        self.n_out = n_out
        self.linear = Affine(sum(self.in_widths), n_out)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        self.linear.reset_parameters(rng)

    def forward(self, *zs: torch.Tensor) -> torch.Tensor:
        widths = tuple(z.shape[-1] for z in zs)
        if widths != self.in_widths:
            raise ValueError(f"head expects widths {self.in_widths}, got {widths}")
        out = self.linear(torch.cat(zs, dim=-1))
        return out.squeeze(-1) if self.n_out == 1 else out


def head_forward(z_mri: torch.Tensor, z_gen: torch.Tensor, head: FusionHead) -> torch.Tensor:
    return head(z_mri, z_gen)


def task_loss(pred: torch.Tensor, target: torch.Tensor, task: str) -> torch.Tensor:
    """Mean squared error (regression) or mean softmax cross-entropy (classification)."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if target.numel() == 0:
        raise ValueError("empty batch")
    if task == "regression":
        pred = pred.reshape(-1)
        target = target.reshape(-1).to(pred.dtype)
        if pred.shape != target.shape:
            raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
        loss = ((pred - target) ** 2).mean()
    else:
        target = target.reshape(-1).long()
        n_classes = pred.shape[-1]
        if int(target.min()) < 0 or int(target.max()) >= n_classes:
            raise ValueError(f"class index out of range [0, {n_classes})")
        loss = F.cross_entropy(pred.reshape(-1, n_classes), target)
    return check_finite(loss, f"task_loss[{task}]")


def init_module(module: nn.Module, seed: int, stream: str) -> nn.Module:
    module.reset_parameters(make_rng(seed, stream))
    return module
