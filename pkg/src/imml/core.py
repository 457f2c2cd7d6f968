"""Numeric substrate: float64 tensors, reverse-mode gradients, Adam, seeded streams.

Autodiff is delegated to torch (CPU, float64). This module pins down the
contracts the rest of the package relies on: every value is checked for
finiteness at loss/gradient boundaries, gradients of untouched parameters are
zeros rather than ``None``, and every random draw comes from a named substream
so adding draws in one place never shifts another.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Sequence

import numpy as np
import torch

DTYPE = torch.float64
torch.set_default_dtype(DTYPE)


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value produced by {op}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def check_finite(t: torch.Tensor, op: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(op)
    return t


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64)).clone()
    t.requires_grad_(requires_grad)
    return t


# --------------------------------------------------------------------------
# seeded randomness

def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    """Counter-based (Philox) generator for the named substream of ``seed``.

    Streams are independent: ``make_rng(s, "init")`` and ``make_rng(s, "data")``
    never overlap, and both are identical across platforms for a given seed.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(_stream_key(stream),) if stream else ())
    return np.random.Generator(np.random.Philox(ss))


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(rng.integers(0, 2**63 - 1)))
    return g


def uniform_(param: torch.Tensor, bound: float, rng: np.random.Generator) -> None:
    with torch.no_grad():
        param.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(param.shape))))


# --------------------------------------------------------------------------
# gradients

def backward(output: torch.Tensor, params: Sequence[torch.Tensor],
             op: str = "loss") -> List[torch.Tensor]:
    """Return d(output)/d(p) for every p in ``params``.

    Parameters the output does not depend on get zero tensors. The output must
    be a scalar; a non-finite output or gradient raises :class:`NonFiniteError`.
    """
    if output.numel() != 1:
        raise ValueError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    check_finite(output.detach(), op)
    params = list(params)
    if not output.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(output.reshape(()), params, allow_unused=True,
                                retain_graph=True)
    out = []
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        check_finite(g, f"gradient of {op}")
        out.append(g)
    return out


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x, step: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Inputs sitting on a kink (e.g. relu at 0) can legitimately exceed any
    tolerance; callers keep inputs away from those.
    """
    if not (0.0 < step <= 1e-3):
        raise ValueError("step must lie in (0, 1e-3]")
    x0 = as_tensor(x if not isinstance(x, torch.Tensor) else x.detach().numpy())
    xg = x0.clone().requires_grad_(True)
    (analytic,) = backward(f(xg), [xg], op="grad_check")
    flat = x0.reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xp[i] += step
            xm = flat.clone()
            xm[i] -= step
            fp = f(xp.reshape(x0.shape))
            fm = f(xm.reshape(x0.shape))
            check_finite(fp, "grad_check perturbation")
            check_finite(fm, "grad_check perturbation")
            numeric[i] = (fp - fm) / (2.0 * step)
    a = analytic.reshape(-1)
    err = (a - numeric).abs() / torch.clamp(a.abs(), min=1.0)
    return float(err.max()) if err.numel() else 0.0


# --------------------------------------------------------------------------
# Adam with decoupled weight decay

@dataclass
class AdamState:
    first_moment: List[torch.Tensor]
    second_moment: List[torch.Tensor]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-3
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Iterable[torch.Tensor], **kw) -> "AdamState":
        params = list(params)
        return cls([torch.zeros_like(p) for p in params],
                   [torch.zeros_like(p) for p in params], **kw)


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor],
              state: AdamState) -> None:
    """In-place bias-corrected Adam step.

    Weight decay is decoupled: ``p -= lr * weight_decay * p`` happens before
    the Adam delta is applied.
    """
    if state.learning_rate < 0:
        raise ValueError("learning_rate must be non-negative")
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}")
        check_finite(g, "adam_step gradient")
    state.step_count += 1
    t = state.step_count
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        if state.weight_decay:
            p.mul_(1.0 - lr * state.weight_decay)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + state.epsilon))


class Adam:
    """Small stateful wrapper pairing a parameter list with its AdamState."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float = 1e-3,
                 weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params]
        self.state = AdamState.for_params(self.params, beta1=betas[0], beta2=betas[1],
                                          epsilon=eps, learning_rate=lr,
                                          weight_decay=weight_decay)

    def step(self, loss: torch.Tensor, op: str = "loss") -> None:
        grads = backward(loss, self.params, op=op)
        adam_step(self.params, grads, self.state)
