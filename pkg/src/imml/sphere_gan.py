"""Hypersphere discriminator, relativistic averaged losses and the generator head.

The discriminator embeds a (real or fake) genetic representation, projects the
embedding onto the unit sphere around a trainable center ``c`` and scores it by
how much of the projection lies off the trainable axis ``v``: points near the
great circle orthogonal to ``v`` score high, points near the poles score low.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Affine
from .core import check_finite, uniform_

EPS = 1e-8
LOG_FLOOR = 1e-12

Number = Union[float, torch.Tensor]


class DegenerateProjectionError(ValueError):
    pass


def _norms(x: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(x, dim=-1)


def project_to_sphere(h_embed: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Map embeddings to unit vectors ``(h - c) / ||h - c||``."""
    offset = h_embed - c
    r = _norms(offset)
    if bool((r <= EPS).any()):
        raise DegenerateProjectionError("embedding lies within 1e-8 of the sphere center")
    return offset / r.unsqueeze(-1)


def batch_sigma(vectors: torch.Tensor) -> torch.Tensor:
    """Batch scale of a set of vectors: the mean of their Euclidean norms."""
    if vectors.dim() == 1:
        vectors = vectors.unsqueeze(0)
    if vectors.shape[0] == 0:
        raise ValueError("empty batch")
    return _norms(vectors).mean()


def decompose(p: torch.Tensor, v: torch.Tensor):
    """Split ``p`` into its component along ``v`` and the orthogonal remainder."""
    v_hat = v / _norms(v)
    par = (p @ v_hat).unsqueeze(-1) * v_hat
    return par, p - par


@dataclass
class ScoredBatch:
    projections: torch.Tensor
    scores: torch.Tensor
    sigma_parallel: torch.Tensor
    sigma_perp: torch.Tensor


def sphere_scores(projections: torch.Tensor, v: torch.Tensor) -> ScoredBatch:
    if projections.shape[0] < 2:
        raise ValueError("scoring needs a batch of at least 2 samples")
    par, perp = decompose(projections, v)
    n_par, n_perp = _norms(par), _norms(perp)
    s_par, s_perp = n_par.mean(), n_perp.mean()
    scores = n_perp / torch.clamp(s_perp, min=EPS) - n_par / torch.clamp(s_par, min=EPS)
    check_finite(scores, "sphere scores")
    return ScoredBatch(projections, scores, s_par, s_perp)


def _log_sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(torch.sigmoid(x), min=LOG_FLOOR))


def d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor, eta: float = 1.0) -> torch.Tensor:
    """Relativistic averaged discriminator loss."""
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("empty score batch")
    check_finite(real_scores, "d_loss input")
    check_finite(fake_scores, "d_loss input")
    loss = (-_log_sigmoid(eta * (real_scores - fake_scores.mean())).mean()
            - _log_sigmoid(eta * (real_scores.mean() - fake_scores)).mean())
    return check_finite(loss, "d_loss")


def g_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor, eta: float = 1.0) -> torch.Tensor:
    """Generator counterpart: the discriminator loss with real and fake swapped."""
    return d_loss(fake_scores, real_scores, eta)


def huber(x: Number) -> Number:
    if isinstance(x, torch.Tensor):
        return torch.where(x <= 1.0, 0.5 * x * x, x - 0.5)
    return 0.5 * x * x if x <= 1.0 else x - 0.5


def center_loss(h_embed: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    if h_embed.shape[0] == 0:
        raise ValueError("empty batch")
    return check_finite(huber(_norms(h_embed - c)).mean(), "center_loss")


def distance_loss(h_embed: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Huber penalty on each sample's deviation from the batch's mean radius."""
    if h_embed.shape[0] == 0:
        raise ValueError("empty batch")
    dist = _norms(h_embed - c)
    sigma = dist.mean()
    return check_finite(huber((dist - sigma).abs()).mean(), "distance_loss")


class SphereDiscriminator(nn.Module):
    def __init__(self, d_in: int, d_sphere: int = 8, hidden: int = None, eta: float = 1.0):
        super().__init__()
        if d_sphere >= d_in:
            raise ValueError(f"sphere dimension {d_sphere} must be below input width {d_in}")
        hidden = hidden or 2 * d_in
        self.d_in, self.d_sphere, self.eta = d_in, d_sphere, eta
        self.embed1 = Affine(d_in, hidden)
        self.embed2 = Affine(hidden, d_sphere)
        self.center = nn.Parameter(torch.zeros(d_sphere))
        self.axis = nn.Parameter(torch.zeros(d_sphere))

    def reset_parameters(self, rng: np.random.Generator) -> None:
        self.embed1.reset_parameters(rng)
        self.embed2.reset_parameters(rng)
        bound = 1.0 / math.sqrt(self.d_sphere)
        uniform_(self.center, bound, rng)
        uniform_(self.axis, bound, rng)
        self.normalize_axis()

    @torch.no_grad()
    def normalize_axis(self) -> None:
        n = float(_norms(self.axis))
        if n < EPS:
            raise DegenerateProjectionError("sphere axis collapsed to zero length")
        self.axis.div_(n)

    def embed(self, h: torch.Tensor) -> torch.Tensor:
        return self.embed2(F.gelu(self.embed1(h)))

    def score(self, h: torch.Tensor) -> ScoredBatch:
        return sphere_scores(project_to_sphere(self.embed(h), self.center), self.axis)


def score_batch(h_batch: torch.Tensor, disc: SphereDiscriminator) -> ScoredBatch:
    return disc.score(h_batch)


class GeneratorHead(nn.Module):
    """Maps an MRI representation to a fake genetic representation."""

    def __init__(self, d_in: int, d_out: int, hidden: int = None):
        super().__init__()
        hidden = hidden or 2 * d_out
        self.d_in, self.d_out = d_in, d_out
        self.fc1 = Affine(d_in, hidden)
        self.fc2 = Affine(hidden, d_out)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        self.fc1.reset_parameters(rng)
        self.fc2.reset_parameters(rng)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(z)))
