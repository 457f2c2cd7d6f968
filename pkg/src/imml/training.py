"""Teacher pretraining, student training with parameter routing, inference.

The teacher (``MModel``) sees both modalities. The student (``UModel``) sees
MRI only; its generator head fakes the teacher's genetic representation. Per
batch the student update runs in a fixed order:

1. discriminator (embedding map, sphere center and axis) on the adversarial,
   center and distance losses;
2. generator head on supervised + imitation + weighted adversarial loss;
3. MRI backbone and fusion head on supervised + imitation loss only;
4. EMA of the teacher's MRI backbone towards the student's.
"""
from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
from torch import nn

from .backbone import FusionHead, MLPBackbone, TabularBackbone, task_loss, Affine
from .core import Adam, NonFiniteError, adam_step, backward, make_rng, torch_generator
from .data import MultimodalDataset
from .distill import DistillConfig, ema_update, kl_imitation, regression_imitation, total_u_loss
from .metrics import macro_classification_metrics, r2, rmse
from .sphere_gan import (GeneratorHead, SphereDiscriminator, center_loss, d_loss,
                         distance_loss, g_loss, project_to_sphere, sphere_scores)


class TrainingDivergedError(RuntimeError):
    def __init__(self, phase: str, epoch: int, step: int, cause: Exception):
        self.phase, self.epoch, self.step = phase, epoch, step
        super().__init__(f"{phase} training diverged at epoch {epoch}, step {step}: {cause}")


@dataclass
class TrainConfig:
    task: str = "regression"
    n_classes: int = 0
    backbone: str = "transformer"  # or "mlp"
    d1: int = 32
    d2: int = 32
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.1
    d_sphere: int = 8
    eta: float = 1.0
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 0.999
    temperature: float = 2.0
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 32
    epochs_m: int = 100
    epochs_u: int = 100
    seed: int = 0
    # weight on the supervised term of the student objective; 0 ablates it
    task_weight: float = 1.0

    @property
    def n_out(self) -> int:
        return 1 if self.task == "regression" else self.n_classes

    def distill(self) -> DistillConfig:
        return DistillConfig(self.temperature, self.alpha, self.beta, self.gamma)


@dataclass
class TrainReport:
    phase: str
    seed: int
    history: List[Dict[str, float]] = field(default_factory=list)
    wall_time: float = 0.0
    final_metrics: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)


# --------------------------------------------------------------------------
# models

def make_backbone(cfg: TrainConfig, n_features: int, d: int) -> nn.Module:
    if cfg.backbone == "transformer":
        return TabularBackbone(n_features, d, cfg.n_layers, cfg.n_heads, cfg.dropout)
    if cfg.backbone == "mlp":
        return MLPBackbone(n_features, d, cfg.dropout)
    raise ValueError(f"unknown backbone {cfg.backbone!r}")


class MModel(nn.Module):
    def __init__(self, cfg: TrainConfig, m1: int, m2: int):
        super().__init__()
        self.mri_backbone = make_backbone(cfg, m1, cfg.d1)
        self.gen_backbone = make_backbone(cfg, m2, cfg.d2)
        self.head = FusionHead((cfg.d1, cfg.d2), cfg.n_out)

    def init(self, seed: int) -> "MModel":
        self.mri_backbone.reset_parameters(make_rng(seed, "init/m/mri"))
        self.gen_backbone.reset_parameters(make_rng(seed, "init/m/gen"))
        self.head.reset_parameters(make_rng(seed, "init/m/head"))
        return self

    def set_dropout_generator(self, gen) -> None:
        self.mri_backbone.set_dropout_generator(gen)
        self.gen_backbone.set_dropout_generator(gen)

    def forward(self, x_mri: torch.Tensor, x_gen: torch.Tensor) -> torch.Tensor:
        return self.head(self.mri_backbone(x_mri), self.gen_backbone(x_gen))


class UModel(nn.Module):
    def __init__(self, cfg: TrainConfig, m1: int):
        super().__init__()
        self.mri_backbone = make_backbone(cfg, m1, cfg.d1)
        self.generator = GeneratorHead(cfg.d1, cfg.d2)
        self.head = FusionHead((cfg.d1, cfg.d2), cfg.n_out)
        self.discriminator = SphereDiscriminator(cfg.d2, cfg.d_sphere, eta=cfg.eta)

    def set_dropout_generator(self, gen) -> None:
        self.mri_backbone.set_dropout_generator(gen)

    def backbone_parameters(self) -> List[nn.Parameter]:
        return list(self.mri_backbone.parameters()) + list(self.head.parameters())

    def forward(self, x_mri: torch.Tensor) -> torch.Tensor:
        z = self.mri_backbone(x_mri)
        return self.head(z, self.generator(z))


class UnimodalModel(nn.Module):
    """MRI backbone with a plain linear head; no teacher, no generator."""

    def __init__(self, cfg: TrainConfig, m1: int):
        super().__init__()
        self.mri_backbone = make_backbone(cfg, m1, cfg.d1)
        self.head = FusionHead((cfg.d1,), cfg.n_out)

    def init(self, seed: int) -> "UnimodalModel":
        self.mri_backbone.reset_parameters(make_rng(seed, "init/uni/mri"))
        self.head.reset_parameters(make_rng(seed, "init/uni/head"))
        return self

    def set_dropout_generator(self, gen) -> None:
        self.mri_backbone.set_dropout_generator(gen)

    def forward(self, x_mri: torch.Tensor) -> torch.Tensor:
        return self.head(self.mri_backbone(x_mri))


# --------------------------------------------------------------------------
# helpers

def _t(a) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64))


def _targets(ds: MultimodalDataset, cfg: TrainConfig) -> torch.Tensor:
    y = _t(ds.y)
    return y.long() if cfg.task == "classification" else y


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled batches; a trailing batch of one row joins the previous batch."""
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def _check_task(ds: MultimodalDataset, cfg: TrainConfig) -> None:
    if ds.task != cfg.task:
        raise ValueError(f"dataset task {ds.task!r} does not match config task {cfg.task!r}")
    if len(ds) < 2:
        raise ValueError("training needs at least two rows")


def _require_gen(ds: MultimodalDataset) -> None:
    if ds.x_gen is None or np.isnan(ds.x_gen).any():
        raise ValueError("every training row needs the genetic modality")


def _mean_history(sums: Dict[str, float], count: int) -> Dict[str, float]:
    return {k: v / max(count, 1) for k, v in sums.items()}


# --------------------------------------------------------------------------
# training loops

def pretrain_m(train_set: MultimodalDataset, cfg: TrainConfig):
    """Train the two-backbone teacher on the supervised loss. Returns (model, report)."""
    _check_task(train_set, cfg)
    _require_gen(train_set)
    t0 = time.perf_counter()
    model = MModel(cfg, train_set.x_mri.shape[1], train_set.x_gen.shape[1]).init(cfg.seed)
    model.set_dropout_generator(torch_generator(make_rng(cfg.seed, "dropout/m")))
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    xm, xg, y = _t(train_set.x_mri), _t(train_set.x_gen), _targets(train_set, cfg)
    batch_rng = make_rng(cfg.seed, "batches/m")
    report = TrainReport("m", cfg.seed)
    model.train()
    for epoch in range(cfg.epochs_m):
        total, steps = 0.0, 0
        for step, idx in enumerate(make_batches(len(train_set), cfg.batch_size, batch_rng)):
            ix = torch.from_numpy(idx)
            try:
                loss = task_loss(model(xm[ix], xg[ix]), y[ix], cfg.task)
                opt.step(loss, op="teacher task loss")
            except NonFiniteError as exc:
                raise TrainingDivergedError("m", epoch, step, exc) from exc
            total += float(loss.detach())
            steps += 1
        report.history.append({"epoch": epoch, "task": total / steps})
    model.eval()
    report.wall_time = time.perf_counter() - t0
    return model, report


def train_unimodal(train_set: MultimodalDataset, cfg: TrainConfig):
    """Plain supervised MRI-only training (the vanilla-transformer ablation)."""
    _check_task(train_set, cfg)
    t0 = time.perf_counter()
    model = UnimodalModel(cfg, train_set.x_mri.shape[1]).init(cfg.seed)
    model.set_dropout_generator(torch_generator(make_rng(cfg.seed, "dropout/uni")))
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    xm, y = _t(train_set.x_mri), _targets(train_set, cfg)
    batch_rng = make_rng(cfg.seed, "batches/uni")
    report = TrainReport("unimodal", cfg.seed)
    model.train()
    for epoch in range(cfg.epochs_u):
        total, steps = 0.0, 0
        for step, idx in enumerate(make_batches(len(train_set), cfg.batch_size, batch_rng)):
            ix = torch.from_numpy(idx)
            try:
                loss = task_loss(model(xm[ix]), y[ix], cfg.task)
                opt.step(loss, op="unimodal task loss")
            except NonFiniteError as exc:
                raise TrainingDivergedError("unimodal", epoch, step, exc) from exc
            total += float(loss.detach())
            steps += 1
        report.history.append({"epoch": epoch, "task": total / steps})
    model.eval()
    report.wall_time = time.perf_counter() - t0
    return model, report


def init_u_from_teacher(m_model: MModel, cfg: TrainConfig, m1: int) -> UModel:
    u = UModel(cfg, m1)
    try:
        u.mri_backbone.load_state_dict(m_model.mri_backbone.state_dict())
        u.head.load_state_dict(m_model.head.state_dict())
    except RuntimeError as exc:
        raise ValueError(f"student and teacher MRI backbones differ: {exc}") from None
    u.generator.reset_parameters(make_rng(cfg.seed, "init/u/gen"))
    u.discriminator.reset_parameters(make_rng(cfg.seed, "init/u/disc"))
    return u


class UTrainer:
    """Holds the student, the teacher and the three optimizers for student training."""

    def __init__(self, train_set: MultimodalDataset, m_model: MModel, cfg: TrainConfig):
        _check_task(train_set, cfg)
        _require_gen(train_set)
        self.cfg = cfg
        self.dcfg = cfg.distill()
        self.ds = train_set
        self.teacher = m_model
        for p in m_model.parameters():
            p.requires_grad_(False)
        m_model.eval()
        self.u = init_u_from_teacher(m_model, cfg, train_set.x_mri.shape[1])
        self.u.set_dropout_generator(torch_generator(make_rng(cfg.seed, "dropout/u")))
        self.xm = _t(train_set.x_mri)
        self.y = _targets(train_set, cfg)
        with torch.no_grad():
            # teacher genetic backbone is frozen, so its representations are fixed
            self.z_gen = m_model.gen_backbone(_t(train_set.x_gen))
        kw = dict(lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.opt_d = Adam(self.u.discriminator.parameters(), **kw)
        self.opt_g = Adam(self.u.generator.parameters(), **kw)
        self.opt_b = Adam(self.u.backbone_parameters(), **kw)
        self.batch_rng = make_rng(cfg.seed, "batches/u")

    def _imitation(self, pred, teacher_pred):
        if self.cfg.task == "classification":
            return kl_imitation(pred, teacher_pred, self.dcfg.temperature)
        return regression_imitation(pred, teacher_pred)

    def step(self, idx: np.ndarray) -> Dict[str, float]:
        cfg, u, disc = self.cfg, self.u, self.u.discriminator
        ix = torch.from_numpy(idx)
        xm, y, real = self.xm[ix], self.y[ix], self.z_gen[ix]
        with torch.no_grad():
            teacher_pred = self.teacher.head(self.teacher.mri_backbone(xm), real)

        u.train()
        z = u.mri_backbone(xm)
        fake = u.generator(z)
        pred = u.head(z, fake)

        # (1) discriminator
        e_real, e_fake = disc.embed(real), disc.embed(fake.detach())
        s_real = sphere_scores(project_to_sphere(e_real, disc.center), disc.axis).scores
        s_fake = sphere_scores(project_to_sphere(e_fake, disc.center), disc.axis).scores
        emb = torch.cat([e_real, e_fake])
        l_d = d_loss(s_real, s_fake, cfg.eta)
        l_c = center_loss(emb, disc.center)
        l_dist = distance_loss(emb, disc.center)
        self.opt_d.step(l_d + l_c + l_dist, op="discriminator loss")
        disc.normalize_axis()

        # (2) generator and (3) backbone + head, from the same forward pass
        l_task = task_loss(pred, y, cfg.task)
        l_im = self._imitation(pred, teacher_pred)
        if cfg.alpha > 0:
            s_real = disc.score(real).scores.detach()
            s_fake = disc.score(fake).scores
            l_g = g_loss(s_real, s_fake, cfg.eta)
        else:
            l_g = torch.zeros(())
        backbone_loss, generator_loss = total_u_loss(cfg.task_weight * l_task, l_g, l_im, self.dcfg)
        gen_params = self.opt_g.params
        grads_g = backward(generator_loss, gen_params, op="generator loss")
        train_backbone = cfg.task_weight > 0 or cfg.beta > 0
        if train_backbone:
            grads_b = backward(backbone_loss, self.opt_b.params, op="backbone loss")
        adam_step(gen_params, grads_g, self.opt_g.state)
        if train_backbone:
            adam_step(self.opt_b.params, grads_b, self.opt_b.state)

        # (4) teacher MRI backbone follows the student
        ema_update(self.teacher.mri_backbone.parameters(), u.mri_backbone.parameters(),
                   self.dcfg.gamma)
        parts = {"task": l_task, "imitation": l_im, "d_loss": l_d, "g_loss": l_g,
                 "center": l_c, "distance": l_dist}
        return {k: float(v.detach()) for k, v in parts.items()}

    def run(self, epochs: Optional[int] = None):
        t0 = time.perf_counter()
        epochs = self.cfg.epochs_u if epochs is None else epochs
        report = TrainReport("u", self.cfg.seed)
        for epoch in range(epochs):
            sums: Dict[str, float] = {}
            batches = make_batches(len(self.ds), self.cfg.batch_size, self.batch_rng)
            for step, idx in enumerate(batches):
                try:
                    rec = self.step(idx)
                except NonFiniteError as exc:
                    raise TrainingDivergedError("u", epoch, step, exc) from exc
                for k, v in rec.items():
                    sums[k] = sums.get(k, 0.0) + v
            report.history.append({"epoch": epoch, **_mean_history(sums, len(batches))})
        self.u.eval()
        report.wall_time = time.perf_counter() - t0
        return self.u, report


def train_u(train_set: MultimodalDataset, m_model: MModel, cfg: TrainConfig):
    """Train the MRI-only student against a pretrained teacher. Returns (model, report).

    The teacher is mutated: its MRI backbone tracks the student by EMA, all
    other teacher parameters stay frozen.
    """
    return UTrainer(train_set, m_model, cfg).run()


# --------------------------------------------------------------------------
# inference

@torch.no_grad()
def predict_u(u_model: nn.Module, x_mri) -> np.ndarray:
    """Student inference from MRI features alone."""
    u_model.eval()
    x = _t(x_mri)
    n_in = u_model.mri_backbone.n_features
    if x.shape[-1] != n_in:
        raise ValueError(f"expected {n_in} MRI features, got {x.shape[-1]}")
    return u_model(x).numpy()


@torch.no_grad()
def predict_m(m_model: MModel, x_mri, x_gen) -> np.ndarray:
    m_model.eval()
    return m_model(_t(x_mri), _t(x_gen)).numpy()


def predict(model: nn.Module, ds: MultimodalDataset) -> np.ndarray:
    if isinstance(model, MModel):
        _require_gen(ds)
        return predict_m(model, ds.x_mri, ds.x_gen)
    return predict_u(model, ds.x_mri)


def score_predictions(pred: np.ndarray, y: np.ndarray, task: str, n_classes: int = 0) -> Dict:
    if len(y) == 0:
        raise ValueError("empty dataset")
    if task == "regression":
        return {"rmse": rmse(pred, y), "r2": r2(pred, y)}
    labels = np.argmax(pred, axis=-1)  # ties go to the lowest index
    return macro_classification_metrics(labels, y.astype(np.int64), n_classes or pred.shape[-1])


def evaluate(model: nn.Module, dataset: MultimodalDataset, task: str) -> Dict:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return score_predictions(predict(model, dataset), dataset.y, task, dataset.n_classes)
