"""Regularised weight assignment for amalgamating multiple feature maps.

``n`` assigners each score the ``b`` candidate features of a sample and a
softmax over the ``b`` scores gives that assigner's weight vector. Each
assigner's weighted sum of features forms one block of the output, and the
blocks are concatenated. Training subtracts a sparsity term (l2 norm of each
weight vector) and a diversity term (pairwise l2 distances between weight
vectors) from the task loss.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save_file
from torch import nn

from .errors import DivergenceError, ValidationError

ARCHS = ("mlp_on_pooled", "small_cnn")
GAMMA_GRID = (0.0, 0.01, 0.1, 1.0)


class _MLPAssigner(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, r):  # r: (..., c, h, w)
        pooled = r.mean(dim=(-2, -1))
        return self.fc2(F.relu(self.fc1(pooled))).squeeze(-1)


class _CNNAssigner(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, hidden, 3, padding=1)
        self.fc = nn.Linear(hidden, 1)

    def forward(self, r):
        lead = r.shape[:-3]
        x = r.reshape(-1, *r.shape[-3:])
        x = F.relu(self.conv(x)).mean(dim=(-2, -1))
        return self.fc(x).squeeze(-1).reshape(lead)


class AssignerEnsemble(nn.Module):
    """``n`` weight assigners over ``b`` features of ``channels`` channels each."""

    def __init__(
        self,
        n: int,
        b: int,
        channels: int,
        arch: str = "mlp_on_pooled",
        hidden: int = 128,
        gamma1: float = 0.1,
        gamma2: float = 0.1,
    ):
        super().__init__()
        if n < 1 or b < 1:
            raise ValidationError("assigner count n and feature count b must be >= 1")
        if arch not in ARCHS:
            raise ValidationError(f"unknown assigner arch {arch!r}")
        if gamma1 < 0 or gamma2 < 0:
            raise ValidationError("regularisation weights must be non-negative")
        self.n, self.b, self.channels, self.arch, self.hidden = n, b, channels, arch, hidden
        self.gamma1, self.gamma2 = float(gamma1), float(gamma2)
        cls = _MLPAssigner if arch == "mlp_on_pooled" else _CNNAssigner
        self.assigners = nn.ModuleList([cls(channels, hidden) for _ in range(n)])

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        # features: (B, b, c, h, w) -> (B, n, b)
        return torch.stack([f(features) for f in self.assigners], dim=1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(features), dim=-1)

    def config(self) -> dict:
        return {
            "n": self.n,
            "b": self.b,
            "channels": self.channels,
            "arch": self.arch,
            "hidden": self.hidden,
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
        }

    def save(self, directory: str | os.PathLike) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_file({k: v.contiguous() for k, v in self.state_dict().items()}, str(d / "assigners.safetensors"))
        (d / "assigners.json").write_text(json.dumps(self.config(), indent=2) + "\n")
        return d

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "AssignerEnsemble":
        d = Path(directory)
        ens = cls(**json.loads((d / "assigners.json").read_text()))
        ens.load_state_dict(load_file(str(d / "assigners.safetensors")))
        return ens


def _stack_features(features) -> torch.Tensor:
    """Sequence of b (c, h, w) maps, or a (b, c, h, w) / (B, b, c, h, w) tensor."""
    if isinstance(features, (list, tuple)):
        shapes = {tuple(np.shape(f)) for f in features}
        if len(shapes) != 1:
            raise ValidationError(f"features disagree in shape: {sorted(shapes)}")
        features = torch.stack([torch.as_tensor(f) for f in features])
    t = torch.as_tensor(features)
    if t.ndim == 4:
        t = t[None]
    if t.ndim != 5:
        raise ValidationError(f"expected (b, c, h, w) features, got {tuple(t.shape)}")
    return t


def assign_weights(ensemble: AssignerEnsemble, features) -> torch.Tensor:
    """(n, b) weight matrix for one sample, or (B, n, b) for a batch."""
    single = isinstance(features, (list, tuple)) or np.ndim(features) == 4
    t = _stack_features(features).float()
    if t.shape[1] != ensemble.b or t.shape[2] != ensemble.channels:
        raise ValidationError(
            f"ensemble expects b={ensemble.b}, c={ensemble.channels}; got {tuple(t.shape[1:3])}"
        )
    w = ensemble(t)
    return w[0] if single else w


def check_rows(W: torch.Tensor, tol: float = 1e-5) -> None:
    if (W < -tol).any():
        raise ValidationError("weights must be non-negative")
    err = (W.sum(dim=-1) - 1.0).abs().max().item()
    if err > tol:
        raise ValidationError(f"weight rows must sum to 1 (max deviation {err:.3g})")


def amalgamate(W, features, attention=None, tol: float = 1e-5):
    """Concatenate the ``n`` weighted sums of the ``b`` features; ``attention`` is appended as-is.

    Accepts a single sample (``W``: (n, b), features (b, c, h, w)) or a batch
    (``W``: (B, n, b), features (B, b, c, h, w)). Numpy in, numpy out.
    """
    as_numpy = isinstance(W, np.ndarray)
    Wt = torch.as_tensor(W)
    ft = _stack_features(features)
    batched = Wt.ndim == 3
    if not batched:
        Wt = Wt[None]
    if ft.shape[0] != Wt.shape[0] or ft.shape[1] != Wt.shape[2]:
        raise ValidationError(f"weights {tuple(Wt.shape)} incompatible with features {tuple(ft.shape)}")
    check_rows(Wt, tol)
    Wt = Wt.to(ft.dtype)
    B, b, c, h, w = ft.shape
    out = torch.einsum("znb,zbchw->znchw", Wt, ft).reshape(B, -1, h, w)
    if attention is not None:
        at = torch.as_tensor(attention).to(out.dtype)
        if at.ndim == 3:
            at = at[None].expand(B, -1, -1, -1)
        if at.shape[-2:] != out.shape[-2:]:
            at = F.interpolate(at, size=(h, w), mode="bilinear", align_corners=False)
        out = torch.cat([out, at], dim=1)
    if not batched:
        out = out[0]
    return out.numpy() if as_numpy else out


def _safe_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # subgradient 0 at the origin
    sq = (x * x).sum(dim=dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def regularizer(W, gamma1: float, gamma2: float):
    """The (signed) regularisation added to the task loss, averaged over a batch."""
    Wt = torch.as_tensor(W)
    if Wt.ndim == 2:
        Wt = Wt[None]
    sparsity = _safe_norm(Wt).sum(dim=-1)
    diff = Wt[:, :, None, :] - Wt[:, None, :, :]
    diversity = _safe_norm(diff).sum(dim=(-2, -1))  # ordered pairs; diagonal is zero
    return (-gamma1 * sparsity - 0.5 * gamma2 * diversity).mean()


def regularized_loss(task_loss, W, gamma1: float = 0.1, gamma2: float = 0.1):
    """task_loss - g1 * sum_j ||w^j|| - g2/2 * sum_j sum_{k != j} ||w^j - w^k||."""
    if gamma1 == 0 and gamma2 == 0:
        return task_loss
    Wt = torch.as_tensor(W)
    if Wt.ndim not in (2, 3):
        raise ValidationError(f"W must be (n, b) or (B, n, b), got {tuple(Wt.shape)}")
    reg = regularizer(Wt, gamma1, gamma2)
    if torch.is_tensor(task_loss) or torch.is_tensor(W):
        return task_loss + reg
    return float(task_loss) + float(reg)


def regularizer_grad(W: np.ndarray, gamma1: float, gamma2: float) -> np.ndarray:
    """Closed-form gradient of the regulariser w.r.t. a single (n, b) matrix."""
    W = np.asarray(W, dtype=np.float64)
    n = W.shape[0]
    g = np.zeros_like(W)
    for j in range(n):
        nj = np.linalg.norm(W[j])
        if nj > 0:
            g[j] -= gamma1 * W[j] / nj
        for k in range(n):
            if k == j:
                continue
            d = W[j] - W[k]
            nd = np.linalg.norm(d)
            if nd > 0:
                # each unordered pair appears twice with weight g2/2
                g[j] -= gamma2 * d / nd
    return g


@dataclass
class WeightStats:
    mean_top1: float
    mean_top2: float
    mean_all: float
    overlap_top1_rate: float | None
    overlap_top2_rate: float | None
    no_overlap_rate: float | None = None

    def to_dict(self):
        return asdict(self)


def _topk_sets(w: np.ndarray, k: int) -> list[set[int]]:
    # stable descending sort: ties resolve to the smallest index; zero weights never count
    out = []
    for row in w:
        order = np.argsort(-row, kind="stable")[:k]
        out.append({int(i) for i in order if row[i] > 0})
    return out


def weight_stats(Ws) -> WeightStats:
    """Summary of weight matrices of shape (S, n, b) collected over a dataset."""
    W = np.asarray(torch.as_tensor(Ws).detach().cpu(), dtype=np.float64)
    if W.ndim == 2:
        W = W[None]
    if W.ndim != 3:
        raise ValidationError(f"expected (samples, n, b) weights, got {W.shape}")
    if np.abs(W.sum(-1) - 1).max() > 1e-5 or (W < -1e-12).any():
        raise ValidationError("weight rows must be probability vectors")
    S, n, b = W.shape
    srt = -np.sort(-W, axis=-1)
    top1 = float(srt[..., 0].mean())
    top2 = float(srt[..., : min(2, b)].mean())
    mean_all = float(W.mean())
    if n < 2:
        return WeightStats(top1, top2, mean_all, None, None, None)
    counts = np.zeros(3)
    for s in range(S):
        sets1 = _topk_sets(W[s], 1)
        sets2 = _topk_sets(W[s], 2)
        for j, k in itertools.combinations(range(n), 2):
            if sets1[j] & sets1[k]:
                counts[0] += 1
            elif sets2[j] & sets2[k]:
                counts[1] += 1
            else:
                counts[2] += 1
    rates = counts / counts.sum()
    return WeightStats(top1, top2, mean_all, float(rates[0]), float(rates[1]), float(rates[2]))


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-2
    weight_decay: float = 0.0
    seed: int = 0
    optimizer: str = "adam"


@dataclass
class TrainResult:
    stats_history: list[WeightStats] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)
    task_loss_history: list[float] = field(default_factory=list)

    def write_jsonl(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for epoch, (st, loss, task) in enumerate(
                zip(self.stats_history, self.loss_history, self.task_loss_history)
            ):
                rec = {"epoch": epoch, "loss": loss, "task_loss": task, **st.to_dict()}
                fh.write(json.dumps(rec) + "\n")


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)
    raise ValidationError(f"unknown optimizer {cfg.optimizer!r}")


Batch = tuple[torch.Tensor, torch.Tensor]


def train_ensemble(
    ensemble: AssignerEnsemble,
    head: nn.Module,
    batches: Callable[[int], Iterable[Batch]] | list[Batch],
    loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    cfg: TrainConfig | None = None,
) -> TrainResult:
    """Jointly fit ``ensemble`` and ``head`` on the regularised task loss.

    ``batches`` is a list of ``(features (B, b, c, h, w), target[, attention])``
    tuples or a callable ``epoch -> iterable`` of them. ``head`` maps the amalgamated
    feature (B, n*c, h, w) to whatever ``loss_fn`` consumes.
    """
    cfg = cfg or TrainConfig()
    torch.manual_seed(cfg.seed)
    params = list(ensemble.parameters()) + list(head.parameters())
    opt = make_optimizer(params, cfg)
    result = TrainResult()
    batch_id = 0
    for epoch in range(cfg.epochs):
        epoch_batches = batches(epoch) if callable(batches) else batches
        Ws, losses, tasks = [], [], []
        for feats, target, *rest in epoch_batches:
            W = ensemble(feats)
            fused = amalgamate(W, feats, rest[0] if rest else None)
            out = head(fused)
            task = loss_fn(out, target)
            loss = regularized_loss(task, W, ensemble.gamma1, ensemble.gamma2)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {batch_id}", batch_id)
            opt.zero_grad()
            loss.backward()
            opt.step()
            Ws.append(W.detach())
            losses.append(float(loss.detach()))
            tasks.append(float(task.detach()))
            batch_id += 1
        result.stats_history.append(weight_stats(torch.cat(Ws)))
        result.loss_history.append(float(np.mean(losses)))
        result.task_loss_history.append(float(np.mean(tasks)))
    return result


def regularizer_only_optimum(b: int, gamma1: float, grid: int = 20) -> float:
    """Max of ``gamma1 * ||w||`` over a lattice on the b-simplex; returns the optimal norm.

    Small-grid check that sparsity pressure favours simplex vertices.
    """
    best_val, best_norm = -math.inf, math.inf
    for comp in itertools.product(range(grid + 1), repeat=b - 1):
        if sum(comp) > grid:
            continue
        w = np.array([*comp, grid - sum(comp)], dtype=np.float64) / grid
        norm = float(np.linalg.norm(w))
        val = gamma1 * norm
        # ties go to the least concentrated point
        if val > best_val + 1e-15 or (abs(val - best_val) <= 1e-15 and norm < best_norm):
            best_val, best_norm = val, norm
    return best_norm


def gamma_grid(values: Iterable[float] = GAMMA_GRID) -> list[tuple[float, float]]:
    vals = list(values)
    return [(g1, g2) for g1 in vals for g2 in vals]
