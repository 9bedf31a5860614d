"""Keypoint transfer by feature matching, and PCK scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..amalgamation import AssignerEnsemble, TrainConfig, amalgamate, make_optimizer, regularized_loss, weight_stats
from ..errors import DivergenceError, ValidationError


@dataclass
class KeypointSet:
    names: list[str]
    xy: np.ndarray  # (N, 2) pixel coords, x then y
    image_size: tuple[int, int]  # (h, w)
    bbox: tuple[float, float, float, float] | None = None  # x0, y0, x1, y1

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if len(self.names) != len(self.xy):
            raise ValidationError("one name per keypoint required")
        h, w = self.image_size
        if ((self.xy < 0) | (self.xy > [w - 1, h - 1])).any():
            raise ValidationError("keypoint outside image bounds")

    def by_name(self) -> dict[str, np.ndarray]:
        return {n: p for n, p in zip(self.names, self.xy)}


def _to_feature_coords(xy: np.ndarray, image_size, feat_size) -> np.ndarray:
    (h, w), (fh, fw) = image_size, feat_size
    return np.stack([(xy[:, 0] + 0.5) * fw / w - 0.5, (xy[:, 1] + 0.5) * fh / h - 0.5], axis=1)


def _to_pixel_coords(fxy: np.ndarray, image_size, feat_size) -> np.ndarray:
    (h, w), (fh, fw) = image_size, feat_size
    return np.stack([(fxy[:, 0] + 0.5) * w / fw - 0.5, (fxy[:, 1] + 0.5) * h / fh - 0.5], axis=1)


def sample_features(feat: torch.Tensor, fxy: np.ndarray) -> torch.Tensor:
    """Bilinear samples (N, c) at feature-grid coordinates, border-clamped."""
    c, fh, fw = feat.shape
    x = np.clip(fxy[:, 0], 0, fw - 1)
    y = np.clip(fxy[:, 1], 0, fh - 1)
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    x1, y1 = np.minimum(x0 + 1, fw - 1), np.minimum(y0 + 1, fh - 1)
    ax = torch.as_tensor(x - x0, dtype=feat.dtype)[:, None]
    ay = torch.as_tensor(y - y0, dtype=feat.dtype)[:, None]
    f = feat.permute(1, 2, 0)
    top = f[y0, x0] * (1 - ax) + f[y0, x1] * ax
    bot = f[y1, x0] * (1 - ax) + f[y1, x1] * ax
    return top * (1 - ay) + bot * ay


def correspond_nn(src_feat, tgt_feat, src_xy, src_size, tgt_size) -> np.ndarray:
    """Target pixel locations of maximal cosine similarity to each source keypoint.

    Ties resolve to the smallest row-major index of the target feature grid.
    """
    s = torch.as_tensor(np.asarray(src_feat), dtype=torch.float64)
    t = torch.as_tensor(np.asarray(tgt_feat), dtype=torch.float64)
    if s.ndim != 3 or t.ndim != 3 or s.shape[0] != t.shape[0]:
        raise ValidationError(f"incompatible features {tuple(s.shape)} and {tuple(t.shape)}")
    xy = np.asarray(src_xy, dtype=np.float64).reshape(-1, 2)
    h, w = src_size
    if ((xy < 0) | (xy > [w - 1, h - 1])).any():
        raise ValidationError("source keypoint outside image bounds")
    q = sample_features(s, _to_feature_coords(xy, src_size, s.shape[1:]))
    c, fh, fw = t.shape
    grid = t.reshape(c, -1).T
    q = F.normalize(q, dim=1)
    grid = F.normalize(grid, dim=1)
    sim = q @ grid.T
    idx = torch.argmax(sim, dim=1).numpy()
    fxy = np.stack([idx % fw, idx // fw], axis=1).astype(np.float64)
    return _to_pixel_coords(fxy, tgt_size, (fh, fw))


def pck(pred_xy, gt_xy, image_size=None, bbox=None, alpha: float = 0.1) -> float:
    """Fraction of keypoints within ``alpha * max(side)`` (inclusive) of the ground truth.

    The reference side is the image's when ``bbox`` is None, the box's otherwise.
    """
    p = np.asarray(pred_xy, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    if len(g) == 0:
        raise ValidationError("empty keypoint list")
    if p.shape != g.shape:
        raise ValidationError("prediction and ground-truth keypoint counts differ")
    if bbox is not None:
        x0, y0, x1, y1 = bbox
        side = max(x1 - x0, y1 - y0)
    elif image_size is not None:
        side = max(image_size)
    else:
        raise ValidationError("pck needs image_size or bbox")
    err = np.linalg.norm(p - g, axis=1)
    return float(np.mean(err <= alpha * side))


def pck_named(pred: dict[str, np.ndarray], gt: KeypointSet, alpha: float = 0.1, use_bbox: bool = False) -> float:
    names = gt.names
    p = np.stack([pred[n] for n in names])
    return pck(p, gt.xy, gt.image_size, gt.bbox if use_bbox else None, alpha)


class ConvCorrespondenceHead(nn.Module):
    """One 3x3 conv after each assigner's weighted sum.

    With ``conv=False`` the head is the bare amalgamation, which is the
    nearest-neighbour setting.
    """

    def __init__(self, ensemble: AssignerEnsemble, out_channels: int | None = None, conv: bool = True):
        super().__init__()
        self.ensemble = ensemble
        self.use_conv = conv
        c = ensemble.channels
        self.out_channels = (out_channels or c) if conv else c
        self.convs = nn.ModuleList(
            [nn.Conv2d(c, self.out_channels, 3, padding=1) for _ in range(ensemble.n)] if conv else []
        )

    def forward(self, features: torch.Tensor):
        W = self.ensemble(features)
        fused = amalgamate(W, features)
        if not self.use_conv:
            return fused, W
        B, _, h, w = fused.shape
        blocks = fused.reshape(B, self.ensemble.n, -1, h, w)
        out = torch.cat([conv(blocks[:, j]) for j, conv in enumerate(self.convs)], dim=1)
        return out, W


@dataclass
class CorrespondencePair:
    src_features: torch.Tensor  # (b, c, h, w)
    tgt_features: torch.Tensor
    src: KeypointSet
    tgt: KeypointSet


@dataclass
class CorrespondenceTrainResult:
    losses: list[float] = field(default_factory=list)
    stats_history: list = field(default_factory=list)


def keypoint_contrastive_loss(src_map, tgt_map, src: KeypointSet, tgt: KeypointSet, temperature: float = 0.1):
    """InfoNCE: each source keypoint should match its target cell against all other cells."""
    common = [n for n in src.names if n in set(tgt.names)]
    if not common:
        return None
    sp, tp = src.by_name(), tgt.by_name()
    sxy = np.stack([sp[n] for n in common])
    txy = np.stack([tp[n] for n in common])
    q = F.normalize(sample_features(src_map, _to_feature_coords(sxy, src.image_size, src_map.shape[1:])), dim=1)
    c, fh, fw = tgt_map.shape
    grid = F.normalize(tgt_map.reshape(c, -1).T, dim=1)
    fxy = np.rint(_to_feature_coords(txy, tgt.image_size, (fh, fw)))
    fxy = np.clip(fxy, 0, [fw - 1, fh - 1]).astype(int)
    target = torch.as_tensor(fxy[:, 1] * fw + fxy[:, 0])
    return F.cross_entropy(q @ grid.T / temperature, target)


def train_correspondence(
    head: ConvCorrespondenceHead, pairs: list[CorrespondencePair], cfg: TrainConfig | None = None
) -> CorrespondenceTrainResult:
    cfg = cfg or TrainConfig()
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(head.parameters(), cfg)
    res = CorrespondenceTrainResult()
    ens = head.ensemble
    batch_id = 0
    for _epoch in range(cfg.epochs):
        Ws, losses = [], []
        for pair in pairs:
            feats = torch.stack([pair.src_features, pair.tgt_features])
            out, W = head(feats)
            task = keypoint_contrastive_loss(out[0], out[1], pair.src, pair.tgt)
            if task is None:
                continue
            loss = regularized_loss(task, W, ens.gamma1, ens.gamma2)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss on pair {batch_id}", batch_id)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            Ws.append(W.detach())
            batch_id += 1
        res.losses.append(float(np.mean(losses)) if losses else float("nan"))
        if Ws:
            res.stats_history.append(weight_stats(torch.cat(Ws)))
    return res
