"""Few-shot pixel classifier on (amalgamated) diffusion features."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..amalgamation import AssignerEnsemble, TrainConfig, TrainResult, amalgamate, train_ensemble
from ..errors import ValidationError
from .metrics import IGNORE_INDEX, miou


def _member(in_dim: int, classes: int, hidden: tuple[int, int]) -> nn.Sequential:
    h1, h2 = hidden
    return nn.Sequential(
        nn.Conv2d(in_dim, h1, 1),
        nn.ReLU(),
        nn.BatchNorm2d(h1),
        nn.Conv2d(h1, h2, 1),
        nn.ReLU(),
        nn.BatchNorm2d(h2),
        nn.Conv2d(h2, classes, 1),
    )


class PixelClassifier(nn.Module):
    """Ensemble of per-pixel MLPs; prediction is the argmax of the mean logits."""

    def __init__(self, input_dim: int, classes: int, ensemble_size: int = 3, hidden: tuple[int, int] = (128, 32)):
        super().__init__()
        if ensemble_size < 1:
            raise ValidationError("ensemble_size must be >= 1")
        self.input_dim, self.classes = input_dim, classes
        self.members = nn.ModuleList([_member(input_dim, classes, hidden) for _ in range(ensemble_size)])

    @classmethod
    def from_members(cls, members: list[nn.Module], input_dim: int, classes: int) -> "PixelClassifier":
        obj = cls.__new__(cls)
        nn.Module.__init__(obj)
        obj.input_dim, obj.classes = input_dim, classes
        obj.members = nn.ModuleList(members)
        return obj

    @property
    def ensemble_size(self) -> int:
        return len(self.members)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[1] != self.input_dim:
            raise ValidationError(f"classifier expects {self.input_dim} channels, got {x.shape[1]}")
        return [m(x) for m in self.members]


def ensemble_ce(logits: list[torch.Tensor], target: torch.Tensor) -> torch.Tensor:
    return torch.stack([F.cross_entropy(l, target, ignore_index=IGNORE_INDEX) for l in logits]).mean()


@dataclass
class SegmenterConfig:
    classes: int
    ensemble_size: int = 3
    hidden: tuple[int, int] = (128, 32)
    n_assigners: int = 2
    arch: str = "mlp_on_pooled"
    assigner_hidden: int = 128
    gamma1: float = 0.1
    gamma2: float = 0.1
    batch_size: int = 8
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class TrainedSegmenter:
    ensemble: AssignerEnsemble
    classifier: PixelClassifier
    config: SegmenterConfig
    history: TrainResult

    def eval(self):
        self.ensemble.eval()
        self.classifier.eval()
        return self


def _features_tensor(features) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(features) if not torch.is_tensor(features) else features).float()
    if t.ndim == 4:  # single feature per sample
        t = t[:, None]
    if t.ndim != 5:
        raise ValidationError(f"expected (S, b, c, h, w) features, got {tuple(t.shape)}")
    return t


def align_labels(labels, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour resample of integer masks to the feature grid."""
    lab = torch.as_tensor(np.asarray(labels)).long()
    if lab.ndim == 2:
        lab = lab[None]
    if tuple(lab.shape[-2:]) == tuple(size):
        return lab
    return F.interpolate(lab[:, None].float(), size=size, mode="nearest")[:, 0].long()


def _appended(attention, extra, S, size) -> torch.Tensor | None:
    parts = [torch.as_tensor(np.asarray(a)).float() for a in (attention, extra) if a is not None]
    if not parts:
        return None
    out = []
    for p in parts:
        if p.ndim != 4 or p.shape[0] != S:
            raise ValidationError("appended features need shape (S, k, h, w)")
        if tuple(p.shape[-2:]) != tuple(size):
            p = F.interpolate(p, size=tuple(size), mode="bilinear", align_corners=False)
        out.append(p)
    return torch.cat(out, dim=1)


def train_segmenter(
    features,
    labels,
    config: SegmenterConfig,
    attention=None,
    extra=None,
) -> TrainedSegmenter:
    """Fit assigners and pixel classifier jointly on the regularised cross-entropy.

    ``features``: (S, b, c, h, w), or (S, c, h, w) for a single un-amalgamated
    feature. ``attention``/``extra``: optional (S, k, h, w) maps appended
    after amalgamation without weighting.
    """
    X = _features_tensor(features)
    S, b, c, h, w = X.shape
    Y = align_labels(labels, (h, w))
    if Y.shape[0] != S:
        raise ValidationError(f"{Y.shape[0]} label maps for {S} samples")
    bad = (Y != IGNORE_INDEX) & ((Y < 0) | (Y >= config.classes))
    if bad.any():
        raise ValidationError(f"label id outside [0, {config.classes})")
    A = _appended(attention, extra, S, (h, w))
    torch.manual_seed(config.train.seed)
    n = config.n_assigners if b > 1 else 1
    ens = AssignerEnsemble(n, b, c, config.arch, config.assigner_hidden, config.gamma1, config.gamma2)
    in_dim = n * c + (A.shape[1] if A is not None else 0)
    clf = PixelClassifier(in_dim, config.classes, config.ensemble_size, tuple(config.hidden))

    bs = config.batch_size

    def batches(epoch):
        g = torch.Generator().manual_seed(config.train.seed * 100003 + epoch)
        perm = torch.randperm(S, generator=g)
        for i in range(0, S, bs):
            idx = perm[i : i + bs]
            if A is None:
                yield X[idx], Y[idx]
            else:
                yield X[idx], Y[idx], A[idx]

    ens.train()
    clf.train()
    history = train_ensemble(ens, clf, batches, ensemble_ce, config.train)
    return TrainedSegmenter(ens, clf, config, history).eval()


@torch.no_grad()
def segment_logits(model: TrainedSegmenter, features, attention=None, extra=None) -> torch.Tensor:
    X = _features_tensor(features)
    if X.shape[1] != model.ensemble.b or X.shape[2] != model.ensemble.channels:
        raise ValidationError(
            f"model expects b={model.ensemble.b}, c={model.ensemble.channels}; got {tuple(X.shape[1:3])}"
        )
    A = _appended(attention, extra, X.shape[0], X.shape[-2:])
    model.eval()
    fused = amalgamate(model.ensemble(X), X, A)
    return torch.stack(model.classifier(fused)).mean(dim=0)


def predict_segmentation(
    model: TrainedSegmenter, features, attention=None, extra=None, out_size: tuple[int, int] | None = None
) -> np.ndarray:
    """Per-pixel argmax of ensemble-mean logits.

    ``features`` is one sample, (b, c, h, w) or (c, h, w), or a batch
    (S, b, c, h, w). ``out_size`` upsamples the logits bilinearly before the
    argmax; ties go to the lowest class index.
    """
    feats = torch.as_tensor(np.asarray(features) if not torch.is_tensor(features) else features)
    single = feats.ndim <= 4
    if feats.ndim == 3:
        feats = feats[None]
    if single:
        feats = feats[None]
        attention = None if attention is None else np.asarray(attention)[None]
        extra = None if extra is None else np.asarray(extra)[None]
    logits = segment_logits(model, feats, attention, extra)
    if out_size is not None and tuple(logits.shape[-2:]) != tuple(out_size):
        logits = F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)
    pred = logits.argmax(dim=1).numpy()
    return pred[0] if single else pred


def with_members(model: TrainedSegmenter, members: list[nn.Module]) -> TrainedSegmenter:
    clf = PixelClassifier.from_members(members, model.classifier.input_dim, model.classifier.classes)
    return TrainedSegmenter(model.ensemble, clf, model.config, model.history).eval()


def clone_members(model: TrainedSegmenter, indices: list[int]) -> list[nn.Module]:
    return [copy.deepcopy(model.classifier.members[i]) for i in indices]


@dataclass
class AblationRow:
    combos: tuple[str, ...]
    miou: float
    aacc: float
    macc: float

    def to_dict(self):
        return {"combos": list(self.combos), "miou": self.miou, "aacc": self.aacc, "macc": self.macc}


def run_ablation(
    train_features: dict[str, np.ndarray],
    train_labels,
    test_features: dict[str, np.ndarray],
    test_labels,
    subsets: list[tuple[str, ...]],
    config: SegmenterConfig,
) -> list[AblationRow]:
    """Trains one segmenter per combo subset and scores each on the test split."""
    rows = []
    for subset in subsets:
        missing = [c for c in subset if c not in train_features or c not in test_features]
        if missing:
            raise ValidationError(f"ablation subset references unknown combos {missing}")
        Xtr = np.stack([train_features[c] for c in subset], axis=1)
        Xte = np.stack([test_features[c] for c in subset], axis=1)
        model = train_segmenter(Xtr, train_labels, config)
        gts = np.asarray(test_labels)
        preds = predict_segmentation(model, Xte, out_size=tuple(gts.shape[-2:]))
        sc = miou(list(preds), list(gts), config.classes)
        rows.append(AblationRow(tuple(subset), sc.miou, sc.aacc, sc.macc))
    return rows
