"""Content-shift measurement on feature maps and PCA visualisation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError
from .feature_store import FeatureBundle

LAPLACIAN_4 = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)
LAPLACIAN_8 = np.array([[1, 1, 1], [1, -8, 1], [1, 1, 1]], dtype=np.float64)


def _as_chw(feat) -> np.ndarray:
    a = np.asarray(feat, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValidationError(f"expected (c, h, w) feature, got shape {a.shape}")
    return a


def laplacian_magnitude(feat, stencil: np.ndarray = LAPLACIAN_4, border: str = "edge") -> np.ndarray:
    """Per-pixel l2 norm over channels of the per-channel discrete Laplacian.

    Borders are padded with ``np.pad`` mode ``border`` (replicate by default).
    """
    a = _as_chw(feat)
    c, h, w = a.shape
    if h < 3 or w < 3:
        raise ValidationError(f"spatial size {h}x{w} too small for a 3x3 stencil")
    p = np.pad(a, ((0, 0), (1, 1), (1, 1)), mode=border)
    out = np.zeros_like(a)
    for di in range(3):
        for dj in range(3):
            k = stencil[di, dj]
            if k:
                out += k * p[:, di : di + h, dj : dj + w]
    return np.sqrt(np.sum(out * out, axis=0))


def contour_diff(feat, ref, **lap_kwargs) -> float:
    """Sum over pixels of the absolute difference of Laplacian magnitudes."""
    a, b = _as_chw(feat), _as_chw(ref)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.abs(laplacian_magnitude(b, **lap_kwargs) - laplacian_magnitude(a, **lap_kwargs)).sum())


@dataclass
class ShiftScoreReport:
    diff: float
    diff_anchor: float
    score: float
    ref_id: str = "ref"
    anchor_id: str = "anchor"

    def to_dict(self):
        return asdict(self)


def shift_score(feat, ref, anchor_feat, ref_id: str = "ref", anchor_id: str = "anchor", **lap_kwargs) -> ShiftScoreReport:
    """1 when ``feat`` matches ``ref`` exactly, 0 at the anchor's level of shift."""
    diff_anchor = contour_diff(anchor_feat, ref, **lap_kwargs)
    if diff_anchor <= 0.0:
        raise ValidationError("anchor has zero contour difference to the reference; score undefined")
    diff = contour_diff(feat, ref, **lap_kwargs)
    return ShiftScoreReport(diff, diff_anchor, (diff_anchor - diff) / diff_anchor, ref_id, anchor_id)


@dataclass
class BundleShiftReport:
    combo_id: str
    image_id: str
    score: float
    entries: dict[str, ShiftScoreReport] = field(default_factory=dict)

    def to_dict(self):
        return {
            "combo_id": self.combo_id,
            "image_id": self.image_id,
            "score": self.score,
            "entries": {k: v.to_dict() for k, v in self.entries.items()},
        }


def bundle_shift_score(
    bundle: FeatureBundle, ref: FeatureBundle, anchor: FeatureBundle, **lap_kwargs
) -> BundleShiftReport:
    """Scores each conv entry against the reference/anchor bundles and averages them."""
    r, a = dict(ref.conv_features), dict(anchor.conv_features)
    entries = {}
    for name, feat in bundle.conv_features:
        if name not in r or name not in a:
            raise ValidationError(f"reference or anchor lacks conv entry {name!r}")
        entries[name] = shift_score(
            feat, r[name], a[name], ref_id=f"{ref.combo_id}@t{ref.timestep}",
            anchor_id=f"{anchor.combo_id}@t{anchor.timestep}", **lap_kwargs,
        )
    if not entries:
        raise ValidationError("bundle has no conv features to score")
    score = float(np.mean([e.score for e in entries.values()]))
    return BundleShiftReport(bundle.combo_id, bundle.image_id, score, entries)


def pca_components(feat, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` principal axes (k, c) and eigenvalues of the pixel population.

    Sign convention: the largest-magnitude loading of every axis is positive.
    """
    a = _as_chw(feat)
    c, h, w = a.shape
    x = a.reshape(c, h * w).T
    x = x - x.mean(axis=0, keepdims=True)
    cov = x.T @ x / max(h * w - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")[:k]
    vals, axes = vals[order], vecs[:, order].T
    for i in range(axes.shape[0]):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    return axes, vals


def visualize_pca_rgb(feat) -> np.ndarray:
    """(h, w, 3) uint8 image of the top three principal components, min-max scaled."""
    a = _as_chw(feat)
    c, h, w = a.shape
    if c < 3:
        raise ValidationError(f"need at least 3 channels for PCA to RGB, got {c}")
    x = a.reshape(c, h * w).T
    x = x - x.mean(axis=0, keepdims=True)
    if not np.any(np.abs(x) > 0):
        raise ValidationError("feature has zero variance")
    axes, _ = pca_components(a, 3)
    proj = x @ axes.T
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    rgb = np.where(hi > lo, (proj - lo) / span, 0.0) * 255.0
    return np.round(rgb).astype(np.uint8).reshape(h, w, 3)


def visualize_pca_rgb_joint(feats: list) -> list[np.ndarray]:
    """PCA fitted on the union of several maps so colours are comparable across panels."""
    arrs = [_as_chw(f) for f in feats]
    c = arrs[0].shape[0]
    if any(a.shape[0] != c for a in arrs):
        raise ValidationError("joint PCA requires equal channel counts")
    pop = np.concatenate([a.reshape(c, -1) for a in arrs], axis=1)
    joint = visualize_pca_rgb(pop[:, None, :])[0]
    out, start = [], 0
    for a in arrs:
        n = a.shape[1] * a.shape[2]
        out.append(joint[start : start + n].reshape(a.shape[1], a.shape[2], 3))
        start += n
    return out
