"""Acceptance criteria, one test each. A PASS/FAIL line per criterion is printed in the summary."""

import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from gatefeat.amalgamation import (
    AssignerEnsemble,
    TrainConfig,
    amalgamate,
    regularized_loss,
    regularizer_grad,
    train_ensemble,
    weight_stats,
)
from gatefeat.downstream.correspondence import pck
from gatefeat.downstream.metrics import miou
from gatefeat.downstream.segmentation import SegmenterConfig, run_ablation
from gatefeat.extraction import ExtractionConfig, TinyBackend, add_noise, extract
from gatefeat.feature_store import TechniqueCombo, all_off
from gatefeat.shift_metric import contour_diff, shift_score


def naive_diff(a, b):
    """Double-loop 4-neighbour Laplacian magnitude difference with replicated borders."""
    def mag(f):
        c, h, w = f.shape
        out = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                s = 0.0
                for ch in range(c):
                    v = -4 * f[ch, i, j]
                    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                        v += f[ch, min(max(i + di, 0), h - 1), min(max(j + dj, 0), w - 1)]
                    s += v * v
                out[i, j] = np.sqrt(s)
        return out

    return float(np.abs(mag(a) - mag(b)).sum())


@pytest.mark.criterion(1, "shift metric exactness")
def test_c1_metric_exactness(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    for _ in range(100):
        c, h, w = rng.integers(1, 6), rng.integers(3, 12), rng.integers(3, 12)
        ref = rng.normal(size=(c, h, w))
        anchor = ref + rng.normal(size=(c, h, w))
        assert shift_score(ref, ref, anchor).score == 1.0
        assert shift_score(anchor, ref, anchor).score == 0.0
    worst = 0.0
    for _ in range(20):
        a, b = rng.normal(size=(2, 4, 8, 8))
        want = naive_diff(a, b)
        worst = max(worst, abs(contour_diff(a, b) - want) / want)
    record_property("max_rel_err", f"{worst:.1e}")
    assert worst < 1e-5
    assert time.perf_counter() - t0 < 10


@pytest.mark.criterion(2, "regularised loss value and gradients")
def test_c2_loss(record_property):
    W = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    val = float(regularized_loss(torch.tensor(0.0, dtype=torch.float64), W, 0.1, 0.1))
    assert abs(val - (-0.2 - 0.1 * np.sqrt(2))) < 1e-9

    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n, b = rng.integers(1, 4), rng.integers(2, 5)
        w0 = rng.dirichlet(np.ones(b), size=n)
        g1, g2 = rng.uniform(0.01, 0.5, 2)
        Wt = torch.tensor(w0, requires_grad=True)
        regularized_loss(torch.tensor(0.0, dtype=torch.float64), Wt, g1, g2).backward()
        fd = np.zeros_like(w0)
        eps = 1e-6
        for idx in np.ndindex(*w0.shape):
            wp, wm = w0.copy(), w0.copy()
            wp[idx] += eps
            wm[idx] -= eps
            f = lambda m: float(regularized_loss(torch.tensor(0.0, dtype=torch.float64), torch.tensor(m), g1, g2))
            fd[idx] = (f(wp) - f(wm)) / (2 * eps)
        for g in (Wt.grad.numpy(), regularizer_grad(w0, g1, g2)):
            worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    record_property("max_rel_err", f"{worst:.1e}")
    assert worst < 1e-4


@pytest.mark.criterion(3, "amalgamation oracle")
def test_c3_amalgamate(record_property):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n, b, c = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
        W = rng.dirichlet(np.ones(b), size=n)
        feats = rng.normal(size=(b, c, 6, 6))
        out = amalgamate(torch.tensor(W), torch.tensor(feats)).numpy()
        ref = np.zeros((n * c, 6, 6))
        for j in range(n):
            for k in range(b):
                for ch in range(c):
                    for y in range(6):
                        for x in range(6):
                            ref[j * c + ch, y, x] += W[j, k] * feats[k, ch, y, x]
        worst = max(worst, np.abs(out - ref).max())
        pick = rng.integers(0, b, size=n)
        sel = amalgamate(torch.tensor(np.eye(b)[pick]), torch.tensor(feats)).numpy()
        assert np.array_equal(sel, np.concatenate([feats[k] for k in pick]))
    record_property("max_abs_err", f"{worst:.1e}")
    assert worst < 1e-6


def _three_feature_task(seed, S=64, c=4, h=8, w=8, noise=(0.8, 1.0, 1.2)):
    """Three noisy views of one label map; a per-feature channel offset lets pooled assigners tell them apart."""
    g = torch.Generator().manual_seed(seed)
    y = (torch.rand(S, h, w, generator=g) > 0.5).long()
    feats = []
    for i, s in enumerate(noise):
        r = torch.randn(S, c, h, w, generator=g) * 0.5
        r[:, 0] = (2 * y - 1).float() + s * torch.randn(S, h, w, generator=g)
        r[:, 1] += i - 1.0
        feats.append(r)
    return torch.stack(feats, 1), y


def _fit_stats(seed, g1, g2, n=2, epochs=40):
    X, y = _three_feature_task(seed)
    torch.manual_seed(seed)
    ens = AssignerEnsemble(n, 3, 4, hidden=32, gamma1=g1, gamma2=g2)
    head = nn.Conv2d(n * 4, 2, 1)
    batches = [(X[i : i + 16], y[i : i + 16]) for i in range(0, len(X), 16)]
    train_ensemble(ens, head, batches, F.cross_entropy, TrainConfig(epochs=epochs, lr=1e-2, seed=seed))
    with torch.no_grad():
        return weight_stats(ens(X))


@pytest.mark.criterion(4, "regulariser trends on a synthetic 3-feature task")
def test_c4_regulariser_trends(record_property):
    t0 = time.perf_counter()
    seeds = range(5)
    top1 = {g: np.mean([_fit_stats(s, g, 0.0).mean_top1 for s in seeds]) for g in (0.0, 0.1)}
    overlap = {g: np.mean([_fit_stats(s, 0.0, g).overlap_top1_rate for s in seeds]) for g in (0.0, 0.1)}
    ratio = top1[0.1] / top1[0.0]
    drop = overlap[0.0] - overlap[0.1]
    record_property("top1_ratio", f"{ratio:.2f}")
    record_property("overlap_drop", f"{drop:.2f}")
    assert ratio >= 1.5
    assert drop >= 0.3
    assert time.perf_counter() - t0 < 300


def _signal_per_feature(seed, S=32, c=8, h=8, w=8, classes=3, noise=1.6):
    # independent noisy views of shared class prototypes, one per combo
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, (S, h, w))
    protos = np.random.default_rng(123).normal(size=(classes, c))
    feats = {
        name: (protos[y].transpose(0, 3, 1, 2) + noise * rng.normal(size=(S, c, h, w))).astype(np.float32)
        for name in ("base", "controlnet", "lora")
    }
    return feats, y


@pytest.mark.criterion(5, "ablation shape: accuracy grows with combos")
def test_c5_ablation_shape(record_property):
    t0 = time.perf_counter()
    tr, ytr = _signal_per_feature(0)
    te, yte = _signal_per_feature(1)
    cfg = SegmenterConfig(classes=3, ensemble_size=1, hidden=(32, 16), n_assigners=2, assigner_hidden=32,
                          gamma1=0.0, gamma2=0.0, batch_size=8, train=TrainConfig(epochs=30, lr=1e-2, seed=0))
    rows = run_ablation(tr, ytr, te, yte, [("base",), ("base", "controlnet"), ("base", "controlnet", "lora")], cfg)
    acc = [100 * r.aacc for r in rows]
    record_property("aacc", "/".join(f"{a:.1f}" for a in acc))
    assert acc[0] <= acc[1] <= acc[2]
    assert acc[2] - acc[0] >= 1.0
    assert time.perf_counter() - t0 < 300


@pytest.mark.criterion(6, "metric fixtures")
def test_c6_metric_fixtures():
    gt = np.zeros((4, 4), int)
    pred = np.zeros((4, 4), int)
    gt[0] = 1
    pred[0, :3] = 1
    pred[1, 0] = 1
    s = miou(pred, gt, 2)
    assert s.per_class_iou == [11 / 13, 0.6]
    assert (s.miou, s.aacc, s.macc) == ((11 / 13 + 0.6) / 2, 14 / 16, (11 / 12 + 3 / 4) / 2)
    kp = np.array([[0, 0], [10, 10], [20, 20], [30, 30]], float)
    assert pck(kp + [[1, 0], [0, 5], [6, 0], [-4, -4]], kp, image_size=(40, 32)) == 0.25


@pytest.mark.criterion(7, "tiny pipeline shapes and determinism")
def test_c7_pipeline():
    t0 = time.perf_counter()
    img = np.random.default_rng(0).integers(0, 256, (64, 64, 3)).astype(np.uint8)
    cfg = ExtractionConfig(timestep=50, resize_short_side=None, capture_attention=True, attention_resolution=(8, 8),
                           base_prompt="a photo", combo=TechniqueCombo("cn", use_controlnet=True))
    a = extract(img, cfg, TinyBackend(seed=0))
    b = extract(img, cfg, TinyBackend(seed=0))
    assert [(n, x.shape) for n, x in a.conv_features] == [
        ("up0", (32, 8, 8)), ("up1", (32, 8, 8)), ("up2", (16, 8, 8)), ("up3", (8, 8, 8)),
    ]
    assert a.attention_feature.shape == (len(a.attention_tokens), 8, 8)
    assert a.equals(b)
    x0 = torch.randn(4, 8, 8)
    assert torch.equal(add_noise(x0, 0, 0, TinyBackend(seed=0)), x0)
    assert time.perf_counter() - t0 < 60


SD15 = os.environ.get("GATEFEAT_SD15_PATH")
IMAGES = os.environ.get("GATEFEAT_SAMPLE_IMAGES")


@pytest.mark.weights
@pytest.mark.criterion(8, "real-weights checks (shift vs timestep, ControlNet helps, CFG no effect)")
@pytest.mark.skipif(not (SD15 and IMAGES and os.environ.get("GATEFEAT_CONTROLNET_PATH")),
                    reason="set GATEFEAT_SD15_PATH, GATEFEAT_CONTROLNET_PATH and GATEFEAT_SAMPLE_IMAGES")
def test_c8_real_weights(record_property):
    from gatefeat.extraction.diffusers_backend import DiffusersBackend
    from gatefeat.downstream.datasets import load_rgb
    from gatefeat.gate_harness import Img2ImgPipeline, evaluate_technique
    from gatefeat.shift_metric import bundle_shift_score

    be = DiffusersBackend.from_pretrained(SD15, os.environ["GATEFEAT_CONTROLNET_PATH"])
    paths = sorted(p for p in Path(IMAGES).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))[:10]
    assert len(paths) == 10
    gen = Img2ImgPipeline(be)
    shift_ok = helps = cfg_none = 0
    for p in paths:
        img = load_rgb(p)
        base = ExtractionConfig(combo=all_off(), seed=0, base_prompt="a photo")
        ref = extract(img, ExtractionConfig(timestep=0, combo=all_off("ref"), base_prompt="a photo"), be)
        # anchor well past both probes so neither score is pinned by construction
        anchor = extract(img, ExtractionConfig(timestep=900, combo=all_off("anchor"), base_prompt="a photo"), be)
        s50 = bundle_shift_score(extract(img, ExtractionConfig(timestep=50, combo=base.combo, base_prompt="a photo"),
                                         be), ref, anchor).score
        s500 = bundle_shift_score(extract(img, ExtractionConfig(timestep=500, combo=base.combo,
                                                                base_prompt="a photo"), be), ref, anchor).score
        shift_ok += s50 > s500
        r = evaluate_technique(img, TechniqueCombo("cn", use_controlnet=True), gen, 0.8, 30, 0, prompt="a photo")
        helps += r.verdict == "helps"
        r = evaluate_technique(img, TechniqueCombo("cfg", cfg_scale=7.5, prompt_text="a photo"), gen, 0.8, 30, 0,
                               prompt="a photo")
        cfg_none += r.verdict == "no_effect"
    record_property("shift_t50_gt_t500", f"{shift_ok}/10")
    record_property("controlnet_helps", f"{helps}/10")
    record_property("cfg_no_effect", f"{cfg_none}/10")
    assert shift_ok >= 8 and helps >= 8 and cfg_none > 5
