import numpy as np
from PIL import Image

from gatefeat.amalgamation import weight_stats
from gatefeat.plotting import save_ablation_bars, save_pca_panels, save_weight_histogram, save_weight_stats


def _ok(p):
    with Image.open(p) as im:
        return im.size[0] > 10 and im.size[1] > 10


def test_figures_written(tmp_path, rng):
    feats = [(f"f{i}", rng.normal(size=(6, 8, 8))) for i in range(3)]
    assert _ok(save_pca_panels(feats, tmp_path / "pca.png", joint=True, image=np.zeros((16, 16, 3), np.uint8)))
    assert _ok(save_pca_panels(feats, tmp_path / "pca_each.png"))
    W = rng.dirichlet(np.ones(3), size=(5, 2))
    st = [weight_stats(W)] * 3
    assert _ok(save_weight_stats(st, tmp_path / "w.png"))
    assert _ok(save_weight_histogram(W, tmp_path / "h.png"))
    rows = [{"combos": ["a"], "miou": 0.4}, {"combos": ["a", "b"], "miou": 0.5}]
    assert _ok(save_ablation_bars(rows, tmp_path / "abl.png"))
