"""Small synthetic datasets for smoke runs without downloads.

``python -m gatefeat.toydata DIR`` writes a two-class squares segmentation
set (``DIR/train``, ``DIR/test``) and a keypoint-pairs file (``DIR/kp``).
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np
from PIL import Image


def square_sample(rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    img = rng.integers(0, 60, size=(size, size, 3)).astype(np.uint8)
    mask = np.zeros((size, size), dtype=np.uint8)
    s = int(rng.integers(size // 4, size // 2))
    y, x = (int(v) for v in rng.integers(0, size - s, size=2))
    img[y : y + s, x : x + s] = (220, 40, 40)
    mask[y : y + s, x : x + s] = 1
    return img, mask


def write_squares(root, n_train: int = 4, n_test: int = 2, size: int = 64, seed: int = 0) -> Path:
    root = Path(root)
    rng = np.random.default_rng(seed)
    for split, n in (("train", n_train), ("test", n_test)):
        (root / split / "images").mkdir(parents=True, exist_ok=True)
        (root / split / "masks").mkdir(parents=True, exist_ok=True)
        for i in range(n):
            img, mask = square_sample(rng, size)
            Image.fromarray(img).save(root / split / "images" / f"im{i}.png")
            Image.fromarray(mask).save(root / split / "masks" / f"im{i}.png")
    return root


def write_pairs(root, n_pairs: int = 4, size: int = 48, shift: int = 8, n_kp: int = 5, seed: int = 0) -> Path:
    """Pairs whose target is the source translated right by ``shift`` pixels."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    (root / "cat").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n_pairs):
        src = rng.integers(0, 255, size=(size, size, 3)).astype(np.uint8)
        tgt = np.zeros_like(src)
        tgt[:, shift:] = src[:, : size - shift]
        Image.fromarray(src).save(root / "cat" / f"a{i}.png")
        Image.fromarray(tgt).save(root / "cat" / f"b{i}.png")
        xs = rng.integers(2, size - shift - 2, n_kp)
        ys = rng.integers(2, size - 2, n_kp)
        kps = [{"name": f"k{j}", "x": float(x), "y": float(y)} for j, (x, y) in enumerate(zip(xs, ys))]
        lines.append(json.dumps({
            "pair_id": f"p{i}",
            "category": "cat",
            "src": {"image": f"cat/a{i}.png", "keypoints": kps, "bbox": [0, 0, size - shift, size]},
            "tgt": {
                "image": f"cat/b{i}.png",
                "keypoints": [{**k, "x": k["x"] + shift} for k in kps],
                "bbox": [shift, 0, size, size],
            },
        }))
    path = root / "pairs.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m gatefeat.toydata", description=__doc__.splitlines()[0])
    p.add_argument("root")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    write_squares(a.root, seed=a.seed)
    write_pairs(Path(a.root) / "kp", seed=a.seed)
    print(f"wrote toy data under {a.root}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
