"""Dataset adapters behind two small interfaces: segmentation samples and keypoint pairs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from ..errors import ResourceMissingError, ValidationError
from .correspondence import KeypointSet

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


def load_rgb(path: str | os.PathLike) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def load_mask(path: str | os.PathLike) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p).astype(np.int64)
    return np.asarray(Image.open(p)).astype(np.int64)


@dataclass
class SegSample:
    image_id: str
    image_path: Path
    mask_path: Path | None

    def image(self) -> np.ndarray:
        return load_rgb(self.image_path)

    def mask(self) -> np.ndarray:
        if self.mask_path is None:
            raise ResourceMissingError(f"no mask for {self.image_id}")
        return load_mask(self.mask_path)


class SegmentationFolder:
    """``images/`` plus ``masks/`` matched by file stem; masks are png or npy."""

    def __init__(self, images_dir, masks_dir=None, require_masks: bool = True):
        self.images_dir = Path(images_dir)
        self.masks_dir = Path(masks_dir) if masks_dir is not None else None
        if not self.images_dir.is_dir():
            raise ResourceMissingError(f"image directory {self.images_dir} not found")
        masks = {}
        if self.masks_dir is not None:
            if not self.masks_dir.is_dir():
                raise ResourceMissingError(f"mask directory {self.masks_dir} not found")
            for p in sorted(self.masks_dir.iterdir()):
                if p.suffix.lower() in IMAGE_EXTS + (".npy",):
                    masks.setdefault(p.stem, p)
        self.samples = []
        for p in sorted(self.images_dir.iterdir()):
            if p.suffix.lower() not in IMAGE_EXTS:
                continue
            m = masks.get(p.stem)
            if m is None and require_masks and self.masks_dir is not None:
                raise ResourceMissingError(f"no mask for image {p.name}")
            self.samples.append(SegSample(p.stem, p, m))

    def __len__(self):
        return len(self.samples)

    def __iter__(self) -> Iterator[SegSample]:
        return iter(self.samples)

    def __getitem__(self, i) -> SegSample:
        return self.samples[i]


class DDPMSegLayout(SegmentationFolder):
    """Horse-21 / Bedroom-28 release layout: ``<split>/`` holds ``X.png`` next to ``X.npy``."""

    def __init__(self, root, split: str = "real/train"):
        d = Path(root) / split
        if not d.is_dir():
            raise ResourceMissingError(f"split directory {d} not found")
        self.images_dir = self.masks_dir = d
        self.samples = []
        for p in sorted(d.iterdir()):
            if p.suffix.lower() not in IMAGE_EXTS:
                continue
            m = p.with_suffix(".npy")
            if not m.exists():
                raise ResourceMissingError(f"no label array for {p.name}")
            self.samples.append(SegSample(p.stem, p, m))


@dataclass
class KeypointPair:
    pair_id: str
    src_path: Path
    tgt_path: Path
    src: KeypointSet
    tgt: KeypointSet
    category: str = ""


def _kps(record: dict, image_size) -> KeypointSet:
    kps = record["keypoints"]
    names = [str(k["name"]) for k in kps]
    xy = [[float(k["x"]), float(k["y"])] for k in kps]
    bbox = record.get("bbox")
    return KeypointSet(names, np.asarray(xy).reshape(-1, 2), tuple(image_size), tuple(bbox) if bbox else None)


def _image_size(path: Path, record: dict) -> tuple[int, int]:
    if "size" in record:
        h, w = record["size"]
        return int(h), int(w)
    with Image.open(path) as im:
        return im.height, im.width


class KeypointPairsFile:
    """One JSON record per line::

        {"pair_id": "...", "category": "...",
         "src": {"image": "a.png", "keypoints": [{"name": "eye", "x": 3, "y": 4}], "bbox": [x0, y0, x1, y1]},
         "tgt": {...}}

    Image paths are resolved relative to the file's directory.
    """

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise ResourceMissingError(f"pairs file {self.path} not found")
        base = self.path.parent
        self.pairs = []
        for lineno, line in enumerate(self.path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sp, tp = base / rec["src"]["image"], base / rec["tgt"]["image"]
                pair = KeypointPair(
                    str(rec.get("pair_id", lineno)),
                    sp,
                    tp,
                    _kps(rec["src"], _image_size(sp, rec["src"])),
                    _kps(rec["tgt"], _image_size(tp, rec["tgt"])),
                    rec.get("category", ""),
                )
            except (KeyError, TypeError, json.JSONDecodeError) as e:
                raise ValidationError(f"{self.path}:{lineno}: malformed pair record ({e})") from e
            self.pairs.append(pair)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self) -> Iterator[KeypointPair]:
        return iter(self.pairs)


class SPairPairs:
    """SPair-71k ``PairAnnotation/<split>/*.json`` reader.

    Keypoint names are the annotation's keypoint ids, so src and tgt lists are
    aligned by name.
    """

    def __init__(self, root, split: str = "test", category: str | None = None, limit: int | None = None):
        root = Path(root)
        ann = root / "PairAnnotation" / split
        if not ann.is_dir():
            raise ResourceMissingError(f"SPair annotations not found at {ann}")
        self.pairs = []
        for p in sorted(ann.glob("*.json")):
            rec = json.loads(p.read_text())
            cat = rec["category"]
            if category is not None and cat != category:
                continue
            img_dir = root / "JPEGImages" / cat
            ids = [str(i) for i in rec.get("kps_ids", range(len(rec["src_kps"])))]
            src = KeypointSet(
                ids,
                np.asarray(rec["src_kps"], dtype=np.float64).reshape(-1, 2),
                (int(rec["src_imsize"][1]), int(rec["src_imsize"][0])),
                tuple(rec["src_bndbox"]),
            )
            tgt = KeypointSet(
                ids,
                np.asarray(rec["trg_kps"], dtype=np.float64).reshape(-1, 2),
                (int(rec["trg_imsize"][1]), int(rec["trg_imsize"][0])),
                tuple(rec["trg_bndbox"]),
            )
            self.pairs.append(
                KeypointPair(p.stem, img_dir / rec["src_imname"], img_dir / rec["trg_imname"], src, tgt, cat)
            )
            if limit is not None and len(self.pairs) >= limit:
                break

    def __len__(self):
        return len(self.pairs)

    def __iter__(self) -> Iterator[KeypointPair]:
        return iter(self.pairs)


def open_segmentation(kind: str, **kwargs):
    kinds = {"folder": SegmentationFolder, "ddpm_seg": DDPMSegLayout}
    if kind not in kinds:
        raise ValidationError(f"unknown segmentation dataset kind {kind!r}; choose from {sorted(kinds)}")
    return kinds[kind](**kwargs)


def open_pairs(kind: str, **kwargs):
    kinds = {"jsonl": KeypointPairsFile, "spair": SPairPairs}
    if kind not in kinds:
        raise ValidationError(f"unknown correspondence dataset kind {kind!r}; choose from {sorted(kinds)}")
    return kinds[kind](**kwargs)
