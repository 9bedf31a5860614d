from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Callable

import numpy as np

from ..errors import CaptionerError, ValidationError

CaptionFn = Callable[[str, np.ndarray], str]


class CaptionerAdapter:
    """Per-image captions from a pluggable backend, memoised by image id."""

    def __init__(self, backend_id: str, fn: CaptionFn, cache: dict[str, str] | None = None):
        self.backend_id = backend_id
        self._fn = fn
        self.cache: dict[str, str] = dict(cache or {})
        self.calls = 0

    def caption(self, image_id: str, image: np.ndarray) -> str:
        if image_id in self.cache:
            return self.cache[image_id]
        self.calls += 1
        try:
            text = self._fn(image_id, image)
        except Exception as exc:
            raise CaptionerError(f"{self.backend_id} failed on {image_id!r}: {exc}") from exc
        if not isinstance(text, str) or not text.strip():
            raise CaptionerError(f"{self.backend_id} returned an empty caption for {image_id!r}")
        self.cache[image_id] = text
        return text

    def save_cache(self, path: str | os.PathLike) -> None:
        doc = {"backend_id": self.backend_id, "captions": self.cache}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))

    def load_cache(self, path: str | os.PathLike) -> None:
        doc = json.loads(Path(path).read_text())
        if doc.get("backend_id") != self.backend_id:
            raise ValidationError(
                f"caption cache belongs to {doc.get('backend_id')!r}, not {self.backend_id!r}"
            )
        self.cache.update(doc["captions"])


def fixed_stub(captions: dict[str, str] | None = None, default: str = "a photo") -> CaptionerAdapter:
    """Test backend returning canned captions."""
    canned = dict(captions or {})
    return CaptionerAdapter("fixed_stub", lambda image_id, _img: canned.get(image_id, default))


def hf_image_to_text(model: str, max_new_tokens: int = 40) -> CaptionerAdapter:
    """Captioner backed by a transformers image-to-text pipeline (weights required)."""
    from PIL import Image
    from transformers import pipeline

    pipe = pipeline("image-to-text", model=model)

    def run(_image_id: str, img: np.ndarray) -> str:
        out = pipe(Image.fromarray(np.asarray(img, dtype=np.uint8)), max_new_tokens=max_new_tokens)
        return out[0]["generated_text"].strip()

    return CaptionerAdapter(f"hf:{model}", run)


def make_captioner(backend_id: str, **kwargs) -> CaptionerAdapter:
    if backend_id == "fixed_stub":
        return fixed_stub(kwargs.get("captions"), kwargs.get("default", "a photo"))
    if backend_id.startswith("hf:"):
        return hf_image_to_text(backend_id[3:], **kwargs)
    raise ValidationError(f"unknown captioner backend {backend_id!r}")
