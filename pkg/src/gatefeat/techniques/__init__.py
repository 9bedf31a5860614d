"""Generation techniques used as feature-extraction modifiers.

Fine-grained prompts, ControlNet on the input's own canny edges, LoRA
weights, and classifier-free guidance (kept for evaluation; it does not
suppress content shift).
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from ..errors import ResourceMissingError, ValidationError
from ..feature_store import TechniqueCombo
from .captioning import CaptionerAdapter, fixed_stub, make_captioner
from .lora import LoraEntry, LoraPatch, LoraRegistry, apply_lora_layers, patch_lora, read_lora_file

CANNY_LOW = 100
CANNY_HIGH = 200

__all__ = [
    "CANNY_HIGH",
    "CANNY_LOW",
    "CaptionerAdapter",
    "LoraEntry",
    "LoraPatch",
    "LoraRegistry",
    "ResolvedConditioning",
    "apply_combo",
    "apply_lora_layers",
    "compute_canny",
    "fixed_stub",
    "make_captioner",
    "patch_lora",
    "read_lora_file",
    "resolve_lora",
]


def compute_canny(image: np.ndarray, low: int = CANNY_LOW, high: int = CANNY_HIGH) -> np.ndarray:
    """Binary (1, h, w) uint8 edge map of an RGB image (8-bit intensity thresholds)."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected HxWx3 RGB image, got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    gray = cv2.cvtColor(np.ascontiguousarray(arr), cv2.COLOR_RGB2GRAY)
    edges = cv2.Canny(gray, low, high)
    return (edges > 0).astype(np.uint8)[None]


@dataclass
class ResolvedConditioning:
    prompt: str
    control_image: np.ndarray | None
    lora: LoraEntry | None
    cfg_scale: float
    attention_prompt: str

    def as_tuple(self):
        return (self.prompt, self.control_image, self.lora, self.cfg_scale)


def resolve_lora(combo: TechniqueCombo, registry: LoraRegistry | None) -> LoraEntry | None:
    if not combo.use_lora:
        return None
    if registry is None:
        raise ResourceMissingError(f"combo {combo.combo_id!r} needs a LoRA registry")
    return registry.resolve(combo.lora_id)


def apply_combo(
    combo: TechniqueCombo,
    image: np.ndarray,
    base_prompt: str = "",
    registry: LoraRegistry | None = None,
    captioner: CaptionerAdapter | None = None,
    image_id: str | None = None,
    canny_thresholds: tuple[int, int] = (CANNY_LOW, CANNY_HIGH),
) -> ResolvedConditioning:
    fixed = combo.prompt_text or base_prompt
    if combo.prompt_source == "per_image_caption":
        if captioner is None:
            raise ResourceMissingError(f"combo {combo.combo_id!r} needs a captioner")
        if image_id is None:
            raise ValidationError("per-image captions require an image_id")
        prompt = captioner.caption(image_id, image)
    else:
        prompt = fixed
    control = compute_canny(image, *canny_thresholds) if combo.use_controlnet else None
    return ResolvedConditioning(
        prompt=prompt,
        control_image=control,
        lora=resolve_lora(combo, registry),
        cfg_scale=float(combo.cfg_scale),
        # attention maps always use the fixed manual prompt so token layout is consistent
        attention_prompt=fixed,
    )
