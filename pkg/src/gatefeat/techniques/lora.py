"""Loading and reversibly applying low-rank adapter weights.

Two file flavours in the safetensors container are understood:

* kohya / LyCORIS style: ``lora_unet_<module_path_with_underscores>.lora_down.weight``,
  ``.lora_up.weight`` and optional ``.alpha``. Convolutional ``lora_down``
  tensors (LoCon) are accepted alongside linear ones.
* PEFT / diffusers style: ``unet.<module.path>.lora_A.weight`` and ``.lora_B.weight``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors.torch import load_file
from torch import nn

from ..errors import ResourceMissingError, ValidationError

_PEFT_PREFIX = {"unet": "lora_unet", "text_encoder": "lora_te"}


@dataclass(frozen=True)
class LoraEntry:
    lora_id: str
    path: Path
    strength: float = 1.0


@dataclass
class LoraLayer:
    down: torch.Tensor
    up: torch.Tensor
    alpha: float | None = None

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    def delta(self) -> torch.Tensor:
        scale = (self.alpha / self.rank) if self.alpha is not None else 1.0
        down = self.down.double()
        up = self.up.double()
        if down.ndim == 4:
            # LoCon: down is (r, in, k, k), up is (out, r, 1, 1)
            r, cin, kh, kw = down.shape
            d = up.reshape(up.shape[0], r) @ down.reshape(r, cin * kh * kw)
            return scale * d.reshape(up.shape[0], cin, kh, kw)
        return scale * (up @ down)


@dataclass
class LoraRegistry:
    entries: dict[str, LoraEntry] = field(default_factory=dict)

    def register(self, lora_id: str, path: str | os.PathLike, strength: float = 1.0) -> LoraEntry:
        if lora_id in self.entries:
            raise ValidationError(f"duplicate lora_id {lora_id!r}")
        p = Path(path)
        if not p.is_file():
            raise ResourceMissingError(f"LoRA file for {lora_id!r} not found: {p}")
        if not 0.0 < strength <= 1.0:
            raise ValidationError(f"LoRA strength must be in (0, 1], got {strength}")
        entry = LoraEntry(lora_id, p, float(strength))
        self.entries[lora_id] = entry
        return entry

    def resolve(self, lora_id: str) -> LoraEntry:
        try:
            return self.entries[lora_id]
        except KeyError:
            raise ResourceMissingError(f"unknown lora_id {lora_id!r}") from None


def read_lora_file(path: str | os.PathLike) -> dict[str, LoraLayer]:
    """Parse a LoRA file into ``{kohya_style_module_key: LoraLayer}``."""
    raw = load_file(str(path))
    layers: dict[str, dict[str, torch.Tensor]] = {}
    for key, t in raw.items():
        if ".lora_down." in key or ".lora_up." in key or key.endswith(".alpha"):
            base, _, kind = key.partition(".")
            kind = kind.split(".")[0]
            slot = {"lora_down": "down", "lora_up": "up", "alpha": "alpha"}.get(kind)
            if slot is None:
                continue
        elif ".lora_A." in key or ".lora_B." in key:
            slot = "down" if ".lora_A." in key else "up"
            path_part = key.split(".lora_")[0]
            head, _, rest = path_part.partition(".")
            base = f"{_PEFT_PREFIX.get(head, 'lora_' + head)}_{rest.replace('.', '_')}"
        else:
            continue
        layers.setdefault(base, {})[slot] = t
    out = {}
    for base, parts in layers.items():
        if "down" not in parts or "up" not in parts:
            raise ValidationError(f"LoRA layer {base!r} lacks down/up weights")
        alpha = float(parts["alpha"]) if "alpha" in parts else None
        out[base] = LoraLayer(parts["down"], parts["up"], alpha)
    return out


def _module_index(targets: dict[str, nn.Module]) -> dict[str, nn.Module]:
    index = {}
    for prefix, root in targets.items():
        for name, mod in root.named_modules():
            if isinstance(mod, (nn.Linear, nn.Conv2d)):
                index[f"{prefix}_{name.replace('.', '_')}"] = mod
    return index


class LoraPatch:
    """Handle for weights modified in place; ``unpatch`` restores the originals bit-exactly."""

    def __init__(self, originals: list[tuple[nn.Module, torch.Tensor]], lora_id: str | None):
        self._originals = originals
        self.lora_id = lora_id
        self.active = True

    def unpatch(self) -> None:
        if not self.active:
            return
        with torch.no_grad():
            for mod, w in reversed(self._originals):
                mod.weight.copy_(w)
        self.active = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.unpatch()
        return False


def apply_lora_layers(
    targets: dict[str, nn.Module],
    layers: dict[str, LoraLayer],
    strength: float = 1.0,
    lora_id: str | None = None,
) -> LoraPatch:
    index = _module_index(targets)
    plan = []
    for key, layer in layers.items():
        mod = index.get(key)
        if mod is None:
            raise ValidationError(f"LoRA key {key!r} matches no layer of the backend")
        if layer.up.reshape(layer.up.shape[0], -1).shape[1] != layer.rank:
            raise ValidationError(
                f"{key}: rank mismatch between down {tuple(layer.down.shape)} and up {tuple(layer.up.shape)}"
            )
        d = layer.delta()
        if isinstance(mod, nn.Linear) and d.ndim == 4:
            d = d.reshape(d.shape[0], d.shape[1])
        if isinstance(mod, nn.Conv2d) and d.ndim == 2:
            d = d.reshape(*d.shape, 1, 1)
        if tuple(d.shape) != tuple(mod.weight.shape):
            raise ValidationError(
                f"{key}: delta shape {tuple(d.shape)} does not match weight {tuple(mod.weight.shape)}"
            )
        plan.append((mod, d))
    originals = []
    with torch.no_grad():
        for mod, d in plan:
            originals.append((mod, mod.weight.detach().clone()))
            mod.weight.copy_((mod.weight.double() + strength * d).to(mod.weight.dtype))
    return LoraPatch(originals, lora_id)


def lora_targets_of(obj) -> dict[str, nn.Module]:
    if isinstance(obj, nn.Module):
        return {"lora_unet": obj}
    return obj.lora_targets()


def patch_lora(
    backend,
    lora_id: str,
    registry: LoraRegistry,
    strength: float | None = None,
) -> LoraPatch:
    """Add the registered adapter's low-rank deltas to ``backend`` weights."""
    entry = registry.resolve(lora_id)
    layers = read_lora_file(entry.path)
    s = entry.strength if strength is None else strength
    return apply_lora_layers(lora_targets_of(backend), layers, s, lora_id)
