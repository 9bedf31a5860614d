from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from ..errors import HookCaptureError, ValidationError
from ..feature_store import FeatureBundle, TechniqueCombo, all_off
from ..techniques import (
    CaptionerAdapter,
    LoraRegistry,
    ResolvedConditioning,
    apply_combo,
    patch_lora,
    resolve_lora,
)
from .backend import DiffusionBackend, image_to_tensor, resize_maps
from .schedule import window_timesteps


@dataclass
class ExtractionConfig:
    timestep: int = 50
    combo: TechniqueCombo = field(default_factory=all_off)
    capture_conv: bool = True
    capture_attention: bool = False
    seed: int = 0
    attention_resolution: tuple[int, int] = (32, 32)
    base_prompt: str = ""
    conv_blocks: tuple[int, ...] | None = None  # subset of up-block indices; None keeps all
    resize_short_side: int | None = 512

    def validate(self, backend: DiffusionBackend) -> None:
        T = backend.schedule.max_timestep
        if not 0 <= self.timestep <= T:
            raise ValidationError(f"timestep {self.timestep} outside [0, {T}]")
        self.combo.validate_for_timestep(self.timestep)
        if self.combo.denoise_from is not None and self.combo.denoise_from > T:
            raise ValidationError(f"denoise_from {self.combo.denoise_from} exceeds T={T}")
        if self.combo.cfg_scale != 1.0 and self.combo.denoise_from is None:
            raise ValidationError(
                f"combo {self.combo.combo_id!r}: cfg_scale != 1 needs a denoising window; "
                "single-pass capture is unguided"
            )
        if not (self.capture_conv or self.capture_attention):
            raise ValidationError("nothing to capture")


@dataclass(frozen=True)
class Geometry:
    """Pixel mapping from an original image to its preprocessed crop."""

    scale_y: float
    scale_x: float
    top: int
    left: int
    resized: tuple[int, int]
    size: tuple[int, int]  # (h, w) after cropping

    def forward(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return np.stack([(xy[:, 0] + 0.5) * self.scale_x - 0.5 - self.left,
                         (xy[:, 1] + 0.5) * self.scale_y - 0.5 - self.top], axis=1)

    def inverse(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return np.stack([(xy[:, 0] + self.left + 0.5) / self.scale_x - 0.5,
                         (xy[:, 1] + self.top + 0.5) / self.scale_y - 0.5], axis=1)


def preprocess_geometry(h: int, w: int, short_side: int | None = 512, multiple: int = 8) -> Geometry:
    nh, nw = h, w
    if short_side is not None and min(h, w) != short_side:
        s = short_side / min(h, w)
        nh, nw = max(1, round(h * s)), max(1, round(w * s))
    ch, cw = (nh // multiple) * multiple, (nw // multiple) * multiple
    if ch == 0 or cw == 0:
        raise ValidationError(f"image {nh}x{nw} smaller than latent scale {multiple}")
    return Geometry(nh / h, nw / w, (nh - ch) // 2, (nw - cw) // 2, (nh, nw), (ch, cw))


def preprocess_image(image: np.ndarray, short_side: int | None = 512, multiple: int = 8) -> np.ndarray:
    """Resize the shorter side to ``short_side`` then centre-crop to a multiple of ``multiple``."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected HxWx3 RGB image, got {arr.shape}")
    g = preprocess_geometry(arr.shape[0], arr.shape[1], short_side, multiple)
    if g.resized != arr.shape[:2]:
        nh, nw = g.resized
        arr = np.asarray(Image.fromarray(arr.astype(np.uint8)).resize((nw, nh), Image.BICUBIC))
    ch, cw = g.size
    return np.ascontiguousarray(arr[g.top : g.top + ch, g.left : g.left + cw])


def encode_to_latent(image: np.ndarray, backend: DiffusionBackend) -> torch.Tensor:
    arr = np.asarray(image)
    s = backend.latent_scale
    h, w = arr.shape[:2]
    if h < s or w < s:
        raise ValidationError(f"image {h}x{w} is too small for latent scale {s}")
    if h % s or w % s:
        raise ValidationError(f"image {h}x{w} not divisible by latent scale {s}; run preprocess_image")
    with torch.no_grad():
        return backend.encode(image_to_tensor(arr))[0]


def add_noise(x0: torch.Tensor, t: int, seed: int, backend: DiffusionBackend) -> torch.Tensor:
    return backend.schedule.add_noise(x0, t, seed)


@contextlib.contextmanager
def _output_hooks(modules: list[tuple[str, torch.nn.Module]]):
    captured: dict[str, torch.Tensor] = {}
    handles = []

    def make(name):
        def hook(_mod, _inp, out):
            if isinstance(out, (tuple, list)):
                out = out[0]
            captured[name] = out.detach().float().clone()

        return hook

    for name, mod in modules:
        handles.append(mod.register_forward_hook(make(name)))
    try:
        yield captured
    finally:
        for h in handles:
            h.remove()


def _guided_eps(backend, x, t, cond, uncond, control, cfg_scale):
    eps = backend.predict_noise(x, t, cond, control)
    if cfg_scale == 1.0:
        return eps
    eps_u = backend.predict_noise(x, t, uncond, control)
    return eps_u + cfg_scale * (eps - eps_u)


def denoise_window(
    backend: DiffusionBackend,
    x: torch.Tensor,
    start: int,
    stop: int,
    steps: int,
    cond: torch.Tensor,
    control: torch.Tensor | None = None,
    cfg_scale: float = 1.0,
) -> torch.Tensor:
    """DDIM from ``start`` down to ``stop``; classifier-free guidance when ``cfg_scale`` > 1."""
    uncond = backend.encode_prompt("")[0] if cfg_scale != 1.0 else None
    ts = window_timesteps(start, stop, steps)
    for t, t_next in zip(ts[:-1], ts[1:]):
        eps = _guided_eps(backend, x, t, cond, uncond, control, cfg_scale)
        x = backend.schedule.ddim_step(x, eps, t, t_next)
    return x


@dataclass
class _Prepared:
    x0: torch.Tensor
    x_t: torch.Tensor
    cond: ResolvedConditioning
    control: torch.Tensor | None
    embeds: torch.Tensor
    tokens: list[str]


def _prepare(image, config, backend, registry, captioner, image_id) -> _Prepared:
    config.validate(backend)
    img = preprocess_image(image, config.resize_short_side, backend.latent_scale)
    x0 = encode_to_latent(img, backend)[None]
    cond = apply_combo(config.combo, img, config.base_prompt, registry, captioner, image_id)
    control = None
    if cond.control_image is not None:
        control = backend.prepare_control(cond.control_image)
    embeds, tokens = backend.encode_prompt(cond.prompt)
    combo = config.combo
    if combo.denoise_from is not None:
        x = backend.schedule.add_noise(x0, combo.denoise_from, config.seed)
        x = denoise_window(
            backend, x, combo.denoise_from, config.timestep, combo.denoise_steps, embeds, control, cond.cfg_scale
        )
    else:
        x = backend.schedule.add_noise(x0, config.timestep, config.seed)
    return _Prepared(x0, x, cond, control, embeds, tokens)


def _lora_scope(backend, lora, registry):
    if lora is None:
        return contextlib.nullcontext()
    return patch_lora(backend, lora.lora_id, registry)


def extract(
    image: np.ndarray,
    config: ExtractionConfig,
    backend: DiffusionBackend,
    registry: LoraRegistry | None = None,
    captioner: CaptionerAdapter | None = None,
    image_id: str = "image",
) -> FeatureBundle:
    """Run one capture pass and return conv/attention features as a bundle."""
    ups = list(backend.unet.up_blocks)
    if len(ups) != backend.expected_up_blocks:
        raise HookCaptureError(
            f"UNet has {len(ups)} up blocks, checkpoint family expects {backend.expected_up_blocks}"
        )
    config.validate(backend)
    lora = resolve_lora(config.combo, registry)
    with torch.no_grad(), _lora_scope(backend, lora, registry):
        prep = _prepare(image, config, backend, registry, captioner, image_id)
        names = [f"up{i}" for i in range(len(ups))]
        same_prompt = prep.cond.attention_prompt == prep.cond.prompt
        attn_ctx = (
            backend.capture_up_cross_attention()
            if config.capture_attention and same_prompt
            else contextlib.nullcontext()
        )
        with _output_hooks(list(zip(names, ups))) as captured, attn_ctx as collector:
            backend.predict_noise(prep.x_t, config.timestep, prep.embeds, prep.control)
        if len(captured) != len(ups):
            raise HookCaptureError(f"captured {len(captured)} of {len(ups)} up-block outputs")

        attention = tokens = None
        if config.capture_attention:
            if not same_prompt:
                a_embeds, a_tokens = backend.encode_prompt(prep.cond.attention_prompt)
                with backend.capture_up_cross_attention() as collector:
                    backend.predict_noise(prep.x_t, config.timestep, a_embeds, prep.control)
            else:
                a_tokens = prep.tokens
            if not collector.maps:
                raise HookCaptureError("no cross-attention layers found in the upsampling stage")
            size = tuple(config.attention_resolution)
            stacked = torch.stack([resize_maps(m, size) for m in collector.maps])
            attention = stacked.mean(dim=0).numpy()
            tokens = list(a_tokens)
            # padded text encoders attend over the full context; keep the prompt's own tokens
            attention = attention[: len(tokens)]
            if attention.shape[0] != len(tokens):
                raise HookCaptureError(
                    f"attention maps carry {attention.shape[0]} tokens, prompt has {len(tokens)}"
                )

    conv: list[tuple[str, np.ndarray]] = []
    if config.capture_conv:
        keep = config.conv_blocks if config.conv_blocks is not None else range(len(ups))
        chosen = [names[i] for i in keep]
        target = max((tuple(captured[n].shape[-2:]) for n in chosen), key=lambda s: s[0] * s[1])
        conv = [(n, resize_maps(captured[n], target)[0].numpy()) for n in chosen]

    fingerprint = backend.model_fingerprint
    if prep.cond.lora is not None:
        fingerprint += f"+lora:{prep.cond.lora.lora_id}@{prep.cond.lora.strength}"
    if prep.control is not None:
        fingerprint += "+controlnet:canny"
    return FeatureBundle(
        image_id=image_id,
        combo_id=config.combo.combo_id,
        timestep=config.timestep,
        conv_features=conv,
        attention_feature=attention,
        attention_tokens=tokens,
        seed=config.seed,
        model_fingerprint=fingerprint,
        max_timestep=backend.schedule.max_timestep,
        extra={"prompt": prep.cond.prompt, "attention_prompt": prep.cond.attention_prompt},
    )


def dump_block_activations(
    image: np.ndarray,
    config: ExtractionConfig,
    backend: DiffusionBackend,
    registry: LoraRegistry | None = None,
    captioner: CaptionerAdapter | None = None,
    image_id: str = "image",
) -> list[tuple[str, np.ndarray]]:
    """Activations of a single forward pass: noisy input, every block, predicted noise."""
    blocks = backend.block_sequence()
    config.validate(backend)
    lora = resolve_lora(config.combo, registry)
    with torch.no_grad(), _lora_scope(backend, lora, registry):
        prep = _prepare(image, config, backend, registry, captioner, image_id)
        with _output_hooks(blocks) as captured:
            eps = backend.predict_noise(prep.x_t, config.timestep, prep.embeds, prep.control)
    if len(captured) != len(blocks):
        raise HookCaptureError(f"captured {len(captured)} of {len(blocks)} blocks")
    out = [("input", prep.x_t[0].float().numpy())]
    out += [(name, captured[name][0].numpy()) for name, _ in blocks]
    out.append(("noise_pred", eps[0].float().numpy()))
    return out
