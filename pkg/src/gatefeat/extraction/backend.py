"""Diffusion backend interface and the in-process tiny stand-in."""

from __future__ import annotations

import contextlib
import hashlib
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ResourceMissingError
from .schedule import NoiseSchedule
from .tiny_unet import Attention, TinyControlNet, TinyTextEncoder, TinyUNet, TinyVAE, tokenize

# Block topology of the SD v1.5 UNet; the stand-in shares it.
SD15_DOWN_BLOCKS = 4
SD15_UP_BLOCKS = 4


class AttentionCollector:
    """Accumulates head-averaged cross-attention maps as (tokens, h, w) tensors."""

    def __init__(self):
        self.maps: list[torch.Tensor] = []

    def __call__(self, probs: torch.Tensor, spatial: tuple[int, int]) -> None:
        # probs: (batch, heads, h*w, tokens); batch 0 is the conditional pass
        m = probs[0].mean(dim=0)
        h, w = spatial
        self.maps.append(m.transpose(0, 1).reshape(m.shape[1], h, w).detach().float().clone())


class DiffusionBackend:
    """What extraction, Img2Img and LoRA patching need from a latent diffusion model.

    Subclasses provide ``vae``-style encode/decode, prompt embedding, a UNet
    exposing ``down_blocks``/``mid_block``/``up_blocks`` and, optionally, a
    ControlNet.
    """

    model_fingerprint: str
    schedule: NoiseSchedule
    latent_channels: int = 4
    latent_scale: int = 8
    expected_up_blocks: int = SD15_UP_BLOCKS
    expected_down_blocks: int = SD15_DOWN_BLOCKS
    unet: nn.Module

    @property
    def has_controlnet(self) -> bool:
        return False

    def encode(self, pixels: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_prompt(self, text: str) -> tuple[torch.Tensor, list[str]]:
        """Returns (embeddings, token strings of the unpadded prompt)."""
        raise NotImplementedError

    def prepare_control(self, edges: np.ndarray) -> torch.Tensor:
        """(1, h, w) binary edge map -> control tensor at pixel resolution."""
        return torch.from_numpy(np.ascontiguousarray(edges, dtype=np.float32))[None]

    def control_residuals(self, x_t, t, embeds, control: torch.Tensor):
        raise ResourceMissingError("backend has no ControlNet configured")

    def lora_targets(self) -> dict[str, nn.Module]:
        return {"lora_unet": self.unet}

    @contextlib.contextmanager
    def capture_up_cross_attention(self) -> Iterator[AttentionCollector]:
        raise NotImplementedError
        yield  # pragma: no cover

    def predict_noise(
        self,
        x_t: torch.Tensor,
        t: int,
        embeds: torch.Tensor,
        control: torch.Tensor | None = None,
    ) -> torch.Tensor:
        down = mid = None
        if control is not None:
            down, mid = self.control_residuals(x_t, t, embeds, control)
        return self.unet(
            x_t,
            t,
            encoder_hidden_states=embeds,
            down_block_additional_residuals=down,
            mid_block_additional_residual=mid,
        )

    def block_sequence(self) -> list[tuple[str, nn.Module]]:
        """UNet blocks in execution order, used for the activation dump."""
        blocks: list[tuple[str, nn.Module]] = []
        blocks += [(f"down{i}", b) for i, b in enumerate(self.unet.down_blocks)]
        blocks.append(("mid", self.unet.mid_block))
        blocks += [(f"up{i}", b) for i, b in enumerate(self.unet.up_blocks)]
        return blocks


def _fingerprint(prefix: str, modules: list[nn.Module]) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, t in sorted(m.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
    return f"{prefix}:{h.hexdigest()[:16]}"


class TinyBackend(DiffusionBackend):
    """Randomly initialised stand-in sharing the v1.5 block topology."""

    def __init__(
        self,
        seed: int = 0,
        block_out_channels: tuple[int, ...] = (8, 16, 32, 32),
        layers_per_block: int = 1,
        context_dim: int = 16,
        with_controlnet: bool = True,
        num_train_timesteps: int = 1000,
    ):
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.unet = TinyUNet(4, tuple(block_out_channels), layers_per_block, context_dim).eval()
            self.text_encoder = TinyTextEncoder(dim=context_dim).eval()
            self.controlnet = TinyControlNet(self.unet).eval() if with_controlnet else None
        self.vae = TinyVAE(scale=8)
        self.schedule = NoiseSchedule.scaled_linear(num_train_timesteps)
        self.latent_channels = 4
        self.latent_scale = 8
        for m in (self.unet, self.text_encoder, self.controlnet):
            if m is not None:
                m.requires_grad_(False)
        self.model_fingerprint = _fingerprint(
            "tiny-sd15", [m for m in (self.unet, self.text_encoder, self.controlnet) if m is not None]
        )

    @property
    def has_controlnet(self) -> bool:
        return self.controlnet is not None

    def encode(self, pixels):
        return self.vae.encode(pixels)

    def decode(self, latent):
        return self.vae.decode(latent)

    def encode_prompt(self, text):
        tokens = tokenize(text, self.text_encoder.max_length)
        return self.text_encoder(tokens), tokens

    def control_residuals(self, x_t, t, embeds, control):
        if self.controlnet is None:
            raise ResourceMissingError("tiny backend built without ControlNet")
        return self.controlnet(x_t, t, embeds, control)

    def lora_targets(self):
        return {"lora_unet": self.unet, "lora_te": self.text_encoder}

    @contextlib.contextmanager
    def capture_up_cross_attention(self):
        collector = AttentionCollector()
        mods = [m for m in self.unet.up_blocks.modules() if isinstance(m, Attention) and m.is_cross]
        for m in mods:
            m.recorder = collector
        try:
            yield collector
        finally:
            for m in mods:
                m.recorder = None


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 HxWx3 -> float (1, 3, H, W) in [-1, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 RGB image, got shape {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)[None]
    if arr.dtype == np.uint8:
        t = t / 127.5 - 1.0
    return t


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    arr = ((t[0].clamp(-1, 1) + 1.0) * 127.5).round().permute(1, 2, 0)
    return arr.to(torch.uint8).cpu().numpy()


def resize_maps(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return x[0] if squeeze else x
