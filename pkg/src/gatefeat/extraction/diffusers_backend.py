"""Stable Diffusion v1.5 family backend on top of ``diffusers``.

Optional: importing this module requires ``diffusers`` (and ``transformers``
for the text encoder). Checkpoints load from a diffusers directory, a hub id,
or a single ``.safetensors``/``.ckpt`` file. ``GATEFEAT_MODEL_CACHE`` sets the
download cache when no explicit ``cache_dir`` is given.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch

from ..errors import HookCaptureError, ResourceMissingError
from .backend import AttentionCollector, DiffusionBackend
from .schedule import NoiseSchedule

MODEL_CACHE_ENV = "GATEFEAT_MODEL_CACHE"
SINGLE_FILE_EXTS = (".safetensors", ".ckpt", ".bin")


def _diffusers():
    try:
        import diffusers
    except ImportError as e:  # pragma: no cover - depends on environment
        raise ResourceMissingError("the diffusers backend needs `pip install diffusers transformers`") from e
    return diffusers


class _RecordingProcessor:
    """Delegates to the stock processor while reporting post-softmax maps."""

    def __init__(self, collector: AttentionCollector, latent_hw):
        from diffusers.models.attention_processor import AttnProcessor

        self.base = AttnProcessor()
        self.collector = collector
        self.latent_hw = latent_hw

    def _spatial(self, n: int) -> tuple[int, int]:
        h0, w0 = self.latent_hw()
        f = max(1, round((h0 * w0 / n) ** 0.5))
        h = -(-h0 // f)
        if h * (n // h) != n:
            raise HookCaptureError(f"cannot infer spatial shape for {n} queries from latent {h0}x{w0}")
        return h, n // h

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, **kwargs):
        orig = attn.get_attention_scores
        spatial = self._spatial(hidden_states.shape[1])

        def scores(query, key, mask=None):
            probs = orig(query, key, mask)
            b = probs.shape[0] // attn.heads
            self.collector(probs.reshape(b, attn.heads, *probs.shape[1:]), spatial)
            return probs

        attn.get_attention_scores = scores
        try:
            return self.base(attn, hidden_states, encoder_hidden_states, attention_mask, temb)
        finally:
            del attn.get_attention_scores


class DiffusersBackend(DiffusionBackend):
    def __init__(self, unet, vae, text_encoder, tokenizer, controlnet=None, name: str = "sd15", device="cpu"):
        self.device = torch.device(device)
        self.unet = unet.to(self.device).eval()
        self.vae = vae.to(self.device).eval()
        self.text_encoder = text_encoder.to(self.device).eval()
        self.tokenizer = tokenizer
        self.controlnet = controlnet.to(self.device).eval() if controlnet is not None else None
        for m in (self.unet, self.vae, self.text_encoder, self.controlnet):
            if m is not None:
                m.requires_grad_(False)
        self.schedule = NoiseSchedule.scaled_linear(1000)
        self.latent_channels = int(unet.config.in_channels)
        self.latent_scale = 2 ** (len(vae.config.block_out_channels) - 1)
        self.scaling_factor = float(getattr(vae.config, "scaling_factor", 0.18215))
        self.max_length = int(getattr(tokenizer, "model_max_length", 77))
        cfg = json.dumps({k: str(v) for k, v in dict(unet.config).items()}, sort_keys=True)
        digest = hashlib.sha256(cfg.encode()).hexdigest()[:12]
        self.model_fingerprint = f"{name}:{digest}"
        self._latent_hw = (0, 0)

    @classmethod
    def from_pretrained(
        cls,
        model_path: str,
        controlnet_path: str | None = None,
        cache_dir: str | None = None,
        device: str = "cpu",
        dtype: torch.dtype = torch.float32,
    ) -> "DiffusersBackend":
        d = _diffusers()
        cache_dir = cache_dir or os.environ.get(MODEL_CACHE_ENV)
        p = Path(model_path)
        if p.suffix in SINGLE_FILE_EXTS:
            if not p.exists():
                raise ResourceMissingError(f"checkpoint {p} not found")
            pipe = d.StableDiffusionPipeline.from_single_file(str(p), torch_dtype=dtype, cache_dir=cache_dir)
            unet, vae, te, tok = pipe.unet, pipe.vae, pipe.text_encoder, pipe.tokenizer
        else:
            from transformers import CLIPTextModel, CLIPTokenizer

            kw = {"cache_dir": cache_dir}
            unet = d.UNet2DConditionModel.from_pretrained(model_path, subfolder="unet", torch_dtype=dtype, **kw)
            vae = d.AutoencoderKL.from_pretrained(model_path, subfolder="vae", torch_dtype=dtype, **kw)
            te = CLIPTextModel.from_pretrained(model_path, subfolder="text_encoder", torch_dtype=dtype, **kw)
            tok = CLIPTokenizer.from_pretrained(model_path, subfolder="tokenizer", **kw)
        cn = None
        if controlnet_path:
            cp = Path(controlnet_path)
            if cp.suffix in SINGLE_FILE_EXTS:
                cn = d.ControlNetModel.from_single_file(str(cp), torch_dtype=dtype, cache_dir=cache_dir)
            else:
                cn = d.ControlNetModel.from_pretrained(controlnet_path, torch_dtype=dtype, cache_dir=cache_dir)
        return cls(unet, vae, te, tok, cn, name=f"sd15:{p.name or model_path}", device=device)

    @property
    def has_controlnet(self) -> bool:
        return self.controlnet is not None

    def encode(self, pixels):
        lat = self.vae.encode(pixels.to(self.device, self.vae.dtype)).latent_dist.mode()
        return (lat * self.scaling_factor).float()

    def decode(self, latent):
        out = self.vae.decode((latent / self.scaling_factor).to(self.device, self.vae.dtype)).sample
        return out.float().cpu()

    def encode_prompt(self, text):
        enc = self.tokenizer(
            text, padding="max_length", max_length=self.max_length, truncation=True, return_tensors="pt"
        )
        ids = enc.input_ids.to(self.device)
        embeds = self.text_encoder(ids)[0]
        n = int(enc.attention_mask[0].sum()) if "attention_mask" in enc else ids.shape[1]
        tokens = self.tokenizer.convert_ids_to_tokens(enc.input_ids[0, :n].tolist())
        return embeds, [str(t) for t in tokens]

    def prepare_control(self, edges):
        e = torch.from_numpy(np.ascontiguousarray(edges, dtype=np.float32))
        return e[None].repeat(1, 3, 1, 1).to(self.device)

    def control_residuals(self, x_t, t, embeds, control):
        if self.controlnet is None:
            raise ResourceMissingError("no ControlNet configured for this backend")
        down, mid = self.controlnet(
            x_t, t, encoder_hidden_states=embeds, controlnet_cond=control, return_dict=False
        )
        return down, mid

    def lora_targets(self):
        return {"lora_unet": self.unet, "lora_te": self.text_encoder}

    def predict_noise(self, x_t, t, embeds, control=None):
        self._latent_hw = tuple(x_t.shape[-2:])
        down = mid = None
        if control is not None:
            down, mid = self.control_residuals(x_t, t, embeds, control)
        return self.unet(
            x_t,
            t,
            encoder_hidden_states=embeds,
            down_block_additional_residuals=down,
            mid_block_additional_residual=mid,
        ).sample

    @contextlib.contextmanager
    def capture_up_cross_attention(self):
        collector = AttentionCollector()
        original = dict(self.unet.attn_processors)
        targets = [k for k in original if k.startswith("up_blocks.") and ".attn2." in k]
        if not targets:
            raise HookCaptureError("no cross-attention processors found in the upsampling stage")
        proc = _RecordingProcessor(collector, lambda: self._latent_hw)
        patched = {k: (proc if k in targets else v) for k, v in original.items()}
        self.unet.set_attn_processor(patched)
        try:
            yield collector
        finally:
            self.unet.set_attn_processor(original)
