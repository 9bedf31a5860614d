"""Randomly initialised stand-in for the SD v1.5 latent diffusion stack.

The modules mirror the block topology and attribute names of the real
checkpoint family (4 down blocks, cross-attention mid block, 4 up blocks of
which the last three carry cross-attention; ``attn1`` self-attention and
``attn2`` cross-attention inside every transformer block) so feature hooks,
attention capture and LoRA key mapping exercise the same code paths as the
full model. Widths are tiny so CI runs on CPU in seconds.
"""

from __future__ import annotations

import math
import re
import zlib
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

AttentionRecorder = Callable[[torch.Tensor, tuple[int, int]], None]


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().reshape(-1, 1) * freqs.reshape(1, -1)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimestepEmbedding(nn.Module):
    def __init__(self, in_dim: int, dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.linear_1 = nn.Linear(in_dim, dim)
        self.linear_2 = nn.Linear(dim, dim)

    def forward(self, t):
        return self.linear_2(F.silu(self.linear_1(timestep_embedding(t, self.in_dim))))


class ResnetBlock2D(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_ch: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_emb_proj = nn.Linear(temb_ch, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.conv_shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_emb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        skip = self.conv_shortcut(x) if self.conv_shortcut is not None else x
        return skip + h


class Attention(nn.Module):
    def __init__(self, query_dim: int, context_dim: int | None = None, heads: int = 2):
        super().__init__()
        self.heads = heads
        self.is_cross = context_dim is not None
        ctx = context_dim if context_dim is not None else query_dim
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = nn.Linear(ctx, query_dim, bias=False)
        self.to_v = nn.Linear(ctx, query_dim, bias=False)
        self.to_out = nn.ModuleList([nn.Linear(query_dim, query_dim)])
        self.recorder: AttentionRecorder | None = None

    def forward(self, x, context=None, spatial: tuple[int, int] | None = None):
        b, n, d = x.shape
        ctx = x if context is None else context
        hd = d // self.heads
        q = self.to_q(x).reshape(b, n, self.heads, hd).transpose(1, 2)
        k = self.to_k(ctx).reshape(b, ctx.shape[1], self.heads, hd).transpose(1, 2)
        v = self.to_v(ctx).reshape(b, ctx.shape[1], self.heads, hd).transpose(1, 2)
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        if self.recorder is not None and spatial is not None:
            self.recorder(probs, spatial)
        out = (probs @ v).transpose(1, 2).reshape(b, n, d)
        return self.to_out[0](out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 2):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))

    def forward(self, x):
        return self.net(x)


class BasicTransformerBlock(nn.Module):
    def __init__(self, dim: int, context_dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = Attention(dim, None, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = Attention(dim, context_dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, context, spatial):
        x = x + self.attn1(self.norm1(x), spatial=spatial)
        x = x + self.attn2(self.norm2(x), context, spatial=spatial)
        return x + self.ff(self.norm3(x))


class Transformer2DModel(nn.Module):
    def __init__(self, ch: int, context_dim: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.transformer_blocks = nn.ModuleList([BasicTransformerBlock(ch, context_dim, heads)])
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x, context):
        b, c, h, w = x.shape
        hid = self.proj_in(self.norm(x)).reshape(b, c, h * w).transpose(1, 2)
        for blk in self.transformer_blocks:
            hid = blk(hid, context, (h, w))
        hid = hid.transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj_out(hid)


class Downsample2D(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample2D(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, size=None):
        if size is None:
            x = F.interpolate(x, scale_factor=2.0, mode="nearest")
        else:
            x = F.interpolate(x, size=size, mode="nearest")
        return self.conv(x)


class DownBlock2D(nn.Module):
    def __init__(self, in_ch, out_ch, temb_ch, layers, context_dim=None, heads=2, downsample=True):
        super().__init__()
        self.resnets = nn.ModuleList(
            [ResnetBlock2D(in_ch if i == 0 else out_ch, out_ch, temb_ch) for i in range(layers)]
        )
        self.attentions = (
            nn.ModuleList([Transformer2DModel(out_ch, context_dim, heads) for _ in range(layers)])
            if context_dim is not None
            else None
        )
        self.downsamplers = nn.ModuleList([Downsample2D(out_ch)]) if downsample else None

    def forward(self, x, temb, context):
        skips = []
        for i, res in enumerate(self.resnets):
            x = res(x, temb)
            if self.attentions is not None:
                x = self.attentions[i](x, context)
            skips.append(x)
        if self.downsamplers is not None:
            x = self.downsamplers[0](x)
            skips.append(x)
        return x, skips


class MidBlock2DCrossAttn(nn.Module):
    def __init__(self, ch, temb_ch, context_dim, heads):
        super().__init__()
        self.resnets = nn.ModuleList([ResnetBlock2D(ch, ch, temb_ch), ResnetBlock2D(ch, ch, temb_ch)])
        self.attentions = nn.ModuleList([Transformer2DModel(ch, context_dim, heads)])

    def forward(self, x, temb, context):
        x = self.resnets[0](x, temb)
        x = self.attentions[0](x, context)
        return self.resnets[1](x, temb)


class UpBlock2D(nn.Module):
    def __init__(self, in_ch, prev_ch, out_ch, skip_chs, temb_ch, context_dim=None, heads=2, upsample=True):
        super().__init__()
        resnets = []
        for i, sc in enumerate(skip_chs):
            rin = prev_ch if i == 0 else out_ch
            resnets.append(ResnetBlock2D(rin + sc, out_ch, temb_ch))
        self.resnets = nn.ModuleList(resnets)
        self.attentions = (
            nn.ModuleList([Transformer2DModel(out_ch, context_dim, heads) for _ in skip_chs])
            if context_dim is not None
            else None
        )
        self.upsamplers = nn.ModuleList([Upsample2D(out_ch)]) if upsample else None

    def forward(self, x, skips, temb, context, upsample_size=None):
        for i, res in enumerate(self.resnets):
            x = res(torch.cat([x, skips.pop()], dim=1), temb)
            if self.attentions is not None:
                x = self.attentions[i](x, context)
        if self.upsamplers is not None:
            x = self.upsamplers[0](x, size=upsample_size)
        return x


class TinyUNet(nn.Module):
    """UNet2DCondition-shaped noise predictor."""

    def __init__(
        self,
        in_channels: int = 4,
        block_out_channels: tuple[int, ...] = (8, 16, 32, 32),
        layers_per_block: int = 1,
        context_dim: int = 16,
        heads: int = 2,
    ):
        super().__init__()
        chs = block_out_channels
        temb = chs[0] * 4
        self.config = dict(
            in_channels=in_channels,
            block_out_channels=chs,
            layers_per_block=layers_per_block,
            context_dim=context_dim,
            heads=heads,
        )
        self.conv_in = nn.Conv2d(in_channels, chs[0], 3, padding=1)
        self.time_embedding = TimestepEmbedding(chs[0], temb)

        n = len(chs)
        self.down_blocks = nn.ModuleList()
        skip_chs = [chs[0]]
        prev = chs[0]
        for i, ch in enumerate(chs):
            last = i == n - 1
            cross = context_dim if not last else None
            self.down_blocks.append(DownBlock2D(prev, ch, temb, layers_per_block, cross, heads, not last))
            skip_chs += [ch] * layers_per_block
            if not last:
                skip_chs.append(ch)
            prev = ch
        self.mid_block = MidBlock2DCrossAttn(chs[-1], temb, context_dim, heads)

        self.up_blocks = nn.ModuleList()
        rev = list(reversed(chs))
        prev = chs[-1]
        for i, ch in enumerate(rev):
            last = i == n - 1
            take = [skip_chs.pop() for _ in range(layers_per_block + 1)]
            cross = context_dim if i > 0 else None
            self.up_blocks.append(UpBlock2D(prev, prev, ch, take, temb, cross, heads, not last))
            prev = ch
        self.conv_norm_out = nn.GroupNorm(_groups(chs[0]), chs[0])
        self.conv_out = nn.Conv2d(chs[0], in_channels, 3, padding=1)

    def forward(
        self,
        sample: torch.Tensor,
        timestep: int | torch.Tensor,
        encoder_hidden_states: torch.Tensor,
        down_block_additional_residuals: list[torch.Tensor] | None = None,
        mid_block_additional_residual: torch.Tensor | None = None,
    ) -> torch.Tensor:
        t = torch.as_tensor(timestep).reshape(-1).expand(sample.shape[0])
        temb = self.time_embedding(t)
        x = self.conv_in(sample)
        skips = [x]
        for blk in self.down_blocks:
            x, s = blk(x, temb, encoder_hidden_states)
            skips += s
        if down_block_additional_residuals is not None:
            skips = [a + r for a, r in zip(skips, down_block_additional_residuals)]
        x = self.mid_block(x, temb, encoder_hidden_states)
        if mid_block_additional_residual is not None:
            x = x + mid_block_additional_residual
        n_take = len(self.up_blocks[0].resnets)
        for i, blk in enumerate(self.up_blocks):
            own = skips[-n_take:]
            skips = skips[:-n_take]
            size = skips[-1].shape[-2:] if skips else None
            x = blk(x, own, temb, encoder_hidden_states, upsample_size=size)
        return self.conv_out(F.silu(self.conv_norm_out(x)))


class ControlNetConditioningEmbedding(nn.Module):
    def __init__(self, out_ch: int, cond_ch: int = 1, hidden: int = 8, downscale: int = 8):
        super().__init__()
        self.conv_in = nn.Conv2d(cond_ch, hidden, 3, padding=1)
        n = int(round(math.log2(downscale)))
        self.blocks = nn.ModuleList([nn.Conv2d(hidden, hidden, 3, stride=2, padding=1) for _ in range(n)])
        self.conv_out = nn.Conv2d(hidden, out_ch, 3, padding=1)

    def forward(self, cond):
        x = F.silu(self.conv_in(cond))
        for b in self.blocks:
            x = F.silu(b(x))
        return self.conv_out(x)


class TinyControlNet(nn.Module):
    """Trainable-copy encoder emitting residuals for every UNet skip and the mid block.

    Real ControlNets zero-initialise the output projections; the stand-in
    uses small random projections so its control path is observable.
    """

    def __init__(self, unet: TinyUNet, latent_scale: int = 8):
        super().__init__()
        cfg = unet.config
        chs = cfg["block_out_channels"]
        temb = chs[0] * 4
        self.conv_in = nn.Conv2d(cfg["in_channels"], chs[0], 3, padding=1)
        self.time_embedding = TimestepEmbedding(chs[0], temb)
        self.controlnet_cond_embedding = ControlNetConditioningEmbedding(chs[0], downscale=latent_scale)
        self.down_blocks = nn.ModuleList()
        skip_chs = [chs[0]]
        prev = chs[0]
        for i, ch in enumerate(chs):
            last = i == len(chs) - 1
            cross = cfg["context_dim"] if not last else None
            self.down_blocks.append(
                DownBlock2D(prev, ch, temb, cfg["layers_per_block"], cross, cfg["heads"], not last)
            )
            skip_chs += [ch] * cfg["layers_per_block"] + ([] if last else [ch])
            prev = ch
        self.mid_block = MidBlock2DCrossAttn(chs[-1], temb, cfg["context_dim"], cfg["heads"])
        self.controlnet_down_blocks = nn.ModuleList([nn.Conv2d(c, c, 1) for c in skip_chs])
        self.controlnet_mid_block = nn.Conv2d(chs[-1], chs[-1], 1)
        for conv in [*self.controlnet_down_blocks, self.controlnet_mid_block]:
            nn.init.normal_(conv.weight, std=0.3)
            nn.init.zeros_(conv.bias)

    def forward(self, sample, timestep, encoder_hidden_states, controlnet_cond, conditioning_scale=1.0):
        t = torch.as_tensor(timestep).reshape(-1).expand(sample.shape[0])
        temb = self.time_embedding(t)
        x = self.conv_in(sample) + self.controlnet_cond_embedding(controlnet_cond)
        skips = [x]
        for blk in self.down_blocks:
            x, s = blk(x, temb, encoder_hidden_states)
            skips += s
        x = self.mid_block(x, temb, encoder_hidden_states)
        down = [conv(s) * conditioning_scale for conv, s in zip(self.controlnet_down_blocks, skips)]
        return down, self.controlnet_mid_block(x) * conditioning_scale


class TinyVAE(nn.Module):
    """Parameter-free deterministic autoencoder with an 8x spatial factor.

    Latent channels: block-mean RGB (3) and block luminance variance (1).
    Decoding upsamples the mean colour bilinearly; it is a blurred but
    faithful reconstruction, which keeps Img2Img similarity measures
    meaningful on the stand-in.
    """

    def __init__(self, scale: int = 8):
        super().__init__()
        self.scale = scale

    def encode(self, pixels: torch.Tensor) -> torch.Tensor:
        s = self.scale
        mean = F.avg_pool2d(pixels, s)
        luma = (0.299 * pixels[:, 0:1] + 0.587 * pixels[:, 1:2] + 0.114 * pixels[:, 2:3])
        var = F.avg_pool2d(luma * luma, s) - F.avg_pool2d(luma, s) ** 2
        return torch.cat([mean, 4.0 * var], dim=1)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        rgb = latent[:, :3]
        out = F.interpolate(rgb, scale_factor=float(self.scale), mode="bilinear", align_corners=False)
        return out.clamp(-1.0, 1.0)


_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")
BOS, EOS = "<|startoftext|>", "<|endoftext|>"


def tokenize(text: str, max_length: int = 77) -> list[str]:
    words = _TOKEN_RE.findall(text.lower())[: max_length - 2]
    return [BOS, *words, EOS]


class TinyTextEncoder(nn.Module):
    def __init__(self, dim: int = 16, vocab: int = 4096, max_length: int = 77):
        super().__init__()
        self.vocab = vocab
        self.max_length = max_length
        self.token_embedding = nn.Embedding(vocab, dim)
        self.position_embedding = nn.Embedding(max_length, dim)
        self.final_layer_norm = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, dim)

    def token_id(self, tok: str) -> int:
        if tok == BOS:
            return 0
        if tok == EOS:
            return 1
        return 2 + zlib.crc32(tok.encode()) % (self.vocab - 2)

    def forward(self, tokens: list[str]) -> torch.Tensor:
        ids = torch.tensor([[self.token_id(t) for t in tokens]])
        pos = torch.arange(len(tokens))[None]
        x = self.token_embedding(ids) + self.position_embedding(pos)
        return self.proj(self.final_layer_norm(x))
