"""Differentiable toy UNet noise predictor.

Pixel-space net over C x H x W images (default 3x32x32): two downsamples to an
8x8 bottleneck, self-attention at the 8x8 level and in the bottleneck, class
conditioning folded into the timestep embedding. Attention projections are the
low-rank adapter attachment points; every projection carries a stable layer id
such as ``enc.2.attn.q``.

Points are (x, y) with x along width and y along height; tensors index as
``data[c, y, x]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError

log = logging.getLogger(__name__)

GROUPS = 8


@dataclass(frozen=True)
class ToyUNetConfig:
    in_channels: int = 3
    image_size: int = 32
    base_width: int = 32
    level_mults: Sequence[int] = (1, 2, 2)   # channel multiplier per resolution level
    attn_levels: Sequence[int] = (2,)        # levels (by index) that get self-attention
    mid_attn: bool = True
    emb_dim: int = 128
    num_classes: int = 3
    feature_layer: str = "dec.0"             # decoder block whose output is F(.)
    norm: bool = True                        # False keeps receptive fields local

    def level_channels(self) -> list[int]:
        return [self.base_width * m for m in self.level_mults]

    def validate(self) -> None:
        for ch in self.level_channels():
            if ch % GROUPS != 0:
                raise ConfigError(f"channel width {ch} must be a multiple of {GROUPS}")
        if self.image_size % (2 ** (len(self.level_mults) - 1)) != 0:
            raise ConfigError("image_size must be divisible by the total downsample factor")
        for lvl in self.attn_levels:
            if not 0 <= lvl < len(self.level_mults):
                raise ConfigError(f"attn level {lvl} out of range")


@dataclass(frozen=True)
class FeatureMap:
    """Feature tensor (C_f, H, W) aligned to the latent grid."""

    data: torch.Tensor
    layer_id: str
    t_index: int


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1)
    ).to(t.device)
    args = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, norm: bool = True):
        super().__init__()
        self.norm1 = nn.GroupNorm(GROUPS, in_ch) if norm else nn.Identity()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(GROUPS, out_ch) if norm else nn.Identity()
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Single-head self-attention over spatial tokens with LoRA-aware projections."""

    def __init__(self, ch: int, layer_id: str):
        super().__init__()
        self.layer_id = layer_id
        self.norm = nn.GroupNorm(GROUPS, ch)
        self.q = nn.Linear(ch, ch, bias=False)
        self.k = nn.Linear(ch, ch, bias=False)
        self.v = nn.Linear(ch, ch, bias=False)
        self.out = nn.Linear(ch, ch, bias=False)

    def projection_ids(self) -> dict[str, nn.Linear]:
        return {f"{self.layer_id}.{name}": getattr(self, name)
                for name in ("q", "k", "v", "out")}

    def _proj(self, name: str, x: torch.Tensor, lora) -> torch.Tensor:
        linear: nn.Linear = getattr(self, name)
        y = linear(x)
        if lora is not None:
            pair = lora.layers.get(f"{self.layer_id}.{name}")
            if pair is not None:
                y = y + lora.scale * ((x @ pair.A.T) @ pair.B.T)
        return y

    def forward(self, x: torch.Tensor, lora=None) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # (b, hw, c)
        q = self._proj("q", tokens, lora)
        k = self._proj("k", tokens, lora)
        v = self._proj("v", tokens, lora)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        y = self._proj("out", attn @ v, lora)
        return x + y.transpose(1, 2).reshape(b, c, h, w)


class ToyUNet(nn.Module):
    """Noise predictor epsilon(z, t, class). See module docstring for layout."""

    def __init__(self, config: ToyUNetConfig = ToyUNetConfig()):
        super().__init__()
        config.validate()
        self.config = config
        chs = config.level_channels()
        L = len(chs)
        emb = config.emb_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        # last embedding row is the "null" class used for unconditional calls
        self.class_emb = nn.Embedding(config.num_classes + 1, emb)

        self.conv_in = nn.Conv2d(config.in_channels, chs[0], 3, padding=1)

        self.enc = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = chs[0]
        for lvl in range(L):
            self.enc.append(ResBlock(prev, chs[lvl], emb, config.norm))
            self.enc_attn.append(
                SelfAttention2d(chs[lvl], f"enc.{lvl}.attn")
                if lvl in config.attn_levels else nn.Identity())
            if lvl < L - 1:
                self.downs.append(nn.Conv2d(chs[lvl], chs[lvl + 1], 3, stride=2, padding=1))
                prev = chs[lvl + 1]

        self.mid1 = ResBlock(chs[-1], chs[-1], emb, config.norm)
        self.mid_attn = SelfAttention2d(chs[-1], "mid.attn") if config.mid_attn else nn.Identity()
        self.mid2 = ResBlock(chs[-1], chs[-1], emb, config.norm)

        self.dec = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        self.ups = nn.ModuleList()
        prev = chs[-1]
        for lvl in reversed(range(L)):
            out_ch = chs[max(lvl - 1, 0)]
            self.dec.insert(0, ResBlock(prev + chs[lvl], out_ch, emb, config.norm))
            self.dec_attn.insert(
                0,
                SelfAttention2d(out_ch, f"dec.{lvl}.attn")
                if lvl in config.attn_levels else nn.Identity())
            if lvl > 0:
                self.ups.insert(0, nn.Conv2d(out_ch, out_ch, 3, padding=1))
            prev = out_ch

        self.out_norm = nn.GroupNorm(GROUPS, chs[0]) if config.norm else nn.Identity()
        self.out_conv = nn.Conv2d(chs[0], config.in_channels, 3, padding=1)

    # ---- parameter bookkeeping ----

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def attention_blocks(self) -> list[SelfAttention2d]:
        blocks = [m for m in list(self.enc_attn) + [self.mid_attn] + list(self.dec_attn)
                  if isinstance(m, SelfAttention2d)]
        return blocks

    def lora_layer_shapes(self) -> dict[str, tuple[int, int]]:
        """Stable layer id -> (d_out, d_in) for every attention projection."""
        shapes: dict[str, tuple[int, int]] = {}
        for block in self.attention_blocks():
            for layer_id, linear in block.projection_ids().items():
                shapes[layer_id] = (linear.out_features, linear.in_features)
        return shapes

    # ---- forward ----

    def _embed(self, t: torch.Tensor, cond: Optional[torch.Tensor],
               batch: int, dtype: torch.dtype, device) -> torch.Tensor:
        emb = timestep_embedding(t, self.config.emb_dim).to(dtype)
        emb = self.time_mlp(emb)
        if cond is None:
            cond = torch.full((batch,), self.config.num_classes, dtype=torch.long,
                              device=device)
        return emb + self.class_emb(cond)

    def forward(self, x: torch.Tensor, t: torch.Tensor,
                cond: Optional[torch.Tensor] = None, lora=None,
                want_features: bool = False):
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} channels, got {x.shape[1]}")
        emb = self._embed(t, cond, x.shape[0], x.dtype, x.device)

        h = self.conv_in(x)
        skips = []
        for lvl in range(len(self.enc)):
            h = self.enc[lvl](h, emb)
            h = self._apply_attn(self.enc_attn[lvl], h, lora)
            skips.append(h)
            if lvl < len(self.downs):
                h = self.downs[lvl](h)

        h = self.mid1(h, emb)
        h = self._apply_attn(self.mid_attn, h, lora)
        h = self.mid2(h, emb)

        feature = None
        for lvl in reversed(range(len(self.dec))):
            h = self.dec[lvl](torch.cat([h, skips[lvl]], dim=1), emb)
            h = self._apply_attn(self.dec_attn[lvl], h, lora)
            if want_features and f"dec.{lvl}" == self.config.feature_layer:
                feature = h
            if lvl > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[lvl - 1](h)

        eps = self.out_conv(F.silu(self.out_norm(h)))
        if want_features:
            if feature is None:
                raise ValueError(f"feature layer {self.config.feature_layer!r} not found")
            return eps, feature
        return eps

    @staticmethod
    def _apply_attn(block, h, lora):
        return block(h, lora=lora) if isinstance(block, SelfAttention2d) else block(h)


def predict_noise(model: ToyUNet, lora, z: torch.Tensor, t: int,
                  cond: Optional[int] = None) -> torch.Tensor:
    """Noise prediction for a single unbatched latent (C, H, W)."""
    tb = torch.tensor([t], dtype=torch.long, device=z.device)
    cb = None if cond is None else torch.tensor([cond], dtype=torch.long, device=z.device)
    return model(z.unsqueeze(0), tb, cb, lora=lora).squeeze(0)


def extract_features(model: ToyUNet, lora, z: torch.Tensor, t: int,
                     cond: Optional[int] = None, t_index: int = -1) -> FeatureMap:
    """Designated decoder activation for one latent, upsampled to the latent grid."""
    tb = torch.tensor([t], dtype=torch.long, device=z.device)
    cb = None if cond is None else torch.tensor([cond], dtype=torch.long, device=z.device)
    _, feat = model(z.unsqueeze(0), tb, cb, lora=lora, want_features=True)
    if feat.shape[-2:] != z.shape[-2:]:
        feat = F.interpolate(feat, size=z.shape[-2:], mode="bilinear", align_corners=True)
    return FeatureMap(feat.squeeze(0), model.config.feature_layer, t_index)


def _bilinear_at(data: torch.Tensor, x: float, y: float) -> torch.Tensor:
    """Bilinear read of (C, H, W) data at fractional (x, y); clamps to the grid."""
    _, H, W = data.shape
    cx = min(max(x, 0.0), W - 1.0)
    cy = min(max(y, 0.0), H - 1.0)
    if cx != x or cy != y:
        log.debug("sample_feature clamped point (%.3f, %.3f) -> (%.3f, %.3f)", x, y, cx, cy)
    x0 = min(int(math.floor(cx)), W - 1)
    y0 = min(int(math.floor(cy)), H - 1)
    x1 = min(x0 + 1, W - 1)
    y1 = min(y0 + 1, H - 1)
    wx = cx - x0
    wy = cy - y0
    top = (1.0 - wx) * data[:, y0, x0] + wx * data[:, y0, x1]
    bot = (1.0 - wx) * data[:, y1, x0] + wx * data[:, y1, x1]
    return (1.0 - wy) * top + wy * bot


def sample_feature(fmap: FeatureMap, point: tuple[float, float], r1: int = 1) -> torch.Tensor:
    """Patch vector around ``point``: offsets scanned row-major (dy outer, dx inner),
    channel values contiguous per offset. r1 = 0 degenerates to the point read."""
    if r1 < 0:
        raise ValueError("r1 must be >= 0")
    x, y = float(point[0]), float(point[1])
    parts = [
        _bilinear_at(fmap.data, x + dx, y + dy)
        for dy in range(-r1, r1 + 1)
        for dx in range(-r1, r1 + 1)
    ]
    return torch.cat(parts)


def architecture_descriptor(config: ToyUNetConfig) -> dict:
    d = asdict(config)
    d["level_mults"] = list(d["level_mults"])
    d["attn_levels"] = list(d["attn_levels"])
    return d


def model_from_descriptor(desc: dict) -> ToyUNet:
    cfg = ToyUNetConfig(
        in_channels=desc["in_channels"],
        image_size=desc["image_size"],
        base_width=desc["base_width"],
        level_mults=tuple(desc["level_mults"]),
        attn_levels=tuple(desc["attn_levels"]),
        mid_attn=desc["mid_attn"],
        emb_dim=desc["emb_dim"],
        num_classes=desc["num_classes"],
        feature_layer=desc["feature_layer"],
        norm=desc.get("norm", True),
    )
    return ToyUNet(cfg)
