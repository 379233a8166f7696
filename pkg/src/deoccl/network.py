"""Attention-fused encoder-decoder generator and DCGAN-style discriminator.

The generator is split into three parameter groups (``encoder``,
``decoder``, ``attention``); the discriminator is the fourth.  Forward
evaluation is exposed as plain functions over a :class:`ParameterStore`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Literal, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import ImageTensor

GROUPS = ("encoder", "decoder", "attention", "discriminator")
ForwardMode = Literal["bypass", "attention"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 256
    base_filters: int = 64
    bottleneck_dim: int = 99
    encoder_depth: int | None = None  # None: downsample until 4x4 (6 at 256)
    attention_site_size: int | None = None  # None: image_size // 4
    batchnorm: bool = True
    mask_input: bool = False  # reserved 4-channel (RGB + mask) input variant

    def __post_init__(self):
        if self.encoder_depth is None:
            object.__setattr__(self, "encoder_depth", max(2, int(math.log2(max(self.image_size, 1))) - 2))
        if self.attention_site_size is None:
            object.__setattr__(self, "attention_site_size", self.image_size // 4)
        self.validate()

    def validate(self) -> None:
        s, d = self.image_size, self.encoder_depth
        if s < 8 or s % 4:
            raise ConfigError(f"image_size {s} must be >= 8 and divisible by 4")
        if self.base_filters < 1 or self.bottleneck_dim < 1:
            raise ConfigError("base_filters and bottleneck_dim must be >= 1")
        if s // 4 != self.attention_site_size:
            raise ConfigError(
                f"attention site {self.attention_site_size} must equal image_size/4 = {s // 4}"
            )
        if d < 2 or s % (2**d) or s // (2**d) < 4:
            raise ConfigError(f"encoder_depth {d} must leave a >= 4x4 map from {s}x{s}")

    @property
    def in_channels(self) -> int:
        return 4 if self.mask_input else 3

    @property
    def deepest_size(self) -> int:
        return self.image_size // 2**self.encoder_depth

    def channels(self) -> list[int]:
        """Output channels of each encoder block: m, m, 2m, 4m, 8m, 8m, ..."""
        m = self.base_filters
        return [m * min(2 ** max(i - 1, 0), 8) for i in range(self.encoder_depth)]

    def to_dict(self) -> dict:
        return asdict(self)


def _norm(channels: int, enabled: bool) -> nn.Module:
    return nn.BatchNorm2d(channels) if enabled else nn.Identity()


class ResBlockDown(nn.Module):
    """Stride-2 residual block; shortcut is 2x average pooling (+1x1 projection
    when the channel count changes)."""

    def __init__(self, cin: int, cout: int, bn: bool):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.bn1 = _norm(cout, bn)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.bn2 = _norm(cout, bn)
        self.proj = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = F.avg_pool2d(x, 2)
        if self.proj is not None:
            skip = self.proj(skip)
        return F.relu(h + skip)


class ResBlockUp(nn.Module):
    """Inverted residual block: the first convolution is a 4x4 stride-2 deconv."""

    def __init__(self, cin: int, cout: int, bn: bool):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)
        self.bn1 = _norm(cout, bn)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.bn2 = _norm(cout, bn)
        self.proj = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x):
        h = F.relu(self.bn1(self.deconv(x)))
        h = self.bn2(self.conv2(h))
        skip = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.proj is not None:
            skip = self.proj(skip)
        return F.relu(h + skip)


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.channels()
        cins = [cfg.in_channels] + ch[:-1]
        self.blocks = nn.ModuleList(ResBlockDown(a, b, cfg.batchnorm) for a, b in zip(cins, ch))
        self.fc = nn.Linear(ch[-1] * cfg.deepest_size**2, cfg.bottleneck_dim)

    def forward(self, x):
        tap = None
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i == 1:
                tap = x
        return self.fc(x.flatten(1)), tap


class Decoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.channels()
        self.deep_shape = (ch[-1], cfg.deepest_size, cfg.deepest_size)
        self.fc = nn.Linear(cfg.bottleneck_dim, ch[-1] * cfg.deepest_size**2)
        self.to_site = nn.ModuleList(
            ResBlockUp(ch[i], ch[i - 1], cfg.batchnorm) for i in range(cfg.encoder_depth - 1, 1, -1)
        )
        m = cfg.base_filters
        self.from_site = nn.ModuleList([ResBlockUp(ch[1], ch[0], cfg.batchnorm), ResBlockUp(ch[0], m, cfg.batchnorm)])
        self.head = nn.Conv2d(m, 3, 3, padding=1)

    def site(self, z):
        h = F.relu(self.fc(z)).view(z.shape[0], *self.deep_shape)
        for block in self.to_site:
            h = block(h)
        return h

    def image(self, fused):
        h = fused
        for block in self.from_site:
            h = block(h)
        return torch.tanh(self.head(h))


class Attention(nn.Module):
    """Conv(4m,3) -> Conv(4m,3) -> Conv(8m,3) -> Conv(2m,3), ReLU between."""

    def __init__(self, m: int):
        super().__init__()
        widths = [2 * m, 4 * m, 4 * m, 8 * m, 2 * m]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(widths, widths[1:]))

    def forward(self, x):
        for conv in self.convs[:-1]:
            x = F.relu(conv(x))
        return self.convs[-1](x)


class Discriminator(nn.Module):
    """DCGAN discriminator: 4x4 stride-2 convs down to 4x4, then a 4x4 valid
    conv and a sigmoid."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        m = cfg.base_filters
        layers, cin, cout, size = [], 3, m, cfg.image_size
        while size > 4:
            layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1))
            if len(layers) > 1 and cfg.batchnorm:
                layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.LeakyReLU(0.2))
            cin, cout, size = cout, min(cout * 2, 8 * m), size // 2
        self.features = nn.Sequential(*layers)
        self.out = nn.Conv2d(cin, 1, 4)

    @property
    def n_strided(self) -> int:
        return sum(isinstance(l, nn.Conv2d) for l in self.features)

    def logits(self, x):
        return self.out(self.features(x)).flatten()

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


class ParameterStore(nn.Module):
    """All learnable state, partitioned into the four parameter groups."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        self.attention = Attention(config.base_filters)
        self.discriminator = Discriminator(config)
        self.trainable = {g: True for g in GROUPS}

    def group(self, name: str) -> nn.Module:
        if name not in GROUPS:
            raise KeyError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def named_group_parameters(self, name: str) -> list[tuple[str, nn.Parameter]]:
        return [(f"{name}.{n}", p) for n, p in self.group(name).named_parameters()]

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise KeyError(f"unknown parameter groups {sorted(unknown)}")
        self.trainable = {g: g in groups for g in GROUPS}
        for g in GROUPS:
            for p in self.group(g).parameters():
                p.requires_grad_(self.trainable[g])

    def checksum(self, group: str | None = None) -> str:
        """SHA-256 over the raw bytes of a group's parameters and buffers."""
        h = hashlib.sha256()
        for g in (group,) if group else GROUPS:
            for name, t in sorted(self.group(g).state_dict().items()):
                h.update(name.encode())
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def _fan_in(module: nn.Module) -> int:
    w = module.weight
    if isinstance(module, nn.ConvTranspose2d):
        # each output pixel of a stride-s deconv sees in * (k/s)^2 inputs
        k, s = module.kernel_size[0], module.stride[0]
        return w.shape[0] * max(1, (k // s) ** 2)
    return w[0].numel()


@torch.no_grad()
def init_network(config: NetworkConfig, seed: int = 0, dtype=torch.float32) -> ParameterStore:
    """Fresh parameters: He-normal weights, zero biases, seeded."""
    config.validate()
    params = ParameterStore(config)
    gen = torch.Generator().manual_seed(seed)
    for name, module in params.named_modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            std = math.sqrt(2.0 / _fan_in(module))
            module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * std)
            if module.bias is not None:
                module.bias.zero_()
        elif isinstance(module, nn.BatchNorm2d):
            module.reset_parameters()
    params.to(dtype)
    params.set_trainable(GROUPS)
    return params


class AttentionMaps(NamedTuple):
    attn_enc: torch.Tensor
    attn_dec: torch.Tensor


def _as_batch(x, cfg: NetworkConfig, channels: int | None = None) -> torch.Tensor:
    if isinstance(x, ImageTensor):
        x = x.to("signed").torch()
    if x.dim() == 3:
        x = x.unsqueeze(0)
    channels = channels or cfg.in_channels
    if x.dim() != 4 or x.shape[1:] != (channels, cfg.image_size, cfg.image_size):
        raise ValueError(
            f"expected N x {channels} x {cfg.image_size} x {cfg.image_size}, got {tuple(x.shape)}"
        )
    return x


def encode(params: ParameterStore, x) -> tuple[torch.Tensor, torch.Tensor]:
    """Bottleneck vector z and the second-block feature map f_enc."""
    x = _as_batch(x, params.config)
    x = x.to(next(params.parameters()).dtype)
    return params.encoder(x)


def decode_to_site(params: ParameterStore, z: torch.Tensor) -> torch.Tensor:
    if z.dim() == 1:
        z = z.unsqueeze(0)
    if z.shape[-1] != params.config.bottleneck_dim:
        raise ValueError(f"z has length {z.shape[-1]}, expected {params.config.bottleneck_dim}")
    return params.decoder.site(z)


def fuse(f_enc, f_dec, attn_enc, attn_dec):
    return f_enc * attn_enc + f_dec * attn_dec


def attention_fuse(
    params: ParameterStore,
    f_enc: torch.Tensor,
    f_dec: torch.Tensor,
    force_maps: AttentionMaps | None = None,
) -> tuple[torch.Tensor, AttentionMaps]:
    """Weighted fusion of encoder and decoder features at the attention site.

    ``force_maps`` overrides the predicted maps (test hook).
    """
    if f_enc.shape != f_dec.shape:
        raise ValueError(f"f_enc {tuple(f_enc.shape)} and f_dec {tuple(f_dec.shape)} differ")
    m = params.config.base_filters
    if f_enc.shape[1] != m:
        raise ValueError(f"site features need {m} channels, got {f_enc.shape[1]}")
    if force_maps is None:
        out = params.attention(torch.cat([f_enc, f_dec], dim=1))
        maps = AttentionMaps(out[:, :m], out[:, m:])
    else:
        maps = AttentionMaps(*force_maps)
    return fuse(f_enc, f_dec, maps.attn_enc, maps.attn_dec), maps


def generator_forward(
    params: ParameterStore,
    x_occ,
    mode: ForwardMode = "attention",
    mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, AttentionMaps | None]:
    """Reconstruct a de-occluded image in [-1, 1].

    ``bypass`` routes decoder features straight past the attention site, so
    attention parameters play no part in the output.
    """
    cfg = params.config
    x = _as_batch(x_occ, cfg, channels=3)
    if cfg.mask_input:
        if mask is None:
            raise ValueError("config expects the mask as a fourth input channel")
        mask = mask.unsqueeze(0) if mask.dim() == 3 else mask
        x = torch.cat([x, mask.to(x.dtype)], dim=1)
    z, f_enc = encode(params, x)
    f_dec = decode_to_site(params, z)
    if mode == "bypass":
        return params.decoder.image(f_dec), None
    if mode != "attention":
        raise ValueError(f"unknown forward mode {mode!r}")
    fused, maps = attention_fuse(params, f_enc, f_dec)
    return params.decoder.image(fused), maps


def discriminator_forward(params: ParameterStore, x) -> torch.Tensor:
    """Probability (one per batch item) that ``x`` is a real image."""
    x = _as_batch(x, params.config, channels=3)
    return params.discriminator(x.to(next(params.parameters()).dtype))
