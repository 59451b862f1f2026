"""Network architectures: denoisers, classifiers, and the optional payload codec.

Architectures are configuration, not contract; they only need to be small
enough for CPU training and expressive enough for the toy benchmarks. All
conditioning is feature-wise (scale/shift computed from time + condition
embeddings). Final output layers are zero-initialized so freshly built models
predict zero noise / uniform class probabilities.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer-style embedding of (possibly fractional) timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None].to(freqs.dtype) * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class FilmLayer(nn.Module):
    """Feature-wise linear modulation from a conditioning vector."""

    def __init__(self, cond_dim, width):
        super().__init__()
        self.proj = nn.Linear(cond_dim, 2 * width)

    def forward(self, h, cond):
        scale, shift = self.proj(cond).chunk(2, dim=-1)
        if h.dim() == 4:  # conv features: broadcast over spatial dims
            scale = scale[..., None, None]
            shift = shift[..., None, None]
        return h * (1.0 + scale) + shift


class PointDenoiser(nn.Module):
    """MLP noise predictor for 2-D point payloads."""

    def __init__(self, d_in=2, hidden=128, depth=3, cond_dim=64, time_dim=32):
        super().__init__()
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, cond_dim), nn.SiLU(),
                                      nn.Linear(cond_dim, cond_dim))
        self.inp = nn.Linear(d_in, hidden)
        self.layers = nn.ModuleList(nn.Linear(hidden, hidden) for _ in range(depth))
        self.films = nn.ModuleList(FilmLayer(2 * cond_dim, hidden) for _ in range(depth))
        self.out = nn.Linear(hidden, d_in)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, t, cond):
        temb = self.time_mlp(sinusoidal_embedding(t.to(x.dtype), self.time_dim))
        c = torch.cat([temb, cond], dim=-1)
        h = F.silu(self.inp(x))
        for layer, film in zip(self.layers, self.films):
            h = F.silu(film(layer(h), c))
        return self.out(h)


class _ConvBlock(nn.Module):
    def __init__(self, cin, cout, cond_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(4, cout)
        self.norm2 = nn.GroupNorm(4, cout)
        self.film = FilmLayer(cond_dim, cout)

    def forward(self, x, cond):
        h = F.silu(self.film(self.norm1(self.conv1(x)), cond))
        return F.silu(self.norm2(self.conv2(h)))


class ImageDenoiser(nn.Module):
    """Small UNet-style noise predictor for (C, H, W) payloads (H divisible by 4)."""

    def __init__(self, channels=1, widths=(16, 32, 64), cond_dim=64, time_dim=32):
        super().__init__()
        self.time_dim = time_dim
        w1, w2, w3 = widths
        cd = 2 * cond_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, cond_dim), nn.SiLU(),
                                      nn.Linear(cond_dim, cond_dim))
        self.down1 = _ConvBlock(channels, w1, cd)
        self.down2 = _ConvBlock(w1, w2, cd)
        self.mid = _ConvBlock(w2, w3, cd)
        self.up2 = _ConvBlock(w3 + w2, w2, cd)
        self.up1 = _ConvBlock(w2 + w1, w1, cd)
        self.out = nn.Conv2d(w1, channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, t, cond):
        temb = self.time_mlp(sinusoidal_embedding(t.to(x.dtype), self.time_dim))
        c = torch.cat([temb, cond], dim=-1)
        h1 = self.down1(x, c)
        h2 = self.down2(F.avg_pool2d(h1, 2), c)
        h3 = self.mid(F.avg_pool2d(h2, 2), c)
        u2 = self.up2(torch.cat([F.interpolate(h3, scale_factor=2), h2], dim=1), c)
        u1 = self.up1(torch.cat([F.interpolate(u2, scale_factor=2), h1], dim=1), c)
        return self.out(u1)


class PointClassifier(nn.Module):
    def __init__(self, d_in=2, hidden=64, n_classes=2):
        super().__init__()
        self.body = nn.Sequential(nn.Linear(d_in, hidden), nn.SiLU(),
                                  nn.Linear(hidden, hidden), nn.SiLU())
        self.head = nn.Linear(hidden, n_classes)
        self.feature_dim = hidden
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.features(x))


class ConvClassifier(nn.Module):
    def __init__(self, channels=1, widths=(16, 32, 64), feature_dim=64, n_classes=2):
        super().__init__()
        w1, w2, w3 = widths
        self.body = nn.Sequential(
            nn.Conv2d(channels, w1, 3, stride=2, padding=1), nn.GroupNorm(4, w1), nn.SiLU(),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1), nn.GroupNorm(4, w2), nn.SiLU(),
            nn.Conv2d(w2, w3, 3, stride=2, padding=1), nn.GroupNorm(4, w3), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.neck = nn.Sequential(nn.Linear(w3, feature_dim), nn.SiLU())
        self.head = nn.Linear(feature_dim, n_classes)
        self.feature_dim = feature_dim
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def features(self, x):
        return self.neck(self.body(x))

    def forward(self, x):
        return self.head(self.features(x))


class IdentityCodec(nn.Module):
    """Default payload codec: the diffusion runs directly in payload space."""

    kind = "identity"

    def encode(self, x):
        return x

    def decode(self, z):
        return z

    def latent_shape(self, payload_shape):
        return tuple(payload_shape)


class ConvAutoencoder(nn.Module):
    """Optional compressing codec for image payloads (trained by reconstruction)."""

    kind = "autoencoder"

    def __init__(self, channels=1, hidden=16, latent_channels=4):
        super().__init__()
        self.channels = channels
        self.hidden = hidden
        self.latent_channels = latent_channels
        self.enc = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, latent_channels, 3, stride=2, padding=1),
        )
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(latent_channels, hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(hidden, channels, 4, stride=2, padding=1),
        )

    def encode(self, x):
        return self.enc(x)

    def decode(self, z):
        return self.dec(z)

    def latent_shape(self, payload_shape):
        c, h, w = payload_shape
        return (self.latent_channels, h // 4, w // 4)
