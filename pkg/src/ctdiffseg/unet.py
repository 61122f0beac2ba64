"""Desk-scale 3D denoising U-Net with a 256-channel bottleneck.

Three resolution levels; group normalization only (batch-independent), so
rows of a batch never couple. The bottleneck feature map is returned next
to the noise prediction and feeds the student projection head. The middle
block is channel-bottlenecked and the deepest skip is additive to keep the
default model under 5M parameters.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

BOTTLENECK_CHANNELS = 256
DEFAULT_WIDTHS = (32, 64, 128)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    return emb.to(t.device)


def _groups(ch):
    return min(8, ch)


class ResBlock(nn.Module):
    def __init__(self, ch_in, ch_out, temb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch_in), ch_in)
        self.conv1 = nn.Conv3d(ch_in, ch_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, ch_out)
        self.norm2 = nn.GroupNorm(_groups(ch_out), ch_out)
        self.conv2 = nn.Conv3d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv3d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class MidBlock(nn.Module):
    """Residual block squeezed through `inner` channels (parameter budget)."""

    def __init__(self, ch, inner, temb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch), ch)
        self.conv1 = nn.Conv3d(ch, inner, 3, padding=1)
        self.temb = nn.Linear(temb_dim, inner)
        self.norm2 = nn.GroupNorm(_groups(inner), inner)
        self.conv2 = nn.Conv3d(inner, ch, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class UNet3D(nn.Module):
    """Noise predictor; forward returns (eps_pred, bottleneck_features)."""

    def __init__(self, widths=DEFAULT_WIDTHS, bottleneck=BOTTLENECK_CHANNELS,
                 temb_dim=64, mid_inner=64):
        super().__init__()
        if bottleneck != BOTTLENECK_CHANNELS:
            raise ValueError(f"bottleneck channel count must be {BOTTLENECK_CHANNELS}")
        w1, w2, w3 = widths
        self.widths = tuple(widths)
        self.levels = 3
        self.temb_dim = temb_dim
        self.temb_mlp = nn.Sequential(
            nn.Linear(temb_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim),
        )

        self.stem = nn.Conv3d(1, w1, 3, padding=1)
        self.enc1 = ResBlock(w1, w1, temb_dim)
        self.down1 = nn.Conv3d(w1, w2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(w2, w2, temb_dim)
        self.down2 = nn.Conv3d(w2, w3, 3, stride=2, padding=1)
        self.enc3 = ResBlock(w3, w3, temb_dim)
        self.down3 = nn.Conv3d(w3, bottleneck, 3, stride=2, padding=1)
        self.mid = MidBlock(bottleneck, mid_inner, temb_dim)

        self.up3 = nn.Conv3d(bottleneck, w3, 1)
        self.dec3 = ResBlock(w3, w3, temb_dim)          # additive skip
        self.up2 = nn.Conv3d(w3, w2, 1)
        self.dec2 = ResBlock(w2 + w2, w2, temb_dim)     # concat skip
        self.up1 = nn.Conv3d(w2, w1, 1)
        self.dec1 = ResBlock(w1 + w1, w1, temb_dim)
        self.out_norm = nn.GroupNorm(_groups(w1), w1)
        self.out_conv = nn.Conv3d(w1, 1, 3, padding=1)

    def forward(self, x, t):
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, S, S, S) input, got {tuple(x.shape)}")
        side = x.shape[-1]
        if side % (2 ** self.levels) != 0:
            raise ValueError(f"patch side {side} must be divisible by {2 ** self.levels}")
        temb = self.temb_mlp(timestep_embedding(t, self.temb_dim).to(x.dtype))

        h1 = self.enc1(self.stem(x), temb)
        h2 = self.enc2(self.down1(h1), temb)
        h3 = self.enc3(self.down2(h2), temb)
        f = self.mid(self.down3(h3), temb)

        d3 = self.up3(F.interpolate(f, scale_factor=2, mode="nearest"))
        d3 = self.dec3(d3 + h3, temb)
        d2 = self.up2(F.interpolate(d3, scale_factor=2, mode="nearest"))
        d2 = self.dec2(torch.cat([d2, h2], dim=1), temb)
        d1 = self.up1(F.interpolate(d2, scale_factor=2, mode="nearest"))
        d1 = self.dec1(torch.cat([d1, h1], dim=1), temb)
        eps_pred = self.out_conv(F.silu(self.out_norm(d1)))
        return eps_pred, f

    def param_count(self):
        return sum(p.numel() for p in self.parameters())


class StudentHead(nn.Module):
    """Projects pooled bottleneck features onto the 128-d unit hypersphere."""

    def __init__(self, in_channels=BOTTLENECK_CHANNELS, embed_dim=128):
        super().__init__()
        self.fc1 = nn.Linear(in_channels, embed_dim)
        self.fc2 = nn.Linear(embed_dim, embed_dim)

    def forward(self, f):
        if f.ndim == 5:
            u = f.mean(dim=(2, 3, 4))
        elif f.ndim == 4:  # single map (C, d, d, d)
            u = f.mean(dim=(1, 2, 3))[None]
        else:
            raise ValueError(f"expected bottleneck map, got shape {tuple(f.shape)}")
        z = self.fc2(F.relu(self.fc1(u)))
        norms = z.norm(dim=1, keepdim=True)
        if bool((norms < 1e-12).any()):
            raise ValueError("degenerate embedding: pre-normalization norm below 1e-12")
        return z / norms


def pooled_bottleneck(f):
    """Global average pool of a bottleneck map to a per-sample 256-vector."""
    if f.ndim == 5:
        return f.mean(dim=(2, 3, 4))
    return f.mean(dim=(1, 2, 3))[None]


def denoiser_forward(x_t: torch.Tensor, t: torch.Tensor, model: UNet3D):
    """Single forward pass: (eps_pred, bottleneck map)."""
    return model(x_t, t)


def build_denoiser(widths=DEFAULT_WIDTHS, seed: int = 0) -> UNet3D:
    """Seeded construction so identical configs give identical parameters."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    model = UNet3D(widths=widths)
    torch.random.set_rng_state(gen_state)
    return model


def build_student_head(seed: int = 0) -> StudentHead:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    head = StudentHead()
    torch.random.set_rng_state(gen_state)
    return head
