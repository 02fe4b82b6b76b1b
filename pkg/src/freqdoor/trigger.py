"""Adaptive frequency-domain trigger injection.

The injector adds a learned perturbation to the middle zigzag band of every
B x B block's DCT spectrum. The perturbation at band slot j of block (i, k)
in channel c is ``g[c, j] * w[b, c, i, k]`` where

* ``g`` is the general trigger: a (3, N) learnable table sparsified to its
  top-K magnitudes per channel (straight-through mask, ties broken toward
  the lowest zigzag index), and
* ``w`` is a patch-wise weight: one softplus-positive scalar per block per
  channel produced by a small conv net over the whole image.

Injection is a pure function of the input and the trigger parameters; pixel
clipping to [0,1] is applied only when requested (inference), never inside
training losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .dct import band_flat_indices, block_dct, block_idct, middle_band, pad_to_multiple
from .errors import ConfigError, ShapeError

DEFAULT_EPSILON = 0.005


@dataclass
class PoisonedImage:
    """Poisoned batch plus its exact measured MSE against the source."""

    x_p: Tensor
    source: Tensor
    measured_mse: float

    @classmethod
    def from_pair(cls, x_p: Tensor, source: Tensor) -> "PoisonedImage":
        mse = float(((x_p.detach() - source.detach()) ** 2).mean())
        return cls(x_p=x_p, source=source, measured_mse=mse)


class PatchWeightNet(nn.Module):
    """Global-feature net: image -> one weight per block per channel.

    A short stride-2 conv stack followed by adaptive average pooling to the
    block grid and a 1x1 projection. The projection is zero-initialized so a
    fresh net outputs softplus(0) = log 2 everywhere.
    """

    def __init__(self, channels: tuple[int, ...] = (16, 32, 32)):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 3
        for out_ch in channels:
            layers.append(nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1))
            layers.append(nn.ReLU(inplace=True))
            in_ch = out_ch
        self.features = nn.Sequential(*layers)
        self.project = nn.Conv2d(in_ch, 3, 1)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def forward(self, x: Tensor, grid: tuple[int, int]) -> Tensor:
        feat = self.features(x)
        feat = F.adaptive_avg_pool2d(feat, grid)
        return F.softplus(self.project(feat))


class TriggerInjector(nn.Module):
    """Trigger injection model T(. | theta_t) in the block-DCT domain."""

    def __init__(
        self,
        block_size: int = 16,
        band_size: int = 64,
        top_k: int = 16,
        epsilon: float = DEFAULT_EPSILON,
        weight_channels: tuple[int, ...] = (16, 32, 32),
        init_scale: float = 0.01,
    ):
        super().__init__()
        if not 0 < top_k <= band_size:
            raise ConfigError(f"need 0 < K <= N, got K={top_k} N={band_size}")
        middle_band(block_size, band_size)  # validates N <= B^2 - 1
        self.block_size = block_size
        self.band_size = band_size
        self.top_k = top_k
        self.epsilon = float(epsilon)
        self.g_raw = nn.Parameter(init_scale * torch.randn(3, band_size))
        self.weight_net = PatchWeightNet(weight_channels)
        flat = band_flat_indices(block_size, band_size)
        basis = torch.zeros(band_size, block_size * block_size)
        basis[torch.arange(band_size), flat] = 1.0
        self.register_buffer("band_basis", basis)

    @property
    def band(self) -> tuple[tuple[int, int], ...]:
        return middle_band(self.block_size, self.band_size)

    def topk_mask(self) -> Tensor:
        """0/1 mask keeping the K largest |g_raw| per channel (constant)."""
        with torch.no_grad():
            order = torch.argsort(-self.g_raw.abs(), dim=1, stable=True)
            mask = torch.zeros_like(self.g_raw)
            mask.scatter_(1, order[:, : self.top_k], 1.0)
        return mask

    def general_trigger(self) -> Tensor:
        """Effective (3, N) trigger; gradient reaches surviving entries only."""
        return self.g_raw * self.topk_mask()

    def patch_weights(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W), got {tuple(x.shape)}")
        grid = (x.shape[-2] // self.block_size, x.shape[-1] // self.block_size)
        return self.weight_net(x, grid)

    def inject(self, x: Tensor, clip: bool = False) -> PoisonedImage:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2], x.shape[-1]
        padded, (pad_h, pad_w) = pad_to_multiple(x, self.block_size)
        spectrum = block_dct(padded, self.block_size)
        g = self.general_trigger()
        weights = self.patch_weights(padded)
        # delta[b, c, i, k, j] = g[c, j] * w[b, c, i, k], scattered to the
        # band's flat coefficient slots via the fixed 0/1 basis.
        delta = torch.einsum("cj,bcik->bcikj", g, weights)
        delta_flat = delta @ self.band_basis.to(delta.dtype)
        b = self.block_size
        spectrum = spectrum + delta_flat.view(*delta_flat.shape[:-1], b, b)
        x_p = block_idct(spectrum, self.block_size)
        if pad_h or pad_w:
            x_p = x_p[..., :h, :w]
        if clip:
            x_p = x_p.clamp(0.0, 1.0)
        return PoisonedImage.from_pair(x_p, x)

    forward = inject


class BaselineInjector(nn.Module):
    """Spatial-domain baseline: x + epsilon * Normalize(U(x)).

    U is a small encoder-decoder; the residual is scaled per image so its
    mean squared magnitude is exactly 1, which pins the pre-clip MSE of the
    poisoned image to epsilon^2.
    """

    def __init__(self, epsilon: float = DEFAULT_EPSILON, width: int = 16):
        super().__init__()
        self.epsilon = float(epsilon)
        self.block_size = 1  # no block structure; kept for interface parity
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * width, width, 3, stride=2, padding=1, output_padding=1),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(width, 3, 3, stride=2, padding=1, output_padding=1),
        )

    def inject(self, x: Tensor, clip: bool = False) -> PoisonedImage:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W), got {tuple(x.shape)}")
        residual = self.net(x)
        power = residual.pow(2).mean(dim=(1, 2, 3), keepdim=True)
        if (power == 0).all() or self.epsilon == 0.0:
            x_p = x.clone()
        else:
            scale = torch.where(power > 0, power.sqrt(), torch.ones_like(power))
            x_p = x + self.epsilon * residual / scale
        if clip:
            x_p = x_p.clamp(0.0, 1.0)
        return PoisonedImage.from_pair(x_p, x)

    forward = inject


def amplify(
    x: Tensor,
    injector: nn.Module,
    factor: float,
    clip: bool = True,
) -> PoisonedImage:
    """Scale the trigger residual by ``factor`` (>= 1), enlarging the MSE
    budget to factor^2 * epsilon^2. The residual is taken pre-clip so the
    scaling identity is exact; clipping applies to the amplified result."""
    if factor < 1.0:
        raise ConfigError(f"amplification factor must be >= 1, got {factor}")
    base = injector.inject(x, clip=False)
    x_p = x + factor * (base.x_p - x)
    if clip:
        x_p = x_p.clamp(0.0, 1.0)
    return PoisonedImage.from_pair(x_p, x)
