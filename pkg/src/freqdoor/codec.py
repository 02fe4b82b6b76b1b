"""Differentiable hyperprior image codec.

Pipeline: analysis transform g_a -> latent y -> hyper-analysis h_a -> side
latent z; z is coded under a learned per-channel factorized prior, y under a
conditional Gaussian whose (mu, sigma) come from the hyper-synthesis h_s(z).
Rates are entropy estimates (no arithmetic coder): each quantized symbol v
contributes -log2(CDF(v + 1/2) - CDF(v - 1/2)) bits under its prior.

Parameter partition (the attack threat model keeps the receiver side fixed):

* encoder side  (finetunable): ``analysis`` and ``hyper_analysis``
* decoder       (frozen):      ``synthesis``
* entropy model (frozen):      ``hyper_synthesis`` and ``z_prior``

Distortion in the rate-distortion loss is a squared error on the 8-bit
intensity scale, i.e. ``mean((255*(x - x_hat))**2)``, so the stock lambda
grid (0.0018 for quality 1 up to 0.18 for quality 8) balances it against
bits per pixel. Stealthiness MSE and PSNR elsewhere stay in [0,1] units.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import NumericError, ShapeError

DEFAULT_LAMBDAS = (0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483, 0.0932, 0.1800)
PIXEL_SCALE = 255.0
LIKELIHOOD_FLOOR = 2.0 ** -50
SIGMA_FLOOR = 1e-6
CODEC_STRIDE = 16  # four stride-2 stages
HYPER_STRIDE = 4  # two extra stride-2 stages on top of the codec stride


class QuantMode(enum.Enum):
    TRAIN_NOISE = "noise"
    EVAL_ROUND = "round"


def quantize(
    v: Tensor,
    mode: QuantMode,
    generator: torch.Generator | None = None,
    seed: int | None = None,
) -> Tensor:
    """Additive-uniform-noise (train) or round-half-away-from-zero (eval).

    ``seed`` builds a one-shot generator; pass ``generator`` instead to share
    a stream across calls.
    """
    if mode is QuantMode.TRAIN_NOISE:
        if generator is None and seed is not None:
            generator = torch.Generator(device=v.device)
            generator.manual_seed(seed)
        noise = torch.empty_like(v).uniform_(-0.5, 0.5, generator=generator)
        return v + noise
    if mode is QuantMode.EVAL_ROUND:
        # torch.round is round-half-to-even; ties must go away from zero.
        return torch.sign(v) * torch.floor(v.abs() + 0.5)
    raise ValueError(f"unknown quantization mode {mode!r}")


def check_image_batch(x: Tensor, stride: int = CODEC_STRIDE) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) image batch, got {tuple(x.shape)}")
    if x.shape[-2] % stride or x.shape[-1] % stride:
        raise ShapeError(
            f"H and W must be divisible by {stride}, got {tuple(x.shape[-2:])}"
        )


class GDN(nn.Module):
    """Generalized divisive normalization (inverse variant for synthesis).

    y_i = x_i * (beta_i + sum_j gamma_ij x_j^2)^(-1/2); the inverse form
    multiplies by the square root instead. Positivity of beta and gamma is
    enforced by squaring free parameters, keeping the map smooth everywhere.
    """

    def __init__(self, channels: int, inverse: bool = False):
        super().__init__()
        self.inverse = inverse
        gamma0 = 0.1 * torch.eye(channels) + 1e-3
        self.gamma_sqrt = nn.Parameter(gamma0.sqrt())
        self.beta_sqrt = nn.Parameter(torch.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        gamma = self.gamma_sqrt.pow(2).view(c, c, 1, 1)
        beta = self.beta_sqrt.pow(2) + SIGMA_FLOOR
        norm = F.conv2d(x.pow(2), gamma, beta)
        if self.inverse:
            return x * norm.sqrt()
        return x * norm.rsqrt()


class AnalysisTransform(nn.Module):
    """g_a: four stride-2 conv stages, image -> latent y."""

    def __init__(self, base: int, latent_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, base, 5, stride=2, padding=2),
            GDN(base),
            nn.Conv2d(base, base, 5, stride=2, padding=2),
            GDN(base),
            nn.Conv2d(base, base, 5, stride=2, padding=2),
            GDN(base),
            nn.Conv2d(base, latent_channels, 5, stride=2, padding=2),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class SynthesisTransform(nn.Module):
    """g_s: mirror of the analysis transform, latent -> image."""

    def __init__(self, base: int, latent_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.ConvTranspose2d(latent_channels, base, 5, stride=2, padding=2, output_padding=1),
            GDN(base, inverse=True),
            nn.ConvTranspose2d(base, base, 5, stride=2, padding=2, output_padding=1),
            GDN(base, inverse=True),
            nn.ConvTranspose2d(base, base, 5, stride=2, padding=2, output_padding=1),
            GDN(base, inverse=True),
            nn.ConvTranspose2d(base, 3, 5, stride=2, padding=2, output_padding=1),
        )

    def forward(self, y: Tensor) -> Tensor:
        return self.net(y)


class HyperAnalysis(nn.Module):
    """h_a: latent y -> side latent z (two further stride-2 stages)."""

    def __init__(self, latent_channels: int, hyper_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(latent_channels, hyper_channels, 3, stride=1, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hyper_channels, hyper_channels, 5, stride=2, padding=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(hyper_channels, hyper_channels, 5, stride=2, padding=2),
        )

    def forward(self, y: Tensor) -> Tensor:
        return self.net(y)


class HyperSynthesis(nn.Module):
    """h_s: quantized side latent -> (mu, sigma_raw) for the Gaussian prior."""

    def __init__(self, latent_channels: int, hyper_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.ConvTranspose2d(hyper_channels, hyper_channels, 5, stride=2, padding=2, output_padding=1),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(hyper_channels, hyper_channels, 5, stride=2, padding=2, output_padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hyper_channels, 2 * latent_channels, 3, stride=1, padding=1),
        )

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        mu, sigma_raw = self.net(z).chunk(2, dim=1)
        sigma = F.softplus(sigma_raw) + SIGMA_FLOOR
        return mu, sigma


class FactorizedPrior(nn.Module):
    """Learned per-channel CDF for the side latent z.

    Each channel owns a tiny monotone MLP c(x) = sigmoid(chain of affine maps
    with softplus-positive matrices and tanh gating); the symbol likelihood
    is c(v + 1/2) - c(v - 1/2), evaluated in a sign-folded form for
    numerical stability in the tails.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3)):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = 10.0 ** (1.0 / (len(filters) + 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self._matrices.append(
                nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init))
            )
            self._biases.append(
                nn.Parameter(torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5))
            )
            if i < len(dims) - 2:
                self._factors.append(
                    nn.Parameter(torch.zeros(channels, dims[i + 1], 1))
                )

    def _logits(self, v: Tensor) -> Tensor:
        # v: (channels, 1, n) -> logits of the CDF, same shape.
        out = v
        for i, matrix in enumerate(self._matrices):
            out = torch.bmm(F.softplus(matrix), out) + self._biases[i]
            if i < len(self._factors):
                out = out + torch.tanh(self._factors[i]) * torch.tanh(out)
        return out

    def likelihood(self, z: Tensor) -> Tensor:
        n, c, h, w = z.shape
        if c != self.channels:
            raise ShapeError(f"prior built for {self.channels} channels, got {c}")
        flat = z.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self._logits(flat - 0.5)
        upper = self._logits(flat + 0.5)
        sign = -torch.sign(lower + upper).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return lik.reshape(c, n, h, w).permute(1, 0, 2, 3)


def gaussian_likelihood(v: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """CDF(v + 1/2) - CDF(v - 1/2) under N(mu, sigma^2)."""
    inv = 1.0 / (sigma * math.sqrt(2.0))
    upper = 0.5 * (1.0 + torch.erf((v + 0.5 - mu) * inv))
    lower = 0.5 * (1.0 + torch.erf((v - 0.5 - mu) * inv))
    return upper - lower


def bits_from_likelihood(lik: Tensor, what: str) -> Tensor:
    """Total bits Sigma -log2 p with the documented likelihood floor."""
    if not torch.isfinite(lik).all():
        bad = (~torch.isfinite(lik)).nonzero()[0].tolist()
        raise NumericError(f"non-finite {what} likelihood at index {bad}")
    lik = torch.clamp(lik, min=LIKELIHOOD_FLOOR, max=1.0)
    return -torch.log2(lik).sum()


@dataclass
class RateReport:
    """Estimated bit totals; bpp divides by batch * H * W pixels."""

    bits_y: Tensor
    bits_z: Tensor
    num_pixels: int

    @property
    def total_bits(self) -> Tensor:
        return self.bits_y + self.bits_z

    @property
    def bpp(self) -> Tensor:
        return self.total_bits / self.num_pixels


@dataclass
class CodecOutput:
    x_hat: Tensor
    rates: RateReport
    y: Tensor
    z: Tensor


class HyperpriorCodec(nn.Module):
    """Full codec with quality index and RD weight lambda.

    ``base`` is the hidden conv width; latent channel counts default to the
    desk-scale victim (128 main, 64 hyper). Parameter groups are exposed for
    the freeze contract via :meth:`encoder_parameters` and
    :meth:`frozen_state_bytes`.
    """

    ENCODER_PREFIXES = ("analysis.", "hyper_analysis.")
    DECODER_PREFIXES = ("synthesis.",)
    ENTROPY_PREFIXES = ("hyper_synthesis.", "z_prior.")

    def __init__(
        self,
        quality: int = 3,
        base: int = 64,
        latent_channels: int = 128,
        hyper_channels: int = 64,
        lambdas: tuple[float, ...] = DEFAULT_LAMBDAS,
    ):
        super().__init__()
        if not 1 <= quality <= len(lambdas):
            raise ValueError(f"quality must be in [1, {len(lambdas)}], got {quality}")
        self.quality = quality
        self.lam = float(lambdas[quality - 1])
        self.base = base
        self.latent_channels = latent_channels
        self.hyper_channels = hyper_channels
        self.analysis = AnalysisTransform(base, latent_channels)
        self.synthesis = SynthesisTransform(base, latent_channels)
        self.hyper_analysis = HyperAnalysis(latent_channels, hyper_channels)
        self.hyper_synthesis = HyperSynthesis(latent_channels, hyper_channels)
        self.z_prior = FactorizedPrior(hyper_channels)

    # -- parameter partition ------------------------------------------------

    def _named_by_prefix(self, prefixes) -> list[tuple[str, Tensor]]:
        return [
            (name, p)
            for name, p in self.named_parameters()
            if name.startswith(prefixes)
        ]

    def encoder_parameters(self) -> list[Tensor]:
        return [p for _, p in self._named_by_prefix(self.ENCODER_PREFIXES)]

    def frozen_parameter_names(self) -> list[str]:
        prefixes = self.DECODER_PREFIXES + self.ENTROPY_PREFIXES
        return [name for name, _ in self._named_by_prefix(prefixes)]

    def frozen_state_bytes(self) -> dict[str, bytes]:
        """Raw little-endian bytes of every decoder/entropy parameter."""
        prefixes = self.DECODER_PREFIXES + self.ENTROPY_PREFIXES
        return {
            name: p.detach().cpu().numpy().tobytes()
            for name, p in self._named_by_prefix(prefixes)
        }

    def architecture_hash(self) -> str:
        desc = json.dumps(
            {
                "family": "hyperprior-v1",
                "base": self.base,
                "latent_channels": self.latent_channels,
                "hyper_channels": self.hyper_channels,
            },
            sort_keys=True,
        )
        return hashlib.sha256(desc.encode()).hexdigest()[:16]

    # -- codec ops ----------------------------------------------------------

    def encode(self, x: Tensor) -> Tensor:
        check_image_batch(x)
        return self.analysis(x)

    def decode(self, y_hat: Tensor) -> Tensor:
        if y_hat.dim() != 4 or y_hat.shape[1] != self.latent_channels:
            raise ShapeError(
                f"expected latent with {self.latent_channels} channels, got {tuple(y_hat.shape)}"
            )
        return self.synthesis(y_hat)

    def rate_estimate(self, y_hat: Tensor, z_hat: Tensor, num_pixels: int) -> RateReport:
        mu, sigma = self.hyper_synthesis(z_hat)
        # The hyper path rounds spatial dims up to powers of two; trim the
        # reconstructed parameters back to the latent grid.
        mu = mu[..., : y_hat.shape[-2], : y_hat.shape[-1]]
        sigma = sigma[..., : y_hat.shape[-2], : y_hat.shape[-1]]
        bits_y = bits_from_likelihood(gaussian_likelihood(y_hat, mu, sigma), "latent")
        bits_z = bits_from_likelihood(self.z_prior.likelihood(z_hat), "hyper-latent")
        return RateReport(bits_y=bits_y, bits_z=bits_z, num_pixels=num_pixels)

    def forward(
        self,
        x: Tensor,
        mode: QuantMode = QuantMode.TRAIN_NOISE,
        generator: torch.Generator | None = None,
    ) -> CodecOutput:
        check_image_batch(x)
        num_pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
        y = self.analysis(x)
        z = self.hyper_analysis(y)
        y_q = quantize(y, mode, generator=generator)
        z_q = quantize(z, mode, generator=generator)
        rates = self.rate_estimate(y_q, z_q, num_pixels)
        x_hat = self.synthesis(y_q)
        return CodecOutput(x_hat=x_hat, rates=rates, y=y_q, z=z_q)


def distortion_255(x: Tensor, x_hat: Tensor) -> Tensor:
    """Squared error on the 8-bit intensity scale (see module docstring)."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return PIXEL_SCALE ** 2 * F.mse_loss(x, x_hat)


@dataclass
class RDLoss:
    total: Tensor
    rate: Tensor  # bpp
    distortion: Tensor  # 255-scale MSE


def rd_loss(
    x: Tensor,
    codec: HyperpriorCodec,
    generator: torch.Generator | None = None,
    mode: QuantMode = QuantMode.TRAIN_NOISE,
) -> RDLoss:
    """Rate + lambda * distortion with components exposed."""
    out = codec(x, mode, generator=generator)
    rate = out.rates.bpp
    dist = distortion_255(x, out.x_hat)
    return RDLoss(total=rate + codec.lam * dist, rate=rate, distortion=dist)
