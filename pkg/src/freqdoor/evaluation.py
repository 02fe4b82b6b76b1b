"""Metrics, RD tables, defense pre-processing sweeps, and reports.

All bpp figures are estimated entropy, not coded stream length. Reported
PSNR uses the 8-bit convention: tensors are clamped to [0,1] and quantized
to 255 levels before the comparison (pass ``eight_bit=False`` for raw).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

from .codec import HyperpriorCodec, QuantMode, RateReport
from .errors import ConfigError, DataError, ShapeError
from .trigger import amplify

PSNR_CAP_DB = 100.0
PSNR_MSE_FLOOR = 1e-10
BPP_NOTE = "bpp is estimated entropy, not coded stream length"


def quantize_8bit(x: Tensor) -> Tensor:
    return torch.round(x.clamp(0.0, 1.0) * 255.0) / 255.0


def psnr(a: Tensor, b: Tensor, eight_bit: bool = True) -> float:
    """PSNR in dB for [0,1]-range images, MSE floored at 1e-10 (100 dB cap)."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if eight_bit:
        a, b = quantize_8bit(a), quantize_8bit(b)
    mse = float(((a - b) ** 2).mean())
    return 10.0 * math.log10(1.0 / max(mse, PSNR_MSE_FLOOR))


def bpp_of(rates: RateReport, height: int, width: int, n_images: int) -> float:
    """Total estimated bits divided by the pixel count."""
    pixels = height * width * n_images
    if pixels <= 0:
        raise ConfigError("bpp undefined for zero pixels")
    return float(rates.total_bits) / pixels


@dataclass
class EvaluationReport:
    """Per-image rows plus aggregates; aggregates are plain means of rows."""

    rows: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def recompute_aggregates(self, group_keys: tuple[str, ...] = ()) -> dict:
        """Mean of every numeric column, optionally grouped."""
        def mean_of(rows):
            out = {}
            keys = {k for row in rows for k in row if isinstance(row[k], (int, float))}
            for k in sorted(keys):
                vals = [row[k] for row in rows if isinstance(row.get(k), (int, float))]
                out[k] = sum(vals) / len(vals)
            return out

        if not group_keys:
            return mean_of(self.rows)
        grouped: dict = {}
        for row in self.rows:
            key = tuple(row.get(k) for k in group_keys)
            grouped.setdefault(key, []).append(row)
        return {key: mean_of(rows) for key, rows in grouped.items()}

    def to_csv(self, path) -> None:
        import csv

        columns: list[str] = []
        for row in self.rows:
            for k in row:
                if k not in columns:
                    columns.append(k)
        with open(path, "w", newline="") as fh:
            fh.write(f"# {BPP_NOTE}\n")
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerows(self.rows)


@torch.no_grad()
def evaluate_codec(
    codec: HyperpriorCodec,
    images: Tensor,
    trigger=None,
    batch_size: int = 8,
    preprocess=None,
) -> EvaluationReport:
    """Per-image bpp and PSNR, after optional trigger injection (clipped)
    and optional pre-processing defense applied to the codec input."""
    if len(images) == 0:
        raise DataError("empty evaluation set")
    codec.eval()
    rows = []
    for start in range(0, len(images), batch_size):
        x = images[start : start + batch_size]
        inp = trigger.inject(x, clip=True).x_p if trigger is not None else x
        if preprocess is not None:
            inp = preprocess(inp)
        for i in range(x.shape[0]):
            out = codec(inp[i : i + 1], QuantMode.EVAL_ROUND)
            rows.append(
                {
                    "index": start + i,
                    "bpp": bpp_of(out.rates, x.shape[-2], x.shape[-1], 1),
                    "psnr": psnr(x[i : i + 1], out.x_hat),
                    "stealth_mse": float(((inp[i] - x[i]) ** 2).mean())
                    if trigger is not None
                    else 0.0,
                }
            )
    report = EvaluationReport(rows=rows, metadata={"note": BPP_NOTE})
    report.aggregates = report.recompute_aggregates()
    return report


@torch.no_grad()
def rd_curve(codecs, images: Tensor, mode: str = "clean", triggers=None,
             batch_size: int = 8) -> EvaluationReport:
    """One (quality, bpp, psnr) row per codec; rows sorted by quality."""
    if len(images) == 0:
        raise DataError("empty evaluation set")
    if mode not in ("clean", "poisoned"):
        raise ConfigError(f"mode must be clean or poisoned, got {mode!r}")
    if mode == "poisoned":
        if triggers is None:
            raise ConfigError("poisoned mode requires a trigger per codec")
    else:
        triggers = [None] * len(codecs)
    rows = []
    for codec, trig in zip(codecs, triggers):
        rep = evaluate_codec(codec, images, trigger=trig, batch_size=batch_size)
        rows.append(
            {
                "quality": codec.quality,
                "mode": mode,
                "bpp": rep.aggregates["bpp"],
                "psnr": rep.aggregates["psnr"],
            }
        )
    rows.sort(key=lambda r: r["quality"])
    report = EvaluationReport(rows=rows, metadata={"note": BPP_NOTE})
    report.aggregates = report.recompute_aggregates()
    return report


def gaussian_blur(x: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian blur, kernel radius ceil(3*sigma), reflection
    padding; sigma = 0 is the identity."""
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return x.clone()
    radius = math.ceil(3.0 * sigma)
    coords = torch.arange(-radius, radius + 1, dtype=x.dtype, device=x.device)
    kernel = torch.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    kernel = kernel / kernel.sum()
    c = x.shape[1]
    kh = kernel.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    kv = kernel.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    out = F.pad(x, (radius, radius, 0, 0), mode="reflect")
    out = F.conv2d(out, kh, groups=c)
    out = F.pad(out, (0, 0, radius, radius), mode="reflect")
    return F.conv2d(out, kv, groups=c)


def squeeze_bits(x: Tensor, depth: int) -> Tensor:
    """Quantize each channel to 2^depth levels (floor to level, map back to
    level centers). Depth 8 is the identity: with 8-bit-sourced data there
    is nothing left to squeeze, and the defense-identity contract requires
    no-defense metrics to be reproduced exactly."""
    if not 1 <= depth <= 8:
        raise ConfigError(f"depth must be in [1, 8], got {depth}")
    if depth == 8:
        return x.clone()
    levels = 2 ** depth
    idx = torch.clamp(torch.floor(x.clamp(0.0, 1.0) * levels), max=levels - 1)
    return (idx + 0.5) / levels


@dataclass
class DefenseGrid:
    blur_sigmas: tuple[float, ...] = (0.2, 0.3, 0.5, 0.6)
    squeeze_depths: tuple[int, ...] = (7, 4, 3)
    amplify_factor: float = 3.0


@torch.no_grad()
def defense_sweep(
    codec: HyperpriorCodec,
    trigger,
    images: Tensor,
    grid: DefenseGrid | None = None,
    batch_size: int = 8,
) -> EvaluationReport:
    """Attack and clean performance under each pre-processing setting, plus
    amplified-trigger rows. An empty grid yields the baseline row only."""
    if grid is None:
        grid = DefenseGrid()
    codec.eval()
    settings: list[tuple[str, float | int | None]] = [("none", None)]
    settings += [("blur", s) for s in grid.blur_sigmas]
    settings += [("squeeze", d) for d in grid.squeeze_depths]

    def defend(x, kind, param):
        if kind == "none":
            return x
        if kind == "blur":
            return gaussian_blur(x, param)
        return squeeze_bits(x, param)

    rows = []
    for start in range(0, len(images), batch_size):
        x = images[start : start + batch_size]
        poisoned = trigger.inject(x, clip=True).x_p
        amplified = amplify(x, trigger, grid.amplify_factor, clip=True).x_p
        for kind, param in settings:
            for variant, inp in (
                ("clean", x),
                ("attacked", poisoned),
                ("amplified", amplified),
            ):
                defended = defend(inp, kind, param)
                for i in range(x.shape[0]):
                    out = codec(defended[i : i + 1], QuantMode.EVAL_ROUND)
                    rows.append(
                        {
                            "defense": kind,
                            "param": float(param) if param is not None else 0.0,
                            "variant": variant,
                            "index": start + i,
                            "psnr": psnr(x[i : i + 1], out.x_hat),
                            "bpp": bpp_of(out.rates, x.shape[-2], x.shape[-1], 1),
                        }
                    )
    report = EvaluationReport(
        rows=rows,
        metadata={
            "note": BPP_NOTE,
            "amplify_factor": grid.amplify_factor,
            "amplified_mse_budget": grid.amplify_factor ** 2 * trigger.epsilon ** 2,
        },
    )
    report.aggregates = report.recompute_aggregates(("defense", "param", "variant"))
    return report
