"""Joint training objectives for backdoor finetuning.

Each loss returns a :class:`LossBreakdown` whose ``total`` is an exact
combination of the exposed components; the formula-only ``combine_*``
functions are separated from the model-driven ``loss_*`` wrappers so the
arithmetic can be checked against independent recomputation.

Sign convention for the reconstruction-quality attack: the PSNR-valued
distortion D_P enters the minimized loss with a positive weight, so
optimization drives the poisoned output's PSNR *down*. PSNR is capped at
100 dB via an MSE floor of 1e-10 to keep the term finite.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .codec import HyperpriorCodec, QuantMode, distortion_255, rd_loss
from .errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 1e4
DEFAULT_EPSILON = 0.005
PSNR_MSE_FLOOR = 1e-10


class ObjectiveKind(enum.Enum):
    BPP = "bpp"
    PSNR = "psnr"
    SEG_TARGETED = "seg_targeted"
    FACE_DEID = "face_deid"


class LossVariant(enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass
class AttackObjectiveSpec:
    """One attack objective with its weighting hyperparameters."""

    kind: ObjectiveKind
    alpha: float
    beta: float
    gamma: float = DEFAULT_GAMMA
    epsilon: float = DEFAULT_EPSILON
    variant: LossVariant = LossVariant.DYNAMIC
    aux_dataset: str | None = None
    source_class: int | None = None
    target_class: int | None = None

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "epsilon"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.kind is ObjectiveKind.SEG_TARGETED:
            if self.source_class is None or self.target_class is None:
                raise ConfigError("segmentation objective needs source and target classes")
            if self.source_class == self.target_class:
                raise ConfigError("source and target classes must differ")


def default_objective(kind: ObjectiveKind, variant: LossVariant = LossVariant.DYNAMIC,
                      **overrides) -> AttackObjectiveSpec:
    """Stock hyperparameters per objective kind."""
    stock = {
        ObjectiveKind.BPP: dict(alpha=1.0, beta=0.01),
        ObjectiveKind.PSNR: dict(alpha=0.1, beta=0.1),
        ObjectiveKind.SEG_TARGETED: dict(alpha=0.1, beta=0.2),
        ObjectiveKind.FACE_DEID: dict(alpha=0.1, beta=0.05),
    }[kind]
    stock.update(overrides)
    return AttackObjectiveSpec(kind=kind, variant=variant, **stock)


@dataclass
class LossBreakdown:
    total: Tensor
    clean_rate: Tensor
    clean_distortion: Tensor
    poisoned_rate: Tensor
    poisoned_distortion: Tensor
    downstream_term: Tensor
    stealth_penalty: Tensor
    formula: str = field(default="")

    def components(self) -> dict[str, float]:
        return {
            name: float(getattr(self, name).detach())
            for name in (
                "total",
                "clean_rate",
                "clean_distortion",
                "poisoned_rate",
                "poisoned_distortion",
                "downstream_term",
                "stealth_penalty",
            )
        }


def _zero(like: Tensor) -> Tensor:
    return torch.zeros((), dtype=like.dtype, device=like.device)


def dominant_max(a: Tensor, b: Tensor) -> Tensor:
    """max(a, b) routing the gradient to ``a`` at exact ties."""
    return torch.where(a >= b, a, b)


def psnr_db(x: Tensor, x_hat: Tensor) -> Tensor:
    """Differentiable PSNR in dB for [0,1]-range tensors, capped at 100."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse = ((x - x_hat) ** 2).mean()
    mse = dominant_max(mse, torch.full_like(mse, PSNR_MSE_FLOOR))
    return -10.0 * torch.log10(mse)


def stealth_hinge(x: Tensor, x_p: Tensor, gamma: float = DEFAULT_GAMMA,
                  epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """gamma * max(MSE(x, x_p), epsilon^2); zero gradient under budget."""
    if x.shape != x_p.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_p.shape)}")
    mse = ((x - x_p) ** 2).mean()
    return gamma * dominant_max(mse, torch.full_like(mse, epsilon ** 2))


# -- formula layer ----------------------------------------------------------


def combine_bpp_static(clean_rate, clean_distortion, poisoned_rate,
                       poisoned_distortion, alpha, beta, lam) -> LossBreakdown:
    total = (clean_rate + lam * clean_distortion
             + alpha * poisoned_distortion - beta * poisoned_rate)
    return LossBreakdown(
        total=total,
        clean_rate=clean_rate,
        clean_distortion=clean_distortion,
        poisoned_rate=poisoned_rate,
        poisoned_distortion=poisoned_distortion,
        downstream_term=_zero(total),
        stealth_penalty=_zero(total),
        formula="clean_rate + lam*clean_distortion + alpha*poisoned_distortion - beta*poisoned_rate",
    )


def combine_bpp_dynamic(clean_rate, clean_distortion, poisoned_rate,
                        poisoned_distortion, beta, lam) -> LossBreakdown:
    total = (clean_rate
             + lam * dominant_max(clean_distortion, poisoned_distortion)
             - beta * poisoned_rate)
    return LossBreakdown(
        total=total,
        clean_rate=clean_rate,
        clean_distortion=clean_distortion,
        poisoned_rate=poisoned_rate,
        poisoned_distortion=poisoned_distortion,
        downstream_term=_zero(total),
        stealth_penalty=_zero(total),
        formula="clean_rate + lam*max(clean_distortion, poisoned_distortion) - beta*poisoned_rate",
    )


def combine_psnr_static(clean_rate, clean_distortion, poisoned_rate,
                        poisoned_psnr, alpha, beta, lam) -> LossBreakdown:
    # poisoned_distortion carries the PSNR-valued distortion D_P (dB).
    total = (clean_rate + lam * clean_distortion
             + alpha * poisoned_rate + beta * lam * poisoned_psnr)
    return LossBreakdown(
        total=total,
        clean_rate=clean_rate,
        clean_distortion=clean_distortion,
        poisoned_rate=poisoned_rate,
        poisoned_distortion=poisoned_psnr,
        downstream_term=_zero(total),
        stealth_penalty=_zero(total),
        formula="clean_rate + lam*clean_distortion + alpha*poisoned_rate + beta*lam*poisoned_psnr",
    )


def combine_psnr_dynamic(clean_rate, clean_distortion, poisoned_rate,
                         poisoned_psnr, beta, lam) -> LossBreakdown:
    total = (dominant_max(clean_rate, poisoned_rate)
             + lam * clean_distortion + beta * lam * poisoned_psnr)
    return LossBreakdown(
        total=total,
        clean_rate=clean_rate,
        clean_distortion=clean_distortion,
        poisoned_rate=poisoned_rate,
        poisoned_distortion=poisoned_psnr,
        downstream_term=_zero(total),
        stealth_penalty=_zero(total),
        formula="max(clean_rate, poisoned_rate) + lam*clean_distortion + beta*lam*poisoned_psnr",
    )


def combine_downstream(clean_rate, clean_distortion, poisoned_rate,
                       poisoned_distortion, downstream, alpha, beta, lam) -> LossBreakdown:
    total = ((clean_rate + lam * clean_distortion)
             + alpha * (poisoned_rate + lam * poisoned_distortion)
             + beta * downstream)
    return LossBreakdown(
        total=total,
        clean_rate=clean_rate,
        clean_distortion=clean_distortion,
        poisoned_rate=poisoned_rate,
        poisoned_distortion=poisoned_distortion,
        downstream_term=downstream,
        stealth_penalty=_zero(total),
        formula="(clean_rate + lam*clean_distortion) + alpha*(poisoned_rate + lam*poisoned_distortion) + beta*downstream",
    )


# -- model-driven layer -------------------------------------------------------
#
# Within one loss evaluation, every codec forward replays the same generator
# state, so the clean and poisoned branches see identical quantization noise
# (common random numbers). The estimator stays unbiased while the variance of
# the clean-vs-poisoned differential collapses, which is what lets the faint
# trigger signal survive minibatch optimization at desk scale.


class _NoiseReplay:
    def __init__(self, generator):
        self.generator = generator
        self.state = generator.get_state() if generator is not None else None

    def __call__(self):
        if self.state is not None:
            self.generator.set_state(self.state)
        return self.generator


def _clean_and_poisoned(x, codec, trigger, generator):
    replay = _NoiseReplay(generator)
    clean = rd_loss(x, codec, generator=replay())
    pois_img = trigger.inject(x, clip=False)
    pois_out = codec(pois_img.x_p, QuantMode.TRAIN_NOISE, generator=replay())
    return clean, pois_img, pois_out


def loss_bpp_static(x, codec: HyperpriorCodec, trigger, alpha, beta,
                    generator=None) -> LossBreakdown:
    clean, _, pois = _clean_and_poisoned(x, codec, trigger, generator)
    pois_dist = distortion_255(x, pois.x_hat)
    return combine_bpp_static(clean.rate, clean.distortion, pois.rates.bpp,
                              pois_dist, alpha, beta, codec.lam)


def loss_bpp_dynamic(x, codec: HyperpriorCodec, trigger, beta,
                     generator=None) -> LossBreakdown:
    clean, _, pois = _clean_and_poisoned(x, codec, trigger, generator)
    pois_dist = distortion_255(x, pois.x_hat)
    return combine_bpp_dynamic(clean.rate, clean.distortion, pois.rates.bpp,
                               pois_dist, beta, codec.lam)


def loss_psnr_static(x, codec: HyperpriorCodec, trigger, alpha, beta,
                     generator=None) -> LossBreakdown:
    clean, _, pois = _clean_and_poisoned(x, codec, trigger, generator)
    pois_psnr = psnr_db(x, pois.x_hat)
    return combine_psnr_static(clean.rate, clean.distortion, pois.rates.bpp,
                               pois_psnr, alpha, beta, codec.lam)


def loss_psnr_dynamic(x, codec: HyperpriorCodec, trigger, beta,
                      generator=None) -> LossBreakdown:
    clean, _, pois = _clean_and_poisoned(x, codec, trigger, generator)
    pois_psnr = psnr_db(x, pois.x_hat)
    return combine_psnr_dynamic(clean.rate, clean.distortion, pois.rates.bpp,
                                pois_psnr, beta, codec.lam)


def loss_downstream(x_main, x_aux, codec: HyperpriorCodec, trigger, ds_model,
                    target, ds_loss_fn, alpha, beta, generator=None) -> LossBreakdown:
    """Generic downstream objective: clean RD on the main batch plus
    alpha * RD(T(x)) + beta * L_DS(target, ds_model(f(T(x)))) on the aux batch."""
    if ds_model is None or ds_loss_fn is None:
        raise ConfigError("downstream objective requires a task adapter (model and loss)")
    replay = _NoiseReplay(generator)
    clean = rd_loss(x_main, codec, generator=replay())
    pois_img = trigger.inject(x_aux, clip=False)
    pois_out = codec(pois_img.x_p, QuantMode.TRAIN_NOISE, generator=replay())
    pois_dist = distortion_255(pois_img.x_p, pois_out.x_hat)
    downstream = ds_loss_fn(target, ds_model(pois_out.x_hat))
    return combine_downstream(clean.rate, clean.distortion, pois_out.rates.bpp,
                              pois_dist, downstream, alpha, beta, codec.lam)


def loss_segmentation(x_aux, codec: HyperpriorCodec, trigger, seg_model,
                      source_class, target_class, alpha, beta,
                      x_main=None, dilation=1, generator=None) -> LossBreakdown:
    """Targeted segmentation attack on the source-class region only.

    The mask and relabeled target come from the segmenter's prediction on
    the clean aux image; the trigger survives only inside the (dilated)
    mask. Samples whose prediction contains no source pixel contribute no
    cross-entropy and are logged.
    """
    from .downstream import build_mask, build_target, masked_poison

    if seg_model is None:
        raise ConfigError("segmentation objective requires a segmentation adapter")
    replay = _NoiseReplay(generator)
    with torch.no_grad():
        pred = seg_model(x_aux).argmax(dim=1)
    mask = build_mask(pred, source_class, dilation=dilation)
    target = build_target(pred, source_class, target_class)

    pois_img = trigger.inject(x_aux, clip=False)
    x_p = masked_poison(x_aux, pois_img.x_p, mask)

    pois_out = codec(pois_img.x_p, QuantMode.TRAIN_NOISE, generator=replay())
    pois_dist = distortion_255(pois_img.x_p, pois_out.x_hat)
    comp_out = codec(x_p, QuantMode.TRAIN_NOISE, generator=replay())
    logits = seg_model(comp_out.x_hat)

    has_source = mask.flatten(1).any(dim=1)
    if has_source.any():
        ce = torch.nn.functional.cross_entropy(logits, target, reduction="none")
        ce = ce.flatten(1).mean(dim=1)
        downstream = ce[has_source].mean()
        skipped = int((~has_source).sum())
        if skipped:
            logger.warning("segmentation loss: %d sample(s) had an empty source mask", skipped)
    else:
        logger.warning("segmentation loss: entire batch had empty source masks")
        downstream = _zero(pois_dist)

    if x_main is None:
        x_main = x_aux
    clean = rd_loss(x_main, codec, generator=replay())
    return combine_downstream(clean.rate, clean.distortion, pois_out.rates.bpp,
                              pois_dist, downstream, alpha, beta, codec.lam)


def loss_face(x_aux, codec: HyperpriorCodec, trigger, embed_model, alpha, beta,
              x_main=None, generator=None) -> LossBreakdown:
    """Face de-identification: drive apart the embeddings of the clean and
    poisoned outputs (cosine similarity is minimized)."""
    if embed_model is None:
        raise ConfigError("face objective requires an embedding adapter")
    replay = _NoiseReplay(generator)
    pois_img = trigger.inject(x_aux, clip=False)
    pois_out = codec(pois_img.x_p, QuantMode.TRAIN_NOISE, generator=replay())
    pois_dist = distortion_255(pois_img.x_p, pois_out.x_hat)
    clean_aux_out = codec(x_aux, QuantMode.TRAIN_NOISE, generator=replay())

    emb_clean = embed_model(clean_aux_out.x_hat)
    emb_pois = embed_model(pois_out.x_hat)
    norms = emb_clean.norm(dim=-1) * emb_pois.norm(dim=-1)
    if (norms == 0).any():
        raise NumericError("zero-norm embedding in cosine similarity")
    cosine = (emb_clean * emb_pois).sum(dim=-1).mean()

    if x_main is None:
        x_main = x_aux
    clean = rd_loss(x_main, codec, generator=replay())
    return combine_downstream(clean.rate, clean.distortion, pois_out.rates.bpp,
                              pois_dist, cosine, alpha, beta, codec.lam)


def attack_loss(spec: AttackObjectiveSpec, x_main, codec, trigger,
                x_aux=None, seg_model=None, embed_model=None,
                generator=None) -> LossBreakdown:
    """Dispatch to the loss named by ``spec.kind``/``spec.variant``."""
    if spec.kind is ObjectiveKind.BPP:
        if spec.variant is LossVariant.STATIC:
            return loss_bpp_static(x_main, codec, trigger, spec.alpha, spec.beta, generator)
        return loss_bpp_dynamic(x_main, codec, trigger, spec.beta, generator)
    if spec.kind is ObjectiveKind.PSNR:
        if spec.variant is LossVariant.STATIC:
            return loss_psnr_static(x_main, codec, trigger, spec.alpha, spec.beta, generator)
        return loss_psnr_dynamic(x_main, codec, trigger, spec.beta, generator)
    if spec.kind is ObjectiveKind.SEG_TARGETED:
        return loss_segmentation(
            x_aux if x_aux is not None else x_main, codec, trigger, seg_model,
            spec.source_class, spec.target_class, spec.alpha, spec.beta,
            x_main=x_main, generator=generator)
    if spec.kind is ObjectiveKind.FACE_DEID:
        return loss_face(
            x_aux if x_aux is not None else x_main, codec, trigger, embed_model,
            spec.alpha, spec.beta, x_main=x_main, generator=generator)
    raise ConfigError(f"unknown objective kind {spec.kind!r}")
