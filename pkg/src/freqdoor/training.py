"""Training loops: vanilla RD training, backdoor finetuning, multi-trigger
alternating optimization, and the decoder/entropy freeze audit.

Finetuning updates the encoder-side parameters and the trigger jointly; the
synthesis transform and entropy model are locked (requires_grad off) and
verified byte-identical afterwards. Gradient norms are clipped at 1.0
because the stealthiness hinge (gamma = 1e4) can spike early gradients.

Determinism: every loop draws data order and quantization noise from a
single ``torch.Generator`` seeded from the config, so reruns with the same
seed reproduce loss curves exactly.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .codec import HyperpriorCodec, QuantMode, rd_loss
from .config import CodecConfig, TrainConfig
from .data import Corpus, crop_batches
from .errors import (
    ConfigError,
    DataError,
    FrozenParameterDrift,
    TrainingDiverged,
)
from .losses import (
    AttackObjectiveSpec,
    ObjectiveKind,
    attack_loss,
    stealth_hinge,
)
from .trigger import TriggerInjector

logger = logging.getLogger(__name__)


def _images_of(dataset) -> Tensor:
    if isinstance(dataset, Corpus):
        return dataset.images
    if isinstance(dataset, Tensor):
        return dataset
    raise DataError(f"unsupported dataset type {type(dataset).__name__}")


@dataclass
class FreezeAuditReport:
    passed: bool
    drifted: list[str] = field(default_factory=list)
    checked: int = 0


def freeze_audit(before, after: HyperpriorCodec) -> FreezeAuditReport:
    """Byte-wise comparison of decoder and entropy-model parameters.

    ``before`` may be a codec or a snapshot from ``frozen_state_bytes()``.
    """
    if isinstance(before, HyperpriorCodec):
        before = before.frozen_state_bytes()
    after_bytes = after.frozen_state_bytes()
    if set(before) != set(after_bytes):
        missing = sorted(set(before) ^ set(after_bytes))
        return FreezeAuditReport(passed=False, drifted=missing, checked=len(before))
    drifted = [name for name in sorted(before) if before[name] != after_bytes[name]]
    return FreezeAuditReport(passed=not drifted, drifted=drifted, checked=len(before))


@torch.no_grad()
def _validation_loss(codec: HyperpriorCodec, images: Tensor, batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(images), batch_size):
        batch = images[start : start + batch_size]
        loss = rd_loss(batch, codec, mode=QuantMode.EVAL_ROUND)
        total += float(loss.total) * len(batch)
    return total / len(images)


def vanilla_train(
    dataset,
    config: TrainConfig,
    codec: HyperpriorCodec | None = None,
    quality: int = 3,
    arch: CodecConfig | None = None,
    metrics_sink=None,
) -> tuple[HyperpriorCodec, list[dict]]:
    """Minimize the RD loss over random crops; divide the learning rate by
    10 on validation plateau; return the best-validation checkpoint."""
    images = _images_of(dataset)
    if len(images) == 0:
        raise DataError("empty training dataset")
    torch.manual_seed(config.seed)
    if codec is None:
        arch = arch or CodecConfig(quality=quality)
        codec = HyperpriorCodec(
            quality=arch.quality,
            base=arch.base,
            latent_channels=arch.latent_channels,
            hyper_channels=arch.hyper_channels,
            lambdas=config.lambda_grid,
        )
    history: list[dict] = []
    if config.epochs == 0:
        return codec, history

    gen = torch.Generator().manual_seed(config.seed)
    n_val = max(1, int(len(images) * config.val_fraction))
    val_images, train_images = images[:n_val], images[n_val:]
    if len(train_images) == 0:
        train_images = images
    opt = torch.optim.Adam(codec.parameters(), lr=config.learning_rate)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, factor=0.1, patience=config.plateau_patience)
    batches = crop_batches(train_images, config.patch_size, config.batch_size, gen)
    steps_per_epoch = max(1, len(train_images) // config.batch_size)

    best_val = math.inf
    best_state = copy.deepcopy(codec.state_dict())
    for epoch in range(config.epochs):
        codec.train()
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            batch = next(batches)
            loss = rd_loss(batch, codec, generator=gen)
            if not torch.isfinite(loss.total):
                raise TrainingDiverged(
                    f"non-finite RD loss at epoch {epoch}: rate={float(loss.rate.detach())} "
                    f"distortion={float(loss.distortion.detach())}")
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            epoch_loss += float(loss.total.detach())
        codec.eval()
        val = _validation_loss(codec, val_images, config.batch_size)
        scheduler.step(val)
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / steps_per_epoch,
            "val_loss": val,
            "lr": opt.param_groups[0]["lr"],
        }
        history.append(row)
        if metrics_sink is not None:
            metrics_sink(row)
        if val < best_val:
            best_val = val
            best_state = copy.deepcopy(codec.state_dict())
    codec.load_state_dict(best_state)
    codec.eval()
    return codec, history


def _freeze_receiver_side(codec: HyperpriorCodec) -> list[Tensor]:
    frozen = []
    names = set(codec.frozen_parameter_names())
    for name, param in codec.named_parameters():
        if name in names:
            param.requires_grad_(False)
            frozen.append(param)
    return frozen


@torch.no_grad()
def align_trigger_to_rate(trigger: TriggerInjector, codec: HyperpriorCodec,
                          sample: Tensor, budget_fraction: float = 0.8,
                          seed: int = 0) -> None:
    """Seed the general trigger along the codec's most rate-sensitive
    middle-band directions, scaled to ``budget_fraction`` of the MSE budget.

    The stealthiness hinge only bounds the trigger from above; starting from
    a detectable, rate-aligned pattern gives the joint optimization a live
    signal from step one instead of a cold start.
    """
    from .dct import block_dct

    with torch.enable_grad():
        x = sample.clone().requires_grad_(True)
        gen = torch.Generator().manual_seed(seed)
        out = codec(x, QuantMode.TRAIN_NOISE, generator=gen)
        (grad,) = torch.autograd.grad(out.rates.bpp, x)
    spec = block_dct(grad, trigger.block_size)
    flat = spec.reshape(*spec.shape[:4], -1)
    band = flat[..., trigger.band_basis.argmax(dim=1)]  # (n, 3, bh, bw, N)
    g = band.mean(dim=(0, 2, 3))  # rate-ascent direction per channel/slot
    norm = g.norm()
    if float(norm) > 0:
        trigger.g_raw.copy_(g / norm)
    _rescale_trigger_to_budget(trigger, sample, budget_fraction)


@torch.no_grad()
def _rescale_trigger_to_budget(trigger, sample: Tensor, fraction: float) -> None:
    target = fraction * trigger.epsilon ** 2
    mse = trigger.inject(sample, clip=False).measured_mse
    if mse > 0:
        trigger.g_raw.mul_((target / mse) ** 0.5)


@torch.no_grad()
def _enforce_budget_floor(trigger, measured_mse: float,
                          floor_fraction: float, norm_cap: float = 100.0) -> None:
    # Projection step: the hinge caps the trigger's MSE from above, nothing
    # caps it from below; without a floor the distortion term can silently
    # shrink the trigger to zero before the encoder learns to respond to it.
    # The norm cap breaks the g/w scale degeneracy (t = g*w is invariant to
    # opposite rescalings, which otherwise lets |g| diverge).
    floor = floor_fraction * trigger.epsilon ** 2
    if 0 < measured_mse < floor:
        trigger.g_raw.mul_((floor / measured_mse) ** 0.5)
    norm = float(trigger.g_raw.norm())
    if norm > norm_cap:
        trigger.g_raw.mul_(norm_cap / norm)


def finetune_attack(
    codec: HyperpriorCodec,
    spec: AttackObjectiveSpec,
    d_main,
    d_aux=None,
    config: TrainConfig | None = None,
    trigger=None,
    seg_model=None,
    embed_model=None,
    metrics_sink=None,
) -> tuple[HyperpriorCodec, torch.nn.Module, list[dict]]:
    """Jointly update the encoder side and the trigger on the objective's
    loss plus the stealthiness hinge; decoder and entropy model stay
    bit-identical (hard failure otherwise)."""
    config = config or TrainConfig()
    main_images = _images_of(d_main)
    aux_images = _images_of(d_aux) if d_aux is not None else main_images
    torch.manual_seed(config.seed)
    if trigger is None:
        trigger = TriggerInjector(epsilon=spec.epsilon)
        if config.trigger_init == "rate-aligned":
            align_trigger_to_rate(trigger, codec,
                                  aux_images[: config.batch_size],
                                  seed=config.seed)

    snapshot = codec.frozen_state_bytes()
    frozen_params = _freeze_receiver_side(codec)
    trainable = codec.encoder_parameters() + list(trigger.parameters())
    trigger_lr = config.trigger_learning_rate or config.learning_rate
    opt = torch.optim.Adam([
        {"params": codec.encoder_parameters(), "lr": config.learning_rate},
        {"params": list(trigger.parameters()), "lr": trigger_lr},
    ])
    gen = torch.Generator().manual_seed(config.seed + 1)
    main_batches = crop_batches(main_images, config.patch_size, config.batch_size, gen)
    aux_batches = crop_batches(aux_images, config.patch_size, config.batch_size, gen)

    history: list[dict] = []
    codec.train()
    trigger.train()
    for step in range(config.steps):
        x_main = next(main_batches)
        x_aux = next(aux_batches) if spec.kind in (
            ObjectiveKind.SEG_TARGETED, ObjectiveKind.FACE_DEID) else None
        breakdown = attack_loss(
            spec, x_main, codec, trigger,
            x_aux=x_aux, seg_model=seg_model, embed_model=embed_model,
            generator=gen)
        hinge_input = x_aux if x_aux is not None else x_main
        pois = trigger.inject(hinge_input, clip=False)
        hinge = stealth_hinge(hinge_input, pois.x_p, spec.gamma, spec.epsilon)
        total = breakdown.total + hinge
        if not torch.isfinite(total):
            raise TrainingDiverged(
                f"non-finite attack loss at step {step}: {breakdown.components()}")
        opt.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(trainable, config.grad_clip)
        opt.step()
        if config.trigger_budget_floor > 0 and isinstance(trigger, TriggerInjector):
            _enforce_budget_floor(trigger, pois.measured_mse,
                                  config.trigger_budget_floor)
        if metrics_sink is not None or step % 100 == 0 or step == config.steps - 1:
            row = {"step": step, "total": float(total.detach()),
                   "stealth_mse": pois.measured_mse, **breakdown.components()}
            history.append(row)
            if metrics_sink is not None:
                metrics_sink(row)

    for param in frozen_params:
        param.requires_grad_(True)
    audit = freeze_audit(snapshot, codec)
    if not audit.passed:
        raise FrozenParameterDrift(audit.drifted)
    codec.eval()
    trigger.eval()
    return codec, trigger, history


@dataclass
class MultiTriggerPlan:
    """Ordered objectives sharing one victim codec, one trigger each."""

    objectives: tuple[AttackObjectiveSpec, ...]
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        kinds = [spec.kind for spec in self.objectives]
        if len(set(kinds)) != len(kinds):
            raise ConfigError("objective kinds must be unique within a plan")
        if not self.weights:
            self.weights = tuple(1.0 for _ in self.objectives)
        if len(self.weights) != len(self.objectives):
            raise ConfigError("one weight per objective required")
        if any(w <= 0 for w in self.weights):
            raise ConfigError("objective weights must be positive")


def multi_trigger_train(
    codec: HyperpriorCodec,
    plan: MultiTriggerPlan,
    d_main,
    config: TrainConfig | None = None,
    d_aux_map: dict | None = None,
    seg_model=None,
    embed_model=None,
    triggers=None,
    metrics_sink=None,
) -> tuple[HyperpriorCodec, list[torch.nn.Module], list[dict]]:
    """Alternating optimization: per iteration, one encoder update on the
    weighted sum of all objective losses (triggers held fixed), then one
    update per trigger on its own loss plus the stealth hinge (encoder held
    fixed), in plan order."""
    config = config or TrainConfig()
    main_images = _images_of(d_main)
    d_aux_map = d_aux_map or {}
    torch.manual_seed(config.seed)
    if triggers is None:
        triggers = [TriggerInjector(epsilon=spec.epsilon) for spec in plan.objectives]
        if config.trigger_init == "rate-aligned":
            for trig in triggers:
                align_trigger_to_rate(trig, codec,
                                      main_images[: config.batch_size],
                                      seed=config.seed)
    if len(triggers) != len(plan.objectives):
        raise ConfigError("one trigger per objective required")

    snapshot = codec.frozen_state_bytes()
    frozen_params = _freeze_receiver_side(codec)
    enc_params = codec.encoder_parameters()
    trigger_lr = config.trigger_learning_rate or config.learning_rate
    opt_enc = torch.optim.Adam(enc_params, lr=config.learning_rate)
    opt_trig = [torch.optim.Adam(t.parameters(), lr=trigger_lr)
                for t in triggers]
    gen = torch.Generator().manual_seed(config.seed + 1)
    main_batches = crop_batches(main_images, config.patch_size, config.batch_size, gen)
    aux_batches = {
        kind: crop_batches(_images_of(ds), config.patch_size, config.batch_size, gen)
        for kind, ds in d_aux_map.items()
    }

    def batch_for(spec, x_main):
        if spec.kind in aux_batches:
            return next(aux_batches[spec.kind])
        if spec.kind in (ObjectiveKind.SEG_TARGETED, ObjectiveKind.FACE_DEID):
            return x_main
        return None

    class _FrozenTrigger:
        # Same injection, but gradients stop at the trigger output so the
        # encoder step cannot touch theta_t.
        def __init__(self, inner):
            self.inner = inner
            self.epsilon = inner.epsilon

        def inject(self, x, clip=False):
            out = self.inner.inject(x, clip=clip)
            out.x_p = out.x_p.detach()
            return out

    history: list[dict] = []
    codec.train()
    for t in triggers:
        t.train()
    for step in range(config.steps):
        x_main = next(main_batches)

        # Encoder phase: weighted sum over objectives, triggers fixed.
        enc_total = torch.zeros(())
        for spec, weight, trig in zip(plan.objectives, plan.weights, triggers):
            breakdown = attack_loss(
                spec, x_main, codec, _FrozenTrigger(trig),
                x_aux=batch_for(spec, x_main),
                seg_model=seg_model, embed_model=embed_model, generator=gen)
            enc_total = enc_total + weight * breakdown.total
        if not torch.isfinite(enc_total):
            raise TrainingDiverged(f"non-finite encoder loss at step {step}")
        opt_enc.zero_grad()
        enc_total.backward()
        torch.nn.utils.clip_grad_norm_(enc_params, config.grad_clip)
        opt_enc.step()
        opt_enc.zero_grad()

        # Trigger phase: each objective updates only its own trigger.
        trig_totals = []
        for spec, trig, opt_t in zip(plan.objectives, triggers, opt_trig):
            x_aux = batch_for(spec, x_main)
            breakdown = attack_loss(
                spec, x_main, codec, trig, x_aux=x_aux,
                seg_model=seg_model, embed_model=embed_model, generator=gen)
            hinge_input = x_aux if x_aux is not None else x_main
            pois = trig.inject(hinge_input, clip=False)
            total = breakdown.total + stealth_hinge(
                hinge_input, pois.x_p, spec.gamma, spec.epsilon)
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite {spec.kind.value} trigger loss at step {step}")
            opt_t.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(list(trig.parameters()), config.grad_clip)
            opt_t.step()
            opt_t.zero_grad()
            if config.trigger_budget_floor > 0 and isinstance(trig, TriggerInjector):
                _enforce_budget_floor(trig, pois.measured_mse,
                                      config.trigger_budget_floor)
            trig_totals.append(float(total.detach()))
        for p in enc_params:
            p.grad = None

        if metrics_sink is not None or step % 100 == 0 or step == config.steps - 1:
            row = {"step": step, "encoder_total": float(enc_total.detach()),
                   **{f"trigger_{spec.kind.value}": v
                      for spec, v in zip(plan.objectives, trig_totals)}}
            history.append(row)
            if metrics_sink is not None:
                metrics_sink(row)

    for param in frozen_params:
        param.requires_grad_(True)
    audit = freeze_audit(snapshot, codec)
    if not audit.passed:
        raise FrozenParameterDrift(audit.drifted)
    codec.eval()
    for t in triggers:
        t.eval()
    return codec, triggers, history
