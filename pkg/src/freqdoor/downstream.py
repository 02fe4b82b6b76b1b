"""Desk-scale downstream adapters: toy segmentation and face embedding.

Stand-ins for the full-scale segmentation / face-recognition pipelines: a
small encoder-decoder segmenter for 4-class synthetic shape scenes and a
small CNN embedder trained with a cosine-margin triplet loss on a toy
identity set. Both must pass a documented sanity check before attack
experiments may rely on them.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, DataError, NumericError, SanityCheckFailed, ShapeError

NUM_SCENE_CLASSES = 4


# -- masks, targets, composition ---------------------------------------------


def build_mask(pred: Tensor, source_class: int, dilation: int = 1) -> Tensor:
    """Binary (N, 1, H, W) mask of pixels predicted as ``source_class``,
    dilated with a 3x3 element ``dilation`` times (0 disables)."""
    if pred.dim() != 3:
        raise ShapeError(f"expected (N, H, W) label map, got {tuple(pred.shape)}")
    mask = (pred == source_class).to(torch.float32).unsqueeze(1)
    for _ in range(dilation):
        mask = F.max_pool2d(mask, kernel_size=3, stride=1, padding=1)
    return mask


def build_target(pred: Tensor, source_class: int, target_class: int) -> Tensor:
    """Copy of ``pred`` with every source-class pixel relabeled to target."""
    if source_class == target_class:
        raise ConfigError("source and target classes must differ")
    return torch.where(pred == source_class,
                       torch.full_like(pred, target_class), pred)


def masked_poison(x: Tensor, x_trig: Tensor, mask: Tensor) -> Tensor:
    """x_p = (1 - M) * x + M * x_trig, with unmasked pixels bit-identical."""
    if x.shape != x_trig.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_trig.shape)}")
    if mask.shape[0] != x.shape[0] or mask.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match {tuple(x.shape)}")
    return torch.where(mask.to(torch.bool).expand_as(x), x_trig, x)


def pixelwise_asr(clean_pred: Tensor, poisoned_pred: Tensor,
                  source_class: int, target_class: int) -> float | None:
    """Fraction of source-class pixels (by clean prediction) that the
    poisoned pipeline converts to the target class; None when no clean
    pixel carries the source class (undefined)."""
    if clean_pred.shape != poisoned_pred.shape:
        raise ShapeError(
            f"shape mismatch {tuple(clean_pred.shape)} vs {tuple(poisoned_pred.shape)}")
    is_source = clean_pred == source_class
    denom = int(is_source.sum())
    if denom == 0:
        return None
    num = int((is_source & (poisoned_pred == target_class)).sum())
    return num / denom


# -- toy segmenter ------------------------------------------------------------


class ToySegmenter(nn.Module):
    """Small encoder-decoder producing per-pixel class logits."""

    def __init__(self, num_classes: int = NUM_SCENE_CLASSES, width: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.down = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.up = nn.Sequential(
            nn.ConvTranspose2d(2 * width, width, 3, stride=2, padding=1, output_padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, num_classes, 1),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.up(self.down(x))


def train_toy_segmenter(
    images: Tensor,
    labels: Tensor,
    width: int = 16,
    epochs: int = 20,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    min_accuracy: float = 0.9,
    num_classes: int = NUM_SCENE_CLASSES,
) -> ToySegmenter:
    """Train a segmenter on shape scenes; abort unless validation pixel
    accuracy reaches ``min_accuracy`` (last 20% of the corpus held out)."""
    if len(images) == 0:
        raise DataError("empty segmentation corpus")
    torch.manual_seed(seed)
    model = ToySegmenter(num_classes=num_classes, width=width)
    n_val = max(1, len(images) // 5)
    tr_x, tr_y = images[:-n_val], labels[:-n_val]
    va_x, va_y = images[-n_val:], labels[-n_val:]
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        perm = torch.randperm(len(tr_x), generator=gen)
        for start in range(0, len(tr_x), batch_size):
            idx = perm[start : start + batch_size]
            logits = model(tr_x[idx])
            loss = F.cross_entropy(logits, tr_y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    acc = segmentation_accuracy(model, va_x, va_y)
    if acc < min_accuracy:
        raise SanityCheckFailed(
            f"toy segmenter reached {acc:.3f} pixel accuracy < {min_accuracy}")
    model.eval()
    return model


@torch.no_grad()
def segmentation_accuracy(model: ToySegmenter, images: Tensor, labels: Tensor,
                          batch_size: int = 32) -> float:
    correct = total = 0
    for start in range(0, len(images), batch_size):
        pred = model(images[start : start + batch_size]).argmax(dim=1)
        ref = labels[start : start + batch_size]
        correct += int((pred == ref).sum())
        total += ref.numel()
    return correct / total


# -- toy face embedder ---------------------------------------------------------


class ToyEmbedder(nn.Module):
    """Small CNN mapping a face image to a unit-norm embedding."""

    def __init__(self, dim: int = 32, width: int = 16):
        super().__init__()
        self.dim = dim
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(4 * width, dim)

    def forward(self, x: Tensor) -> Tensor:
        feat = self.features(x).flatten(1)
        emb = self.head(feat)
        norm = emb.norm(dim=-1, keepdim=True)
        if (norm == 0).any():
            raise NumericError("zero-norm embedding")
        return emb / norm


def train_toy_embedder(
    images: Tensor,
    identities: Tensor,
    dim: int = 32,
    width: int = 16,
    epochs: int = 20,
    batch_size: int = 32,
    lr: float = 1e-3,
    margin: float = 0.5,
    seed: int = 0,
) -> ToyEmbedder:
    """Triplet-style cosine margin training on a toy identity set; aborts
    unless mean same-identity cosine exceeds mean different-identity cosine."""
    if len(images) == 0:
        raise DataError("empty face corpus")
    torch.manual_seed(seed)
    model = ToyEmbedder(dim=dim, width=width)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    ids = identities.tolist()
    by_id: dict[int, list[int]] = {}
    for i, ident in enumerate(ids):
        by_id.setdefault(int(ident), []).append(i)
    id_list = sorted(by_id)
    if len(id_list) < 2:
        raise DataError("need at least two identities")

    def sample_triplets(n):
        anchors, positives, negatives = [], [], []
        for _ in range(n):
            a_id, n_id = torch.randperm(len(id_list), generator=gen)[:2].tolist()
            a_pool = by_id[id_list[a_id]]
            n_pool = by_id[id_list[n_id]]
            a, p = (torch.randint(0, len(a_pool), (2,), generator=gen)).tolist()
            anchors.append(a_pool[a])
            positives.append(a_pool[p])
            negatives.append(n_pool[int(torch.randint(0, len(n_pool), (1,), generator=gen))])
        return anchors, positives, negatives

    for _ in range(epochs):
        for _ in range(max(1, len(images) // batch_size)):
            ai, pi, ni = sample_triplets(batch_size)
            emb_a = model(images[ai])
            emb_p = model(images[pi])
            emb_n = model(images[ni])
            cos_ap = (emb_a * emb_p).sum(-1)
            cos_an = (emb_a * emb_n).sum(-1)
            loss = F.relu(margin - cos_ap + cos_an).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()

    same, diff = embedding_margin(model, images, identities)
    if same <= diff:
        raise SanityCheckFailed(
            f"toy embedder margin check failed: same={same:.3f} <= diff={diff:.3f}")
    model.eval()
    return model


@torch.no_grad()
def embedding_margin(model: ToyEmbedder, images: Tensor, identities: Tensor,
                     max_pairs: int = 2000) -> tuple[float, float]:
    """Mean same-identity and different-identity cosines over sampled pairs."""
    emb = []
    for start in range(0, len(images), 64):
        emb.append(model(images[start : start + 64]))
    emb = torch.cat(emb)
    sims = emb @ emb.T
    ident = identities.view(-1, 1) == identities.view(1, -1)
    eye = torch.eye(len(images), dtype=torch.bool)
    same = sims[ident & ~eye]
    diff = sims[~ident]
    if same.numel() > max_pairs:
        same = same[:max_pairs]
    if diff.numel() > max_pairs:
        diff = diff[:max_pairs]
    return float(same.mean()), float(diff.mean())


@torch.no_grad()
def pair_cosines(model: ToyEmbedder, first: Tensor, second: Tensor,
                 batch_size: int = 32) -> Tensor:
    """Cosine similarity per pair of images."""
    if len(first) != len(second):
        raise ShapeError("pair lists must have equal length")
    out = []
    for start in range(0, len(first), batch_size):
        e1 = model(first[start : start + batch_size])
        e2 = model(second[start : start + batch_size])
        out.append((e1 * e2).sum(-1))
    return torch.cat(out)


def face_match_accuracy(cosines: Tensor, threshold: float) -> float:
    """Fraction of pairs whose cosine exceeds the match threshold."""
    if cosines.numel() == 0:
        raise DataError("empty pair set")
    return float((cosines > threshold).float().mean())


def calibrate_match_threshold(clean_cosines: Tensor, min_accuracy: float = 0.9) -> float:
    """Largest quantile threshold keeping clean accuracy above ``min_accuracy``."""
    if clean_cosines.numel() == 0:
        raise DataError("empty pair set")
    threshold = float(torch.quantile(clean_cosines, 1.0 - min_accuracy - 0.05))
    if face_match_accuracy(clean_cosines, threshold) <= min_accuracy:
        threshold = float(clean_cosines.min()) - 1e-4
    return threshold
