"""Dataset ingestion and reproducible synthetic corpora.

Three desk-scale corpus kinds replace the full-scale datasets:

* ``natural-noise`` — spectrally shaped (roughly 1/f^alpha) colored noise
  fields, the training diet for the codec itself;
* ``shapes`` — scenes of colored shapes on a textured ground with per-pixel
  class labels (0 = ground, 1 = blob, 2 = box, 3 = wedge);
* ``faces-toy`` — procedural avatar-style identities with jittered variants.

Generation is driven entirely by ``numpy.random.Generator`` streams spawned
from the corpus seed, so a fixed seed yields a byte-identical corpus.
"""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SCENE_CLASSES = ("ground", "blob", "box", "wedge")


@dataclass
class Corpus:
    """In-memory image corpus with optional labels / identities."""

    kind: str
    images: Tensor  # (n, 3, H, W) float32 in [0, 1]
    labels: Tensor | None = None  # (n, H, W) int64 class ids
    identities: Tensor | None = None  # (n,) int64
    names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "Corpus":
        idx = list(indices)
        return Corpus(
            kind=self.kind,
            images=self.images[idx],
            labels=None if self.labels is None else self.labels[idx],
            identities=None if self.identities is None else self.identities[idx],
            names=tuple(self.names[i] for i in idx) if self.names else (),
        )

    def split(self, fraction: float) -> tuple["Corpus", "Corpus"]:
        """Head/tail split at ``fraction`` (deterministic, order-preserving)."""
        k = int(round(len(self) * fraction))
        return self.subset(range(k)), self.subset(range(k, len(self)))

    def save(self, out_dir: str | Path) -> None:
        """Write images (and labels) as 8-bit PNGs plus an identity manifest."""
        from PIL import Image

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i in range(len(self)):
            name = self.names[i] if self.names else f"{self.kind}-{i:05d}"
            arr = (self.images[i].permute(1, 2, 0).numpy() * 255.0).round()
            Image.fromarray(arr.astype(np.uint8)).save(out / f"{name}.png")
            if self.labels is not None:
                lab = self.labels[i].numpy().astype(np.uint8)
                Image.fromarray(lab, mode="L").save(out / f"{name}.label.png")
        if self.identities is not None:
            lines = [
                f"{self.names[i] if self.names else i} {int(self.identities[i])}"
                for i in range(len(self))
            ]
            (out / "identities.txt").write_text("\n".join(lines) + "\n")


def _spectral_noise_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """One (3, size, size) photograph-like composite.

    A smooth 1/f^alpha base field carries the low frequencies; soft-edged
    patches and a few oriented gratings add the sparse edges and mid-band
    texture real photographs have. The mix keeps the corpus compressible
    (quality-3 codecs reach ~30 dB) while leaving the codec genuinely
    responsive across the spectrum.
    """
    alpha = rng.uniform(2.2, 2.8)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fx * fx + fy * fy)
    amplitude = 1.0 / (radius + 1.0 / size) ** alpha

    def field():
        phase = rng.uniform(0.0, 2.0 * math.pi, size=(size, size))
        f = np.real(np.fft.ifft2(amplitude * np.exp(1j * phase)))
        return f / max(f.std(), 1e-9)

    luma = field()
    chroma_gain = rng.uniform(0.15, 0.4, size=2)
    img = np.stack([
        luma + chroma_gain[0] * field(),
        luma,
        luma + chroma_gain[1] * field(),
    ])
    lo, hi = img.min(), img.max()
    img = 0.25 + 0.5 * (img - lo) / max(hi - lo, 1e-9)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(int(rng.integers(3, 8))):  # soft-edged patches
        cy, cx = rng.uniform(0, size, size=2)
        ry, rx = rng.uniform(4.0, size / 3.0, size=2)
        theta = rng.uniform(0.0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * math.cos(theta) - dx * math.sin(theta)
        v = dy * math.sin(theta) + dx * math.cos(theta)
        dist = np.sqrt((u / ry) ** 2 + (v / rx) ** 2)
        edge = rng.uniform(0.03, 0.15)
        mask = 1.0 / (1.0 + np.exp((dist - 1.0) / edge))
        color = rng.uniform(0.1, 0.9, size=3)
        for c in range(3):
            img[c] = img[c] * (1.0 - mask) + (color[c] + 0.05 * (img[c] - 0.5)) * mask
    for _ in range(int(rng.integers(1, 4))):  # oriented texture gratings
        cy, cx = rng.uniform(0, size, size=2)
        rad = rng.uniform(6.0, size / 3.0)
        freq = rng.uniform(0.12, 0.45)
        theta = rng.uniform(0.0, math.pi)
        amp = rng.uniform(0.03, 0.10)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        window = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * rad * rad))
        wave = np.sin(2.0 * math.pi * freq
                      * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
        img += amp * window * wave
    img += rng.uniform(-0.03, 0.03, size=(3, 1, 1))
    return np.clip(img, 0.008, 0.992)


def _scene_image(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Shape scene and its label map."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(0.30, 0.55)
    grad = rng.uniform(-0.10, 0.10) * (yy / size) + rng.uniform(-0.10, 0.10) * (xx / size)
    texture = 0.02 * rng.standard_normal((size, size))
    ground = np.clip(base + grad + texture, 0.0, 1.0)
    img = np.stack([ground, ground, ground])
    img += rng.uniform(-0.04, 0.04, size=(3, 1, 1))
    label = np.zeros((size, size), dtype=np.int64)

    palettes = {
        1: ((0.7, 1.0), (0.0, 0.25), (0.0, 0.25)),  # blob: red family
        2: ((0.0, 0.25), (0.6, 0.95), (0.0, 0.3)),  # box: green family
        3: ((0.1, 0.4), (0.0, 0.3), (0.65, 1.0)),  # wedge: blue family
    }
    n_shapes = int(rng.integers(2, 5))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, 4))
        half = int(rng.integers(6, max(7, size // 5)))
        cy = int(rng.integers(half, size - half))
        cx = int(rng.integers(half, size - half))
        if cls == 1:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= half * half
        elif cls == 2:
            mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        else:
            mask = (np.abs(xx - cx) + np.maximum(yy - cy, 0) * 2 <= half) & (yy >= cy - half)
        color = np.array([rng.uniform(*palettes[cls][c]) for c in range(3)])
        jitter = 0.015 * rng.standard_normal((size, size))
        for c in range(3):
            img[c][mask] = np.clip(color[c] + jitter[mask], 0.0, 1.0)
        label[mask] = cls
    return np.clip(img, 0.0, 1.0), label


def _face_image(rng: np.random.Generator, size: int, proto: dict) -> np.ndarray:
    """Render one jittered variant of a face prototype."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((3, size, size))
    for c in range(3):
        img[c] = proto["bg"][c] + 0.02 * rng.standard_normal((size, size))
    dy, dx = rng.uniform(-2.0, 2.0, size=2)
    cy, cx = size / 2 + dy, size / 2 + dx
    ry, rx = proto["face_ry"] * size, proto["face_rx"] * size
    face = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    bright = rng.uniform(0.92, 1.08)
    for c in range(3):
        img[c][face] = np.clip(proto["skin"][c] * bright, 0.0, 1.0)
    ey = cy - proto["eye_dy"] * size
    for sign in (-1.0, 1.0):
        ex = cx + sign * proto["eye_dx"] * size
        er = proto["eye_r"] * size
        eye = (yy - ey) ** 2 + (xx - ex) ** 2 <= er * er
        for c in range(3):
            img[c][eye] = proto["eye"][c]
    my = cy + proto["mouth_dy"] * size
    mouth = (np.abs(yy - my) <= proto["mouth_h"] * size) & (
        np.abs(xx - cx) <= proto["mouth_w"] * size
    )
    for c in range(3):
        img[c][mouth] = proto["mouth"][c]
    return np.clip(img, 0.0, 1.0)


def _face_prototype(rng: np.random.Generator) -> dict:
    return {
        "bg": rng.uniform(0.1, 0.9, size=3),
        "skin": np.array(
            [rng.uniform(0.55, 0.95), rng.uniform(0.4, 0.8), rng.uniform(0.3, 0.7)]
        ),
        "face_ry": rng.uniform(0.28, 0.4),
        "face_rx": rng.uniform(0.2, 0.32),
        "eye_dy": rng.uniform(0.08, 0.14),
        "eye_dx": rng.uniform(0.08, 0.14),
        "eye_r": rng.uniform(0.02, 0.05),
        "eye": rng.uniform(0.0, 0.25, size=3),
        "mouth_dy": rng.uniform(0.1, 0.18),
        "mouth_h": rng.uniform(0.015, 0.035),
        "mouth_w": rng.uniform(0.08, 0.16),
        "mouth": rng.uniform(0.0, 0.5, size=3),
    }


def synth_corpus(kind: str, n: int, size: int = 64, seed: int = 0,
                 identities: int = 16) -> Corpus:
    """Generate a reproducible synthetic corpus of the given kind."""
    streams = np.random.SeedSequence(seed).spawn(n + 1)
    meta_rng = np.random.default_rng(streams[0])
    if kind == "natural-noise":
        imgs = [
            _spectral_noise_image(np.random.default_rng(streams[i + 1]), size)
            for i in range(n)
        ]
        return Corpus(
            kind=kind,
            images=torch.from_numpy(np.stack(imgs)).float(),
            names=tuple(f"noise-{seed}-{i:05d}" for i in range(n)),
        )
    if kind == "shapes":
        imgs, labs = [], []
        for i in range(n):
            img, lab = _scene_image(np.random.default_rng(streams[i + 1]), size)
            imgs.append(img)
            labs.append(lab)
        return Corpus(
            kind=kind,
            images=torch.from_numpy(np.stack(imgs)).float(),
            labels=torch.from_numpy(np.stack(labs)),
            names=tuple(f"scene-{seed}-{i:05d}" for i in range(n)),
        )
    if kind == "faces-toy":
        protos = [_face_prototype(meta_rng) for _ in range(identities)]
        imgs, idents = [], []
        for i in range(n):
            ident = i % identities
            imgs.append(_face_image(np.random.default_rng(streams[i + 1]), size, protos[ident]))
            idents.append(ident)
        return Corpus(
            kind=kind,
            images=torch.from_numpy(np.stack(imgs)).float(),
            identities=torch.tensor(idents, dtype=torch.int64),
            names=tuple(f"face-{seed}-{i:05d}" for i in range(n)),
        )
    raise ConfigError(f"unknown corpus kind {kind!r}")


# -- on-disk ingestion ---------------------------------------------------------


def split_of(name: str, fractions: dict[str, float]) -> str:
    """Deterministic split assignment by filename hash."""
    total = sum(fractions.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {total}")
    digest = hashlib.sha256(name.encode("utf-8")).hexdigest()
    u = int(digest[:12], 16) / float(1 << 48)
    acc = 0.0
    for split_name, frac in fractions.items():
        acc += frac
        if u < acc:
            return split_name
    return split_name  # float slack lands in the last split


def load_dataset(path: str | Path, split: str | None = None,
                 fractions: dict[str, float] | None = None) -> Corpus:
    """Load PNG images (plus ``*.label.png`` maps and ``identities.txt`` if
    present) from a directory, optionally keeping one hash-assigned split."""
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    files = sorted(p for p in root.glob("*.png") if not p.name.endswith(".label.png"))
    if split is not None:
        fractions = fractions or {"train": 0.9, "val": 0.1}
        files = [p for p in files if split_of(p.name, fractions) == split]
    ident_map: dict[str, int] = {}
    ident_file = root / "identities.txt"
    if ident_file.exists():
        for line in ident_file.read_text().splitlines():
            stem, ident = line.split()
            ident_map[stem] = int(ident)
    images, labels, idents, names = [], [], [], []
    for p in files:
        try:
            arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        except Exception as exc:  # unreadable file: skip with warning
            warnings.warn(f"skipping unreadable image {p}: {exc}")
            continue
        images.append(torch.from_numpy(arr).permute(2, 0, 1))
        names.append(p.stem)
        label_path = p.with_name(p.stem + ".label.png")
        if label_path.exists():
            lab = np.asarray(Image.open(label_path), dtype=np.int64)
            labels.append(torch.from_numpy(lab))
        if p.stem in ident_map:
            idents.append(ident_map[p.stem])
    if not images:
        raise DataError(f"no readable images in {root}" + (f" (split {split})" if split else ""))
    return Corpus(
        kind="folder",
        images=torch.stack(images),
        labels=torch.stack(labels) if len(labels) == len(images) else None,
        identities=torch.tensor(idents) if len(idents) == len(images) else None,
        names=tuple(names),
    )


def crop_batches(images: Tensor, patch_size: int, batch_size: int,
                 generator: torch.Generator):
    """Endless iterator of seeded random-crop batches."""
    n, _, h, w = images.shape
    if h < patch_size or w < patch_size:
        raise DataError(f"images {h}x{w} smaller than patch size {patch_size}")
    while True:
        idx = torch.randint(0, n, (batch_size,), generator=generator)
        top = torch.randint(0, h - patch_size + 1, (batch_size,), generator=generator)
        left = torch.randint(0, w - patch_size + 1, (batch_size,), generator=generator)
        batch = torch.stack([
            images[i, :, t : t + patch_size, l : l + patch_size]
            for i, t, l in zip(idx.tolist(), top.tolist(), left.tolist())
        ])
        yield batch
