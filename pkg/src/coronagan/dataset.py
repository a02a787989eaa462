"""Patch extraction, flip augmentation, and unpaired batch assembly.

Images are tiled into non-overlapping patches anchored at the top-left
corner (trailing partial tiles dropped), flips mirror image and mask
together, and the loader draws the two domains independently so a batch
carries no pairing semantics. Every epoch's sequence is a pure function of
(shuffle_seed, epoch): both domains are read through per-epoch reseeded
permutation streams that restart with a fresh shuffle when exhausted, so
the smaller domain cycles and is fully covered every epoch.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import imgio
from .phantom import Domain, read_manifest


@dataclass
class Patch:
    image: np.ndarray
    mask: np.ndarray
    domain: Domain
    source_id: str
    origin: tuple[int, int]

    def __post_init__(self):
        self.domain = Domain(self.domain)
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"patch image dims {self.image.shape[1:]} != mask dims {self.mask.shape}")


@dataclass
class UnpairedBatch:
    oct_images: np.ndarray  # (B, 1, s, s)
    hist_images: np.ndarray  # (B, 3, s, s)
    oct_masks: np.ndarray  # (B, s, s)
    hist_masks: np.ndarray  # (B, s, s)

    def __post_init__(self):
        if self.oct_images.shape[0] != self.hist_images.shape[0]:
            raise ValueError("the two domain halves of a batch must have identical size")

    @property
    def size(self) -> int:
        return self.oct_images.shape[0]


@dataclass(frozen=True)
class LoaderConfig:
    patch_size: int = 288
    batch_size: int = 16
    flip_prob: float = 0.5
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1 or self.batch_size < 1:
            raise ValueError("patch_size and batch_size must be positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")


def extract_patches(image: np.ndarray, mask: np.ndarray, patch_size: int, domain, source_id: str = "") -> list[Patch]:
    """Non-overlapping top-left tiling; trailing partial tiles are discarded."""
    h, w = image.shape[1:]
    if h < patch_size or w < patch_size:
        raise ValueError(f"sample {source_id or '<array>'} is {h}x{w}, smaller than patch size {patch_size}")
    patches = []
    for r in range(0, h - patch_size + 1, patch_size):
        for c in range(0, w - patch_size + 1, patch_size):
            patches.append(
                Patch(
                    image=image[:, r : r + patch_size, c : c + patch_size].copy(),
                    mask=mask[r : r + patch_size, c : c + patch_size].copy(),
                    domain=domain,
                    source_id=source_id,
                    origin=(r, c),
                )
            )
    return patches


def flip_horizontal(patch: Patch) -> Patch:
    return Patch(
        image=patch.image[:, :, ::-1].copy(),
        mask=patch.mask[:, ::-1].copy(),
        domain=patch.domain,
        source_id=patch.source_id,
        origin=patch.origin,
    )


def augment_flip(patch: Patch, rng: np.random.Generator, flip_prob: float = 0.5) -> Patch:
    """Mirror image AND mask left-right with probability flip_prob."""
    if rng.random() < flip_prob:
        return flip_horizontal(patch)
    return patch


class UnpairedLoader:
    """Seeded, shuffled, augmented unpaired batches from a phantom manifest."""

    def __init__(self, manifest_path: str, config: LoaderConfig):
        self.config = config
        self.manifest_path = manifest_path
        base = os.path.dirname(os.path.abspath(manifest_path))
        records = read_manifest(manifest_path)
        self.oct_patches: list[Patch] = []
        self.hist_patches: list[Patch] = []
        for record in records:
            img_path = os.path.join(base, record["path"])
            mask_path = os.path.join(base, record["mask_path"])
            for p in (img_path, mask_path):
                if not os.path.exists(p):
                    raise FileNotFoundError(f"manifest references missing file: {p}")
            try:
                image = imgio.load_image(img_path)
                mask = imgio.load_mask(mask_path)
            except (OSError, ValueError) as e:
                raise ValueError(f"failed to read sample {img_path}: {e}") from e
            domain = Domain(record["domain"])
            patches = extract_patches(image, mask, config.patch_size, domain, source_id=record["path"])
            if domain is Domain.OCT:
                self.oct_patches.extend(patches)
            else:
                self.hist_patches.extend(patches)
        if not self.oct_patches or not self.hist_patches:
            raise ValueError(f"{manifest_path}: need at least one patch per domain")

    @property
    def steps_per_epoch(self) -> int:
        n = max(len(self.oct_patches), len(self.hist_patches))
        return -(-n // self.config.batch_size)

    def epoch_batches(self, epoch: int) -> Iterator[UnpairedBatch]:
        cfg = self.config
        rng_o = np.random.default_rng([cfg.shuffle_seed, epoch, 0])
        rng_h = np.random.default_rng([cfg.shuffle_seed, epoch, 1])
        rng_flip = np.random.default_rng([cfg.shuffle_seed, epoch, 2])
        stream_o = _permutation_stream(rng_o, len(self.oct_patches))
        stream_h = _permutation_stream(rng_h, len(self.hist_patches))
        for _ in range(self.steps_per_epoch):
            oct_sel = [augment_flip(self.oct_patches[next(stream_o)], rng_flip, cfg.flip_prob) for _ in range(cfg.batch_size)]
            hist_sel = [augment_flip(self.hist_patches[next(stream_h)], rng_flip, cfg.flip_prob) for _ in range(cfg.batch_size)]
            yield UnpairedBatch(
                oct_images=np.stack([p.image for p in oct_sel]),
                hist_images=np.stack([p.image for p in hist_sel]),
                oct_masks=np.stack([p.mask for p in oct_sel]),
                hist_masks=np.stack([p.mask for p in hist_sel]),
            )

    def __iter__(self) -> Iterator[UnpairedBatch]:
        return self.epoch_batches(0)


def make_loader(manifest_path: str, config: LoaderConfig) -> UnpairedLoader:
    return UnpairedLoader(manifest_path, config)


def _permutation_stream(rng: np.random.Generator, n: int) -> Iterator[int]:
    while True:
        for idx in rng.permutation(n):
            yield int(idx)
