"""The four loss families of the translation objective and their weighted sum.

Adversarial terms use the least-squares form (generator pushes fake patch
scores toward 1; discriminator pushes real toward 1 and fake toward 0).
Cycle and embedding terms are mean L1. The coronary structural term is mean
pixelwise cross-entropy of the structure-head logits against layer labels
downsampled to embedding resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0  # cycle
    beta: float = 5.0  # embedding
    gamma: float = 5.0  # coronary

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    adv_g_OH: float
    adv_g_HO: float
    adv_d_H: float
    adv_d_O: float
    cycle: float
    embedding: float
    coronary: float
    total_g: float

    FIELDS = ("adv_g_OH", "adv_g_HO", "adv_d_H", "adv_d_O", "cycle", "embedding", "coronary", "total_g")

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.FIELDS}


def adversarial_loss_g(d_scores_on_fake) -> Tensor:
    """mean (score - 1)^2 over every patch score."""
    s = ad.as_tensor(d_scores_on_fake)
    return ad.mean_all(ad.square(s - 1.0))


def adversarial_loss_d(d_scores_on_real, d_scores_on_fake) -> Tensor:
    """0.5 mean (real - 1)^2 + 0.5 mean fake^2."""
    r = ad.as_tensor(d_scores_on_real)
    f = ad.as_tensor(d_scores_on_fake)
    return 0.5 * ad.mean_all(ad.square(r - 1.0)) + 0.5 * ad.mean_all(ad.square(f))


def cycle_loss(o, rec_o, h, rec_h) -> Tensor:
    """mean |rec_o - o| + mean |rec_h - h|."""
    o, rec_o, h, rec_h = map(ad.as_tensor, (o, rec_o, h, rec_h))
    _require_same_shape(o, rec_o, "cycle reconstruction (OCT)")
    _require_same_shape(h, rec_h, "cycle reconstruction (histology)")
    return ad.mean_all(ad.absolute(rec_o - o)) + ad.mean_all(ad.absolute(rec_h - h))


def embedding_loss(emb_from_fake_h, emb_used_for_h, emb_from_fake_o, emb_used_for_o) -> Tensor:
    """L1 between the reverse generator's encoding of each fake image and the
    embedding the forward generator decoded it from, summed over directions."""
    a, b = ad.as_tensor(emb_from_fake_h), ad.as_tensor(emb_used_for_h)
    c, d = ad.as_tensor(emb_from_fake_o), ad.as_tensor(emb_used_for_o)
    _require_same_shape(a, b, "embedding (OCT->H direction)")
    _require_same_shape(c, d, "embedding (H->OCT direction)")
    return ad.mean_all(ad.absolute(a - b)) + ad.mean_all(ad.absolute(c - d))


def cross_entropy_2d(logits, labels) -> Tensor:
    """Mean over pixels of -log softmax(logits)[true class]; one domain term."""
    return ad.cross_entropy_mean(logits, labels)


def coronary_loss(logits_o, labels_o, logits_h, labels_h) -> Tensor:
    """Cross-entropy supervision of both structure heads, matched by domain."""
    return cross_entropy_2d(logits_o, labels_o) + cross_entropy_2d(logits_h, labels_h)


def downsample_labels(mask: np.ndarray, factor: int, mode: str = "nearest") -> np.ndarray:
    """Reduce an integer mask to logits resolution.

    nearest: sample the center pixel of each factor x factor block.
    majority: most frequent class per block (ties go to the smaller id).
    """
    mask = np.asarray(mask)
    h, w = mask.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"mask dims {(h, w)} not divisible by downsampling factor {factor}")
    if mode == "nearest":
        off = factor // 2
        return mask[..., off::factor, off::factor]
    if mode == "majority":
        blocks = mask.reshape(*mask.shape[:-2], h // factor, factor, w // factor, factor)
        blocks = np.moveaxis(blocks, -3, -2).reshape(*mask.shape[:-2], h // factor, w // factor, factor * factor)
        n_classes = int(blocks.max()) + 1
        counts = np.stack([(blocks == c).sum(axis=-1) for c in range(n_classes)], axis=-1)
        return counts.argmax(axis=-1).astype(mask.dtype)
    raise ValueError(f"unknown downsampling mode: {mode!r}")


def total_generator_loss(
    adv_g_oh: Tensor,
    adv_g_ho: Tensor,
    cycle: Tensor,
    embedding: Tensor,
    coronary: Tensor,
    weights: LossWeights,
) -> Tensor:
    return (
        adv_g_oh
        + adv_g_ho
        + weights.alpha * cycle
        + weights.beta * embedding
        + weights.gamma * coronary
    )


def make_breakdown(
    adv_g_oh: float,
    adv_g_ho: float,
    adv_d_h: float,
    adv_d_o: float,
    cycle: float,
    embedding: float,
    coronary: float,
    weights: LossWeights,
) -> LossBreakdown:
    """Assemble the per-step record; total_g is the exact weighted sum."""
    parts = (adv_g_oh, adv_g_ho, adv_d_h, adv_d_o, cycle, embedding, coronary)
    total = adv_g_oh + adv_g_ho + weights.alpha * cycle + weights.beta * embedding + weights.gamma * coronary
    return LossBreakdown(*(float(p) for p in parts), total_g=float(total))


def _require_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
