"""Synthetic three-layer coronary phantoms in both imaging domains.

A phantom is two sinusoidal layer boundaries over a column grid, giving an
intima/media/adventitia mask. The OCT rendering applies per-layer
reflectivity, exponential depth attenuation from the top surface, and
multiplicative speckle; the histology rendering maps layers to a stain
palette with seeded color jitter and a smooth texture field. The random
seed drives noise only, never geometry, so re-rendering a spec with a new
seed changes texture while its mask stays fixed.
"""
from __future__ import annotations

import enum
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import imgio

N_CLASSES = 3


class Domain(str, enum.Enum):
    OCT = "oct"
    HISTOLOGY = "histology"


# pink/purple H&E-like tones, inner to outer layer
DEFAULT_PALETTE = (
    (0.82, 0.54, 0.72),
    (0.93, 0.67, 0.78),
    (0.72, 0.48, 0.82),
)
DEFAULT_REFLECTIVITY = (0.92, 0.55, 0.28)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    height: int = 288
    width: int = 288
    boundary1_mean: float = 0.33
    boundary2_mean: float = 0.66
    boundary_wobble_amp: float = 0.04
    boundary_wobble_freq: float = 2.0
    boundary_phase1: float = 0.0
    boundary_phase2: float = 0.0
    oct_attenuation_coeff: float = 0.004
    speckle_strength: float = 0.2
    layer_reflectivity: tuple[float, float, float] = DEFAULT_REFLECTIVITY
    stain_palette: tuple[tuple[float, float, float], ...] = DEFAULT_PALETTE
    stain_jitter: float = 0.02

    def __post_init__(self):
        if self.height < 3 or self.width < 1:
            raise ValueError(f"phantom needs height >= 3 and width >= 1, got {self.height}x{self.width}")
        if not (0.0 < self.boundary1_mean < self.boundary2_mean < 1.0):
            raise ValueError(
                "boundary means must satisfy 0 < boundary1_mean < boundary2_mean < 1, got "
                f"{self.boundary1_mean}, {self.boundary2_mean}"
            )
        if self.boundary_wobble_amp < 0 or self.boundary_wobble_freq < 0:
            raise ValueError("boundary wobble amplitude and frequency must be non-negative")
        if self.oct_attenuation_coeff < 0:
            raise ValueError("oct_attenuation_coeff must be >= 0")
        if self.speckle_strength < 0 or self.stain_jitter < 0:
            raise ValueError("noise strengths must be >= 0")
        if len(self.layer_reflectivity) != N_CLASSES or not all(0 < r <= 1 for r in self.layer_reflectivity):
            raise ValueError("layer_reflectivity must be 3 values in (0, 1]")
        if len(self.stain_palette) != N_CLASSES or not all(
            len(c) == 3 and all(0 <= v <= 1 for v in c) for c in self.stain_palette
        ):
            raise ValueError("stain_palette must be 3 RGB triples in [0, 1]")


def boundary_rows(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-column integer rows of the two layer boundaries.

    row_k(x) = round(height * (mean_k + amp * sin(2*pi*freq*x/width + phase_k))),
    then clamped so every column keeps all three layers non-empty.
    """
    x = np.arange(spec.width)
    angle = 2.0 * np.pi * spec.boundary_wobble_freq * x / spec.width
    r1 = np.round(spec.height * (spec.boundary1_mean + spec.boundary_wobble_amp * np.sin(angle + spec.boundary_phase1)))
    r2 = np.round(spec.height * (spec.boundary2_mean + spec.boundary_wobble_amp * np.sin(angle + spec.boundary_phase2)))
    r1 = np.clip(r1, 1, spec.height - 2).astype(np.int64)
    r2 = np.clip(r2, r1 + 1, spec.height - 1).astype(np.int64)
    return r1, r2


def rasterize_layers(spec: PhantomSpec) -> np.ndarray:
    """(H, W) uint8 mask: 0 above boundary1, 1 between, 2 below."""
    r1, r2 = boundary_rows(spec)
    rows = np.arange(spec.height)[:, None]
    mask = np.full((spec.height, spec.width), 2, dtype=np.uint8)
    mask[rows < r2[None, :]] = 1
    mask[rows < r1[None, :]] = 0
    return mask


def render_oct(spec: PhantomSpec, mask: np.ndarray) -> np.ndarray:
    """(1, H, W) float32 image: reflectivity * exp(-coeff*depth) * speckle."""
    _check_mask(spec, mask)
    refl = np.asarray(spec.layer_reflectivity, dtype=np.float64)[mask]
    depth = np.arange(spec.height, dtype=np.float64)[:, None]
    base = refl * np.exp(-spec.oct_attenuation_coeff * depth)
    if spec.speckle_strength > 0:
        rng = np.random.default_rng([spec.seed, 1])
        g = rng.standard_normal(mask.shape)
        base = base * (1.0 + spec.speckle_strength * g)
    return np.clip(base, 0.0, 1.0).astype(np.float32)[None]


def render_histology(spec: PhantomSpec, mask: np.ndarray) -> np.ndarray:
    """(3, H, W) float32 image: per-layer stain color + jitter + smooth texture."""
    _check_mask(spec, mask)
    palette = np.asarray(spec.stain_palette, dtype=np.float64)
    img = np.transpose(palette[mask], (2, 0, 1)).copy()
    if spec.stain_jitter > 0:
        rng = np.random.default_rng([spec.seed, 2])
        jitter = spec.stain_jitter * rng.standard_normal(img.shape)
        fr, fc = rng.uniform(1.0, 4.0, size=2)
        ph_r, ph_c = rng.uniform(0.0, 2.0 * np.pi, size=2)
        rows = np.arange(spec.height)[:, None] / spec.height
        cols = np.arange(spec.width)[None, :] / spec.width
        texture = spec.stain_jitter * np.sin(2 * np.pi * fr * rows + ph_r) * np.sin(2 * np.pi * fc * cols + ph_c)
        img = img + jitter + texture[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass
class LabeledSample:
    image: np.ndarray
    mask: np.ndarray
    domain: Domain

    def __post_init__(self):
        self.domain = Domain(self.domain)
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise ValueError(
                f"image spatial dims {self.image.shape[1:]} must equal mask dims {self.mask.shape}"
            )
        if self.mask.size and self.mask.max() >= N_CLASSES:
            raise ValueError(f"mask holds class id {self.mask.max()}, legal ids are 0..{N_CLASSES - 1}")


def make_sample(spec: PhantomSpec, domain: Domain) -> LabeledSample:
    mask = rasterize_layers(spec)
    domain = Domain(domain)
    if domain is Domain.OCT:
        image = render_oct(spec, mask)
    else:
        image = render_histology(spec, mask)
    return LabeledSample(image=image, mask=mask, domain=domain)


@dataclass(frozen=True)
class PhantomDistribution:
    """Uniform parameter ranges generate_dataset samples specs from."""

    height: int = 288
    width: int = 288
    boundary1_range: tuple[float, float] = (0.24, 0.40)
    boundary2_range: tuple[float, float] = (0.58, 0.76)
    wobble_amp_range: tuple[float, float] = (0.01, 0.06)
    wobble_freq_range: tuple[float, float] = (0.5, 3.0)
    attenuation_range: tuple[float, float] = (0.002, 0.006)
    speckle_range: tuple[float, float] = (0.1, 0.3)
    reflectivity_jitter: float = 0.05
    palette_jitter: float = 0.05
    stain_jitter: float = 0.02

    def sample(self, spec_seed: int) -> PhantomSpec:
        rng = np.random.default_rng(spec_seed)
        refl = np.clip(
            np.asarray(DEFAULT_REFLECTIVITY) + rng.uniform(-1, 1, 3) * self.reflectivity_jitter, 0.05, 1.0
        )
        palette = np.clip(
            np.asarray(DEFAULT_PALETTE) + rng.uniform(-1, 1, (3, 3)) * self.palette_jitter, 0.0, 1.0
        )
        return PhantomSpec(
            seed=spec_seed,
            height=self.height,
            width=self.width,
            boundary1_mean=rng.uniform(*self.boundary1_range),
            boundary2_mean=rng.uniform(*self.boundary2_range),
            boundary_wobble_amp=rng.uniform(*self.wobble_amp_range),
            boundary_wobble_freq=rng.uniform(*self.wobble_freq_range),
            boundary_phase1=rng.uniform(0, 2 * np.pi),
            boundary_phase2=rng.uniform(0, 2 * np.pi),
            oct_attenuation_coeff=rng.uniform(*self.attenuation_range),
            speckle_strength=rng.uniform(*self.speckle_range),
            layer_reflectivity=tuple(float(v) for v in refl),
            stain_palette=tuple(tuple(float(v) for v in row) for row in palette),
            stain_jitter=self.stain_jitter,
        )


def spec_seed_for(master_seed: int, domain: Domain, index: int) -> int:
    """Distinct per-sample seeds; OCT seeds are even, histology odd, so the
    two domains can never share one (unpaired by construction)."""
    return master_seed * 1_000_003 + 2 * index + (0 if Domain(domain) is Domain.OCT else 1)


def generate_dataset(
    n_oct: int,
    n_hist: int,
    distribution: PhantomDistribution,
    out_dir: str,
    seed: int = 0,
    workers: int = 1,
) -> str:
    """Write unpaired labeled samples plus a JSONL manifest; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(Domain.OCT, i) for i in range(n_oct)] + [(Domain.HISTOLOGY, i) for i in range(n_hist)]

    def build(job):
        domain, index = job
        spec_seed = spec_seed_for(seed, domain, index)
        spec = distribution.sample(spec_seed)
        sample = make_sample(spec, domain)
        stem = f"{domain.value}_{index:05d}"
        img_name, mask_name = f"{stem}.png", f"{stem}_mask.png"
        imgio.save_image(os.path.join(out_dir, img_name), sample.image)
        imgio.save_mask(os.path.join(out_dir, mask_name), sample.mask)
        return {
            "path": img_name,
            "mask_path": mask_name,
            "domain": domain.value,
            "seed": spec_seed,
            "spec": asdict(spec),
        }

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(build, jobs))
    else:
        records = [build(job) for job in jobs]

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(records, manifest_path)
    return manifest_path


def write_manifest(records: list[dict], path: str) -> None:
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_manifest(path: str) -> list[dict]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed manifest line: {e}") from e
    return records


def _check_mask(spec: PhantomSpec, mask: np.ndarray) -> None:
    if mask.shape != (spec.height, spec.width):
        raise ValueError(f"mask shape {mask.shape} does not match spec {spec.height}x{spec.width}")
