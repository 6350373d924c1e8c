"""Procedural aggregate scenes for desk-scale verification.

Renders top-down views of crushed-stone surfaces whose particle sizes
follow a grading curve. Mass fractions are converted to projected-area
shares with the spherical model: particle count scales with mass / d^3
and projected area with d^2, so each sieve bin's share of rendered area
is proportional to fraction / d. Particles are randomly rotated convex
polygons (5 to 9 vertices) placed big-first by dart throwing with a
bounded overlap budget, on a darker jittered background with speckle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .data import (CLASS_FILE_NAME, SIEVE_BINS_MM, ClassSpec, LabeledSample,
                   write_image)
from .errors import ContractError
from .geometry import RectifiedImage
from .model import GradingCurveLabel

MIN_RENDER_DIAMETER_MM = 0.3

_MAX_FILL = 0.9
_MAX_ATTEMPTS = 40
_MAX_PARTICLES = 20000
_OVERLAP_BUDGET = 0.25
_RASTER_SHIFT = 4  # cv2 fixed-point subpixel bits


@dataclass(frozen=True)
class SceneStats:
    """Ground truth of one rendered scene, for generator verification."""

    diameters_mm: tuple          # every placed particle
    particle_bins: tuple         # sieve-bin index per placed particle
    bin_area_px: tuple           # newly covered pixels per sieve bin
    fill_achieved: float


def _bin_midpoints():
    return tuple(
        (max(lo, MIN_RENDER_DIAMETER_MM) + hi) / 2.0 for lo, hi in SIEVE_BINS_MM)


def _polygon(rng, radius_px):
    """Convex blob: sorted angles, jittered radii, random rotation."""
    k = int(rng.integers(5, 10))
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=k))
    radii = radius_px * rng.uniform(0.7, 1.0, size=k)
    rot = rng.uniform(0.0, 2.0 * np.pi)
    return np.column_stack([
        radii * np.cos(angles + rot),
        radii * np.sin(angles + rot),
    ])


def _raster_mask(verts, patch_shape):
    mask = np.zeros(patch_shape, dtype=np.uint8)
    pts = np.round(verts * (1 << _RASTER_SHIFT)).astype(np.int32)
    cv2.fillPoly(mask, [pts], 1, lineType=cv2.LINE_8, shift=_RASTER_SHIFT)
    return mask.astype(bool)


def generate_scene(spec: ClassSpec, gsd, extent_mm, rng, fill=0.6):
    """Render one (h, w, 3) scene in [0, 1] plus its SceneStats.

    `extent_mm` is the square field size; the image spans
    round(extent_mm * gsd) pixels per side. `fill` is the requested
    particle area fraction; packings beyond 0.9 are refused as
    infeasible for dart throwing.
    """
    if gsd <= 0 or extent_mm <= 0:
        raise ContractError(f"gsd and extent must be positive, got {gsd}, {extent_mm}")
    if not 0.0 < fill <= _MAX_FILL:
        raise ContractError(
            f"requested fill {fill} outside (0, {_MAX_FILL}] is not packable")
    size = max(16, round(extent_mm * gsd))
    area_total = fill * size * size

    mids = _bin_midpoints()
    weights = np.array([f / d for f, d in zip(spec.fractions, mids)])
    if weights.sum() <= 0:
        raise ContractError(f"class {spec.name!r} has no renderable mass")
    shares = weights / weights.sum()

    # Draw candidate diameters per bin until the bin's area budget is met.
    candidates = []
    for b, (lo, hi) in enumerate(SIEVE_BINS_MM):
        budget = shares[b] * area_total
        if budget <= 0:
            continue
        lo = max(lo, MIN_RENDER_DIAMETER_MM)
        acc = 0.0
        while acc < budget and len(candidates) < _MAX_PARTICLES:
            d_mm = float(rng.uniform(lo, hi))
            acc += np.pi * (d_mm * gsd / 2.0) ** 2
            candidates.append((d_mm, b))
    candidates.sort(key=lambda t: -t[0])

    occupancy = np.zeros((size, size), dtype=bool)
    albedo = np.empty((size, size, 3))
    albedo[:] = 0.22 + rng.uniform(-0.04, 0.04)
    placed_d, placed_bin = [], []
    bin_area = [0] * len(SIEVE_BINS_MM)

    for d_mm, b in candidates:
        r_px = d_mm * gsd / 2.0
        pad = int(np.ceil(r_px)) + 1
        verts = _polygon(rng, r_px)
        for _ in range(_MAX_ATTEMPTS):
            cy = rng.uniform(0, size)
            cx = rng.uniform(0, size)
            y0, y1 = max(0, int(cy) - pad), min(size, int(cy) + pad + 1)
            x0, x1 = max(0, int(cx) - pad), min(size, int(cx) + pad + 1)
            if y1 <= y0 or x1 <= x0:
                continue
            local = verts + [cx - x0, cy - y0]
            mask = _raster_mask(local, (y1 - y0, x1 - x0))
            if not mask.any():
                iy, ix = min(int(cy), size - 1) - y0, min(int(cx), size - 1) - x0
                if 0 <= iy < mask.shape[0] and 0 <= ix < mask.shape[1]:
                    mask[iy, ix] = True
                else:
                    continue
            patch_occ = occupancy[y0:y1, x0:x1]
            covered = int(mask.sum())
            overlap = int((mask & patch_occ).sum())
            if overlap > _OVERLAP_BUDGET * covered:
                continue
            gray = rng.uniform(0.45, 0.85)
            tint = gray + rng.uniform(-0.04, 0.04, size=3)
            grad_dir = rng.uniform(0.0, 2.0 * np.pi)
            yy, xx = np.nonzero(mask)
            shade = 1.0 + 0.12 * (
                (xx - mask.shape[1] / 2) * np.cos(grad_dir)
                + (yy - mask.shape[0] / 2) * np.sin(grad_dir)
            ) / max(1.0, r_px)
            albedo[y0:y1, x0:x1][mask] = np.clip(tint * shade[:, None], 0.0, 1.0)
            patch_occ |= mask
            placed_d.append(d_mm)
            placed_bin.append(b)
            bin_area[b] += covered - overlap
            break

    speckle = rng.normal(0.0, 0.02, size=(size, size, 1))
    chroma = rng.normal(0.0, 0.008, size=(size, size, 3))
    pixels = np.clip(albedo + speckle + chroma, 0.0, 1.0)
    stats = SceneStats(
        diameters_mm=tuple(placed_d),
        particle_bins=tuple(placed_bin),
        bin_area_px=tuple(bin_area),
        fill_achieved=float(occupancy.mean()),
    )
    return pixels, stats


def synth_sample(spec: ClassSpec, gsd, extent_mm, rng, fill=0.6,
                 sample_set="S1", source_id=None, class_index=1):
    """One labeled synthetic sample; the label carries `spec.name`."""
    if sample_set not in ("S1", "S2"):
        raise ContractError(f"sample_set must be S1 or S2, got {sample_set!r}")
    pixels, _ = generate_scene(spec, gsd, extent_mm, rng, fill=fill)
    h, w = pixels.shape[:2]
    image = RectifiedImage(pixels=pixels, gsd=float(gsd),
                           extent_mm=(w / gsd, h / gsd),
                           valid=np.ones((h, w), dtype=bool))
    return LabeledSample(
        image=image,
        label=GradingCurveLabel(index=class_index, name=spec.name),
        sample_set=sample_set,
        source_id=source_id or f"synth:{spec.name}",
    )


def build_synthetic_dataset(specs, out_root, n_s1, n_s2, gsd, extent_mm,
                            seed, fill=0.6, bits=8):
    """Write a full dataset directory: PNGs, manifest.csv, classes.txt.

    Per class, `n_s1` S1 images and `n_s2` S2 images are rendered from
    independent child seeds, so the same seed always rebuilds the
    identical dataset.
    """
    if n_s1 < 1 or n_s2 < 0:
        raise ContractError(f"need n_s1 >= 1 and n_s2 >= 0, got {n_s1}, {n_s2}")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ContractError("duplicate class names in specs")
    root = Path(out_root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / CLASS_FILE_NAME, "w", encoding="utf-8") as fh:
        fh.write("# name f(0-2) f(2-8) f(8-16) f(16-32)\n")
        for s in specs:
            fh.write(s.name + " " + " ".join(f"{f:.6f}" for f in s.fractions) + "\n")
    seeds = np.random.SeedSequence(seed).spawn(len(specs))
    rows = []
    for spec, child in zip(specs, seeds):
        rng = np.random.Generator(np.random.PCG64(child))
        for sset, count in (("S1", n_s1), ("S2", n_s2)):
            for i in range(count):
                pixels, _ = generate_scene(spec, gsd, extent_mm, rng, fill=fill)
                rel = f"images/{spec.name}_{sset.lower()}_{i:03d}.png"
                write_image(root / rel, pixels, bits=bits)
                rows.append((rel, spec.name, sset, gsd))
    with open(root / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "class", "sample_set", "gsd_px_per_mm"])
        writer.writerows(rows)
    return root / "manifest.csv"
