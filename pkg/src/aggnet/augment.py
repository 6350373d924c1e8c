"""Training-time image augmentation with seeded randomness.

Radiometric transform, hue rotation, and axis flips. All functions take
and return (h, w, 3) float images with values in [0, 1] and never touch
the label. Randomness enters only through an explicit numpy Generator,
so a fixed seed replays the identical augmentation stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import ContractError


@dataclass(frozen=True)
class AugmentParams:
    """One sampled augmentation: contrast alpha, brightness beta, gamma
    exponent, hue offset in degrees, and the two flips."""

    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 1.0
    tau_deg: float = 0.0
    flip_h: bool = False
    flip_v: bool = False

    def __post_init__(self):
        if self.alpha <= 0 or self.gamma <= 0:
            raise ContractError(
                f"alpha and gamma must be positive, got {self.alpha}, {self.gamma}")


@dataclass(frozen=True)
class AugmentRanges:
    """Sampling intervals; every interval must contain the identity value."""

    alpha: tuple = (0.8, 1.25)
    beta: tuple = (-0.1, 0.1)
    gamma: tuple = (0.8, 1.25)
    tau_deg: tuple = (-18.0, 18.0)
    flip_prob: float = 0.5

    def __post_init__(self):
        for name, (lo, hi), ident in (
            ("alpha", self.alpha, 1.0),
            ("beta", self.beta, 0.0),
            ("gamma", self.gamma, 1.0),
            ("tau_deg", self.tau_deg, 0.0),
        ):
            if not (lo <= hi):
                raise ContractError(f"{name} interval is empty: ({lo}, {hi})")
            if not (lo <= ident <= hi):
                raise ContractError(
                    f"{name} interval ({lo}, {hi}) must contain the identity {ident}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ContractError(f"flip_prob must be in [0, 1], got {self.flip_prob}")


def _check_image(image):
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"expected (h, w, 3) image, got shape {img.shape}")
    return img


def radiometric(image, alpha, beta, gamma):
    """Contrast/brightness/gamma: clip01(I * alpha + beta) ** gamma.

    The inner clip keeps the base of the exponent non-negative (beta may
    be negative), so the result is always real and inside [0, 1].
    """
    if alpha <= 0 or gamma <= 0:
        raise ContractError(f"alpha and gamma must be positive, got {alpha}, {gamma}")
    img = _check_image(image)
    return np.clip(np.clip(img * alpha + beta, 0.0, 1.0) ** gamma, 0.0, 1.0)


def hue_shift(image, tau_deg):
    """Rotate hue by tau degrees; value (intensity) channel is untouched."""
    img = _check_image(image)
    hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + tau_deg / 360.0) % 1.0
    return hsv_to_rgb(hsv)


def flips(image, flip_h, flip_v):
    """Reverse columns (flip_h) and/or rows (flip_v). Involutive."""
    img = _check_image(image)
    if flip_h:
        img = img[:, ::-1]
    if flip_v:
        img = img[::-1]
    return np.ascontiguousarray(img)


def apply_augmentation(image, params: AugmentParams):
    """Flips, then the radiometric transform, then the hue rotation."""
    out = flips(image, params.flip_h, params.flip_v)
    out = radiometric(out, params.alpha, params.beta, params.gamma)
    if params.tau_deg % 360.0 != 0.0:
        out = hue_shift(out, params.tau_deg)
    return out


def sample_augmentation(ranges: AugmentRanges, rng) -> AugmentParams:
    """Draw parameters uniformly from the ranges; flips are Bernoulli."""
    return AugmentParams(
        alpha=float(rng.uniform(*ranges.alpha)),
        beta=float(rng.uniform(*ranges.beta)),
        gamma=float(rng.uniform(*ranges.gamma)),
        tau_deg=float(rng.uniform(*ranges.tau_deg)),
        flip_h=bool(rng.random() < ranges.flip_prob),
        flip_v=bool(rng.random() < ranges.flip_prob),
    )


class Augmenter:
    """Samples and applies one augmentation per call, counting calls.

    The counter lets training assert that validation and test images are
    never augmented.
    """

    def __init__(self, ranges: AugmentRanges, rng):
        self.ranges = ranges
        self._rng = rng
        self.calls = 0

    def __call__(self, image):
        self.calls += 1
        return apply_augmentation(image, sample_augmentation(self.ranges, self._rng))
