"""View construction: resize-only anchor, two random-resized crops, shared
stochastic augmentation stack.

Every stochastic op draws from an explicit numpy Generator, and every op
consumes its draws whether or not it is enabled, so ablating one op never
shifts the randomness seen by the others.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from .data import ImageSample

ALL_OPS = frozenset({"flip", "color_jitter", "grayscale", "blur", "normalize"})

# MoCo-v2 recipe constants
DEFAULT_CROP_SCALE = (0.2, 1.0)
DEFAULT_JITTER = (0.4, 0.4, 0.4, 0.1)
DEFAULT_NORMALIZE_MEAN = (0.485, 0.456, 0.406)
DEFAULT_NORMALIZE_STD = (0.229, 0.224, 0.225)

_ASPECT_RATIO_RANGE = (3.0 / 4.0, 4.0 / 3.0)
_CROP_ATTEMPTS = 10


class PolicyError(ValueError):
    """Augmentation policy fails validation (bad range or unknown op name)."""


@dataclass(frozen=True)
class CropBox:
    top: int
    left: int
    height: int
    width: int


@dataclass(frozen=True)
class AugmentationPolicy:
    """Stochastic view-augmentation recipe; MoCo-v2 defaults."""

    crop_scale_range: tuple[float, float] = DEFAULT_CROP_SCALE
    output_size: int = 224
    flip_prob: float = 0.5
    jitter_strength: tuple[float, float, float, float] = DEFAULT_JITTER
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    normalize_mean: tuple[float, float, float] = DEFAULT_NORMALIZE_MEAN
    normalize_std: tuple[float, float, float] = DEFAULT_NORMALIZE_STD
    enabled_ops: frozenset[str] = field(default_factory=lambda: ALL_OPS)

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise PolicyError(f"crop_scale_range must satisfy 0 < min <= max <= 1, got ({lo}, {hi})")
        if self.output_size <= 0:
            raise PolicyError(f"output_size must be positive, got {self.output_size}")
        for name, p in (("flip_prob", self.flip_prob), ("jitter_prob", self.jitter_prob),
                        ("grayscale_prob", self.grayscale_prob), ("blur_prob", self.blur_prob)):
            if not 0.0 <= p <= 1.0:
                raise PolicyError(f"{name} must be in [0, 1], got {p}")
        if self.blur_sigma[0] <= 0 or self.blur_sigma[0] > self.blur_sigma[1]:
            raise PolicyError(f"blur_sigma must satisfy 0 < lo <= hi, got {self.blur_sigma}")
        unknown = set(self.enabled_ops) - ALL_OPS
        if unknown:
            raise PolicyError(f"unknown ops in enabled_ops: {sorted(unknown)} "
                              f"(valid: {sorted(ALL_OPS)})")

    @classmethod
    def preset(cls, name: str, **overrides) -> "AugmentationPolicy":
        """Named ablation presets over the stochastic stack."""
        presets = {
            "baseline": ALL_OPS,
            "crop_only": frozenset({"normalize"}),
            "no_grayscale": ALL_OPS - {"grayscale"},
            "no_color": ALL_OPS - {"color_jitter"},
        }
        if name not in presets:
            raise PolicyError(f"unknown preset {name!r} (valid: {sorted(presets)})")
        return cls(enabled_ops=presets[name], **overrides)

    def with_ops(self, ops) -> "AugmentationPolicy":
        return replace(self, enabled_ops=frozenset(ops))


@dataclass(frozen=True)
class ViewTriplet:
    """Anchor (whole image, resized) plus two random-crop views."""

    anchor: torch.Tensor
    view1: torch.Tensor
    view2: torch.Tensor
    anchor_box: CropBox
    view1_box: CropBox
    view2_box: CropBox
    source_id: str


def _to_tensor(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1).float().div_(255.0)


def resize_only(img: ImageSample, policy: AugmentationPolicy) -> tuple[torch.Tensor, CropBox]:
    """Whole-image anisotropic resize to a square; records the full-extent box."""
    h, w = img.pixels.shape[:2]
    out = TF.resize(_to_tensor(img.pixels), [policy.output_size, policy.output_size],
                    interpolation=InterpolationMode.BILINEAR, antialias=True)
    return out, CropBox(0, 0, h, w)


def _sample_crop_box(h: int, w: int, scale: tuple[float, float],
                     rng: np.random.Generator) -> CropBox:
    area = h * w
    log_lo, log_hi = math.log(_ASPECT_RATIO_RANGE[0]), math.log(_ASPECT_RATIO_RANGE[1])
    for _ in range(_CROP_ATTEMPTS):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return CropBox(top, left, ch, cw)
    # fallback: largest centered square whose area fraction stays within range
    side = min(h, w, int(math.floor(math.sqrt(scale[1] * area))))
    side = max(side, 1)
    return CropBox((h - side) // 2, (w - side) // 2, side, side)


def random_resized_crop(img: ImageSample, policy: AugmentationPolicy,
                        rng: np.random.Generator) -> tuple[torch.Tensor, CropBox]:
    h, w = img.pixels.shape[:2]
    box = _sample_crop_box(h, w, policy.crop_scale_range, rng)
    out = TF.resized_crop(_to_tensor(img.pixels), box.top, box.left, box.height, box.width,
                          [policy.output_size, policy.output_size],
                          interpolation=InterpolationMode.BILINEAR, antialias=True)
    return out, box


def _blur_kernel_size(output_size: int) -> int:
    k = max(3, int(0.1 * output_size))
    return k if k % 2 == 1 else k + 1


def augment(img: torch.Tensor, policy: AugmentationPolicy,
            rng: np.random.Generator) -> torch.Tensor:
    """Apply the stochastic stack in fixed order; normalization always last.

    Draw schedule is unconditional: flip 1, jitter 6 (coin, 4 factors, order),
    grayscale 1, blur 2.
    """
    flip_coin = rng.uniform()
    jitter_coin = rng.uniform()
    b, c, s, hu = policy.jitter_strength
    factors = {
        "brightness": rng.uniform(max(0.0, 1.0 - b), 1.0 + b),
        "contrast": rng.uniform(max(0.0, 1.0 - c), 1.0 + c),
        "saturation": rng.uniform(max(0.0, 1.0 - s), 1.0 + s),
        "hue": rng.uniform(-hu, hu),
    }
    jitter_order = rng.permutation(4)
    gray_coin = rng.uniform()
    blur_coin = rng.uniform()
    sigma = rng.uniform(policy.blur_sigma[0], policy.blur_sigma[1])

    out = img
    if "flip" in policy.enabled_ops and flip_coin < policy.flip_prob:
        out = TF.hflip(out)
    if "color_jitter" in policy.enabled_ops and jitter_coin < policy.jitter_prob:
        names = ("brightness", "contrast", "saturation", "hue")
        for idx in jitter_order:
            name = names[idx]
            if name == "brightness":
                out = TF.adjust_brightness(out, factors["brightness"])
            elif name == "contrast":
                out = TF.adjust_contrast(out, factors["contrast"])
            elif name == "saturation":
                out = TF.adjust_saturation(out, factors["saturation"])
            else:
                out = TF.adjust_hue(out, factors["hue"])
    if "grayscale" in policy.enabled_ops and gray_coin < policy.grayscale_prob:
        out = TF.rgb_to_grayscale(out, num_output_channels=3)
    if "blur" in policy.enabled_ops and blur_coin < policy.blur_prob:
        k = _blur_kernel_size(policy.output_size)
        out = TF.gaussian_blur(out, [k, k], [float(sigma), float(sigma)])
    if "normalize" in policy.enabled_ops:
        out = TF.normalize(out, list(policy.normalize_mean), list(policy.normalize_std))
    return out


def make_views(sample: ImageSample, policy: AugmentationPolicy,
               rng: np.random.Generator) -> ViewTriplet:
    """One training triplet: augmented whole-image anchor + two augmented crops.

    Spawns five child streams (anchor aug, crop1, aug1, crop2, aug2) so the
    three augmentation draws are mutually independent.
    """
    s_anchor, s_crop1, s_aug1, s_crop2, s_aug2 = rng.spawn(5)
    anchor_img, anchor_box = resize_only(sample, policy)
    anchor = augment(anchor_img, policy, s_anchor)
    crop1, box1 = random_resized_crop(sample, policy, s_crop1)
    view1 = augment(crop1, policy, s_aug1)
    crop2, box2 = random_resized_crop(sample, policy, s_crop2)
    view2 = augment(crop2, policy, s_aug2)
    return ViewTriplet(anchor, view1, view2, anchor_box, box1, box2, sample.sample_id)


def sample_stream(seed: int, epoch: int, sample_id: str) -> np.random.Generator:
    """Per-(run, epoch, sample) stream: stateless, so resume needs no RNG blobs."""
    digest = hashlib.blake2s(sample_id.encode(), digest_size=8).digest()
    sample_int = int.from_bytes(digest, "little")
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, sample_int]))
