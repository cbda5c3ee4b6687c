"""Masking/mixing augmentation kernels and the view pipeline.

Four kernels on top of a minimal crop+flip base pipeline: random erasing
(noise-filled rectangle), cutout (zero- or mean-filled square), cutmix
(patch pasted from a donor image), and mixup (convex combination with a
donor). `make_views` manufactures the V augmented views of one anchor that
the contrastive losses and the view-quality metrics consume.

Every kernel reports the rectangle it touched, so callers can verify the
mask partition: pixels outside the reported rect are bit-identical to the
input. Mixing coefficients are folded to [0.5, 1] so the anchor always
dominates a mixed view and keeps its label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .core import ImageTensor, RngStream, rng_fork


class Rect(NamedTuple):
    """Axis-aligned rectangle: rows [top, top+height), cols [left, left+width)."""

    top: int
    left: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width


ZERO_RECT = Rect(0, 0, 0, 0)


class AugmentKind(str, Enum):
    NONE = "none"
    RANDOM_ERASING = "erasing"
    CUTOUT = "cutout"
    CUTMIX = "cutmix"
    MIXUP = "mixup"


class CutoutFill(str, Enum):
    ZERO = "zero"
    MEAN = "mean"


@dataclass(frozen=True)
class AugmentSpec:
    """Parameters for one augmentation policy.

    crop_scale and flip_prob drive the base crop+flip pipeline; setting them
    to (1.0, 1.0) and 0.0 makes the base view an exact identity, which is how
    calibration runs and tests produce views equal to their anchors.
    """

    kind: AugmentKind = AugmentKind.NONE
    erase_prob: float = 0.5
    area_range: tuple[float, float] = (0.02, 0.33)
    aspect_range: tuple[float, float] = (0.3, 3.33)
    cutout_size: float = 0.5
    cutout_fill: CutoutFill = CutoutFill.ZERO
    mixup_alpha: float = 1.0
    crop_scale: tuple[float, float] = (0.5, 1.0)
    flip_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.erase_prob <= 1.0:
            raise ValueError(f"erase_prob must be in [0, 1], got {self.erase_prob}")
        lo, hi = self.area_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"area_range must satisfy 0 < low <= high < 1, got {self.area_range}")
        if self.aspect_range[0] <= 0.0 or self.aspect_range[0] > self.aspect_range[1]:
            raise ValueError(f"bad aspect_range {self.aspect_range}")
        if not 0.0 <= self.cutout_size <= 1.0:
            raise ValueError(f"cutout_size must be in [0, 1], got {self.cutout_size}")
        if self.mixup_alpha <= 0.0:
            raise ValueError(f"mixup_alpha must be positive, got {self.mixup_alpha}")
        if not 0.0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0:
            raise ValueError(f"bad crop_scale {self.crop_scale}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")


@dataclass(frozen=True)
class ViewSet:
    """V augmented views of one anchor plus the augmentation metadata.

    lambdas[v] is the mixing coefficient of view v (1.0 when nothing was
    mixed in); rects[v] lists the rectangles the kernel touched.
    """

    anchor_index: int
    views: tuple[ImageTensor, ...]
    lambdas: tuple[float, ...]
    rects: tuple[tuple[Rect, ...], ...]

    def __post_init__(self):
        if len(self.views) == 0:
            raise ValueError("a ViewSet needs at least one view")
        if not (len(self.views) == len(self.lambdas) == len(self.rects)):
            raise ValueError("views, lambdas and rects must be aligned")
        shape = self.views[0].data.shape
        for v in self.views[1:]:
            if v.data.shape != shape:
                raise ValueError(f"views disagree on shape: {shape} vs {v.data.shape}")


def hflip(img: ImageTensor) -> ImageTensor:
    return ImageTensor(np.ascontiguousarray(img.data[:, ::-1, :]))


def center_crop(img: ImageTensor) -> ImageTensor:
    """Largest centred square; identity for square images."""
    side = min(img.height, img.width)
    top = (img.height - side) // 2
    left = (img.width - side) // 2
    return crop(img, Rect(top, left, side, side))


def crop(img: ImageTensor, rect: Rect) -> ImageTensor:
    if rect.top < 0 or rect.left < 0 or rect.top + rect.height > img.height or rect.left + rect.width > img.width:
        raise ValueError(f"crop rect {rect} exceeds image {img.height}x{img.width}")
    return ImageTensor(img.data[rect.top : rect.top + rect.height, rect.left : rect.left + rect.width, :].copy())


def bilinear_resize(img: ImageTensor, out_size: int) -> ImageTensor:
    """Resize to out_size x out_size. Equal sizes reproduce the input bit-for-bit."""
    h, w = img.height, img.width
    if out_size < 1:
        raise ValueError(f"out_size must be >= 1, got {out_size}")
    if h == out_size and w == out_size:
        return ImageTensor(img.data.copy())

    def axis_coords(n_in: int, n_out: int) -> np.ndarray:
        if n_out == 1:
            return np.array([(n_in - 1) / 2.0])
        # endpoint-aligned sampling: identity when n_in == n_out
        return np.arange(n_out) * ((n_in - 1) / (n_out - 1))

    ys = axis_coords(h, out_size)
    xs = axis_coords(w, out_size)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[:, None, None]
    fx = (xs - x0).astype(np.float32)[None, :, None]

    d = img.data
    top = d[y0][:, x0] * (1.0 - fx) + d[y0][:, x1] * fx
    bot = d[y1][:, x0] * (1.0 - fx) + d[y1][:, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    return ImageTensor(np.clip(out, 0.0, 1.0).astype(np.float32))


def base_view(
    img: ImageTensor,
    out_size: int,
    rng: RngStream,
    scale_range: tuple[float, float] = (0.5, 1.0),
    flip_prob: float = 0.5,
) -> ImageTensor:
    """Random square crop (uniform scale and position) resized, then maybe flipped."""
    side_max = min(img.height, img.width)
    if out_size > side_max:
        raise ValueError(f"out_size {out_size} exceeds min image side {side_max}")
    scale = float(rng.uniform(scale_range[0], scale_range[1]))
    side = max(1, round(scale * side_max))
    top = int(rng.integers(0, img.height - side + 1))
    left = int(rng.integers(0, img.width - side + 1))
    view = bilinear_resize(crop(img, Rect(top, left, side, side)), out_size)
    if float(rng.uniform()) < flip_prob:
        view = hflip(view)
    return view


def fill_rect(img: ImageTensor, rect: Rect, fill: np.ndarray | float) -> ImageTensor:
    """Copy of img with rect set to fill (scalar, per-channel, or full patch)."""
    out = img.data.copy()
    out[rect.top : rect.top + rect.height, rect.left : rect.left + rect.width, :] = fill
    return ImageTensor(out)


def _clipped_square(h: int, w: int, cy: int, cx: int, side: int) -> Rect:
    """Square of the given side centred at (cy, cx), clipped to the image."""
    top = max(0, cy - side // 2)
    left = max(0, cx - side // 2)
    bottom = min(h, cy - side // 2 + side)
    right = min(w, cx - side // 2 + side)
    if bottom <= top or right <= left:
        return ZERO_RECT
    return Rect(top, left, bottom - top, right - left)


def random_erasing(img: ImageTensor, spec: AugmentSpec, rng: RngStream) -> tuple[ImageTensor, Rect]:
    """Fill one random rectangle with i.i.d. uniform noise, with prob erase_prob.

    Target area fraction is uniform in area_range, aspect ratio log-uniform in
    aspect_range; up to 10 draws to find a rectangle that fits, else identity.
    """
    if spec.kind is not AugmentKind.RANDOM_ERASING:
        raise ValueError(f"spec.kind must be erasing, got {spec.kind}")
    if float(rng.uniform()) >= spec.erase_prob:
        return ImageTensor(img.data.copy()), ZERO_RECT
    h, w, c = img.data.shape
    for _ in range(10):
        frac = float(rng.uniform(spec.area_range[0], spec.area_range[1]))
        log_aspect = float(rng.uniform(math.log(spec.aspect_range[0]), math.log(spec.aspect_range[1])))
        aspect = math.exp(log_aspect)  # aspect = height / width
        target = frac * h * w
        rh = round(math.sqrt(target * aspect))
        rw = round(math.sqrt(target / aspect))
        if 0 < rh <= h and 0 < rw <= w:
            top = int(rng.integers(0, h - rh + 1))
            left = int(rng.integers(0, w - rw + 1))
            rect = Rect(top, left, rh, rw)
            noise = rng.uniform(size=(rh, rw, c)).astype(np.float32)
            return fill_rect(img, rect, noise), rect
    return ImageTensor(img.data.copy()), ZERO_RECT


def cutout(img: ImageTensor, spec: AugmentSpec, rng: RngStream) -> tuple[ImageTensor, Rect]:
    """Mask one square, side = cutout_size * min(H, W), centre uniform, clipped.

    Zero mode fills with 0, mean mode with the per-channel image mean.
    """
    if spec.kind is not AugmentKind.CUTOUT:
        raise ValueError(f"spec.kind must be cutout, got {spec.kind}")
    h, w, _ = img.data.shape
    side = round(spec.cutout_size * min(h, w))
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    return cutout_at(img, cy, cx, side, spec.cutout_fill)


def cutout_at(img: ImageTensor, cy: int, cx: int, side: int, fill_mode: CutoutFill) -> tuple[ImageTensor, Rect]:
    """Deterministic cutout core with an explicit centre and side length."""
    h, w, _ = img.data.shape
    rect = _clipped_square(h, w, cy, cx, side)
    if rect.area == 0:
        return ImageTensor(img.data.copy()), ZERO_RECT
    if fill_mode is CutoutFill.MEAN:
        # float64 accumulation so a constant image yields its exact value back
        fill = img.data.astype(np.float64).mean(axis=(0, 1)).astype(np.float32)
    else:
        fill = np.float32(0.0)
    return fill_rect(img, rect, fill), rect


def cutmix(
    anchor: ImageTensor, donor: ImageTensor, rng: RngStream, alpha: float = 1.0
) -> tuple[ImageTensor, float, Rect]:
    """Paste a donor patch over the anchor; returns (image, lambda, rect).

    lambda0 ~ Beta(alpha, alpha) folded to [0.5, 1]; the patch spans
    sqrt(1 - lambda0) of each side (floored, so the unclipped area never
    exceeds half the image) at a uniform centre, clipped to bounds. The
    returned lambda is 1 - clipped_area / (H * W).
    """
    if anchor.data.shape != donor.data.shape:
        raise ValueError(f"cutmix: shape mismatch {anchor.data.shape} vs {donor.data.shape}")
    lam0 = rng.beta(alpha, alpha)
    lam0 = max(lam0, 1.0 - lam0)
    h, w, _ = anchor.data.shape
    cut = math.sqrt(1.0 - lam0)
    ph = math.floor(h * cut)
    pw = math.floor(w * cut)
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    top = max(0, cy - ph // 2)
    left = max(0, cx - pw // 2)
    bottom = min(h, cy - ph // 2 + ph)
    right = min(w, cx - pw // 2 + pw)
    rect = Rect(top, left, bottom - top, right - left) if bottom > top and right > left else ZERO_RECT
    if rect.area == 0:
        return ImageTensor(anchor.data.copy()), 1.0, ZERO_RECT
    patch = donor.data[rect.top : rect.top + rect.height, rect.left : rect.left + rect.width, :]
    out = fill_rect(anchor, rect, patch)
    lam = 1.0 - rect.area / (h * w)
    return out, lam, rect


def mixup(anchor: ImageTensor, donor: ImageTensor, lam: float) -> ImageTensor:
    """Per-pixel convex combination lam * anchor + (1 - lam) * donor."""
    if anchor.data.shape != donor.data.shape:
        raise ValueError(f"mixup: shape mismatch {anchor.data.shape} vs {donor.data.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup lambda must be in [0, 1], got {lam}")
    lam32 = np.float32(lam)
    out = lam32 * anchor.data + (np.float32(1.0) - lam32) * donor.data
    return ImageTensor(np.clip(out, 0.0, 1.0))


def make_views(
    anchor: ImageTensor,
    donors: Sequence[ImageTensor],
    n_views: int,
    spec: AugmentSpec,
    rng: RngStream,
    anchor_index: int = 0,
) -> ViewSet:
    """Produce n_views augmented views: base crop+flip, then the spec's kernel.

    Pure in the rng: every view draws from its own fork, so calling twice
    with the same stream reproduces the ViewSet bit-for-bit. Donor images
    (required for cutmix/mixup) pass through the same base pipeline before
    mixing. Views are square with side min(anchor H, anchor W).
    """
    if n_views < 1:
        raise ValueError(f"need at least one view, got {n_views}")
    if spec.kind in (AugmentKind.CUTMIX, AugmentKind.MIXUP) and len(donors) == 0:
        raise ValueError(f"{spec.kind.value} needs a non-empty donor pool")
    out_size = min(anchor.height, anchor.width)
    views: list[ImageTensor] = []
    lambdas: list[float] = []
    rects: list[tuple[Rect, ...]] = []
    for v in range(n_views):
        vrng = rng_fork(rng, v)
        view = base_view(anchor, out_size, vrng, spec.crop_scale, spec.flip_prob)
        lam = 1.0
        touched: tuple[Rect, ...] = ()
        if spec.kind is AugmentKind.RANDOM_ERASING:
            view, rect = random_erasing(view, spec, vrng)
            touched = (rect,)
        elif spec.kind is AugmentKind.CUTOUT:
            view, rect = cutout(view, spec, vrng)
            touched = (rect,)
        elif spec.kind is AugmentKind.CUTMIX:
            donor = donors[int(vrng.integers(0, len(donors)))]
            donor_view = base_view(donor, out_size, vrng, spec.crop_scale, spec.flip_prob)
            view, lam, rect = cutmix(view, donor_view, vrng, spec.mixup_alpha)
            touched = (rect,)
        elif spec.kind is AugmentKind.MIXUP:
            donor = donors[int(vrng.integers(0, len(donors)))]
            donor_view = base_view(donor, out_size, vrng, spec.crop_scale, spec.flip_prob)
            lam0 = vrng.beta(spec.mixup_alpha, spec.mixup_alpha)
            lam = max(lam0, 1.0 - lam0)
            view = mixup(view, donor_view, lam)
        views.append(view)
        lambdas.append(lam)
        rects.append(touched)
    return ViewSet(anchor_index, tuple(views), tuple(lambdas), tuple(rects))
