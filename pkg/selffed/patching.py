"""
Patch grids, random masking and the augmentation pipeline.

Usage:
    grid = PatchGrid(32, 32, 3, 4)
    patches = partition_patches(image, grid.patch_size)   # (R, V*V*C)
    plan = sample_mask(grid.num_patches, 0.6, rng)
    view = augment(image, AugmentSpec(), rng)
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import AugmentSpec, Interpolation, Phase
from .errors import CountMismatchError, CropTooLargeError, IndivisibleImageError, ShapeMismatchError
from .logging import get_logger
from .microtensor import Tensor, ops

logger = get_logger("patching")

ImageLike = Union[Tensor, np.ndarray]

# Guards floor(ratio * R) against products like 0.29 * 100 = 28.999...
_FLOOR_SLACK = 1e-9


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    channels: int
    patch_size: int

    def __post_init__(self):
        v = self.patch_size
        if v < 1 or self.height % v or self.width % v:
            raise IndivisibleImageError(
                f"Patch side {v} does not divide image {self.height}x{self.width}"
            )

    @classmethod
    def for_image(cls, shape: Sequence[int], patch_size: int) -> "PatchGrid":
        h, w, c = shape[-3:]
        return cls(int(h), int(w), int(c), patch_size)

    @property
    def rows(self) -> int:
        return self.height // self.patch_size

    @property
    def cols(self) -> int:
        return self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class MaskPlan:
    """Split of a patch grid into visible (zeta) and masked (theta) indices."""
    ratio: float
    visible: Tuple[int, ...]
    masked: Tuple[int, ...]

    @classmethod
    def from_masked(cls, num_patches: int, masked: Sequence[int], ratio: Optional[float] = None) -> "MaskPlan":
        """Build a plan from any ordering of masked indices (set semantics)."""
        chosen = sorted({int(i) for i in masked})
        if chosen and (chosen[0] < 0 or chosen[-1] >= num_patches):
            raise CountMismatchError(f"Masked index out of range for {num_patches} patches")
        hidden = set(chosen)
        visible = tuple(i for i in range(num_patches) if i not in hidden)
        if ratio is None:
            ratio = len(chosen) / num_patches
        return cls(ratio=ratio, visible=visible, masked=tuple(chosen))

    @property
    def num_patches(self) -> int:
        return len(self.visible) + len(self.masked)

    def visible_flags(self) -> np.ndarray:
        flags = np.ones(self.num_patches, dtype=bool)
        flags[list(self.masked)] = False
        return flags


def masked_count(num_patches: int, ratio: float) -> int:
    """|theta| = floor(ratio * R)."""
    return int(math.floor(ratio * num_patches + _FLOOR_SLACK))


def window_groups(rows: int, cols: int, window: int) -> List[np.ndarray]:
    """Patch indices of each attention window, windows in row-major order."""
    index = np.arange(rows * cols).reshape(rows, cols)
    return [
        index[r: r + window, c: c + window].reshape(-1)
        for r in range(0, rows, window)
        for c in range(0, cols, window)
    ]


def sample_mask(
    num_patches: int,
    ratio: float,
    rng: np.random.Generator,
    windows: Optional[Sequence[np.ndarray]] = None,
) -> MaskPlan:
    """
    Draw a uniformly random floor(ratio * R)-subset of patches to mask.

    With `windows`, the masked count is spread evenly over the windows
    (remainders go to randomly chosen windows) and drawn uniformly inside
    each one.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"Masking ratio must lie in [0, 1], got {ratio}")
    if num_patches < 1:
        raise ValueError("Patch count must be positive")

    count = masked_count(num_patches, ratio)
    if count == num_patches:
        logger.warning("Mask plan hides every patch; the encoder sees only mask tokens")

    if windows is None:
        masked = rng.choice(num_patches, size=count, replace=False)
    else:
        per_window = np.full(len(windows), count // len(windows))
        extra = rng.choice(len(windows), size=count % len(windows), replace=False)
        per_window[extra] += 1
        masked = np.concatenate([
            rng.choice(group, size=int(k), replace=False)
            for group, k in zip(windows, per_window)
        ]) if count else np.empty(0, dtype=np.int64)

    return MaskPlan.from_masked(num_patches, masked.tolist(), ratio)


# -- partitioning -----------------------------------------------------------

def partition_patches(image: ImageLike, patch_size: int) -> Tensor:
    """
    Cut (H, W, C) or (B, H, W, C) images into row-major patch sequences.

    Returns (R, V*V*C) or (B, R, V*V*C). Pure data movement, so the
    result is differentiable and reassemble() inverts it bit-exactly.
    """
    x = ops.as_tensor(image)
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4:
        raise ShapeMismatchError(f"Expected (H, W, C) or (B, H, W, C) images, got {image.shape}")

    b, h, w, c = x.shape
    grid = PatchGrid(h, w, c, patch_size)
    v = patch_size
    out = (
        x.reshape(b, grid.rows, v, grid.cols, v, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, grid.num_patches, grid.patch_dim)
    )
    return out.reshape(grid.num_patches, grid.patch_dim) if single else out


def reassemble(patches: ImageLike, grid: PatchGrid) -> Tensor:
    """Inverse of partition_patches."""
    p = ops.as_tensor(patches)
    single = p.ndim == 2
    if single:
        p = p.reshape(1, *p.shape)
    if p.ndim != 3:
        raise ShapeMismatchError(f"Expected (R, D) or (B, R, D) patches, got {p.shape}")
    if p.shape[1] != grid.num_patches:
        raise CountMismatchError(f"Expected {grid.num_patches} patches, got {p.shape[1]}")
    if p.shape[2] != grid.patch_dim:
        raise ShapeMismatchError(f"Expected patch dim {grid.patch_dim}, got {p.shape[2]}")

    b, v, c = p.shape[0], grid.patch_size, grid.channels
    out = (
        p.reshape(b, grid.rows, grid.cols, v, v, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, grid.height, grid.width, c)
    )
    return out.reshape(grid.height, grid.width, c) if single else out


# -- augmentation -----------------------------------------------------------

def _sample(
    image: np.ndarray,
    sy: np.ndarray,
    sx: np.ndarray,
    interpolation: Interpolation,
    fill: float,
) -> np.ndarray:
    """Resample `image` at pixel-centre coordinates (sy, sx); outside -> fill."""
    h, w = image.shape[:2]
    inside = (sy >= -0.5) & (sy <= h - 0.5) & (sx >= -0.5) & (sx <= w - 0.5)

    if interpolation == Interpolation.NEAREST:
        iy = np.clip(np.floor(sy + 0.5).astype(np.int64), 0, h - 1)
        ix = np.clip(np.floor(sx + 0.5).astype(np.int64), 0, w - 1)
        out = image[iy, ix]
    else:
        cy = np.clip(sy, 0.0, h - 1.0)
        cx = np.clip(sx, 0.0, w - 1.0)
        y0 = np.floor(cy).astype(np.int64)
        x0 = np.floor(cx).astype(np.int64)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        wy = (cy - y0)[..., None]
        wx = (cx - x0)[..., None]
        top = image[y0, x0] * (1.0 - wx) + image[y0, x1] * wx
        bottom = image[y1, x0] * (1.0 - wx) + image[y1, x1] * wx
        out = top * (1.0 - wy) + bottom * wy

    return np.where(inside[..., None], out, fill)


def resized_crop(
    image: np.ndarray,
    top: int,
    left: int,
    height: int,
    width: int,
    size: int,
    interpolation: Interpolation = Interpolation.NEAREST,
) -> np.ndarray:
    """Crop a region and resample it to size x size."""
    i = np.arange(size, dtype=np.float64)
    sy = top + (i + 0.5) * height / size - 0.5
    sx = left + (i + 0.5) * width / size - 0.5
    gy, gx = np.meshgrid(sy, sx, indexing="ij")
    return _sample(image, gy, gx, interpolation, fill=0.0)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def color_jitter(image: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Independent per-channel affine map."""
    return image * gain + bias


def rotate(
    image: np.ndarray,
    degrees: float,
    interpolation: Interpolation = Interpolation.NEAREST,
    fill: Optional[float] = None,
) -> np.ndarray:
    """Rotate about the image centre; uncovered pixels take `fill` (default: image minimum)."""
    h, w = image.shape[:2]
    if fill is None:
        fill = float(image.min())
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    sx = cos * dx + sin * dy + cx
    sy = -sin * dx + cos * dy + cy
    return _sample(image, sy, sx, interpolation, fill)


def augment(image: ImageLike, spec: AugmentSpec, rng: np.random.Generator) -> Tensor:
    """
    One seeded augmentation draw.

    Order: resized crop (area fraction from spec.scale, capped at the full
    image), horizontal flip, then color jitter (pre-training) or rotation
    (fine-tuning). Output is clipped to the input's value range.
    """
    x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatchError(f"augment expects one (H, W, C) image, got {x.shape}")
    h, w, c = x.shape
    size = spec.crop_size or h
    if size > h or size > w:
        raise CropTooLargeError(f"Crop size {size} exceeds image {h}x{w}")
    lo_val, hi_val = float(x.min()), float(x.max())

    lo, hi = spec.scale
    area = min(1.0, float(rng.uniform(lo, hi)))
    ch = int(np.clip(round(math.sqrt(area) * h), 1, h))
    cw = int(np.clip(round(math.sqrt(area) * w), 1, w))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    out = resized_crop(x, top, left, ch, cw, size, spec.interpolation)

    if rng.random() < spec.flip_prob:
        out = hflip(out)

    if spec.phase == Phase.PRETRAIN and spec.jitter > 0:
        s = spec.jitter
        out = color_jitter(out, rng.uniform(1.0 - s, 1.0 + s, c), rng.uniform(-s, s, c))

    if spec.phase == Phase.FINETUNE and spec.rotation > 0:
        out = rotate(out, float(rng.uniform(-spec.rotation, spec.rotation)), spec.interpolation)

    return Tensor.wrap(np.clip(out, lo_val, hi_val))
