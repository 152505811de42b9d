"""Deterministic 2D/3D image transforms shared by training and inference.

Resizing uses half-pixel-center alignment: target pixel i samples source
coordinate (i + 0.5) * s / t - 0.5. Nearest mode rounds half up, bilinear
clamps at the borders. The same convention drives the affine that maps
boxes between resolutions, so crop/paste round trips are exact.
"""

from __future__ import annotations

import numpy as np

from .dataio import BoundingBox, ValidationError


def zscore(image: np.ndarray) -> np.ndarray:
    """(x - mean) / population std; all zeros when std < 1e-12."""
    image = np.asarray(image)
    if image.size == 0:
        raise ValidationError("zscore: empty image")
    out_dtype = np.result_type(image.dtype, np.float32)
    x = image.astype(np.float64)
    std = x.std()
    if std < 1e-12:
        return np.zeros_like(x, dtype=out_dtype)
    return ((x - x.mean()) / std).astype(out_dtype)


def zscore_stack(images: np.ndarray) -> np.ndarray:
    """Per-image zscore over a (N, H, W) stack."""
    x = np.asarray(images, dtype=np.float64)
    mean = x.mean(axis=(-2, -1), keepdims=True)
    std = x.std(axis=(-2, -1), keepdims=True)
    out = np.where(std < 1e-12, 0.0, (x - mean) / np.where(std < 1e-12, 1.0, std))
    return out.astype(np.float32)


def _nearest_index(target: int, source: int) -> np.ndarray:
    # floor((i + 0.5) * s / t) == round-half-up of the half-pixel source coord
    idx = np.floor((np.arange(target) + 0.5) * (source / target)).astype(np.int64)
    return np.clip(idx, 0, source - 1)


def _linear_weights(target: int, source: int):
    coords = (np.arange(target) + 0.5) * (source / target) - 0.5
    i0 = np.floor(coords).astype(np.int64)
    frac = coords - i0
    i1 = np.clip(i0 + 1, 0, source - 1)
    i0 = np.clip(i0, 0, source - 1)
    return i0, i1, frac


def resize_stack(images: np.ndarray, target: tuple[int, int], mode: str) -> np.ndarray:
    """Resize a (N, H, W) stack; identity (bit-exact) when dims already match."""
    images = np.asarray(images)
    th, tw = (int(t) for t in target)
    if th < 1 or tw < 1:
        raise ValidationError(f"target dims must be >= 1, got {(th, tw)}")
    n, h, w = images.shape
    if (h, w) == (th, tw):
        return images.copy()
    if mode == "nearest":
        iy = _nearest_index(th, h)
        ix = _nearest_index(tw, w)
        return images[:, iy[:, None], ix[None, :]]
    if mode == "bilinear":
        y0, y1, fy = _linear_weights(th, h)
        x0, x1, fx = _linear_weights(tw, w)
        x = images.astype(np.float64)
        fy = fy[None, :, None]
        fx = fx[None, None, :]
        top = x[:, y0[:, None], x0[None, :]] * (1 - fx) + x[:, y0[:, None], x1[None, :]] * fx
        bot = x[:, y1[:, None], x0[None, :]] * (1 - fx) + x[:, y1[:, None], x1[None, :]] * fx
        out = top * (1 - fy) + bot * fy
        return out.astype(np.result_type(images.dtype, np.float32))
    raise ValidationError(f"unknown resize mode {mode!r}")


def resize_image(image: np.ndarray, target: tuple[int, int], mode: str) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValidationError(f"resize_image expects 2D input, got shape {image.shape}")
    return resize_stack(image[None], target, mode)[0]


def crop_roi(image: np.ndarray, box: BoundingBox, margin_px: int = 0):
    """Crop `box` expanded by margin_px and clipped; returns (patch, effective_box)."""
    if margin_px < 0:
        raise ValidationError("margin_px must be >= 0")
    h, w = image.shape[-2:]
    if not box.within(h, w):
        raise ValidationError(f"box {box.as_tuple()} outside {h}x{w} slice")
    eff = BoundingBox(
        max(box.x_min - margin_px, 0),
        max(box.y_min - margin_px, 0),
        min(box.x_max + margin_px, w),
        min(box.y_max + margin_px, h),
    )
    patch = np.ascontiguousarray(image[eff.y_min:eff.y_max, eff.x_min:eff.x_max])
    return patch, eff


def paste_mask(patch_mask: np.ndarray, effective_box: BoundingBox,
               slice_dims: tuple[int, int]) -> np.ndarray:
    """Write a binary patch into an empty full-size slice mask."""
    patch_mask = np.asarray(patch_mask)
    h, w = (int(v) for v in slice_dims)
    if patch_mask.shape != (effective_box.height, effective_box.width):
        raise ValidationError(
            f"patch shape {patch_mask.shape} != box dims "
            f"{(effective_box.height, effective_box.width)}"
        )
    if not effective_box.within(h, w):
        raise ValidationError(f"box {effective_box.as_tuple()} outside {h}x{w} slice")
    out = np.zeros((h, w), dtype=np.uint8)
    out[effective_box.y_min:effective_box.y_max,
        effective_box.x_min:effective_box.x_max] = (patch_mask != 0).astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# box mapping between resolutions (the affine implied by half-pixel resizing
# is a pure scale in box-edge coordinates)

def scale_box(edges: tuple[float, float, float, float],
              src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> tuple[float, float, float, float]:
    sy = dst_hw[0] / src_hw[0]
    sx = dst_hw[1] / src_hw[1]
    x0, y0, x1, y1 = edges
    return (x0 * sx, y0 * sy, x1 * sx, y1 * sy)


def box_round_out(edges: tuple[float, float, float, float],
                  bounds_hw: tuple[int, int]) -> BoundingBox:
    """Smallest integer box covering continuous edges, clipped to bounds."""
    h, w = bounds_hw
    x0 = int(np.floor(edges[0]))
    y0 = int(np.floor(edges[1]))
    x1 = int(np.ceil(edges[2]))
    y1 = int(np.ceil(edges[3]))
    x0 = min(max(x0, 0), w - 1)
    y0 = min(max(y0, 0), h - 1)
    x1 = min(max(x1, x0 + 1), w)
    y1 = min(max(y1, y0 + 1), h)
    return BoundingBox(x0, y0, x1, y1)


def map_box(box: BoundingBox, src_hw: tuple[int, int], dst_hw: tuple[int, int]) -> BoundingBox:
    """Map an integer box between grids, rounding outward."""
    return box_round_out(scale_box(box.as_tuple(), src_hw, dst_hw), dst_hw)


def downsample_volume(voxels: np.ndarray, grid: tuple[int, int, int],
                      mode: str = "mean") -> np.ndarray:
    """Resample a 3D array to `grid`.

    mode "mean" block-averages when every axis divides evenly (intensity
    volumes), otherwise falls back to nearest; mode "nearest" always picks
    half-pixel nearest samples (masks).
    """
    voxels = np.asarray(voxels)
    grid = tuple(int(g) for g in grid)
    if voxels.shape == grid:
        return voxels.copy()
    factors = [s % g == 0 for s, g in zip(voxels.shape, grid)]
    if mode == "mean" and all(factors) and all(s >= g for s, g in zip(voxels.shape, grid)):
        fz, fy, fx = (s // g for s, g in zip(voxels.shape, grid))
        view = voxels.reshape(grid[0], fz, grid[1], fy, grid[2], fx)
        return view.mean(axis=(1, 3, 5)).astype(voxels.dtype)
    iz = _nearest_index(grid[0], voxels.shape[0])
    iy = _nearest_index(grid[1], voxels.shape[1])
    ix = _nearest_index(grid[2], voxels.shape[2])
    return voxels[np.ix_(iz, iy, ix)]


def upsample_volume_nearest(voxels: np.ndarray, grid: tuple[int, int, int]) -> np.ndarray:
    """Nearest-neighbor resample of a 3D array to `grid` (used for masks)."""
    voxels = np.asarray(voxels)
    grid = tuple(int(g) for g in grid)
    if voxels.shape == grid:
        return voxels.copy()
    iz = _nearest_index(grid[0], voxels.shape[0])
    iy = _nearest_index(grid[1], voxels.shape[1])
    ix = _nearest_index(grid[2], voxels.shape[2])
    return voxels[np.ix_(iz, iy, ix)]
