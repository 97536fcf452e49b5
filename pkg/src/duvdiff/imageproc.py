"""Processing pipeline for experimental fluorescence micrographs.

Order of the standard chain (dark subtraction is assumed pre-applied by the
camera software): bright-frame subtraction, spike winsorizing, background
plane subtraction, small rotation, crop.  Vertical smoothing and unit
normalization prepare images for pixelwise comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, NumericsError


@dataclass
class RawImage:
    data: np.ndarray
    pixel_pitch: float
    provenance: str = "raw"
    valid: np.ndarray | None = None  # False where pixels are unreliable

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise DataError(f"image must be 2D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("image contains non-finite values")


def _as_array(img) -> np.ndarray:
    if isinstance(img, np.ndarray):
        return img
    return np.asarray(getattr(img, "data", img), dtype=float)


def _check_same_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DataError(f"image dimensions differ: {a.shape} vs {b.shape}")


def subtract_background(img: RawImage, *brights: RawImage) -> RawImage:
    """Subtract the mean of the given bright frames pixelwise."""
    if not brights:
        raise DataError("at least one bright frame required")
    for b in brights:
        _check_same_dims(img.data, _as_array(b))
    mean_bright = np.mean([_as_array(b) for b in brights], axis=0)
    return replace(img, data=img.data - mean_bright,
                   provenance="bright-subtracted")


def despike(img: RawImage, q: float = 1e-5) -> RawImage:
    """Winsorize: clamp pixels beyond the q and 1-q quantiles.

    Quantiles use linear interpolation on the sorted sample.  Replacing
    rather than deleting keeps the raster rectangular.
    """
    if not 0.0 < q < 0.5:
        raise DataError(f"quantile must be in (0, 0.5), got {q}")
    lo, hi = np.quantile(img.data, [q, 1.0 - q])
    return replace(img, data=np.clip(img.data, lo, hi),
                   provenance="despiked")


def subtract_plane(img: RawImage, mask: np.ndarray) -> RawImage:
    """Fit a + b*x + c*y on masked pixels and subtract it everywhere.

    mask is True where pixels belong to the background region outside the
    diffraction pattern.
    """
    mask = np.asarray(mask, bool)
    _check_same_dims(img.data, mask)
    if mask.sum() < 0.05 * mask.size:
        raise DataError("background mask must cover at least 5% of pixels")
    h, w = img.data.shape
    yy, xx = np.mgrid[0:h, 0:w]
    a_mat = np.column_stack([np.ones(mask.sum()), xx[mask], yy[mask]])
    coef, _, rank, _ = np.linalg.lstsq(a_mat, img.data[mask], rcond=None)
    if rank < 3:
        raise DataError("background mask geometry is rank-deficient "
                        "(collinear pixels)")
    plane = coef[0] + coef[1] * xx + coef[2] * yy
    return replace(img, data=img.data - plane, provenance="plane-subtracted")


def rotate(img: RawImage, theta_deg: float = 0.4) -> RawImage:
    """Rotate by theta about the image center with bilinear interpolation.

    Out-of-frame pixels are filled with zero and flagged invalid.
    """
    if abs(theta_deg) >= 5.0:
        raise DataError(f"rotation angle must satisfy |theta| < 5 deg, "
                        f"got {theta_deg}")
    if theta_deg == 0.0:
        return replace(img, valid=np.ones_like(img.data, dtype=bool))
    h, w = img.data.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(theta_deg)
    cos_t, sin_t = np.cos(th), np.sin(th)
    yy, xx = np.mgrid[0:h, 0:w]
    # inverse mapping: sample the source at R(-theta) applied to the output
    dx, dy = xx - cx, yy - cy
    sx = cx + cos_t * dx + sin_t * dy
    sy = cy - sin_t * dx + cos_t * dy
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    inside = (x0 >= 0) & (x0 + 1 < w) & (y0 >= 0) & (y0 + 1 < h)
    x0c = np.clip(x0, 0, w - 2)
    y0c = np.clip(y0, 0, h - 2)
    src = img.data
    out = ((1 - fx) * (1 - fy) * src[y0c, x0c]
           + fx * (1 - fy) * src[y0c, x0c + 1]
           + (1 - fx) * fy * src[y0c + 1, x0c]
           + fx * fy * src[y0c + 1, x0c + 1])
    out[~inside] = 0.0
    return replace(img, data=out, valid=inside, provenance="rotated")


def crop(img: RawImage, rect: tuple[int, int, int, int]) -> RawImage:
    """Extract rect = (row0, col0, height, width)."""
    r0, c0, rh, rw = rect
    h, w = img.data.shape
    if rh <= 0 or rw <= 0:
        raise DataError("empty crop rectangle")
    if r0 < 0 or c0 < 0 or r0 + rh > h or c0 + rw > w:
        raise DataError(f"crop rect {rect} outside image of shape {(h, w)}")
    valid = None if img.valid is None else img.valid[r0:r0 + rh, c0:c0 + rw]
    return replace(img, data=img.data[r0:r0 + rh, c0:c0 + rw].copy(),
                   valid=valid, provenance="cropped")


def vertical_smooth(img: RawImage, h: int) -> RawImage:
    """Column-wise boxcar of width 2h+1, renormalized at the edges."""
    if h < 0:
        raise DataError("smoothing half-width must be >= 0")
    if h == 0:
        return img
    kernel = np.ones(2 * h + 1)
    smoothed = np.apply_along_axis(
        lambda col: np.convolve(col, kernel, mode="same"), 0, img.data)
    norm = np.convolve(np.ones(img.data.shape[0]), kernel, mode="same")
    return replace(img, data=smoothed / norm[:, None],
                   provenance="smoothed")


def normalize_unity(img: RawImage) -> RawImage:
    total = img.data.sum()
    if total == 0.0:
        raise NumericsError("cannot normalize an all-zero image")
    return replace(img, data=img.data / total, provenance="normalized")


def rss(a, b, mask: np.ndarray | None = None) -> float:
    """Residual sum of squares over all pixels of two unit-normalized images."""
    arr_a, arr_b = _as_array(a), _as_array(b)
    _check_same_dims(arr_a, arr_b)
    for name, arr in (("first", arr_a), ("second", arr_b)):
        if abs(arr.sum() - 1.0) > 1e-6:
            raise DataError(f"{name} image is not normalized to unity "
                            f"(sum = {arr.sum()!r})")
    diff2 = (arr_a - arr_b) ** 2
    if mask is not None:
        mask = np.asarray(mask, bool)
        _check_same_dims(arr_a, mask)
        diff2 = diff2[mask]
    return float(diff2.sum())
