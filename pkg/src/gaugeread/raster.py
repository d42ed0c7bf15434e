"""8-bit raster type and the preprocessing primitives used by every later stage.

All operations are pure: they never mutate their input and return new rasters.
Borders are handled by edge replication everywhere. Quantization back to
8 bits rounds half away from zero.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image
from scipy import ndimage

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True, eq=False)
class Raster:
    """Immutable 8-bit image, shape (height, width) or (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.dtype != np.uint8:
            raise TypeError(f"Raster data must be uint8, got {arr.dtype}")
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if not (arr.ndim == 2 or (arr.ndim == 3 and arr.shape[2] == 3)):
            raise ValueError(f"Raster must have 1 or 3 channels, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("Raster must be at least 1x1")
        arr = np.array(arr, dtype=np.uint8, copy=True, order="C")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Raster):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self) -> int:
        return hash((self.data.shape, self.data.tobytes()))

    def __repr__(self) -> str:
        return f"Raster({self.width}x{self.height}x{self.channels})"

    @classmethod
    def from_float(cls, values: np.ndarray) -> Raster:
        return cls(quantize(values))

    def crop(self, top: int, bottom: int, left: int = 0, right: int | None = None) -> Raster:
        """Rows [top, bottom) and columns [left, right)."""
        return Raster(self.data[top:bottom, left:right])


@dataclass(frozen=True)
class GradientField:
    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray

    @property
    def height(self) -> int:
        return self.gx.shape[0]

    @property
    def width(self) -> int:
        return self.gx.shape[1]


@dataclass(frozen=True)
class FilterWindow:
    m: int = 3
    n: int = 3

    def __post_init__(self) -> None:
        if self.m < 1 or self.n < 1 or self.m % 2 == 0 or self.n % 2 == 0:
            raise ValueError(f"filter window dimensions must be odd and >= 1, got {self.m}x{self.n}")


def quantize(values: np.ndarray) -> np.ndarray:
    """Round half away from zero and clamp to [0, 255]."""
    values = np.asarray(values, dtype=np.float64)
    rounded = np.sign(values) * np.floor(np.abs(values) + 0.5)
    return np.clip(rounded, 0, 255).astype(np.uint8)


def _require_gray(img: Raster, op: str) -> None:
    if img.channels != 1:
        raise ValueError(f"{op} expects a single-channel raster, got {img.channels} channels")


def to_grayscale(img: Raster) -> Raster:
    if img.channels != 3:
        raise ValueError(f"to_grayscale expects 3 channels, got {img.channels}")
    rgb = img.data.astype(np.float64)
    lum = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    return Raster.from_float(lum)


def as_gray(img: Raster) -> Raster:
    return img if img.channels == 1 else to_grayscale(img)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate1d(values: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * values.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(values, pad, mode="edge")
    out = np.zeros_like(values, dtype=np.float64)
    n = values.shape[axis]
    for i, w in enumerate(kernel):
        out += w * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_float(values: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing without re-quantization."""
    k = gaussian_kernel1d(sigma)
    return _correlate1d(_correlate1d(np.asarray(values, dtype=np.float64), k, 0), k, 1)


def gaussian_blur(img: Raster, sigma: float) -> Raster:
    _require_gray(img, "gaussian_blur")
    return Raster.from_float(gaussian_float(img.data, sigma))


def median_filter(img: Raster, win: FilterWindow = FilterWindow()) -> Raster:
    _require_gray(img, "median_filter")
    pm, pn = win.m // 2, win.n // 2
    padded = np.pad(img.data, ((pm, pm), (pn, pn)), mode="edge")
    windows = sliding_window_view(padded, (win.m, win.n)).reshape(img.height, img.width, -1)
    mid = (win.m * win.n) // 2
    return Raster(np.partition(windows, mid, axis=2)[:, :, mid])


def otsu_threshold(img: Raster) -> tuple[int, Raster]:
    """Exhaustive Otsu search; class 0 is pixels <= t, ties go to the smallest t.

    The between-class variance w0*w1*(mu0-mu1)^2 equals
    (s0*n1 - s1*n0)^2 / (N^2 * n0 * n1), so candidates are compared with exact
    integer arithmetic.
    """
    _require_gray(img, "otsu_threshold")
    hist = np.bincount(img.data.ravel(), minlength=256).astype(np.int64)
    if np.count_nonzero(hist) <= 1:
        t = int(img.data.flat[0])
        return t, Raster(np.zeros_like(img.data))
    levels = np.arange(256, dtype=np.int64)
    n_total = int(hist.sum())
    s_total = int((hist * levels).sum())
    n_cum = np.cumsum(hist).tolist()
    s_cum = np.cumsum(hist * levels).tolist()
    best_t, best_num, best_den = 0, 0, 1
    for t in range(256):
        n0 = n_cum[t]
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            continue
        s0 = s_cum[t]
        s1 = s_total - s0
        num = (s0 * n1 - s1 * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    binary = np.where(img.data > best_t, 255, 0).astype(np.uint8)
    return best_t, Raster(binary)


def sobel_float(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cross-correlate with the Sobel pair, edge-replicated borders."""
    padded = np.pad(np.asarray(values, dtype=np.float64), 1, mode="edge")
    h, w = values.shape
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for dy in range(3):
        for dx in range(3):
            patch = padded[dy:dy + h, dx:dx + w]
            if SOBEL_X[dy, dx]:
                gx += SOBEL_X[dy, dx] * patch
            if SOBEL_Y[dy, dx]:
                gy += SOBEL_Y[dy, dx] * patch
    return gx, gy


def sobel_gradients(img: Raster) -> GradientField:
    _require_gray(img, "sobel_gradients")
    if img.width < 3 or img.height < 3:
        raise ValueError("sobel_gradients needs an image of at least 3x3")
    gx, gy = sobel_float(img.data)
    return GradientField(gx=gx, gy=gy, magnitude=np.hypot(gx, gy))


def _non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    # direction bins: 0 -> horizontal neighbours, 45, 90 -> vertical, 135
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    bins = np.zeros(mag.shape, dtype=np.int8)
    bins[(angle >= 22.5) & (angle < 67.5)] = 1
    bins[(angle >= 67.5) & (angle < 112.5)] = 2
    bins[(angle >= 112.5) & (angle < 157.5)] = 3
    p = np.pad(mag, 1, mode="edge")
    h, w = mag.shape

    def at(dy: int, dx: int) -> np.ndarray:
        return p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    # (dy, dx) of the "forward" neighbour along the quantized gradient
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    for b, (dy, dx) in offsets.items():
        sel = bins == b
        ok = (mag >= at(-dy, -dx)) & (mag > at(dy, dx))
        keep |= sel & ok
    return np.where(keep & (mag > 0), mag, 0.0)


def canny(img: Raster, low: float = 50.0, high: float = 150.0,
          sigma: float = 1.4) -> tuple[np.ndarray, np.ndarray]:
    """Return (edge mask, gradient magnitude) of the Canny detector."""
    _require_gray(img, "canny_edges")
    if not 0 <= low < high:
        raise ValueError(f"canny thresholds need 0 <= low < high, got low={low}, high={high}")
    smooth = gaussian_float(img.data, sigma)
    gx, gy = sobel_float(smooth)
    mag = np.hypot(gx, gy)
    thin = _non_max_suppression(mag, gx, gy)
    candidate = thin >= max(low, np.finfo(float).tiny)
    strong = thin >= high
    labels, count = ndimage.label(candidate, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return np.zeros(mag.shape, dtype=bool), mag
    has_strong = np.zeros(count + 1, dtype=bool)
    has_strong[np.unique(labels[strong])] = True
    has_strong[0] = False
    return has_strong[labels], mag


def canny_edges(img: Raster, low: float = 50.0, high: float = 150.0, sigma: float = 1.4) -> Raster:
    edges, _ = canny(img, low, high, sigma)
    return Raster(np.where(edges, 255, 0).astype(np.uint8))


# -- image I/O -----------------------------------------------------------------

def _from_pil(im: Image.Image) -> Raster:
    if im.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
        raise ValueError(f"only 8-bit images are supported, got mode {im.mode}")
    if im.mode != "L":
        im = im.convert("RGB")
    return Raster(np.asarray(im, dtype=np.uint8))


def read_image(path: str | Path) -> Raster:
    """Read PNG or binary PGM/PPM."""
    with Image.open(path) as im:
        im.load()
        return _from_pil(im)


def write_image(img: Raster, path: str | Path) -> None:
    """Write PNG or binary PGM/PPM, chosen by extension."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext in (".pgm", ".ppm"):
        if (ext == ".pgm") != (img.channels == 1):
            raise ValueError(f"{ext} does not match a {img.channels}-channel raster")
        fmt = "PPM"
    elif ext == ".png":
        fmt = "PNG"
    else:
        raise ValueError(f"unsupported image extension {ext!r}")
    Image.fromarray(img.data).save(path, format=fmt)


def encode_png(img: Raster) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img.data).save(buf, format="PNG")
    return buf.getvalue()


def decode_image(data: bytes) -> Raster:
    with Image.open(io.BytesIO(data)) as im:
        im.load()
        return _from_pil(im)
