"""Parametric staff-gauge renderer with closed-form ground truth.

The plate is drawn upright with a bold bar and seven-segment numeral every
10 cm and a small triangle at every centimetre in between. Numerals increase
upward; rows grow downward. Everything below the waterline row is water.
A tilt is applied last by rotating the whole scene.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from gaugeread.deskew import rotate_image
from gaugeread.raster import Raster, gaussian_float, quantize

BACKGROUND = (80, 100, 85)
PLATE = (240, 240, 235)
MARK = (25, 25, 35)
WATER = (45, 60, 70)

# segments a..g as (row0, col0, row1, col1) in a unit cell 2 wide, 4 tall
_SEGMENTS = {
    "a": (0, 0, 0, 2), "b": (0, 2, 2, 2), "c": (2, 2, 4, 2), "d": (4, 0, 4, 2),
    "e": (2, 0, 4, 0), "f": (0, 0, 2, 0), "g": (2, 0, 2, 2),
}
_DIGITS = {
    "0": "abcdef", "1": "bc", "2": "abged", "3": "abgcd", "4": "fgbc",
    "5": "afgcd", "6": "afgedc", "7": "abc", "8": "abcdefg", "9": "abcdfg",
}


@dataclass(frozen=True)
class GaugeSpec:
    waterline_cm: float
    px_per_cm: float = 5.0
    top_value_cm: int = 200
    plate_height_cm: int = 100
    plate_width_px: int = 120
    tilt_deg: float = 0.0
    seed: int = 0
    image_width: int = 360
    image_height: int = 640
    top_row: int = 48
    plate_left: int | None = None

    def validate(self) -> None:
        if self.plate_height_cm <= 0 or self.plate_height_cm % 10:
            raise ValueError("plate_height_cm must be a positive multiple of 10")
        if not self.px_per_cm > 0:
            raise ValueError("px_per_cm must be positive")
        if not 0 <= self.waterline_cm <= self.top_value_cm:
            raise ValueError("waterline_cm must lie in [0, top_value_cm]")
        if self.px_per_cm * self.plate_height_cm > self.image_height:
            raise ValueError("plate does not fit the image height")
        if abs(self.tilt_deg) > 45:
            raise ValueError("tilt_deg must be within +/-45")
        if self.plate_width_px < 20 or self.plate_width_px > self.image_width:
            raise ValueError("plate_width_px out of range")
        if not 0 <= self.top_row < self.image_height:
            raise ValueError("top_row outside the image")
        if self.waterline_row >= self.image_height:
            raise ValueError("waterline falls below the image")

    @property
    def left(self) -> int:
        if self.plate_left is not None:
            return self.plate_left
        return (self.image_width - self.plate_width_px) // 2

    @property
    def bottom_value_cm(self) -> int:
        return self.top_value_cm - self.plate_height_cm

    def row_of(self, value_cm: float) -> float:
        return self.top_row + (self.top_value_cm - value_cm) * self.px_per_cm

    @property
    def waterline_row(self) -> int:
        return int(math.floor(self.row_of(self.waterline_cm) + 0.5))


@dataclass(frozen=True)
class Degradation:
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    brightness_shift: float = 0.0
    contrast_scale: float = 1.0
    occlusion_rects: tuple[tuple[int, int, int, int], ...] = ()

    def __post_init__(self) -> None:
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur_sigma and noise_sigma must be >= 0")
        if not 0 < self.contrast_scale <= 4:
            raise ValueError("contrast_scale must be in (0, 4]")
        if abs(self.brightness_shift) > 255:
            raise ValueError("brightness_shift must be within +/-255")
        object.__setattr__(self, "occlusion_rects", tuple(tuple(int(v) for v in r) for r in self.occlusion_rects))

    @property
    def is_identity(self) -> bool:
        return (self.blur_sigma == 0 and self.noise_sigma == 0 and self.brightness_shift == 0
                and self.contrast_scale == 1 and not self.occlusion_rects)


def quality_label(d: Degradation | None) -> str:
    return "optimal" if d is None or d.is_identity else "sub-optimal"


@dataclass(frozen=True)
class MajorMark:
    row: float
    col: float
    value_cm: int
    visible: bool


@dataclass(frozen=True)
class GroundTruth:
    waterline_row: int
    major_keypoints: tuple[MajorMark, ...]
    d_m_px: float
    reading_cm: float
    quality: str
    plate_bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive) of the visible plate
    tilt_deg: float = 0.0
    image_width: int = 0
    image_height: int = 0

    @property
    def plate_height_px(self) -> int:
        return self.plate_bbox[3] - self.plate_bbox[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["major_keypoints"] = [asdict(k) for k in self.major_keypoints]
        d["plate_bbox"] = list(self.plate_bbox)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GroundTruth:
        d = dict(d)
        d["major_keypoints"] = tuple(MajorMark(**k) for k in d["major_keypoints"])
        d["plate_bbox"] = tuple(d["plate_bbox"])
        return cls(**d)


def _fill_rect(img: np.ndarray, y0: float, x0: float, y1: float, x1: float, color) -> None:
    h, w = img.shape[:2]
    r0, r1 = max(int(round(y0)), 0), min(int(round(y1)), h)
    c0, c1 = max(int(round(x0)), 0), min(int(round(x1)), w)
    if r1 > r0 and c1 > c0:
        img[r0:r1, c0:c1] = color


def _fill_triangle(img: np.ndarray, pts, color) -> None:
    (ax, ay), (bx, by), (cx, cy) = pts
    x0, x1 = int(math.floor(min(ax, bx, cx))), int(math.ceil(max(ax, bx, cx)))
    y0, y1 = int(math.floor(min(ay, by, cy))), int(math.ceil(max(ay, by, cy)))
    yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64) + 0.5

    def side(px, py, qx, qy):
        return (qx - px) * (yy - py) - (qy - py) * (xx - px)

    s1, s2, s3 = side(ax, ay, bx, by), side(bx, by, cx, cy), side(cx, cy, ax, ay)
    inside = ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))
    h, w = img.shape[:2]
    ys, xs = np.nonzero(inside)
    ys, xs = ys + y0, xs + x0
    ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    img[ys[ok], xs[ok]] = color


def draw_number(img: np.ndarray, text: str, top: float, left: float, height: float, color) -> None:
    """Seven-segment glyphs; each digit is height/2 wide with a stroke of height/8."""
    unit = height / 4.0
    stroke = max(2.0, height / 8.0)
    for i, ch in enumerate(text):
        x = left + i * (2 * unit + stroke * 1.5)
        for seg in _DIGITS[ch]:
            r0, c0, r1, c1 = _SEGMENTS[seg]
            _fill_rect(img, top + r0 * unit, x + c0 * unit, top + r1 * unit + stroke,
                       x + c1 * unit + stroke, color)


def _plate_layout(spec: GaugeSpec):
    left = spec.left
    right = left + spec.plate_width_px
    ppc = spec.px_per_cm
    plate_top = spec.top_row - max(2.0, ppc)
    plate_bottom = spec.row_of(spec.bottom_value_cm)
    return left, right, plate_top, plate_bottom


def render(spec: GaugeSpec) -> tuple[Raster, GroundTruth]:
    """Draw the gauge scene; returns an RGB raster and its ground truth.

    Ground-truth rows are expressed in the upright (pre-tilt) frame.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w, ppc = spec.image_height, spec.image_width, spec.px_per_cm
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = BACKGROUND
    # faint vertical shading keeps the background from being perfectly flat
    img += np.linspace(-6, 6, h)[:, None, None]

    left, right, plate_top, plate_bottom = _plate_layout(spec)
    _fill_rect(img, plate_top, left, plate_bottom, right, PLATE)
    thick = max(2.0, round(0.5 * ppc))
    tri_w = 0.35 * spec.plate_width_px
    for cm in range(spec.bottom_value_cm, spec.top_value_cm + 1):
        row = spec.row_of(cm)
        if cm % 10 == 0:
            _fill_rect(img, row, left, row + thick, right, MARK)
            digit_h = 5.0 * ppc
            text = str(cm)
            glyph_left = left + 0.42 * spec.plate_width_px
            if row + 1.5 * ppc + digit_h <= plate_bottom:
                draw_number(img, text, row + 1.5 * ppc, glyph_left, digit_h, MARK)
        else:
            # one triangle per centimetre: base on the left edge, apex pointing right
            reach = tri_w * (1.0 if cm % 5 == 0 else 0.7)
            _fill_triangle(img, [(left + 2, row), (left + 2, row + 0.8 * ppc),
                                 (left + 2 + reach, row + 0.4 * ppc)], MARK)

    wl = spec.waterline_row
    img[wl:, :] = WATER
    img += rng.normal(0.0, 1.5, size=(h, w, 1))
    raster = Raster(quantize(img))
    if spec.tilt_deg:
        raster = rotate_image(raster, spec.tilt_deg)

    marks = []
    for v in range(spec.top_value_cm, spec.bottom_value_cm - 1, -10):
        row = spec.row_of(v)
        marks.append(MajorMark(row=row, col=(left + right) / 2.0, value_cm=v, visible=row <= wl))
    bbox = (left, int(math.floor(plate_top + 0.5)), right, min(wl, int(math.floor(plate_bottom + 0.5))))
    gt = GroundTruth(
        waterline_row=wl,
        major_keypoints=tuple(marks),
        d_m_px=10.0 * ppc,
        reading_cm=float(spec.waterline_cm),
        quality="optimal",
        plate_bbox=bbox,
        tilt_deg=spec.tilt_deg,
        image_width=w,
        image_height=h,
    )
    return raster, gt


def degrade(img: Raster, d: Degradation, seed: int = 0) -> Raster:
    """Blur, then noise, then brightness/contrast, then occlusions."""
    if d.is_identity:
        return img
    rng = np.random.default_rng(seed)
    data = img.data.astype(np.float64)
    planes = data[:, :, None] if img.channels == 1 else data
    if d.blur_sigma > 0:
        planes = np.stack([gaussian_float(planes[:, :, c], d.blur_sigma) for c in range(planes.shape[2])], axis=2)
    if d.noise_sigma > 0:
        planes = planes + rng.normal(0.0, d.noise_sigma, size=planes.shape[:2])[:, :, None]
    if d.contrast_scale != 1 or d.brightness_shift != 0:
        planes = (planes - 128.0) * d.contrast_scale + 128.0 + d.brightness_shift
    h, w = planes.shape[:2]
    for x0, y0, x1, y1 in d.occlusion_rects:
        x0, x1 = max(x0, 0), min(x1, w)
        y0, y1 = max(y0, 0), min(y1, h)
        if x1 <= x0 or y1 <= y0:
            continue
        # blotchy clutter (grass, debris) in 3x3 px cells
        cells = rng.uniform(0, 255, size=((y1 - y0) // 3 + 1, (x1 - x0) // 3 + 1))
        patch = np.kron(cells, np.ones((3, 3)))[: y1 - y0, : x1 - x0]
        planes[y0:y1, x0:x1] = patch[:, :, None]
    out = quantize(planes)
    return Raster(out[:, :, 0] if img.channels == 1 else out)


def occlude_waterline(gt: GroundTruth, above_px: int = 40, margin_px: int = 10) -> tuple[int, int, int, int]:
    """Clutter rectangle hiding the waterline: from above it down to the image bottom."""
    x0, _, x1, _ = gt.plate_bbox
    return (x0 - margin_px, gt.waterline_row - above_px, x1 + margin_px, gt.image_height)


def render_degraded(spec: GaugeSpec, d: Degradation | None = None) -> tuple[Raster, GroundTruth]:
    img, gt = render(spec)
    if d is None or d.is_identity:
        return img, gt
    img = degrade(img, d, seed=spec.seed + 7919)
    return img, GroundTruth(**{**gt.__dict__, "quality": quality_label(d)})


def split_dataset(ids: list, train_frac: float = 0.8, seed: int = 0) -> tuple[list, list]:
    if not ids:
        raise ValueError("cannot split an empty id list")
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(math.floor(len(ids) * train_frac + 1e-9))
    shuffled = [ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


def export_annotations(gt: GroundTruth, img_dims: tuple[int, int]) -> str:
    """Normalized box-plus-keypoints label line for the plate.

    Format: ``class cx cy w h`` followed by ``kx ky v`` per major mark, where v
    is 2 for marks above the waterline and 0 for submerged ones.
    """
    width, height = img_dims
    x0, y0, x1, y1 = gt.plate_bbox
    vals = [(x0 + x1) / 2 / width, (y0 + y1) / 2 / height, (x1 - x0) / width, (y1 - y0) / height]
    for k in gt.major_keypoints:
        vals += [k.col / width, k.row / height]
        vals.append(2 if k.visible else 0)
    parts = ["0"] + [f"{v:.6f}" if isinstance(v, float) else str(v) for v in vals]
    return " ".join(parts) + "\n"


def parse_annotation(line: str, img_dims: tuple[int, int]) -> dict:
    width, height = img_dims
    fields = line.split()
    cls = int(fields[0])
    cx, cy, bw, bh = (float(v) for v in fields[1:5])
    box = ((cx - bw / 2) * width, (cy - bh / 2) * height, (cx + bw / 2) * width, (cy + bh / 2) * height)
    kps = []
    rest = fields[5:]
    for i in range(0, len(rest), 3):
        kps.append((float(rest[i]) * width, float(rest[i + 1]) * height, int(rest[i + 2])))
    return {"class": cls, "bbox": box, "keypoints": kps}


@dataclass(frozen=True)
class CorpusItem:
    image_id: str
    spec: GaugeSpec
    degradation: Degradation = field(default_factory=Degradation)


def random_spec(rng: np.random.Generator, seed: int, tilt_max: float = 0.0) -> GaugeSpec:
    ppc = float(rng.uniform(4.0, 5.5))
    top = int(rng.choice([150, 200, 250, 300]))
    bottom = top - 100
    waterline = round(float(rng.uniform(bottom + 15, top - 30)), 1)
    width = int(rng.integers(100, 131))
    image_w = 360
    left = int(rng.integers(60, image_w - width - 60))
    tilt = round(float(rng.uniform(-tilt_max, tilt_max)), 2) if tilt_max > 0 else 0.0
    return GaugeSpec(waterline_cm=waterline, px_per_cm=ppc, top_value_cm=top, plate_width_px=width,
                     tilt_deg=tilt, seed=seed, image_width=image_w, plate_left=left)


def random_degradation(rng: np.random.Generator, spec: GaugeSpec) -> Degradation:
    rects = ()
    if rng.uniform() < 0.4:
        x = int(rng.integers(0, spec.image_width - 60))
        y = int(rng.integers(spec.top_row, spec.waterline_row - 40)) if spec.waterline_row - 40 > spec.top_row else spec.top_row
        rects = ((x, y, x + int(rng.integers(20, 60)), y + int(rng.integers(10, 30))),)
    return Degradation(
        blur_sigma=round(float(rng.uniform(0.5, 2.0)), 2),
        noise_sigma=round(float(rng.uniform(2.0, 8.0)), 2),
        brightness_shift=round(float(rng.uniform(-30, 30)), 1),
        contrast_scale=round(float(rng.uniform(0.7, 1.1)), 3),
        occlusion_rects=rects,
    )


def make_corpus(count: int, seed: int = 0, degraded_frac: float = 0.0, tilt_max: float = 0.0) -> list[CorpusItem]:
    rng = np.random.default_rng(seed)
    items = []
    width = max(4, len(str(count)))
    for i in range(count):
        spec = random_spec(rng, seed=seed * 100003 + i, tilt_max=tilt_max)
        deg = random_degradation(rng, spec) if rng.uniform() < degraded_frac else Degradation()
        items.append(CorpusItem(f"g{i:0{width}d}", spec, deg))
    return items
