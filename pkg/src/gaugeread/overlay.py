"""Debug overlays: detected Hough segments and the chosen waterline."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from gaugeread.deskew import LineSegment
from gaugeread.raster import Raster
from gaugeread.waterline import WaterlineResult

RED = (230, 30, 30)
GREEN = (40, 220, 60)
YELLOW = (250, 210, 40)


def _rgb(img: Raster) -> Image.Image:
    data = img.data if img.channels == 3 else np.repeat(img.data[:, :, None], 3, axis=2)
    return Image.fromarray(np.ascontiguousarray(data), mode="RGB")


def segments_overlay(img: Raster, segments: list[LineSegment], min_len: float = 150.0) -> Raster:
    """Qualifying segments in green, shorter ones in yellow."""
    im = _rgb(img)
    draw = ImageDraw.Draw(im)
    for s in segments:
        color = GREEN if s.length > min_len else YELLOW
        draw.line([(s.x1, s.y1), (s.x2, s.y2)], fill=color, width=2)
    return Raster(np.asarray(im))


def waterline_overlay(img: Raster, result: WaterlineResult) -> Raster:
    """Red line across the detected row with the confidence written in green."""
    im = _rgb(img)
    draw = ImageDraw.Draw(im)
    draw.line([(0, result.row), (im.width - 1, result.row)], fill=RED, width=1)
    label = f"conf {result.confidence:.2f}" + ("" if result.accepted else " rejected")
    draw.text((4, max(result.row - 14, 0)), label, fill=GREEN)
    return Raster(np.asarray(im))
