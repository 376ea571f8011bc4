"""Deterministic false-color rendering of scalar fields to PNG.

The palette lookup tables and the annotation glyphs are defined inline
(no font files, no plotting backend), so identical inputs produce
identical pixels on any machine; PNG bytes are stable for a given
Pillow build. Invalid or non-finite nodes render fully transparent.
"""

from __future__ import annotations

import io
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from .errors import EmptyFieldError

# piecewise-linear palette anchors: position in [0, 1] -> RGB
_PALETTE_ANCHORS = {
    "thermal": [
        (0.00, (10, 10, 35)),
        (0.35, (160, 30, 0)),
        (0.70, (255, 160, 0)),
        (1.00, (255, 255, 240)),
    ],
    "coolwarm": [
        (0.00, (59, 76, 192)),
        (0.50, (221, 221, 221)),
        (1.00, (180, 4, 38)),
    ],
    "gray": [
        (0.00, (0, 0, 0)),
        (1.00, (255, 255, 255)),
    ],
}


def palette_lut(name: str) -> np.ndarray:
    """256x3 uint8 lookup table for a named palette."""
    try:
        anchors = _PALETTE_ANCHORS[name]
    except KeyError:
        raise ValueError(
            f"unknown palette {name!r}; available: "
            f"{sorted(_PALETTE_ANCHORS)}") from None
    pos = np.array([a[0] for a in anchors])
    rgb = np.array([a[1] for a in anchors], dtype=float)
    t = np.linspace(0.0, 1.0, 256)
    lut = np.stack([np.interp(t, pos, rgb[:, k]) for k in range(3)], axis=1)
    return np.round(lut).astype(np.uint8)


# 5x7 glyphs for scale labels; rows are strings of '.'/'#'
_GLYPHS = {
    "0": ("#####", "#...#", "#..##", "#.#.#", "##..#", "#...#", "#####"),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": ("#####", "....#", "....#", "#####", "#....", "#....", "#####"),
    "3": ("#####", "....#", "....#", ".####", "....#", "....#", "#####"),
    "4": ("#...#", "#...#", "#...#", "#####", "....#", "....#", "....#"),
    "5": ("#####", "#....", "#....", "#####", "....#", "....#", "#####"),
    "6": ("#####", "#....", "#....", "#####", "#...#", "#...#", "#####"),
    "7": ("#####", "....#", "...#.", "..#..", "..#..", "..#..", "..#.."),
    "8": ("#####", "#...#", "#...#", "#####", "#...#", "#...#", "#####"),
    "9": ("#####", "#...#", "#...#", "#####", "....#", "....#", "#####"),
    "-": (".....", ".....", ".....", "#####", ".....", ".....", "....."),
    "+": (".....", "..#..", "..#..", "#####", "..#..", "..#..", "....."),
    ".": (".....", ".....", ".....", ".....", ".....", ".##..", ".##.."),
    "e": (".....", ".....", ".###.", "#...#", "#####", "#....", ".###."),
    " ": (".....", ".....", ".....", ".....", ".....", ".....", "....."),
}
_GLYPH_H = 7
_GLYPH_W = 5


def _draw_text(canvas: np.ndarray, x: int, y: int, text: str) -> int:
    """Stamp ``text`` in black at (x, y); returns the x just past it."""
    for ch in text:
        glyph = _GLYPHS.get(ch, _GLYPHS[" "])
        for r, row in enumerate(glyph):
            for c, bit in enumerate(row):
                if bit == "#" and 0 <= y + r < canvas.shape[0] \
                        and 0 <= x + c < canvas.shape[1]:
                    canvas[y + r, x + c] = (0, 0, 0, 255)
        x += _GLYPH_W + 1
    return x


def _text_width(text: str) -> int:
    return len(text) * (_GLYPH_W + 1) - 1 if text else 0


def _format_value(v: float) -> str:
    return np.format_float_scientific(v, precision=3, trim="-") \
        if (v != 0 and (abs(v) >= 1e4 or abs(v) < 1e-3)) \
        else np.format_float_positional(v, precision=4, trim="-")


def render_map(field: np.ndarray,
               v_range: Optional[Tuple[float, float]] = None,
               palette: str = "thermal",
               valid: Optional[np.ndarray] = None,
               upscale: int = 8) -> bytes:
    """False-color PNG of a scalar grid with an embedded scale bar.

    Nodes are painted by mapping ``v_range`` (default: data range over
    the usable nodes) linearly onto the palette, then magnified
    ``upscale`` times (nearest-neighbor, so node boundaries stay crisp).
    Invalid or non-finite nodes are transparent. A constant field (or
    degenerate range) maps to the palette midpoint. Below the map: the
    palette ramp with the range endpoints printed under it.

    Returns the encoded PNG bytes.

    Raises:
        EmptyFieldError: no valid finite node to render.
        ValueError: unknown palette, bad upscale, or non-2D field.
    """
    data = np.asarray(field, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"field must be 2D, got ndim={data.ndim}")
    if upscale < 1:
        raise ValueError(f"upscale must be >= 1, got {upscale}")
    lut = palette_lut(palette)
    usable = np.isfinite(data)
    if valid is not None:
        usable &= np.asarray(valid, dtype=bool)
    if not usable.any():
        raise EmptyFieldError("no valid finite node to render")

    if v_range is None:
        vmin = float(data[usable].min())
        vmax = float(data[usable].max())
    else:
        vmin, vmax = float(v_range[0]), float(v_range[1])
        if not (np.isfinite(vmin) and np.isfinite(vmax)) or vmax < vmin:
            raise ValueError(f"bad range ({vmin}, {vmax})")

    if vmax > vmin:
        t = (data - vmin) / (vmax - vmin)
    else:
        t = np.full_like(data, 0.5)
    idx = np.clip(np.round(np.where(usable, t, 0.0) * 255), 0, 255)
    rgba = np.zeros(data.shape + (4,), dtype=np.uint8)
    rgba[..., :3] = lut[idx.astype(np.uint8)]
    rgba[..., 3] = np.where(usable, 255, 0)
    rgba = np.repeat(np.repeat(rgba, upscale, axis=0), upscale, axis=1)

    # annotation strip: palette ramp plus range labels
    lo_text = _format_value(vmin)
    hi_text = _format_value(vmax)
    map_h, map_w = rgba.shape[:2]
    width = max(map_w, _text_width(lo_text) + _text_width(hi_text) + 12)
    bar_h, pad = 10, 3
    strip_h = pad + bar_h + pad + _GLYPH_H + pad
    canvas = np.zeros((map_h + strip_h, width, 4), dtype=np.uint8)
    canvas[:map_h, :map_w] = rgba
    strip = canvas[map_h:]
    strip[...] = (255, 255, 255, 255)
    ramp = lut[np.clip((np.arange(width) * 256) // max(width, 1), 0, 255)]
    strip[pad:pad + bar_h, :, :3] = ramp[None, :, :]
    y_text = pad + bar_h + pad
    _draw_text(strip, 1, y_text, lo_text)
    _draw_text(strip, width - _text_width(hi_text) - 1, y_text, hi_text)

    buf = io.BytesIO()
    Image.fromarray(canvas, mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()
