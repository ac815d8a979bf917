"""SVG scanpath rendering."""
from __future__ import annotations

import base64
import io
from xml.sax.saxutils import escape

import numpy as np

from .imgproc import _center_index, loc_to_pixel

_COLORS = ("#e41a1c", "#ff7f00", "#4daf4a", "#377eb8", "#984ea3", "#a65628", "#f781bf", "#999999")


def _png_base64(gray: np.ndarray) -> str:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.round(np.clip(gray, 0, 1) * 255).astype(np.uint8), mode="L").save(buf, "PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def scanpath_svg(gray: np.ndarray, locations: np.ndarray, scales, title: str | None = None) -> str:
    """Overlay numbered fixation groups (one rectangle per scale) on ``gray``.

    ``locations`` is ``(T, 2)`` in normalized coordinates. Each group carries
    its exact continuous centre in ``data-row`` / ``data-col``; rectangles are
    clipped to the image.
    """
    h, w = gray.shape
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<image x="0" y="0" width="{w}" height="{h}" href="data:image/png;base64,{_png_base64(gray)}"/>',
    ]
    if title:
        parts.append(f"<title>{escape(title)}</title>")
    prev = None
    for t, loc in enumerate(np.asarray(locations).reshape(-1, 2), start=1):
        row, col = (float(v) for v in loc_to_pixel(loc, h, w))
        color = _COLORS[(t - 1) % len(_COLORS)]
        parts.append(f'<g class="fixation" id="fixation-{t}" data-step="{t}" '
                     f'data-row="{row!r}" data-col="{col!r}" stroke="{color}" fill="none">')
        r, c = _center_index(row), _center_index(col)
        for s in scales:
            top, left = max(r - s // 2, 0), max(c - s // 2, 0)
            bottom, right = min(r - s // 2 + s, h), min(c - s // 2 + s, w)
            parts.append(f'<rect class="scale-{s}" x="{left}" y="{top}" '
                         f'width="{right - left}" height="{bottom - top}" stroke-width="1"/>')
        parts.append(f'<circle cx="{col!r}" cy="{row!r}" r="2" fill="{color}"/>')
        parts.append(f'<text x="{col!r}" y="{row!r}" dx="3" dy="-3" font-size="10" '
                     f'fill="{color}" stroke="none">{t}</text>')
        parts.append("</g>")
        if prev is not None:
            parts.append(f'<line x1="{prev[1]!r}" y1="{prev[0]!r}" x2="{col!r}" y2="{row!r}" '
                         f'stroke="{color}" stroke-dasharray="2,2"/>')
        prev = (row, col)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
