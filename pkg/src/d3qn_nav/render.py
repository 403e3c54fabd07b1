"""SVG drawings of a world and a robot trajectory.

Output is a pure function of its inputs: coordinates are printed with a fixed
number of decimals and elements are emitted in obstacle order, so identical
inputs give byte-identical files.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union

from .errors import UsageError
from .geom_sim import Box, Disc, Segment, WorldMap

SCALE = 60.0  # pixels per meter
MARGIN = 20.0


def _f(v: float) -> str:
    s = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def render_trajectory(world: WorldMap, poses: Sequence[Sequence[float]], title: str = "") -> str:
    """Return an SVG document with obstacles, the path polyline and start/end markers.

    ``poses`` is a sequence of ``(x, y, theta)``; every pose becomes one
    polyline vertex.
    """
    if len(poses) == 0:
        raise UsageError("pose log is empty; nothing to render")
    x0, y0, x1, y1 = world.bounds
    width = (x1 - x0) * SCALE + 2 * MARGIN
    height = (y1 - y0) * SCALE + 2 * MARGIN

    def px(x, y):
        # flip y so the world's "up" is up on screen
        return _f((x - x0) * SCALE + MARGIN), _f((y1 - y) * SCALE + MARGIN)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
        f'viewBox="0 0 {_f(width)} {_f(height)}">',
    ]
    if title:
        esc = title.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        out.append(f"<title>{esc}</title>")
    out.append(f'<rect x="0" y="0" width="{_f(width)}" height="{_f(height)}" fill="white"/>')
    out.append('<g id="obstacles" fill="#888" stroke="#333" stroke-width="2">')
    for shape in world.obstacles:
        if isinstance(shape, Segment):
            (ax, ay), (bx, by) = px(*shape.a), px(*shape.b)
            out.append(f'<line x1="{ax}" y1="{ay}" x2="{bx}" y2="{by}"/>')
        elif isinstance(shape, Box):
            lx, ty = px(shape.lo[0], shape.hi[1])
            w, h = (shape.hi[0] - shape.lo[0]) * SCALE, (shape.hi[1] - shape.lo[1]) * SCALE
            out.append(f'<rect x="{lx}" y="{ty}" width="{_f(w)}" height="{_f(h)}"/>')
        elif isinstance(shape, Disc):
            cx, cy = px(*shape.center)
            out.append(f'<circle cx="{cx}" cy="{cy}" r="{_f(shape.radius * SCALE)}"/>')
    out.append("</g>")

    pts = " ".join(",".join(px(p[0], p[1])) for p in poses)
    out.append(f'<polyline id="path" fill="none" stroke="#1f77b4" stroke-width="2" points="{pts}"/>')
    sx, sy = px(poses[0][0], poses[0][1])
    ex, ey = px(poses[-1][0], poses[-1][1])
    out.append(f'<circle id="start" cx="{sx}" cy="{sy}" r="5" fill="#2ca02c"/>')
    out.append(f'<circle id="end" cx="{ex}" cy="{ey}" r="5" fill="#d62728"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: Union[str, Path], document: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(document)
    tmp.replace(path)
    return path
