"""Rotated-box geometry in the le90 convention.

Boxes are ``(cx, cy, w, h, theta)`` with ``theta`` the rotation of the
w-edge from the +x axis in radians, normalized to ``[-pi/2, pi/2)``.
RIoU is computed exactly by convex clipping (Sutherland-Hodgman) and the
shoelace formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import InvalidInputError

HALF_PI = math.pi / 2
EPS_GEOM = 1e-9

Point = tuple[float, float]


def normalize_angle(theta: float) -> float:
    """Map ``theta`` onto ``[-pi/2, pi/2)`` modulo pi."""
    if not math.isfinite(theta):
        raise InvalidInputError(f"angle must be finite, got {theta!r}")
    r = (theta + HALF_PI) % math.pi
    # tiny negative inputs round up to exactly pi under float modulo
    if r >= math.pi:
        r -= math.pi
    out = r - HALF_PI
    if out >= HALF_PI:
        out = -HALF_PI
    return out


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self) -> None:
        vals = (self.cx, self.cy, self.w, self.h, self.theta)
        try:
            vals = tuple(float(v) for v in vals)
        except (TypeError, ValueError) as exc:
            raise InvalidInputError(f"box fields must be real numbers: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError(f"box fields must be finite, got {vals}")
        if vals[2] <= 0 or vals[3] <= 0:
            raise InvalidInputError(f"box needs w > 0 and h > 0, got w={vals[2]}, h={vals[3]}")
        for name, v in zip(("cx", "cy", "w", "h"), vals):
            object.__setattr__(self, name, v)
        object.__setattr__(self, "theta", normalize_angle(vals[4]))

    @property
    def area(self) -> float:
        return self.w * self.h

    def swap90(self) -> RotatedBox:
        """Same region, described with w and h exchanged."""
        return RotatedBox(self.cx, self.cy, self.h, self.w, self.theta + HALF_PI)

    def to_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h, self.theta]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> RotatedBox:
        if isinstance(values, (str, bytes)) or len(values) != 5:
            raise InvalidInputError(f"box must have 5 elements [cx, cy, w, h, theta], got {values!r}")
        return cls(*values)


@dataclass(frozen=True)
class ConvexQuad:
    """Four corners in counter-clockwise order."""

    points: tuple[Point, Point, Point, Point]

    def __post_init__(self) -> None:
        if len(self.points) != 4:
            raise InvalidInputError("a quad needs exactly four corners")
        if signed_area(self.points) <= 0:
            raise InvalidInputError("quad corners must be counter-clockwise with positive area")
        scale = max(abs(c) for p in self.points for c in p) or 1.0
        for i in range(4):
            a, b, c = self.points[i - 1], self.points[i], self.points[(i + 1) % 4]
            turn = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
            if turn < -EPS_GEOM * scale * scale:
                raise InvalidInputError("quad is not convex")

    @property
    def area(self) -> float:
        return signed_area(self.points)


def signed_area(poly: Sequence[Point]) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def _corners(box: RotatedBox, ox: float = 0.0, oy: float = 0.0) -> tuple[Point, ...]:
    c, s = math.cos(box.theta), math.sin(box.theta)
    hw, hh = box.w / 2, box.h / 2
    x, y = box.cx - ox, box.cy - oy
    out = []
    for lx, ly in ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)):
        out.append((x + lx * c - ly * s, y + lx * s + ly * c))
    return tuple(out)


def to_polygon(box: RotatedBox) -> ConvexQuad:
    return ConvexQuad(_corners(box))


def _clip(subject: Sequence[Point], clipper: Sequence[Point]) -> list[Point]:
    out = list(subject)
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        dists = [ex * (py - ay) - ey * (px - ax) for px, py in inp]
        m = len(inp)
        for j in range(m):
            s, ds = inp[j - 1], dists[j - 1]
            e, de = inp[j], dists[j]
            if de >= 0:
                if ds < 0:
                    t = ds / (ds - de)
                    out.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
                out.append(e)
            elif ds >= 0:
                t = ds / (ds - de)
                out.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
    return out


def _quad_key(points: Sequence[Point]) -> tuple[float, ...]:
    return tuple(c for p in points for c in p)


def _intersection(pa: Sequence[Point], pb: Sequence[Point], area_a: float, area_b: float) -> float:
    # canonical argument order makes the result exactly symmetric
    if _quad_key(pa) > _quad_key(pb):
        pa, pb = pb, pa
    inter = signed_area(_clip(pa, pb))
    if inter < EPS_GEOM * (area_a + area_b):
        return 0.0
    return min(inter, area_a, area_b)


def intersection_area(a: ConvexQuad, b: ConvexQuad) -> float:
    """Area of the overlap of two convex quads (0 when disjoint)."""
    return _intersection(a.points, b.points, a.area, b.area)


def riou(a: RotatedBox, b: RotatedBox) -> float:
    """Rotated intersection over union."""
    if not (isinstance(a, RotatedBox) and isinstance(b, RotatedBox)):
        raise InvalidInputError("riou expects RotatedBox arguments")
    area_a, area_b = a.area, b.area
    # quick reject on circumscribed circles
    dx, dy = a.cx - b.cx, a.cy - b.cy
    reach = 0.5 * (math.hypot(a.w, a.h) + math.hypot(b.w, b.h))
    if dx * dx + dy * dy >= reach * reach:
        return 0.0
    # work in a frame centred between the boxes to keep coordinates small
    ox, oy = 0.5 * (a.cx + b.cx), 0.5 * (a.cy + b.cy)
    inter = _intersection(_corners(a, ox, oy), _corners(b, ox, oy), area_a, area_b)
    union = area_a + area_b - inter
    iou = inter / union
    return min(max(iou, 0.0), 1.0)


def corrected_pred_angle(pred: RotatedBox, gt: RotatedBox) -> float:
    """Predicted angle after aligning long sides with the ground truth."""
    s_p = pred.w >= pred.h
    s_g = gt.w >= gt.h
    if s_p != s_g:
        return normalize_angle(pred.theta + HALF_PI)
    return normalize_angle(pred.theta)


def angular_deviation(pred: RotatedBox, gt: RotatedBox) -> float:
    """Minimal angular difference in ``[0, pi/2]``, edge-swap aware."""
    d = abs(corrected_pred_angle(pred, gt) - gt.theta)
    return min(d, math.pi - d)


def box_from_json(value) -> RotatedBox:
    if not isinstance(value, (list, tuple)):
        raise InvalidInputError(f"box must be a 5-element array, got {value!r}")
    return RotatedBox.from_list(value)
