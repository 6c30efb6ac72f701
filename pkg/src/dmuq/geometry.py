"""Convex quadrilateral intersection-over-union by polygon clipping."""
from __future__ import annotations

import numpy as np

from .errors import GeometryError

MIN_AREA = 1e-12


def signed_area(poly) -> float:
    n = len(poly)
    total = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        total += x0 * y1 - x1 * y0
    return 0.5 * total


def convex_hull(points) -> list[tuple[float, float]]:
    """Counterclockwise hull (Andrew's monotone chain); collinear points dropped."""
    pts = sorted(map(tuple, points))
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[tuple] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _as_convex(quad) -> list[tuple[float, float]]:
    q = np.asarray(quad, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != 2 or not np.all(np.isfinite(q)):
        raise GeometryError(f"expected finite (n, 2) vertices, got shape {q.shape}")
    hull = convex_hull(q.tolist())
    if len(hull) < 3 or signed_area(hull) <= MIN_AREA:
        raise GeometryError("quadrilateral has zero area")
    return hull


def clip_convex(subject, clipper) -> list[tuple[float, float]]:
    """Sutherland-Hodgman: part of ``subject`` inside the CCW convex ``clipper``."""
    out = list(map(tuple, subject))
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        for j in range(len(inp)):
            px, py = inp[j - 1]
            qx, qy = inp[j]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sq >= 0:
                if sp < 0:
                    t = sp / (sp - sq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif sp >= 0:
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def quad_iou(a, b) -> float:
    """IoU of two convex quadrilaterals given as (4, 2) corner arrays.

    Vertex order does not matter; non-convex input is replaced by its hull.
    """
    pa, pb = _as_convex(a), _as_convex(b)
    ax, ay = zip(*pa)
    bx, by = zip(*pb)
    if max(ax) <= min(bx) or max(bx) <= min(ax) or max(ay) <= min(by) or max(by) <= min(ay):
        return 0.0
    area_a, area_b = signed_area(pa), signed_area(pb)
    inter_poly = clip_convex(pa, pb)
    inter = signed_area(inter_poly) if len(inter_poly) >= 3 else 0.0
    inter = min(max(inter, 0.0), area_a, area_b)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0))


def safe_quad_iou(a, b) -> float:
    """quad_iou that scores degenerate predictions as non-overlapping."""
    try:
        return quad_iou(a, b)
    except GeometryError:
        return 0.0


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if not len(boxes_a) or not len(boxes_b):
        return out
    ca = np.array([np.mean(q, axis=0) for q in boxes_a])
    cb = np.array([np.mean(q, axis=0) for q in boxes_b])
    ra = np.array([np.max(np.linalg.norm(np.asarray(q) - c, axis=1)) for q, c in zip(boxes_a, ca)])
    rb = np.array([np.max(np.linalg.norm(np.asarray(q) - c, axis=1)) for q, c in zip(boxes_b, cb)])
    near = np.linalg.norm(ca[:, None, :] - cb[None, :, :], axis=2) < ra[:, None] + rb[None, :]
    for i, j in zip(*np.nonzero(near)):
        out[i, j] = safe_quad_iou(boxes_a[i], boxes_b[j])
    return out
