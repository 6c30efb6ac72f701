"""SVG rendering of one frame: occupancy, ground truth, predictions and corner ellipses."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .scenegen import Frame

CHI2_95_2D = 5.991  # 95% quantile of chi-square with 2 degrees of freedom
SCALE = 12.0  # pixels per meter


def ellipse_axes(cov: np.ndarray, chi2: float = CHI2_95_2D) -> tuple[float, float, float]:
    """Semi-axes (major, minor) and rotation in degrees of the ``chi2`` level set of a 2x2 covariance."""
    vals, vecs = np.linalg.eigh(np.asarray(cov, dtype=np.float64))
    vals = np.clip(vals, 0.0, None)
    major, minor = math.sqrt(chi2 * vals[1]), math.sqrt(chi2 * vals[0])
    angle = math.degrees(math.atan2(vecs[1, 1], vecs[0, 1]))
    return major, minor, angle


def inside_ellipse(points: np.ndarray, center: np.ndarray, cov: np.ndarray, chi2: float = CHI2_95_2D) -> np.ndarray:
    d = np.asarray(points) - center
    return np.einsum("ni,ij,nj->n", d, np.linalg.inv(cov), d) <= chi2


def corner_covariances(det) -> list[np.ndarray]:
    """Per-corner 2x2 blocks; a joint covariance contributes its diagonal blocks."""
    if det.uncertainty is None:
        return []
    cov = np.asarray(det.uncertainty.cov)
    if cov.ndim == 3:
        return list(cov)
    return [cov[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] for i in range(cov.shape[0] // 2)]


def render_svg(frame: Frame, detections: Sequence, world: tuple[float, float], cell: float) -> str:
    width, length = world
    w_px, h_px = width * SCALE, length * SCALE

    def xy(p) -> tuple[float, float]:
        return p[0] * SCALE, h_px - p[1] * SCALE

    def poly(corners, color) -> str:
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in map(xy, corners))
        return f'<polygon points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w_px:.0f}" height="{h_px:.0f}" viewBox="0 0 {w_px:.0f} {h_px:.0f}">',
        f'<rect width="{w_px:.0f}" height="{h_px:.0f}" fill="white"/>',
        '<g id="occupancy" fill="#d0d0d0">',
    ]
    rows, cols = np.nonzero(frame.fused)
    for r, c in zip(rows, cols):
        x, y = xy(((c) * cell, (r + 1) * cell))
        out.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{cell * SCALE:.2f}" height="{cell * SCALE:.2f}"/>')
    out.append("</g>")
    out.append('<g id="agents" fill="blue">')
    for p in frame.poses:
        x, y = xy(p)
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3"/>')
    out.append("</g>")
    out.append('<g id="ground-truth">')
    out.extend(poly(c, "green") for c in frame.target_corners())
    out.append("</g>")
    out.append('<g id="predictions">')
    out.extend(poly(d.corners, "red") for d in detections)
    out.append("</g>")
    out.append('<g id="ellipses">')
    for d in detections:
        for corner, cov in zip(d.corners, corner_covariances(d)):
            major, minor, angle = ellipse_axes(cov)
            x, y = xy(corner)
            # svg y points down, so the rotation flips sign
            out.append(
                f'<ellipse cx="{x:.2f}" cy="{y:.2f}" rx="{major * SCALE:.3f}" ry="{minor * SCALE:.3f}" '
                f'transform="rotate({-angle:.3f} {x:.2f} {y:.2f})" fill="none" stroke="orange" stroke-width="1"/>'
            )
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
