"""Closed-loop track geometry and its CSV point-list format."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class TrackGeometry:
    """Inner/outer boundary and centerline as (n, 2) point arrays.

    Polylines are implicitly closed: the last point connects to the first.
    """

    inner_boundary: np.ndarray
    outer_boundary: np.ndarray
    centerline: np.ndarray

    def segments(self) -> np.ndarray:
        """All boundary segments as an (n, 2, 2) array of endpoints."""
        segs = []
        for poly in (self.inner_boundary, self.outer_boundary):
            segs.append(np.stack([poly, np.roll(poly, -1, axis=0)], axis=1))
        return np.concatenate(segs, axis=0)

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["curve", "index", "x", "y"])
            for name, pts in (("inner", self.inner_boundary), ("outer", self.outer_boundary),
                              ("center", self.centerline)):
                for i, (px, py) in enumerate(pts):
                    writer.writerow([name, i, repr(float(px)), repr(float(py))])

    @classmethod
    def from_csv(cls, path) -> "TrackGeometry":
        curves = {"inner": [], "outer": [], "center": []}
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                curves[row["curve"]].append((float(row["x"]), float(row["y"])))
        return cls(*(np.array(curves[k]) for k in ("inner", "outer", "center")))


def _ellipse_with_normals(a: float, b: float, n: int):
    t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    pts = np.stack([a * np.cos(t), b * np.sin(t)], axis=1)
    normals = np.stack([b * np.cos(t), a * np.sin(t)], axis=1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return pts, normals


def offset_ellipse(semi_major: float, semi_minor: float, width: float, n_points: int):
    """Constant-width boundaries around an elliptical centerline (a raw survey)."""
    half = 0.5 * width
    if half >= semi_minor ** 2 / semi_major:
        raise ValueError("track too wide: inner boundary would self-intersect")
    center, normals = _ellipse_with_normals(semi_major, semi_minor, n_points)
    return TrackGeometry(center - half * normals, center + half * normals, center)


def _radial_level_set(grid: np.ndarray, level: float, angles: np.ndarray, r_max: float) -> np.ndarray:
    """Radius along each ray from the origin where the polynomial crosses ``level``."""
    from numpy.polynomial import polynomial as npoly

    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    radii = np.linspace(1e-3, r_max, 4000)
    vals = npoly.polyval2d(radii[None, :] * dirs[:, :1], radii[None, :] * dirs[:, 1:], grid) - level
    flips = np.diff(np.sign(vals), axis=1) != 0
    if not np.all(flips.sum(axis=1) == 1):
        raise ValueError(f"level set {level} is not star-shaped about the origin")
    k = np.argmax(flips, axis=1)
    lo, hi = radii[k], radii[k + 1]
    f_lo = vals[np.arange(len(angles)), k]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        f_mid = npoly.polyval2d(mid * dirs[:, 0], mid * dirs[:, 1], grid) - level
        same = np.sign(f_mid) == np.sign(f_lo)
        lo = np.where(same, mid, lo)
        f_lo = np.where(same, f_mid, f_lo)
        hi = np.where(same, hi, mid)
    return 0.5 * (lo + hi)


def elliptical_track(semi_major: float = 13.0, semi_minor: float = 8.0,
                     width: float = 3.0, n_points: int = 400) -> TrackGeometry:
    """Elliptical track whose boundaries are level sets of a bicubic polynomial.

    A constant-width survey is regressed onto the 16-term bicubic (inner -1,
    outer +1), and the ``-1``, ``0`` and ``+1`` level sets of that polynomial,
    traced along ``n_points`` rays from the origin, become the inner
    boundary, centerline and outer boundary. Samples sharing an index lie on
    the same ray. The width comes out near ``width`` but not exactly constant.
    """
    from ..cost import fit_track_model

    survey = offset_ellipse(semi_major, semi_minor, width, n_points)
    grid = fit_track_model(survey.inner_boundary, survey.outer_boundary).coeff_grid
    angles = np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    r_max = 2.0 * (semi_major + width)
    curves = [_radial_level_set(grid, lv, angles, r_max)[:, None] * dirs for lv in (-1.0, 1.0, 0.0)]
    return TrackGeometry(*curves)


def circular_track(radius: float = 10.0, width: float = 3.0, n_points: int = 720) -> TrackGeometry:
    """Concentric-circle test track; mirror-symmetric about the radial line through each sample."""
    angles = np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    half = 0.5 * width
    return TrackGeometry((radius - half) * dirs, (radius + half) * dirs, radius * dirs)


def centerline_frame(track: TrackGeometry, index: int):
    """Position and counter-clockwise tangent heading at a centerline sample."""
    c = track.centerline
    p = c[index % len(c)]
    d = c[(index + 1) % len(c)] - c[(index - 1) % len(c)]
    return p, float(np.arctan2(d[1], d[0]))
