"""Per-scene quadri-plane representation.

Three positional feature planes (xy, xz, yz) plus one view-direction plane,
with the world-to-plane projections that turn a 3D point and a view direction
into decoder input features.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .nvt import read_kv, read_nvt, write_kv, write_nvt

AXIS_PAIRS = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}
POSITIONAL = ("p_xy", "p_xz", "p_yz")


@dataclass
class Bbox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if not np.all(self.hi > self.lo):
            raise ValueError(f"bbox must have positive extent per axis: {self.lo} .. {self.hi}")

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def radius(self):
        """Radius of the bounding sphere."""
        return 0.5 * float(np.linalg.norm(self.hi - self.lo))


@dataclass
class FeaturePlane:
    """N x N x C learnable grid. `extent` is the largest query coordinate:
    N-1 for a freshly initialized plane, alpha*(N-1) after super-resolution
    (the super-resolved grid samples the same domain at alpha x density)."""

    values: object  # np.ndarray or autodiff.Tensor, [N, N, C]
    extent: float

    @property
    def resolution(self):
        return self.values.shape[0]

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass
class PlaneSet:
    p_xy: FeaturePlane
    p_xz: FeaturePlane
    p_yz: FeaturePlane
    p_dir: FeaturePlane
    bbox: Bbox

    @property
    def channels(self):
        return self.p_xy.channels

    def positional(self):
        return [self.p_xy, self.p_xz, self.p_yz]

    def param_dict(self, prefix=""):
        return {
            f"{prefix}p_xy": self.p_xy.values,
            f"{prefix}p_xz": self.p_xz.values,
            f"{prefix}p_yz": self.p_yz.values,
            f"{prefix}p_dir": self.p_dir.values,
        }

    def with_values(self, values, trainable=("p_xy", "p_xz", "p_yz", "p_dir"), prefix=""):
        """Copy of this set with (possibly taped) replacement values."""
        out = self
        for name in trainable:
            plane = getattr(self, name)
            out = replace(out, **{name: replace(plane, values=values[f"{prefix}{name}"])})
        return out


def init_planes(n, n_dir, c, bbox, seed, sigma=0.1, dtype=np.float32):
    """Gaussian-initialized plane set; deterministic for a given seed."""
    if n < 2 or n_dir < 2 or c < 1:
        raise ValueError(f"invalid plane dims N={n}, N_dir={n_dir}, C={c}")
    if n_dir > n:
        raise ValueError(f"N_dir={n_dir} must not exceed N={n}")
    if not isinstance(bbox, Bbox):
        bbox = Bbox(*bbox)
    rng = np.random.default_rng(seed)

    def fresh(res):
        vals = rng.normal(0.0, sigma, size=(res, res, c)).astype(dtype)
        return FeaturePlane(vals, float(res - 1))

    return PlaneSet(fresh(n), fresh(n), fresh(n), fresh(n_dir), bbox)


def world_to_plane(bbox, pts, plane_axis, extent):
    """Project world points onto one positional plane.

    Drops the orthogonal coordinate and maps the bbox range linearly so that
    bbox-min -> 0 and bbox-max -> extent; out-of-box points clamp.
    Accepts a single point [3] or a batch [B, 3]; returns (u, v) arrays.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise ValueError("world_to_plane: non-finite point")
    a0, a1 = AXIS_PAIRS[plane_axis]
    single = pts.ndim == 1
    p = np.atleast_2d(pts)
    span = bbox.hi - bbox.lo
    u = np.clip((p[:, a0] - bbox.lo[a0]) / span[a0], 0.0, 1.0) * extent
    v = np.clip((p[:, a1] - bbox.lo[a1]) / span[a1], 0.0, 1.0) * extent
    if single:
        return float(u[0]), float(v[0])
    return u, v


def direction_to_plane(d, extent):
    """Map unit view directions to direction-plane coordinates.

    Azimuth atan2(dy, dx) in [-pi, pi] runs along the first axis, elevation
    asin(dz) in [-pi/2, pi/2] along the second; both linearly to [0, extent].
    """
    d = np.asarray(d, dtype=np.float64)
    single = d.ndim == 1
    dd = np.atleast_2d(d)
    norms = np.linalg.norm(dd, axis=1)
    if np.any(norms < 1e-9):
        raise ValueError("direction_to_plane: zero-length direction")
    if np.any(np.abs(norms - 1.0) > 1e-5):
        raise ValueError("direction_to_plane: direction must be unit length")
    theta = np.arctan2(dd[:, 1], dd[:, 0])
    phi = np.arcsin(np.clip(dd[:, 2], -1.0, 1.0))
    u = (theta + np.pi) / (2 * np.pi) * extent
    v = (phi + np.pi / 2) / np.pi * extent
    if single:
        return float(u[0]), float(v[0])
    return u, v


def query_positional(planes, pts):
    """Concatenated bilinear features from the three positional planes.

    pts: [B, 3] world points (or a single point). Returns a Tensor [B, 3C]
    (or [3C]) in the fixed order xy, xz, yz; differentiable w.r.t. the plane
    values.
    """
    single = np.asarray(pts).ndim == 1
    p = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    feats = []
    for name, axis in zip(POSITIONAL, ("xy", "xz", "yz")):
        plane = getattr(planes, name)
        u, v = world_to_plane(planes.bbox, p, axis, plane.extent)
        feats.append(ad.bilinear_gather(plane.values, u, v))
    out = ad.concat(feats, axis=1)
    if single:
        return ad.reshape(out, (out.shape[1],))
    return out


def query_direction(planes, dirs):
    """Bilinear features from the view-direction plane for unit directions."""
    single = np.asarray(dirs).ndim == 1
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    u, v = direction_to_plane(d, planes.p_dir.extent)
    out = ad.bilinear_gather(planes.p_dir.values, np.atleast_1d(u), np.atleast_1d(v))
    if single:
        return ad.reshape(out, (out.shape[1],))
    return out


def save_planes(ckpt_dir, planes):
    """Persist the four planes as NVT files plus a plain-text scene header."""
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    for name in POSITIONAL + ("p_dir",):
        plane = getattr(planes, name)
        vals = plane.values.data if isinstance(plane.values, ad.Tensor) else plane.values
        write_nvt(d / f"{name}.nvt", vals)
    header = {
        "N": planes.p_xy.resolution,
        "N_dir": planes.p_dir.resolution,
        "C": planes.channels,
        "extent": repr(planes.p_xy.extent),
        "extent_dir": repr(planes.p_dir.extent),
        "bbox_lo": " ".join(repr(x) for x in planes.bbox.lo),
        "bbox_hi": " ".join(repr(x) for x in planes.bbox.hi),
    }
    write_kv(d / "header.txt", header)


def load_planes(ckpt_dir):
    d = Path(ckpt_dir)
    hdr = read_kv(d / "header.txt")
    bbox = Bbox(np.array([float(x) for x in hdr["bbox_lo"].split()]),
                np.array([float(x) for x in hdr["bbox_hi"].split()]))
    ext = float(hdr["extent"])
    ext_dir = float(hdr["extent_dir"])
    vals = {name: read_nvt(d / f"{name}.nvt") for name in POSITIONAL + ("p_dir",)}
    return PlaneSet(
        FeaturePlane(vals["p_xy"], ext),
        FeaturePlane(vals["p_xz"], ext),
        FeaturePlane(vals["p_yz"], ext),
        FeaturePlane(vals["p_dir"], ext_dir),
        bbox,
    )
