"""Analytic ground-truth scenes: sphere/box ray tracing with directional
lighting, plus exact optical flow between camera pairs by reprojection.

The specular term is the only view-dependent effect; it is what gives the
view-direction feature plane something to learn, while its absence makes a
scene purely Lambertian for control experiments.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .planes import Bbox

SPECULAR_EXPONENT = 16


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray
    specular: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)

    def intersect(self, origins, dirs):
        oc = origins - self.center
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - c
        hit = disc > 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-6, t0, t1)
        hit &= t > 1e-6
        return np.where(hit, t, np.inf)

    def normal(self, pts):
        n = pts - self.center
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray
    specular: float = 0.0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)

    def intersect(self, origins, dirs):
        # slab test; zero direction components handled via +/- inf
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t_lo = (self.lo - origins) * inv
            t_hi = (self.hi - origins) * inv
        t1 = np.fmin(t_lo, t_hi)
        t2 = np.fmax(t_lo, t_hi)
        t_in = np.max(t1, axis=1)
        t_out = np.min(t2, axis=1)
        hit = (t_in <= t_out) & (t_out > 1e-6)
        t = np.where(t_in > 1e-6, t_in, t_out)
        return np.where(hit & (t > 1e-6), t, np.inf)

    def normal(self, pts):
        # face whose plane the point lies on (largest normalized excursion)
        center = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        rel = (pts - center) / half
        n = np.zeros_like(rel)
        idx = np.argmax(np.abs(rel), axis=1)
        n[np.arange(len(pts)), idx] = np.sign(rel[np.arange(len(pts)), idx])
        return n


@dataclass
class SceneSpec:
    primitives: list
    light_dir: np.ndarray          # unit vector from surface toward the light
    light_intensity: float = 1.0
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bbox: Bbox = field(default_factory=lambda: Bbox(np.full(3, -1.0), np.full(3, 1.0)))

    def __post_init__(self):
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)
        self.background = np.asarray(self.background, dtype=np.float64)


def intersect_scene(scene, origins, dirs):
    """Nearest hit over all primitives. Returns (t, prim_index) with t=inf
    and index -1 on miss."""
    best_t = np.full(len(origins), np.inf)
    best_i = np.full(len(origins), -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        t = prim.intersect(origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)
    return best_t, best_i


def shade(scene, origins, dirs, t, prim_idx):
    """Directional-light shading: albedo * max(0, n.l) plus a white specular
    lobe specular * max(0, r.v)^16 toward the viewer."""
    out = np.tile(scene.background, (len(origins), 1))
    hit = prim_idx >= 0
    if not np.any(hit):
        return out
    pts = origins[hit] + dirs[hit] * t[hit, None]
    l = scene.light_dir
    v = -dirs[hit]
    for i, prim in enumerate(scene.primitives):
        sel = prim_idx[hit] == i
        if not np.any(sel):
            continue
        n = prim.normal(pts[sel])
        ndl = np.maximum(n @ l, 0.0)
        color = prim.albedo[None, :] * (scene.light_intensity * ndl)[:, None]
        if prim.specular > 0:
            r = 2.0 * ndl[:, None] * n - l[None, :]
            rdv = np.maximum(np.einsum("ij,ij->i", r, v[sel]), 0.0)
            color = color + prim.specular * scene.light_intensity * (rdv ** SPECULAR_EXPONENT)[:, None]
        rows = np.where(hit)[0][sel]
        out[rows] = color
    return np.clip(out, 0.0, 1.0)


def oracle_render(scene, cam):
    """Ray-trace a full frame -> [H, W, 3] float32 in [0, 1]."""
    from .renderer import generate_rays

    yy, xx = np.mgrid[0:cam.height, 0:cam.width]
    origins, dirs = generate_rays(cam, xx.ravel(), yy.ravel())
    t, idx = intersect_scene(scene, origins, dirs)
    img = shade(scene, origins, dirs, t, idx)
    return img.reshape(cam.height, cam.width, 3).astype(np.float32)


def _project(cam, pts):
    """World points -> continuous pixel indices (px, py) and camera depth."""
    rel = pts - cam.origin
    xc = rel @ cam.rotation  # camera coordinates (columns are camera axes)
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = cam.focal * (xc[:, 0] / -z) + cam.width / 2 - 0.5
        py = cam.height / 2 - 0.5 - cam.focal * (xc[:, 1] / -z)
    return px, py, z


def oracle_flow(scene, cam_a, cam_b):
    """Exact flow between two views of the scene.

    Returns (forward, backward): forward lives on cam_a's grid and maps its
    pixels into cam_b; backward lives on cam_b's grid and maps into cam_a.
    Rays that miss the scene (or land behind the other camera) get a large
    sentinel displacement that always falls outside the frame, so those
    pixels end up masked.
    """

    def flow_between(src, dst):
        yy, xx = np.mgrid[0:src.height, 0:src.width]
        px = xx.ravel().astype(np.float64)
        py = yy.ravel().astype(np.float64)
        origins, dirs = generate_rays_local(src, px, py)
        t, idx = intersect_scene(scene, origins, dirs)
        hit = idx >= 0
        pts = origins + dirs * np.where(hit, t, 1.0)[:, None]
        qx, qy, z = _project(dst, pts)
        ok = hit & (z < 0)
        sentinel = 4.0 * max(src.width, src.height, dst.width, dst.height)
        fx = np.where(ok, qx - px, sentinel)
        fy = np.where(ok, qy - py, sentinel)
        return np.stack([fx, fy], axis=-1).reshape(src.height, src.width, 2).astype(np.float32)

    from .renderer import generate_rays as generate_rays_local  # local import avoids cycle

    return flow_between(cam_a, cam_b), flow_between(cam_b, cam_a)


def _prim_to_json(p):
    if isinstance(p, Sphere):
        return {"type": "sphere", "center": list(p.center), "radius": p.radius,
                "albedo": list(p.albedo), "specular": p.specular}
    return {"type": "box", "lo": list(p.lo), "hi": list(p.hi),
            "albedo": list(p.albedo), "specular": p.specular}


def save_scene(path, scene):
    doc = {
        "primitives": [_prim_to_json(p) for p in scene.primitives],
        "light_dir": list(scene.light_dir),
        "light_intensity": scene.light_intensity,
        "background": list(scene.background),
        "bbox_lo": list(scene.bbox.lo),
        "bbox_hi": list(scene.bbox.hi),
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_scene(path):
    doc = json.loads(Path(path).read_text())
    prims = []
    for p in doc["primitives"]:
        if p["type"] == "sphere":
            prims.append(Sphere(p["center"], p["radius"], p["albedo"], p.get("specular", 0.0)))
        elif p["type"] == "box":
            prims.append(Box(p["lo"], p["hi"], p["albedo"], p.get("specular", 0.0)))
        else:
            raise ValueError(f"unknown primitive type {p['type']!r}")
    return SceneSpec(prims, doc["light_dir"], doc.get("light_intensity", 1.0),
                     doc.get("background", [0, 0, 0]),
                     Bbox(np.asarray(doc["bbox_lo"]), np.asarray(doc["bbox_hi"])))


_LIGHT = (0.35, -0.25, 0.9)


def preset_scene(name):
    """Built-in oracle scenes. 'specular' and 'lambertian' share geometry and
    differ only in the specular coefficients."""
    if name == "primary":
        prims = [
            Sphere((-0.35, 0.1, -0.25), 0.42, (0.85, 0.30, 0.25), specular=0.3),
            Sphere((0.45, -0.3, 0.05), 0.3, (0.25, 0.45, 0.85), specular=0.3),
            Box((-0.1, 0.25, -0.65), (0.6, 0.75, 0.1), (0.75, 0.7, 0.3), specular=0.15),
        ]
    elif name in ("specular", "lambertian"):
        s = 0.8 if name == "specular" else 0.0
        s2 = 0.5 if name == "specular" else 0.0
        prims = [
            Sphere((0.0, 0.0, 0.05), 0.48, (0.35, 0.4, 0.75), specular=s),
            Sphere((-0.5, -0.35, -0.35), 0.25, (0.8, 0.35, 0.3), specular=s2),
            Box((0.25, -0.7, -0.55), (0.75, -0.2, -0.05), (0.7, 0.65, 0.3), specular=0.0),
        ]
    elif name == "variant-a":
        prims = [
            Sphere((0.3, 0.35, 0.2), 0.38, (0.3, 0.75, 0.4), specular=0.35),
            Box((-0.7, -0.6, -0.6), (-0.1, 0.1, 0.0), (0.8, 0.5, 0.25), specular=0.1),
            Sphere((0.1, -0.45, -0.3), 0.28, (0.75, 0.75, 0.75), specular=0.4),
        ]
    elif name == "variant-b":
        prims = [
            Box((0.05, 0.05, -0.5), (0.7, 0.7, 0.3), (0.3, 0.45, 0.8), specular=0.2),
            Sphere((-0.4, -0.15, 0.2), 0.35, (0.85, 0.65, 0.3), specular=0.35),
            Sphere((-0.25, 0.5, -0.45), 0.22, (0.55, 0.3, 0.7), specular=0.25),
        ]
    else:
        raise ValueError(f"unknown scene preset {name!r}")
    return SceneSpec(prims, _LIGHT)
