"""Pinhole rays, stratified/hierarchical sampling and volume compositing.

The renderer evaluates the plane representation along camera rays and
integrates density-weighted radiance with the standard emission-absorption
quadrature: alpha_i = 1 - exp(-sigma_i * delta_i), transmittance
T_i = prod_{j<i}(1 - alpha_j), pixel = sum T_i * alpha_i * rgb_i.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .planes import direction_to_plane, query_positional
from .decoder import decode_batch
from .rng import pixel_uniforms

CHUNK = 2048  # pixels per render chunk; fixed so thread count cannot change batching


@dataclass
class Camera:
    width: int
    height: int
    focal: float
    c2w: np.ndarray  # 4x4 camera-to-world; camera looks down -z, y up

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise ValueError(f"camera transform must be 4x4, got {self.c2w.shape}")
        if self.focal <= 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        r = self.c2w[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5) or np.linalg.det(r) < 0:
            raise ValueError("camera rotation must be orthonormal with det +1")

    @property
    def rotation(self):
        return self.c2w[:3, :3]

    @property
    def origin(self):
        return self.c2w[:3, 3]

    @classmethod
    def look_at(cls, eye, target, width, height, focal, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-8:  # looking straight along up
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        upv = np.cross(right, fwd)
        c2w = np.eye(4)
        c2w[:3, 0], c2w[:3, 1], c2w[:3, 2] = right, upv, -fwd
        c2w[:3, 3] = eye
        return cls(width, height, focal, c2w)


def focal_from_fov(width, fov_x):
    return 0.5 * width / np.tan(0.5 * fov_x)


def fov_from_focal(width, focal):
    return 2.0 * np.arctan(0.5 * width / focal)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"ray direction must be unit length, |d|={n}")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError(f"need 0 <= t_near < t_far, got {self.t_near}, {self.t_far}")


@dataclass
class RaySamples:
    """Per-ray quadrature record kept for inspection and oracle traces."""

    depths: np.ndarray
    deltas: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray
    weights: np.ndarray


def generate_rays(cam, px, py, jitter=None):
    """Vectorized pinhole rays through pixel centers (+ optional sub-pixel
    jitter). Returns (origins [B,3], directions [B,3]) in world space."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    if np.any(px < 0) or np.any(px >= cam.width) or np.any(py < 0) or np.any(py >= cam.height):
        raise ValueError("pixel index outside the frame")
    jx, jy = (0.0, 0.0) if jitter is None else jitter
    x = (px + 0.5 + jx - cam.width / 2) / cam.focal
    y = -(py + 0.5 + jy - cam.height / 2) / cam.focal
    d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    d_world = d_cam @ cam.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.origin, d_world.shape).copy()
    return origins, d_world


def generate_ray(cam, px, py, jitter=None, t_near=0.0, t_far=np.inf):
    o, d = generate_rays(cam, np.asarray([px]), np.asarray([py]), jitter)
    return Ray(o[0], d[0], t_near, t_far)


def scene_ray_bounds(bbox, cameras):
    """Per-scene near/far from the bounding sphere with a 10% margin."""
    dists = [np.linalg.norm(np.asarray(c.origin) - bbox.center) for c in cameras]
    r = bbox.radius
    t_near = max((min(dists) - r) * 0.9, 1e-3)
    t_far = (max(dists) + r) * 1.1
    return float(t_near), float(t_far)


def stratified_samples(t_near, t_far, n, uniforms=None):
    """One depth per equal-width bin of [t_near, t_far].

    uniforms: [B, n] draws in [0,1) placing each sample inside its bin, or
    None for deterministic bin midpoints (returns shape [1, n]).
    """
    if n < 1:
        raise ValueError("need at least one sample")
    width = (t_far - t_near) / n
    lo = t_near + width * np.arange(n)
    if uniforms is None:
        return (lo + 0.5 * width)[None, :]
    uniforms = np.asarray(uniforms, dtype=np.float64)
    return lo[None, :] + uniforms * width


def hierarchical_resample(weights, edges, n_fine, uniforms):
    """Inverse-CDF draws from the piecewise-constant PDF given by per-bin
    weights (+ epsilon floor so all-zero weights degrade to uniform).

    weights: [B, S]; edges: [S+1] shared bin edges; uniforms: [B, n_fine].
    Returns fine depths [B, n_fine] (unsorted).
    """
    if n_fine < 1:
        raise ValueError("need at least one fine sample")
    w = np.asarray(weights, dtype=np.float64) + 1e-5
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.cumsum(pdf, axis=1)
    cdf[:, -1] = 1.0
    b, s = pdf.shape
    # flatten rows into disjoint sorted ranges so one searchsorted serves all
    offs = 2.0 * np.arange(b)[:, None]
    flat_cdf = (cdf + offs).ravel()
    u = np.asarray(uniforms, dtype=np.float64)
    idx = np.searchsorted(flat_cdf, (u + offs).ravel(), side="right")
    k = (idx - np.repeat(np.arange(b), n_fine) * s).reshape(b, n_fine)
    k = np.clip(k, 0, s - 1)
    cdf_lo = np.where(k > 0, np.take_along_axis(cdf, np.maximum(k - 1, 0), axis=1), 0.0)
    pk = np.take_along_axis(pdf, k, axis=1)
    edges = np.asarray(edges, dtype=np.float64)
    widths = edges[1:] - edges[:-1]
    frac = np.clip((u - cdf_lo) / np.maximum(pk, 1e-12), 0.0, 1.0)
    return edges[k] + frac * widths[k]


def composite(sigma, rgb, delta):
    """Emission-absorption compositing of per-sample density and radiance.

    sigma: [B,S] (Tensor or array, >= 0), rgb: [B,S,3], delta: [B,S] or [S]
    positive step sizes. Returns (pixel Tensor [B,3], weights ndarray [B,S]);
    the pixel is differentiable w.r.t. sigma and rgb.
    """
    sigma = ad.as_tensor(sigma)
    rgb = ad.as_tensor(rgb)
    sd = sigma.data
    cd = rgb.data
    delta = np.asarray(delta, dtype=sd.dtype)
    if delta.ndim == 1:
        delta = np.broadcast_to(delta, sd.shape)
    if sd.shape != delta.shape or cd.shape != sd.shape + (3,):
        raise ad.ShapeMismatch("composite", sd.shape, delta.shape, cd.shape)
    if not (np.all(np.isfinite(sd)) and np.all(np.isfinite(cd)) and np.all(np.isfinite(delta))):
        raise ValueError("composite: non-finite inputs")
    if np.any(sd < 0) or np.any(delta <= 0):
        raise ValueError("composite: need sigma >= 0 and delta > 0")

    alpha = 1.0 - np.exp(-sd * delta)
    one_minus = 1.0 - alpha
    t_incl = np.cumprod(one_minus, axis=1)            # T_{i+1}
    t_excl = np.concatenate([np.ones_like(t_incl[:, :1]), t_incl[:, :-1]], axis=1)  # T_i
    weights = t_excl * alpha
    pixel = np.einsum("bs,bsc->bc", weights, cd).astype(sd.dtype)

    tape = sigma.tape or rgb.tape
    if tape is None:
        return ad.Tensor(pixel), weights

    def backward(g):
        g_rgb = None
        if rgb.tape is not None:
            g_rgb = weights[:, :, None] * g[:, None, :]
        g_sigma = None
        if sigma.tape is not None:
            p = np.einsum("bc,bsc->bs", g, cd)        # per-sample radiance grade
            wp = weights * p
            suffix = np.flip(np.cumsum(np.flip(wp, axis=1), axis=1), axis=1) - wp
            g_sigma = delta * (t_incl * p - suffix)
        return g_sigma, g_rgb

    inputs = (sigma if sigma.tape is not None else ad._Const(sigma),
              rgb if rgb.tape is not None else ad._Const(rgb))
    pixel_t = tape.record(pixel, inputs, backward)
    return pixel_t, weights


@dataclass
class RenderSettings:
    n_coarse: int = 32
    n_fine: int = 32
    sample_mode: str = "jitter"  # or "midpoint"


def _field_eval(planes, dec, pts_flat, dirs, n_rep, use_direction=True):
    v_pos = query_positional(planes, pts_flat)
    c = planes.channels
    if use_direction:
        u, v = direction_to_plane(dirs, planes.p_dir.extent)
        v_dir = ad.bilinear_gather(planes.p_dir.values, np.repeat(u, n_rep), np.repeat(v, n_rep))
    else:
        v_dir = ad.Tensor(np.zeros((pts_flat.shape[0], c), dtype=v_pos.dtype))
    return decode_batch(dec, v_pos, v_dir)


def _eval_pass(planes, dec, origins, dirs, depths, t_far, use_direction=True):
    b, s = depths.shape
    pts = origins[:, None, :] + dirs[:, None, :] * depths[:, :, None]
    sigma_flat, rgb_flat = _field_eval(planes, dec, pts.reshape(b * s, 3), dirs, s, use_direction)
    sigma = ad.reshape(sigma_flat, (b, s))
    rgb = ad.reshape(rgb_flat, (b, s, 3))
    delta = np.concatenate([np.diff(depths, axis=1), t_far - depths[:, -1:]], axis=1)
    delta = np.maximum(delta, 1e-9)  # merged depths may coincide
    return composite(sigma, rgb, delta)


def render_rays(planes, dec_coarse, dec_fine, origins, dirs, t_near, t_far, settings,
                u_coarse=None, u_fine=None, sr_planes=None, use_direction=True,
                frozen_fine_depths=None):
    """Coarse pass, importance resampling, fine pass for a batch of rays.

    The coarse pass always queries `planes`; the fine pass queries `sr_planes`
    when given (super-resolved rendering), else `planes`. Returns
    (rgb_coarse, rgb_fine, fine_depths).
    """
    b = origins.shape[0]
    nc = settings.n_coarse
    coarse = stratified_samples(t_near, t_far, nc, u_coarse)
    if coarse.shape[0] == 1:
        coarse = np.broadcast_to(coarse, (b, nc))
    pix_c, w = _eval_pass(planes, dec_coarse, origins, dirs, coarse, t_far, use_direction)
    if frozen_fine_depths is not None:
        merged = frozen_fine_depths
    else:
        edges = np.linspace(t_near, t_far, nc + 1)
        if u_fine is None:
            u_fine = (np.arange(settings.n_fine)[None, :] + 0.5) / settings.n_fine
            u_fine = np.broadcast_to(u_fine, (b, settings.n_fine))
        fine = hierarchical_resample(w, edges, settings.n_fine, u_fine)
        merged = np.sort(np.concatenate([coarse, fine], axis=1), axis=1)
    fine_planes = sr_planes if sr_planes is not None else planes
    pix_f, _ = _eval_pass(fine_planes, dec_fine, origins, dirs, merged, t_far, use_direction)
    return pix_c, pix_f, merged


def render_pixel_lr(planes, dec_coarse, dec_fine, ray, settings=None, seed=0, px=0, py=0):
    """Single-ray coarse+fine rendering on the scene's own planes."""
    settings = settings or RenderSettings()
    o = ray.origin[None, :]
    d = ray.direction[None, :]
    uc, uf = _pixel_draws(seed, np.asarray([px]), np.asarray([py]), settings)
    pix_c, pix_f, _ = render_rays(planes, dec_coarse, dec_fine, o, d,
                                  ray.t_near, ray.t_far, settings, uc, uf)
    return pix_c.data[0], pix_f.data[0]


def render_pixel_sr(planes_sr, planes_lr, dec_coarse, dec_fine, ray, settings=None,
                    seed=0, px=0, py=0):
    """Super-resolved single-ray rendering: coarse importance pass on the LR
    planes, fine pass on the super-resolved planes (direction plane as-is)."""
    settings = settings or RenderSettings()
    o = ray.origin[None, :]
    d = ray.direction[None, :]
    uc, uf = _pixel_draws(seed, np.asarray([px]), np.asarray([py]), settings)
    _, pix_f, _ = render_rays(planes_lr, dec_coarse, dec_fine, o, d,
                              ray.t_near, ray.t_far, settings, uc, uf, sr_planes=planes_sr)
    return pix_f.data[0]


def _pixel_draws(seed, px, py, settings):
    if settings.sample_mode == "midpoint":
        return None, None
    uc = pixel_uniforms(seed, px, py, settings.n_coarse)
    uf = pixel_uniforms(seed, px, py, settings.n_fine, offset=settings.n_coarse)
    return uc, uf


def render_image(planes, dec_coarse, dec_fine, cam, t_near, t_far, settings=None,
                 mode="lr", sr_planes=None, seed=0, threads=1, use_direction=True):
    """Render a full frame -> [H, W, 3] float32 in [0, 1].

    mode "lr"/"naive-hr" renders from `planes`; mode "sr" additionally needs
    the super-resolved `sr_planes` for the fine pass. Pixels are processed in
    fixed-size chunks with per-pixel counter RNG, so output is identical for
    any thread count.
    """
    settings = settings or RenderSettings()
    if mode == "sr":
        if sr_planes is None:
            raise ValueError("mode 'sr' requires sr_planes")
    elif mode in ("lr", "naive-hr"):
        sr_planes = None
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    h, w = cam.height, cam.width
    yy, xx = np.mgrid[0:h, 0:w]
    px = xx.ravel()
    py = yy.ravel()
    out = np.zeros((h * w, 3), dtype=np.float32)

    def run_chunk(lo):
        hi = min(lo + CHUNK, h * w)
        cpx, cpy = px[lo:hi], py[lo:hi]
        o, d = generate_rays(cam, cpx, cpy)
        uc, uf = _pixel_draws(seed, cpx, cpy, settings)
        _, pix_f, _ = render_rays(planes, dec_coarse, dec_fine, o, d, t_near, t_far,
                                  settings, uc, uf, sr_planes=sr_planes,
                                  use_direction=use_direction)
        out[lo:hi] = np.clip(pix_f.data, 0.0, 1.0)

    starts = range(0, h * w, CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_chunk, starts))
    else:
        for lo in starts:
            run_chunk(lo)
    return out.reshape(h, w, 3)


def trace_ray(planes, dec, ray, depths):
    """Evaluate one ray at given depths and return the full RaySamples record
    (used by oracle-trace tests and debugging)."""
    depths = np.asarray(depths, dtype=np.float64)[None, :]
    o = ray.origin[None, :]
    d = ray.direction[None, :]
    pts = o[:, None, :] + d[:, None, :] * depths[:, :, None]
    s = depths.shape[1]
    sigma_flat, rgb_flat = _field_eval(planes, dec, pts.reshape(s, 3), d, s)
    sigma = ad.reshape(sigma_flat, (1, s))
    rgb = ad.reshape(rgb_flat, (1, s, 3))
    delta = np.concatenate([np.diff(depths, axis=1), ray.t_far - depths[:, -1:]], axis=1)
    pix, weights = composite(sigma, rgb, delta)
    return RaySamples(depths[0], delta[0], sigma.data[0], rgb.data[0], weights[0]), pix.data[0]
