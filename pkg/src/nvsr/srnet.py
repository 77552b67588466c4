"""Learned plane super-resolution: a residual conv net with pixel-shuffle
upsampling, applied independently to each positional feature plane.

The direction plane and bounding box pass through untouched. A super-resolved
plane keeps the query extent alpha*(N-1): it samples the same world domain at
alpha x density, so exact upsampling reproduces the original interpolant (see
refine_upsample_planes).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .nvt import read_kv, read_nvt, write_kv, write_nvt
from .planes import FeaturePlane, PlaneSet, POSITIONAL


def _shuffle_factors(alpha):
    if alpha < 1 or int(alpha) != alpha:
        raise ValueError(f"unrealizable SR factor {alpha}")
    alpha = int(alpha)
    factors = []
    rest = alpha
    while rest % 2 == 0:
        factors.append(2)
        rest //= 2
    while rest % 3 == 0:
        factors.append(3)
        rest //= 3
    if rest != 1:
        raise ValueError(f"unrealizable SR factor {alpha}: needs shuffle stages of 2 or 3")
    return factors


@dataclass
class SrNetParams:
    channels: int
    width: int
    alpha: int
    head_w: object
    head_b: object
    blocks: list      # (w1, b1, w2, b2) per residual block
    up_stages: list   # (w, b, r) per pixel-shuffle stage
    tail_w: object
    tail_b: object

    def param_dict(self, prefix=""):
        out = {f"{prefix}head_w": self.head_w, f"{prefix}head_b": self.head_b,
               f"{prefix}tail_w": self.tail_w, f"{prefix}tail_b": self.tail_b}
        for i, (w1, b1, w2, b2) in enumerate(self.blocks):
            out.update({f"{prefix}block{i}.w1": w1, f"{prefix}block{i}.b1": b1,
                        f"{prefix}block{i}.w2": w2, f"{prefix}block{i}.b2": b2})
        for i, (w, b, _) in enumerate(self.up_stages):
            out.update({f"{prefix}up{i}.w": w, f"{prefix}up{i}.b": b})
        return out

    def with_values(self, values, prefix=""):
        blocks = [(values[f"{prefix}block{i}.w1"], values[f"{prefix}block{i}.b1"],
                   values[f"{prefix}block{i}.w2"], values[f"{prefix}block{i}.b2"])
                  for i in range(len(self.blocks))]
        ups = [(values[f"{prefix}up{i}.w"], values[f"{prefix}up{i}.b"], r)
               for i, (_, _, r) in enumerate(self.up_stages)]
        return replace(self, head_w=values[f"{prefix}head_w"], head_b=values[f"{prefix}head_b"],
                       blocks=blocks, up_stages=ups,
                       tail_w=values[f"{prefix}tail_w"], tail_b=values[f"{prefix}tail_b"])


def init_sr(n_blocks, width, channels, alpha, seed, dtype=np.float32):
    """Fan-in Gaussian conv weights, zero biases; the second conv of each
    residual block is scaled by 0.1 so early updates stay bounded."""
    factors = _shuffle_factors(alpha)
    rng = np.random.default_rng(seed)

    def conv(cout, cin, k=3, gain=1.0):
        w = rng.normal(size=(cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k)) * gain
        return w.astype(dtype), np.zeros(cout, dtype=dtype)

    head_w, head_b = conv(width, channels)
    blocks = []
    for _ in range(n_blocks):
        w1, b1 = conv(width, width)
        w2, b2 = conv(width, width, gain=0.1)
        blocks.append((w1, b1, w2, b2))
    ups = []
    for r in factors:
        w, b = conv(width * r * r, width)
        ups.append((w, b, r))
    tail_w, tail_b = conv(channels, width)
    return SrNetParams(channels, width, int(alpha), head_w, head_b, blocks, ups, tail_w, tail_b)


def sr_forward(params, plane_chw):
    """Run the SR net on one plane in [C, N, N] layout -> [C, aN, aN]."""
    h = ad.conv2d(plane_chw, params.head_w, params.head_b)
    body = h
    for w1, b1, w2, b2 in params.blocks:
        inner = ad.conv2d(ad.relu(ad.conv2d(body, w1, b1)), w2, b2)
        body = ad.add(body, inner)
    body = ad.add(body, h)  # global skip
    for w, b, r in params.up_stages:
        body = ad.pixel_shuffle_upsample(ad.conv2d(body, w, b), r)
    return ad.conv2d(body, params.tail_w, params.tail_b)


def super_resolve_planes(params, planes):
    """Map each positional plane through the shared SR net; the direction
    plane and bbox are returned untouched."""
    if planes.channels != params.channels:
        raise ad.ShapeMismatch("super_resolve_planes channels",
                               (planes.channels,), (params.channels,))
    out = {}
    for name in POSITIONAL:
        plane = getattr(planes, name)
        chw = ad.transpose(plane.values if isinstance(plane.values, ad.Tensor)
                           else ad.Tensor(plane.values), (2, 0, 1))
        sr = ad.transpose(sr_forward(params, chw), (1, 2, 0))
        out[name] = FeaturePlane(sr, params.alpha * plane.extent)
    return PlaneSet(out["p_xy"], out["p_xz"], out["p_yz"], planes.p_dir, planes.bbox)


def _plane_array(plane):
    v = plane.values
    return v.data if isinstance(v, ad.Tensor) else v


def nearest_upsample_planes(planes, alpha):
    """Block nearest-neighbor upsampling of the positional planes (a drop-in
    stand-in for the SR net in equivalence tests)."""
    alpha = int(alpha)
    out = {}
    for name in POSITIONAL:
        plane = getattr(planes, name)
        vals = np.repeat(np.repeat(_plane_array(plane), alpha, axis=0), alpha, axis=1)
        out[name] = FeaturePlane(vals, alpha * plane.extent)
    return PlaneSet(out["p_xy"], out["p_xz"], out["p_yz"], planes.p_dir, planes.bbox)


def refine_upsample_planes(planes, alpha):
    """Exact alpha x refinement: node j of the output holds the input's
    bilinear interpolant at j/alpha, so sampling the output at alpha*u
    reproduces sampling the input at u exactly."""
    alpha = int(alpha)
    out = {}
    for name in POSITIONAL:
        plane = getattr(planes, name)
        vals = _plane_array(plane)
        n = vals.shape[0]
        m = alpha * n
        coords = np.minimum(np.arange(m) / alpha, n - 1.0)
        uu, vv = np.meshgrid(coords, coords, indexing="ij")
        sampled = ad.bilinear_gather(ad.Tensor(vals), uu.ravel(), vv.ravel())
        out[name] = FeaturePlane(sampled.data.reshape(m, m, vals.shape[2]).astype(vals.dtype),
                                 alpha * plane.extent)
    return PlaneSet(out["p_xy"], out["p_xz"], out["p_yz"], planes.p_dir, planes.bbox)


def save_sr(ckpt_dir, params):
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"channels": params.channels, "width": params.width,
                "alpha": params.alpha, "blocks": len(params.blocks),
                "stages": " ".join(str(r) for _, _, r in params.up_stages)}
    for pname, arr in params.param_dict().items():
        arr = arr.data if isinstance(arr, ad.Tensor) else arr
        write_nvt(d / f"{pname}.nvt", arr)
    write_kv(d / "manifest.txt", manifest)


def load_sr(ckpt_dir):
    d = Path(ckpt_dir)
    mf = read_kv(d / "manifest.txt")
    n_blocks = int(mf["blocks"])
    stages = [int(x) for x in mf["stages"].split()]
    blocks = [(read_nvt(d / f"block{i}.w1.nvt"), read_nvt(d / f"block{i}.b1.nvt"),
               read_nvt(d / f"block{i}.w2.nvt"), read_nvt(d / f"block{i}.b2.nvt"))
              for i in range(n_blocks)]
    ups = [(read_nvt(d / f"up{i}.w.nvt"), read_nvt(d / f"up{i}.b.nvt"), r)
           for i, r in enumerate(stages)]
    return SrNetParams(int(mf["channels"]), int(mf["width"]), int(mf["alpha"]),
                       read_nvt(d / "head_w.nvt"), read_nvt(d / "head_b.nvt"),
                       blocks, ups, read_nvt(d / "tail_w.nvt"), read_nvt(d / "tail_b.nvt"))
