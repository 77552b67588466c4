"""Coarse/fine MLP decoders from point features to density and radiance.

Each decoder has two branches with identical shape but separate weights: a
density branch fed the 3C positional features, and a radiance branch fed the
4C concatenation of positional and view-direction features. The branch input
is re-concatenated onto the hidden activation every 3 layers.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .nvt import read_kv, read_nvt, write_kv, write_nvt


@dataclass
class Branch:
    weights: list   # per hidden layer, [in, W]
    biases: list    # per hidden layer, [W]
    head_w: object  # [W, out]
    head_b: object  # [out]
    skip_layers: tuple

    @property
    def in_dim(self):
        return self.weights[0].shape[0]


@dataclass
class DecoderParams:
    density: Branch   # 3C -> 1
    radiance: Branch  # 4C -> 3

    def param_dict(self, prefix=""):
        out = {}
        for bname, br in (("density", self.density), ("radiance", self.radiance)):
            for i, (w, b) in enumerate(zip(br.weights, br.biases)):
                out[f"{prefix}{bname}.w{i}"] = w
                out[f"{prefix}{bname}.b{i}"] = b
            out[f"{prefix}{bname}.head_w"] = br.head_w
            out[f"{prefix}{bname}.head_b"] = br.head_b
        return out

    def with_values(self, values, prefix=""):
        def rebuild(bname, br):
            ws = [values[f"{prefix}{bname}.w{i}"] for i in range(len(br.weights))]
            bs = [values[f"{prefix}{bname}.b{i}"] for i in range(len(br.biases))]
            return Branch(ws, bs, values[f"{prefix}{bname}.head_w"],
                          values[f"{prefix}{bname}.head_b"], br.skip_layers)

        return DecoderParams(rebuild("density", self.density), rebuild("radiance", self.radiance))


@dataclass
class PointOutput:
    sigma: float
    rgb: tuple


def _skip_layers(n_layers):
    # branch input re-injected after every 3rd hidden layer
    return tuple(i for i in range(n_layers) if i > 0 and i % 3 == 0)


def _init_branch(rng, in_dim, n_layers, width, out_dim, dtype):
    skips = _skip_layers(n_layers)
    ws, bs = [], []
    cur = in_dim
    for i in range(n_layers):
        if i in skips:
            cur += in_dim
        ws.append((rng.normal(size=(cur, width)) * np.sqrt(2.0 / cur)).astype(dtype))
        bs.append(np.zeros(width, dtype=dtype))
        cur = width
    head_w = (rng.normal(size=(cur, out_dim)) * np.sqrt(1.0 / cur)).astype(dtype)
    head_b = np.zeros(out_dim, dtype=dtype)
    return Branch(ws, bs, head_w, head_b, skips)


def init_decoder(n_layers, width, channels, seed, dtype=np.float32):
    """Fan-in Gaussian weights, zero biases; deterministic for a seed."""
    if n_layers < 1 or width < 1:
        raise ValueError(f"invalid decoder dims L={n_layers}, W={width}")
    rng = np.random.default_rng(seed)
    density = _init_branch(rng, 3 * channels, n_layers, width, 1, dtype)
    radiance = _init_branch(rng, 4 * channels, n_layers, width, 3, dtype)
    return DecoderParams(density, radiance)


def _branch_forward(branch, x):
    h = x
    for i, (w, b) in enumerate(zip(branch.weights, branch.biases)):
        if i in branch.skip_layers:
            h = ad.concat([h, x], axis=1)
        h = ad.relu(ad.linear(h, w, b))
    return ad.linear(h, branch.head_w, branch.head_b)


def decode_batch(params, v_pos, v_dir):
    """Map feature batches [B,3C], [B,C] to (sigma [B], rgb [B,3]) Tensors.

    Density never sees the view-direction features.
    """
    if v_pos.shape[1] != params.density.in_dim:
        raise ad.ShapeMismatch("decode positional width", v_pos.shape, (params.density.in_dim,))
    rad_in = ad.concat([v_pos, v_dir], axis=1)
    if rad_in.shape[1] != params.radiance.in_dim:
        raise ad.ShapeMismatch("decode radiance width", rad_in.shape, (params.radiance.in_dim,))
    sigma = ad.reshape(ad.softplus(_branch_forward(params.density, v_pos)), (v_pos.shape[0],))
    rgb = ad.sigmoid(_branch_forward(params.radiance, rad_in))
    return sigma, rgb


def decode(params, v_pos, v_dir):
    """Single-point decode returning a PointOutput."""
    vp = ad.as_tensor(v_pos) if not isinstance(v_pos, ad.Tensor) else v_pos
    vd = ad.as_tensor(v_dir) if not isinstance(v_dir, ad.Tensor) else v_dir
    sigma, rgb = decode_batch(params, ad.reshape(vp, (1, vp.size)), ad.reshape(vd, (1, vd.size)))
    return PointOutput(float(sigma.data[0]), tuple(float(x) for x in rgb.data[0]))


def save_decoder(ckpt_dir, params, name):
    d = Path(ckpt_dir) / name
    d.mkdir(parents=True, exist_ok=True)
    tensors = params.param_dict()
    manifest = {}
    for pname, arr in tensors.items():
        arr = arr.data if isinstance(arr, ad.Tensor) else arr
        write_nvt(d / f"{pname}.nvt", arr)
        manifest[pname] = " ".join(str(s) for s in arr.shape)
    manifest["layers"] = len(params.density.weights)
    manifest["skip_layers"] = " ".join(str(i) for i in params.density.skip_layers)
    write_kv(d / "manifest.txt", manifest)


def load_decoder(ckpt_dir, name):
    d = Path(ckpt_dir) / name
    mf = read_kv(d / "manifest.txt")
    n_layers = int(mf["layers"])
    skips = tuple(int(x) for x in mf["skip_layers"].split()) if mf["skip_layers"] else ()

    def load_branch(bname):
        ws = [read_nvt(d / f"{bname}.w{i}.nvt") for i in range(n_layers)]
        bs = [read_nvt(d / f"{bname}.b{i}.nvt") for i in range(n_layers)]
        return Branch(ws, bs, read_nvt(d / f"{bname}.head_w.nvt"),
                      read_nvt(d / f"{bname}.head_b.nvt"), skips)

    return DecoderParams(load_branch("density"), load_branch("radiance"))
