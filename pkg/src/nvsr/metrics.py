"""Reconstruction metrics and the across-view inconsistency (AVI) score.

AVI for a pair of adjacent views k, k+1: warp frame k onto frame k+1 with the
backward flow, take the per-pixel L2 norm across color channels, mask out
pixels with no forward-flow correspondence (count == 0, then morphological
closing + erosion with a radius-1 cross), and average over unmasked pixels.
"""
from __future__ import annotations

import numpy as np


class FullyOccludedPair(ValueError):
    """A frame pair whose validity mask is empty; the AVI mean is undefined."""


def _check_image(a, name="image"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"{name} must be [H, W, 3], got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite values")
    return a


def psnr(a, b):
    """Peak signal-to-noise ratio in dB with peak 1.0; inf for identical."""
    a = _check_image(a, "a")
    b = _check_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _window_means(chan, window):
    k = window.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(chan, (k, k))
    return np.einsum("ijkl,kl->ij", win, window)


def ssim(a, b, window_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean local SSIM over a Gaussian window, per channel then averaged."""
    a = _check_image(a, "a")
    b = _check_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < window_size:
        raise ValueError(f"ssim: image smaller than the {window_size}x{window_size} window")
    window = _gaussian_window(window_size, sigma)
    c1 = k1 ** 2
    c2 = k2 ** 2
    scores = []
    for ch in range(3):
        x, y = a[:, :, ch], b[:, :, ch]
        mx = _window_means(x, window)
        my = _window_means(y, window)
        mxx = _window_means(x * x, window)
        myy = _window_means(y * y, window)
        mxy = _window_means(x * y, window)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
        scores.append(np.mean(s))
    return float(np.mean(scores))


def warp_backward(frame, flow):
    """Warp a frame with the backward flow: out(r) = frame(r + flow(r)).

    Sub-pixel positions use bilinear sampling; samples clamp at the border.
    """
    frame = _check_image(frame, "frame")
    flow = np.asarray(flow, dtype=np.float64)
    h, w = frame.shape[:2]
    if flow.shape != (h, w, 2):
        raise ValueError(f"warp_backward: flow shape {flow.shape} does not match frame {frame.shape}")
    yy, xx = np.mgrid[0:h, 0:w]
    sx = np.clip(xx + flow[:, :, 0], 0, w - 1)
    sy = np.clip(yy + flow[:, :, 1], 0, h - 1)
    x0 = np.minimum(np.floor(sx).astype(int), w - 2) if w > 1 else np.zeros_like(sx, int)
    y0 = np.minimum(np.floor(sy).astype(int), h - 2) if h > 1 else np.zeros_like(sy, int)
    fx = (sx - x0)[:, :, None]
    fy = (sy - y0)[:, :, None]
    out = ((1 - fy) * (1 - fx) * frame[y0, x0] + (1 - fy) * fx * frame[y0, x0 + 1]
           + fy * (1 - fx) * frame[y0 + 1, x0] + fy * fx * frame[y0 + 1, x0 + 1])
    return out


def forward_count(flow):
    """Per target pixel, how many source pixels land on it under the forward
    flow (floored destination); out-of-frame destinations are discarded."""
    flow = np.asarray(flow, dtype=np.float64)
    h, w = flow.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    dx = np.floor(xx + flow[:, :, 0]).astype(np.int64)
    dy = np.floor(yy + flow[:, :, 1]).astype(np.int64)
    valid = (dx >= 0) & (dx < w) & (dy >= 0) & (dy < h)
    count = np.zeros((h, w), dtype=np.int64)
    np.add.at(count, (dy[valid], dx[valid]), 1)
    return count


_CROSS = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]


def _shift_pad1(mask, dy, dx):
    """Mask shifted by (dy, dx) with out-of-frame neighbors counting as 1."""
    h, w = mask.shape
    out = np.ones_like(mask)
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def _dilate(mask):
    out = np.zeros_like(mask)
    for dy, dx in _CROSS:
        out |= _shift_pad1(mask, dy, dx)
    return out


def _erode(mask):
    out = np.ones_like(mask)
    for dy, dx in _CROSS:
        out &= _shift_pad1(mask, dy, dx)
    return out


def build_mask(count):
    """Validity mask from a forward count grid: zero-count pixels are masked
    out, then closing (dilation + erosion) and another erosion with the
    radius-1 cross clean up subpixel occlusion leaks. Out-of-frame neighbors
    are treated as masked-in so the border is not spuriously eroded."""
    raw = (np.asarray(count) > 0)
    return _erode(_erode(_dilate(raw))).astype(np.uint8)


def avi_pair(frame_k, frame_k1, forward_flow, backward_flow):
    """(score, n_unmasked) for one adjacent pair."""
    warped = warp_backward(frame_k, backward_flow)
    target = _check_image(frame_k1, "frame_k1")
    if warped.shape != target.shape:
        raise ValueError("avi: frame shape mismatch")
    err = np.sqrt(np.sum((warped - target) ** 2, axis=2))
    mask = build_mask(forward_count(forward_flow)).astype(bool)
    n = int(mask.sum())
    if n == 0:
        raise FullyOccludedPair("fully occluded pair: no unmasked pixels")
    return float(err[mask].sum() / n), n


def avi(frames, forward_flows, backward_flows):
    """Mean masked warp discrepancy over all adjacent frame pairs."""
    frames = list(frames)
    forward_flows = list(forward_flows)
    backward_flows = list(backward_flows)
    if len(forward_flows) != len(frames) - 1 or len(backward_flows) != len(frames) - 1:
        raise ValueError("avi: need exactly one flow pair per adjacent frame pair")
    scores = []
    for k in range(len(frames) - 1):
        score, _ = avi_pair(frames[k], frames[k + 1], forward_flows[k], backward_flows[k])
        scores.append(score)
    return float(np.mean(scores))
