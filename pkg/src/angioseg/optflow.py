"""Dense coarse-to-fine optical flow and backward warping.

Flow convention: for ``u = estimate_flow(f1, f2)``, ``f1(p) ~ f2(p + u(p))``.
Warping is always a gather: ``warp_frame(f2, u)`` resamples ``f2`` onto the
grid of ``f1``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import BACKGROUND, check_flow, linear_resample_matrix


@dataclass(frozen=True)
class FlowConfig:
    pyramid_levels: int = 4
    scale_factor: float = 0.5
    smoothness: float = 15.0  # alpha, on the 8-bit intensity scale
    iterations_per_level: int = 50
    warp_updates_per_level: int = 2
    gradient_sigma: float = 1.0

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if not 0.0 < self.scale_factor < 1.0:
            raise ValueError("scale_factor must be in (0, 1)")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be > 0")
        if self.iterations_per_level < 1 or self.warp_updates_per_level < 1:
            raise ValueError("iteration counts must be >= 1")


# ---------------------------------------------------------------------------
# sampling

class BilinearSampler:
    """Bilinear gather at ``p + u(p)`` with zero outside the image.

    ``gather`` is linear in the image, ``scatter`` is its exact adjoint, which
    is what backpropagation through a warp needs.
    """

    def __init__(self, u):
        u = np.asarray(u, dtype=np.float64)
        H, W = u.shape[:2]
        self.shape = (H, W)
        ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
        sx = xs + u[..., 0]
        sy = ys + u[..., 1]
        x0 = np.floor(sx).astype(np.int64)
        y0 = np.floor(sy).astype(np.int64)
        fx = sx - x0
        fy = sy - y0
        idx, wts = [], []
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            for dx, wx in ((0, 1.0 - fx), (1, fx)):
                yy = y0 + dy
                xx = x0 + dx
                ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
                idx.append(np.where(ok, yy * W + xx, 0).ravel())
                wts.append(np.where(ok, wy * wx, 0.0).ravel())
        self.idx = np.stack(idx)  # (4, H*W)
        self.w = np.stack(wts)
        # a pixel whose sample falls completely outside has no support
        self.inside = (self.w.sum(axis=0) > 0).reshape(H, W)

    def gather(self, img) -> np.ndarray:
        """``img`` of shape (H, W) or (H, W, C)."""
        img = np.asarray(img)
        H, W = self.shape
        flat = img.reshape(H * W, -1)
        out = np.zeros((H * W, flat.shape[1]), dtype=np.result_type(img.dtype, np.float64))
        for k in range(4):
            out += self.w[k][:, None] * flat[self.idx[k]]
        return out.reshape(img.shape)

    def scatter(self, g) -> np.ndarray:
        """Adjoint of :meth:`gather`."""
        g = np.asarray(g)
        H, W = self.shape
        flat = g.reshape(H * W, -1)
        out = np.zeros((H * W, flat.shape[1]))
        for c in range(flat.shape[1]):
            for k in range(4):
                out[:, c] += np.bincount(self.idx[k], weights=self.w[k] * flat[:, c],
                                         minlength=H * W)
        return out.reshape(g.shape)

    def weight_sum(self) -> np.ndarray:
        return self.w.sum(axis=0).reshape(self.shape)


def warp_frame(f, u) -> np.ndarray:
    """Backward warp: ``out(p) = f(p + u(p))``, bilinear, zero outside."""
    f = np.asarray(f, dtype=np.float64)
    u = check_flow(u, f.shape)
    if not np.any(u):
        return f.copy()
    return BilinearSampler(u).gather(f)


def warp_labels(m, u) -> np.ndarray:
    """Nearest-neighbour backward warp of a label or binary mask; outside -> 0."""
    m = np.asarray(m)
    u = check_flow(u, m.shape)
    H, W = m.shape
    ys, xs = np.mgrid[0:H, 0:W]
    sx = np.floor(xs + u[..., 0] + 0.5).astype(np.int64)
    sy = np.floor(ys + u[..., 1] + 0.5).astype(np.int64)
    ok = (sx >= 0) & (sx < W) & (sy >= 0) & (sy < H)
    out = np.zeros_like(m)
    out[ok] = m[sy[ok], sx[ok]]
    return out


def warp_probs(p, u, return_sampler: bool = False):
    """Per-channel bilinear backward warp followed by renormalization.

    Pixels whose sample position has no in-image support become one-hot
    background.
    """
    p = np.asarray(p, dtype=np.float64)
    sampler = BilinearSampler(check_flow(u, p.shape[:2]))
    out = _renormalize(sampler.gather(p), sampler.inside)
    if return_sampler:
        return out, sampler
    return out


def _renormalize(raw, inside):
    total = raw.sum(axis=2, keepdims=True)
    out = np.divide(raw, total, out=np.zeros_like(raw), where=total > 0)
    dead = ~inside | (total[..., 0] <= 0)
    out[dead] = 0.0
    out[dead, BACKGROUND] = 1.0
    return out


def warp_probs_backward(p, sampler: BilinearSampler, grad_out) -> np.ndarray:
    """Gradient of a loss w.r.t. the unwarped probabilities ``p``."""
    raw = sampler.gather(np.asarray(p, dtype=np.float64))
    total = raw.sum(axis=2, keepdims=True)
    live = (sampler.inside & (total[..., 0] > 0))[..., None]
    safe = np.where(live, total, 1.0)
    q = raw / safe
    g = np.asarray(grad_out, dtype=np.float64)
    g_raw = (g - np.sum(g * q, axis=2, keepdims=True)) / safe
    g_raw = np.where(live, g_raw, 0.0)
    return sampler.scatter(g_raw)


# ---------------------------------------------------------------------------
# pyramid

MIN_PYRAMID_SIZE = 8


def _resample(img, h, w):
    H, W = img.shape
    return linear_resample_matrix(H, h) @ img @ linear_resample_matrix(W, w).T


def gaussian_pyramid(f, levels: int, scale_factor: float = 0.5) -> list[np.ndarray]:
    """``[f, f↓, f↓↓, ...]``; stops before any side drops below 8 pixels."""
    f = np.asarray(f, dtype=np.float64)
    sigma = 0.5 * np.sqrt(1.0 / scale_factor ** 2 - 1.0)
    pyr = [f]
    for _ in range(levels - 1):
        cur = pyr[-1]
        h = int(round(cur.shape[0] * scale_factor))
        w = int(round(cur.shape[1] * scale_factor))
        if h < MIN_PYRAMID_SIZE or w < MIN_PYRAMID_SIZE:
            break
        pyr.append(_resample(ndimage.gaussian_filter(cur, sigma, mode="nearest"), h, w))
    return pyr


# ---------------------------------------------------------------------------
# Horn-Schunck

_HS_KERNEL = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=np.float64) / 12.0


def _warp_clamped(f, u):
    # clamps sample positions so the linearization never sees artificial zeros
    H, W = f.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    coords = np.stack([np.clip(ys + u[..., 1], 0, H - 1), np.clip(xs + u[..., 0], 0, W - 1)])
    return ndimage.map_coordinates(f, coords, order=1, mode="nearest")


def _horn_schunck_level(f1, f2, u, cfg: FlowConfig):
    alpha2 = (cfg.smoothness / 255.0) ** 2
    s = cfg.gradient_sigma
    f1s = ndimage.gaussian_filter(f1, s, mode="nearest") if s > 0 else f1
    f2s = ndimage.gaussian_filter(f2, s, mode="nearest") if s > 0 else f2
    for _ in range(cfg.warp_updates_per_level):
        f2w = _warp_clamped(f2s, u)
        # average the spatial derivatives of both frames (symmetric linearization)
        gy1, gx1 = np.gradient(f1s)
        gy2, gx2 = np.gradient(f2w)
        ix = 0.5 * (gx1 + gx2)
        iy = 0.5 * (gy1 + gy2)
        it = f2w - f1s
        u0 = u.copy()
        denom = alpha2 + ix ** 2 + iy ** 2
        for _ in range(cfg.iterations_per_level):
            ubar = ndimage.convolve(u[..., 0], _HS_KERNEL, mode="nearest")
            vbar = ndimage.convolve(u[..., 1], _HS_KERNEL, mode="nearest")
            r = (ix * (ubar - u0[..., 0]) + iy * (vbar - u0[..., 1]) + it) / denom
            u = np.stack([ubar - ix * r, vbar - iy * r], axis=-1)
    return u


def estimate_flow(f1, f2, cfg: FlowConfig = FlowConfig()) -> np.ndarray:
    """Pyramidal Horn-Schunck flow with ``f1(p) ~ f2(p + u(p))``."""
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape:
        raise ValueError(f"frame shapes differ: {f1.shape} vs {f2.shape}")
    pyr1 = gaussian_pyramid(f1, cfg.pyramid_levels, cfg.scale_factor)
    pyr2 = gaussian_pyramid(f2, cfg.pyramid_levels, cfg.scale_factor)
    u = np.zeros(pyr1[-1].shape + (2,))
    for level in range(len(pyr1) - 1, -1, -1):
        g1, g2 = pyr1[level], pyr2[level]
        if u.shape[:2] != g1.shape:
            h, w = g1.shape
            sy = h / u.shape[0]
            sx = w / u.shape[1]
            u = np.stack([_resample(u[..., 0], h, w) * sx,
                          _resample(u[..., 1], h, w) * sy], axis=-1)
        u = _horn_schunck_level(g1, g2, u, cfg)
    return u


# ---------------------------------------------------------------------------
# flow files

FLOW_MAGIC = b"FLO1"


def save_flow(u, path) -> None:
    """``FLO1`` + int32 width + int32 height + float32 (dx, dy) pairs, little-endian."""
    u = check_flow(u)
    H, W = u.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<ii", W, H))
        fh.write(u.astype("<f4").tobytes())


def load_flow(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FLOW_MAGIC or len(data) < 12:
        raise ValueError(f"{path}: not a FLO1 flow file")
    W, H = struct.unpack("<ii", data[4:12])
    body = np.frombuffer(data, dtype="<f4", offset=12)
    if body.size != W * H * 2:
        raise ValueError(f"{path}: truncated flow payload")
    return body.reshape(H, W, 2).astype(np.float64)


def endpoint_error(u, v) -> np.ndarray:
    return np.hypot(u[..., 0] - v[..., 0], u[..., 1] - v[..., 1])


def angular_error(u, v) -> np.ndarray:
    """Angle in degrees between (u, 1) and (v, 1) space-time vectors."""
    num = u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] + 1.0
    den = np.sqrt((u[..., 0] ** 2 + u[..., 1] ** 2 + 1.0) * (v[..., 0] ** 2 + v[..., 1] ** 2 + 1.0))
    return np.degrees(np.arccos(np.clip(num / den, -1.0, 1.0)))


def central_crop(a, fraction: float = 0.8):
    H, W = a.shape[:2]
    my = int(round(H * (1 - fraction) / 2))
    mx = int(round(W * (1 - fraction) / 2))
    return a[my:H - my, mx:W - mx]
