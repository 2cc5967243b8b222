"""Procedural angiography-like sequences with exact ground truth.

Geometry lives in a reference (material) frame and is carried into frame
``t`` by a smooth periodic displacement

    d(q, t) = A_axis * sin(2 pi t / T) * exp(-|q - c_axis|^2 / (2 sigma^2))

applied independently to the x and y axes. A catheter is visible from the
first frame; contrast fills a random vessel tree from its root, starting at
``onset`` and advancing ``speed`` pixels of centreline per frame.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import BACKGROUND, CATHETER, VESSEL, Sequence, save_sequence
from .optflow import save_flow


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    frames: int = 12
    seed: int = 0
    # vessel tree
    branch_depth: int = 3
    branch_angle: tuple[float, float] = (25.0, 55.0)
    root_width: float = 3.6
    width_decay: float = 0.72
    root_length: float = 0.38  # fraction of image size
    length_decay: float = 0.75
    # catheter
    catheter_points: int = 4
    catheter_width: float | None = None  # None -> 2x terminal vessel width
    # contrast
    onset: int = 3
    speed: float = 14.0
    # motion
    amplitude: float = 2.0
    period: float = 8.0
    envelope: float = 0.35  # sigma as a fraction of image size
    # appearance
    vessel_contrast: float = 0.4
    catheter_contrast: float = 0.5
    noise_sigma: float = 0.045
    shot_noise: float = 0.02
    frame_period: float = 1.0 / 15.0

    def __post_init__(self):
        if self.onset < 2:
            raise ValueError("onset must be >= 2 so a pre-contrast reference exists")
        if self.amplitude < 0 or self.noise_sigma < 0 or self.shot_noise < 0:
            raise ValueError("amplitude and noise levels must be non-negative")
        if self.frames < 1 or self.size < 8:
            raise ValueError("need at least one frame of 8x8 pixels")
        if self.branch_depth < 0 or self.root_width <= 0 or self.root_length <= 0:
            raise ValueError("degenerate vessel tree")

    @property
    def terminal_width(self) -> float:
        return self.root_width * self.width_decay ** self.branch_depth

    def with_(self, **kw) -> "SynthConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class Deformation:
    amplitude: np.ndarray  # (2,) signed amplitude per axis (x, y)
    centers: np.ndarray  # (2, 2) centre (x, y) per axis
    sigma: float
    period: float

    def displacement(self, pts, t: float) -> np.ndarray:
        """Forward displacement of reference points ``pts`` (..., 2) as (x, y)."""
        pts = np.asarray(pts, dtype=np.float64)
        s = np.sin(2.0 * np.pi * t / self.period)
        out = np.empty_like(pts)
        for a in range(2):
            r2 = np.sum((pts - self.centers[a]) ** 2, axis=-1)
            out[..., a] = self.amplitude[a] * s * np.exp(-r2 / (2.0 * self.sigma ** 2))
        return out

    def forward(self, pts, t: float) -> np.ndarray:
        return pts + self.displacement(pts, t)

    def inverse(self, pts, t: float, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
        """Reference position ``q`` with ``forward(q, t) == pts`` (fixed point)."""
        pts = np.asarray(pts, dtype=np.float64)
        q = pts.copy()
        for _ in range(max_iter):
            q_new = pts - self.displacement(q, t)
            if np.max(np.abs(q_new - q), initial=0.0) < tol:
                return q_new
            q = q_new
        return q


@dataclass
class GroundTruth:
    labels: np.ndarray  # (T, H, W) uint8
    displacements: np.ndarray  # (T, H, W, 2) forward displacement on the grid
    onset: int
    deformation: Deformation
    config: SynthConfig = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# geometry

def _bezier(p0, p1, p2, step=0.25):
    approx = np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1)
    n = max(int(np.ceil(approx / step)), 2)
    s = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - s) ** 2 * p0 + 2 * (1 - s) * s * p1 + s ** 2 * p2


def _arclength(pts):
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _rotate(v, deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _vessel_tree(cfg: SynthConfig, rng) -> np.ndarray:
    """Centre-line samples as rows ``(x, y, width, arclength_from_root)``."""
    n = cfg.size
    side = rng.integers(4)
    along = rng.uniform(0.3, 0.7) * n
    margin = 0.06 * n
    start = {0: (along, margin), 1: (n - margin, along),
             2: (along, n - margin), 3: (margin, along)}[side]
    start = np.array(start, dtype=np.float64)
    direction = np.array([n / 2, n / 2]) - start
    direction = _rotate(direction / np.linalg.norm(direction), rng.uniform(-20, 20))
    rows = []

    def grow(p0, d, length, width, s0, depth):
        bend = rng.uniform(-25, 25)
        p2 = p0 + _rotate(d, bend) * length
        p1 = p0 + _rotate(d, bend * 0.5) * length * 0.5
        pts = _bezier(p0, p1, p2)
        s = s0 + _arclength(pts)
        rows.append(np.column_stack([pts, np.full(len(pts), width), s]))
        if depth == 0:
            return
        d_end = pts[-1] - pts[-2]
        d_end = d_end / np.linalg.norm(d_end)
        lo, hi = cfg.branch_angle
        for sign in (-1.0, 1.0):
            angle = sign * rng.uniform(lo, hi)
            grow(pts[-1], _rotate(d_end, angle), length * cfg.length_decay,
                 width * cfg.width_decay, s[-1], depth - 1)

    grow(start, direction, cfg.root_length * n, cfg.root_width, 0.0, cfg.branch_depth)
    return np.concatenate(rows)


def _catheter(cfg: SynthConfig, rng) -> np.ndarray:
    """Gently curved catheter entering from an image border; rows ``(x, y, width)``."""
    n = cfg.size
    width = cfg.catheter_width or 2.0 * cfg.terminal_width
    side = rng.integers(4)
    along = rng.uniform(0.2, 0.8) * n
    start = {0: (along, -2.0), 1: (n + 1.0, along), 2: (along, n + 1.0), 3: (-2.0, along)}[side]
    start = np.array(start)
    target = rng.uniform(0.35, 0.65, size=2) * n
    d = target - start
    length = np.linalg.norm(d) * rng.uniform(1.0, 1.3)
    d = d / np.linalg.norm(d)
    pts = [start]
    k = max(cfg.catheter_points - 1, 1)
    heading = d
    for _ in range(k):
        heading = _rotate(heading, rng.uniform(-12, 12))
        pts.append(pts[-1] + heading * length / k)
    pts = np.array(pts)
    if len(pts) == 2:
        curve = _bezier(pts[0], pts.mean(axis=0), pts[1])
    else:
        # quadratic pieces between polygon-edge midpoints, controls at the vertices
        anchors = np.vstack([pts[0], 0.5 * (pts[1:-2] + pts[2:-1]), pts[-1]])
        pieces = [_bezier(anchors[i], pts[i + 1], anchors[i + 1]) for i in range(len(anchors) - 1)]
        curve = np.concatenate([pieces[0]] + [p[1:] for p in pieces[1:]])
    return np.column_stack([curve, np.full(len(curve), width)])


def _coverage(shape, pts, widths) -> np.ndarray:
    """Anti-aliased coverage of a union of discs of diameter ``widths``."""
    H, W = shape
    cov = np.zeros(H * W)
    if len(pts) == 0:
        return cov.reshape(H, W)
    r = int(np.ceil(widths.max() / 2 + 1.5))
    base_x = np.floor(pts[:, 0]).astype(int)
    base_y = np.floor(pts[:, 1]).astype(int)
    for oy in range(-r, r + 2):
        for ox in range(-r, r + 2):
            px = base_x + ox
            py = base_y + oy
            ok = (px >= 0) & (px < W) & (py >= 0) & (py < H)
            if not np.any(ok):
                continue
            dist = np.hypot(px[ok] - pts[ok, 0], py[ok] - pts[ok, 1])
            c = np.clip(widths[ok] / 2 + 0.5 - dist, 0.0, 1.0)
            np.maximum.at(cov, py[ok] * W + px[ok], c)
    return cov.reshape(H, W)


def _background(cfg: SynthConfig, rng):
    n = cfg.size
    pad = n // 4
    coarse = ndimage.gaussian_filter(rng.standard_normal((n + 2 * pad,) * 2), n / 8, mode="wrap")
    fine = ndimage.gaussian_filter(rng.standard_normal((n + 2 * pad,) * 2), 1.5, mode="wrap")
    coarse = coarse / (np.abs(coarse).max() + 1e-12)
    fine = fine / (np.abs(fine).max() + 1e-12)
    tex = 0.68 + 0.14 * coarse + 0.05 * fine
    # vignette
    yy, xx = np.mgrid[0:n + 2 * pad, 0:n + 2 * pad] - (n / 2 + pad)
    tex -= 0.08 * (xx ** 2 + yy ** 2) / (n / 2) ** 2 * 0.5
    return np.clip(tex, 0.3, 0.95), pad


def reveal_length(cfg: SynthConfig, t: int) -> float:
    """Centre-line length filled with contrast at frame ``t``."""
    if t < cfg.onset:
        return -1.0
    return cfg.speed * (t - cfg.onset + 1)


# ---------------------------------------------------------------------------

def generate_sequence(cfg: SynthConfig = SynthConfig()) -> tuple[Sequence, GroundTruth]:
    """Render frames, labels and true motion for one synthetic recording."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.size
    tree = _vessel_tree(cfg, rng)
    cath = _catheter(cfg, rng)
    tex, pad = _background(cfg, rng)
    axis_sign = rng.choice([-1.0, 1.0], size=2)
    deformation = Deformation(
        amplitude=cfg.amplitude * axis_sign,
        centers=rng.uniform(0.3, 0.7, size=(2, 2)) * n,
        sigma=cfg.envelope * n,
        period=cfg.period,
    )
    noise_rng = np.random.default_rng([cfg.seed, 1])

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    grid = np.stack([xx, yy], axis=-1)
    frames, labels, disps = [], [], []
    for t in range(cfg.frames):
        disp = deformation.displacement(grid, t)
        ref = deformation.inverse(grid, t)
        bg = ndimage.map_coordinates(tex, [ref[..., 1] + pad, ref[..., 0] + pad],
                                     order=1, mode="nearest")
        cpts = deformation.forward(cath[:, :2], t)
        c_cov = _coverage((n, n), cpts, cath[:, 2])
        live = tree[:, 3] <= reveal_length(cfg, t)
        vpts = deformation.forward(tree[live, :2], t)
        v_cov = _coverage((n, n), vpts, tree[live, 2])

        img = bg * (1 - cfg.catheter_contrast * c_cov) * (1 - cfg.vessel_contrast * v_cov)
        img = img + cfg.noise_sigma * noise_rng.standard_normal(img.shape) \
            + cfg.shot_noise * np.sqrt(img) * noise_rng.standard_normal(img.shape)
        frames.append(np.clip(img, 0.0, 1.0))

        lab = np.full((n, n), BACKGROUND, dtype=np.uint8)
        lab[v_cov >= 0.5] = VESSEL
        lab[c_cov >= 0.5] = CATHETER
        labels.append(lab)
        disps.append(disp)

    seq = Sequence(np.stack(frames), np.stack(labels), cfg.frame_period,
                   name=f"synth_{cfg.seed:06d}")
    gt = GroundTruth(np.stack(labels), np.stack(disps), cfg.onset, deformation, cfg)
    return seq, gt


def true_flow(gt: GroundTruth, t1: int, t2: int) -> np.ndarray:
    """Backward-convention flow: ``frame_t1(p) ~ frame_t2(p + u(p))``."""
    T = gt.labels.shape[0]
    for t in (t1, t2):
        if not 0 <= t < T:
            raise IndexError(f"frame index {t} outside [0, {T})")
    H, W = gt.labels.shape[1:]
    if t1 == t2:
        return np.zeros((H, W, 2))
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    grid = np.stack([xx, yy], axis=-1)
    q = gt.deformation.inverse(grid, t1)
    return gt.deformation.forward(q, t2) - grid


def save_synthetic(seq: Sequence, gt: GroundTruth, directory) -> Path:
    """Sequence layout plus ``truth/flow_%05d_%05d.flo`` for consecutive pairs."""
    d = gt.deformation
    extra = {
        "onset": gt.onset,
        "seed": gt.config.seed if gt.config else "",
        "deformation_amplitude": " ".join(repr(float(v)) for v in d.amplitude),
        "deformation_centers": " ".join(repr(float(v)) for v in d.centers.ravel()),
        "deformation_sigma": repr(float(d.sigma)),
        "deformation_period": repr(float(d.period)),
    }
    directory = save_sequence(seq, directory, extra)
    truth = directory / "truth"
    truth.mkdir(exist_ok=True)
    for t in range(len(seq) - 1):
        save_flow(true_flow(gt, t, t + 1), truth / f"flow_{t:05d}_{t + 1:05d}.flo")
    return directory


def load_ground_truth(directory) -> GroundTruth:
    """Rebuild ground truth (labels + analytic motion) from a saved sequence."""
    from .core import load_sequence, read_manifest

    directory = Path(directory)
    m = read_manifest(directory / "manifest.txt")
    seq = load_sequence(directory)
    deformation = Deformation(
        amplitude=np.array([float(v) for v in m["deformation_amplitude"].split()]),
        centers=np.array([float(v) for v in m["deformation_centers"].split()]).reshape(2, 2),
        sigma=float(m["deformation_sigma"]),
        period=float(m["deformation_period"]),
    )
    H, W = seq.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    grid = np.stack([xx, yy], axis=-1)
    disps = np.stack([deformation.displacement(grid, t) for t in range(len(seq))])
    return GroundTruth(seq.labels, disps, int(m["onset"]), deformation)
