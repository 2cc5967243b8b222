"""Image, mask and flow conventions shared by the whole package, plus raster I/O.

All per-pixel data are plain numpy arrays, indexed ``[y, x]`` with the origin
at the top-left corner:

=============  ===========================  ====================================
name           shape / dtype                contents
=============  ===========================  ====================================
frame          ``(H, W)`` float             intensities in ``[0, 1]``
binary mask    ``(H, W)`` bool              foreground / background
label mask     ``(H, W)`` uint8             0 background, 1 vessel, 2 catheter
prob mask      ``(H, W, C)`` float          per-pixel class distribution
flow field     ``(H, W, 2)`` float          ``(dx, dy)`` displacement in pixels
=============  ===========================  ====================================

A :class:`Sequence` bundles frames (and optionally labels) of one recording.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

BACKGROUND, VESSEL, CATHETER = 0, 1, 2
CLASS_NAMES = ("background", "vessel", "catheter")

# background=black, vessel=red, catheter=yellow
PALETTE = np.array([[0, 0, 0], [255, 0, 0], [255, 255, 0]], dtype=np.uint8)


class ImageFormatError(ValueError):
    """Base class for raster decoding problems."""


class UnsupportedImageError(ImageFormatError):
    """The file decodes, but its bit depth or colour model is not grayscale 8/16-bit."""


class CorruptImageError(ImageFormatError):
    """The file header or payload cannot be decoded."""


# ---------------------------------------------------------------------------
# validation helpers

def check_frame(f) -> np.ndarray:
    f = np.asarray(f)
    if f.ndim != 2:
        raise ValueError(f"frame must be 2-D, got shape {f.shape}")
    if not np.issubdtype(f.dtype, np.floating):
        f = f.astype(np.float64)
    if f.size and (not np.all(np.isfinite(f)) or f.min() < 0.0 or f.max() > 1.0):
        raise ValueError("frame intensities must lie in [0, 1]")
    return f


def check_labels(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"label mask must be 2-D, got shape {m.shape}")
    if m.size and (m.min() < 0 or m.max() > CATHETER):
        raise ValueError("labels must be in {0, 1, 2}")
    return m.astype(np.uint8, copy=False)


def check_flow(u, shape=None) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 3 or u.shape[2] != 2:
        raise ValueError(f"flow must have shape (H, W, 2), got {u.shape}")
    if shape is not None and u.shape[:2] != tuple(shape):
        raise ValueError(f"flow shape {u.shape[:2]} does not match image shape {tuple(shape)}")
    if not np.all(np.isfinite(u)):
        raise ValueError("flow contains non-finite values")
    return u


def check_probs(p, atol=1e-5) -> np.ndarray:
    p = np.asarray(p)
    if p.ndim != 3 or p.shape[2] not in (1, 2, 3):
        raise ValueError(f"prob mask must have shape (H, W, C), got {p.shape}")
    if np.any(p < 0):
        raise ValueError("negative probabilities")
    if p.shape[2] > 1 and not np.allclose(p.sum(axis=2), 1.0, atol=atol):
        raise ValueError("class probabilities do not sum to 1")
    return p


def one_hot(labels, classes=3, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    return np.eye(classes, dtype=dtype)[labels]


def foreground(labels) -> np.ndarray:
    """Binary union of all non-background classes."""
    return np.asarray(labels) != BACKGROUND


@dataclass(frozen=True)
class Sequence:
    """Frames of one recording, optionally with per-frame labels."""

    frames: np.ndarray
    labels: np.ndarray | None = None
    frame_period: float = 1.0 / 15.0
    name: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise ValueError("frames must be stacked as (T, H, W)")
        for f in frames:
            check_frame(f)
        object.__setattr__(self, "frames", frames)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != frames.shape:
                raise ValueError(
                    f"labels {labels.shape} do not match frames {frames.shape}")
            object.__setattr__(self, "labels", check_labels_stack(labels))

    def __len__(self):
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]


def check_labels_stack(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > CATHETER):
        raise ValueError("labels must be in {0, 1, 2}")
    return labels.astype(np.uint8, copy=False)


# ---------------------------------------------------------------------------
# resampling

def linear_resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Matrix ``R`` of shape (n_out, n_in) so that ``R @ x`` resamples ``x``
    linearly with pixel centres aligned (half-pixel convention) and edge
    clamping. ``n_in == n_out`` gives the identity exactly."""
    if n_in < 1 or n_out < 1:
        raise ValueError("resample sizes must be >= 1")
    if n_in == n_out:
        return np.eye(n_in)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    R = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(R, (rows, i0), 1.0 - w1)
    np.add.at(R, (rows, i1), w1)
    return R


def resize_frame(f, w: int, h: int) -> np.ndarray:
    """Bilinear resize of a frame to ``w`` x ``h`` pixels."""
    if w < 1 or h < 1:
        raise ValueError(f"target size must be positive, got {w}x{h}")
    f = np.asarray(f, dtype=np.float64)
    H, W = f.shape
    if (H, W) == (h, w):
        return f.copy()
    out = linear_resample_matrix(H, h) @ f @ linear_resample_matrix(W, w).T
    return np.clip(out, 0.0, 1.0)


def resize_labels(m, w: int, h: int) -> np.ndarray:
    """Nearest-neighbour resize for categorical masks."""
    m = np.asarray(m)
    H, W = m.shape
    ys = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return m[np.ix_(ys, xs)]


# ---------------------------------------------------------------------------
# raster I/O

_MODE_SCALE = {"L": 255.0, "I;16": 65535.0, "I;16B": 65535.0, "I;16L": 65535.0, "I": 65535.0}


def load_frame(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale PNG/PGM and scale it linearly to [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode not in _MODE_SCALE:
                raise UnsupportedImageError(
                    f"{path}: mode {mode!r} is not 8/16-bit grayscale")
            data = np.array(im)
    except UnidentifiedImageError as exc:
        raise CorruptImageError(f"{path}: unreadable image header") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, ImageFormatError):
            raise
        raise CorruptImageError(f"{path}: {exc}") from exc
    if mode == "I" and data.size and (data.min() < 0 or data.max() > 65535):
        raise UnsupportedImageError(f"{path}: integer data exceed 16 bits")
    return data.astype(np.float64) / _MODE_SCALE[mode]


def save_frame(f, path, bits: int = 16) -> None:
    """Write a frame as a grayscale PNG (16-bit by default)."""
    f = check_frame(f)
    if bits == 16:
        data = np.round(f * 65535.0).astype(np.uint16)
    elif bits == 8:
        data = np.round(f * 255.0).astype(np.uint8)
    else:
        raise ValueError("bits must be 8 or 16")
    Image.fromarray(data).save(path, format="PNG")


def save_mask(mask, path) -> None:
    """Write a label mask as an indexed PNG with the fixed class palette."""
    mask = check_labels(mask)
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"directory does not exist: {path.parent}")
    im = Image.fromarray(mask, mode="P")
    im.putpalette(PALETTE.ravel().tolist())
    try:
        im.save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write mask to {path}: {exc}") from exc


def load_mask(path) -> np.ndarray:
    """Read a label mask written by :func:`save_mask`.

    Indexed images are read by palette index; RGB images are matched against
    the class palette colour by colour.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such mask: {path}")
    try:
        with Image.open(path) as im:
            if im.mode == "P":
                return check_labels(np.array(im))
            rgb = np.array(im.convert("RGB"))
    except UnidentifiedImageError as exc:
        raise CorruptImageError(f"{path}: unreadable image header") from exc
    out = np.full(rgb.shape[:2], 255, dtype=np.uint8)
    for k, colour in enumerate(PALETTE):
        out[np.all(rgb == colour, axis=2)] = k
    if np.any(out == 255):
        raise UnsupportedImageError(f"{path}: colours outside the label palette")
    return out


# ---------------------------------------------------------------------------
# sequence directories

MANIFEST = "manifest.txt"


def write_manifest(path, entries: dict) -> None:
    with open(path, "w") as fh:
        for k, v in entries.items():
            fh.write(f"{k} {v}\n")


def read_manifest(path) -> dict:
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(" ")
            entries[key] = value.strip()
    return entries


def save_sequence(seq: Sequence, directory, extra: dict | None = None) -> Path:
    """Write ``frames/%05d.png``, optional ``labels/%05d.png`` and a manifest."""
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(seq.frames):
        save_frame(f, directory / "frames" / f"{t:05d}.png")
    if seq.labels is not None:
        (directory / "labels").mkdir(exist_ok=True)
        for t, m in enumerate(seq.labels):
            save_mask(m, directory / "labels" / f"{t:05d}.png")
    entries = {"frames": len(seq), "frame_period": repr(float(seq.frame_period))}
    if extra:
        entries.update(extra)
    write_manifest(directory / MANIFEST, entries)
    return directory


def load_sequence(directory) -> Sequence:
    directory = Path(directory)
    manifest = read_manifest(directory / MANIFEST)
    n = int(manifest["frames"])
    frames = np.stack([load_frame(directory / "frames" / f"{t:05d}.png") for t in range(n)]) \
        if n else np.zeros((0, 1, 1))
    labels = None
    if (directory / "labels").is_dir():
        labels = np.stack([load_mask(directory / "labels" / f"{t:05d}.png") for t in range(n)])
    return Sequence(frames, labels, float(manifest.get("frame_period", 1.0 / 15.0)),
                    name=directory.name)


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
