"""Training stages (binary, multi-class, Siamese), augmentation and inference."""
from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from . import nnet
from .core import BACKGROUND, foreground, resize_frame, resize_labels
from .morphology import default_min_area, filter_small_components
from .nnet import AdamState, NumericalError, UNetConfig, UNetParams
from .optflow import warp_probs, warp_probs_backward

POLICIES = ("none", "augm1", "augm2")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "binary"
    epochs: int = 50
    batch_size: int = 4
    learning_rate: float = 1e-3
    seed: int = 0
    dt_range: tuple[int, ...] = (1, 2, 3)
    augmentation: str = "none"
    rotation_range: float = 45.0
    translation_range: int = 10
    augment_copies: int = 10  # fold factor: each frame as-is plus 9 random transforms
    warm_start: bool = True
    lr_schedule: str = "cosine"  # "cosine" decays to 0 over the run, "constant" does not

    def __post_init__(self):
        if self.stage not in ("binary", "multiclass", "siamese"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.augmentation not in POLICIES:
            raise ValueError(f"unknown augmentation policy {self.augmentation!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown learning-rate schedule {self.lr_schedule!r}")
        if self.augment_copies < 1:
            raise ValueError("augment_copies must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch size and learning rate must be positive")

    def with_(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class TrainReport:
    stage: str
    seed: int
    initial_loss: float
    losses: list[float] = field(default_factory=list)
    val_dice: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    config: TrainConfig | None = None
    warm_started: bool = False

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def write_csv(self, path) -> None:
        cols = ("background", "vessel", "catheter")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"] + [f"val_dice_{c}" for c in cols])
            for e, loss in enumerate(self.losses, start=1):
                d = self.val_dice[e - 1] if e - 1 < len(self.val_dice) else {}
                w.writerow([e, repr(loss)] + [_fmt(d.get(c)) for c in cols])

    def config_echo(self) -> str:
        lines = [f"stage = {self.stage}", f"seed = {self.seed}",
                 f"warm_started = {self.warm_started}",
                 f"initial_loss = {self.initial_loss!r}",
                 f"wall_clock_s = {self.wall_clock:.3f}"]
        if self.config is not None:
            lines += [f"{k} = {v!r}" for k, v in dataclasses.asdict(self.config).items()]
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "" if v is None else repr(float(v))


# ---------------------------------------------------------------------------
# augmentation

def _rotation_coords(shape, angle_deg, shift):
    """Source coordinates for ``out(p) = in(R^-1 (p - c - shift) + c)``."""
    H, W = shape
    c = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
    a = np.radians(angle_deg)
    cos, sin = np.cos(a), np.sin(a)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dx = xx - c[0] - shift[0]
    dy = yy - c[1] - shift[1]
    sx = cos * dx + sin * dy + c[0]
    sy = -sin * dx + cos * dy + c[1]
    # snap values that are integral up to rounding so exact rotations stay exact
    sx = np.where(np.abs(sx - np.round(sx)) < 1e-9, np.round(sx), sx)
    sy = np.where(np.abs(sy - np.round(sy)) < 1e-9, np.round(sy), sy)
    return sy, sx


def draw_transform(policy: str, rng, rotation_range=45.0, translation_range=10):
    if policy == "none":
        return 0.0, (0, 0)
    angle = float(rng.uniform(-rotation_range, rotation_range))
    shift = (0, 0)
    if policy == "augm1":
        shift = tuple(int(v) for v in rng.integers(-translation_range, translation_range + 1, size=2))
    return angle, shift


def apply_transform(frame, mask, angle, shift):
    """Rotate about the image centre by ``angle`` degrees, then shift; zero fill."""
    frame = np.asarray(frame)
    if angle == 0.0 and shift == (0, 0):
        return frame.copy(), None if mask is None else np.asarray(mask).copy()
    sy, sx = _rotation_coords(frame.shape, angle, shift)
    f = ndimage.map_coordinates(frame, [sy, sx], order=1, mode="constant", cval=0.0)
    f = np.clip(f, 0.0, 1.0)
    m = None
    if mask is not None:
        mask = np.asarray(mask)
        m = ndimage.map_coordinates(mask.astype(np.int16), [sy, sx], order=0,
                                    mode="constant", cval=0).astype(mask.dtype)
    return f, m


def rotate_flow(u, angle, shift):
    """Transform a flow field consistently with :func:`apply_transform` on both frames."""
    if angle == 0.0 and shift == (0, 0):
        return np.array(u, dtype=np.float64)
    sy, sx = _rotation_coords(u.shape[:2], angle, shift)
    comps = [ndimage.map_coordinates(u[..., k], [sy, sx], order=1, mode="constant", cval=0.0)
             for k in range(2)]
    a = np.radians(angle)
    cos, sin = np.cos(a), np.sin(a)
    return np.stack([cos * comps[0] - sin * comps[1], sin * comps[0] + cos * comps[1]], axis=-1)


def augment(frame, mask, policy: str, rng, rotation_range=45.0, translation_range=10):
    """Apply one random transform of ``policy`` to a frame and its mask."""
    if policy not in POLICIES:
        raise ValueError(f"unknown augmentation policy {policy!r}")
    angle, shift = draw_transform(policy, rng, rotation_range, translation_range)
    return apply_transform(frame, mask, angle, shift)


# ---------------------------------------------------------------------------
# generic loop

def _check(loss):
    if not np.isfinite(loss):
        raise NumericalError(f"loss became non-finite ({loss})")


def learning_rate(cfg: TrainConfig, step: int, steps: int) -> float:
    """Rate for update ``step`` (0-based) of ``steps``."""
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * step / steps))


def _fit(params: UNetParams, n: int, batch_loss: Callable, cfg: TrainConfig,
         validate: Callable | None, report: TrainReport, copies: int = 1):
    rng = np.random.default_rng([cfg.seed, 2])
    state = AdamState.zeros(params)
    total_n = n * copies
    steps = cfg.epochs * -(-total_n // cfg.batch_size)
    for _ in range(cfg.epochs):
        # sample k >= n is random transform number k // n of frame k % n
        order = rng.permutation(total_n)
        total = 0.0
        for start in range(0, total_n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = batch_loss(params, idx, rng)
            _check(loss)
            params, state = nnet.adam_step(params, grads, state,
                                           lr=learning_rate(cfg, state.step, steps))
            if not np.all(np.isfinite(params.data)):
                raise NumericalError("parameters became non-finite")
            total += loss * len(idx)
        report.losses.append(total / total_n)
        if validate is not None:
            report.val_dice.append(validate(params))
    return params


def _initial(net_cfg, init, classes, seed):
    if init is None:
        return nnet.init_params(net_cfg.with_classes(classes), seed), False
    if init.cfg.out_classes != classes:
        return init.with_head(classes, seed), True
    return init.copy(), True


def _augmented_batch(frames, masks, idx, cfg: TrainConfig, rng):
    n = len(frames)
    xs, ys = [], []
    for i in idx:
        f, m = frames[i % n], masks[i % n]
        if cfg.augmentation != "none" and i >= n:
            f, m = augment(f, m, cfg.augmentation, rng, cfg.rotation_range, cfg.translation_range)
        xs.append(f)
        ys.append(m)
    return np.stack(xs), np.stack(ys)


def _mean_loss(params, frames, targets, loss_fn, batch=16):
    total = 0.0
    for s in range(0, len(frames), batch):
        probs, _ = nnet.forward(params, frames[s:s + batch], keep_cache=False)
        total += loss_fn(probs, targets[s:s + batch])[0] * len(probs)
    return total / len(frames)


def _dice_validator(val, multiclass):
    """Per-class validation Dice after each epoch, or ``None`` without a split.

    Classes absent from both prediction and truth in every frame are
    reported as ``None``; binary nets report no catheter score.
    """
    if val is None:
        return None
    from .evalmetrics import aggregate, dice, per_class_dice

    frames, labels = val
    truth = np.asarray(labels) if multiclass else foreground(labels).astype(np.uint8)

    def run(params):
        # binary nets predict 0/1, which reads as background/vessel here
        preds = infer_batch(params, frames)
        agg = aggregate([per_class_dice(p, t) for p, t in zip(preds, truth)])
        bg = float(np.mean([dice(p == BACKGROUND, t == BACKGROUND) for p, t in zip(preds, truth)]))
        return {"background": bg, "vessel": agg.vessel,
                "catheter": agg.catheter if multiclass else None}

    return run


# ---------------------------------------------------------------------------
# stages

def train_binary(frames, masks, cfg: TrainConfig = TrainConfig(),
                 net_cfg: UNetConfig = nnet.DESK, init: UNetParams | None = None,
                 val=None) -> tuple[UNetParams, TrainReport]:
    """Fit a sigmoid-head U-Net to binary masks with BCE."""
    frames = np.asarray(frames, dtype=np.float32)
    masks = np.asarray(masks, dtype=bool)
    if len(frames) == 0 or frames.shape != masks.shape:
        raise ValueError("need a non-empty dataset with masks aligned to frames")
    t0 = time.perf_counter()
    params, warm = _initial(net_cfg, init, 1, cfg.seed)
    report = TrainReport("binary", cfg.seed, _mean_loss(params, frames, masks, nnet.bce_loss),
                         config=cfg, warm_started=warm)

    def batch_loss(p, idx, rng):
        x, y = _augmented_batch(frames, masks, idx, cfg, rng)
        probs, cache = nnet.forward(p, x)
        loss, g = nnet.bce_loss(probs, y)
        return loss, nnet.backward(p, cache, g)

    copies = cfg.augment_copies if cfg.augmentation != "none" else 1
    params = _fit(params, len(frames), batch_loss, cfg, _dice_validator(val, False), report, copies)
    report.wall_clock = time.perf_counter() - t0
    return params, report


def train_multiclass(frames, labels, cfg: TrainConfig = TrainConfig(stage="multiclass"),
                     net_cfg: UNetConfig = nnet.DESK, init: UNetParams | None = None,
                     val=None) -> tuple[UNetParams, TrainReport]:
    """Fit a softmax-head U-Net with categorical cross-entropy.

    With ``init`` the network is warm-started (a binary checkpoint gets a new
    3-class head); this is also how fine-tuning on curated labels is done.
    """
    frames = np.asarray(frames, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.uint8)
    if len(frames) == 0 or frames.shape != labels.shape:
        raise ValueError("need a non-empty dataset with labels aligned to frames")
    t0 = time.perf_counter()
    params, warm = _initial(net_cfg, init, 3, cfg.seed)
    report = TrainReport("multiclass", cfg.seed, _mean_loss(params, frames, labels, nnet.cce_loss),
                         config=cfg, warm_started=warm)

    def batch_loss(p, idx, rng):
        x, y = _augmented_batch(frames, labels, idx, cfg, rng)
        probs, cache = nnet.forward(p, x)
        loss, g = nnet.cce_loss(probs, y)
        return loss, nnet.backward(p, cache, g)

    copies = cfg.augment_copies if cfg.augmentation != "none" else 1
    params = _fit(params, len(frames), batch_loss, cfg, _dice_validator(val, True), report, copies)
    report.wall_clock = time.perf_counter() - t0
    return params, report


def siamese_loss_and_grad(params: UNetParams, f_t, f_next, flows, labels, grad: bool = True):
    """Siamese loss over a batch of pairs and the gradient of the shared weights.

    Both branches run as one batch through the same parameters, so the
    returned gradient is the sum of the two branch gradients. With
    ``grad=False`` only the loss is computed and ``None`` is returned for it.
    """
    f_t = np.asarray(f_t)
    B = len(f_t)
    probs, cache = nnet.forward(params, np.concatenate([f_t, np.asarray(f_next)]),
                                keep_cache=grad)
    s_t, s_next = probs[:B], probs[B:]
    warped, samplers = [], []
    for i in range(B):
        w, smp = warp_probs(s_next[i], flows[i], return_sampler=True)
        warped.append(w)
        samplers.append(smp)
    warped = np.stack(warped).astype(probs.dtype)
    loss, g_t, g_w = nnet.cce_loss_siamese(s_t, warped, labels)
    if not grad:
        return loss, None
    g_next = np.stack([warp_probs_backward(s_next[i], samplers[i], g_w[i]) for i in range(B)])
    grad_probs = np.concatenate([g_t, g_next.astype(probs.dtype)])
    return loss, nnet.backward(params, cache, grad_probs)


def train_siamese(pairs, cfg: TrainConfig = TrainConfig(stage="siamese"),
                  net_cfg: UNetConfig = nnet.DESK, init: UNetParams | None = None,
                  val=None) -> tuple[UNetParams, TrainReport]:
    """Train the shared-weight pair network.

    ``pairs`` is ``(f_t, f_t_plus_dt, flow, y_t)`` stacked along axis 0, with
    ``flow`` mapping the grid of ``f_t`` into ``f_t_plus_dt``.
    """
    f_t, f_n, flows, labels = (np.asarray(a) for a in pairs)
    f_t = f_t.astype(np.float32)
    f_n = f_n.astype(np.float32)
    labels = labels.astype(np.uint8)
    if len(f_t) == 0 or not (f_t.shape == f_n.shape == labels.shape == flows.shape[:3]):
        raise ValueError("pair arrays must be non-empty and aligned")
    t0 = time.perf_counter()
    params, warm = _initial(net_cfg, init, 3, cfg.seed)

    def batch_loss(p, idx, rng):
        k = idx % len(f_t)
        a, b, u, y = f_t[k], f_n[k], flows[k], labels[k]
        if cfg.augmentation != "none":
            a, b, u, y = _augment_pairs(a, b, u, y, cfg, rng, idx >= len(f_t))
        return siamese_loss_and_grad(p, a, b, u, y)

    init_loss = 0.0
    for s in range(0, len(f_t), 8):
        sl = slice(s, s + 8)
        loss, _ = siamese_loss_and_grad(params, f_t[sl], f_n[sl], flows[sl], labels[sl], grad=False)
        init_loss += loss * len(f_t[sl])
    report = TrainReport("siamese", cfg.seed, init_loss / len(f_t), config=cfg, warm_started=warm)
    copies = cfg.augment_copies if cfg.augmentation != "none" else 1
    params = _fit(params, len(f_t), batch_loss, cfg, _dice_validator(val, True), report, copies)
    report.wall_clock = time.perf_counter() - t0
    return params, report


def _augment_pairs(a, b, u, y, cfg, rng, transform):
    out = ([], [], [], [])
    for i in range(len(a)):
        angle, shift = (draw_transform(cfg.augmentation, rng, cfg.rotation_range,
                                       cfg.translation_range) if transform[i] else (0.0, (0, 0)))
        fa, ya = apply_transform(a[i], y[i], angle, shift)
        fb, _ = apply_transform(b[i], None, angle, shift)
        for lst, v in zip(out, (fa, fb, rotate_flow(u[i], angle, shift), ya)):
            lst.append(v)
    return tuple(np.stack(v) for v in out)


def sample_pairs(sequences, labels, flow_fn, cfg: TrainConfig, max_pairs=None):
    """Draw ``(f_t, f_t+dt, flow, y_t)`` tuples with ``dt`` from ``cfg.dt_range``.

    ``flow_fn(seq_index, t, t2)`` supplies the flow; ``labels[k][t]`` the
    targets for frame ``t`` of sequence ``k``.
    """
    rng = np.random.default_rng([cfg.seed, 3])
    a, b, u, y = [], [], [], []
    for k, seq in enumerate(sequences):
        T = len(seq)
        for t in range(T):
            dts = [d for d in cfg.dt_range if t + d < T]
            if not dts:
                continue
            dt = int(rng.choice(dts))
            a.append(seq.frames[t])
            b.append(seq.frames[t + dt])
            u.append(flow_fn(k, t, t + dt))
            y.append(labels[k][t])
    idx = np.arange(len(a))
    if max_pairs is not None and len(idx) > max_pairs:
        idx = np.sort(rng.choice(idx, max_pairs, replace=False))
    return (np.stack([a[i] for i in idx]), np.stack([b[i] for i in idx]),
            np.stack([u[i] for i in idx]), np.stack([y[i] for i in idx]))


# ---------------------------------------------------------------------------
# inference

def infer(params: UNetParams, frame, cc: bool = False, min_area: int | None = None,
          connectivity: int = 8):
    """Per-pixel argmax labels and class probabilities for one frame.

    A sigmoid head is read as two classes ``(1 - p, p)``, so its labels are
    0/1. Ties go to the lower class index. With ``cc`` small foreground
    components are reset to background.
    """
    frame = np.asarray(frame, dtype=np.float64)
    size = params.cfg.input_size
    orig = frame.shape
    if orig != (size, size):
        frame = resize_frame(frame, size, size)
    probs = nnet.unet_forward(params, frame)
    if probs.shape[-1] == 1:
        labels = (probs[..., 0] > 0.5).astype(np.uint8)
    else:
        labels = np.argmax(probs, axis=-1).astype(np.uint8)
    if orig != (size, size):
        labels = resize_labels(labels, orig[1], orig[0])
    if cc:
        labels = cc_postprocess(labels, min_area, connectivity)
    return labels, probs


def cc_postprocess(labels, min_area: int | None = None, connectivity: int = 8):
    """Remove small components of the foreground union."""
    labels = np.asarray(labels)
    if min_area is None:
        min_area = default_min_area(labels.shape)
    keep = filter_small_components(labels != BACKGROUND, min_area, connectivity)
    return np.where(keep, labels, BACKGROUND).astype(np.uint8)


def infer_batch(params: UNetParams, frames, batch=16):
    """Argmax labels for a stack of frames already at network size."""
    out = []
    frames = np.asarray(frames)
    for s in range(0, len(frames), batch):
        probs, _ = nnet.forward(params, frames[s:s + batch], keep_cache=False)
        if probs.shape[-1] == 1:
            out.append((probs[..., 0] > 0.5).astype(np.uint8))
        else:
            out.append(np.argmax(probs, axis=-1).astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0,) + frames.shape[1:], np.uint8)
