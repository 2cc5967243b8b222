"""A small from-scratch U-Net in numpy: forward pass, exact backward pass, Adam.

Activations are channel-first ``(C, N, H, W)`` internally; inputs are
``(N, H, W)`` frames and outputs ``(N, H, W, classes)``. Every parameter lives in one flat vector
(:class:`UNetParams`), so optimizer state, checksums and finite-difference
checks all work on plain 1-D arrays. Per-layer kernels are views of shape
``(out, in, k, k)``.

Architecture for ``levels = L``, ``convs_per_level = C`` and features
``F_k = base * 2**k``::

    encoder k = 0..L-1 :  C x (conv3x3 + ReLU) -> F_k, keep skip, maxpool 2x2
    bottleneck          :  C x (conv3x3 + ReLU) -> F_L
    decoder k = L-1..0 :  bilinear x2 -> conv3x3 + ReLU -> F_k,
                          concat(skip_k, .) -> C x (conv3x3 + ReLU) -> F_k
    head                :  conv1x1 -> classes, sigmoid (1) or softmax (>1)
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import linear_resample_matrix

EPS = 1e-7


class NumericalError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class ChecksumError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    input_size: int = 64
    levels: int = 3
    convs_per_level: int = 2
    base_features: int = 8
    out_classes: int = 3

    def __post_init__(self):
        if self.levels < 1 or self.convs_per_level < 1 or self.base_features < 1:
            raise ValueError("levels, convs_per_level and base_features must be >= 1")
        if self.input_size % (2 ** self.levels):
            raise ValueError(f"input size {self.input_size} not divisible by 2**{self.levels}")
        if self.out_classes < 1:
            raise ValueError("out_classes must be >= 1")

    def features(self, k: int) -> int:
        return self.base_features * 2 ** k

    @property
    def bottleneck_features(self) -> int:
        return self.features(self.levels)

    def with_classes(self, out_classes: int) -> "UNetConfig":
        return UNetConfig(self.input_size, self.levels, self.convs_per_level,
                          self.base_features, out_classes)


DESK = UNetConfig(64, 3, 2, 8, 3)
PAPER = UNetConfig(256, 4, 3, 64, 3)


class ConvSpec(NamedTuple):
    name: str
    cin: int
    cout: int
    k: int


def layer_specs(cfg: UNetConfig) -> list[ConvSpec]:
    """Convolution layers in serialization order."""
    F, C, L = cfg.features, cfg.convs_per_level, cfg.levels
    specs = []
    for k in range(L):
        for j in range(C):
            cin = (1 if k == 0 else F(k - 1)) if j == 0 else F(k)
            specs.append(ConvSpec(f"enc{k}.conv{j}", cin, F(k), 3))
    for j in range(C):
        specs.append(ConvSpec(f"mid.conv{j}", F(L - 1) if j == 0 else F(L), F(L), 3))
    for k in reversed(range(L)):
        specs.append(ConvSpec(f"dec{k}.up", F(k + 1), F(k), 3))
        for j in range(C):
            specs.append(ConvSpec(f"dec{k}.conv{j}", 2 * F(k) if j == 0 else F(k), F(k), 3))
    specs.append(ConvSpec("head", F(0), cfg.out_classes, 1))
    return specs


class UNetParams:
    """All kernels and biases of one network in a single flat vector.

    For each layer the kernel ``(out, in, k, k)`` comes first, then the bias.
    """

    def __init__(self, cfg: UNetConfig, data: np.ndarray | None = None, dtype=np.float32):
        self.cfg = cfg
        self.specs = layer_specs(cfg)
        self.offsets = []
        n = 0
        for s in self.specs:
            nw = s.cout * s.cin * s.k * s.k
            self.offsets.append((n, n + nw, n + nw + s.cout))
            n += nw + s.cout
        if data is None:
            data = np.zeros(n, dtype=dtype)
        data = np.asarray(data)
        if data.shape != (n,):
            raise ConfigMismatchError(f"expected {n} parameters, got {data.shape}")
        self.data = data

    def __len__(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        s = self.specs[i]
        a, b, c = self.offsets[i]
        return self.data[a:b].reshape(s.cout, s.cin, s.k, s.k), self.data[b:c]

    def copy(self) -> "UNetParams":
        return UNetParams(self.cfg, self.data.copy())

    def astype(self, dtype) -> "UNetParams":
        return UNetParams(self.cfg, self.data.astype(dtype))

    def zeros_like(self) -> np.ndarray:
        return np.zeros_like(self.data)

    def with_head(self, out_classes: int, rng=None) -> "UNetParams":
        """Same trunk with an ``out_classes`` head.

        A sigmoid head becomes a softmax head whose background logit is 0
        and whose foreground logits all equal the old logit minus
        ``log(out_classes - 1)``: the foreground probability is unchanged and
        the foreground classes start out tied. Other heads are re-initialized.
        """
        new = init_params(self.cfg.with_classes(out_classes), rng, dtype=self.dtype)
        new.data[: new.offsets[-1][0]] = self.data[: self.offsets[-1][0]]
        if self.cfg.out_classes == 1 and out_classes > 1:
            W_old, b_old = self.layer(len(self.specs) - 1)
            W, b = new.layer(len(new.specs) - 1)
            W[0] = 0.0
            b[0] = 0.0
            W[1:] = W_old[0]
            b[1:] = b_old[0] - np.log(out_classes - 1)
        return new


def init_params(cfg: UNetConfig, rng=None, dtype=np.float32) -> UNetParams:
    """Fan-in scaled uniform kernels, zero biases."""
    rng = np.random.default_rng(rng)
    p = UNetParams(cfg, dtype=np.float64)
    for i, s in enumerate(p.specs):
        W, _ = p.layer(i)
        bound = np.sqrt(6.0 / (s.cin * s.k * s.k))
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    return p.astype(dtype)


# ---------------------------------------------------------------------------
# layers; activations are stored channel-first as (C, N, H, W)

def _tap_ranges(k, n_flat, row):
    """Flat offsets of each kernel tap and the output range it is valid on."""
    r = k // 2
    for ky in range(k):
        for kx in range(k):
            off = (ky - r) * row + (kx - r)
            lo, hi = max(0, -off), n_flat - max(0, off)
            yield ky, kx, off, lo, hi


def conv_forward(x, W, b):
    """Same-size zero-padded convolution.

    Each tap is one matrix product on the flattened padded input shifted by
    the tap's flat offset; outputs on the padding ring are discarded. Returns
    the output and the flattened padded input for the backward pass.
    """
    C, N, H, Wd = x.shape
    o, _, k, _ = W.shape
    if k == 1:
        xf = x.reshape(C, -1)
        y = W.reshape(o, C) @ xf + b[:, None]
        return y.reshape(o, N, H, Wd), xf
    r = k // 2
    xf = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r))).reshape(C, -1)
    n = xf.shape[1]
    y = np.empty((o, n), dtype=x.dtype)
    y[...] = b[:, None]
    if C < 4:
        # too few channels for per-tap products; one product on stacked shifts
        cols = np.zeros((k, k, C, n), dtype=x.dtype)
        for ky, kx, off, lo, hi in _tap_ranges(k, n, Wd + 2 * r):
            cols[ky, kx, :, lo:hi] = xf[:, lo + off:hi + off]
        y += W.transpose(0, 2, 3, 1).reshape(o, -1) @ cols.reshape(-1, n)
    else:
        taps = np.ascontiguousarray(W.transpose(2, 3, 0, 1))  # BLAS needs contiguous blocks
        for ky, kx, off, lo, hi in _tap_ranges(k, n, Wd + 2 * r):
            y[:, lo:hi] += taps[ky, kx] @ xf[:, lo + off:hi + off]
    y = y.reshape(o, N, H + 2 * r, Wd + 2 * r)[:, :, r:r + H, r:r + Wd]
    return np.ascontiguousarray(y), xf


def conv_backward(gy, xf, x_shape, W):
    C, N, H, Wd = x_shape
    o, _, k, _ = W.shape
    if k == 1:
        g = gy.reshape(o, -1)
        return (W.reshape(o, C).T @ g).reshape(x_shape), (g @ xf.T).reshape(W.shape), g.sum(1)
    r = k // 2
    gp = np.zeros((o, N, H + 2 * r, Wd + 2 * r), dtype=gy.dtype)
    gp[:, :, r:r + H, r:r + Wd] = gy
    gf = gp.reshape(o, -1)
    dW = np.empty((k, k, o, C), dtype=W.dtype)
    taps_t = np.ascontiguousarray(W.transpose(2, 3, 1, 0))
    dxf = np.zeros_like(xf)
    for ky, kx, off, lo, hi in _tap_ranges(k, xf.shape[1], Wd + 2 * r):
        dW[ky, kx] = gf[:, lo:hi] @ xf[:, lo + off:hi + off].T
        dxf[:, lo + off:hi + off] += taps_t[ky, kx] @ gf[:, lo:hi]
    dW = dW.transpose(2, 3, 0, 1)
    dx = dxf.reshape(C, N, H + 2 * r, Wd + 2 * r)[:, :, r:r + H, r:r + Wd]
    return dx, dW, gy.sum(axis=(1, 2, 3))


def maxpool_forward(x):
    C, N, H, W = x.shape
    xr = x.reshape(C, N, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        C, N, H // 2, W // 2, 4)
    idx = np.argmax(xr, axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool_backward(gy, idx, x_shape):
    C, N, H, W = x_shape
    g4 = np.zeros(gy.shape + (4,), dtype=gy.dtype)
    np.put_along_axis(g4, idx[..., None], gy[..., None], axis=-1)
    return g4.reshape(C, N, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


_UPSAMPLE_CACHE: dict = {}


def _up_matrix(n, dtype):
    key = (n, np.dtype(dtype).str)
    if key not in _UPSAMPLE_CACHE:
        _UPSAMPLE_CACHE[key] = linear_resample_matrix(n, 2 * n).astype(dtype)
    return _UPSAMPLE_CACHE[key]


def upsample_forward(x):
    """Bilinear x2 (half-pixel centres, clamped edges) as two separable products."""
    Uh = _up_matrix(x.shape[2], x.dtype)
    Uw = _up_matrix(x.shape[3], x.dtype)
    return np.matmul(Uh, x @ Uw.T)


def upsample_backward(gy):
    Uh = _up_matrix(gy.shape[2] // 2, gy.dtype)
    Uw = _up_matrix(gy.shape[3] // 2, gy.dtype)
    return np.matmul(Uh.T, gy) @ Uw


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# network

def _as_batch(x, cfg: UNetConfig, dtype):
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.input_size, cfg.input_size):
        raise ValueError(f"input of shape {x.shape[-2:]} does not match "
                         f"network size {cfg.input_size}")
    return x[None]


def forward(params: UNetParams, x, keep_cache: bool = True):
    """Batched forward pass. ``x`` is (H, W) or (N, H, W); returns (N, H, W, C)."""
    cfg = params.cfg
    h = _as_batch(x, cfg, params.dtype)
    tape = []  # (op, payload) in execution order
    layer = iter(range(len(params.specs)))

    def conv_relu(h, relu=True):
        i = next(layer)
        W, b = params.layer(i)
        y, xf = conv_forward(h, W, b)
        mask = None
        if relu:
            mask = y > 0
            y = y * mask
        if keep_cache:
            tape.append(("conv", (i, xf, h.shape, mask)))
        return y

    skips = []
    for k in range(cfg.levels):
        for _ in range(cfg.convs_per_level):
            h = conv_relu(h)
        skips.append(h)
        shape = h.shape
        h, idx = maxpool_forward(h)
        if keep_cache:
            tape.append(("pool", (idx, shape)))
    for _ in range(cfg.convs_per_level):
        h = conv_relu(h)
    for k in reversed(range(cfg.levels)):
        h = upsample_forward(h)
        if keep_cache:
            tape.append(("up", None))
        h = conv_relu(h)
        skip = skips[k]
        h = np.concatenate([skip, h], axis=0)
        if keep_cache:
            tape.append(("cat", skip.shape[0]))
        for _ in range(cfg.convs_per_level):
            h = conv_relu(h)
    z = conv_relu(h, relu=False)
    probs = sigmoid(z) if cfg.out_classes == 1 else softmax(z, axis=0)
    probs = np.moveaxis(probs, 0, -1)
    return probs, (tape, probs)


def backward(params: UNetParams, cache, grad_probs) -> np.ndarray:
    """Gradient of the loss w.r.t. the flat parameter vector.

    ``grad_probs`` is dLoss/dProbs with the same shape as the forward output.
    """
    tape, probs = cache
    cfg = params.cfg
    g = np.asarray(grad_probs, dtype=params.dtype)
    if g.shape != probs.shape:
        raise ValueError(f"gradient shape {g.shape} does not match output {probs.shape}")
    if cfg.out_classes == 1:
        g = g * probs * (1.0 - probs)
    else:
        g = probs * (g - np.sum(g * probs, axis=-1, keepdims=True))
    g = np.ascontiguousarray(np.moveaxis(g, -1, 0))
    grads = params.zeros_like()
    skip_grads = []
    for op, payload in reversed(tape):
        if op == "conv":
            i, xf, x_shape, mask = payload
            if mask is not None:
                g = g * mask
            W, _ = params.layer(i)
            g, dW, db = conv_backward(g, xf, x_shape, W)
            a, b, c = params.offsets[i]
            grads[a:b] += dW.ravel()
            grads[b:c] += db
        elif op == "cat":
            n_skip = payload
            skip_grads.append(g[:n_skip])
            g = g[n_skip:]
        elif op == "up":
            g = upsample_backward(g)
        elif op == "pool":
            idx, shape = payload
            g = maxpool_backward(g, idx, shape)
            # the decoder consumed this level's skip last, so it is on top
            g = g + skip_grads.pop()
    return grads


def unet_forward(params: UNetParams, f) -> np.ndarray:
    """Class probabilities (H, W, C) for a single frame."""
    probs, _ = forward(params, f, keep_cache=False)
    return probs[0]


def unet_backward(params: UNetParams, f, grad_probs) -> np.ndarray:
    """Recompute the forward pass for ``f`` and backpropagate ``grad_probs``."""
    probs, cache = forward(params, f)
    return backward(params, cache, np.asarray(grad_probs).reshape(probs.shape))


# ---------------------------------------------------------------------------
# losses (mean over all pixels of the batch)

def bce_loss(pred, target):
    """Binary cross-entropy and its gradient w.r.t. ``pred``.

    ``pred`` holds foreground probabilities with a trailing channel of size 1;
    ``target`` is a boolean mask without it.
    """
    pred = np.asarray(pred)
    t = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    p = np.clip(pred, EPS, 1.0 - EPS)
    n = p.size
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    grad = (-t / p + (1.0 - t) / (1.0 - p)) / n
    grad = np.where((pred > EPS) & (pred < 1.0 - EPS), grad, 0.0).astype(pred.dtype)
    return float(loss), grad


def cce_loss_siamese(s_t, s_warped, labels):
    """``-sum_c y_c [log s_t,c + log s'_c]`` averaged over pixels.

    Returns ``(loss, grad_s_t, grad_s_warped)``.
    """
    s_t = np.asarray(s_t)
    s_w = np.asarray(s_warped)
    y = np.eye(s_t.shape[-1], dtype=s_t.dtype)[np.asarray(labels)]
    n = int(np.prod(s_t.shape[:-1]))
    pt = np.clip(s_t, EPS, 1.0)
    pw = np.clip(s_w, EPS, 1.0)
    loss = -np.sum(y * (np.log(pt) + np.log(pw))) / n
    g_t = np.where(s_t > EPS, -y / pt / n, 0.0).astype(s_t.dtype)
    g_w = np.where(s_w > EPS, -y / pw / n, 0.0).astype(s_w.dtype)
    return float(loss), g_t, g_w


def cce_loss(s, labels):
    """Plain categorical cross-entropy (the first term of the Siamese loss)."""
    s = np.asarray(s)
    y = np.eye(s.shape[-1], dtype=s.dtype)[np.asarray(labels)]
    n = int(np.prod(s.shape[:-1]))
    p = np.clip(s, EPS, 1.0)
    loss = -np.sum(y * np.log(p)) / n
    g = np.where(s > EPS, -y / p / n, 0.0).astype(s.dtype)
    return float(loss), g


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, params: UNetParams) -> "AdamState":
        return cls(np.zeros(len(params)), np.zeros(len(params)))


def adam_step(params: UNetParams, grads, state: AdamState, lr=1e-3, beta1=0.9,
              beta2=0.999, eps=1e-8) -> tuple[UNetParams, AdamState]:
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.data.shape:
        raise ValueError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(grads)):
        raise NumericalError("non-finite gradient")
    step = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads ** 2
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    data = params.data - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(params.dtype)
    return UNetParams(params.cfg, data), AdamState(m, v, step)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"UNET"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIQ")


def _config_fields(cfg: UNetConfig):
    return (cfg.input_size, cfg.levels, cfg.convs_per_level, cfg.base_features, cfg.out_classes)


def save_params(params: UNetParams, path) -> None:
    """``UNET`` header, float32 body in layer order, 8-byte BLAKE2b trailer."""
    header = _HEADER.pack(MAGIC, VERSION, *_config_fields(params.cfg), len(params))
    body = params.data.astype("<f4").tobytes()
    digest = hashlib.blake2b(header + body, digest_size=8).digest()
    Path(path).write_bytes(header + body + digest)


def read_checkpoint_config(path) -> UNetConfig:
    data = Path(path).read_bytes()
    magic, version, *fields, _ = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a U-Net checkpoint")
    return UNetConfig(*fields)


def load_params(path, cfg: UNetConfig | None = None) -> UNetParams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 8 or data[:4] != MAGIC:
        raise ValueError(f"{path}: not a U-Net checkpoint")
    payload, digest = data[:-8], data[-8:]
    if hashlib.blake2b(payload, digest_size=8).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch")
    magic, version, *fields, count = _HEADER.unpack_from(payload)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    stored = UNetConfig(*fields)
    if cfg is not None and stored != cfg:
        raise ConfigMismatchError(f"{path}: checkpoint is {stored}, expected {cfg}")
    body = np.frombuffer(payload, dtype="<f4", offset=_HEADER.size)
    if body.size != count:
        raise ChecksumError(f"{path}: parameter count mismatch")
    return UNetParams(stored, body.astype(np.float32))
