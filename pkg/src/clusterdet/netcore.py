"""Tiny convolutional feature extractor with a detection head.

Three ``conv3x3(pad 1) -> ReLU -> maxpool2x2`` blocks take a one-channel image
to a 64-channel feature map at stride 8. A 1x1 convolution on that map gives,
for each of ``A`` anchor sizes per cell, one objectness logit and four box
deltas. Everything is float64 numpy with a hand-written reverse pass.

Parameters live in a plain ``dict`` keyed by :data:`PARAM_NAMES`; that order is
also the on-disk checkpoint order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, NumericError

STRIDE = 8
FEATURE_DIM = 64
CHANNELS = (1, 16, 32, 64)
PARAM_NAMES = (
    "conv1.weight", "conv1.bias",
    "conv2.weight", "conv2.bias",
    "conv3.weight", "conv3.bias",
    "head.weight", "head.bias",
)

CHECKPOINT_MAGIC = b"CLUSDET\x00"
CHECKPOINT_VERSION = 1


def param_shapes(n_anchors: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i in range(3):
        cin, cout = CHANNELS[i], CHANNELS[i + 1]
        shapes[f"conv{i + 1}.weight"] = (cout, cin, 3, 3)
        shapes[f"conv{i + 1}.bias"] = (cout,)
    shapes["head.weight"] = (5 * n_anchors, FEATURE_DIM)
    shapes["head.bias"] = (5 * n_anchors,)
    return shapes


def init_params(n_anchors: int, seed: int) -> dict[str, np.ndarray]:
    """He-style fan-in scaled uniform weights, zero biases."""
    if n_anchors < 1:
        raise InputError("n_anchors must be >= 1")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(n_anchors).items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    # Detection head starts small so early objectness is near 0.5 everywhere.
    params["head.weight"] *= 0.1
    return params


def n_anchors_of(params) -> int:
    return params["head.bias"].shape[0] // 5


def zeros_like(params) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _as_batch(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None] if x.shape[0] != 1 else x[None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise InputError(f"expected images shaped (N, 1, H, W); got {x.shape}")
    if x.shape[2] % STRIDE or x.shape[3] % STRIDE:
        raise InputError(f"image dims {x.shape[2:]} must be divisible by {STRIDE}")
    return x


def _wmat(w):
    """(cout, cin, 3, 3) -> (9 * cin, cout), rows ordered (ki, kj, ci)."""
    return w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0])


def conv3x3_forward(x, w, b):
    """Same-padded 3x3 convolution on channel-last ``(N, H, W, C)`` input.

    Returns the output and the im2col matrix kept for the backward pass.
    """
    n, h, wd, c = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate(
        [padded[:, ki:ki + h, kj:kj + wd, :] for ki in range(3) for kj in range(3)], axis=-1
    ).reshape(n * h * wd, 9 * c)
    out = cols @ _wmat(w) + b
    return out.reshape(n, h, wd, -1), cols


def conv3x3_backward(dout, cols, x_shape, w):
    n, h, wd, c = x_shape
    d2 = dout.reshape(-1, w.shape[0])
    dw = (cols.T @ d2).reshape(3, 3, c, w.shape[0]).transpose(3, 2, 0, 1)
    db = d2.sum(axis=0)
    dcols = (d2 @ _wmat(w).T).reshape(n, h, wd, 9, c)
    dpad = np.zeros((n, h + 2, wd + 2, c))
    for ki in range(3):
        for kj in range(3):
            dpad[:, ki:ki + h, kj:kj + wd, :] += dcols[:, :, :, ki * 3 + kj, :]
    return dpad[:, 1:-1, 1:-1, :], dw, db


def maxpool2_forward(x):
    """2x2/2 max-pool on ``(N, H, W, C)``; ties go to the first element in
    row-major window order."""
    quads = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    arg = np.full(out.shape, 3, dtype=np.int8)
    for q in (2, 1, 0):
        arg[quads[q] == out] = q
    return out, arg


def maxpool2_backward(dout, arg, x_shape):
    dx = np.zeros(x_shape)
    for q, (r, c) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, r::2, c::2] = dout * (arg == q)
    return dx


@dataclass
class ForwardResult:
    fmap: np.ndarray  # (N, 64, H/8, W/8)
    objectness: np.ndarray  # (N, A, H/8, W/8)
    deltas: np.ndarray  # (N, 4A, H/8, W/8); anchor a owns channels 4a..4a+3
    cache: list


def forward(params, images, keep_cache: bool = True) -> ForwardResult:
    """Run the extractor and head on one image or a batch of equal-size images."""
    x = _as_batch(images).transpose(0, 2, 3, 1)
    cache = []
    # Overflow is reported below as NumericError, not as a warning.
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, 4):
            w, b = params[f"conv{i}.weight"], params[f"conv{i}.bias"]
            z, cols = conv3x3_forward(x, w, b)
            r = np.maximum(z, 0.0)
            p, arg = maxpool2_forward(r)
            if keep_cache:
                cache.append((x.shape, cols, z > 0, arg))
            x = p
        fmap = np.ascontiguousarray(x.transpose(0, 3, 1, 2))
        a = n_anchors_of(params)
        head = np.einsum("oc,nchw->nohw", params["head.weight"], fmap, optimize=True)
        head += params["head.bias"][None, :, None, None]
    if not np.all(np.isfinite(head)):
        raise NumericError("non-finite network output")
    return ForwardResult(fmap, head[:, :a], head[:, a:], cache)


def backward(params, result: ForwardResult, d_fmap=None, d_obj=None, d_deltas=None):
    """Exact gradient of ``sum(d_fmap*fmap) + sum(d_obj*obj) + sum(d_deltas*deltas)``.

    Any upstream gradient left as ``None`` is treated as zero.
    """
    if not result.cache:
        raise InputError("forward was run without keep_cache")
    fmap = result.fmap
    a = n_anchors_of(params)
    d_head = np.zeros((fmap.shape[0], 5 * a) + fmap.shape[2:])
    if d_obj is not None:
        d_head[:, :a] = d_obj
    if d_deltas is not None:
        d_head[:, a:] = d_deltas
    if d_head.shape[1:] != (5 * a,) + fmap.shape[2:]:
        raise InputError("upstream gradient shape does not match forward output")
    grads = {
        "head.weight": np.einsum("nohw,nchw->oc", d_head, fmap, optimize=True),
        "head.bias": d_head.sum(axis=(0, 2, 3)),
    }
    dx = np.einsum("oc,nohw->nchw", params["head.weight"], d_head, optimize=True)
    if d_fmap is not None:
        if np.shape(d_fmap) != fmap.shape:
            raise InputError("d_fmap shape does not match the feature map")
        dx = dx + d_fmap
    dx = dx.transpose(0, 2, 3, 1)
    for i in range(3, 0, -1):
        x_shape, cols, active, arg = result.cache[i - 1]
        dr = maxpool2_backward(dx, arg, active.shape)
        dz = dr * active
        dx, dw, db = conv3x3_backward(dz, cols, x_shape, params[f"conv{i}.weight"])
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
    return {k: grads[k] for k in PARAM_NAMES}


class SGD:
    """SGD with momentum and L2 weight decay; velocity persists between steps.

    ``v <- momentum * v + g + weight_decay * w``; ``w <- w - lr * v``.
    """

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        if not lr > 0:
            raise InputError(f"lr must be > 0; got {lr}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        new = {}
        for name, w in params.items():
            v = self.velocity.get(name)
            g = grads[name] + self.weight_decay * w
            v = g if v is None else self.momentum * v + g
            w_new = w - self.lr * v
            if not np.all(np.isfinite(w_new)):
                raise NumericError(f"non-finite update for {name}")
            self.velocity[name] = v
            new[name] = w_new
        return new


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, optimizer: SGD | None = None):
    """Functional wrapper over :class:`SGD`; pass ``optimizer`` to keep velocity."""
    opt = optimizer or SGD(lr, momentum, weight_decay)
    return opt.step(params, grads)


def flatten(params) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in PARAM_NAMES])


def unflatten(flat, n_anchors: int) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, shape in param_shapes(n_anchors).items():
        size = int(np.prod(shape))
        out[name] = np.asarray(flat[pos:pos + size], dtype=np.float64).reshape(shape)
        pos += size
    return out


def save_checkpoint(params, path) -> None:
    """Write a 16-byte header then every weight as little-endian float64."""
    header = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, n_anchors_of(params))
    Path(path).write_bytes(header + flatten(params).astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(path, 0, "not a checkpoint file (bad magic)")
    version, n_anchors = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise FormatError(path, 8, f"unsupported checkpoint version {version}")
    expected = sum(int(np.prod(s)) for s in param_shapes(n_anchors).values())
    body = data[16:]
    if len(body) != 8 * expected:
        raise FormatError(path, 16, f"expected {8 * expected} payload bytes, got {len(body)}")
    return unflatten(np.frombuffer(body, dtype="<f8").astype(np.float64), n_anchors)
