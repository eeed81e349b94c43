"""RoI Align pooling of boxes into flat feature vectors, and L2 normalisation.

Pooling is linear in the feature map, so it is expressed as a sparse matrix
``S`` of shape ``(K * out * out, h * w)``: ``pooled = fmap_flat @ S.T`` and
the gradient w.r.t. the map is ``d_pooled @ S``.

Sampling follows the non-aligned convention: an image coordinate ``x`` maps to
``x / stride`` on the feature grid and map entry ``[i, j]`` sits at ``(j, i)``.
A sample point with ``y < -1``, ``y > h``, ``x < -1`` or ``x > w`` reads 0;
other points are clamped into the grid before bilinear interpolation.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .netcore import STRIDE

OUT_SIZE = 4
SAMPLING = 2
NORM_EPS = 1e-12


def _bilinear_taps(y, x, h, w):
    """Flat indices and weights of the four bilinear neighbours of each point."""
    valid = (y >= -1.0) & (y <= h) & (x >= -1.0) & (x <= w)
    y = np.clip(y, 0.0, None)
    x = np.clip(x, 0.0, None)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    top = y0 >= h - 1
    left = x0 >= w - 1
    y0 = np.where(top, h - 1, y0)
    x0 = np.where(left, w - 1, x0)
    y = np.where(top, y0, y)
    x = np.where(left, x0, x)
    y1 = np.where(top, y0, y0 + 1)
    x1 = np.where(left, x0, x0 + 1)
    ly, lx = y - y0, x - x0
    hy, hx = 1.0 - ly, 1.0 - lx
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=-1)
    wts = np.stack([hy * hx, hy * lx, ly * hx, ly * lx], axis=-1) * valid[..., None]
    return idx, wts, valid


def roi_align_matrix(boxes, map_hw, stride=STRIDE, out_size=OUT_SIZE, sampling=SAMPLING):
    """Sparse pooling operator for ``boxes`` on a map of spatial size ``map_hw``.

    Returns ``(S, degenerate)`` where ``degenerate[k]`` is True when every sample
    point of box ``k`` fell outside the map (its pooled vector is all zeros).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    h, w = map_hw
    k = len(boxes)
    scaled = boxes / stride
    bw = (scaled[:, 2] - scaled[:, 0]) / out_size
    bh = (scaled[:, 3] - scaled[:, 1]) / out_size
    # Offsets of sample points inside the grid, in bin units.
    pos = (np.arange(out_size)[:, None] + (np.arange(sampling)[None, :] + 0.5) / sampling).ravel()
    ys = scaled[:, 1, None] + pos[None, :] * bh[:, None]  # k, out*sampling
    xs = scaled[:, 0, None] + pos[None, :] * bw[:, None]
    yy = np.broadcast_to(ys[:, :, None], (k, ys.shape[1], xs.shape[1]))
    xx = np.broadcast_to(xs[:, None, :], (k, ys.shape[1], xs.shape[1]))
    idx, wts, valid = _bilinear_taps(yy, xx, h, w)
    # Row of each sample: box, bin-y, bin-x; samples in a bin are averaged.
    by = np.arange(out_size * sampling) // sampling
    rows = (
        np.arange(k)[:, None, None] * out_size * out_size
        + by[None, :, None] * out_size
        + by[None, None, :]
    )
    rows = np.broadcast_to(rows[..., None], idx.shape)
    mat = sparse.csr_matrix(
        (wts.ravel() / sampling**2, (rows.ravel(), idx.ravel())),
        shape=(k * out_size * out_size, h * w),
    )
    degenerate = ~valid.reshape(k, -1).any(axis=1)
    return mat, degenerate


def roi_align(fmap, boxes, stride=STRIDE, out_size=OUT_SIZE, sampling=SAMPLING):
    """Pool ``boxes`` from a ``(C, h, w)`` map into ``(K, C * out * out)`` vectors.

    Vectors are flattened channel-major. A single box of shape ``(4,)`` gives a
    ``(1, C * out * out)`` result.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    c, h, w = fmap.shape
    mat, _ = roi_align_matrix(boxes, (h, w), stride, out_size, sampling)
    return pool_with(mat, fmap, out_size)


def pool_with(mat, fmap, out_size=OUT_SIZE):
    c = fmap.shape[0]
    pooled = (mat @ fmap.reshape(c, -1).T)  # K*out*out, C
    k = mat.shape[0] // (out_size * out_size)
    return pooled.reshape(k, out_size * out_size, c).transpose(0, 2, 1).reshape(k, -1)


def roi_align_backward(mat, grad, fmap_shape, out_size=OUT_SIZE):
    """Gradient w.r.t. the ``(C, h, w)`` map given ``grad`` on the pooled vectors."""
    c, h, w = fmap_shape
    g = np.asarray(grad, dtype=np.float64).reshape(-1, c, out_size * out_size)
    g = g.transpose(0, 2, 1).reshape(-1, c)
    return np.asarray(mat.T @ g).T.reshape(c, h, w)


def l2_normalize(v, eps=NORM_EPS):
    """Row-wise unit vectors plus a per-row flag for norms below ``eps``.

    Degenerate rows come back as exact zeros.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    v2 = np.atleast_2d(v)
    norms = np.linalg.norm(v2, axis=1)
    degenerate = norms < eps
    out = np.zeros_like(v2)
    ok = ~degenerate
    out[ok] = v2[ok] / norms[ok, None]
    if single:
        return out[0], bool(degenerate[0])
    return out, degenerate


def l2_normalize_backward(v, grad, eps=NORM_EPS):
    """Vector-Jacobian product of :func:`l2_normalize` (zero for degenerate rows)."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    grad = np.atleast_2d(np.asarray(grad, dtype=np.float64))
    norms = np.linalg.norm(v, axis=1)
    out = np.zeros_like(v)
    ok = norms >= eps
    y = v[ok] / norms[ok, None]
    g = grad[ok]
    out[ok] = (g - y * np.sum(y * g, axis=1, keepdims=True)) / norms[ok, None]
    return out
