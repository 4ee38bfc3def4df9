"""Hand-written reference implementations the tests compare against.

Everything here is deliberately naive (explicit loops, no vectorized
shortcuts shared with the package) so a bug in the fast paths cannot
hide in its own oracle.
"""

import numpy as np


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, oh, ow), dtype=np.float64)
    for ni in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[ni, c, i * stride + ki, j * stride + kj] * w[o, c, ki, kj]
                    out[ni, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def naive_conv_transpose2d(x, w, b=None, stride=1, padding=0, output_size=None):
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    oh = (h - 1) * stride + k - 2 * padding
    ow = (wd - 1) * stride + k - 2 * padding
    if output_size is not None:
        oh, ow = output_size
    full_h = max((h - 1) * stride + k, oh + 2 * padding)
    full_w = max((wd - 1) * stride + k, ow + 2 * padding)
    full = np.zeros((n, co, full_h, full_w), dtype=np.float64)
    for ni in range(n):
        for c in range(ci):
            for i in range(h):
                for j in range(wd):
                    for o in range(co):
                        for ki in range(k):
                            for kj in range(k):
                                full[ni, o, i * stride + ki, j * stride + kj] += (
                                    x[ni, c, i, j] * w[c, o, ki, kj]
                                )
    out = full[:, :, padding:padding + oh, padding:padding + ow]
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def naive_maxpool2d(x, window=2):
    n, c, h, w = x.shape
    oh, ow = h // window, w // window
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    best = -np.inf
                    for ki in range(window):
                        for kj in range(window):
                            v = x[ni, ci, i * window + ki, j * window + kj]
                            if v > best:
                                best = v
                    out[ni, ci, i, j] = best
    return out


def naive_upsample_nearest(x, factor=2):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h * factor, w * factor), dtype=x.dtype)
    for i in range(h * factor):
        for j in range(w * factor):
            out[:, :, i, j] = x[:, :, i // factor, j // factor]
    return out


def finite_diff_grad(fn, arr, eps=1e-5):
    """Central differences of a scalar-valued fn w.r.t. every entry of arr.

    ``arr`` is mutated in place entry by entry and restored; fn() must
    re-read it on each call.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = fn()
        flat[i] = keep - eps
        lo = fn()
        flat[i] = keep
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-12)
    return float(np.max(np.abs(a - b) / denom))


def bfs_label(mask):
    """8-connected component labeling by explicit flood fill."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    nxt = 0
    for si in range(h):
        for sj in range(w):
            if mask[si, sj] and labels[si, sj] == 0:
                nxt += 1
                stack = [(si, sj)]
                labels[si, sj] = nxt
                while stack:
                    i, j = stack.pop()
                    for di in (-1, 0, 1):
                        for dj in (-1, 0, 1):
                            ni, nj = i + di, j + dj
                            if (0 <= ni < h and 0 <= nj < w
                                    and mask[ni, nj] and labels[ni, nj] == 0):
                                labels[ni, nj] = nxt
                                stack.append((ni, nj))
    return labels, nxt


def cross_dilate(region, steps):
    """Repeated dilation with the 4-neighbor cross, one explicit pass per step."""
    out = region.copy()
    h, w = region.shape
    for _ in range(steps):
        grown = out.copy()
        for i in range(h):
            for j in range(w):
                if out[i, j]:
                    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        ni, nj = i + di, j + dj
                        if 0 <= ni < h and 0 <= nj < w:
                            grown[ni, nj] = True
        out = grown
    return out


def restricted_dice(pred, mask, keep_small, threshold_px, dilation_steps=2):
    """Size-bucketed Dice recomputed from first principles.

    Selects ground-truth components by area, masks the prediction to the
    dilated bucket region, and evaluates plain Dice by pixel counting.
    Returns None when the bucket is empty.
    """
    labels, count = bfs_label(mask)
    wanted = np.zeros_like(mask, dtype=bool)
    found = False
    for lab in range(1, count + 1):
        area = int((labels == lab).sum())
        inside = area <= threshold_px if keep_small else area > threshold_px
        if inside:
            wanted |= labels == lab
            found = True
    if not found:
        return None
    neigh = cross_dilate(wanted, dilation_steps)
    p = pred & neigh
    inter = int((p & wanted).sum())
    denom = int(p.sum()) + int(wanted.sum())
    if denom == 0:
        return 1.0
    return 2.0 * inter / denom


def reference_adam(theta, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Sequential Adam on a dict of arrays; returns the updated copy.

    ``grads`` is a list of per-step gradient dicts.
    """
    theta = {k: np.array(v, dtype=np.float64, copy=True) for k, v in theta.items()}
    m = {k: np.zeros_like(v) for k, v in theta.items()}
    v = {k: np.zeros_like(val) for k, val in theta.items()}
    for t, gstep in enumerate(grads, start=1):
        for k, g in gstep.items():
            m[k] = beta1 * m[k] + (1 - beta1) * g
            v[k] = beta2 * v[k] + (1 - beta2) * g * g
            mhat = m[k] / (1 - beta1**t)
            vhat = v[k] / (1 - beta2**t)
            theta[k] = theta[k] - lr * mhat / (np.sqrt(vhat) + eps)
    return theta
