"""Slow, obviously-correct reference implementations the tests compare against."""
import numpy as np


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, ho, wo))
    for i in range(n):
        for o in range(oc):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += w[o, ci, dy, dx] * xp[i, ci, y * stride + dy, xx * stride + dx]
                    out[i, o, y, xx] = acc
    return out


def naive_pool(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    arg = np.zeros((n, c, h // 2, w // 2), dtype=int)
    for i in range(n):
        for ch in range(c):
            for y in range(h // 2):
                for xx in range(w // 2):
                    vals = [x[i, ch, 2 * y + a, 2 * xx + b] for a in (0, 1) for b in (0, 1)]
                    k = 0
                    for j, v in enumerate(vals):
                        if v > vals[k]:
                            k = j
                    out[i, ch, y, xx] = vals[k]
                    arg[i, ch, y, xx] = k
    return out, arg


def naive_linear(x, w, b):
    n, k = x.shape
    return np.array([[sum(x[i, t] * w[t, j] for t in range(k)) + b[j] for j in range(w.shape[1])]
                     for i in range(n)])


def naive_gap(grad):
    """Per-map mean of a (1, K, H, W) gradient, one scalar at a time."""
    _, k, h, w = grad.shape
    out = []
    for c in range(k):
        total = 0.0
        for y in range(h):
            for x in range(w):
                total += float(grad[0, c, y, x])
        out.append(total / (h * w))
    return np.array(out)


def naive_cam(alpha, feats):
    k, h, w = feats.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            s = sum(alpha[c] * feats[c, y, x] for c in range(k))
            out[y, x] = s if s > 0 else 0.0
    return out


def fd_feature_gradient(model, feats, sign=1.0, eps=1e-4):
    """Central differences of the class score with the perturbation injected
    directly into the cached last-block activation."""
    grad = np.zeros(feats.shape)
    for idx in np.ndindex(*feats.shape):
        up, dn = feats.copy(), feats.copy()
        up[idx] += eps
        dn[idx] -= eps
        grad[idx] = sign * (model.head_forward(up)[0] - model.head_forward(dn)[0]) / (2 * eps)
    return grad


def laplace_direct(image, mask):
    """Dense solve of the discrete Laplace equation with fixed unmasked values."""
    img = image.astype(np.float64)
    h, w = mask.shape
    idx = -np.ones((h, w), int)
    pts = np.argwhere(mask)
    for k, (y, x) in enumerate(pts):
        idx[y, x] = k
    n = len(pts)
    a = np.zeros((n, n))
    rhs = np.zeros((n,) + img.shape[2:])
    for k, (y, x) in enumerate(pts):
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w:
                a[k, k] += 1
                if mask[ny, nx]:
                    a[k, idx[ny, nx]] -= 1
                else:
                    rhs[k] += img[ny, nx]
    sol = np.linalg.solve(a, rhs)
    out = img.copy()
    out[mask] = sol
    return out
