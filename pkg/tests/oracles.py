"""Slow, obviously-correct reference implementations used by the tests."""
import math

import numpy as np
import torch


def bilinear_sample(img, y, x):
    """Sample a ``(C, H, W)`` array at normalized ``(y, x)`` with zero padding."""
    c, h, w = img.shape
    py = (y + 1.0) / 2.0 * (h - 1)
    px = (x + 1.0) / 2.0 * (w - 1)
    y0, x0 = math.floor(py), math.floor(px)
    fy, fx = py - y0, px - x0
    out = np.zeros(c, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xx < w:
                out += wy * wx * img[:, yy, xx]
    return out


def brute_warp(img, grid):
    """Per-pixel loop over a ``(H', W', 2)`` grid."""
    img = np.asarray(img, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    th, tw = grid.shape[:2]
    out = np.zeros((img.shape[0], th, tw))
    for i in range(th):
        for j in range(tw):
            out[:, i, j] = bilinear_sample(img, grid[i, j, 0], grid[i, j, 1])
    return out


def brute_affine_grid(a, th, tw):
    a = np.asarray(a, dtype=np.float64)
    g = np.zeros((th, tw, 2))
    for i in range(th):
        for j in range(tw):
            y = 2.0 * i / (th - 1) - 1.0
            x = 2.0 * j / (tw - 1) - 1.0
            g[i, j] = a[:, :2] @ [y, x] + a[:, 2]
    return g


def central_difference(fn, x, eps=1e-3):
    """Numerical gradient of a scalar function of a float64 tensor."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    for k in range(flat.numel()):
        old = flat[k].item()
        flat[k] = old + eps
        fp = float(fn(x))
        flat[k] = old - eps
        fm = float(fn(x))
        flat[k] = old
        grad.view(-1)[k] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))


def disk_eccentricity(mask):
    """Eccentricity of the ellipse with the same second moments as ``mask``."""
    m = np.asarray(mask, dtype=np.float64)
    ys, xs = np.mgrid[0:m.shape[0], 0:m.shape[1]].astype(np.float64)
    total = m.sum()
    cy, cx = (m * ys).sum() / total, (m * xs).sum() / total
    cyy = (m * (ys - cy) ** 2).sum() / total
    cxx = (m * (xs - cx) ** 2).sum() / total
    cxy = (m * (ys - cy) * (xs - cx)).sum() / total
    lam = np.linalg.eigvalsh(np.array([[cyy, cxy], [cxy, cxx]]))
    return float(np.sqrt(max(0.0, 1.0 - lam[0] / lam[1])))
