"""Shared test utilities: samplers and independent oracle implementations."""

from __future__ import annotations

import math

import numpy as np


def sample_vmf(rng: np.random.Generator, center, kappa: float, n: int) -> np.ndarray:
    """Draw n unit vectors from a von Mises-Fisher distribution on S^2."""
    center = np.asarray(center, dtype=np.float64)
    center = center / np.linalg.norm(center)
    u = rng.random(n)
    w = 1.0 + np.log(u + (1.0 - u) * math.exp(-2.0 * kappa)) / kappa
    phi = rng.random(n) * 2.0 * math.pi
    r = np.sqrt(np.clip(1.0 - w * w, 0.0, None))
    local = np.stack([r * np.cos(phi), r * np.sin(phi), w], axis=-1)
    # rotate +z to the requested center
    z = np.array([0.0, 0.0, 1.0])
    vrot = np.cross(z, center)
    c = float(z @ center)
    if np.linalg.norm(vrot) < 1e-12:
        return local if c > 0 else -local
    vx = np.array([[0, -vrot[2], vrot[1]], [vrot[2], 0, -vrot[0]], [-vrot[1], vrot[0], 0]])
    rot = np.eye(3) + vx + vx @ vx / (1.0 + c)
    return local @ rot.T


def sample_vmf_mixture(rng, kappa, n, n_components=2):
    """n directions from an equal-weight vMF mixture with random centers."""
    centers = rng.normal(size=(n_components, 3))
    centers /= np.linalg.norm(centers, axis=-1, keepdims=True)
    counts = np.full(n_components, n // n_components)
    counts[: n % n_components] += 1
    parts = [sample_vmf(rng, c, kappa, int(k)) for c, k in zip(centers, counts)]
    return np.concatenate(parts, axis=0)


def brute_force_composite(means2d, covs2d, depths, alphas, colors, pgs, width, height,
                          alpha_min=1.0 / 255.0, alpha_max=0.999, t_stop=1e-4):
    """Reference per-pixel compositor: plain loops, its own sort.

    Takes projected Gaussian data and composites color / certainty / depth /
    accumulated alpha independently of the tiled renderer.  Returns
    (color[H,W,3], U[H,W], depth[H,W], acc[H,W]).
    """
    n = len(depths)
    order = sorted(range(n), key=lambda i: (depths[i], i))
    color = np.zeros((height, width, 3))
    cert = np.zeros((height, width))
    depth = np.zeros((height, width))
    acc = np.zeros((height, width))
    for py in range(height):
        for px in range(width):
            t = 1.0
            pix = np.array([px + 0.5, py + 0.5])
            for i in order:
                if t < t_stop:
                    break
                d = pix - means2d[i]
                c = covs2d[i]
                det = c[0, 0] * c[1, 1] - c[0, 1] * c[1, 0]
                if det <= 0 or c[0, 0] <= 0:
                    continue
                inv = np.array([[c[1, 1], -c[0, 1]], [-c[1, 0], c[0, 0]]]) / det
                power = -0.5 * d @ inv @ d
                if power > 0:
                    continue
                a = min(alphas[i] * math.exp(power), alpha_max)
                if a < alpha_min:
                    continue
                w = t * a
                color[py, px] += w * colors[i]
                cert[py, px] += w * min(max(pgs[i], 0.0), 1.0)
                depth[py, px] += w * depths[i]
                acc[py, px] += w
                t *= 1.0 - a
    dn = np.where(acc > 1e-10, acc, 1.0)
    return color, 1.0 - cert, depth / dn, acc
