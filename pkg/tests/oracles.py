"""Independent reference implementations used as test oracles."""
import math

import numpy as np
from scipy import ndimage


def smooth_loop(field, sigma):
    """Per-axis Gaussian with the clipped kernel renormalized at every voxel."""
    r = int(math.floor(3 * sigma))
    out = np.array(field, dtype=float)
    for axis in range(1, out.ndim):
        src = np.moveaxis(out, axis, -1).copy()
        dst = np.empty_like(src)
        n = src.shape[-1]
        for i in range(n):
            num, den = 0.0, 0.0
            for j in range(max(0, i - r), min(n, i + r + 1)):
                w = math.exp(-0.5 * ((j - i) / sigma) ** 2)
                num = num + w * src[..., j]
                den += w
            dst[..., i] = num / den
        out = np.moveaxis(dst, -1, axis)
    return out


def warp_scipy(image, disp):
    """Trilinear sample of ``image`` at ``x - disp(x)``, coordinates clamped to the volume."""
    grid = np.indices(image.shape, dtype=float)
    coords = np.stack([np.clip(grid[a] - disp[a], 0, image.shape[a] - 1) for a in range(3)])
    return ndimage.map_coordinates(image, coords, order=1, mode="nearest")


def central_diff(f):
    g = np.zeros((3,) + f.shape)
    for a in range(3):
        src = np.moveaxis(f, a, 0)
        d = np.empty_like(src)
        d[1:-1] = (src[2:] - src[:-2]) / 2
        d[0] = src[1] - src[0]
        d[-1] = src[-1] - src[-2]
        g[a] = np.moveaxis(d, 0, a)
    return g


def demons_oracle(moving, fixed, iterations=3, sigma=1.0, eps=1e-6, return_forces=False):
    gf = central_diff(fixed)
    gsq = (gf ** 2).sum(axis=0)
    u = np.zeros((3,) + fixed.shape)
    forces = []
    for _ in range(iterations):
        d = warp_scipy(moving, u) - fixed
        force = d * gf / (gsq + d * d + eps)
        forces.append(force)
        u = u + smooth_loop(force, sigma)
    return (u, forces) if return_forces else u


def surface_brute(mask):
    pts = []
    nx, ny, nz = mask.shape
    for x, y, z in zip(*np.nonzero(mask)):
        for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            p, q, s = x + dx, y + dy, z + dz
            if not (0 <= p < nx and 0 <= q < ny and 0 <= s < nz) or not mask[p, q, s]:
                pts.append((x, y, z))
                break
    return np.array(pts, dtype=float)


def directed_brute(src, dst):
    # all-pairs squared distances are exact small integers; sqrt of the minimum
    d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1))


def hd95_brute(a, b):
    sa, sb = surface_brute(a), surface_brute(b)
    pooled = np.sort(np.concatenate([directed_brute(sa, sb), directed_brute(sb, sa)]))
    k = math.ceil(0.95 * len(pooled))
    return float(pooled[k - 1])


def assd_brute(a, b):
    sa, sb = surface_brute(a), surface_brute(b)
    return (float(directed_brute(sa, sb).mean()) + float(directed_brute(sb, sa).mean())) / 2


def dsc_count(a, b):
    pa = {tuple(p) for p in np.argwhere(a)}
    pb = {tuple(p) for p in np.argwhere(b)}
    if not pa and not pb:
        return 1.0
    return 2 * len(pa & pb) / (len(pa) + len(pb))
