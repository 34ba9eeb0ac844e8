"""Slow, obviously-correct reference implementations used by the tests."""
import numpy as np


def brute_force_splat(points, colors, camera, intrinsics, tie_eps=1e-12, behind_eps=1e-6, footprint=1):
    """Quadratic z-buffer: every pixel scans every point."""
    k = intrinsics
    H, W = k.height, k.width
    proj = []
    for i, X in enumerate(points):
        pc = camera.rotation @ X + camera.translation
        if pc[2] <= behind_eps:
            continue
        u = int(np.floor(k.fx * (pc[0] / pc[2]) + k.cx))
        v = int(np.floor(k.fy * (pc[1] / pc[2]) + k.cy))
        offs = [(0, 0)] if footprint == 1 else [(0, 0), (1, 0), (0, 1), (1, 1)]
        for ox, oy in offs:
            proj.append((u + ox, v + oy, pc[2], i))
    rgb = np.zeros((H, W, 3), dtype=colors.dtype)
    valid = np.zeros((H, W), dtype=bool)
    for y in range(H):
        for x in range(W):
            hits = [(z, i) for (u, v, z, i) in proj if u == x and v == y]
            if not hits:
                continue
            zmin = min(z for z, _ in hits)
            winner = min(i for z, i in hits if z <= zmin + tie_eps)
            rgb[y, x] = colors[winner]
            valid[y, x] = True
    return rgb, valid


def ssim_loop(a, b, window=8, k1=0.01, k2=0.03):
    """Mean SSIM over all valid window positions, single channel, explicit loops."""
    c1, c2 = (k1) ** 2, (k2) ** 2
    H, W = a.shape
    vals = []
    for y in range(H - window + 1):
        for x in range(W - window + 1):
            pa = a[y:y + window, x:x + window].ravel()
            pb = b[y:y + window, x:x + window].ravel()
            ma, mb = pa.mean(), pb.mean()
            va, vb = pa.var(), pb.var()
            cov = ((pa - ma) * (pb - mb)).mean()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))
