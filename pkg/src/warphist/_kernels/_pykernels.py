"""Pure numpy implementations of the hot kernels.

These are the reference semantics for the compiled core in ``_ckernels.pyx``;
both evaluate the same floating-point expressions in the same order.
"""
import numpy as np

TIE_EPS = 1e-12


def _value_noise(lat, freq, offx, offy, x, y):
    G = lat.shape[0]
    fx = x * freq + offx
    fy = y * freq + offy
    ix = np.floor(fx)
    iy = np.floor(fy)
    tx = fx - ix
    ty = fy - iy
    sx = tx * tx * (3.0 - 2.0 * tx)
    sy = ty * ty * (3.0 - 2.0 * ty)
    i0 = np.mod(ix.astype(np.int64), G)
    j0 = np.mod(iy.astype(np.int64), G)
    i1 = np.mod(i0 + 1, G)
    j1 = np.mod(j0 + 1, G)
    if lat.ndim == 3:
        sx = sx[..., None]
        sy = sy[..., None]
    a = lat[j0, i0] * (1.0 - sx) + lat[j0, i1] * sx
    b = lat[j1, i0] * (1.0 - sx) + lat[j1, i1] * sx
    return a * (1.0 - sy) + b * sy


def _texture(tex_lat, tex_freq, tex_amp, tex_off, tex_base, k, x, y):
    col = np.broadcast_to(tex_base[k], x.shape + (3,)).copy()
    for o in range(tex_lat.shape[1]):
        n = _value_noise(tex_lat[k, o], tex_freq[k, o], tex_off[k, o, 0], tex_off[k, o, 1], x, y)
        col = col + tex_amp[k, o] * n
    return np.clip(col, 0.0, 1.0)


def render_layers(Rwc, center, fx, fy, cx, cy, width, height,
                  plane_z, plane_opaque, tex_lat, tex_freq, tex_amp, tex_off, tex_base,
                  alpha_lat, alpha_freq, alpha_off, alpha_thr, sprite, background, far_depth):
    """Ray-cast fronto-parallel textured planes (plus an optional disk sprite).

    Returns ``(rgb, depth, fg)``; depth is the camera-space z of the visible
    surface, ``far_depth`` where no surface is hit.
    """
    H, W = int(height), int(width)
    L = plane_z.shape[0]
    u = np.arange(W, dtype=np.float64) + 0.5
    v = np.arange(H, dtype=np.float64) + 0.5
    xn = (u - cx) / fx
    yn = (v - cy) / fy
    xn, yn = np.meshgrid(xn, yn)
    dx = Rwc[0, 0] * xn + Rwc[0, 1] * yn + Rwc[0, 2]
    dy = Rwc[1, 0] * xn + Rwc[1, 1] * yn + Rwc[1, 2]
    dz = Rwc[2, 0] * xn + Rwc[2, 1] * yn + Rwc[2, 2]

    rgb = np.empty((H, W, 3), dtype=np.float64)
    rgb[:] = background
    depth = np.full((H, W), float(far_depth))
    fg = np.zeros((H, W), dtype=bool)
    done = np.zeros((H, W), dtype=bool)
    ok_dir = dz > 1e-12

    surfaces = []
    if sprite[0] > 0:
        surfaces.append(("sprite", sprite[1]))
    for k in range(L):
        surfaces.append((k, plane_z[k]))

    for kind, z in surfaces:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (z - center[2]) / dz
        hit = ok_dir & (t > 1e-6) & ~done
        if not hit.any():
            continue
        X = center[0] + t * dx
        Y = center[1] + t * dy
        if kind == "sprite":
            ox = X - sprite[2]
            oy = Y - sprite[3]
            hit &= ox * ox + oy * oy <= sprite[4] * sprite[4]
            if not hit.any():
                continue
            col = _texture(tex_lat, tex_freq, tex_amp, tex_off, tex_base, L, ox[hit], oy[hit])
            fg[hit] = True
        else:
            if not plane_opaque[kind]:
                a = _value_noise(alpha_lat[kind], alpha_freq[kind], alpha_off[kind, 0], alpha_off[kind, 1],
                                 X, Y)
                hit &= a >= alpha_thr[kind]
                if not hit.any():
                    continue
            col = _texture(tex_lat, tex_freq, tex_amp, tex_off, tex_base, kind, X[hit], Y[hit])
        rgb[hit] = col
        depth[hit] = t[hit]
        done |= hit
    return rgb, depth, fg


def splat(px, py, z, colors, width, height, footprint=1):
    """Z-buffered nearest-pixel splatting.

    Each point writes to pixel ``(px, py)`` (``footprint == 2`` also covers the
    right/down neighbours). A pixel keeps the smallest depth; among points
    within ``TIE_EPS`` of that minimum, the smallest point index wins.
    Returns ``(rgb, valid, zbuf, src_index)``.
    """
    H, W = int(height), int(width)
    n = px.shape[0]
    idx = np.arange(n, dtype=np.int64)
    offsets = [(0, 0)] if footprint == 1 else [(0, 0), (1, 0), (0, 1), (1, 1)]
    lin_all, z_all, i_all = [], [], []
    for ox, oy in offsets:
        qx = px + ox
        qy = py + oy
        m = (qx >= 0) & (qx < W) & (qy >= 0) & (qy < H)
        lin_all.append((qy[m] * W + qx[m]).astype(np.int64))
        z_all.append(z[m])
        i_all.append(idx[m])
    lin = np.concatenate(lin_all)
    zz = np.concatenate(z_all)
    ii = np.concatenate(i_all)

    zbuf = np.full(H * W, np.inf)
    np.minimum.at(zbuf, lin, zz)
    cand = zz <= zbuf[lin] + TIE_EPS
    src = np.full(H * W, n, dtype=np.int64)
    np.minimum.at(src, lin[cand], ii[cand])
    valid = src < n
    rgb = np.zeros((H * W, 3), dtype=colors.dtype)
    rgb[valid] = colors[src[valid]]
    src[~valid] = -1
    zbuf[~valid] = np.inf
    return rgb.reshape(H, W, 3), valid.reshape(H, W), zbuf.reshape(H, W), src.reshape(H, W)
