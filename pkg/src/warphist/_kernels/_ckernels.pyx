# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``.

Floating-point expressions mirror the numpy code term by term; the module
must be built without FP contraction so both backends agree bit for bit.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, INFINITY

cnp.import_array()

cdef double TIE_EPS = 1e-12


cdef inline long _wrap(long i, long G) nogil:
    cdef long r = i % G
    if r < 0:
        r += G
    return r


cdef inline double _noise1(const double[:, :] lat, double freq, double offx, double offy,
                           double x, double y) nogil:
    cdef long G = lat.shape[0]
    cdef double fx = x * freq + offx
    cdef double fy = y * freq + offy
    cdef double ix = floor(fx)
    cdef double iy = floor(fy)
    cdef double tx = fx - ix
    cdef double ty = fy - iy
    cdef double sx = tx * tx * (3.0 - 2.0 * tx)
    cdef double sy = ty * ty * (3.0 - 2.0 * ty)
    cdef long i0 = _wrap(<long>ix, G)
    cdef long j0 = _wrap(<long>iy, G)
    cdef long i1 = _wrap(i0 + 1, G)
    cdef long j1 = _wrap(j0 + 1, G)
    cdef double a = lat[j0, i0] * (1.0 - sx) + lat[j0, i1] * sx
    cdef double b = lat[j1, i0] * (1.0 - sx) + lat[j1, i1] * sx
    return a * (1.0 - sy) + b * sy


cdef inline void _texture(const double[:, :, :, :, :] tex_lat, const double[:, :] tex_freq,
                          const double[:, :] tex_amp, const double[:, :, :] tex_off,
                          const double[:, :] tex_base, long k, double x, double y,
                          double* out) nogil:
    cdef long O = tex_lat.shape[1]
    cdef long G = tex_lat.shape[2]
    cdef long o, c
    cdef double freq, fx, fy, ix, iy, tx, ty, sx, sy, a, b, n
    cdef long i0, j0, i1, j1
    for c in range(3):
        out[c] = tex_base[k, c]
    for o in range(O):
        freq = tex_freq[k, o]
        fx = x * freq + tex_off[k, o, 0]
        fy = y * freq + tex_off[k, o, 1]
        ix = floor(fx)
        iy = floor(fy)
        tx = fx - ix
        ty = fy - iy
        sx = tx * tx * (3.0 - 2.0 * tx)
        sy = ty * ty * (3.0 - 2.0 * ty)
        i0 = _wrap(<long>ix, G)
        j0 = _wrap(<long>iy, G)
        i1 = _wrap(i0 + 1, G)
        j1 = _wrap(j0 + 1, G)
        for c in range(3):
            a = tex_lat[k, o, j0, i0, c] * (1.0 - sx) + tex_lat[k, o, j0, i1, c] * sx
            b = tex_lat[k, o, j1, i0, c] * (1.0 - sx) + tex_lat[k, o, j1, i1, c] * sx
            n = a * (1.0 - sy) + b * sy
            out[c] = out[c] + tex_amp[k, o] * n
    for c in range(3):
        if out[c] < 0.0:
            out[c] = 0.0
        elif out[c] > 1.0:
            out[c] = 1.0


def render_layers(const double[:, :] Rwc, const double[:] center, double fx, double fy,
                  double cx, double cy, int width, int height,
                  const double[:] plane_z, const cnp.uint8_t[:] plane_opaque,
                  const double[:, :, :, :, :] tex_lat, const double[:, :] tex_freq,
                  const double[:, :] tex_amp, const double[:, :, :] tex_off, const double[:, :] tex_base,
                  const double[:, :, :] alpha_lat, const double[:] alpha_freq, const double[:, :] alpha_off,
                  const double[:] alpha_thr, const double[:] sprite, const double[:] background,
                  double far_depth):
    cdef long H = height, W = width
    cdef long L = plane_z.shape[0]
    rgb_arr = np.empty((H, W, 3), dtype=np.float64)
    depth_arr = np.empty((H, W), dtype=np.float64)
    fg_arr = np.zeros((H, W), dtype=np.bool_)
    cdef double[:, :, :] rgb = rgb_arr
    cdef double[:, :] depth = depth_arr
    cdef cnp.npy_bool[:, :] fg = fg_arr
    cdef long i, j, k
    cdef double xn, yn, dx, dy, dz, t, X, Y, ox, oy, a
    cdef double col[3]
    cdef bint has_sprite = sprite[0] > 0
    cdef bint found
    with nogil:
        for i in range(H):
            yn = ((<double>i + 0.5) - cy) / fy
            for j in range(W):
                xn = ((<double>j + 0.5) - cx) / fx
                dx = Rwc[0, 0] * xn + Rwc[0, 1] * yn + Rwc[0, 2]
                dy = Rwc[1, 0] * xn + Rwc[1, 1] * yn + Rwc[1, 2]
                dz = Rwc[2, 0] * xn + Rwc[2, 1] * yn + Rwc[2, 2]
                rgb[i, j, 0] = background[0]
                rgb[i, j, 1] = background[1]
                rgb[i, j, 2] = background[2]
                depth[i, j] = far_depth
                if not dz > 1e-12:
                    continue
                found = False
                if has_sprite:
                    t = (sprite[1] - center[2]) / dz
                    if t > 1e-6:
                        X = center[0] + t * dx
                        Y = center[1] + t * dy
                        ox = X - sprite[2]
                        oy = Y - sprite[3]
                        if ox * ox + oy * oy <= sprite[4] * sprite[4]:
                            _texture(tex_lat, tex_freq, tex_amp, tex_off, tex_base, L, ox, oy, col)
                            rgb[i, j, 0] = col[0]
                            rgb[i, j, 1] = col[1]
                            rgb[i, j, 2] = col[2]
                            depth[i, j] = t
                            fg[i, j] = True
                            found = True
                if found:
                    continue
                for k in range(L):
                    t = (plane_z[k] - center[2]) / dz
                    if not t > 1e-6:
                        continue
                    X = center[0] + t * dx
                    Y = center[1] + t * dy
                    if not plane_opaque[k]:
                        a = _noise1(alpha_lat[k], alpha_freq[k], alpha_off[k, 0], alpha_off[k, 1], X, Y)
                        if not a >= alpha_thr[k]:
                            continue
                    _texture(tex_lat, tex_freq, tex_amp, tex_off, tex_base, k, X, Y, col)
                    rgb[i, j, 0] = col[0]
                    rgb[i, j, 1] = col[1]
                    rgb[i, j, 2] = col[2]
                    depth[i, j] = t
                    break
    return rgb_arr, depth_arr, fg_arr


def splat(const cnp.int64_t[:] px, const cnp.int64_t[:] py, const double[:] z, colors,
          int width, int height, int footprint=1):
    cdef long H = height, W = width
    cdef long n = px.shape[0]
    cdef long i, lin, qx, qy, o, no
    cdef long offx[4]
    cdef long offy[4]
    offx[0] = 0; offy[0] = 0
    offx[1] = 1; offy[1] = 0
    offx[2] = 0; offy[2] = 1
    offx[3] = 1; offy[3] = 1
    no = 1 if footprint == 1 else 4
    zbuf_arr = np.full(H * W, np.inf)
    src_arr = np.full(H * W, -1, dtype=np.int64)
    cdef double[:] zbuf = zbuf_arr
    cdef cnp.int64_t[:] src = src_arr
    cdef double zi
    with nogil:
        for i in range(n):
            zi = z[i]
            for o in range(no):
                qx = px[i] + offx[o]
                qy = py[i] + offy[o]
                if qx < 0 or qx >= W or qy < 0 or qy >= H:
                    continue
                lin = qy * W + qx
                if zi < zbuf[lin]:
                    zbuf[lin] = zi
        for i in range(n):
            zi = z[i]
            for o in range(no):
                qx = px[i] + offx[o]
                qy = py[i] + offy[o]
                if qx < 0 or qx >= W or qy < 0 or qy >= H:
                    continue
                lin = qy * W + qx
                if src[lin] < 0 and zi <= zbuf[lin] + TIE_EPS:
                    src[lin] = i
    valid = src_arr >= 0
    colors = np.asarray(colors)
    rgb = np.zeros((H * W, 3), dtype=colors.dtype)
    rgb[valid] = colors[src_arr[valid]]
    return rgb.reshape(H, W, 3), valid.reshape(H, W), zbuf_arr.reshape(H, W), src_arr.reshape(H, W)
