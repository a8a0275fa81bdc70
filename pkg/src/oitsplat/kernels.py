"""Hot inner loops: OIT tile forward, per-splat backward, sorted compositing, Adam.

Every kernel has a numba implementation (``*_nb``) and a vectorized numpy
implementation (``*_np``) with the same signature. The public wrappers pick
one according to ``backend`` (default: ``OITSPLAT_DISABLE_JIT`` env flag).
"""

from __future__ import annotations

import numpy as np

from ._jit import default_backend, njit, prange
from .scene import SH_C1, SH_C2, SH_C3

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4

BACKENDS = ("numba", "numpy")


def _resolve(backend):
    backend = backend or default_backend()
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    return backend


# ---------------------------------------------------------------------------
# OIT forward
# ---------------------------------------------------------------------------


@njit
def _forward_tiles_nb(
    tile_offsets, tile_splats, tiles_x, tile_size, width, height,
    xmin, xmax, ymin, ymax, mu2d, conic, opacity, color, weight, route,
    img_P, img_Q, img_T, bake_P, bake_Q, bake_T, tile_pairs,
):
    n_tiles = tile_offsets.shape[0] - 1
    for t in prange(n_tiles):
        start = tile_offsets[t]
        end = tile_offsets[t + 1]
        if start == end:
            continue
        x0 = (t % tiles_x) * tile_size
        y0 = (t // tiles_x) * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        pairs = 0
        # Splat-major inside the tile: each pixel still sees its splats in
        # tile-list order, but only pixels inside a splat's box are visited.
        for k in range(start, end):
            g = tile_splats[k]
            o = opacity[g]
            w = weight[g]
            ca = conic[g, 0]
            cb = conic[g, 1]
            cc = conic[g, 2]
            mx = mu2d[g, 0]
            my = mu2d[g, 1]
            cr = color[g, 0]
            cg = color[g, 1]
            cbl = color[g, 2]
            bake = route[g] == 2
            for py in range(max(y0, ymin[g]), min(y1, ymax[g] + 1)):
                dy = py + 0.5 - my
                for px in range(max(x0, xmin[g]), min(x1, xmax[g] + 1)):
                    dx = px + 0.5 - mx
                    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                    alpha = o * np.exp(power)
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    if alpha < ALPHA_MIN:
                        continue
                    pairs += 1
                    aw = alpha * w
                    if bake:
                        bake_P[py, px, 0] += cr * aw
                        bake_P[py, px, 1] += cg * aw
                        bake_P[py, px, 2] += cbl * aw
                        bake_Q[py, px] += aw
                        bake_T[py, px] *= 1.0 - alpha
                    else:
                        img_P[py, px, 0] += cr * aw
                        img_P[py, px, 1] += cg * aw
                        img_P[py, px, 2] += cbl * aw
                        img_Q[py, px] += aw
                        img_T[py, px] *= 1.0 - alpha
        tile_pairs[t] = pairs


def _unique_in_order(ids):
    if ids.size == 0:
        return ids
    _, first = np.unique(ids, return_index=True)
    return ids[np.sort(first)]


def _box_pairs(ids, xmin, xmax, ymin, ymax):
    """Enumerate every (splat, px, py) inside the splats' pixel boxes."""
    nx = xmax[ids] - xmin[ids] + 1
    ny = ymax[ids] - ymin[ids] + 1
    counts = np.maximum(nx, 0) * np.maximum(ny, 0)
    total = int(counts.sum())
    gid = np.repeat(ids, counts)
    local = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    nx_rep = np.repeat(nx, counts)
    px = xmin[gid] + local % np.maximum(nx_rep, 1)
    py = ymin[gid] + local // np.maximum(nx_rep, 1)
    return gid, px, py


def _pair_alpha(gid, px, py, mu2d, conic, opacity):
    dx = (px + 0.5) - mu2d[gid, 0].astype(np.float64)
    dy = (py + 0.5) - mu2d[gid, 1].astype(np.float64)
    c = conic[gid].astype(np.float64)
    power = -0.5 * (c[:, 0] * dx * dx + c[:, 2] * dy * dy) - c[:, 1] * dx * dy
    G = np.exp(power)
    raw = opacity[gid].astype(np.float64) * G
    return dx, dy, G, raw


def _forward_tiles_np(
    tile_offsets, tile_splats, tiles_x, tile_size, width, height,
    xmin, xmax, ymin, ymax, mu2d, conic, opacity, color, weight, route,
    img_P, img_Q, img_T, bake_P, bake_Q, bake_T, tile_pairs,
):
    # Tile lists only define the splat set here; the pair set is the pixel box.
    ids = _unique_in_order(tile_splats)
    gid, px, py = _box_pairs(ids, xmin, xmax, ymin, ymax)
    _, _, _, raw = _pair_alpha(gid, px, py, mu2d, conic, opacity)
    alpha = np.minimum(raw, ALPHA_MAX)
    keep = alpha >= ALPHA_MIN
    gid, px, py, alpha = gid[keep], px[keep], py[keep], alpha[keep]
    pix = py * width + px
    npix = width * height
    aw = alpha * weight[gid]
    log1m = np.log1p(-alpha)
    tile_id = (py // tile_size) * tiles_x + px // tile_size
    tile_pairs[:] = np.bincount(tile_id, minlength=tile_pairs.shape[0])[: tile_pairs.shape[0]]
    for sel, P, Q, T in ((route[gid] != 2, img_P, img_Q, img_T), (route[gid] == 2, bake_P, bake_Q, bake_T)):
        p = pix[sel]
        w = aw[sel]
        Q.reshape(-1)[:] = np.bincount(p, weights=w, minlength=npix)
        for ch in range(3):
            P.reshape(-1, 3)[:, ch] = np.bincount(p, weights=w * color[gid[sel], ch], minlength=npix)
        T.reshape(-1)[:] = np.exp(np.bincount(p, weights=log1m[sel], minlength=npix))


def forward_tiles(bins, proj, opacity, color, weight, route, dtype, backend=None):
    """Accumulate OIT partial sums of the binned splats.

    Splats with ``route == 2`` go into the second ("bake") accumulator, all
    others into the first ("image") one. Both start empty. Returns
    ``(img_P, img_Q, img_T, bake_P, bake_Q, bake_T, pairs)``.
    """
    backend = _resolve(backend)
    grid = bins.grid
    H, W = grid.height, grid.width
    img_P = np.zeros((H, W, 3), dtype=dtype)
    img_Q = np.zeros((H, W), dtype=dtype)
    img_T = np.ones((H, W), dtype=dtype)
    bake_P = np.zeros((H, W, 3), dtype=dtype)
    bake_Q = np.zeros((H, W), dtype=dtype)
    bake_T = np.ones((H, W), dtype=dtype)
    tile_pairs = np.zeros(grid.n_tiles, dtype=np.int64)
    fn = _forward_tiles_nb if backend == "numba" else _forward_tiles_np
    fn(
        bins.offsets, bins.splats, grid.tiles_x, grid.tile_size, W, H,
        proj.xmin, proj.xmax, proj.ymin, proj.ymax, proj.mu2d, proj.conic,
        opacity, color, weight, route,
        img_P, img_Q, img_T, bake_P, bake_Q, bake_T, tile_pairs,
    )
    return img_P, img_Q, img_T, bake_P, bake_Q, bake_T, int(tile_pairs.sum())


# ---------------------------------------------------------------------------
# OIT backward (one worker per splat, per-pixel state read-only)
# ---------------------------------------------------------------------------


@njit
def _backward_splats_nb(
    splats, xmin, xmax, ymin, ymax, mu2d, conic, opacity, color, weight,
    T, Q, F, dL_dC, background,
    d_color, d_weight, d_opacity, d_mu2d, d_conic, splat_pairs,
):
    for s in prange(splats.shape[0]):
        g = splats[s]
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        gw = 0.0
        go = 0.0
        gmx = 0.0
        gmy = 0.0
        ga = 0.0
        gb = 0.0
        gc = 0.0
        pairs = 0
        o = opacity[g]
        w = weight[g]
        col0 = color[g, 0]
        col1 = color[g, 1]
        col2 = color[g, 2]
        ca = conic[g, 0]
        cb = conic[g, 1]
        cc = conic[g, 2]
        for py in range(ymin[g], ymax[g] + 1):
            dy = py + 0.5 - mu2d[g, 1]
            for px in range(xmin[g], xmax[g] + 1):
                dx = px + 0.5 - mu2d[g, 0]
                power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                G = np.exp(power)
                raw = o * G
                alpha = raw
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                pairs += 1
                q = Q[py, px]
                if q <= 0.0:
                    continue
                t = T[py, px]
                g0 = dL_dC[py, px, 0]
                g1 = dL_dC[py, px, 1]
                g2 = dL_dC[py, px, 2]
                f0 = F[py, px, 0]
                f1 = F[py, px, 1]
                f2 = F[py, px, 2]
                one_t = 1.0 - t
                sc = one_t * alpha * w / q
                c0 += g0 * sc
                c1 += g1 * sc
                c2 += g2 * sc
                diff = g0 * (col0 - f0) + g1 * (col1 - f1) + g2 * (col2 - f2)
                gw += one_t * alpha / q * diff
                if raw <= ALPHA_MAX:
                    bgterm = g0 * (f0 - background[0]) + g1 * (f1 - background[1]) + g2 * (f2 - background[2])
                    dalpha = t / (1.0 - alpha) * bgterm + one_t * w / q * diff
                    go += dalpha * G
                    dpow = dalpha * alpha
                    gmx += dpow * (ca * dx + cb * dy)
                    gmy += dpow * (cb * dx + cc * dy)
                    ga += -0.5 * dpow * dx * dx
                    gb += -dpow * dx * dy
                    gc += -0.5 * dpow * dy * dy
        d_color[g, 0] = c0
        d_color[g, 1] = c1
        d_color[g, 2] = c2
        d_weight[g] = gw
        d_opacity[g] = go
        d_mu2d[g, 0] = gmx
        d_mu2d[g, 1] = gmy
        d_conic[g, 0] = ga
        d_conic[g, 1] = gb
        d_conic[g, 2] = gc
        splat_pairs[g] = pairs


def _backward_splats_np(
    splats, xmin, xmax, ymin, ymax, mu2d, conic, opacity, color, weight,
    T, Q, F, dL_dC, background,
    d_color, d_weight, d_opacity, d_mu2d, d_conic, splat_pairs,
):
    n = d_weight.shape[0]
    gid, px, py = _box_pairs(splats, xmin, xmax, ymin, ymax)
    dx, dy, G, raw = _pair_alpha(gid, px, py, mu2d, conic, opacity)
    alpha = np.minimum(raw, ALPHA_MAX)
    keep = alpha >= ALPHA_MIN
    splat_pairs[:] = np.bincount(gid[keep], minlength=n)
    q = Q[py, px].astype(np.float64)
    keep &= q > 0
    gid, px, py, dx, dy, G, raw, alpha, q = (a[keep] for a in (gid, px, py, dx, dy, G, raw, alpha, q))
    t = T[py, px].astype(np.float64)
    gC = dL_dC[py, px].astype(np.float64)
    Fp = F[py, px].astype(np.float64)
    w = weight[gid].astype(np.float64)
    col = color[gid].astype(np.float64)
    one_t = 1.0 - t
    sc = one_t * alpha * w / q
    diff = np.sum(gC * (col - Fp), axis=1)
    gw = one_t * alpha / q * diff
    free = raw <= ALPHA_MAX
    bgterm = np.sum(gC * (Fp - np.asarray(background, dtype=np.float64)), axis=1)
    dalpha = np.where(free, t / (1.0 - alpha) * bgterm + one_t * w / q * diff, 0.0)
    dpow = dalpha * alpha
    c = conic[gid].astype(np.float64)

    def acc(vals):
        return np.bincount(gid, weights=vals, minlength=n)

    for ch in range(3):
        d_color[:, ch] = acc(gC[:, ch] * sc)
    d_weight[:] = acc(gw)
    d_opacity[:] = acc(dalpha * G)
    d_mu2d[:, 0] = acc(dpow * (c[:, 0] * dx + c[:, 1] * dy))
    d_mu2d[:, 1] = acc(dpow * (c[:, 1] * dx + c[:, 2] * dy))
    d_conic[:, 0] = acc(-0.5 * dpow * dx * dx)
    d_conic[:, 1] = acc(-dpow * dx * dy)
    d_conic[:, 2] = acc(-0.5 * dpow * dy * dy)


def backward_splats(splats, proj, opacity, color, weight, T, Q, F, dL_dC, background, backend=None):
    """Per-splat screen-space gradients.

    Returns a dict with ``color`` (N,3), ``weight`` (N,), ``opacity`` (N,),
    ``mu2d`` (N,2), ``conic`` (N,3) and ``pairs`` (N,) work counts; rows of
    splats not listed in ``splats`` are zero.
    """
    backend = _resolve(backend)
    n = len(proj)
    out = {
        "color": np.zeros((n, 3)),
        "weight": np.zeros(n),
        "opacity": np.zeros(n),
        "mu2d": np.zeros((n, 2)),
        "conic": np.zeros((n, 3)),
        "pairs": np.zeros(n, dtype=np.int64),
    }
    fn = _backward_splats_nb if backend == "numba" else _backward_splats_np
    fn(
        np.ascontiguousarray(splats, dtype=np.int64),
        proj.xmin, proj.xmax, proj.ymin, proj.ymax, proj.mu2d, proj.conic,
        opacity, color, weight, T, Q, F, dL_dC, np.asarray(background, dtype=np.float64),
        out["color"], out["weight"], out["opacity"], out["mu2d"], out["conic"], out["pairs"],
    )
    return out


# ---------------------------------------------------------------------------
# Chain rule from screen space to the 3D parameters (numba only; the numpy
# counterpart is the vectorized code in ``backward``)
# ---------------------------------------------------------------------------

_SH_C1 = float(SH_C1)
_SH_C2 = tuple(float(c) for c in SH_C2)
_SH_C3 = tuple(float(c) for c in SH_C3)


@njit
def _sh_jacobian_nb(x, y, z, out):
    c1 = _SH_C1
    c2 = _SH_C2
    c3 = _SH_C3
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out[:, :] = 0.0
    out[1, 1] = -c1
    out[2, 2] = c1
    out[3, 0] = -c1
    out[4, 0] = c2[0] * y
    out[4, 1] = c2[0] * x
    out[5, 1] = c2[1] * z
    out[5, 2] = c2[1] * y
    out[6, 0] = -2.0 * c2[2] * x
    out[6, 1] = -2.0 * c2[2] * y
    out[6, 2] = 4.0 * c2[2] * z
    out[7, 0] = c2[3] * z
    out[7, 2] = c2[3] * x
    out[8, 0] = 2.0 * c2[4] * x
    out[8, 1] = -2.0 * c2[4] * y
    out[9, 0] = 6.0 * c3[0] * xy
    out[9, 1] = c3[0] * (3.0 * xx - 3.0 * yy)
    out[10, 0] = c3[1] * yz
    out[10, 1] = c3[1] * xz
    out[10, 2] = c3[1] * xy
    out[11, 0] = -2.0 * c3[2] * xy
    out[11, 1] = c3[2] * (4.0 * zz - xx - 3.0 * yy)
    out[11, 2] = 8.0 * c3[2] * yz
    out[12, 0] = -6.0 * c3[3] * xz
    out[12, 1] = -6.0 * c3[3] * yz
    out[12, 2] = c3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    out[13, 0] = c3[4] * (4.0 * zz - 3.0 * xx - yy)
    out[13, 1] = -2.0 * c3[4] * xy
    out[13, 2] = 8.0 * c3[4] * xz
    out[14, 0] = 2.0 * c3[5] * xz
    out[14, 1] = -2.0 * c3[5] * yz
    out[14, 2] = c3[5] * (xx - yy)
    out[15, 0] = c3[6] * (3.0 * xx - 3.0 * yy)
    out[15, 1] = -6.0 * c3[6] * xy


@njit
def _chain_nb(
    ids, gidx, d_color, d_weight, d_opac, d_mu2d, d_conic,
    dirs, dist, basis, color_raw, ramp, weight_raw, opacity, depth, conic, jac, cov_cam, mu_cam,
    sh_color, weight_sh, quat, log_scale, fx, fy, Rw, sigma,
    g_mu, g_quat, g_log_scale, g_opacity, g_sh, g_wsh, g_mu2d,
):
    bj = np.empty((16, 3))
    G2 = np.empty((2, 2))
    GJ = np.empty((2, 3))
    Gcc = np.empty((3, 3))
    Gc = np.empty((3, 3))
    R = np.empty((3, 3))
    GM = np.empty((3, 3))
    gt = np.empty(3)
    gdir = np.empty(3)
    gm = np.empty(3)
    g_log_sigma = 0.0
    for k in range(ids.shape[0]):
        s = ids[k]
        g = gidx[s]

        # color = max(SH(h, dir) + 0.5, 0)
        dc0 = d_color[s, 0] if color_raw[s, 0] > 0 else 0.0
        dc1 = d_color[s, 1] if color_raw[s, 1] > 0 else 0.0
        dc2 = d_color[s, 2] if color_raw[s, 2] > 0 else 0.0
        # weight = ramp(depth) * softplus(SH(v, dir))
        vr = weight_raw[s]
        sp = np.log1p(np.exp(-abs(vr))) + max(vr, 0.0)
        sg = 1.0 / (1.0 + np.exp(-vr))
        dw = d_weight[s]
        rp = ramp[s]
        g_vr = dw * rp * sg

        x, y, z = dirs[s, 0], dirs[s, 1], dirs[s, 2]
        _sh_jacobian_nb(x, y, z, bj)
        gdir[:] = 0.0
        for j in range(16):
            b = basis[s, j]
            g_sh[g, j, 0] += b * dc0
            g_sh[g, j, 1] += b * dc1
            g_sh[g, j, 2] += b * dc2
            g_wsh[g, j] += b * g_vr
            hv = sh_color[g, j, 0] * dc0 + sh_color[g, j, 1] * dc1 + sh_color[g, j, 2] * dc2
            hv += weight_sh[g, j] * g_vr
            gdir[0] += hv * bj[j, 0]
            gdir[1] += hv * bj[j, 1]
            gdir[2] += hv * bj[j, 2]
        g_depth = 0.0
        if rp > 0:
            g_depth = -dw * sp / sigma
            g_log_sigma += dw * sp * depth[s] / sigma

        # opacity = sigmoid(logit)
        o = opacity[s]
        g_opacity[g] += d_opac[s] * o * (1.0 - o)

        # direction = (mu - f) / |mu - f|
        dd = x * gdir[0] + y * gdir[1] + z * gdir[2]
        inv_d = 1.0 / dist[s]
        gm[0] = (gdir[0] - x * dd) * inv_d
        gm[1] = (gdir[1] - y * dd) * inv_d
        gm[2] = (gdir[2] - z * dd) * inv_d

        # conic = inverse(cov2d): G_cov2d = -M G M with symmetric G
        a, b2, c = conic[s, 0], conic[s, 1], conic[s, 2]
        ga, gb, gc = d_conic[s, 0], 0.5 * d_conic[s, 1], d_conic[s, 2]
        t00 = a * ga + b2 * gb
        t01 = a * gb + b2 * gc
        t10 = b2 * ga + c * gb
        t11 = b2 * gb + c * gc
        G2[0, 0] = -(t00 * a + t01 * b2)
        G2[0, 1] = -(t00 * b2 + t01 * c)
        G2[1, 0] = -(t10 * a + t11 * b2)
        G2[1, 1] = -(t10 * b2 + t11 * c)

        # cov2d = J cov_cam J^T + lowpass
        for r in range(2):
            for q in range(3):
                acc = 0.0
                for u in range(2):
                    for w in range(3):
                        acc += G2[r, u] * jac[s, u, w] * cov_cam[s, w, q]
                GJ[r, q] = 2.0 * acc
        for p in range(3):
            for q in range(3):
                acc = 0.0
                for u in range(2):
                    for w in range(2):
                        acc += jac[s, u, p] * G2[u, w] * jac[s, w, q]
                Gcc[p, q] = acc

        # J and mu2d as functions of the camera-frame mean
        tx, ty, tz = mu_cam[s, 0], mu_cam[s, 1], mu_cam[s, 2]
        iz = 1.0 / tz
        iz2 = iz * iz
        m0, m1 = d_mu2d[s, 0], d_mu2d[s, 1]
        gt[0] = m0 * fx * iz - GJ[0, 2] * fx * iz2
        gt[1] = m1 * fy * iz - GJ[1, 2] * fy * iz2
        gt[2] = (
            -(m0 * fx * tx + m1 * fy * ty) * iz2
            - GJ[0, 0] * fx * iz2
            - GJ[1, 1] * fy * iz2
            + 2.0 * GJ[0, 2] * fx * tx * iz2 * iz
            + 2.0 * GJ[1, 2] * fy * ty * iz2 * iz
            + g_depth
        )
        for i in range(3):
            g_mu[g, i] += gm[i] + gt[0] * Rw[0, i] + gt[1] * Rw[1, i] + gt[2] * Rw[2, i]

        # cov_world = M M^T with M = R(q) diag(exp(log_scale))
        for p in range(3):
            for q in range(3):
                acc = 0.0
                for u in range(3):
                    for w in range(3):
                        acc += Rw[u, p] * Gcc[u, w] * Rw[w, q]
                Gc[p, q] = acc
        qw, qx, qy, qz = quat[g, 0], quat[g, 1], quat[g, 2], quat[g, 3]
        qn = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        w_, x_, y_, z_ = qw / qn, qx / qn, qy / qn, qz / qn
        R[0, 0] = 1.0 - 2.0 * (y_ * y_ + z_ * z_)
        R[0, 1] = 2.0 * (x_ * y_ - w_ * z_)
        R[0, 2] = 2.0 * (x_ * z_ + w_ * y_)
        R[1, 0] = 2.0 * (x_ * y_ + w_ * z_)
        R[1, 1] = 1.0 - 2.0 * (x_ * x_ + z_ * z_)
        R[1, 2] = 2.0 * (y_ * z_ - w_ * x_)
        R[2, 0] = 2.0 * (x_ * z_ - w_ * y_)
        R[2, 1] = 2.0 * (y_ * z_ + w_ * x_)
        R[2, 2] = 1.0 - 2.0 * (x_ * x_ + y_ * y_)
        e0, e1, e2 = np.exp(log_scale[g, 0]), np.exp(log_scale[g, 1]), np.exp(log_scale[g, 2])
        for i in range(3):
            for j in range(3):
                sj = e0 if j == 0 else (e1 if j == 1 else e2)
                acc = 0.0
                for u in range(3):
                    acc += (Gc[i, u] + Gc[u, i]) * R[u, j] * sj
                GM[i, j] = acc * sj  # now dL/dR
        for j in range(3):
            g_log_scale[g, j] += (GM[0, j] * R[0, j] + GM[1, j] * R[1, j] + GM[2, j] * R[2, j])
        gw = 2.0 * (-z_ * GM[0, 1] + y_ * GM[0, 2] + z_ * GM[1, 0] - x_ * GM[1, 2] - y_ * GM[2, 0] + x_ * GM[2, 1])
        gx = 2.0 * (
            y_ * GM[0, 1] + z_ * GM[0, 2] + y_ * GM[1, 0] - 2.0 * x_ * GM[1, 1]
            - w_ * GM[1, 2] + z_ * GM[2, 0] + w_ * GM[2, 1] - 2.0 * x_ * GM[2, 2]
        )
        gy = 2.0 * (
            -2.0 * y_ * GM[0, 0] + x_ * GM[0, 1] + w_ * GM[0, 2] + x_ * GM[1, 0]
            + z_ * GM[1, 2] - w_ * GM[2, 0] + z_ * GM[2, 1] - 2.0 * y_ * GM[2, 2]
        )
        gz = 2.0 * (
            -2.0 * z_ * GM[0, 0] - w_ * GM[0, 1] + x_ * GM[0, 2] + w_ * GM[1, 0]
            - 2.0 * z_ * GM[1, 1] + y_ * GM[1, 2] + x_ * GM[2, 0] + y_ * GM[2, 1]
        )
        dot = w_ * gw + x_ * gx + y_ * gy + z_ * gz
        g_quat[g, 0] += (gw - w_ * dot) / qn
        g_quat[g, 1] += (gx - x_ * dot) / qn
        g_quat[g, 2] += (gy - y_ * dot) / qn
        g_quat[g, 3] += (gz - z_ * dot) / qn

        g_mu2d[g, 0] += m0
        g_mu2d[g, 1] += m1
    return g_log_sigma


# ---------------------------------------------------------------------------
# Sorted (volumetric) compositing, forward only
# ---------------------------------------------------------------------------


@njit
def _sorted_tiles_nb(
    tile_offsets, tile_splats, tiles_x, tile_size, width, height,
    xmin, xmax, ymin, ymax, mu2d, conic, opacity, color, depth, background,
    image, final_T, tile_pairs,
):
    n_tiles = tile_offsets.shape[0] - 1
    for t in prange(n_tiles):
        start = tile_offsets[t]
        end = tile_offsets[t + 1]
        x0 = (t % tiles_x) * tile_size
        y0 = (t // tiles_x) * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        ids = tile_splats[start:end]
        order = np.argsort(depth[ids], kind="mergesort")
        pairs = 0
        for py in range(y0, y1):
            fy = py + 0.5
            for px in range(x0, x1):
                fx = px + 0.5
                T = 1.0
                C0 = 0.0
                C1 = 0.0
                C2 = 0.0
                for k in range(order.shape[0]):
                    g = ids[order[k]]
                    if px < xmin[g] or px > xmax[g] or py < ymin[g] or py > ymax[g]:
                        continue
                    dx = fx - mu2d[g, 0]
                    dy = fy - mu2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    alpha = opacity[g] * np.exp(power)
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    if alpha < ALPHA_MIN:
                        continue
                    pairs += 1
                    C0 += T * alpha * color[g, 0]
                    C1 += T * alpha * color[g, 1]
                    C2 += T * alpha * color[g, 2]
                    T *= 1.0 - alpha
                    if T < T_MIN:
                        break
                image[py, px, 0] = C0 + T * background[0]
                image[py, px, 1] = C1 + T * background[1]
                image[py, px, 2] = C2 + T * background[2]
                final_T[py, px] = T
        tile_pairs[t] = pairs


def _sorted_tiles_np(
    tile_offsets, tile_splats, tiles_x, tile_size, width, height,
    xmin, xmax, ymin, ymax, mu2d, conic, opacity, color, depth, background,
    image, final_T, tile_pairs,
):
    ids = _unique_in_order(tile_splats)
    gid, px, py = _box_pairs(ids, xmin, xmax, ymin, ymax)
    _, _, _, raw = _pair_alpha(gid, px, py, mu2d, conic, opacity)
    alpha = np.minimum(raw, ALPHA_MAX)
    keep = alpha >= ALPHA_MIN
    gid, px, py, alpha = gid[keep], px[keep], py[keep], alpha[keep]
    pix = py * width + px
    # per pixel: depth order, ties by index (matches the stable per-tile sort)
    order = np.lexsort((gid, depth[gid], pix))
    gid, pix, alpha = gid[order], pix[order], alpha[order]
    npix = width * height
    seg_start = np.searchsorted(pix, np.arange(npix))
    log1m = np.log1p(-alpha)
    csum = np.cumsum(log1m)
    base = np.concatenate([[0.0], csum])[seg_start[pix] if pix.size else np.zeros(0, dtype=np.int64)]
    T_before = np.exp(csum - log1m - base)
    # transmittance only decreases, so a pair is composited iff the pixel had
    # not terminated before reaching it
    prev_ok = T_before >= T_MIN
    contrib = T_before * alpha * prev_ok
    for ch in range(3):
        image.reshape(-1, 3)[:, ch] = np.bincount(pix, weights=contrib * color[gid, ch], minlength=npix)
    log_T = np.bincount(pix, weights=np.where(prev_ok, log1m, 0.0), minlength=npix)
    final_T.reshape(-1)[:] = np.exp(log_T)
    image += final_T[..., None] * np.asarray(background)
    tile_id = (pix // width // tile_size) * tiles_x + (pix % width) // tile_size
    tile_pairs[:] = np.bincount(tile_id[prev_ok], minlength=tile_pairs.shape[0])


def sorted_tiles(bins, proj, opacity, color, background, dtype, backend=None):
    backend = _resolve(backend)
    grid = bins.grid
    H, W = grid.height, grid.width
    image = np.zeros((H, W, 3), dtype=dtype)
    final_T = np.ones((H, W), dtype=dtype)
    tile_pairs = np.zeros(grid.n_tiles, dtype=np.int64)
    fn = _sorted_tiles_nb if backend == "numba" else _sorted_tiles_np
    fn(
        bins.offsets, bins.splats, grid.tiles_x, grid.tile_size, W, H,
        proj.xmin, proj.xmax, proj.ymin, proj.ymax, proj.mu2d, proj.conic,
        opacity, color, np.ascontiguousarray(proj.depth), np.asarray(background, dtype=np.float64),
        image, final_T, tile_pairs,
    )
    return image, final_T, int(tile_pairs.sum())


# ---------------------------------------------------------------------------
# Adam on a row subset
# ---------------------------------------------------------------------------


@njit
def _adam_rows_nb(param, grad, m, v, steps, rows, lr_cols, beta1, beta2, eps):
    k = param.shape[1]
    for r in prange(rows.shape[0]):
        i = rows[r]
        bc1 = 1.0 - beta1 ** steps[i]
        bc2 = 1.0 - beta2 ** steps[i]
        for j in range(k):
            gj = grad[i, j]
            m[i, j] = beta1 * m[i, j] + (1.0 - beta1) * gj
            v[i, j] = beta2 * v[i, j] + (1.0 - beta2) * gj * gj
            mhat = m[i, j] / bc1
            vhat = v[i, j] / bc2
            param[i, j] -= lr_cols[j] * mhat / (np.sqrt(vhat) + eps)


def _adam_rows_np(param, grad, m, v, steps, rows, lr_cols, beta1, beta2, eps):
    t = steps[rows].astype(np.float64)[:, None]
    g = grad[rows]
    m[rows] = beta1 * m[rows] + (1.0 - beta1) * g
    v[rows] = beta2 * v[rows] + (1.0 - beta2) * g * g
    mhat = m[rows] / (1.0 - beta1**t)
    vhat = v[rows] / (1.0 - beta2**t)
    param[rows] -= lr_cols * mhat / (np.sqrt(vhat) + eps)


def adam_rows(param, grad, m, v, steps, rows, lr_cols, beta1=0.9, beta2=0.999, eps=1e-15, backend=None):
    """In-place Adam on ``param[rows]``.

    ``param``, ``grad``, ``m``, ``v`` are 2D (rows x columns); ``steps`` holds
    the already-advanced per-row step count; ``lr_cols`` the per-column rate.
    """
    backend = _resolve(backend)
    fn = _adam_rows_nb if backend == "numba" else _adam_rows_np
    lr_cols = np.ascontiguousarray(np.broadcast_to(np.asarray(lr_cols, dtype=np.float64), (param.shape[1],)))
    fn(param, grad, m, v, steps, np.ascontiguousarray(rows, dtype=np.int64), lr_cols, beta1, beta2, eps)
