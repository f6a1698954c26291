"""Differentiable tile-based CPU Gaussian rasterizer.

Pipeline: ``project`` (EWA: ``Sigma2d = J W Sigma W^T J^T + 0.3 I``) ->
16x16 tile binning by a conservative 3-sigma radius -> one global stable
depth sort shared by every tile -> front-to-back compositing per pixel.

Conventions shared by the forward, the backward and the test oracle:

* pixel ``(x, y)`` is sampled at integer coordinates;
* a splat contributes to a pixel only inside its 3-sigma ellipse
  (``d^T conic d <= 9``); this is what makes tiling exact;
* ``alpha = min(0.99, alpha_base * exp(-q / 2))``;
* compositing stops *before* a splat that would drop transmittance below
  ``1e-4``.

The backward recomputes each pixel's front-to-back pass and then walks it
back to front, writing per-(tile, splat) gradients that are reduced in a fixed
order, so results do not depend on the thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .core import Camera, Gaussian3D, sigmoid

TILE = 16
LOW_PASS = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
CUTOFF_Q = 9.0  # 3 sigma


@dataclass
class Splat2D:
    mean2d: np.ndarray
    conic: np.ndarray
    depth: float
    alpha_base: float
    rgb: np.ndarray


@dataclass
class Splats:
    """Batch of projected splats (only the ones that survived culling)."""

    mean2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    alpha_base: np.ndarray
    rgb: np.ndarray
    radius: np.ndarray
    index: np.ndarray

    def __len__(self):
        return self.mean2d.shape[0]

    @classmethod
    def from_list(cls, splats) -> "Splats":
        splats = list(splats)
        if not splats:
            return cls(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros(0),
                       np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))
        conic = np.array([s.conic for s in splats], dtype=np.float64)
        return cls(np.array([s.mean2d for s in splats], dtype=np.float64), conic,
                   np.array([s.depth for s in splats], dtype=np.float64),
                   np.array([s.alpha_base for s in splats], dtype=np.float64),
                   np.array([s.rgb for s in splats], dtype=np.float64),
                   conic_radius(conic), np.arange(len(splats)))


@dataclass
class RenderOut:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    state: "RasterState"


@dataclass
class RasterState:
    splats: Splats
    width: int
    height: int
    background: np.ndarray
    tile_ranges: np.ndarray
    pair_splat: np.ndarray


def conic_radius(conic: np.ndarray) -> np.ndarray:
    """3-sigma radius (pixels) from the inverse covariance ``(a, b, c)``."""
    a, b, c = conic[:, 0], conic[:, 1], conic[:, 2]
    det = a * c - b * b
    s00, s01, s11 = c / det, -b / det, a / det
    mid = 0.5 * (s00 + s11)
    lam = mid + np.sqrt(np.maximum(mid * mid - (s00 * s11 - s01 * s01), 0.0))
    return 3.0 * np.sqrt(lam)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


@dataclass
class ProjectionCache:
    valid: np.ndarray
    t: np.ndarray
    J: np.ndarray
    M: np.ndarray
    cov3d: np.ndarray
    conic: np.ndarray
    alpha_base: np.ndarray
    Wr: np.ndarray
    fx: float
    fy: float
    n: int


def project_cloud(means, cov3d, opacity_logit, rgb, cam: Camera, diagnostics: dict | None = None):
    """Project ``N`` Gaussians; returns ``(Splats, ProjectionCache)``.

    Splats behind the near plane or with a non-positive-definite screen
    covariance are culled (the latter counted in ``diagnostics``).
    """
    means = np.asarray(means, dtype=np.float64)
    n = means.shape[0]
    Wr = cam.view[:3, :3]
    t = means @ Wr.T + cam.view[:3, 3]
    tz = t[:, 2]
    valid = tz > cam.near
    tz_safe = np.where(valid, tz, 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / tz_safe
    J[:, 0, 2] = -cam.fx * t[:, 0] / tz_safe ** 2
    J[:, 1, 1] = cam.fy / tz_safe
    J[:, 1, 2] = -cam.fy * t[:, 1] / tz_safe ** 2
    M = J @ Wr
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    pd = (det > 0) & (cov2d[:, 0, 0] > 0) & np.all(np.isfinite(cov2d.reshape(n, -1)), axis=1)
    if diagnostics is not None:
        diagnostics["culled_non_pd"] = diagnostics.get("culled_non_pd", 0) + int(np.sum(valid & ~pd))
    valid &= pd
    det_safe = np.where(valid, det, 1.0)
    conic = np.stack([cov2d[:, 1, 1] / det_safe, -cov2d[:, 0, 1] / det_safe,
                      cov2d[:, 0, 0] / det_safe], axis=1)
    mean2d = np.stack([cam.fx * t[:, 0] / tz_safe + cam.cx, cam.fy * t[:, 1] / tz_safe + cam.cy], axis=1)
    alpha_base = sigmoid(opacity_logit)
    idx = np.nonzero(valid)[0]
    splats = Splats(mean2d[idx], conic[idx], tz[idx], alpha_base[idx],
                    np.asarray(rgb, dtype=np.float64)[idx], conic_radius(conic[idx]), idx)
    cache = ProjectionCache(valid, t, J, M, cov3d, conic, alpha_base, Wr, cam.fx, cam.fy, n)
    return splats, cache


def project(g: Gaussian3D, cam: Camera, rgb) -> Splat2D | None:
    """Project one posed Gaussian; ``None`` when culled."""
    s, _ = project_cloud(g.mean[None], g.covariance[None], np.array([g.opacity_logit]),
                         np.asarray(rgb, dtype=np.float64)[None], cam)
    if len(s) == 0:
        return None
    return Splat2D(s.mean2d[0], s.conic[0], float(s.depth[0]), float(s.alpha_base[0]), s.rgb[0])


def project_backward(cache: ProjectionCache, splats: Splats, g_mean2d, g_conic, g_alpha_base):
    """Chain splat gradients to ``(d/means, d/cov3d, d/opacity_logit)`` for all N inputs."""
    n = cache.n
    g_means = np.zeros((n, 3))
    g_cov = np.zeros((n, 3, 3))
    g_op = np.zeros(n)
    idx = splats.index
    if idx.size == 0:
        return g_means, g_cov, g_op
    t = cache.t[idx]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cache.fx, cache.fy
    con = cache.conic[idx]
    Q = np.stack([np.stack([con[:, 0], con[:, 1]], -1), np.stack([con[:, 1], con[:, 2]], -1)], 1)
    Gc = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
                   np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1)], 1)
    gS = -Q @ Gc @ Q
    M = cache.M[idx]
    cov = cache.cov3d[idx]
    g_cov[idx] = np.swapaxes(M, 1, 2) @ gS @ M
    g_M = 2.0 * gS @ M @ cov
    g_J = g_M @ cache.Wr.T

    g_t = np.zeros((idx.size, 3))
    g_t[:, 0] = fx / tz * g_mean2d[:, 0]
    g_t[:, 1] = fy / tz * g_mean2d[:, 1]
    g_t[:, 2] = -fx * tx / tz ** 2 * g_mean2d[:, 0] - fy * ty / tz ** 2 * g_mean2d[:, 1]
    g_t[:, 2] += -fx / tz ** 2 * g_J[:, 0, 0] - fy / tz ** 2 * g_J[:, 1, 1]
    g_t[:, 0] += -fx / tz ** 2 * g_J[:, 0, 2]
    g_t[:, 1] += -fy / tz ** 2 * g_J[:, 1, 2]
    g_t[:, 2] += 2 * fx * tx / tz ** 3 * g_J[:, 0, 2] + 2 * fy * ty / tz ** 3 * g_J[:, 1, 2]
    g_means[idx] = g_t @ cache.Wr
    ab = cache.alpha_base[idx]
    g_op[idx] = g_alpha_base * ab * (1.0 - ab)
    return g_means, g_cov, g_op


# ---------------------------------------------------------------------------
# binning
# ---------------------------------------------------------------------------


def bin_splats(splats: Splats, width: int, height: int):
    """Return ``(tile_ranges, pair_splat)``; pairs sorted by tile then global depth order."""
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    m = len(splats)
    if m == 0:
        return np.zeros((n_tiles, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    rank = np.empty(m, dtype=np.int64)
    rank[np.argsort(splats.depth, kind="stable")] = np.arange(m)

    mx, my, r = splats.mean2d[:, 0], splats.mean2d[:, 1], splats.radius
    x0 = np.clip(np.floor((mx - r) / TILE), 0, tiles_x).astype(np.int64)
    x1 = np.clip(np.floor((mx + r) / TILE) + 1, 0, tiles_x).astype(np.int64)
    y0 = np.clip(np.floor((my - r) / TILE), 0, tiles_y).astype(np.int64)
    y1 = np.clip(np.floor((my + r) / TILE) + 1, 0, tiles_y).astype(np.int64)
    nx = np.maximum(x1 - x0, 0)
    ny = np.maximum(y1 - y0, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return np.zeros((n_tiles, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    owner = np.repeat(np.arange(m), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - start
    w = nx[owner]
    tx = x0[owner] + local % w
    ty = y0[owner] + local // w
    tile = ty * tiles_x + tx
    order = np.lexsort((rank[owner], tile))
    pair_splat = owner[order]
    tile_sorted = tile[order]
    bounds = np.searchsorted(tile_sorted, np.arange(n_tiles + 1))
    tile_ranges = np.stack([bounds[:-1], bounds[1:]], axis=1)
    return tile_ranges, pair_splat


# ---------------------------------------------------------------------------
# compositing kernels
# ---------------------------------------------------------------------------


@numba.njit(parallel=True, cache=True)
def _forward_kernel(tile_ranges, pair_splat, mean2d, conic, alpha_base, rgb, bg, width, height):
    tiles_x = (width + TILE - 1) // TILE
    n_tiles = tile_ranges.shape[0]
    color = np.empty((height, width, 3))
    trans = np.empty((height, width))
    for tid in numba.prange(n_tiles):
        ty0 = (tid // tiles_x) * TILE
        tx0 = (tid % tiles_x) * TILE
        start, end = tile_ranges[tid, 0], tile_ranges[tid, 1]
        for py in range(ty0, min(ty0 + TILE, height)):
            for px in range(tx0, min(tx0 + TILE, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                for p in range(start, end):
                    s = pair_splat[p]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    q = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
                    if q > CUTOFF_Q:
                        continue
                    a = min(ALPHA_MAX, alpha_base[s] * np.exp(-0.5 * q))
                    test_T = T * (1.0 - a)
                    if test_T < T_MIN:
                        break
                    w = a * T
                    c0 += w * rgb[s, 0]
                    c1 += w * rgb[s, 1]
                    c2 += w * rgb[s, 2]
                    T = test_T
                color[py, px, 0] = c0 + T * bg[0]
                color[py, px, 1] = c1 + T * bg[1]
                color[py, px, 2] = c2 + T * bg[2]
                trans[py, px] = T
    return color, trans


@numba.njit(parallel=True, cache=True)
def _backward_kernel(tile_ranges, pair_splat, mean2d, conic, alpha_base, rgb, bg, width, height,
                     g_color, g_alpha):
    """Per-pair gradients: columns (mx, my, a, b, c, alpha_base, r, g, b)."""
    tiles_x = (width + TILE - 1) // TILE
    n_tiles = tile_ranges.shape[0]
    out = np.zeros((pair_splat.shape[0], 9))
    for tid in numba.prange(n_tiles):
        ty0 = (tid // tiles_x) * TILE
        tx0 = (tid % tiles_x) * TILE
        start, end = tile_ranges[tid, 0], tile_ranges[tid, 1]
        k = end - start
        if k == 0:
            continue
        alphas = np.empty(k)
        Ts = np.empty(k)
        used = np.empty(k, dtype=np.int64)
        for py in range(ty0, min(ty0 + TILE, height)):
            for px in range(tx0, min(tx0 + TILE, width)):
                gc0 = g_color[py, px, 0]
                gc1 = g_color[py, px, 1]
                gc2 = g_color[py, px, 2]
                ga = g_alpha[py, px]
                T = 1.0
                n_used = 0
                for p in range(start, end):
                    s = pair_splat[p]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    q = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
                    if q > CUTOFF_Q:
                        continue
                    a = min(ALPHA_MAX, alpha_base[s] * np.exp(-0.5 * q))
                    test_T = T * (1.0 - a)
                    if test_T < T_MIN:
                        break
                    alphas[n_used] = a
                    Ts[n_used] = T
                    used[n_used] = p
                    n_used += 1
                    T = test_T
                T_final = T
                # back to front; suffix = sum_{i>k} (gC . c_i) w_i
                suffix = 0.0
                bg_term = (gc0 * bg[0] + gc1 * bg[1] + gc2 * bg[2]) * T_final
                for u in range(n_used - 1, -1, -1):
                    p = used[u]
                    s = pair_splat[p]
                    a = alphas[u]
                    Ti = Ts[u]
                    gdotc = gc0 * rgb[s, 0] + gc1 * rgb[s, 1] + gc2 * rgb[s, 2]
                    w = a * Ti
                    out[p, 6] += gc0 * w
                    out[p, 7] += gc1 * w
                    out[p, 8] += gc2 * w
                    g_a = gdotc * Ti - (suffix + bg_term - ga * T_final) / (1.0 - a)
                    suffix += gdotc * w
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    q = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
                    G = np.exp(-0.5 * q)
                    if alpha_base[s] * G > ALPHA_MAX:
                        continue
                    out[p, 5] += g_a * G
                    g_q = -0.5 * g_a * alpha_base[s] * G
                    out[p, 0] += -2.0 * g_q * (conic[s, 0] * dx + conic[s, 1] * dy)
                    out[p, 1] += -2.0 * g_q * (conic[s, 1] * dx + conic[s, 2] * dy)
                    out[p, 2] += g_q * dx * dx
                    out[p, 3] += g_q * 2.0 * dx * dy
                    out[p, 4] += g_q * dy * dy
    return out


def render_forward(splats: Splats | list, cam: Camera, background=(0.0, 0.0, 0.0)) -> RenderOut:
    if not isinstance(splats, Splats):
        splats = Splats.from_list(splats)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    W, H = int(cam.width), int(cam.height)
    tile_ranges, pair_splat = bin_splats(splats, W, H)
    color, trans = _forward_kernel(tile_ranges, pair_splat, splats.mean2d, splats.conic,
                                   splats.alpha_base, splats.rgb, bg, W, H)
    state = RasterState(splats, W, H, bg, tile_ranges, pair_splat)
    return RenderOut(color, 1.0 - trans, state)


def render_backward(g_color: np.ndarray, g_alpha: np.ndarray | None, state: RasterState,
                    splats: Splats | None = None):
    """Gradients per splat: ``(mean2d (M,2), conic (M,3), alpha_base (M,), rgb (M,3))``.

    ``g_alpha`` is the gradient w.r.t. the alpha image ``1 - T_final``.
    """
    if splats is not None and splats is not state.splats:
        if len(splats) != len(state.splats) or not np.array_equal(splats.index, state.splats.index):
            raise ValueError("splats do not match the saved render state")
    sp = state.splats
    H, W = state.height, state.width
    g_color = np.ascontiguousarray(g_color, dtype=np.float64).reshape(H, W, 3)
    g_alpha = np.zeros((H, W)) if g_alpha is None else np.ascontiguousarray(g_alpha, dtype=np.float64)
    m = len(sp)
    if m == 0 or state.pair_splat.size == 0:
        return np.zeros((m, 2)), np.zeros((m, 3)), np.zeros(m), np.zeros((m, 3))
    pair_g = _backward_kernel(state.tile_ranges, state.pair_splat, sp.mean2d, sp.conic,
                              sp.alpha_base, sp.rgb, state.background, W, H, g_color, g_alpha)
    acc = np.zeros((m, 9))
    np.add.at(acc, state.pair_splat, pair_g)
    return acc[:, 0:2], acc[:, 2:5], acc[:, 5], acc[:, 6:9]


# ---------------------------------------------------------------------------
# 3D convenience
# ---------------------------------------------------------------------------


@dataclass
class RenderContext:
    out: RenderOut
    proj: ProjectionCache
    splats: Splats
    n: int


def render_gaussians(means, cov3d, opacity_logit, rgb, cam: Camera, background=(0.0, 0.0, 0.0),
                     diagnostics: dict | None = None):
    """Project and render posed Gaussians; returns ``(RenderOut, RenderContext)``."""
    splats, proj = project_cloud(means, cov3d, opacity_logit, rgb, cam, diagnostics)
    out = render_forward(splats, cam, background)
    return out, RenderContext(out, proj, splats, np.asarray(means).shape[0])


def render_gaussians_backward(ctx: RenderContext, g_color, g_alpha=None):
    """Returns ``(d/means, d/cov3d, d/opacity_logit, d/rgb)``; culled Gaussians get zeros."""
    g_m2, g_con, g_ab, g_rgb_s = render_backward(g_color, g_alpha, ctx.out.state)
    g_means, g_cov, g_op = project_backward(ctx.proj, ctx.splats, g_m2, g_con, g_ab)
    g_rgb = np.zeros((ctx.n, 3))
    g_rgb[ctx.splats.index] = g_rgb_s
    return g_means, g_cov, g_op, g_rgb
