"""Software splatting of 2D Gaussian surfels with hand-written adjoints.

Each pixel ray is intersected exactly with every candidate surfel plane; the
2D Gaussian is evaluated in the surfel's local (u, v) frame and max-blended
with a small screen-space Gaussian around the projected center so that
sub-pixel surfels still register. Fragments are composited front to back in
a global order given by each surfel's center camera-z.

Work is organized in 16x16 pixel tiles; inside a tile all (pixel, surfel)
pairs are evaluated densely with numpy.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, StaleFragmentsError
from .scene import Camera, Surfels, quat_to_rotmat, quat_to_rotmat_vjp

TILE_SIZE = 16
NEAR_PLANE = 0.01
WEIGHT_CUTOFF = 1.0 / 255.0
TRANSMITTANCE_EPS = 1e-4
# Screen-space low-pass filter: exp(-d^2 / (2 sigma^2)) with sigma = 1/sqrt(2) px.
LOWPASS_SIGMA2 = 0.5
# Cutoff radius in units of the Gaussian's std: exp(-r^2/2) = 1/255.
_CUTOFF_RADIUS = math.sqrt(2.0 * math.log(255.0))
_DENOM_EPS = 1e-10


def _fingerprint(surfels: Surfels, attributes: np.ndarray, cam: Camera) -> str:
    h = hashlib.blake2b(digest_size=16)
    for arr in surfels.arrays().values():
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(np.ascontiguousarray(attributes).tobytes())
    h.update(np.ascontiguousarray(cam.world_to_camera).tobytes())
    h.update(np.array([cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height], dtype=np.float64).tobytes())
    return h.hexdigest()


@dataclass
class _Geometry:
    """Per-surfel quantities shared by all tiles."""

    R: np.ndarray  # (K, 3, 3)
    scale: np.ndarray  # (K, 2)
    opacity: np.ndarray  # (K,)
    cam_pos: np.ndarray  # (K, 3) centers in camera space
    proj: np.ndarray  # (K, 2) projected centers in pixels
    b_u: np.ndarray  # (o - t) . t_u
    b_v: np.ndarray  # (o - t) . t_v
    num: np.ndarray  # (t - o) . n
    order: np.ndarray  # global front-to-back order of visible surfels


@dataclass
class _TileFragments:
    rows: np.ndarray
    cols: np.ndarray
    pix: np.ndarray  # flat pixel indices (P,)
    idx: np.ndarray  # surfel indices in composite order (K_t,)
    rays: np.ndarray  # (P, 3)
    lam: np.ndarray
    a_u: np.ndarray
    a_v: np.ndarray
    a_n: np.ndarray
    u: np.ndarray
    v: np.ndarray
    g3: np.ndarray
    g2: np.ndarray
    use3: np.ndarray  # bool: 3D branch of the max is active
    valid3: np.ndarray
    gauss: np.ndarray
    alpha: np.ndarray  # effective alpha (0 where not composited)
    t_excl: np.ndarray
    weight: np.ndarray
    depth: np.ndarray
    dist_dw: np.ndarray
    dist_dz: np.ndarray


@dataclass
class RenderResult:
    """Output buffers of one splatting pass plus the retained fragment data.

    ``features`` composites the caller's per-surfel attributes; ``alpha`` is
    the accumulated weight, ``depth_sum`` the weighted intersection depth and
    ``distortion`` the per-ray sum over fragment pairs of w_i w_j |z_i - z_j|.
    """

    features: np.ndarray  # (H, W, F)
    alpha: np.ndarray  # (H, W)
    depth_sum: np.ndarray  # (H, W)
    distortion: np.ndarray  # (H, W)
    fingerprint: str = ""
    tiles: list = field(default_factory=list, repr=False)
    geometry: _Geometry | None = field(default=None, repr=False)
    attributes: np.ndarray | None = field(default=None, repr=False)

    @property
    def transmittance(self) -> np.ndarray:
        return 1.0 - self.alpha

    @property
    def depth(self) -> np.ndarray:
        """Expected intersection depth normalized by accumulated alpha (0 on background)."""
        safe = np.where(self.alpha > 1e-8, self.alpha, 1.0)
        return np.where(self.alpha > 1e-8, self.depth_sum / safe, 0.0)

    def num_fragments(self) -> int:
        return int(sum(np.count_nonzero(t.weight) for t in self.tiles))


@dataclass
class RenderGrads:
    """Gradients of a scalar loss w.r.t. render inputs."""

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    attributes: np.ndarray
    visible: np.ndarray


def _surfel_geometry(surfels: Surfels, cam: Camera) -> _Geometry:
    R = quat_to_rotmat(surfels.rotation)
    scale = surfels.scale
    opacity = surfels.opacity
    o = cam.center
    t = surfels.position
    cam_pos = cam.world_to_cam_points(t)
    z = cam_pos[:, 2]
    in_front = z > NEAR_PLANE
    safe_z = np.where(in_front, z, 1.0)
    proj = np.stack([cam.fx * cam_pos[:, 0] / safe_z + cam.cx, cam.fy * cam_pos[:, 1] / safe_z + cam.cy], axis=-1)
    otv = o - t
    b_u = np.einsum("ki,ki->k", otv, R[:, :, 0])
    b_v = np.einsum("ki,ki->k", otv, R[:, :, 1])
    num = -np.einsum("ki,ki->k", otv, R[:, :, 2])
    visible = np.nonzero(in_front)[0]
    # Stable sort on depth keeps lower surfel index first among ties.
    order = visible[np.argsort(z[visible], kind="stable")]
    return _Geometry(R, scale, opacity, cam_pos, proj, b_u, b_v, num, order)


def _screen_bounds(surfels: Surfels, geom: _Geometry, cam: Camera) -> np.ndarray:
    """Conservative pixel bounding boxes (K, 4) = (xmin, xmax, ymin, ymax)."""
    k = len(surfels)
    out = np.empty((k, 4))
    r = _CUTOFF_RADIUS
    axes_u = geom.R[:, :, 0] * (r * geom.scale[:, 0:1])
    axes_v = geom.R[:, :, 1] * (r * geom.scale[:, 1:2])
    corners = np.stack(
        [surfels.position + su * axes_u + sv * axes_v for su in (-1, 1) for sv in (-1, 1)], axis=1
    )  # (K, 4, 3)
    cc = corners @ cam.rotation.T + cam.translation
    cz = cc[..., 2]
    behind = np.any(cz <= NEAR_PLANE, axis=1)
    safe = np.where(cz > NEAR_PLANE, cz, 1.0)
    px = cam.fx * cc[..., 0] / safe + cam.cx
    py = cam.fy * cc[..., 1] / safe + cam.cy
    lp = math.sqrt(2.0 * LOWPASS_SIGMA2 * math.log(255.0))
    out[:, 0] = np.minimum(px.min(axis=1), geom.proj[:, 0] - lp)
    out[:, 1] = np.maximum(px.max(axis=1), geom.proj[:, 0] + lp)
    out[:, 2] = np.minimum(py.min(axis=1), geom.proj[:, 1] - lp)
    out[:, 3] = np.maximum(py.max(axis=1), geom.proj[:, 1] + lp)
    # A footprint crossing the near plane can cover an unbounded screen area.
    out[behind] = [-np.inf, np.inf, -np.inf, np.inf]
    return out


def _distortion_terms(weight: np.ndarray, depth: np.ndarray):
    """Per-ray pair distortion and its partials, O(K log K) via a depth sort."""
    order = np.argsort(depth, axis=1, kind="stable")
    ws = np.take_along_axis(weight, order, axis=1)
    zs = np.take_along_axis(depth, order, axis=1)
    wz = ws * zs
    cw = np.cumsum(ws, axis=1)
    cwz = np.cumsum(wz, axis=1)
    w_before = cw - ws
    wz_before = cwz - wz
    w_after = cw[:, -1:] - cw
    wz_after = cwz[:, -1:] - cwz
    dist = np.sum(ws * (zs * w_before - wz_before), axis=1)
    d_dw_sorted = zs * w_before - wz_before + wz_after - zs * w_after
    d_dz_sorted = ws * (w_before - w_after)
    d_dw = np.empty_like(weight)
    d_dz = np.empty_like(weight)
    np.put_along_axis(d_dw, order, d_dw_sorted, axis=1)
    np.put_along_axis(d_dz, order, d_dz_sorted, axis=1)
    return dist, d_dw, d_dz


def _render_tile(rows, cols, idx, geom: _Geometry, cam: Camera, attrs: np.ndarray, o: np.ndarray):
    pix = rows * cam.width + cols
    rays = cam.pixel_rays(cols.astype(np.float64), rows.astype(np.float64))  # (P, 3)
    R = geom.R[idx]
    a_u = rays @ R[:, :, 0].T
    a_v = rays @ R[:, :, 1].T
    a_n = rays @ R[:, :, 2].T
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = geom.num[idx] / a_n
    valid3 = (np.abs(a_n) > _DENOM_EPS) & (lam > NEAR_PLANE)
    lam = np.where(valid3, lam, 0.0)
    su = geom.scale[idx, 0]
    sv = geom.scale[idx, 1]
    u = (geom.b_u[idx] + lam * a_u) / su
    v = (geom.b_v[idx] + lam * a_v) / sv
    g3 = np.where(valid3, np.exp(-0.5 * (u * u + v * v)), 0.0)
    dx = cols[:, None] - geom.proj[idx, 0]
    dy = rows[:, None] - geom.proj[idx, 1]
    g2 = np.exp(-(dx * dx + dy * dy) / (2.0 * LOWPASS_SIGMA2))
    use3 = g3 >= g2
    gauss = np.where(use3, g3, g2)
    alpha = np.where(gauss >= WEIGHT_CUTOFF, geom.opacity[idx] * gauss, 0.0)
    one_minus = 1.0 - alpha
    t_incl = np.cumprod(one_minus, axis=1)
    t_excl = np.concatenate([np.ones((len(pix), 1)), t_incl[:, :-1]], axis=1)
    alpha = np.where(t_excl >= TRANSMITTANCE_EPS, alpha, 0.0)
    weight = alpha * t_excl
    depth = np.where(valid3, lam, geom.cam_pos[idx, 2])
    depth = np.where(alpha > 0.0, depth, 0.0)
    dist, d_dw, d_dz = _distortion_terms(weight, depth)
    frag = _TileFragments(
        rows, cols, pix, idx, rays, lam, a_u, a_v, a_n, u, v, g3, g2, use3, valid3, gauss,
        alpha, t_excl, weight, depth, d_dw, d_dz,
    )
    feats = weight @ attrs[idx]
    return frag, feats, weight.sum(axis=1), np.sum(weight * depth, axis=1), dist


def _tiles(cam: Camera):
    for y0 in range(0, cam.height, TILE_SIZE):
        for x0 in range(0, cam.width, TILE_SIZE):
            yield x0, min(x0 + TILE_SIZE, cam.width), y0, min(y0 + TILE_SIZE, cam.height)


def render(surfels: Surfels, attributes, cam: Camera) -> RenderResult:
    """Splat ``attributes (K, F)`` of ``surfels`` into camera ``cam``."""
    cam.validate()
    attributes = np.asarray(attributes, dtype=np.float64)
    if attributes.ndim == 1:
        attributes = attributes[:, None]
    if attributes.shape[0] != len(surfels):
        raise ContractViolation("need one attribute row per surfel")
    h, w, f = cam.height, cam.width, attributes.shape[1]
    features = np.zeros((h * w, f))
    alpha = np.zeros(h * w)
    depth_sum = np.zeros(h * w)
    distortion = np.zeros(h * w)
    result = RenderResult(
        features.reshape(h, w, f), alpha.reshape(h, w), depth_sum.reshape(h, w), distortion.reshape(h, w),
        fingerprint=_fingerprint(surfels, attributes, cam), attributes=attributes,
    )
    if len(surfels) == 0:
        return result
    geom = _surfel_geometry(surfels, cam)
    result.geometry = geom
    if len(geom.order) == 0:
        return result
    bounds = _screen_bounds(surfels, geom, cam)[geom.order]
    o = cam.center
    for x0, x1, y0, y1 in _tiles(cam):
        hit = (bounds[:, 1] >= x0 - 0.5) & (bounds[:, 0] <= x1 - 0.5) & (bounds[:, 3] >= y0 - 0.5) & (bounds[:, 2] <= y1 - 0.5)
        idx = geom.order[hit]
        if len(idx) == 0:
            continue
        rr, cc = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
        frag, feats, a, dsum, dist = _render_tile(rr.reshape(-1), cc.reshape(-1), idx, geom, cam, attributes, o)
        features[frag.pix] = feats
        alpha[frag.pix] = a
        depth_sum[frag.pix] = dsum
        distortion[frag.pix] = dist
        result.tiles.append(frag)
    return result


def backward(
    surfels: Surfels,
    cam: Camera,
    result: RenderResult,
    grad_features=None,
    grad_alpha=None,
    grad_depth_sum=None,
    grad_distortion=None,
) -> RenderGrads:
    """Reverse-mode adjoints of :func:`render` for the given output gradients."""
    attrs = result.attributes
    if _fingerprint(surfels, attrs, cam) != result.fingerprint:
        raise StaleFragmentsError("scene or camera changed since the forward pass")
    k, f = attrs.shape
    hw = cam.height * cam.width
    gF = np.zeros((hw, f)) if grad_features is None else np.asarray(grad_features, dtype=np.float64).reshape(hw, f)
    gA = None if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64).reshape(hw)
    gD = None if grad_depth_sum is None else np.asarray(grad_depth_sum, dtype=np.float64).reshape(hw)
    gX = None if grad_distortion is None else np.asarray(grad_distortion, dtype=np.float64).reshape(hw)

    g_attr = np.zeros((k, f))
    g_opacity = np.zeros(k)
    g_tu = np.zeros((k, 3))
    g_tv = np.zeros((k, 3))
    g_n = np.zeros((k, 3))
    g_bu = np.zeros(k)
    g_bv = np.zeros(k)
    g_num = np.zeros(k)
    g_logs = np.zeros((k, 2))
    g_proj = np.zeros((k, 2))
    g_camz = np.zeros(k)
    geom = result.geometry

    for fr in result.tiles:
        idx = fr.idx
        p = fr.pix
        gf = gF[p]
        g_attr[idx] += fr.weight.T @ gf
        g_w = gf @ attrs[idx].T
        g_z = np.zeros_like(fr.weight)
        if gA is not None:
            g_w += gA[p][:, None]
        if gD is not None:
            g_w += gD[p][:, None] * fr.depth
            g_z += gD[p][:, None] * fr.weight
        if gX is not None:
            g_w += gX[p][:, None] * fr.dist_dw
            g_z += gX[p][:, None] * fr.dist_dz
        active = fr.alpha > 0.0
        # dL/d alpha_k = g_w_k T_k - sum_{j>k} g_w_j w_j / (1 - alpha_k)
        gww = g_w * fr.weight
        suffix = np.cumsum(gww[:, ::-1], axis=1)[:, ::-1] - gww
        g_alpha = np.where(active, g_w * fr.t_excl - suffix / np.where(active, 1.0 - fr.alpha, 1.0), 0.0)
        g_opacity[idx] += np.sum(g_alpha * fr.gauss, axis=0)
        g_gauss = g_alpha * geom.opacity[idx]

        # 3D branch: G = exp(-(u^2 + v^2) / 2)
        br3 = active & fr.use3
        g_q = np.where(br3, -0.5 * fr.g3 * g_gauss, 0.0)
        g_u = 2.0 * fr.u * g_q
        g_v = 2.0 * fr.v * g_q
        su = geom.scale[idx, 0]
        sv = geom.scale[idx, 1]
        g_logs[idx, 0] -= np.sum(g_u * fr.u, axis=0)
        g_logs[idx, 1] -= np.sum(g_v * fr.v, axis=0)
        g_du = g_u / su
        g_dv = g_v / sv
        g_bu[idx] += g_du.sum(axis=0)
        g_bv[idx] += g_dv.sum(axis=0)
        # Depth flows through lambda where the plane hit is valid, else through the center z.
        z3 = fr.valid3 & active
        g_lam = g_du * fr.a_u + g_dv * fr.a_v + np.where(z3, g_z, 0.0)
        g_camz[idx] += np.sum(np.where(active & ~fr.valid3, g_z, 0.0), axis=0)
        g_au = g_du * fr.lam
        g_av = g_dv * fr.lam
        safe_an = np.where(fr.valid3, fr.a_n, 1.0)
        g_lam = np.where(fr.valid3, g_lam, 0.0)
        g_num[idx] += np.sum(g_lam / safe_an, axis=0)
        g_an = -g_lam * fr.lam / safe_an
        g_tu[idx] += g_au.T @ fr.rays
        g_tv[idx] += g_av.T @ fr.rays
        g_n[idx] += g_an.T @ fr.rays

        # Screen-space branch: G = exp(-|p - c|^2 / (2 sigma^2))
        br2 = active & ~fr.use3
        g_dd = np.where(br2, -fr.g2 / (2.0 * LOWPASS_SIGMA2) * g_gauss, 0.0)
        dx = fr.cols[:, None] - geom.proj[idx, 0]
        dy = fr.rows[:, None] - geom.proj[idx, 1]
        g_cx = -2.0 * np.sum(g_dd * dx, axis=0)
        g_cy = -2.0 * np.sum(g_dd * dy, axis=0)
        g_proj[idx, 0] += g_cx
        g_proj[idx, 1] += g_cy

    t = surfels.position
    o = cam.center
    R = geom.R
    Rw = cam.rotation
    g_t = -g_bu[:, None] * R[:, :, 0] - g_bv[:, None] * R[:, :, 1] + g_num[:, None] * R[:, :, 2]
    g_tu += g_bu[:, None] * (o - t)
    g_tv += g_bv[:, None] * (o - t)
    g_n += g_num[:, None] * (t - o)
    # Projection of the center: c = (fx X / Z + cx, fy Y / Z + cy).
    X, Y, Z = geom.cam_pos.T
    safe_z = np.where(Z > NEAR_PLANE, Z, 1.0)
    g_cam = np.stack(
        [
            g_proj[:, 0] * cam.fx / safe_z,
            g_proj[:, 1] * cam.fy / safe_z,
            -(g_proj[:, 0] * cam.fx * X + g_proj[:, 1] * cam.fy * Y) / safe_z**2 + g_camz,
        ],
        axis=-1,
    )
    g_t += g_cam @ Rw
    g_R = np.stack([g_tu, g_tv, g_n], axis=-1)
    g_q = quat_to_rotmat_vjp(surfels.rotation, g_R)
    op = geom.opacity
    visible = np.zeros(k, dtype=bool)
    for fr in result.tiles:
        visible[fr.idx[np.any(fr.weight > 0, axis=0)]] = True
    return RenderGrads(
        position=g_t,
        rotation=g_q,
        log_scale=g_logs,
        opacity_logit=g_opacity * op * (1.0 - op),
        attributes=g_attr,
        visible=visible,
    )
