"""Differentiable point-splat rasterizer.

Each world point is projected into the target view and splats onto every
pixel whose center lies strictly within ``radius_px`` of the projected
center (squared pixel distance s < r^2). Per pixel, hits are sorted by
ascending camera z (ties by ascending point index), truncated to the
``k_blend`` nearest, and alpha-composited front to back:

    alpha_i = 1 - clamp(sqrt(s_i / r^2), alpha_min_clamp, 1.0)
    F_pixel = sum_i alpha_i * F_i * prod_{j<i} (1 - alpha_j)

Depth is composited as sum_i alpha_i * z_i by default, or with the same
transmittance weights as features when ``depth_mode="transmittance"``.
Uncovered pixels get zero feature, depth, and coverage.

The fast path bins all point-pixel hits at once with a lexicographic sort;
``rasterize_reference`` is a deliberately naive per-pixel oracle kept for
tests. ``rasterize_backward`` is the exact adjoint of the fast path, with
zero gradient for culled points, truncated hits, and clamp-saturated
weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DomainError, ShapeError
from .geometry import Intrinsics, Pose, Z_NEAR

_DEPTH_MODES = ("alpha_sum", "transmittance")


@dataclass
class SplatConfig:
    radius_px: float = 1.5
    k_blend: int = 16
    alpha_min_clamp: float = 1e-3
    depth_mode: str = "alpha_sum"

    def __post_init__(self):
        if self.radius_px <= 0:
            raise DomainError("radius_px must be positive")
        if self.k_blend < 1:
            raise DomainError("k_blend must be >= 1")
        if not 0 < self.alpha_min_clamp < 1:
            raise DomainError("alpha_min_clamp must be in (0, 1)")
        if self.depth_mode not in _DEPTH_MODES:
            raise DomainError(f"depth_mode must be one of {_DEPTH_MODES}")


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray
    radius_ndc: float = 1.5

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        self.features = np.asarray(self.features)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ShapeError(f"positions must be (P, 3), got {self.positions.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != self.positions.shape[0]:
            raise ShapeError(
                f"features must be (P, C) with P={self.positions.shape[0]}, got {self.features.shape}"
            )

    def __len__(self):
        return self.positions.shape[0]


def aggregate_clouds(clouds) -> PointCloud:
    """Concatenate clouds into one; feature widths must agree."""
    clouds = list(clouds)
    if not clouds:
        raise ShapeError("aggregate_clouds of an empty list")
    width = clouds[0].features.shape[1]
    for c in clouds:
        if c.features.shape[1] != width:
            raise ShapeError("feature widths differ across clouds")
    return PointCloud(
        np.concatenate([c.positions for c in clouds], axis=0),
        np.concatenate([c.features for c in clouds], axis=0),
        radius_ndc=clouds[0].radius_ndc,
    )


def blend_weight(s, cfg: SplatConfig):
    """Splat opacity for squared pixel distance s (scalar or array)."""
    ratio = np.sqrt(np.asarray(s, dtype=np.float64)) / cfg.radius_px
    return 1.0 - np.clip(ratio, cfg.alpha_min_clamp, 1.0)


class RenderedView:
    """Output of rasterize plus the hit lists needed for the backward pass."""

    def __init__(self, features, depth, coverage, intr, cfg):
        self.features = features          # (H, W, C)
        self.depth = depth                # (H, W)
        self.coverage = coverage          # (H, W) int
        self.intr = intr
        self.cfg = cfg
        # Kept hits, sorted by (pixel, z, point index) and truncated to K:
        self._hit_pixel = None            # (Q,) flat pixel index
        self._hit_point = None            # (Q,)
        self._hit_alpha = None            # (Q,)
        self._hit_z = None                # (Q,)
        self._hit_s = None                # (Q,)
        self._hit_row = None              # (Q,) covered-pixel row in the dense (M, K) layout
        self._hit_slot = None             # (Q,) blend slot (z rank)
        self._covered = None              # (M,) flat pixel index per dense row
        self._cam = None                  # (P, 3) camera-space coordinates
        self._xy = None                   # (P, 2) projected pixel coordinates
        self._in_front = None             # (P,) bool

    @property
    def per_pixel_hits(self):
        """Dict: flat pixel index -> list of (point_index, alpha, z), ascending z."""
        out = {}
        for pix, pt, a, z in zip(self._hit_pixel, self._hit_point, self._hit_alpha, self._hit_z):
            out.setdefault(int(pix), []).append((int(pt), float(a), float(z)))
        return out

    def hits_for_pixel(self, row: int, col: int):
        flat = row * self.intr.width + col
        mask = self._hit_pixel == flat
        return list(zip(self._hit_point[mask].tolist(),
                        self._hit_alpha[mask].tolist(),
                        self._hit_z[mask].tolist()))


def _project_points(positions, intr: Intrinsics, pose: Pose):
    pos = np.asarray(positions, dtype=np.float64)
    cam = pos @ pose.R.T + pose.T
    z = cam[:, 2]
    in_front = z > Z_NEAR
    safe = np.where(in_front, z, 1.0)
    x = intr.fx * cam[:, 0] / safe + intr.cx
    y = intr.fy * cam[:, 1] / safe + intr.cy
    return cam, x, y, z, in_front


def _collect_hits(x, y, z, in_front, intr: Intrinsics, r: float):
    """All (point, pixel) pairs with squared distance < r^2, z-culled.

    Returns flat arrays (point_idx, pixel_idx, s) in arbitrary order.
    """
    P = x.shape[0]
    idx = np.flatnonzero(in_front)
    if idx.size == 0:
        ints = np.zeros(0, dtype=np.int64)
        return ints, ints.copy(), np.zeros(0, dtype=np.float64)
    xf = x[idx]
    yf = y[idx]
    wmax = int(np.floor(2.0 * r)) + 1
    offs = np.arange(wmax, dtype=np.int64)
    cols = np.ceil(xf - r).astype(np.int64)[:, None] + offs      # (Pf, wmax)
    rows = np.ceil(yf - r).astype(np.int64)[:, None] + offs
    col_ok = (cols >= 0) & (cols < intr.width)
    row_ok = (rows >= 0) & (rows < intr.height)
    dx = cols.astype(np.float64) - xf[:, None]
    dy = rows.astype(np.float64) - yf[:, None]
    s = dy[:, :, None] ** 2 + dx[:, None, :] ** 2                # (Pf, wmax_row, wmax_col)
    hit = (s < r * r) & row_ok[:, :, None] & col_ok[:, None, :]
    ip, ir, ic = np.nonzero(hit)
    point_idx = idx[ip]
    pixel_idx = rows[ip, ir] * intr.width + cols[ip, ic]
    return point_idx, pixel_idx, s[ip, ir, ic]


def _dense_layout(point_idx, pixel_idx, s, z_all, k: int):
    """Sort hits by (pixel, z, point), rank within pixel, truncate to k."""
    zq = z_all[point_idx]
    order = np.lexsort((point_idx, zq, pixel_idx))
    point_idx = point_idx[order]
    pixel_idx = pixel_idx[order]
    s = s[order]
    zq = zq[order]
    if point_idx.size:
        new_group = np.empty(point_idx.size, dtype=bool)
        new_group[0] = True
        np.not_equal(pixel_idx[1:], pixel_idx[:-1], out=new_group[1:])
        starts = np.flatnonzero(new_group)
        counts = np.diff(np.append(starts, point_idx.size))
        rank = np.arange(point_idx.size, dtype=np.int64) - np.repeat(starts, counts)
        keep = rank < k
        covered = pixel_idx[starts]
        kept_counts = np.minimum(counts, k)
        row = np.repeat(np.arange(covered.size, dtype=np.int64), kept_counts)
        return point_idx[keep], pixel_idx[keep], s[keep], zq[keep], rank[keep], row, covered
    empty = np.zeros(0, dtype=np.int64)
    return empty, empty.copy(), s, zq, empty.copy(), empty.copy(), empty.copy()


def rasterize(cloud: PointCloud, intr: Intrinsics, pose: Pose, cfg: SplatConfig) -> RenderedView:
    """Splat a feature point cloud into the target view (fast path)."""
    H, W = intr.height, intr.width
    C = cloud.features.shape[1]
    feat_dtype = cloud.features.dtype if cloud.features.dtype in (np.float32, np.float64) else np.float64

    cam, x, y, z, in_front = _project_points(cloud.positions, intr, pose)
    point_idx, pixel_idx, s = _collect_hits(x, y, z, in_front, intr, cfg.radius_px)
    point_idx, pixel_idx, s, zq, slot, row, covered = _dense_layout(
        point_idx, pixel_idx, s, z, cfg.k_blend
    )

    M = covered.size
    K = cfg.k_blend
    alpha = 1.0 - np.clip(np.sqrt(s) / cfg.radius_px, cfg.alpha_min_clamp, 1.0)

    alpha_mat = np.zeros((M, K), dtype=np.float64)
    alpha_mat[row, slot] = alpha
    trans = np.ones((M, K), dtype=np.float64)
    if K > 1:
        np.cumprod(1.0 - alpha_mat[:, :-1], axis=1, out=trans[:, 1:])
    weight_mat = alpha_mat * trans

    feat_mat = np.zeros((M, K, C), dtype=np.float64)
    feat_mat[row, slot] = cloud.features[point_idx].astype(np.float64, copy=False)
    feat_rows = np.einsum("mk,mkc->mc", weight_mat, feat_mat)

    z_mat = np.zeros((M, K), dtype=np.float64)
    z_mat[row, slot] = zq
    if cfg.depth_mode == "alpha_sum":
        depth_rows = (alpha_mat * z_mat).sum(axis=1)
    else:
        depth_rows = (weight_mat * z_mat).sum(axis=1)

    features = np.zeros((H * W, C), dtype=feat_dtype)
    features[covered] = feat_rows.astype(feat_dtype, copy=False)
    depth = np.zeros(H * W, dtype=np.float64)
    depth[covered] = depth_rows
    coverage = np.zeros(H * W, dtype=np.int64)
    if point_idx.size:
        np.add.at(coverage, pixel_idx, 1)

    view = RenderedView(features.reshape(H, W, C), depth.reshape(H, W),
                        coverage.reshape(H, W), intr, cfg)
    view._hit_pixel = pixel_idx
    view._hit_point = point_idx
    view._hit_alpha = alpha
    view._hit_z = zq
    view._hit_s = s
    view._hit_row = row
    view._hit_slot = slot
    view._covered = covered
    view._cam = cam
    view._xy = np.stack([x, y], axis=1)
    view._in_front = in_front
    return view


def rasterize_reference(cloud: PointCloud, intr: Intrinsics, pose: Pose, cfg: SplatConfig):
    """Naive all-pairs per-pixel oracle. Returns (features, depth, coverage)."""
    H, W = intr.height, intr.width
    P = len(cloud)
    C = cloud.features.shape[1]
    pos = np.asarray(cloud.positions, dtype=np.float64)
    feats = np.asarray(cloud.features, dtype=np.float64)
    r2 = cfg.radius_px * cfg.radius_px

    cam = pos @ np.asarray(pose.R, dtype=np.float64).T + np.asarray(pose.T, dtype=np.float64)
    z = cam[:, 2]
    front = z > Z_NEAR
    x = np.where(front, intr.fx * cam[:, 0] / np.where(front, z, 1.0) + intr.cx, np.inf)
    y = np.where(front, intr.fy * cam[:, 1] / np.where(front, z, 1.0) + intr.cy, np.inf)

    features = np.zeros((H, W, C), dtype=np.float64)
    depth = np.zeros((H, W), dtype=np.float64)
    coverage = np.zeros((H, W), dtype=np.int64)
    indices = np.arange(P)
    for i in range(H):
        for j in range(W):
            s = (x - j) ** 2 + (y - i) ** 2
            hit = (s < r2) & front
            if not hit.any():
                continue
            hz = z[hit]
            hidx = indices[hit]
            hs = s[hit]
            order = np.lexsort((hidx, hz))[: cfg.k_blend]
            coverage[i, j] = order.size
            t = 1.0
            f_acc = np.zeros(C, dtype=np.float64)
            d_acc = 0.0
            for o in order:
                a = 1.0 - min(max(np.sqrt(hs[o]) / cfg.radius_px, cfg.alpha_min_clamp), 1.0)
                f_acc = f_acc + a * t * feats[hidx[o]]
                if cfg.depth_mode == "alpha_sum":
                    d_acc += a * hz[o]
                else:
                    d_acc += a * t * hz[o]
                t *= 1.0 - a
            features[i, j] = f_acc
            depth[i, j] = d_acc
    return features, depth, coverage


def rasterize_backward(view: RenderedView, cloud: PointCloud, intr: Intrinsics, pose: Pose,
                       cfg: SplatConfig, d_features=None, d_depth=None):
    """Exact adjoint of rasterize.

    d_features: (H, W, C) upstream gradient for the feature map (or None).
    d_depth: (H, W) upstream gradient for the depth map (or None).
    Returns (d_positions (P, 3), d_point_features (P, C)).
    """
    P = len(cloud)
    C = cloud.features.shape[1]
    d_pos = np.zeros((P, 3), dtype=np.float64)
    d_feat = np.zeros((P, C), dtype=np.float64)
    Q = view._hit_point.size
    if Q == 0 or (d_features is None and d_depth is None):
        return d_pos, d_feat

    row = view._hit_row
    slot = view._hit_slot
    point = view._hit_point
    alpha = view._hit_alpha
    zq = view._hit_z
    s = view._hit_s
    covered = view._covered
    M = covered.size
    K = cfg.k_blend

    alpha_mat = np.zeros((M, K), dtype=np.float64)
    alpha_mat[row, slot] = alpha
    trans = np.ones((M, K), dtype=np.float64)
    if K > 1:
        np.cumprod(1.0 - alpha_mat[:, :-1], axis=1, out=trans[:, 1:])

    # Per-hit scalar u_q: d(pixel outputs)/d(weight of hit q) along the
    # transmittance-composited channels.
    feats = np.asarray(cloud.features, dtype=np.float64)
    u = np.zeros(Q, dtype=np.float64)
    if d_features is not None:
        g_rows = np.asarray(d_features, dtype=np.float64).reshape(-1, C)[covered]
        u += (g_rows[row] * feats[point]).sum(axis=1)
        d_feat_hits = (alpha * trans[row, slot])[:, None] * g_rows[row]
        for ci in range(C):
            d_feat[:, ci] = np.bincount(point, weights=d_feat_hits[:, ci], minlength=P)
    g_depth_rows = None
    if d_depth is not None:
        g_depth_rows = np.asarray(d_depth, dtype=np.float64).reshape(-1)[covered]
        if cfg.depth_mode == "transmittance":
            u += g_depth_rows[row] * zq

    u_mat = np.zeros((M, K), dtype=np.float64)
    u_mat[row, slot] = u
    wu = alpha_mat * trans * u_mat
    # suffix[m, k] = sum_{k' > k} wu[m, k']
    suffix = np.zeros((M, K), dtype=np.float64)
    if K > 1:
        suffix[:, :-1] = wu[:, ::-1].cumsum(axis=1)[:, ::-1][:, 1:]

    d_alpha = trans[row, slot] * u - suffix[row, slot] / (1.0 - alpha)
    d_z = np.zeros(Q, dtype=np.float64)
    if g_depth_rows is not None:
        if cfg.depth_mode == "alpha_sum":
            d_alpha += g_depth_rows[row] * zq
            d_z = alpha * g_depth_rows[row]
        else:
            d_z = alpha * trans[row, slot] * g_depth_rows[row]

    # alpha -> squared distance; clamp saturation gives zero slope.
    ratio = np.sqrt(s) / cfg.radius_px
    live = (ratio > cfg.alpha_min_clamp) & (ratio < 1.0)
    d_s = np.where(live, -d_alpha / (2.0 * cfg.radius_px * np.sqrt(np.maximum(s, 1e-300))), 0.0)

    # squared distance -> projected pixel coords. s = (col - x)^2 + (row - y)^2.
    x = view._xy[:, 0]
    y = view._xy[:, 1]
    pix_col = (view._hit_pixel % intr.width).astype(np.float64)
    pix_row = (view._hit_pixel // intr.width).astype(np.float64)
    d_x_hits = d_s * 2.0 * (x[point] - pix_col)
    d_y_hits = d_s * 2.0 * (y[point] - pix_row)

    d_x = np.bincount(point, weights=d_x_hits, minlength=P)
    d_y = np.bincount(point, weights=d_y_hits, minlength=P)
    d_zcam = np.bincount(point, weights=d_z, minlength=P)

    # pixel coords -> camera coords -> world coords.
    cam = view._cam
    zc = cam[:, 2]
    front = view._in_front
    safe = np.where(front, zc, 1.0)
    d_cx = np.where(front, d_x * intr.fx / safe, 0.0)
    d_cy = np.where(front, d_y * intr.fy / safe, 0.0)
    d_cz = np.where(
        front,
        -d_x * intr.fx * cam[:, 0] / (safe * safe)
        - d_y * intr.fy * cam[:, 1] / (safe * safe)
        + d_zcam,
        0.0,
    )
    d_cam = np.stack([d_cx, d_cy, d_cz], axis=1)
    d_pos[:] = d_cam @ np.asarray(pose.R, dtype=np.float64)
    return d_pos, d_feat


def render_cloud_t(positions: "ad.Tensor", features: "ad.Tensor", intr: Intrinsics,
                   pose: Pose, cfg: SplatConfig):
    """Tape-recorded rasterization of tensor-valued positions/features.

    Returns (feature map tensor (H*W, C), depth tensor (H*W,), RenderedView).
    """
    cloud = PointCloud(positions.data, features.data, radius_ndc=cfg.radius_px)
    view = rasterize(cloud, intr, pose, cfg)
    H, W = intr.height, intr.width
    C = features.data.shape[1]

    def vjp_pos_from_feat(g):
        d_pos, _ = rasterize_backward(view, cloud, intr, pose, cfg,
                                      d_features=g.reshape(H, W, C))
        return d_pos.astype(positions.data.dtype, copy=False)

    def vjp_feat_from_feat(g):
        _, d_f = rasterize_backward(view, cloud, intr, pose, cfg,
                                    d_features=g.reshape(H, W, C))
        return d_f.astype(features.data.dtype, copy=False)

    feat_out = ad.custom_op(
        view.features.reshape(H * W, C).astype(features.data.dtype, copy=False),
        [(positions, vjp_pos_from_feat), (features, vjp_feat_from_feat)],
    )

    def vjp_pos_from_depth(g):
        d_pos, _ = rasterize_backward(view, cloud, intr, pose, cfg,
                                      d_depth=g.reshape(H, W))
        return d_pos.astype(positions.data.dtype, copy=False)

    depth_out = ad.custom_op(
        view.depth.reshape(H * W).astype(positions.data.dtype, copy=False),
        [(positions, vjp_pos_from_depth)],
    )
    return feat_out, depth_out, view
