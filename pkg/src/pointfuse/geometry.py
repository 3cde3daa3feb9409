"""Oriented 3D boxes in camera coordinates, rotated IoU, and pinhole projection.

Camera frame: X right, Y down, Z forward. A box's ``y`` is its bottom face
(KITTI label convention) so its vertical span is ``[y - h, y]``. Yaw rotates
about Y; the local length axis maps to ``(cos yaw, -sin yaw)`` in the (x, z)
ground plane.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

AREA_EPS = 1e-9
DEPTH_EPS = 1e-6


def wrap_angle(theta):
    """Wrap into [-pi, pi)."""
    return (theta + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.h > 0 and self.w > 0 and self.l > 0):
            raise ValueError(f"box size must be positive, got h={self.h} w={self.w} l={self.l}")
        if not -math.pi <= self.yaw <= math.pi:
            object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def volume(self) -> float:
        return self.h * self.w * self.l

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.h, self.w, self.l, self.yaw])

    @classmethod
    def from_array(cls, a) -> "Box3D":
        return cls(*(float(v) for v in a[:7]))


def boxes_to_array(boxes: Sequence[Box3D]) -> np.ndarray:
    return np.array([b.to_array() for b in boxes]).reshape(-1, 7)


# projection ----------------------------------------------------------------


def project_points(points: np.ndarray, M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Homogeneous projection ``M @ (x, y, z, 1)``.

    Returns (N x 2 pixel coordinates, N validity flags). Points at depth
    ``<= 1e-6`` are invalid and get (0, 0).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (3, 4) or not np.isfinite(M).all():
        raise ValueError(f"projection matrix must be finite 3x4, got {M.shape}")
    ph = pts @ M[:, :3].T + M[:, 3]
    valid = ph[:, 2] > DEPTH_EPS
    depth = np.where(valid, ph[:, 2], 1.0)
    uv = np.where(valid[:, None], ph[:, :2] / depth[:, None], 0.0)
    return uv, valid


# polygons ------------------------------------------------------------------


def box_corners_bev(b: Box3D) -> np.ndarray:
    """Footprint corners as a 4 x 2 array of (x, z), counter-clockwise."""
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    local = np.array([[b.l, b.w], [-b.l, b.w], [-b.l, -b.w], [b.l, -b.w]]) * 0.5
    x = b.x + c * local[:, 0] + s * local[:, 1]
    z = b.z - s * local[:, 0] + c * local[:, 1]
    return np.column_stack([x, z])


def polygon_area(poly) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_clip(subject, clip) -> list[tuple[float, float]]:
    """Sutherland-Hodgman: intersection of ``subject`` with a convex CCW ``clip``."""
    output = [tuple(map(float, p)) for p in subject]
    clip = [tuple(map(float, p)) for p in clip]
    for i in range(len(clip)):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % len(clip)]
        ex, ey = bx - ax, by - ay
        inp, output = output, []
        side = [ex * (py - ay) - ey * (px - ax) for px, py in inp]
        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            s_cur, s_prev = side[j], side[j - 1]
            if s_cur >= 0:
                if s_prev < 0:
                    output.append(_cross_point(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0:
                output.append(_cross_point(prev, cur, s_prev, s_cur))
    if len(output) < 3 or polygon_area(output) < AREA_EPS:
        return []
    return output


def _cross_point(p, q, sp_, sq):
    t = sp_ / (sp_ - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    poly = polygon_clip(box_corners_bev(a), box_corners_bev(b))
    return polygon_area(poly) if poly else 0.0


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection_area(a, b)
    union = a.l * a.w + b.l * b.w - inter
    return min(max(inter / union, 0.0), 1.0)


def vertical_overlap(a: Box3D, b: Box3D) -> float:
    return max(0.0, min(a.y, b.y) - max(a.y - a.h, b.y - b.h))


def iou_3d(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection_area(a, b) * vertical_overlap(a, b)
    union = a.volume + b.volume - inter
    return min(max(inter / union, 0.0), 1.0)


# vectorized pairwise overlap (NMS, matching) -------------------------------


def _corners_array(boxes: np.ndarray) -> np.ndarray:
    c, s = np.cos(boxes[:, 6]), np.sin(boxes[:, 6])
    lx = np.array([0.5, -0.5, -0.5, 0.5])[None, :] * boxes[:, 5:6]
    lz = np.array([0.5, 0.5, -0.5, -0.5])[None, :] * boxes[:, 4:5]
    x = boxes[:, 0:1] + c[:, None] * lx + s[:, None] * lz
    z = boxes[:, 2:3] - s[:, None] * lx + c[:, None] * lz
    return np.stack([x, z], axis=-1)


def _inside(pts: np.ndarray, poly: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    # pts: P x K x 2, poly: P x 4 x 2 (CCW) -> P x K
    edge = np.roll(poly, -1, axis=1) - poly
    rel = pts[:, :, None, :] - poly[:, None, :, :]
    cross = edge[:, None, :, 0] * rel[..., 1] - edge[:, None, :, 1] * rel[..., 0]
    return (cross >= -tol).all(axis=2)


def bev_intersection_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise footprint intersection areas, (n, 7) x (m, 7) -> n x m.

    Vertex-enumeration formulation: corners inside the other rectangle plus
    edge crossings, angle-sorted about their mean. Independent of the
    Sutherland-Hodgman path used by :func:`iou_bev`. Pairs whose bounding
    circles are disjoint are skipped.
    """
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    n, m = len(a), len(b)
    out = np.zeros((n, m))
    if n == 0 or m == 0:
        return out
    ra = 0.5 * np.hypot(a[:, 4], a[:, 5])
    rb = 0.5 * np.hypot(b[:, 4], b[:, 5])
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 2] - b[None, :, 2])
    ia, ib = np.nonzero(dist < ra[:, None] + rb[None, :])
    if len(ia):
        out[ia, ib] = _pair_intersection(_corners_array(a)[ia], _corners_array(b)[ib])
    return out


def _pair_intersection(ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
    """Intersection areas of aligned rectangle pairs given as P x 4 x 2 CCW corners."""
    p = len(ca)
    in_a = _inside(ca, cb)
    in_b = _inside(cb, ca)

    r = np.roll(ca, -1, axis=1) - ca
    s = np.roll(cb, -1, axis=1) - cb
    pa = ca[:, :, None, :]
    pb = cb[:, None, :, :]
    rr = r[:, :, None, :]
    ss = s[:, None, :, :]
    denom = rr[..., 0] * ss[..., 1] - rr[..., 1] * ss[..., 0]
    qp = pb - pa
    safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
    t = (qp[..., 0] * ss[..., 1] - qp[..., 1] * ss[..., 0]) / safe
    u = (qp[..., 0] * rr[..., 1] - qp[..., 1] * rr[..., 0]) / safe
    hit = (np.abs(denom) > 1e-12) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    cross_pts = (pa + t[..., None] * rr).reshape(p, 16, 2)

    pts = np.concatenate([ca, cb, cross_pts], axis=1)
    mask = np.concatenate([in_a, in_b, hit.reshape(p, 16)], axis=1)
    count = mask.sum(axis=1)
    centroid = (pts * mask[..., None]).sum(axis=1) / np.maximum(count, 1)[:, None]
    ang = np.arctan2(pts[..., 1] - centroid[:, None, 1], pts[..., 0] - centroid[:, None, 0])
    ang = np.where(mask, ang, np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    pts = np.take_along_axis(pts, order[..., None], axis=1)
    mask = np.take_along_axis(mask, order, axis=1)
    first = pts[:, :1, :]
    pts = np.where(mask[..., None], pts, first)
    nxt = np.roll(pts, -1, axis=1)
    area = 0.5 * (pts[..., 0] * nxt[..., 1] - nxt[..., 0] * pts[..., 1]).sum(axis=1)
    return np.where((count >= 3) & (area > AREA_EPS), area, 0.0)


def iou_bev_upper_bound(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Cheap pairwise upper bound on BEV IoU.

    The footprint intersection lies inside the intersection of the two
    axis-aligned footprint bounds and is no larger than the smaller footprint.
    """
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    ca, cb = _corners_array(a), _corners_array(b)
    lo_a, hi_a = ca.min(axis=1), ca.max(axis=1)
    lo_b, hi_b = cb.min(axis=1), cb.max(axis=1)
    ext = np.clip(np.minimum(hi_a[:, None], hi_b[None]) - np.maximum(lo_a[:, None], lo_b[None]), 0.0, None)
    area_a, area_b = a[:, 4] * a[:, 5], b[:, 4] * b[:, 5]
    inter = np.minimum(ext[..., 0] * ext[..., 1], np.minimum(area_a[:, None], area_b[None]))
    return inter / (area_a[:, None] + area_b[None] - inter)


def iou_bev_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    inter = bev_intersection_matrix(a, b)
    union = (a[:, 5] * a[:, 4])[:, None] + (b[:, 5] * b[:, 4])[None, :] - inter
    return np.clip(inter / union, 0.0, 1.0)


def iou_3d_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    inter = bev_intersection_matrix(a, b)
    top = np.maximum((a[:, 1] - a[:, 3])[:, None], (b[:, 1] - b[:, 3])[None, :])
    bottom = np.minimum(a[:, 1][:, None], b[:, 1][None, :])
    inter = inter * np.maximum(bottom - top, 0.0)
    vol_a = a[:, 3] * a[:, 4] * a[:, 5]
    vol_b = b[:, 3] * b[:, 4] * b[:, 5]
    return np.clip(inter / (vol_a[:, None] + vol_b[None, :] - inter), 0.0, 1.0)


# differentiable surrogate --------------------------------------------------


def iou_3d_axis_aligned_diff(center: Tensor, size: Tensor, gt: np.ndarray) -> Tensor:
    """Axis-aligned 3D IoU of predicted boxes against constant targets.

    ``center`` is N x 3 (x, y, z), ``size`` is N x 3 (h, w, l), ``gt`` is N x 7.
    Yaw of both sides is ignored: the footprint spans l along x and w along z.
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    x, y, z = center[:, 0], center[:, 1], center[:, 2]
    h, w, l = size[:, 0], size[:, 1], size[:, 2]

    def overlap(lo: Tensor, hi: Tensor, g_lo: np.ndarray, g_hi: np.ndarray) -> Tensor:
        return T.relu(T.minimum(hi, g_hi) - T.maximum(lo, g_lo))

    ox = overlap(x - l * 0.5, x + l * 0.5, gt[:, 0] - gt[:, 5] / 2, gt[:, 0] + gt[:, 5] / 2)
    oz = overlap(z - w * 0.5, z + w * 0.5, gt[:, 2] - gt[:, 4] / 2, gt[:, 2] + gt[:, 4] / 2)
    oy = overlap(y - h, y, gt[:, 1] - gt[:, 3], gt[:, 1])
    inter = ox * oy * oz
    vol_gt = gt[:, 3] * gt[:, 4] * gt[:, 5]
    union = h * w * l + vol_gt - inter
    return inter / union


# points and boxes ----------------------------------------------------------


def points_in_box(points: np.ndarray, box, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside ``box`` (Box3D or length-7 array)."""
    b = box.to_array() if isinstance(box, Box3D) else np.asarray(box, dtype=np.float64)
    local = to_box_frame(points, b)
    return (
        (np.abs(local[:, 0]) <= b[5] / 2 + margin)
        & (np.abs(local[:, 2]) <= b[4] / 2 + margin)
        & (local[:, 1] <= margin)
        & (local[:, 1] >= -b[3] - margin)
    )


def to_box_frame(points: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Points in the box frame: origin at the bottom center, yaw undone."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    c, s = math.cos(box[6]), math.sin(box[6])
    dx, dy, dz = p[:, 0] - box[0], p[:, 1] - box[1], p[:, 2] - box[2]
    return np.column_stack([c * dx - s * dz, dy, s * dx + c * dz])


def box_aabb(box: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    corners = _corners_array(np.asarray(box, dtype=np.float64).reshape(1, 7))[0]
    lo = np.array([corners[:, 0].min(), box[1] - box[3], corners[:, 1].min()])
    hi = np.array([corners[:, 0].max(), box[1], corners[:, 1].max()])
    return lo, hi


def mc_iou_oracle(a: Box3D, b: Box3D, samples: int = 1_000_000, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo IoU by uniform sampling of the joint bounding volume.

    Returns ``(estimate, standard_error)``. The estimate is the fraction of
    samples inside both boxes among those inside either; its standard error is
    the binomial one on that conditional sample.
    """
    rng = np.random.default_rng(seed)
    aa, ba = a.to_array(), b.to_array()
    lo_a, hi_a = box_aabb(aa)
    lo_b, hi_b = box_aabb(ba)
    lo, hi = np.minimum(lo_a, lo_b), np.maximum(hi_a, hi_b)
    both = either = 0
    chunk = 250_000
    remaining = int(samples)
    while remaining > 0:
        k = min(chunk, remaining)
        pts = rng.uniform(lo, hi, size=(k, 3))
        ia = points_in_box(pts, aa)
        ib = points_in_box(pts, ba)
        both += int(np.count_nonzero(ia & ib))
        either += int(np.count_nonzero(ia | ib))
        remaining -= k
    if either == 0:
        return 0.0, 0.0
    p = both / either
    return p, math.sqrt(p * (1 - p) / either)
