"""Desk-scale two-stream detector.

An image stream of four conv blocks and a point stream of four subsample-and-group
stages run side by side. After every point stage the stage features are fused
with the image block of matching depth, and after the last propagation stage
the full-resolution point features are fused with the upsampled multi-scale map.
A point-wise proposal head and a small box-refinement head sit on top.

All geometric preprocessing that does not depend on parameters (subsampling,
neighbourhoods, interpolation weights, image correspondences, targets) is
computed once per scene in :class:`SceneCache`.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import tensor as T
from .evaluation import nms_indices
from .fusion import LiFusionLayer, fuse, generate_grid
from .geometry import Box3D, iou_3d_axis_aligned_diff, iou_3d_matrix, points_in_box, to_box_frame, wrap_angle
from .kitti import Scene
from .losses import (
    BinConfig,
    LossBreakdown,
    LossWeights,
    RegLoss,
    ce_loss,
    decode_boxes,
    encode_box_targets,
    focal_loss,
    iou_loss,
    reg_loss,
    smooth_l1,
    stage_loss,
)
from .tensor import Tensor

FUSION_MODES = ("none", "ungated", "gated")
PROB_EPS = 1e-7


class LossMode(str, enum.Enum):
    CE = "ce"
    IOU_ONLY = "iou_only"
    NONE = "none"


@dataclass(frozen=True)
class TwoStreamConfig:
    image_size: tuple[int, int] = (64, 64)
    image_channels: tuple[int, ...] = (8, 16, 24, 32)
    point_counts: tuple[int, ...] = (1024, 256, 64, 32)
    radii: tuple[float, ...] = (0.8, 1.6, 3.2, 6.4)
    group_size: int = 16
    sa_channels: tuple[int, ...] = (16, 32, 48, 64)
    # propagation widths, coarse to fine: onto stage 3, 2, 1 and the input points
    fp_channels: tuple[int, ...] = (64, 48, 32, 32)
    # hidden width of each fusion gate (four stage sites, then the full-resolution site); 0 = min(Cp, Ci)
    fusion_hidden: tuple[int, ...] = (0, 0, 0, 0, 0)
    fu_channels: int = 4
    fusion: str = "gated"
    head_channels: int = 32
    fg_prior: float = 0.1
    mean_size: tuple[float, float, float] = (1.55, 1.65, 3.8)
    bins: BinConfig = field(default_factory=BinConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    pre_nms_top_k: int = 256
    nms_threshold: float = 0.8
    max_proposals: int = 64
    final_nms_threshold: float = 0.1
    rcnn_points: int = 64
    rcnn_channels: int = 32
    pool_margin: float = 0.5
    rcnn_pos_iou: float = 0.55
    # proposals between the two thresholds get no classification label
    rcnn_neg_iou: float = 0.45
    gt_jitter: int = 4
    jitter_center: float = 0.3
    jitter_size: float = 0.1
    jitter_yaw: float = 0.15
    lr: float = 0.002
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("image_channels", "point_counts", "radii", "sa_channels", "fp_channels"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} needs four entries, got {getattr(self, name)}")
        if len(self.fusion_hidden) != 5:
            raise ValueError("fusion_hidden needs five entries (four stage sites and the final site)")
        if any(b > a for a, b in zip(self.point_counts, self.point_counts[1:])):
            raise ValueError(f"point_counts must be non-increasing, got {self.point_counts}")
        h, w = self.image_size
        if h % 16 or w % 16:
            raise ValueError(f"image dims must be divisible by 16, got {self.image_size}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if not 0 < self.fg_prior < 1:
            raise ValueError("fg_prior must lie in (0, 1)")

    @property
    def fused(self) -> bool:
        return self.fusion != "none"

    @property
    def reg_width(self) -> int:
        return 2 * self.bins.num_bins + self.bins.num_heading_bins

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TwoStreamConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "bins":
                v = BinConfig(**v)
            elif f.name == "loss":
                v = LossWeights(**v)
            elif isinstance(v, list):
                v = tuple(v)
            kw[f.name] = v
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kw)


# parameters ----------------------------------------------------------------


def _he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(scale=math.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _fusion_widths(cfg: TwoStreamConfig) -> list[tuple[int, int]]:
    """(point channels, image channels) at each fusion site."""
    sites = list(zip(cfg.sa_channels, cfg.image_channels))
    sites.append((cfg.fp_channels[-1], 4 * cfg.fu_channels))
    return sites


def stage_widths(cfg: TwoStreamConfig) -> dict[str, list[int]]:
    """Output width of every stage after fusion, plus the input width of each stage."""
    img = cfg.image_channels if cfg.fused else (0, 0, 0, 0)
    sa_out = [s + i for s, i in zip(cfg.sa_channels, img)]
    sa_in = [3] + [3 + c for c in sa_out[:3]]
    skips = [sa_out[2], sa_out[1], sa_out[0], 0]
    fp_in = []
    coarse = sa_out[3]
    for width, skip in zip(cfg.fp_channels, skips):
        fp_in.append(coarse + skip)
        coarse = width
    final = cfg.fp_channels[-1] + (4 * cfg.fu_channels if cfg.fused else 0)
    return {"sa_in": sa_in, "sa_out": sa_out, "fp_in": fp_in, "final": [final]}


def init_params(cfg: TwoStreamConfig, seed: Optional[int] = None) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    p: dict[str, Tensor] = {}
    widths = stage_widths(cfg)
    if cfg.fused:
        c_in = 3
        for i, c in enumerate(cfg.image_channels):
            p[f"img.{i}.a.w"] = _he(rng, (c, c_in, 3, 3), 9 * c_in)
            p[f"img.{i}.a.b"] = _zeros(c)
            p[f"img.{i}.b.w"] = _he(rng, (c, c, 3, 3), 9 * c)
            p[f"img.{i}.b.b"] = _zeros(c)
            p[f"img.{i}.up.w"] = _he(rng, (cfg.fu_channels, c), c)
            p[f"img.{i}.up.b"] = _zeros(cfg.fu_channels)
            c_in = c
    for i, (ci, co) in enumerate(zip(widths["sa_in"], cfg.sa_channels)):
        p[f"sa.{i}.w"] = _he(rng, (ci, co), ci)
        p[f"sa.{i}.b"] = _zeros(co)
    if cfg.fused:
        for i, ((cp, cim), ct) in enumerate(zip(_fusion_widths(cfg), cfg.fusion_hidden)):
            layer = LiFusionLayer.init(cp, cim, ct or None, rng=rng, gated=cfg.fusion == "gated")
            for k, t in layer.parameters().items():
                p[f"fuse.{i}.{k}"] = t
    for i, (ci, co) in enumerate(zip(widths["fp_in"], cfg.fp_channels)):
        p[f"fp.{i}.w"] = _he(rng, (ci, co), ci)
        p[f"fp.{i}.b"] = _zeros(co)
    cf, hc = widths["final"][0], cfg.head_channels
    p["rpn.mlp.w"] = _he(rng, (cf, hc), cf)
    p["rpn.mlp.b"] = _zeros(hc)
    p["rpn.cls.w"] = Tensor(rng.normal(scale=0.01, size=(hc, 1)), requires_grad=True)
    p["rpn.cls.b"] = Tensor(np.full(1, math.log(cfg.fg_prior / (1 - cfg.fg_prior))), requires_grad=True)
    p["rpn.reg.w"] = Tensor(rng.normal(scale=0.01, size=(hc, cfg.reg_width + 7)), requires_grad=True)
    p["rpn.reg.b"] = _zeros(cfg.reg_width + 7)
    rc = cfg.rcnn_channels
    p["rcnn.mlp.w"] = _he(rng, (7, rc), 7)
    p["rcnn.mlp.b"] = _zeros(rc)
    p["rcnn.mlp2.w"] = _he(rng, (rc, rc), rc)
    p["rcnn.mlp2.b"] = _zeros(rc)
    p["rcnn.hid.w"] = _he(rng, (rc, rc), rc)
    p["rcnn.hid.b"] = _zeros(rc)
    p["rcnn.cls.w"] = Tensor(rng.normal(scale=0.01, size=(rc, 1)), requires_grad=True)
    p["rcnn.cls.b"] = _zeros(1)
    p["rcnn.reg.w"] = Tensor(rng.normal(scale=0.01, size=(rc, 7)), requires_grad=True)
    p["rcnn.reg.b"] = _zeros(7)
    return p


def param_group(name: str) -> str:
    return {"img": "image_stream", "sa": "point_stream", "fp": "point_stream", "fuse": "fusion"}.get(
        name.split(".")[0], name.split(".")[0] + "_heads"
    )


def _fusion_layer(params: dict[str, Tensor], cfg: TwoStreamConfig, site: int) -> LiFusionLayer:
    return LiFusionLayer(params[f"fuse.{site}.U"], params[f"fuse.{site}.V"], params[f"fuse.{site}.W"], cfg.fusion == "gated")


# geometric precomputation ---------------------------------------------------


def farthest_point_sample(points: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point subsample; first index of the max distance wins ties."""
    n = len(points)
    if count > n:
        raise ValueError(f"cannot subsample {count} points from {n}")
    if count == n:
        return np.arange(n)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    dist = np.full(n, np.inf)
    for i in range(1, count):
        d = np.sum((points - points[chosen[i - 1]]) ** 2, axis=1)
        np.minimum(dist, d, out=dist)
        chosen[i] = int(np.argmax(dist))
    return chosen


def ball_group(points: np.ndarray, centers: np.ndarray, radius: float, k: int, center_idx: np.ndarray) -> np.ndarray:
    """Up to ``k`` nearest members within ``radius`` per center, padded with the center's own index.

    The center itself is always a member, even at radius 0.
    """
    kk = min(k, len(points))
    dist, near = cKDTree(points).query(centers, k=kk, distance_upper_bound=radius)
    near = np.asarray(near).reshape(len(centers), kk)
    dist = np.asarray(dist).reshape(len(centers), kk)
    near = np.where(np.isfinite(dist), near, center_idx[:, None])
    # coincident points can crowd the center out of a full group
    missing = ~(near == center_idx[:, None]).any(axis=1)
    near[missing, -1] = center_idx[missing]
    if kk < k:
        near = np.concatenate([near, np.repeat(center_idx[:, None], k - kk, axis=1)], axis=1)
    return near


def three_nn_weights(fine: np.ndarray, coarse: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices and normalized inverse-distance weights of the 3 nearest coarse points."""
    if len(coarse) == 0:
        raise ValueError("propagation needs at least one coarse point")
    k = min(3, len(coarse))
    d, idx = cKDTree(coarse).query(fine, k=k)
    d, idx = np.asarray(d).reshape(len(fine), k), np.asarray(idx).reshape(len(fine), k)
    w = 1.0 / (d + 1e-8)
    return idx, w / w.sum(axis=1, keepdims=True)


def sa_stage(features: Optional[Tensor], rel: np.ndarray, groups: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    """Shared linear+relu over (relative xyz, member features), then max over each group."""
    m, k = groups.shape
    x = Tensor(rel.reshape(m * k, 3))
    if features is not None:
        x = T.concat(x, T.gather_rows(features, groups.reshape(-1)))
    h = T.relu(T.linear(x, w, b))
    return T.grouped_max(T.reshape(h, (m, k, -1)))


def fp_stage(coarse: Tensor, idx: np.ndarray, weights: np.ndarray, skip: Optional[Tensor], w: Tensor, b: Tensor) -> Tensor:
    x = T.interpolate_rows(coarse, idx, weights)
    if skip is not None:
        x = T.concat(x, skip)
    return T.relu(T.linear(x, w, b))


@dataclass
class SceneCache:
    """Parameter-independent preprocessing of one scene (canonical point order)."""

    points: np.ndarray  # N x 3, canonical order
    order: np.ndarray  # canonical -> input index
    inverse: np.ndarray  # input -> canonical index
    level_points: list[np.ndarray]  # input level then four stages
    groups: list[np.ndarray]
    rel: list[np.ndarray]
    interp: list[tuple[np.ndarray, np.ndarray]]  # coarse to fine
    image_maps: list[Optional[sp.csr_matrix]]  # stage sites, then the full-resolution site
    image: np.ndarray
    gt: np.ndarray  # G x 7
    fg: np.ndarray  # N bool, input order
    fg_box: np.ndarray  # N int, -1 for background, input order
    scene: Scene


def canonical_order(points: np.ndarray) -> np.ndarray:
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def prepare_scene(scene: Scene, cfg: TwoStreamConfig) -> SceneCache:
    scene.check_image()
    if tuple(scene.image.shape[1:]) != tuple(cfg.image_size):
        raise ValueError(f"image is {scene.image.shape[1:]}, config expects {cfg.image_size}")
    n = len(scene.points)
    if n < cfg.point_counts[0]:
        raise ValueError(f"scene has {n} points, the first stage needs {cfg.point_counts[0]}")
    order = canonical_order(scene.points)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(n)
    pts = scene.points[order]
    start = int(np.random.default_rng(cfg.seed).integers(n))
    levels, groups, rels = [pts], [], []
    for count, radius in zip(cfg.point_counts, cfg.radii):
        prev = levels[-1]
        centers = farthest_point_sample(prev, count, start=start % len(prev))
        g = ball_group(prev, prev[centers], radius, cfg.group_size, centers)
        rels.append((prev[g] - prev[centers][:, None, :]) / radius)
        groups.append(g)
        levels.append(prev[centers])
    interp = [three_nn_weights(levels[i - 1], levels[i]) for i in range(4, 0, -1)]
    maps: list[Optional[sp.csr_matrix]] = [None] * 5
    if cfg.fused:
        for i in range(4):
            corr = generate_grid(levels[i + 1], scene.proj, 2 ** (i + 1), cfg.image_size)
            maps[i] = T.bilinear_weights(corr.shape_hw, corr.coords, corr.valid)
        corr = generate_grid(pts, scene.proj, 1, cfg.image_size)
        maps[4] = T.bilinear_weights(corr.shape_hw, corr.coords, corr.valid)
    gt = scene.gt_array
    fg_box = np.full(n, -1)
    for j, b in enumerate(gt):
        fg_box[(fg_box < 0) & points_in_box(scene.points, b)] = j
    return SceneCache(pts, order, inverse, levels, groups, rels, interp, maps, scene.image, gt, fg_box >= 0, fg_box, scene)


# forward passes -------------------------------------------------------------


def image_stream(params: dict[str, Tensor], cfg: TwoStreamConfig, image: np.ndarray) -> tuple[list[Tensor], Tensor]:
    """Four conv blocks (second conv at stride 2) and the upsampled concatenation ``F_U``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3 or img.shape[1] % 16 or img.shape[2] % 16:
        raise ValueError(f"image must be 3 x H x W with H, W divisible by 16, got {img.shape}")
    x = Tensor(img)
    blocks = []
    for i in range(4):
        x = T.relu(T.conv2d(x, params[f"img.{i}.a.w"], 1, bias=params[f"img.{i}.a.b"]))
        x = T.relu(T.conv2d(x, params[f"img.{i}.b.w"], 2, bias=params[f"img.{i}.b.b"]))
        blocks.append(x)
    ups = [
        T.upsample_nearest(T.conv1x1(f, params[f"img.{i}.up.w"], params[f"img.{i}.up.b"]), 2 ** (i + 1))
        for i, f in enumerate(blocks)
    ]
    return blocks, T.concat_many(ups, axis=0)


@dataclass
class StreamOutput:
    features: Tensor  # N x C, input order
    weight_maps: list[Tensor]
    stage_features: list[Tensor]


def point_stream(
    params: dict[str, Tensor],
    cfg: TwoStreamConfig,
    cache: SceneCache,
    image_feats: Optional[tuple[list[Tensor], Tensor]] = None,
) -> StreamOutput:
    if cfg.fused and image_feats is None:
        raise ValueError("fusion is enabled but no image features were given")
    feats: Optional[Tensor] = None
    stages, wmaps = [], []
    for i in range(4):
        feats = sa_stage(feats, cache.rel[i], cache.groups[i], params[f"sa.{i}.w"], params[f"sa.{i}.b"])
        if cfg.fused:
            f_img = T.sample_with_matrix(image_feats[0][i], cache.image_maps[i])
            out = fuse(_fusion_layer(params, cfg, i), feats, f_img)
            feats = out.fused
            wmaps.append(out.weight_map)
        stages.append(feats)
    x = stages[3]
    skips = [stages[2], stages[1], stages[0], None]
    for j, ((idx, wts), skip) in enumerate(zip(cache.interp, skips)):
        x = fp_stage(x, idx, wts, skip, params[f"fp.{j}.w"], params[f"fp.{j}.b"])
    if cfg.fused:
        f_img = T.sample_with_matrix(image_feats[1], cache.image_maps[4])
        out = fuse(_fusion_layer(params, cfg, 4), x, f_img)
        x = out.fused
        wmaps.append(out.weight_map)
    return StreamOutput(T.gather_rows(x, cache.inverse), wmaps, stages)


def two_stream_forward(params: dict[str, Tensor], cfg: TwoStreamConfig, cache: SceneCache) -> StreamOutput:
    img = image_stream(params, cfg, cache.image) if cfg.fused else None
    return point_stream(params, cfg, cache, img)


def _clip_prob(p: Tensor) -> Tensor:
    return T.maximum(T.minimum(p, 1.0 - PROB_EPS), PROB_EPS)


@dataclass
class RpnOutput:
    fg_prob: Tensor  # N
    bin_logits: Tensor  # N x (2 nb + nh)
    residuals: Tensor  # N x 7


def rpn_heads(params: dict[str, Tensor], cfg: TwoStreamConfig, feats: Tensor) -> RpnOutput:
    h = T.relu(T.linear(feats, params["rpn.mlp.w"], params["rpn.mlp.b"]))
    n = feats.shape[0]
    prob = _clip_prob(T.sigmoid(T.reshape(T.linear(h, params["rpn.cls.w"], params["rpn.cls.b"]), (n,))))
    reg = T.linear(h, params["rpn.reg.w"], params["rpn.reg.b"])
    nb = cfg.reg_width
    return RpnOutput(prob, reg[:, :nb], reg[:, nb:])


def argmax_bins(bin_logits: np.ndarray, cfg: BinConfig) -> np.ndarray:
    nb, nh = cfg.num_bins, cfg.num_heading_bins
    return np.column_stack(
        [
            bin_logits[:, :nb].argmax(1),
            bin_logits[:, nb : 2 * nb].argmax(1),
            bin_logits[:, 2 * nb : 2 * nb + nh].argmax(1),
        ]
    ).reshape(-1, 3)


def decode_rpn(points: np.ndarray, out: RpnOutput, cfg: TwoStreamConfig) -> np.ndarray:
    """Per-point boxes from argmax bins and residuals."""
    bins = argmax_bins(out.bin_logits.data, cfg.bins)
    boxes = decode_boxes(points, bins, out.residuals.data, cfg.bins, np.asarray(cfg.mean_size))
    boxes[:, 6] = wrap_angle(boxes[:, 6])
    return boxes


def _col(t: Tensor, j: int) -> Tensor:
    return T.reshape(t[:, j], (t.shape[0], 1))


def _stack_cols(cols: list[Tensor]) -> Tensor:
    return T.concat_many([T.reshape(c, (c.shape[0], 1)) for c in cols])


def rpn_box_tensor(anchor: np.ndarray, bins: np.ndarray, residuals: Tensor, cfg: TwoStreamConfig) -> tuple[Tensor, Tensor]:
    """Differentiable centers and sizes of decoded boxes; bins are held fixed."""
    half, width, _ = cfg.bins.axis(False)
    cx = residuals[:, 0] * width + (anchor[:, 0] + (bins[:, 0] + 0.5) * width - half)
    cy = residuals[:, 1] + anchor[:, 1]
    cz = residuals[:, 2] * width + (anchor[:, 2] + (bins[:, 1] + 0.5) * width - half)
    mean = np.broadcast_to(np.asarray(cfg.mean_size), (len(anchor), 3))
    size = T.maximum(residuals[:, 3:6] + mean, 1e-3)
    return _stack_cols([cx, cy, cz]), size


@dataclass
class ProposalSet:
    boxes: np.ndarray  # P x 7
    confidences: np.ndarray
    point_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def box_list(self) -> list[Box3D]:
        return [Box3D.from_array(b) for b in self.boxes]


def generate_proposals(
    points: np.ndarray, out: RpnOutput, cfg: TwoStreamConfig, top_k: Optional[int] = None, apply_nms: bool = True,
    max_keep: Optional[int] = None,
) -> ProposalSet:
    """Top-K points by foreground confidence, decoded, then rotated NMS."""
    k = cfg.pre_nms_top_k if top_k is None else top_k
    scores = out.fg_prob.data
    order = np.argsort(-scores, kind="stable")[:k]
    boxes = decode_rpn(points[order], RpnOutput(Tensor(scores[order]), Tensor(out.bin_logits.data[order]), Tensor(out.residuals.data[order])), cfg)
    keep_n = cfg.max_proposals if max_keep is None else max_keep
    if apply_nms:
        keep = nms_indices(boxes, scores[order], cfg.nms_threshold, keep_n)
    else:
        keep = np.arange(min(len(order), keep_n))
    return ProposalSet(boxes[keep], scores[order][keep], order[keep])


# refinement -----------------------------------------------------------------


def pool_points(points: np.ndarray, boxes: np.ndarray, budget: int, margin: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pick up to ``budget`` points inside each (enlarged) box.

    Returns (point index per pooled row, slot index per pooled row into a
    P x budget grid, canonical coordinates per pooled row). Canonical
    coordinates are metric box-frame offsets followed by the same offsets
    divided by (l, h, w), so points outside the box stand out at |c| > 0.5.
    """
    pidx, slots, local = [], [], []
    for i, b in enumerate(boxes):
        inside = np.nonzero(points_in_box(points, b, margin))[0]
        if len(inside) > budget:
            inside = np.sort(rng.choice(inside, size=budget, replace=False))
        pidx.append(inside)
        slots.append(i * budget + np.arange(len(inside)))
        loc = to_box_frame(points[inside], b)
        loc[:, 1] += b[3] / 2
        local.append(np.hstack([loc, loc / b[[5, 3, 4]]]))
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)  # noqa: E731
    loc = np.concatenate(local) if local else np.zeros((0, 6))
    return cat(pidx, np.int64), cat(slots, np.int64), loc.reshape(-1, 6)


@dataclass
class RefineOutput:
    confidence: Tensor  # P
    residuals: Tensor  # P x 7
    boxes: np.ndarray  # P x 7 decoded


def point_scores(rpn: RpnOutput) -> Tensor:
    """Per-point input to refinement: the detached foreground probability (N x 1)."""
    return Tensor(rpn.fg_prob.data.reshape(-1, 1))


def refine(
    params: dict[str, Tensor], cfg: TwoStreamConfig, points: np.ndarray, feats: Tensor, boxes: np.ndarray, rng: np.random.Generator
) -> RefineOutput:
    """Pool in-box points into a zero-padded descriptor, then score and correct each box.

    Each pooled point contributes its box-frame coordinates and its row of
    ``feats`` (the foreground probability in the standard pipeline).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    p, budget = len(boxes), cfg.rcnn_points
    pidx, slots, local = pool_points(points, boxes, budget, cfg.pool_margin, rng)
    x = T.concat(Tensor(local), T.gather_rows(feats, pidx))
    h = T.relu(T.linear(x, params["rcnn.mlp.w"], params["rcnn.mlp.b"]))
    h = T.relu(T.linear(h, params["rcnn.mlp2.w"], params["rcnn.mlp2.b"]))
    # padded slots point at an appended zero row, so empty boxes get the zero descriptor
    padded = T.concat(h, Tensor(np.zeros((1, h.shape[1]))), axis=0)
    grid = np.full(p * budget, len(pidx), dtype=np.int64)
    grid[slots] = np.arange(len(pidx))
    desc = T.grouped_max(T.reshape(T.gather_rows(padded, grid), (p, budget, -1)))
    hid = T.relu(T.linear(desc, params["rcnn.hid.w"], params["rcnn.hid.b"]))
    conf = _clip_prob(T.sigmoid(T.reshape(T.linear(hid, params["rcnn.cls.w"], params["rcnn.cls.b"]), (p,))))
    res = T.linear(hid, params["rcnn.reg.w"], params["rcnn.reg.b"])
    return RefineOutput(conf, res, decode_refinement(boxes, res.data))


def encode_refinement(proposals: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Residuals of ``gt`` boxes w.r.t. proposals: center in the proposal frame, size ratio - 1, yaw delta."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 7)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(gt), 7))
    for i, (p, g) in enumerate(zip(proposals, gt)):
        out[i, :3] = to_box_frame(g[None, :3], p)[0]
    out[:, 3:6] = gt[:, 3:6] / proposals[:, 3:6] - 1.0
    out[:, 6] = wrap_angle(gt[:, 6] - proposals[:, 6])
    return out


def decode_refinement(proposals: np.ndarray, res: np.ndarray) -> np.ndarray:
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 7)
    res = np.asarray(res, dtype=np.float64).reshape(-1, 7)
    c, s = np.cos(proposals[:, 6]), np.sin(proposals[:, 6])
    out = np.empty_like(proposals)
    out[:, 0] = proposals[:, 0] + c * res[:, 0] + s * res[:, 2]
    out[:, 1] = proposals[:, 1] + res[:, 1]
    out[:, 2] = proposals[:, 2] - s * res[:, 0] + c * res[:, 2]
    out[:, 3:6] = np.maximum(proposals[:, 3:6] * (1.0 + res[:, 3:6]), 1e-3)
    out[:, 6] = wrap_angle(proposals[:, 6] + res[:, 6])
    return out


def refine_box_tensor(proposals: np.ndarray, res: Tensor) -> tuple[Tensor, Tensor]:
    c, s = np.cos(proposals[:, 6]), np.sin(proposals[:, 6])
    rx, ry, rz = res[:, 0], res[:, 1], res[:, 2]
    cx = rx * c + rz * s + proposals[:, 0]
    cy = ry + proposals[:, 1]
    cz = rz * c - rx * s + proposals[:, 2]
    size = T.maximum((res[:, 3:6] + 1.0) * proposals[:, 3:6], 1e-3)
    return _stack_cols([cx, cy, cz]), size


def jitter_boxes(gt: np.ndarray, copies: int, cfg: TwoStreamConfig, rng: np.random.Generator) -> np.ndarray:
    if copies == 0 or len(gt) == 0:
        return np.zeros((0, 7))
    base = np.repeat(gt, copies, axis=0)
    out = base.copy()
    out[:, [0, 2]] += rng.normal(scale=cfg.jitter_center, size=(len(base), 2))
    out[:, 1] += rng.normal(scale=cfg.jitter_center / 3, size=len(base))
    out[:, 3:6] *= np.exp(rng.normal(scale=cfg.jitter_size, size=(len(base), 3)))
    out[:, 6] = wrap_angle(out[:, 6] + rng.normal(scale=cfg.jitter_yaw, size=len(base)))
    return out


# losses ---------------------------------------------------------------------


def _consistency_term(mode: LossMode, conf: Tensor, iou: Tensor) -> Optional[Tensor]:
    if mode is LossMode.CE:
        return ce_loss(conf, iou).mean()
    if mode is LossMode.IOU_ONLY:
        return iou_loss(iou).mean()
    return None


def _bce(p: Tensor, target: np.ndarray) -> Tensor:
    t = np.asarray(target, dtype=np.float64)
    return -(T.log(p) * t + T.log(1.0 - p) * (1.0 - t)).mean()


@dataclass
class ForwardResult:
    total: Tensor
    breakdown: LossBreakdown
    stream: StreamOutput
    rpn: RpnOutput
    proposals: ProposalSet


def compute_loss(
    params: dict[str, Tensor], cfg: TwoStreamConfig, cache: SceneCache, mode: LossMode, rng: np.random.Generator
) -> ForwardResult:
    mode = LossMode(mode)
    lw = cfg.loss
    stream = two_stream_forward(params, cfg, cache)
    rpn = rpn_heads(params, cfg, stream.features)
    pts = cache.scene.points
    fg = np.nonzero(cache.fg)[0]
    flags = {"rpn_positives": bool(len(fg)), "rcnn_positives": False}

    cls = focal_loss(rpn.fg_prob, cache.fg.astype(np.float64), lw.alpha, lw.gamma)
    if len(fg):
        targets = encode_box_targets(pts[fg], cache.gt[cache.fg_box[fg]], cfg.bins, np.asarray(cfg.mean_size))
        logits = T.gather_rows(rpn.bin_logits, fg)
        res = T.gather_rows(rpn.residuals, fg)
        reg = reg_loss(logits, res, targets, cfg.bins, lw.beta)
        center, size = rpn_box_tensor(pts[fg], argmax_bins(logits.data, cfg.bins), res, cfg)
        iou = iou_3d_axis_aligned_diff(center, size, cache.gt[cache.fg_box[fg]])
        consist = _consistency_term(mode, T.take(rpn.fg_prob, fg), iou)
    else:
        reg, consist = RegLoss(Tensor(0.0), Tensor(0.0), True), None
    rpn_total, rpn_parts = stage_loss(cls, reg, consist, lw.lam)

    with T.no_grad():
        props = generate_proposals(pts, rpn, cfg)
    boxes = np.concatenate([props.boxes, jitter_boxes(cache.gt, cfg.gt_jitter, cfg, rng)])
    ref = refine(params, cfg, pts, point_scores(rpn), boxes, rng)
    if len(cache.gt) and len(boxes):
        ious = iou_3d_matrix(boxes, cache.gt)
        best, match = ious.max(1), ious.argmax(1)
    else:
        best, match = np.zeros(len(boxes)), np.zeros(len(boxes), dtype=np.int64)
    pos = np.nonzero(best > cfg.rcnn_pos_iou)[0]
    labelled = np.nonzero((best > cfg.rcnn_pos_iou) | (best < cfg.rcnn_neg_iou))[0]
    rcls = _bce(T.take(ref.confidence, labelled), best[labelled] > cfg.rcnn_pos_iou) if len(labelled) else Tensor(0.0)
    if len(pos):
        flags["rcnn_positives"] = True
        tgt = encode_refinement(boxes[pos], cache.gt[match[pos]])
        rres = T.gather_rows(ref.residuals, pos)
        rreg = RegLoss(Tensor(0.0), smooth_l1(rres - tgt, lw.beta).sum() * (1.0 / len(pos)), False)
        center, size = refine_box_tensor(boxes[pos], rres)
        iou = iou_3d_axis_aligned_diff(center, size, cache.gt[match[pos]])
        rcon = _consistency_term(mode, T.take(ref.confidence, pos), iou)
    else:
        rreg, rcon = RegLoss(Tensor(0.0), Tensor(0.0), True), None
    rcnn_total, rcnn_parts = stage_loss(rcls, rreg, rcon, lw.lam)

    total = rpn_total + rcnn_total
    if not np.isfinite(total.data):
        raise FloatingPointError(
            f"non-finite loss: rpn={rpn_parts} rcnn={rcnn_parts} n_fg={len(fg)} n_boxes={len(boxes)}"
        )
    bd = LossBreakdown(lw.lam, rpn_parts, rcnn_parts, flags)
    return ForwardResult(total, bd, stream, rpn, props)


# inference ------------------------------------------------------------------


@dataclass
class SceneDetections:
    boxes: np.ndarray
    scores: np.ndarray


def detect(
    params: dict[str, Tensor], cfg: TwoStreamConfig, cache: SceneCache, final_nms: bool = True, seed: int = 0,
    max_candidates: Optional[int] = None,
) -> SceneDetections:
    """Full inference. ``final_nms=False`` returns the refined top candidates without any NMS."""
    rng = np.random.default_rng(seed)
    with T.no_grad():
        stream = two_stream_forward(params, cfg, cache)
        rpn = rpn_heads(params, cfg, stream.features)
        pts = cache.scene.points
        if final_nms:
            props = generate_proposals(pts, rpn, cfg)
        else:
            props = generate_proposals(pts, rpn, cfg, apply_nms=False, max_keep=max_candidates or cfg.max_proposals)
        if len(props) == 0:
            return SceneDetections(np.zeros((0, 7)), np.zeros(0))
        ref = refine(params, cfg, pts, point_scores(rpn), props.boxes, rng)
    boxes, scores = ref.boxes, ref.confidence.data.copy()
    if final_nms:
        keep = nms_indices(boxes, scores, cfg.final_nms_threshold)
        boxes, scores = boxes[keep], scores[keep]
    return SceneDetections(boxes, scores)
