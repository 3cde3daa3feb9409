"""Procedural scenes where colour, not geometry, separates targets from look-alike distractors.

The image is an orthographic top view of the ground plane: pixel (u, v) sees
the column above ground position (x, z). The projection matrix is built so
that ``project_points`` lands every point of an object inside that object's
painted footprint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .geometry import Box3D, iou_bev_matrix, points_in_box, to_box_frame
from .kitti import Scene


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticSceneConfig:
    seed: int = 0
    image_size: tuple[int, int] = (64, 64)
    extent_x: tuple[float, float] = (-12.8, 12.8)
    extent_z: tuple[float, float] = (2.0, 27.6)
    ground_y: float = 1.6
    n_targets: tuple[int, int] = (1, 3)
    n_distractors: tuple[int, int] = (0, 0)
    size_h: tuple[float, float] = (1.4, 1.7)
    size_w: tuple[float, float] = (1.5, 1.8)
    size_l: tuple[float, float] = (3.4, 4.2)
    yaw_range: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    n_points: int = 1024
    points_per_object: int = 96
    min_points_per_object: int = 30
    point_noise: float = 0.02
    background_rgb: tuple[float, float, float] = (0.35, 0.35, 0.35)
    target_rgb: tuple[float, float, float] = (0.85, 0.25, 0.2)
    distractor_rgb: tuple[float, float, float] = (0.2, 0.3, 0.85)
    color_noise: float = 0.03
    placement_gap: float = 0.6
    border: float = 2.0
    max_tries: int = 500

    @property
    def pixel_size(self) -> tuple[float, float]:
        h, w = self.image_size
        return (self.extent_x[1] - self.extent_x[0]) / w, (self.extent_z[1] - self.extent_z[0]) / h


def projection_matrix(cfg: SyntheticSceneConfig) -> np.ndarray:
    """Orthographic top view: u grows with x, v grows toward the camera (decreasing z)."""
    px, pz = cfg.pixel_size
    return np.array(
        [
            [1.0 / px, 0.0, 0.0, -cfg.extent_x[0] / px - 0.5],
            [0.0, 0.0, -1.0 / pz, cfg.extent_z[1] / pz - 0.5],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def _pixel_centers(cfg: SyntheticSceneConfig) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.image_size
    px, pz = cfg.pixel_size
    xs = cfg.extent_x[0] + (np.arange(w) + 0.5) * px
    zs = cfg.extent_z[1] - (np.arange(h) + 0.5) * pz
    return np.meshgrid(xs, zs)


def render_image(
    cfg: SyntheticSceneConfig,
    painted: Sequence[tuple[np.ndarray, Sequence[float]]],
    rng: np.random.Generator,
) -> np.ndarray:
    """Paint each (box, rgb) footprint, dilated by half a pixel diagonal, over a noisy background."""
    h, w = cfg.image_size
    img = np.empty((3, h, w))
    img[:] = np.asarray(cfg.background_rgb)[:, None, None]
    img += rng.normal(scale=cfg.color_noise, size=img.shape)
    gx, gz = _pixel_centers(cfg)
    centers = np.column_stack([gx.ravel(), np.zeros(gx.size), gz.ravel()])
    margin = 0.5 * math.hypot(*cfg.pixel_size)
    for box, rgb in painted:
        local = to_box_frame(centers, box)
        inside = (np.abs(local[:, 0]) <= box[5] / 2 + margin) & (np.abs(local[:, 2]) <= box[4] / 2 + margin)
        mask = inside.reshape(h, w)
        noise = rng.normal(scale=cfg.color_noise, size=(3, int(mask.sum())))
        img[:, mask] = np.asarray(rgb)[:, None] + noise
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _surface_points(box: np.ndarray, n: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the top and four sides of a box."""
    h, w, l = box[3], box[4], box[5]
    areas = np.array([l * w, l * h, l * h, w * h, w * h])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    a, b = rng.uniform(-0.5, 0.5, size=n), rng.uniform(0, 1, size=n)
    lx, ly, lz = np.zeros(n), np.zeros(n), np.zeros(n)
    top, s1, s2, s3, s4 = (face == k for k in range(5))
    lx[top], lz[top], ly[top] = a[top] * l, (b[top] - 0.5) * w, -h
    lx[s1], ly[s1], lz[s1] = a[s1] * l, -b[s1] * h, w / 2
    lx[s2], ly[s2], lz[s2] = a[s2] * l, -b[s2] * h, -w / 2
    lz[s3], ly[s3], lx[s3] = a[s3] * w, -b[s3] * h, l / 2
    lz[s4], ly[s4], lx[s4] = a[s4] * w, -b[s4] * h, -l / 2
    # keep samples inside the box after jitter
    lx = np.clip(lx + rng.normal(scale=noise, size=n), -l / 2, l / 2)
    lz = np.clip(lz + rng.normal(scale=noise, size=n), -w / 2, w / 2)
    ly = np.clip(ly + rng.normal(scale=noise, size=n), -h, 0.0)
    c, s = math.cos(box[6]), math.sin(box[6])
    return np.column_stack([box[0] + c * lx + s * lz, box[1] + ly, box[2] - s * lx + c * lz])


def _place(cfg: SyntheticSceneConfig, sizes: Sequence[tuple[float, float, float]], rng: np.random.Generator) -> list[np.ndarray]:
    placed: list[np.ndarray] = []
    for h, w, l in sizes:
        for _ in range(cfg.max_tries):
            cand = np.array(
                [
                    rng.uniform(cfg.extent_x[0] + cfg.border, cfg.extent_x[1] - cfg.border),
                    cfg.ground_y,
                    rng.uniform(cfg.extent_z[0] + cfg.border, cfg.extent_z[1] - cfg.border),
                    h,
                    w,
                    l,
                    rng.uniform(*cfg.yaw_range),
                ]
            )
            grown = cand.copy()
            grown[4:6] += 2 * cfg.placement_gap
            if not placed:
                placed.append(cand)
                break
            others = np.array(placed)
            others[:, 4:6] += 2 * cfg.placement_gap
            if iou_bev_matrix(grown, others).max() == 0.0:
                placed.append(cand)
                break
        else:
            raise SceneGenerationError(f"could not place {len(sizes)} objects after {cfg.max_tries} tries each")
    return placed


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def generate_synthetic_scene(cfg: SyntheticSceneConfig, seed: Optional[int] = None) -> Scene:
    """One scene; deterministic in ``seed`` (defaults to ``cfg.seed``).

    Distractors copy the size of a target (geometry-ambiguous pairs) and
    differ from it only in colour. Only targets are ground truth.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n_t = int(rng.integers(cfg.n_targets[0], cfg.n_targets[1] + 1))
    n_d = int(rng.integers(cfg.n_distractors[0], cfg.n_distractors[1] + 1))
    sizes = [tuple(_f32(np.array([rng.uniform(*cfg.size_h), rng.uniform(*cfg.size_w), rng.uniform(*cfg.size_l)]))) for _ in range(n_t)]
    sizes += [sizes[i % n_t] for i in range(n_d)] if n_t else []
    boxes = [_f32(b) for b in _place(cfg, sizes, rng)]
    n_obj = len(boxes) * cfg.points_per_object
    if n_obj > cfg.n_points:
        raise SceneGenerationError(f"{len(boxes)} objects need {n_obj} points but the cloud holds {cfg.n_points}")

    parts = [_surface_points(b, cfg.points_per_object, cfg.point_noise, rng) for b in boxes]
    n_ground = cfg.n_points - n_obj
    ground = np.column_stack(
        [
            rng.uniform(*cfg.extent_x, size=n_ground),
            # just below the box bottoms, so no ground return falls inside a box
            cfg.ground_y + 0.05 + np.abs(rng.normal(scale=cfg.point_noise, size=n_ground)),
            rng.uniform(*cfg.extent_z, size=n_ground),
        ]
    )
    points = _f32(np.concatenate(parts + [ground]) if parts else ground)
    order = rng.permutation(len(points))
    points = points[order]

    targets, distractors = boxes[:n_t], boxes[n_t:]
    painted = [(b, cfg.target_rgb) for b in targets] + [(b, cfg.distractor_rgb) for b in distractors]
    image = render_image(cfg, painted, rng)
    scene = Scene(
        points=points,
        image=image,
        proj=projection_matrix(cfg),
        gt_boxes=[Box3D.from_array(b) for b in targets],
        meta={"distractors": np.array(distractors).reshape(-1, 7), "seed": cfg.seed if seed is None else seed},
    )
    for b in scene.gt_boxes:
        if np.count_nonzero(points_in_box(points, b)) < cfg.min_points_per_object:
            raise SceneGenerationError("object received fewer points than min_points_per_object")
    return scene


def make_dataset(cfg: SyntheticSceneConfig, n_scenes: int, seed: int = 0) -> list[Scene]:
    seeds = np.random.SeedSequence(seed).generate_state(n_scenes, dtype=np.uint32) if n_scenes else []
    return [generate_synthetic_scene(cfg, int(s)) for s in seeds]


def with_config(cfg: SyntheticSceneConfig, **overrides) -> SyntheticSceneConfig:
    return replace(cfg, **overrides)
