"""KITTI-format parsing/serialization, scene preprocessing and augmentation."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import Box3D, wrap_angle

# camera frame, meters: X right, Y down, Z forward
KITTI_RANGE = ((-40.0, 40.0), (-1.0, 3.0), (0.0, 70.4))

CALIB_KEYS = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


class KittiParseError(ValueError):
    pass


@dataclass
class CalibrationSet:
    P2: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray

    def __post_init__(self):
        for key, shape in CALIB_KEYS.items():
            m = np.asarray(getattr(self, key), dtype=np.float64)
            if m.shape != shape or not np.isfinite(m).all():
                raise ValueError(f"{key}: expected finite {shape} matrix, got {m.shape}")
            setattr(self, key, m)

    def __eq__(self, other):
        if not isinstance(other, CalibrationSet):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in CALIB_KEYS)

    def orthonormality_error(self) -> float:
        r = self.R0_rect
        return float(np.abs(r.T @ r - np.eye(3)).max())


def parse_calib(text: str) -> CalibrationSet:
    values: dict[str, list[float]] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or ":" not in line:
            continue
        key, rest = line.split(":", 1)
        key = key.strip()
        if key not in CALIB_KEYS:
            continue
        try:
            values[key] = [float(v) for v in rest.split()]
        except ValueError as exc:
            raise KittiParseError(f"{key}: non-numeric value ({exc})") from None
    mats = {}
    for key, shape in CALIB_KEYS.items():
        need = shape[0] * shape[1]
        got = values.get(key)
        if got is None or len(got) != need:
            raise KittiParseError(f"{key}: expected {need} values" + ("" if got is None else f", got {len(got)}"))
        mats[key] = np.array(got).reshape(shape)
    return CalibrationSet(**mats)


def serialize_calib(calib: CalibrationSet) -> str:
    return "".join(f"{k}: {' '.join(repr(float(v)) for v in getattr(calib, k).ravel())}\n" for k in CALIB_KEYS)


def compose_projection(calib: CalibrationSet) -> np.ndarray:
    """3 x 4 matrix taking velodyne-frame points to image pixels."""
    r = np.eye(4)
    r[:3, :3] = calib.R0_rect
    t = np.eye(4)
    t[:3, :] = calib.Tr_velo_to_cam
    return calib.P2 @ r @ t


def velo_to_rect(points: np.ndarray, calib: CalibrationSet) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)[:, :3]
    cam = p @ calib.Tr_velo_to_cam[:, :3].T + calib.Tr_velo_to_cam[:, 3]
    return cam @ calib.R0_rect.T


def parse_velodyne(data: bytes) -> np.ndarray:
    """Packed little-endian float32 (x, y, z, reflectance) records -> N x 4."""
    if len(data) % 16:
        raise KittiParseError(f"velodyne payload of {len(data)} bytes is not a multiple of 16")
    return np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float32)


def serialize_velodyne(points: np.ndarray) -> bytes:
    p = np.asarray(points, dtype="<f4")
    if p.ndim != 2 or p.shape[1] != 4:
        raise ValueError(f"velodyne records must be N x 4, got {p.shape}")
    return p.tobytes()


@dataclass
class LabelEntry:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]
    h: float
    w: float
    l: float
    x: float
    y: float
    z: float
    rotation_y: float
    score: Optional[float] = None

    @property
    def dont_care(self) -> bool:
        return self.type == "DontCare"

    def to_box(self) -> Box3D:
        return Box3D(self.x, self.y, self.z, self.h, self.w, self.l, self.rotation_y)


def parse_labels(text: str) -> list[LabelEntry]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        f = raw.split()
        if not f:
            continue
        if len(f) < 15:
            raise KittiParseError(f"line {lineno}: expected at least 15 fields, got {len(f)}")
        try:
            entry = LabelEntry(
                type=f[0],
                truncated=float(f[1]),
                occluded=int(float(f[2])),
                alpha=float(f[3]),
                bbox=tuple(float(v) for v in f[4:8]),
                h=float(f[8]),
                w=float(f[9]),
                l=float(f[10]),
                x=float(f[11]),
                y=float(f[12]),
                z=float(f[13]),
                rotation_y=float(f[14]),
                score=float(f[15]) if len(f) > 15 else None,
            )
        except ValueError as exc:
            raise KittiParseError(f"line {lineno}: {exc}") from None
        if not entry.dont_care and min(entry.h, entry.w, entry.l) <= 0:
            raise KittiParseError(f"line {lineno}: non-positive box size for {entry.type}")
        out.append(entry)
    return out


def serialize_labels(entries: Sequence[LabelEntry]) -> str:
    lines = []
    for e in entries:
        vals = [e.truncated, e.occluded, e.alpha, *e.bbox, e.h, e.w, e.l, e.x, e.y, e.z, e.rotation_y]
        if e.score is not None:
            vals.append(e.score)
        text = " ".join(str(v) if isinstance(v, int) else repr(float(v)) for v in vals)
        lines.append(f"{e.type} {text}\n")
    return "".join(lines)


# scenes --------------------------------------------------------------------


@dataclass
class Scene:
    """One sample in camera coordinates.

    ``proj`` maps scene points (camera frame) to full-resolution pixels.
    """

    points: np.ndarray
    image: np.ndarray
    proj: np.ndarray
    gt_boxes: list[Box3D]
    gt_classes: list[int] = field(default_factory=list)
    calib: Optional[CalibrationSet] = None
    reflectance: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.image = np.asarray(self.image, dtype=np.float64)
        if not self.gt_classes:
            self.gt_classes = [0] * len(self.gt_boxes)

    @property
    def gt_array(self) -> np.ndarray:
        return np.array([b.to_array() for b in self.gt_boxes]).reshape(-1, 7)

    def check_image(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be 3 x H x W, got {self.image.shape}")
        if self.image.shape[1] % 16 or self.image.shape[2] % 16:
            raise ValueError(f"image dims must be divisible by 16, got {self.image.shape[1:]}")


def range_mask(points: np.ndarray, range_box=KITTI_RANGE) -> np.ndarray:
    p = np.asarray(points)
    keep = np.ones(len(p), dtype=bool)
    for axis, (lo, hi) in enumerate(range_box):
        keep &= (p[:, axis] >= lo) & (p[:, axis] <= hi)
    return keep


def crop_to_range(points: np.ndarray, range_box=KITTI_RANGE) -> np.ndarray:
    """Keep points inside the closed range box, preserving order."""
    p = np.asarray(points)
    if len(p) == 0:
        return p
    return p[range_mask(p, range_box)]


def subsample_points(points: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Uniform subsample to exactly ``n`` points; resamples with replacement when short."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    p = np.asarray(points)
    if len(p) == 0:
        raise ValueError("cannot subsample an empty point cloud")
    rng = np.random.default_rng(seed)
    if len(p) >= n:
        idx = rng.choice(len(p), size=n, replace=False)
    else:
        idx = np.concatenate([rng.permutation(len(p)), rng.integers(0, len(p), size=n - len(p))])
    return p[idx]


def _rotate_y(points: np.ndarray, phi: float) -> np.ndarray:
    # rotation by -phi about the vertical axis: box yaw becomes yaw - phi
    c, s = math.cos(phi), math.sin(phi)
    x, z = points[:, 0], points[:, 2]
    out = points.copy()
    out[:, 0] = c * x - s * z
    out[:, 2] = s * x + c * z
    return out


def _pull_back(proj: np.ndarray, inverse: np.ndarray) -> np.ndarray:
    """Projection for transformed points: undo the 3x3 transform, then project as before."""
    h = np.eye(4)
    h[:3, :3] = inverse
    return proj @ h


def augment_rotate(scene: Scene, phi: float) -> Scene:
    """Rotate cloud and boxes about the vertical axis; pixels stay put, so ``proj`` absorbs the inverse rotation."""
    if phi == 0:
        return replace(scene, points=scene.points.copy(), gt_boxes=list(scene.gt_boxes))
    pts = _rotate_y(scene.points, phi)
    boxes = []
    for b in scene.gt_boxes:
        cx, _, cz = _rotate_y(np.array([[b.x, b.y, b.z]]), phi)[0]
        boxes.append(Box3D(cx, b.y, cz, b.h, b.w, b.l, wrap_angle(b.yaw - phi)))
    inverse = _rotate_y(np.eye(3), -phi).T
    return replace(scene, points=pts, gt_boxes=boxes, proj=_pull_back(scene.proj, inverse))


def augment_flip(scene: Scene) -> Scene:
    """Mirror about the forward axis: negate x, yaw -> pi - yaw."""
    pts = scene.points.copy()
    pts[:, 0] = -pts[:, 0]
    boxes = [Box3D(-b.x, b.y, b.z, b.h, b.w, b.l, wrap_angle(math.pi - b.yaw)) for b in scene.gt_boxes]
    return replace(scene, points=pts, gt_boxes=boxes, proj=_pull_back(scene.proj, np.diag([-1.0, 1.0, 1.0])))


def augment_scale(scene: Scene, s: float) -> Scene:
    if s == 1:
        return replace(scene, points=scene.points.copy(), gt_boxes=list(scene.gt_boxes))
    boxes = [Box3D(b.x * s, b.y * s, b.z * s, b.h * s, b.w * s, b.l * s, b.yaw) for b in scene.gt_boxes]
    return replace(scene, points=scene.points * s, gt_boxes=boxes, proj=_pull_back(scene.proj, np.eye(3) / s))


def random_augment(scene: Scene, rng: np.random.Generator) -> Scene:
    out = augment_rotate(scene, float(rng.uniform(-math.pi / 18, math.pi / 18)))
    if rng.uniform() < 0.5:
        out = augment_flip(out)
    return augment_scale(out, float(rng.uniform(0.95, 1.05)))


def perturb_illumination(image: np.ndarray, a: float, b: float) -> np.ndarray:
    """``y = clamp(a * x + b, 0, 255)`` on the 0-255 scale, returned in [0, 1]."""
    x = np.asarray(image, dtype=np.float64) * 255.0
    return np.clip(a * x + b, 0.0, 255.0) / 255.0


# on-disk layout ------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    """3 x H x W image in [0, 1] -> binary PPM (P6)."""
    img = np.asarray(image)
    c, h, w = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise KittiParseError(f"{path}: only 8-bit P6 images are supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1 :]
    if len(body) != w * h * 3:
        raise KittiParseError(f"{path}: expected {w * h * 3} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1) / 255.0


CLASS_NAMES = {0: "Car"}


def scene_to_labels(scene: Scene) -> list[LabelEntry]:
    out = []
    for b, cls in zip(scene.gt_boxes, scene.gt_classes):
        alpha = wrap_angle(b.yaw - math.atan2(b.x, b.z))
        out.append(LabelEntry(CLASS_NAMES.get(cls, f"Class{cls}"), 0.0, 0, alpha, (0.0, 0.0, 0.0, 0.0), b.h, b.w, b.l, b.x, b.y, b.z, b.yaw))
    return out


def write_kitti_dir(scenes: Sequence[Scene], root) -> None:
    """Write scenes as calib/, velodyne/, label_2/, image_2/ (PPM).

    Points are stored as-is in the velodyne file; the calibration is written
    with identity rectification so that ``compose_projection`` returns
    ``scene.proj``.
    """
    root = Path(root)
    for sub in ("calib", "velodyne", "label_2", "image_2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(scenes):
        stem = f"{i:06d}"
        calib = scene.calib or CalibrationSet(scene.proj, np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))
        (root / "calib" / f"{stem}.txt").write_text(serialize_calib(calib))
        refl = scene.reflectance if scene.reflectance is not None else np.zeros(len(scene.points))
        (root / "velodyne" / f"{stem}.bin").write_bytes(serialize_velodyne(np.column_stack([scene.points, refl])))
        (root / "label_2" / f"{stem}.txt").write_text(serialize_labels(scene_to_labels(scene)))
        write_ppm(root / "image_2" / f"{stem}.ppm", scene.image)


def read_kitti_dir(root, crop: bool = False) -> list[Scene]:
    """Load every frame of a KITTI-layout directory into camera-frame scenes."""
    root = Path(root)
    stems = sorted(p.stem for p in (root / "velodyne").glob("*.bin"))
    scenes = []
    for stem in stems:
        try:
            calib = parse_calib((root / "calib" / f"{stem}.txt").read_text())
            velo = parse_velodyne((root / "velodyne" / f"{stem}.bin").read_bytes())
            labels = parse_labels((root / "label_2" / f"{stem}.txt").read_text())
        except KittiParseError as exc:
            raise KittiParseError(f"frame {stem}: {exc}") from None
        image_path = root / "image_2" / f"{stem}.ppm"
        image = read_ppm(image_path) if image_path.exists() else np.zeros((3, 16, 16))
        pts = velo_to_rect(velo, calib)
        refl = velo[:, 3].astype(np.float64)
        if crop:
            keep = range_mask(pts)
            pts, refl = pts[keep], refl[keep]
        gts = [e for e in labels if not e.dont_care]
        scenes.append(
            Scene(
                points=pts,
                image=image,
                proj=calib.P2,
                gt_boxes=[e.to_box() for e in gts],
                gt_classes=[0] * len(gts),
                calib=calib,
                reflectance=refl,
                meta={"frame": stem, "labels": labels},
            )
        )
    return scenes


def list_frames(root) -> list[str]:
    return sorted(os.path.splitext(p)[0] for p in os.listdir(Path(root) / "velodyne") if p.endswith(".bin"))
