"""NMS, the consistency ratio of positive candidate boxes, and AP at 40 recall positions."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .geometry import Box3D, iou_3d_matrix, iou_bev_matrix, iou_bev_upper_bound


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    scene_id: str = "0"
    class_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class ConsistencyConfig:
    tau: float = 0.7
    upsilons: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(1, 10))

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        u = np.asarray(self.upsilons)
        if len(u) == 0 or np.any(u <= 0) or np.any(u >= 1) or np.any(np.diff(u) <= 0):
            raise ValueError("upsilon grid must be strictly increasing inside (0, 1)")


def _boxes(dets: Sequence[Detection]) -> np.ndarray:
    return np.array([d.box.to_array() for d in dets]).reshape(-1, 7)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, max_keep: Optional[int] = None) -> np.ndarray:
    """Greedy rotated-BEV NMS on arrays; suppress when IoU > threshold."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    if len(order) == 0:
        return order
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)[order]
    # exact IoU is only needed where the cheap bound exceeds the threshold
    maybe = iou_bev_upper_bound(boxes, boxes) > iou_threshold
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = i + 1 + np.nonzero(alive[i + 1 :] & maybe[i, i + 1 :])[0]
        if len(rest):
            alive[rest] = iou_bev_matrix(boxes[i : i + 1], boxes[rest])[0] <= iou_threshold
    return order[np.array(keep, dtype=np.int64)]


def nms(dets: Sequence[Detection], iou_threshold: float = 0.8, max_keep: Optional[int] = None) -> list[Detection]:
    """Greedy descending-confidence suppression (stable on ties)."""
    idx = nms_indices(_boxes(dets), np.array([d.score for d in dets]), iou_threshold, max_keep)
    return [dets[i] for i in idx]


def _group(dets: Iterable[Detection]) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for d in dets:
        out.setdefault(d.scene_id, []).append(d)
    return out


def _gt_array(gts: Sequence[Box3D]) -> np.ndarray:
    return np.array([b.to_array() for b in gts]).reshape(-1, 7)


def best_iou(dets: Sequence[Detection], gts: Mapping[str, Sequence[Box3D]]) -> np.ndarray:
    """Max 3D IoU of each detection against the ground truths of its scene."""
    out = np.zeros(len(dets))
    index = {id(d): i for i, d in enumerate(dets)}
    for scene, group in _group(dets).items():
        g = _gt_array(gts.get(scene, []))
        if len(g) == 0:
            continue
        m = iou_3d_matrix(_boxes(group), g).max(axis=1)
        for d, v in zip(group, m):
            out[index[id(d)]] = v
    return out


def consistency_ratio(
    dets: Sequence[Detection], gts: Mapping[str, Sequence[Box3D]], tau: float, upsilon: float
) -> Optional[float]:
    """Fraction of positive candidates (best IoU > tau) with confidence > upsilon.

    Candidates are pooled over scenes. Returns None when there are none.
    """
    ious = best_iou(dets, gts)
    scores = np.array([d.score for d in dets])[ious > tau]
    if len(scores) == 0:
        return None
    return float(np.count_nonzero(scores > upsilon) / len(scores))


def sweep_consistency(
    dets: Sequence[Detection], gts: Mapping[str, Sequence[Box3D]], cfg: ConsistencyConfig = ConsistencyConfig()
) -> list[dict]:
    """Consistency ratio at every threshold of the grid: ``[{upsilon, ratio, n_candidates}]``."""
    ious = best_iou(dets, gts)
    scores = np.array([d.score for d in dets])[ious > cfg.tau]
    out = []
    for u in cfg.upsilons:
        ratio = None if len(scores) == 0 else float(np.count_nonzero(scores > u) / len(scores))
        out.append({"upsilon": float(u), "ratio": ratio, "n_candidates": int(len(scores))})
    return out


def match_detections(
    dets: Sequence[Detection], gts: Mapping[str, Sequence[Box3D]], iou_threshold: float
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy one-to-one matching in descending confidence.

    Returns (scores sorted descending, true-positive flags). A detection is a
    true positive when its best-overlap ground truth reaches the threshold and
    is still unmatched.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    iou_tables = {}
    for scene, group in gts.items():
        mine = [i for i in order if dets[i].scene_id == scene]
        if mine and len(group):
            iou_tables[scene] = dict(zip(mine, iou_3d_matrix(_boxes([dets[i] for i in mine]), _gt_array(group))))
    taken: dict[str, set[int]] = {s: set() for s in gts}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        row = iou_tables.get(dets[i].scene_id, {}).get(i)
        if row is None:
            continue
        j = int(np.argmax(row))
        if row[j] >= iou_threshold and j not in taken[dets[i].scene_id]:
            taken[dets[i].scene_id].add(j)
            tp[rank] = True
    return np.array([dets[i].score for i in order]), tp


def average_precision(tp: np.ndarray, num_gt: int, recall_positions: int = 40) -> Optional[float]:
    """Interpolated AP from ranked true-positive flags.

    40 positions sample recall at {1/40, ..., 1}; 11 positions use the legacy
    grid {0, 0.1, ..., 1}.
    """
    if num_gt == 0:
        return None
    if recall_positions == 11:
        grid = np.linspace(0.0, 1.0, 11)
    else:
        grid = np.arange(1, recall_positions + 1) / recall_positions
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # interpolated precision: max over recall >= r
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in grid:
        hit = np.nonzero(recall >= r - 1e-12)[0]
        total += interp[hit[0]] if len(hit) else 0.0
    return float(total / len(grid))


def ap_40(
    dets: Sequence[Detection], gts: Mapping[str, Sequence[Box3D]], iou_threshold: float = 0.7, recall_positions: int = 40
) -> Optional[float]:
    num_gt = sum(len(g) for g in gts.values())
    if num_gt == 0:
        return None
    _, tp = match_detections(dets, gts, iou_threshold)
    return average_precision(tp, num_gt, recall_positions)


# interchange ---------------------------------------------------------------

BOX_FIELDS = ("x", "y", "z", "h", "w", "l", "yaw")


class DetectionFormatError(ValueError):
    pass


def detection_to_json(d: Detection) -> dict:
    out = {"scene_id": d.scene_id}
    out.update({k: float(getattr(d.box, k)) for k in BOX_FIELDS})
    out["score"] = float(d.score)
    return out


def read_jsonl(text: str, need_score: bool = True) -> list[Detection]:
    """Parse detection lines ``{scene_id, x, y, z, h, w, l, yaw, score}``."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            box = Box3D(*(float(rec[k]) for k in BOX_FIELDS))
            score = float(rec["score"]) if need_score else float(rec.get("score", 1.0))
            out.append(Detection(box, score, str(rec["scene_id"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DetectionFormatError(f"line {lineno}: {exc.__class__.__name__}: {exc}") from None
    return out


def write_jsonl(dets: Iterable[Detection]) -> str:
    return "".join(json.dumps(detection_to_json(d)) + "\n" for d in dets)


def group_boxes(dets: Iterable[Detection]) -> dict[str, list[Box3D]]:
    out: dict[str, list[Box3D]] = {}
    for d in dets:
        out.setdefault(d.scene_id, []).append(d.box)
    return out
