"""Training objectives: consistency-enforcing loss, focal loss, smooth-L1 and bin-based box regression."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor, _node

IOU_FLOOR = 1e-6


@dataclass(frozen=True)
class BinConfig:
    search_range: float = 3.0
    bin_size: float = 0.5
    num_heading_bins: int = 12

    def __post_init__(self):
        ratio = self.search_range / self.bin_size
        if self.search_range <= 0 or self.bin_size <= 0 or abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(f"search_range / bin_size must be a positive integer, got {ratio}")
        if self.num_heading_bins < 2:
            raise ValueError("need at least two heading bins")

    @property
    def num_bins(self) -> int:
        return int(round(2 * self.search_range / self.bin_size))

    def axis(self, heading: bool) -> tuple[float, float, int]:
        """(half range, bin width, bin count) for a center axis or the heading."""
        if heading:
            return math.pi, 2 * math.pi / self.num_heading_bins, self.num_heading_bins
        return self.search_range, self.bin_size, self.num_bins


@dataclass(frozen=True)
class LossWeights:
    lam: float = 5.0
    alpha: float = 0.25
    gamma: float = 2.0
    beta: float = 1.0

    def __post_init__(self):
        if not (self.lam >= 0 and 0 < self.alpha < 1 and self.gamma >= 0 and self.beta > 0):
            raise ValueError(f"invalid loss weights {self}")


class BinTarget(NamedTuple):
    bin: int
    residual: float


def bin_encode(offset: float, cfg: BinConfig, heading: bool = False) -> BinTarget:
    """Bin index and normalized intra-bin residual in [-0.5, 0.5].

    Offsets on an interior bin edge go to the upper bin; the top edge stays in
    the last bin. Out-of-range offsets are clamped (see :func:`encode_bins`).
    """
    bins, res, _ = encode_bins(np.array([offset]), cfg, heading)
    return BinTarget(int(bins[0]), float(res[0]))


def encode_bins(offsets: np.ndarray, cfg: BinConfig, heading: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized encode; also returns a mask of offsets that had to be clamped."""
    half, width, count = cfg.axis(heading)
    off = np.asarray(offsets, dtype=np.float64)
    clamped = np.abs(off) > half
    off = np.clip(off, -half, half)
    bins = np.clip(np.floor((off + half) / width), 0, count - 1).astype(np.int64)
    res = (off + half - (bins + 0.5) * width) / width
    return bins, res, clamped


def bin_decode(bin_index, residual, cfg: BinConfig, heading: bool = False):
    half, width, count = cfg.axis(heading)
    b = np.asarray(bin_index)
    if np.any((b < 0) | (b >= count)):
        raise ValueError(f"bin index out of range [0, {count})")
    out = (b + 0.5 + np.asarray(residual, dtype=np.float64)) * width - half
    return float(out) if np.ndim(out) == 0 else out


# elementwise losses --------------------------------------------------------


def ce_loss(c: Tensor, iou: Tensor) -> Tensor:
    """``-log(c * iou)`` elementwise, with iou floored at 1e-6."""
    if np.any(c.data <= 0) or np.any(c.data > 1):
        raise ValueError("ce_loss: confidence must lie in (0, 1]")
    return -T.log(c * T.clamp_min(iou, IOU_FLOOR))


def iou_loss(iou: Tensor) -> Tensor:
    """Plain ``-log(iou)`` baseline (no confidence factor)."""
    return -T.log(T.clamp_min(iou, IOU_FLOOR))


def focal_loss(p: Tensor, target: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean binary focal loss; ``alpha`` weights positives, ``1 - alpha`` negatives."""
    if np.any(p.data <= 0) or np.any(p.data >= 1):
        raise ValueError("focal_loss: probabilities must lie strictly inside (0, 1)")
    t = np.asarray(target, dtype=np.float64).reshape(p.shape)
    ct = p * (2 * t - 1) + (1 - t)
    a = np.where(t > 0, alpha, 1 - alpha)
    per = ((1.0 - ct) ** gamma) * T.log(ct) * (-a)
    return per.mean()


def smooth_l1(d: Tensor, beta: float = 1.0) -> Tensor:
    """``0.5 d^2 / beta`` inside ``|d| < beta``, ``|d| - beta / 2`` outside."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    x = d.data
    small = np.abs(x) < beta
    out = np.where(small, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)
    grad = np.where(small, x / beta, np.sign(x))
    return _node(out, (d,), lambda g: (g * grad,), "smooth_l1")


# box regression ------------------------------------------------------------

RESIDUAL_AXES = ("x", "y", "z", "h", "w", "l", "yaw")


@dataclass
class RegTargets:
    """Per-positive regression targets: bins for (x, z, yaw) and the seven residuals."""

    bins: np.ndarray  # P x 3 int
    residuals: np.ndarray  # P x 7


def encode_box_targets(anchor_xyz: np.ndarray, gt: np.ndarray, cfg: BinConfig, mean_size: np.ndarray) -> RegTargets:
    """Targets of boxes ``gt`` (P x 7) relative to anchor points (P x 3)."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    anchor = np.asarray(anchor_xyz, dtype=np.float64).reshape(-1, 3)
    bx, rx, _ = encode_bins(gt[:, 0] - anchor[:, 0], cfg)
    bz, rz, _ = encode_bins(gt[:, 2] - anchor[:, 2], cfg)
    bt, rt, _ = encode_bins(gt[:, 6], cfg, heading=True)
    res = np.column_stack([rx, gt[:, 1] - anchor[:, 1], rz, gt[:, 3:6] - mean_size, rt])
    return RegTargets(np.column_stack([bx, bz, bt]), res)


def decode_boxes(anchor_xyz: np.ndarray, bins: np.ndarray, residuals: np.ndarray, cfg: BinConfig, mean_size: np.ndarray) -> np.ndarray:
    anchor = np.asarray(anchor_xyz, dtype=np.float64).reshape(-1, 3)
    r = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(bins).reshape(-1, 3)
    x = anchor[:, 0] + bin_decode(b[:, 0], r[:, 0], cfg)
    z = anchor[:, 2] + bin_decode(b[:, 1], r[:, 2], cfg)
    yaw = bin_decode(b[:, 2], r[:, 6], cfg, heading=True)
    size = np.maximum(r[:, 3:6] + mean_size, 1e-3)
    return np.column_stack([x, anchor[:, 1] + r[:, 1], z, size, yaw])


class RegLoss(NamedTuple):
    bin: Tensor
    res: Tensor
    empty: bool


def reg_loss(bin_logits: Tensor, residuals: Tensor, targets: RegTargets, cfg: BinConfig, beta: float = 1.0) -> RegLoss:
    """Bin cross entropy over (x, z, yaw) plus smooth-L1 over all seven residuals.

    ``bin_logits`` is P x (2 * num_bins + num_heading_bins); every row is a
    positive. Both parts are averaged over positives.
    """
    p = bin_logits.shape[0]
    if p == 0:
        zero = Tensor(0.0)
        return RegLoss(zero, zero, True)
    nb, nh = cfg.num_bins, cfg.num_heading_bins
    ce = (
        T.cross_entropy(bin_logits[:, :nb], targets.bins[:, 0])
        + T.cross_entropy(bin_logits[:, nb : 2 * nb], targets.bins[:, 1])
        + T.cross_entropy(bin_logits[:, 2 * nb : 2 * nb + nh], targets.bins[:, 2])
    )
    res = smooth_l1(residuals - targets.residuals, beta)
    return RegLoss(ce.sum() * (1.0 / p), res.sum() * (1.0 / p), False)


# composition ---------------------------------------------------------------

STAGE_TERMS = ("cls", "reg_bin", "reg_res", "ce")


@dataclass
class LossBreakdown:
    lam: float
    rpn: dict[str, float] = field(default_factory=lambda: dict.fromkeys(STAGE_TERMS, 0.0))
    rcnn: dict[str, float] = field(default_factory=lambda: dict.fromkeys(STAGE_TERMS, 0.0))
    flags: dict[str, bool] = field(default_factory=dict)

    def stage_total(self, stage: str) -> float:
        s = getattr(self, stage)
        return s["cls"] + s["reg_bin"] + s["reg_res"] + self.lam * s["ce"]

    @property
    def total(self) -> float:
        return self.stage_total("rpn") + self.stage_total("rcnn")

    def to_json(self) -> dict:
        d = asdict(self)
        d["rpn_total"] = self.stage_total("rpn")
        d["rcnn_total"] = self.stage_total("rcnn")
        d["total"] = self.total
        return d


def stage_loss(cls: Tensor, reg: RegLoss, ce: Optional[Tensor], lam: float) -> tuple[Tensor, dict[str, float]]:
    """``cls + reg + lam * ce`` for one stage, plus the float components."""
    total = cls + reg.bin + reg.res
    parts = {"cls": cls.item(), "reg_bin": reg.bin.item(), "reg_res": reg.res.item(), "ce": 0.0}
    if ce is not None:
        total = total + ce * lam
        parts["ce"] = ce.item()
    return total, parts
