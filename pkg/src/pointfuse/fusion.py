"""Point-wise image feature fusion: grid generator, image sampler, gated fusion layer."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .geometry import project_points
from .tensor import Tensor

STRIDES = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class PointImageCorrespondence:
    coords: np.ndarray  # N x 2, (u, v) at the target scale
    valid: np.ndarray  # N bool
    shape_hw: tuple[int, int]
    stride: int


def generate_grid(points: np.ndarray, M: np.ndarray, stride: int, image_extent: tuple[int, int]) -> PointImageCorrespondence:
    """Project points at full resolution and rescale to a ``stride``-downsampled map."""
    if stride not in STRIDES:
        raise ValueError(f"stride must be one of {STRIDES}, got {stride}")
    h, w = image_extent[0] // stride, image_extent[1] // stride
    uv, valid = project_points(points, M)
    coords = uv / stride
    inside = (coords[:, 0] >= -0.5) & (coords[:, 0] < w - 0.5) & (coords[:, 1] >= -0.5) & (coords[:, 1] < h - 0.5)
    valid = valid & inside
    return PointImageCorrespondence(np.where(valid[:, None], coords, 0.0), valid, (h, w), stride)


def sample_point_features(fmap: Tensor, corr: PointImageCorrespondence) -> Tensor:
    """Bilinear image features per point (N x C); invalid points get zero rows."""
    if fmap.ndim != 3 or tuple(fmap.shape[1:]) != tuple(corr.shape_hw):
        raise ValueError(f"feature map {fmap.shape} does not match correspondence scale {corr.shape_hw}")
    return T.bilinear_sample(fmap, corr.coords, corr.valid)


@dataclass
class LiFusionLayer:
    """Bias-free maps U (Cp x Ct), V (Ci x Ct), W (Ct x 1).

    With ``gated=False`` the weight map is pinned to 1 (the "without w" arm).
    """

    U: Tensor
    V: Tensor
    W: Tensor
    gated: bool = True

    @classmethod
    def init(
        cls,
        cp: int,
        ci: int,
        ct: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        scale: Optional[float] = None,
        gated: bool = True,
    ) -> "LiFusionLayer":
        ct = ct or min(cp, ci)
        rng = rng if rng is not None else np.random.default_rng(0)

        def mat(rows, cols):
            s = scale if scale is not None else np.sqrt(1.0 / rows)
            return Tensor(rng.normal(scale=s, size=(rows, cols)), requires_grad=True)

        return cls(mat(cp, ct), mat(ci, ct), mat(ct, 1), gated)

    @property
    def channels(self) -> tuple[int, int, int]:
        return self.U.shape[0], self.V.shape[0], self.U.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"U": self.U, "V": self.V, "W": self.W}


@dataclass
class FusionOutput:
    fused: Tensor  # N x (Cp + Ci)
    weight_map: Tensor  # N x 1


def fuse(layer: LiFusionLayer, F_P: Tensor, F_I: Tensor) -> FusionOutput:
    """``w = sigmoid(W tanh(U F_P + V F_I))``; output ``[F_P || w * F_I]``."""
    cp, ci, _ = layer.channels
    if F_P.ndim != 2 or F_I.ndim != 2 or F_P.shape[1] != cp or F_I.shape[1] != ci:
        raise ValueError(f"fuse: expected N x {cp} and N x {ci}, got {F_P.shape} and {F_I.shape}")
    if F_P.shape[0] != F_I.shape[0]:
        raise ValueError(f"fuse: point counts differ ({F_P.shape[0]} vs {F_I.shape[0]})")
    if not layer.gated:
        ones = Tensor(np.ones((F_P.shape[0], 1)))
        return FusionOutput(T.concat(F_P, F_I), ones)
    hidden = T.tanh_act(T.linear(F_P, layer.U) + T.linear(F_I, layer.V))
    w = T.sigmoid(T.linear(hidden, layer.W))
    return FusionOutput(T.concat(F_P, T.scale_rows(F_I, w)), w)


def weight_map_stats(w: Tensor | np.ndarray) -> dict[str, float]:
    d = w.data if isinstance(w, Tensor) else np.asarray(w)
    if d.size == 0:
        return {"min": float("nan"), "mean": float("nan"), "max": float("nan")}
    return {"min": float(d.min()), "mean": float(d.mean()), "max": float(d.max())}
