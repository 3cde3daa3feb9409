"""Optimizer state, training loop and a self-describing binary checkpoint format."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .kitti import Scene
from .model import LossMode, SceneCache, TwoStreamConfig, compute_loss, init_params, prepare_scene
from .losses import LossBreakdown
from .tensor import Tensor

CHECKPOINT_MAGIC = b"PFCKPT\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass
class TrainState:
    cfg: TwoStreamConfig
    params: dict[str, Tensor]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def create(cls, cfg: TwoStreamConfig, seed: Optional[int] = None) -> "TrainState":
        seed = cfg.seed if seed is None else seed
        params = init_params(cfg, seed)
        zeros = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(cfg, params, zeros, {k: z.copy() for k, z in zeros.items()}, 0, np.random.default_rng(seed + 1))


def adam_update(state: TrainState) -> None:
    """One adaptive-moment step; weight decay enters as an L2 term on the gradient."""
    cfg = state.cfg
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for k, p in state.params.items():
        if p.grad is None:
            continue
        g = p.grad + cfg.weight_decay * p.data
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = state.m[k] / (1 - b1**t)
        vhat = state.v[k] / (1 - b2**t)
        p.data = p.data - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        p.grad = None


def train_step(state: TrainState, batch: Sequence[SceneCache], loss_mode: LossMode) -> tuple[TrainState, LossBreakdown]:
    """Forward, backward and update on a batch; per-scene gradients accumulate in batch order.

    A non-finite loss raises ``FloatingPointError`` before any parameter changes.
    """
    if not batch:
        raise ValueError("empty batch")
    for p in state.params.values():
        p.grad = None
    parts = []
    for cache in batch:
        res = compute_loss(state.params, state.cfg, cache, loss_mode, state.rng)
        total = res.total * (1.0 / len(batch))
        total.backward()
        parts.append(res.breakdown)
    adam_update(state)
    return state, _mean_breakdown(parts)


def _mean_breakdown(parts: list[LossBreakdown]) -> LossBreakdown:
    if len(parts) == 1:
        return parts[0]
    out = LossBreakdown(parts[0].lam)
    for stage in ("rpn", "rcnn"):
        d = getattr(out, stage)
        for k in d:
            d[k] = float(np.mean([getattr(p, stage)[k] for p in parts]))
    out.flags = {k: any(p.flags.get(k, False) for p in parts) for k in parts[0].flags}
    return out


@dataclass
class TrainResult:
    state: TrainState
    trace: list[float]
    breakdowns: list[LossBreakdown]


def train(
    cfg: TwoStreamConfig,
    scenes: Sequence[Scene],
    steps: int,
    loss_mode: LossMode = LossMode.CE,
    seed: Optional[int] = None,
    state: Optional[TrainState] = None,
    caches: Optional[Sequence[SceneCache]] = None,
    batch_size: int = 1,
    callback: Optional[Callable[[TrainState, LossBreakdown], None]] = None,
) -> TrainResult:
    """Train for ``steps`` updates on scenes drawn by the state's RNG."""
    caches = list(caches) if caches is not None else [prepare_scene(s, cfg) for s in scenes]
    if not caches:
        raise ValueError("no training scenes")
    state = state or TrainState.create(cfg, seed)
    trace, bds = [], []
    for _ in range(steps):
        pick = state.rng.integers(len(caches), size=batch_size)
        state, bd = train_step(state, [caches[i] for i in pick], loss_mode)
        trace.append(bd.total)
        bds.append(bd)
        if callback is not None:
            callback(state, bd)
    return TrainResult(state, trace, bds)


# checkpoints ---------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def _blocks(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = []
    for k in state.params:
        out.append((f"param/{k}", state.params[k].data))
        out.append((f"adam_m/{k}", state.m[k]))
        out.append((f"adam_v/{k}", state.v[k]))
    return out


def save_checkpoint(state: TrainState, path) -> None:
    meta = {
        "config": state.cfg.to_dict(),
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "rng_kind": type(state.rng.bit_generator).__name__,
        "blocks": [[name, list(arr.shape)] for name, arr in _blocks(state)],
    }
    mb = json.dumps(meta).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(mb)))
    buf.write(mb)
    for _, arr in _blocks(state):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> TrainState:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    version, mlen = struct.unpack_from("<II", raw, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off += 8
    try:
        meta = json.loads(raw[off : off + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc})") from None
    off += mlen
    arrays = {}
    for name, shape in meta["blocks"]:
        n = int(np.prod(shape))
        end = off + 8 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated block {name}")
        arrays[name] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    cfg = TwoStreamConfig.from_dict(meta["config"])
    names = [n.split("/", 1)[1] for n, _ in meta["blocks"] if n.startswith("param/")]
    params = {k: Tensor(arrays[f"param/{k}"], requires_grad=True) for k in names}
    bitgen = getattr(np.random, meta["rng_kind"])()
    bitgen.state = meta["rng_state"]
    return TrainState(
        cfg,
        params,
        {k: arrays[f"adam_m/{k}"] for k in names},
        {k: arrays[f"adam_v/{k}"] for k in names},
        int(meta["step"]),
        np.random.Generator(bitgen),
    )
