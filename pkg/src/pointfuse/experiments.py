"""Paired training experiments on synthetic scenes: confidence consistency and fusion ablations."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .evaluation import ConsistencyConfig, Detection, ap_40, sweep_consistency
from .geometry import Box3D
from .kitti import Scene, perturb_illumination
from .model import LossMode, SceneCache, TwoStreamConfig, detect, prepare_scene
from .synth import SyntheticSceneConfig, make_dataset
from .train import TrainState, train

ILLUMINATION = ((3.0, 5.0), (0.3, 5.0))


@dataclass(frozen=True)
class ExperimentConfig:
    model: TwoStreamConfig = field(default_factory=TwoStreamConfig)
    scene: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    n_train: int = 40
    n_eval: int = 20
    steps: int = 300
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    candidates_per_scene: int = 64
    ap_iou: float = 0.5
    illumination: tuple[tuple[float, float], ...] = ILLUMINATION

    def to_dict(self) -> dict:
        return asdict(self)


def consistency_config() -> ExperimentConfig:
    return ExperimentConfig(steps=400)


def fusion_config() -> ExperimentConfig:
    """Scenes with same-size distractors, so that appearance carries information the points lack."""
    return ExperimentConfig(steps=300, scene=SyntheticSceneConfig(n_distractors=(1, 3)))


def split(cfg: ExperimentConfig, seed: int) -> tuple[list[Scene], list[Scene]]:
    """Training and held-out scenes for one replicate; disjoint seed streams."""
    ss = np.random.SeedSequence([seed, 7]).spawn(2)
    train_seed, eval_seed = (int(s.generate_state(1)[0]) for s in ss)
    return make_dataset(cfg.scene, cfg.n_train, train_seed), make_dataset(cfg.scene, cfg.n_eval, eval_seed)


def corrupt(scenes: Sequence[Scene], conditions: Sequence[tuple[float, float]], seed: int = 0) -> list[Scene]:
    """Apply one illumination condition ``(a, b)``, drawn at random, to every image."""
    rng = np.random.default_rng([seed, 11])
    out = []
    for s in scenes:
        a, b = conditions[int(rng.integers(len(conditions)))]
        out.append(replace(s, image=perturb_illumination(s.image, a, b), meta={**s.meta, "illumination": [a, b]}))
    return out


def scene_detections(
    state: TrainState, caches: Sequence[SceneCache], final_nms: bool = True, max_candidates: Optional[int] = None
) -> tuple[list[Detection], dict[str, list[Box3D]]]:
    dets, gts = [], {}
    for i, c in enumerate(caches):
        sid = str(i)
        out = detect(state.params, state.cfg, c, final_nms=final_nms, seed=i, max_candidates=max_candidates)
        dets += [Detection(Box3D.from_array(b), float(s), sid) for b, s in zip(out.boxes, out.scores)]
        gts[sid] = list(c.scene.gt_boxes)
    return dets, gts


def compare_arms(sweep_a: list[dict], sweep_b: list[dict], names: tuple[str, str] = ("ce", "iou")) -> list[dict]:
    """Merge two sweeps row by row; ``a_ge_b`` is None where either ratio is undefined."""
    rows = []
    for ra, rb in zip(sweep_a, sweep_b):
        if ra["upsilon"] != rb["upsilon"]:
            raise ValueError("sweeps use different threshold grids")
        a, b = ra["ratio"], rb["ratio"]
        rows.append(
            {
                "upsilon": ra["upsilon"],
                f"ratio_{names[0]}": a,
                f"ratio_{names[1]}": b,
                f"n_{names[0]}": ra["n_candidates"],
                f"n_{names[1]}": rb["n_candidates"],
                "a_ge_b": None if a is None or b is None else bool(a >= b),
            }
        )
    return rows


def _log(progress: Optional[Callable[[str], None]], msg: str) -> None:
    if progress is not None:
        progress(msg)


def run_consistency_experiment(cfg: ExperimentConfig, progress: Optional[Callable[[str], None]] = None) -> dict:
    """Train a CE arm and an IoU-only arm on identical data and seeds; sweep the consistency ratio."""
    t0 = time.perf_counter()
    replicates = []
    for seed in cfg.seeds:
        train_scenes, eval_scenes = split(cfg, seed)
        model = replace(cfg.model, seed=seed)
        tr = [prepare_scene(s, model) for s in train_scenes]
        ev = [prepare_scene(s, model) for s in eval_scenes]
        sweeps, traces = {}, {}
        for mode in (LossMode.CE, LossMode.IOU_ONLY):
            res = train(model, [], cfg.steps, mode, seed=seed, caches=tr)
            dets, gts = scene_detections(res.state, ev, final_nms=False, max_candidates=cfg.candidates_per_scene)
            sweeps[mode.value] = sweep_consistency(dets, gts, cfg.consistency)
            traces[mode.value] = res.trace
            _log(progress, f"seed {seed} {mode.value}: final loss {np.mean(res.trace[-20:]):.3f}")
        rows = compare_arms(sweeps["ce"], sweeps["iou_only"])
        defined = [r["a_ge_b"] for r in rows if r["a_ge_b"] is not None]
        replicates.append(
            {
                "seed": seed,
                "rows": rows,
                "ce_ge_iou_everywhere": bool(defined) and all(defined),
                "final_loss": {k: float(np.mean(v[-20:])) for k, v in traces.items()},
            }
        )
    wins = sum(r["ce_ge_iou_everywhere"] for r in replicates)
    return {
        "experiment": "consistency",
        "tau": cfg.consistency.tau,
        "upsilons": list(cfg.consistency.upsilons),
        "steps": cfg.steps,
        "replicates": replicates,
        "replicates_ce_ge_iou": wins,
        "runtime_s": time.perf_counter() - t0,
    }


FUSION_ARMS = ("none", "ungated", "gated")


def _ap_arm(cfg: ExperimentConfig, seed: int, fusion: str, train_scenes, eval_scenes) -> float:
    model = replace(cfg.model, seed=seed, fusion=fusion)
    tr = [prepare_scene(s, model) for s in train_scenes]
    ev = [prepare_scene(s, model) for s in eval_scenes]
    res = train(model, [], cfg.steps, LossMode.CE, seed=seed, caches=tr)
    dets, gts = scene_detections(res.state, ev)
    ap = ap_40(dets, gts, cfg.ap_iou)
    return 0.0 if ap is None else 100.0 * ap


def run_fusion_ablation(
    cfg: ExperimentConfig,
    arms: Sequence[str] = FUSION_ARMS,
    corrupted_arms: Sequence[str] = ("ungated", "gated"),
    progress: Optional[Callable[[str], None]] = None,
) -> dict:
    """AP@40 (in points) per fusion arm on clean held-out scenes and under illumination corruption."""
    t0 = time.perf_counter()
    replicates = []
    for seed in cfg.seeds:
        train_scenes, eval_scenes = split(cfg, seed)
        clean = {a: _ap_arm(cfg, seed, a, train_scenes, eval_scenes) for a in arms}
        _log(progress, f"seed {seed} clean: {clean}")
        ctr = corrupt(train_scenes, cfg.illumination, seed)
        cev = corrupt(eval_scenes, cfg.illumination, seed + 10_000)
        dark = {a: _ap_arm(cfg, seed, a, ctr, cev) for a in corrupted_arms}
        _log(progress, f"seed {seed} corrupted: {dark}")
        rep = {"seed": seed, "clean": clean, "corrupted": dark}
        if "gated" in clean and "none" in clean:
            rep["fusion_gain"] = clean["gated"] - clean["none"]
        if "gated" in dark and "ungated" in dark:
            rep["gate_gain_corrupted"] = dark["gated"] - dark["ungated"]
        replicates.append(rep)
    return {
        "experiment": "fusion",
        "ap_iou": cfg.ap_iou,
        "steps": cfg.steps,
        "illumination": [list(c) for c in cfg.illumination],
        "replicates": replicates,
        "replicates_fusion_gain_ge_2": sum(r.get("fusion_gain", -np.inf) >= 2.0 for r in replicates),
        "replicates_gate_ge_ungated": sum(r.get("gate_gain_corrupted", -np.inf) >= 0.0 for r in replicates),
        "runtime_s": time.perf_counter() - t0,
    }
