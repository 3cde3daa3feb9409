"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_err: float
    step: float
    seed: int
    per_param: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    names: Sequence[str] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
    op_name: str = "f",
) -> GradCheckReport:
    """Compare ``backward()`` gradients of the scalar ``f()`` against central differences.

    Relative error per entry is ``|a - n| / max(1, |a|, |n|)``. With
    ``max_entries`` set, a seeded random subset of each parameter is probed.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    for p in params:
        p.grad = None
        p.requires_grad = True
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ValueError(f"{op_name}: non-finite function value")
    loss.backward()
    rng = np.random.default_rng(seed)
    names = list(names) if names is not None else [f"p{i}" for i in range(len(params))]
    per_param: dict[str, float] = {}
    with T.no_grad():
        for name, p in zip(names, params):
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f().data)
                flat[i] = orig - step
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise ValueError(f"{op_name}: non-finite function value near {name}[{i}]")
                numeric = (fp - fm) / (2 * step)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
            per_param[name] = worst
    return GradCheckReport(op_name, max(per_param.values(), default=0.0), step, seed, per_param)


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + np.abs(x)), x)


def _untied(rng: np.random.Generator, shape, gap: float = 0.02) -> np.ndarray:
    """Values whose pairwise gaps all exceed ``gap`` (keeps max away from ties)."""
    n = int(np.prod(shape))
    vals = rng.permutation(n) * gap * 2 + rng.uniform(0, gap * 0.5, size=n)
    return (vals - vals.mean()).reshape(shape)


def _weighted(rng, out: Tensor) -> Tensor:
    # random projection so every output entry matters
    return (out * rng.normal(size=out.shape)).sum()


def operator_cases(seed: int) -> dict[str, tuple[Callable[[], Tensor], list[Tensor], list[str]]]:
    """One scalar test function per operator, drawn at non-degenerate points."""
    from .fusion import LiFusionLayer, fuse
    from .losses import smooth_l1

    rng = np.random.default_rng(seed)
    cases = {}

    x = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(4, 2)))
    b = Tensor(rng.normal(size=2))
    proj = rng.normal(size=(3, 2))
    cases["linear"] = (lambda: (T.linear(x, w, b) * proj).sum(), [x, w, b], ["x", "weight", "bias"])

    ci = Tensor(rng.normal(size=(2, 8, 8)))
    k = Tensor(rng.normal(size=(4, 2, 3, 3)))
    kb = Tensor(rng.normal(size=4))
    cproj = rng.normal(size=(4, 4, 4))
    cases["conv2d"] = (lambda: (T.conv2d(ci, k, stride=2, padding=1, bias=kb) * cproj).sum(), [ci, k, kb], ["x", "kernels", "bias"])

    c1 = Tensor(rng.normal(size=(3, 4, 5)))
    w1 = Tensor(rng.normal(size=(2, 3)))
    b1 = Tensor(rng.normal(size=2))
    p1 = rng.normal(size=(2, 4, 5))
    cases["conv1x1"] = (lambda: (T.conv1x1(c1, w1, b1) * p1).sum(), [c1, w1, b1], ["x", "weight", "bias"])

    fm = Tensor(rng.normal(size=(3, 5, 6)))
    coords = np.column_stack([rng.uniform(-1, 6.5, 7), rng.uniform(-1, 5.5, 7)])
    valid = rng.uniform(size=7) > 0.2
    bproj = rng.normal(size=(7, 3))
    cases["bilinear_sample"] = (lambda: (T.bilinear_sample(fm, coords, valid) * bproj).sum(), [fm], ["f"])

    for name, fn in (("relu", T.relu), ("tanh", T.tanh_act), ("sigmoid", T.sigmoid)):
        a = Tensor(_away_from_zero(rng, (4, 3)))
        pa = rng.normal(size=(4, 3))
        cases[name] = ((lambda a=a, pa=pa, fn=fn: (fn(a) * pa).sum()), [a], ["x"])

    ca = Tensor(rng.normal(size=(4, 2)))
    cb = Tensor(rng.normal(size=(4, 3)))
    pc = rng.normal(size=(4, 5))
    cases["concat"] = (lambda: (T.concat(ca, cb) * pc).sum(), [ca, cb], ["a", "b"])

    gm = Tensor(_untied(rng, (4, 8, 6)))
    pg = rng.normal(size=(4, 6))
    cases["grouped_max"] = (lambda: (T.grouped_max(gm) * pg).sum(), [gm], ["x"])

    up = Tensor(rng.normal(size=(2, 3, 3)))
    pu = rng.normal(size=(2, 6, 6))
    cases["upsample_nearest"] = (lambda: (T.upsample_nearest(up, 2) * pu).sum(), [up], ["x"])

    gx = Tensor(rng.normal(size=(5, 3)))
    gidx = rng.integers(0, 5, size=9)
    pgx = rng.normal(size=(9, 3))
    cases["gather_rows"] = (lambda: (T.gather_rows(gx, gidx) * pgx).sum(), [gx], ["x"])

    ix = Tensor(rng.normal(size=(4, 3)))
    iidx = rng.integers(0, 4, size=(6, 3))
    iw = rng.uniform(0.1, 1.0, size=(6, 3))
    pix = rng.normal(size=(6, 3))
    cases["interpolate_rows"] = (lambda: (T.interpolate_rows(ix, iidx, iw) * pix).sum(), [ix], ["x"])

    sx = Tensor(rng.normal(size=(5, 3)))
    sw = Tensor(rng.normal(size=(5, 1)))
    psx = rng.normal(size=(5, 3))
    cases["scale_rows"] = (lambda: (T.scale_rows(sx, sw) * psx).sum(), [sx, sw], ["x", "w"])

    ma = Tensor(rng.normal(size=6))
    mb = Tensor(rng.normal(size=6))
    mc = ma.data + _away_from_zero(rng, 6, 0.1)
    pm = rng.normal(size=6)
    cases["elementwise"] = (
        lambda: ((ma * mb + ma / (mb * mb + 1.0) - mb) * pm).sum()
        + (T.log(ma * ma + 1.0) * pm).sum()
        + (T.minimum(ma, mc) * pm).sum()
        + (T.maximum(mb, mb.data - 0.3) * pm).sum()
        + ((ma * ma + 0.5) ** 1.5 * pm).sum()
        + (ma[1:4] * pm[1:4]).sum(),
        [ma, mb],
        ["a", "b"],
    )

    sd = Tensor(_away_from_zero(rng, 8) * 2.0)
    sd.data = np.where(np.abs(np.abs(sd.data) - 1.0) < 0.05, sd.data + 0.2, sd.data)
    psd = rng.normal(size=8)
    cases["smooth_l1"] = (lambda: (smooth_l1(sd) * psd).sum(), [sd], ["d"])

    ra = Tensor(_away_from_zero(rng, (3, 4)))
    pr = rng.normal(size=(4, 3))
    cases["clamp_reshape"] = (lambda: (T.reshape(T.clamp_min(ra, 0.0), (4, 3)) * pr).sum() + (-ra).sum(), [ra], ["x"])

    lg = Tensor(rng.normal(size=(5, 4)))
    tg = rng.integers(0, 4, size=5)
    plg = rng.normal(size=5)
    cases["cross_entropy"] = (lambda: (T.cross_entropy(lg, tg) * plg).sum(), [lg], ["logits"])

    n, cp, ci_ = 6, 4, 3
    layer = LiFusionLayer.init(cp, ci_, rng=rng, scale=0.8)
    fp = Tensor(rng.normal(size=(n, cp)))
    fi = Tensor(rng.normal(size=(n, ci_)))
    pf = rng.normal(size=(n, cp + ci_))
    pw = rng.normal(size=(n, 1))

    def fusion_loss():
        out = fuse(layer, fp, fi)
        return (out.fused * pf).sum() + (out.weight_map * pw).sum()

    cases["li_fusion"] = (fusion_loss, [fp, fi, layer.U, layer.V, layer.W], ["F_P", "F_I", "U", "V", "W"])
    return cases


def run_suite(seeds: Sequence[int] = tuple(range(20)), step: float = 1e-5, max_entries: int = 24) -> list[GradCheckReport]:
    reports = []
    for seed in seeds:
        for name, (f, params, names) in operator_cases(seed).items():
            reports.append(finite_diff_check(f, params, step=step, names=names, max_entries=max_entries, seed=seed, op_name=name))
    return reports
