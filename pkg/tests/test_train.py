from dataclasses import replace

import numpy as np
import pytest

from pointfuse.model import LossMode, prepare_scene
from pointfuse.synth import generate_synthetic_scene
from pointfuse.train import (
    CheckpointError,
    TrainState,
    adam_update,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)

from small_configs import SMALL, SMALL_SCENE


@pytest.fixture(scope="module")
def caches():
    return [prepare_scene(generate_synthetic_scene(SMALL_SCENE, s), SMALL) for s in (3, 4)]


def test_adam_first_step_moves_by_lr():
    cfg = replace(SMALL, weight_decay=0.0)
    st = TrainState.create(cfg, 0)
    name = "rpn.mlp.b"
    before = st.params[name].data.copy()
    for p in st.params.values():
        p.grad = None
    st.params[name].grad = np.linspace(-1, 1, len(before)) + 0.05
    adam_update(st)
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(before - st.params[name].data, cfg.lr * np.sign(np.linspace(-1, 1, len(before)) + 0.05), rtol=1e-6)
    assert st.step == 1 and st.params[name].grad is None


def test_weight_decay_enters_as_l2():
    st = TrainState.create(SMALL, 0)
    name = "rpn.mlp.b"
    st.params[name].data = np.ones_like(st.params[name].data)
    st.params[name].grad = np.zeros_like(st.params[name].data)
    adam_update(st)
    assert np.all(st.params[name].data < 1.0)


@pytest.mark.parametrize("mode", list(LossMode))
def test_loss_decreases_on_one_scene(caches, mode):
    res = train(SMALL, [], 50, mode, seed=0, caches=caches[:1])
    assert np.mean(res.trace[-10:]) < np.mean(res.trace[:10])


def test_equal_seeds_give_identical_traces(caches):
    a = train(SMALL, [], 6, LossMode.CE, seed=5, caches=caches)
    b = train(SMALL, [], 6, LossMode.CE, seed=5, caches=caches)
    assert a.trace == b.trace


def test_lambda_zero_makes_ce_and_none_identical(caches):
    cfg = replace(SMALL, loss=replace(SMALL.loss, lam=0.0))
    a = train(cfg, [], 5, LossMode.CE, seed=1, caches=caches)
    b = train(cfg, [], 5, LossMode.NONE, seed=1, caches=caches)
    assert a.trace == b.trace


def test_checkpoint_resume_is_bitwise(caches, tmp_path):
    full = train(SMALL, [], 6, LossMode.CE, seed=2, caches=caches)
    half = train(SMALL, [], 3, LossMode.CE, seed=2, caches=caches)
    save_checkpoint(half.state, tmp_path / "ck.bin")
    loaded = load_checkpoint(tmp_path / "ck.bin")
    assert loaded.step == 3 and loaded.cfg == SMALL
    for k in half.state.params:
        assert np.array_equal(loaded.params[k].data, half.state.params[k].data)
        assert np.array_equal(loaded.m[k], half.state.m[k]) and np.array_equal(loaded.v[k], half.state.v[k])
    rest = train(SMALL, [], 3, LossMode.CE, state=loaded, caches=caches)
    assert half.trace + rest.trace == full.trace
    for k in full.state.params:
        assert np.array_equal(rest.state.params[k].data, full.state.params[k].data)


def test_checkpoint_corruption_detected(caches, tmp_path):
    st = TrainState.create(SMALL, 0)
    path = tmp_path / "ck.bin"
    save_checkpoint(st, path)
    raw = path.read_bytes()
    (tmp_path / "bad_magic.bin").write_bytes(b"X" + raw[1:])
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    (tmp_path / "long.bin").write_bytes(raw + b"\x00" * 8)
    for name in ("bad_magic.bin", "short.bin", "long.bin"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)


def test_batch_step_averages(caches):
    st = TrainState.create(SMALL, 0)
    _, bd = train_step(st, caches, LossMode.CE)
    assert np.isfinite(bd.total)
    with pytest.raises(ValueError):
        train_step(st, [], LossMode.CE)
