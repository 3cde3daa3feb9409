from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointfuse import tensor as T
from pointfuse.geometry import Box3D
from pointfuse.gradcheck import finite_diff_check
from pointfuse.kitti import Scene
from pointfuse.losses import encode_box_targets
from pointfuse.model import (
    LossMode,
    RpnOutput,
    TwoStreamConfig,
    argmax_bins,
    ball_group,
    compute_loss,
    decode_refinement,
    decode_rpn,
    detect,
    encode_refinement,
    farthest_point_sample,
    fp_stage,
    generate_proposals,
    image_stream,
    init_params,
    param_group,
    pool_points,
    prepare_scene,
    refine,
    sa_stage,
    three_nn_weights,
    two_stream_forward,
)
from pointfuse.synth import generate_synthetic_scene
from pointfuse.tensor import Tensor

from small_configs import SMALL, SMALL_SCENE


@pytest.fixture(scope="module")
def scene():
    return generate_synthetic_scene(SMALL_SCENE, seed=3)


@pytest.fixture(scope="module")
def cache(scene):
    return prepare_scene(scene, SMALL)


def test_config_validation():
    with pytest.raises(ValueError):
        TwoStreamConfig(image_size=(40, 64))
    with pytest.raises(ValueError):
        TwoStreamConfig(point_counts=(64, 128, 32, 16))
    with pytest.raises(ValueError):
        TwoStreamConfig(fusion="late")
    cfg = TwoStreamConfig.from_dict(SMALL.to_dict())
    assert cfg == SMALL
    with pytest.raises(ValueError):
        TwoStreamConfig.from_dict({**SMALL.to_dict(), "extra": 1})


def test_image_stream_shapes_and_zero_image():
    cfg = TwoStreamConfig()
    params = init_params(cfg, 0)
    blocks, fu = image_stream(params, cfg, np.zeros((3, 64, 64)))
    assert [b.shape[1:] for b in blocks] == [(32, 32), (16, 16), (8, 8), (4, 4)]
    assert fu.shape == (4 * cfg.fu_channels, 64, 64)
    # biases start at zero, so a black image stays black through every block
    assert all(np.all(b.data == 0) for b in blocks) and np.all(fu.data == 0)
    with pytest.raises(ValueError):
        image_stream(params, cfg, np.zeros((3, 40, 64)))


def test_image_stream_gradient_16px():
    cfg = replace(SMALL, image_size=(16, 16), image_channels=(2, 2, 2, 2), fu_channels=1)
    params = init_params(cfg, 1)
    rng = np.random.default_rng(2)
    for k in params:
        if k.startswith("img") and k.endswith(".b"):
            params[k].data = rng.normal(scale=0.1, size=params[k].shape)
    img = rng.uniform(size=(3, 16, 16))
    proj = rng.normal(size=(4, 16, 16))
    names = ["img.0.a.w", "img.1.b.w", "img.3.up.w", "img.2.a.b"]
    rep = finite_diff_check(lambda: (image_stream(params, cfg, img)[1] * proj).sum(), [params[n] for n in names], names=names)
    assert rep.max_rel_err <= 1e-4


def test_fps_and_grouping():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3))
    idx = farthest_point_sample(pts, 10, start=3)
    assert idx[0] == 3 and len(set(idx.tolist())) == 10
    np.testing.assert_array_equal(farthest_point_sample(pts, 50), np.arange(50))
    with pytest.raises(ValueError):
        farthest_point_sample(pts, 51)
    g = ball_group(pts, pts[idx], 0.0, 4, idx)
    np.testing.assert_array_equal(g, np.repeat(idx[:, None], 4, axis=1))
    g = ball_group(pts, pts[idx], 1.0, 8, idx)
    assert np.all((g == idx[:, None]).any(axis=1))
    assert np.all(np.linalg.norm(pts[g] - pts[idx][:, None], axis=2) <= 1.0 + 1e-12)


def test_sa_degenerate_grouping_is_pointwise_mlp():
    rng = np.random.default_rng(1)
    feats = Tensor(rng.normal(size=(6, 2)))
    w, b = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=4))
    groups = np.arange(6)[:, None].repeat(3, axis=1)
    out = sa_stage(feats, np.zeros((6, 3, 3)), groups, w, b).data
    ref = np.maximum(np.hstack([np.zeros((6, 3)), feats.data]) @ w.data + b.data, 0)
    np.testing.assert_allclose(out, ref)


def test_sa_duplicates_get_identical_features():
    rng = np.random.default_rng(2)
    base = rng.normal(size=(16, 3))
    pts = np.vstack([base, base])
    idx = np.arange(32)
    g = ball_group(pts, pts, 1.5, 6, idx)
    rel = (pts[g] - pts[:, None]) / 1.5
    w, b = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=5))
    out = sa_stage(None, rel, g, w, b).data
    np.testing.assert_allclose(out[:16], out[16:], atol=1e-12)


def test_sa_gradient_32_points():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(32, 3))
    centers = farthest_point_sample(pts, 8)
    g = ball_group(pts, pts[centers], 1.2, 6, centers)
    rel = (pts[g] - pts[centers][:, None]) / 1.2
    feats = Tensor(rng.normal(size=(32, 4)))
    w, b = Tensor(rng.normal(size=(7, 5))), Tensor(rng.normal(size=5))
    proj = rng.normal(size=(8, 5))
    rep = finite_diff_check(lambda: (sa_stage(feats, rel, g, w, b) * proj).sum(), [feats, w, b])
    assert rep.max_rel_err <= 1e-4


def test_three_nn_properties():
    rng = np.random.default_rng(4)
    coarse = rng.normal(size=(5, 3))
    fine = np.vstack([coarse[2:3], rng.normal(size=(7, 3))])
    idx, w = three_nn_weights(fine, coarse)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    cf = Tensor(rng.normal(size=(5, 4)))
    interp = T.interpolate_rows(cf, idx, w).data
    np.testing.assert_allclose(interp[0], cf.data[2], atol=1e-6)
    idx1, w1 = three_nn_weights(fine, coarse[:1])
    out = fp_stage(cf[0:1], idx1, w1, None, Tensor(np.eye(4)), Tensor(np.zeros(4))).data
    np.testing.assert_allclose(out, np.maximum(np.repeat(cf.data[:1], 8, axis=0), 0))


def test_forward_shapes_and_weight_maps(cache):
    params = init_params(SMALL, 0)
    out = two_stream_forward(params, SMALL, cache)
    assert out.features.shape == (256, SMALL.fp_channels[-1] + 4 * SMALL.fu_channels)
    assert len(out.weight_maps) == 5
    assert all(np.all((w.data > 0) & (w.data < 1)) for w in out.weight_maps)


def test_no_fusion_is_pure_point_network(scene):
    cfg = replace(SMALL, fusion="none")
    params = init_params(cfg, 0)
    assert not any(k.startswith(("img", "fuse")) for k in params)
    c = prepare_scene(scene, cfg)
    out = two_stream_forward(params, cfg, c)
    assert out.features.shape == (256, cfg.fp_channels[-1]) and out.weight_maps == []
    # the image plays no part
    dark = prepare_scene(replace(scene, image=np.zeros_like(scene.image)), cfg)
    np.testing.assert_array_equal(two_stream_forward(params, cfg, dark).features.data, out.features.data)


def test_zero_image_gives_zero_image_halves(scene):
    params = init_params(SMALL, 0)
    c = prepare_scene(replace(scene, image=np.zeros_like(scene.image)), SMALL)
    out = two_stream_forward(params, SMALL, c)
    np.testing.assert_array_equal(out.features.data[:, SMALL.fp_channels[-1]:], 0.0)
    for i, s in enumerate(out.stage_features):
        np.testing.assert_array_equal(s.data[:, SMALL.sa_channels[i]:], 0.0)


def test_permutation_invariance(scene):
    params = init_params(SMALL, 0)
    perm = np.random.default_rng(5).permutation(len(scene.points))
    a = two_stream_forward(params, SMALL, prepare_scene(scene, SMALL)).features.data
    b = two_stream_forward(params, SMALL, prepare_scene(replace(scene, points=scene.points[perm]), SMALL)).features.data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_rpn_zero_output_decodes_to_mean_box():
    cfg = SMALL
    pts = np.array([[1.0, 1.0, 10.0]])
    zero = RpnOutput(Tensor(np.array([0.5])), Tensor(np.zeros((1, cfg.reg_width))), Tensor(np.zeros((1, 7))))
    box = decode_rpn(pts, zero, cfg)[0]
    # argmax of all-equal logits is bin 0: its center sits at -range + width / 2
    half, width = cfg.bins.search_range, cfg.bins.bin_size
    np.testing.assert_allclose(box[[0, 2]], [1.0 - half + width / 2, 10.0 - half + width / 2])
    np.testing.assert_allclose(box[3:6], cfg.mean_size)


@settings(max_examples=50, deadline=None)
@given(st.floats(-2.9, 2.9), st.floats(-2.9, 2.9), st.floats(-3.1, 3.1), st.floats(1.0, 2.0))
def test_rpn_encode_decode_closure(dx, dz, yaw, h):
    cfg = SMALL
    anchor = np.array([[0.5, 1.2, 9.0]])
    gt = np.array([[0.5 + dx, 1.5, 9.0 + dz, h, 1.6, 3.9, yaw]])
    t = encode_box_targets(anchor, gt, cfg.bins, np.asarray(cfg.mean_size))
    logits = np.full((1, cfg.reg_width), -5.0)
    nb = cfg.bins.num_bins
    for j, off in enumerate((0, nb, 2 * nb)):
        logits[0, off + t.bins[0, j]] = 5.0
    out = RpnOutput(Tensor(np.array([0.9])), Tensor(logits), Tensor(t.residuals))
    box = decode_rpn(anchor, out, cfg)
    np.testing.assert_allclose(box[0, :6], gt[0, :6], atol=1e-9)
    assert abs(np.angle(np.exp(1j * (box[0, 6] - yaw)))) <= 1e-9
    again = encode_box_targets(anchor, box, cfg.bins, np.asarray(cfg.mean_size))
    np.testing.assert_array_equal(again.bins, t.bins)
    np.testing.assert_allclose(again.residuals, t.residuals, atol=1e-9)
    np.testing.assert_array_equal(argmax_bins(logits, cfg.bins), t.bins)


def test_proposals_sorted_truncated_and_deduplicated():
    cfg = replace(SMALL, pre_nms_top_k=3)
    pts = np.array([[0.0, 1.0, 10.0]] * 4 + [[20.0, 1.0, 10.0]])
    probs = np.array([0.9, 0.8, 0.7, 0.6, 0.5])
    out = RpnOutput(Tensor(probs), Tensor(np.zeros((5, cfg.reg_width))), Tensor(np.zeros((5, 7))))
    props = generate_proposals(pts, out, cfg)
    # the three top-scored points decode to the same box and collapse to one
    assert len(props) == 1 and props.point_indices.tolist() == [0]
    props = generate_proposals(pts, out, replace(cfg, pre_nms_top_k=5))
    assert props.point_indices.tolist() == [0, 4]
    assert np.all(np.diff(props.confidences) <= 0)


def test_refinement_residual_roundtrip():
    rng = np.random.default_rng(6)
    props = np.column_stack([rng.normal(size=(20, 3)), rng.uniform(1, 4, (20, 3)), rng.uniform(-3, 3, 20)])
    gt = props + np.column_stack([rng.normal(scale=0.3, size=(20, 3)), rng.normal(scale=0.2, size=(20, 3)), rng.normal(scale=0.3, size=20)])
    gt[:, 3:6] = np.abs(gt[:, 3:6])
    back = decode_refinement(props, encode_refinement(props, gt))
    np.testing.assert_allclose(back[:, :6], gt[:, :6], atol=1e-12)
    np.testing.assert_allclose(np.cos(back[:, 6] - gt[:, 6]), 1.0, atol=1e-12)


def test_refine_empty_box_uses_zero_descriptor():
    cfg = SMALL
    params = init_params(cfg, 0)
    pts = np.random.default_rng(0).normal(size=(40, 3))
    empty = np.array([[100.0, 0.0, 100.0, 1.5, 1.6, 3.9, 0.0]])
    pidx, _, _ = pool_points(pts, empty, cfg.rcnn_points, cfg.pool_margin, np.random.default_rng(0))
    assert len(pidx) == 0
    out = refine(params, cfg, pts, Tensor(np.zeros((40, 1))), empty, np.random.default_rng(0))
    hid = np.maximum(params["rcnn.hid.b"].data, 0)
    expected = 1 / (1 + np.exp(-(hid @ params["rcnn.cls.w"].data + params["rcnn.cls.b"].data)))
    assert out.confidence.data[0] == pytest.approx(expected[0])
    assert 0 < out.confidence.data[0] < 1


def test_pool_points_respects_budget():
    pts = np.column_stack([np.linspace(-1, 1, 200), np.full(200, 0.5), np.zeros(200)])
    box = np.array([[0.0, 1.0, 0.0, 1.5, 1.6, 3.9, 0.0]])
    pidx, slots, local = pool_points(pts, box, 16, 0.0, np.random.default_rng(0))
    assert len(pidx) == 16 and slots.tolist() == list(range(16))
    assert local.shape == (16, 6)


def test_gradient_reaches_every_parameter_group(cache):
    params = init_params(SMALL, 0)
    res = compute_loss(params, SMALL, cache, LossMode.CE, np.random.default_rng(0))
    res.total.backward()
    norms = {}
    for k, p in params.items():
        g = 0.0 if p.grad is None else float(np.linalg.norm(p.grad))
        norms[param_group(k)] = norms.get(param_group(k), 0.0) + g
    assert set(norms) == {"image_stream", "point_stream", "fusion", "rpn_heads", "rcnn_heads"}
    assert all(v > 0 for v in norms.values()), norms
    for i in range(5):
        assert any(p.grad is not None and np.any(p.grad) for k, p in params.items() if k.startswith(f"fuse.{i}."))


def test_loss_modes_and_lambda_zero(cache):
    params = init_params(SMALL, 0)
    vals = {m: compute_loss(params, SMALL, cache, m, np.random.default_rng(0)).breakdown for m in LossMode}
    assert vals[LossMode.NONE].rpn["ce"] == 0.0
    assert vals[LossMode.CE].rpn["ce"] > vals[LossMode.IOU_ONLY].rpn["ce"] > 0
    cfg0 = replace(SMALL, loss=replace(SMALL.loss, lam=0.0))
    a = compute_loss(params, cfg0, cache, LossMode.CE, np.random.default_rng(0)).total.data
    b = compute_loss(params, cfg0, cache, LossMode.NONE, np.random.default_rng(0)).total.data
    assert a == b


def test_non_finite_loss_raises(cache):
    params = init_params(SMALL, 0)
    params["rpn.mlp.w"].data = params["rpn.mlp.w"].data * np.nan
    with pytest.raises(FloatingPointError):
        compute_loss(params, SMALL, cache, LossMode.CE, np.random.default_rng(0))


def test_detect_outputs(cache):
    params = init_params(SMALL, 0)
    out = detect(params, SMALL, cache)
    assert np.all((out.scores > 0) & (out.scores < 1))
    raw = detect(params, SMALL, cache, final_nms=False, max_candidates=12)
    assert len(raw.scores) == 12


def test_prepare_scene_rejects_mismatched_inputs(scene):
    with pytest.raises(ValueError):
        prepare_scene(scene, TwoStreamConfig())
    small = Scene(points=scene.points[:100], image=scene.image, proj=scene.proj, gt_boxes=[Box3D(0, 1, 10, 1, 1, 1)])
    with pytest.raises(ValueError):
        prepare_scene(small, SMALL)
