import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointfuse.geometry import iou_bev_matrix, points_in_box, project_points
from pointfuse.synth import SceneGenerationError, SyntheticSceneConfig, generate_synthetic_scene, make_dataset, projection_matrix

CFG = SyntheticSceneConfig(n_distractors=(1, 2))


def test_deterministic_in_seed():
    a, b = generate_synthetic_scene(CFG, 11), generate_synthetic_scene(CFG, 11)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.gt_boxes == b.gt_boxes
    c = generate_synthetic_scene(CFG, 12)
    assert not np.array_equal(a.points, c.points)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scene_invariants(seed):
    s = generate_synthetic_scene(CFG, seed)
    assert s.points.shape == (CFG.n_points, 3)
    assert s.image.shape == (3, *CFG.image_size)
    assert CFG.n_targets[0] <= len(s.gt_boxes) <= CFG.n_targets[1]
    boxes = np.vstack([s.gt_array, s.meta["distractors"]])
    overlap = iou_bev_matrix(boxes, boxes)
    np.fill_diagonal(overlap, 0)
    assert np.all(overlap == 0)
    for b in s.gt_boxes:
        assert np.count_nonzero(points_in_box(s.points, b)) >= CFG.min_points_per_object
    # every distractor has the size of some target
    for d in s.meta["distractors"]:
        assert any(np.array_equal(d[3:6], g[3:6]) for g in s.gt_array)


def test_all_points_project_into_the_image():
    s = generate_synthetic_scene(CFG, 1)
    uv, valid = project_points(s.points, projection_matrix(CFG))
    h, w = CFG.image_size
    assert valid.all()
    assert np.all((uv[:, 0] >= -0.5) & (uv[:, 0] < w - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] < h - 0.5))


def test_colours_separate_targets_from_distractors():
    s = generate_synthetic_scene(CFG, 2)
    uv, _ = project_points(s.points, s.proj)
    px = np.clip(np.rint(uv).astype(int), 0, np.array(CFG.image_size)[::-1] - 1)
    red = s.image[0, px[:, 1], px[:, 0]]
    on_target = np.any([points_in_box(s.points, b) for b in s.gt_boxes], axis=0)
    on_distractor = np.any([points_in_box(s.points, b) for b in s.meta["distractors"]], axis=0)
    assert red[on_target].mean() > 0.6 > red[on_distractor].mean()


def test_dataset_seeds_are_independent_streams():
    a = make_dataset(CFG, 3, seed=0)
    b = make_dataset(CFG, 4, seed=0)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.points, y.points)
    assert make_dataset(CFG, 0) == []


def test_overfull_scene_is_rejected():
    with pytest.raises(SceneGenerationError):
        generate_synthetic_scene(SyntheticSceneConfig(n_points=100, n_targets=(3, 3)), 0)
