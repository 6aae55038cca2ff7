import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canonica.fields import ModelConfig, SceneModel
from canonica.scenedata import SynthConfig, VideoClip, synth_generate
from canonica.tracking import (
    DEPTH_COLUMNS, TRACKING_COLUMNS, TrackSet, aggregate_accuracy, align_scale_shift,
    depth_metrics, inside_image, pivot_table, read_csv, run_ablation, track_from_mask,
    tracking_accuracy, write_depth_csv, write_pivot_csv, write_tracking_csv,
)
from canonica.training import TrainConfig

from conftest import SMALL_ARCH


@pytest.fixture(scope="module")
def clip():
    return synth_generate(SynthConfig())


def hand_clip():
    # 2 frames of 4x4; frame 1 mask covers (1, 1) and (2, 2)
    mask1 = np.zeros((4, 4), bool)
    mask1[1, 1] = mask1[2, 2] = True
    return VideoClip(frames=np.zeros((2, 4, 4, 3)), masks={"a": {0: mask1.copy(), 1: mask1}})


def hand_tracks():
    # A, B in mask, C out of mask, D out of image
    pos = np.array([[[0, 0]] * 4,
                    [[1.2, 0.9], [2.4, 1.6], [3.0, 0.0], [-0.7, 2.0]]], dtype=float)
    return TrackSet.from_positions(0, pos, 4, 4)


def test_hand_case_two_thirds():
    rep = tracking_accuracy(hand_tracks(), hand_clip(), "a")
    assert rep.per_frame == {1: pytest.approx(2 / 3)}
    assert rep.mean == pytest.approx(2 / 3)


def test_all_predictions_outside_image():
    pos = np.full((2, 3, 2), 50.0)
    with pytest.raises(ValueError, match="no evaluable predictions"):
        tracking_accuracy(TrackSet.from_positions(0, pos, 4, 4), hand_clip(), "a")


def test_frames_without_mask_are_discarded():
    c = hand_clip()
    del c.masks["a"][1]
    with pytest.raises(ValueError):
        tracking_accuracy(hand_tracks(), c, "a")


def test_inside_image_uses_rounding_rectangle():
    pos = np.array([[-0.5, 0], [-0.51, 0], [3.49, 3.49], [3.5, 0]])
    assert inside_image(pos, 4, 4).tolist() == [True, False, True, False]


def test_perfect_tracker_scores_100(clip):
    positions, _ = clip.gt_tracks
    m0 = clip.mask("instrument", 0)
    tracks = TrackSet.from_positions(0, positions[:, m0], clip.height, clip.width)
    rep = tracking_accuracy(tracks, clip, "instrument")
    assert len(rep.per_frame) == clip.n_frames - 1
    assert all(v == 1.0 for v in rep.per_frame.values())


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_accuracy_permutation_invariant_and_monotone_under_erosion(seed):
    rng = np.random.default_rng(seed)
    T, K, H, W = 3, 25, 8, 8
    pos = rng.uniform(-1, 8, (T, K, 2))
    masks = {t: rng.random((H, W)) < 0.5 for t in range(T)}
    c = VideoClip(frames=np.zeros((T, H, W, 3)), masks={"a": masks})
    tracks = TrackSet.from_positions(0, pos, H, W)
    try:
        base = tracking_accuracy(tracks, c, "a")
    except ValueError:
        return
    perm = rng.permutation(K)
    shuffled = TrackSet.from_positions(0, pos[:, perm], H, W)
    assert tracking_accuracy(shuffled, c, "a").per_frame == base.per_frame
    eroded = {t: m & (rng.random((H, W)) < 0.7) for t, m in masks.items()}
    er = tracking_accuracy(tracks, VideoClip(frames=c.frames, masks={"a": eroded}), "a")
    for j, v in er.per_frame.items():
        assert v <= base.per_frame[j]


def test_aggregate_across_videos():
    assert aggregate_accuracy([0.8, 1.0]) == pytest.approx((0.9, 0.1))
    assert aggregate_accuracy([0.7]) == (0.7, 0.0)


# --- depth --------------------------------------------------------------

def test_align_examples():
    gt = np.array([10.0, 12.0, 14.0])
    assert align_scale_shift(np.array([1.0, 2.0, 3.0]), gt) == pytest.approx((2.0, 8.0))
    g = np.random.default_rng(0).uniform(1, 5, (6, 7))
    assert align_scale_shift((g - 5) / 2, g) == pytest.approx((2.0, 5.0))
    assert align_scale_shift(g, g) == pytest.approx((1.0, 0.0))


def test_align_residual_orthogonal():
    rng = np.random.default_rng(4)
    pred, gt = rng.uniform(0.5, 2, 200), rng.uniform(1, 3, 200)
    s, t = align_scale_shift(pred, gt)
    r = s * pred + t - gt
    assert abs(r @ pred) < 1e-9 and abs(r.sum()) < 1e-9


def test_align_constant_prediction_errors():
    with pytest.raises(ValueError, match="singular"):
        align_scale_shift(np.full(5, 3.0), np.arange(1.0, 6.0))
    with pytest.raises(ValueError):
        align_scale_shift(np.array([1.0]), np.array([2.0]))


def test_depth_metric_examples():
    gt = np.random.default_rng(1).uniform(1, 5, (5, 5))
    for pred in (gt, 2 * gt + 1):
        r = depth_metrics(pred, gt)
        assert r.mae == pytest.approx(0, abs=1e-12) and r.absrel == pytest.approx(0, abs=1e-10)
        assert r.delta == 100.0
    # errors 1 and 4 against gt 10: mean 2.5, relative 0.1 and 0.4, ratios 1.1 and 1.4
    hand = depth_metrics(np.array([11.0, 14.0]), np.array([10.0, 10.0]), align=False)
    assert (hand.mae, hand.absrel, hand.delta) == (2.5, 25.0, 50.0)


def test_depth_metrics_affine_invariance():
    rng = np.random.default_rng(2)
    gt = rng.uniform(1, 3, (16, 16))
    pred = gt + rng.normal(0, 0.3, gt.shape)
    base = depth_metrics(pred, gt)
    for _ in range(20):
        a, b = rng.uniform(0.01, 100), rng.uniform(-50, 50)
        r = depth_metrics(a * pred + b, gt)
        assert abs(r.mae - base.mae) < 1e-9
        assert abs(r.absrel - base.absrel) < 1e-9
        assert r.delta == base.delta


def test_depth_metrics_reject_non_positive_gt():
    with pytest.raises(ValueError, match="strictly positive"):
        depth_metrics(np.array([1.0, 2.0, 3.0]), np.array([1.0, 0.0, 2.0]))
    # excluded pixels do not count
    r = depth_metrics(np.array([1.0, 2.0, 3.0]), np.array([1.0, 0.0, 3.0]),
                      valid=np.array([True, False, True]))
    assert r.mae == pytest.approx(0, abs=1e-12)


def test_depth_report_ranges():
    rng = np.random.default_rng(3)
    for _ in range(20):
        r = depth_metrics(rng.uniform(0.1, 3, 50), rng.uniform(0.1, 3, 50))
        assert r.mae >= 0 and r.absrel >= 0 and 0 <= r.delta <= 100


# --- tracks from a model -------------------------------------------------

def test_identity_model_gives_constant_tracks(clip):
    model = SceneModel(ModelConfig(n_frames=clip.n_frames, height=32, width=32, **SMALL_ARCH))
    tracks = track_from_mask(model, clip, "instrument", 0, n_samples=8)
    assert len(tracks) == clip.mask("instrument", 0).sum()
    assert np.allclose(tracks.positions, tracks.sources[None], atol=1e-9)
    assert tracks.points.shape == (clip.n_frames, len(tracks), 3)
    assert tracks.in_bounds.all()


def test_empty_mask_gives_empty_trackset(clip):
    c = VideoClip(frames=clip.frames, masks={"none": {0: np.zeros((32, 32), bool)}})
    model = SceneModel(ModelConfig(n_frames=clip.n_frames, height=32, width=32, **SMALL_ARCH))
    tracks = track_from_mask(model, c, "none")
    assert len(tracks) == 0 and tracks.positions.shape == (clip.n_frames, 0, 2)


def test_missing_start_mask(clip):
    model = SceneModel(ModelConfig(n_frames=clip.n_frames, height=32, width=32, **SMALL_ARCH))
    with pytest.raises(KeyError, match="instrument"):
        track_from_mask(model, clip, "liver")


# --- ablation tables -----------------------------------------------------

TINY = TrainConfig(iterations=2, batch_correspondences=16, n_samples=4, log_every=0)


def test_ablation_single_cell(clip):
    rows = run_ablation(clip, TINY, labels=["instrument"], arch=SMALL_ARCH)
    assert len(rows) == 1
    assert rows[0]["w_class"] == 1.0 and rows[0]["fraction"] == 1.0
    assert 0 <= rows[0]["mean_acc"] <= 100
    columns, table = pivot_table(rows)
    assert columns == [1.0] and list(table) == ["instrument"]


def test_ablation_w_class_columns(clip, tmp_path):
    rows = run_ablation(clip, TINY, w_class_values=(1, 5, 10, 20), arch=SMALL_ARCH)
    assert {r["label"] for r in rows} == {"tissue", "instrument"}
    columns, table = pivot_table(rows)
    assert columns == [1, 5, 10, 20]
    write_pivot_csv(rows, tmp_path / "pivot.csv")
    with open(tmp_path / "pivot.csv", newline="") as fh:
        lines = list(csv.reader(fh))
    assert lines[0] == ["label", "w_class=1", "w_class=5", "w_class=10", "w_class=20"]
    assert len(lines) == 3
    write_tracking_csv(rows, tmp_path / "t.csv")
    back = read_csv(tmp_path / "t.csv")
    assert tuple(back[0]) == TRACKING_COLUMNS and len(back) == 8


def test_depth_csv_columns(tmp_path):
    gt = np.random.default_rng(0).uniform(1, 2, (4, 4))
    reports = [depth_metrics(gt * 2, gt), depth_metrics(gt + 1, gt)]
    write_depth_csv("v", reports, tmp_path / "d.csv")
    back = read_csv(tmp_path / "d.csv")
    assert tuple(back[0]) == DEPTH_COLUMNS
    assert [r["frame"] for r in back] == ["0", "1"]
    assert float(back[0]["s"]) == pytest.approx(0.5)
