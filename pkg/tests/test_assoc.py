import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fullvel import sim
from fullvel.assoc import (
    INPUT_CHANNELS,
    AssociationParams,
    AssociationScoreMap,
    GtBox,
    NeighborhoodSpec,
    association_label,
    export_training_sample,
    generate_labels,
    hypothetical_velocities,
    load_predicted_associations,
    match_points_to_boxes,
    select_association,
    training_tensors,
    velocity_error,
)
from fullvel.errors import AllNeighborsInvalid, MalformedFile, ValidationError
from fullvel.frames import CameraIntrinsics, RigidTransform
from fullvel.io import read_tensor, write_score_maps
from fullvel.pipeline import raw_projections
from fullvel.solver import EgoState, FlowField, RadarReturn, SolveStatus, solve_full_velocity

SPEC = NeighborhoodSpec()
PARAMS = AssociationParams()
K = CameraIntrinsics(1000.0, 1000.0, 500.0, 500.0, 1000, 1000)
STILL = EgoState(RigidTransform.identity(), np.zeros(3), 0.1)


# -- neighbourhood -----------------------------------------------------------------

def test_default_neighborhood_has_40_positions():
    assert SPEC.size == 40
    off = SPEC.offsets
    assert off.shape == (40, 2)
    assert len({tuple(o) for o in off}) == 40
    assert SPEC.index_of(0, 0) >= 0
    # row-major from the top-left
    np.testing.assert_array_equal(off[0], [-4, -10])
    np.testing.assert_array_equal(off[1], [-2, -10])
    np.testing.assert_array_equal(off[-1], [4, 4])
    assert off[:, 0].min() == -4 and off[:, 1].min() == -10


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 9), st.integers(0, 9), st.integers(0, 9), st.integers(0, 9), st.integers(1, 4))
def test_neighborhood_size_formula(left, right, top, bottom, stride):
    spec = NeighborhoodSpec(left, right, top, bottom, stride)
    n = (left // stride + right // stride + 1) * (top // stride + bottom // stride + 1)
    assert spec.size == n == spec.offsets.shape[0]
    assert len({tuple(o) for o in spec.offsets}) == n
    assert (spec.offsets == 0).all(axis=1).any()


def test_neighborhood_validation():
    with pytest.raises(ValidationError):
        NeighborhoodSpec(stride=0)
    with pytest.raises(ValidationError):
        NeighborhoodSpec(left=-1)
    with pytest.raises(KeyError):
        SPEC.index_of(1, 1)


def test_params_validation():
    assert (PARAMS.t_d, PARAMS.t_p, PARAMS.c, PARAMS.t_a) == (0.5, 0.2, 0.36, 0.3)
    for bad in ({"t_d": 0}, {"t_p": 1.0}, {"t_p": 0}, {"c": 0}, {"t_a": 1.5}):
        with pytest.raises(ValidationError):
            AssociationParams(**bad)


# -- box matching --------------------------------------------------------------------

def test_match_examples():
    box = GtBox.from_yaw([0, 0, 10], [1, 1, 1], 0.0, [0, 0, 2])
    inside = RadarReturn([0, 0, 9.5], 2.0)
    assert match_points_to_boxes([inside], [box]) == [0]
    far = RadarReturn([0, 0, 8.4], 2.0)  # 0.6 m in front of the face
    assert match_points_to_boxes([far], [box]) == [None]
    wrong_speed = RadarReturn([0, 0, 8.8], 2.6)  # 0.2 m away, 30 % too fast
    assert match_points_to_boxes([wrong_speed], [box]) == [None]
    assert match_points_to_boxes([], [box]) == []
    assert match_points_to_boxes([inside], []) == [None]


def test_match_nearest_box_wins_and_raw_doppler():
    near = GtBox.from_yaw([0, 0, 10], [1, 1, 1], 0.0, [0, 0, 2], body_id=3)
    also = GtBox.from_yaw([0, 0, 8.7], [0.2, 0.2, 0.2], 0.0, [0, 0, 2], body_id=4)
    r = RadarReturn([0, 0, 9.2], 2.0)
    assert match_points_to_boxes([r], [also, near]) == [1]
    raw = RadarReturn([0, 0, 9.5], 1.0, doppler_kind=sim.DopplerKind.RAW)
    with pytest.raises(ValidationError):
        match_points_to_boxes([raw], [near])
    assert match_points_to_boxes([raw], [near], radar_velocity=[0, 0, 1.0]) == [0]


def test_box_distance_and_rotation():
    box = GtBox.from_yaw([0, 0, 0], [2, 1, 1], math.pi / 2, [1, 0, 0])
    assert box.yaw == pytest.approx(math.pi / 2)
    # yawed by 90 degrees the long axis lies along z
    assert box.distance([0, 0, 1.9]) == 0.0
    assert box.distance([1.5, 0, 0]) == pytest.approx(0.5)
    assert box.moving
    assert not GtBox.from_yaw([0, 0, 0], [1, 1, 1], 0.0, [0, 0, 0]).moving
    with pytest.raises(ValidationError):
        GtBox.from_yaw([0, 0, 0], [0, 1, 1], 0.0, [0, 0, 0])


# -- errors and labels --------------------------------------------------------------

def test_velocity_error_examples():
    assert velocity_error([1, 2, 3], [1, 2, 3]) == 0
    assert velocity_error([1, 0, 0], [0, 0, 0]) == 1
    assert velocity_error([3, 4, 0], [0, 0, 0]) == 5


def test_association_label_examples():
    assert association_label(0.0, 0.36) == 1.0
    assert association_label(0.6, 0.36) == pytest.approx(math.exp(-1), abs=1e-7)
    assert association_label(0.3, 0.36) > association_label(0.6, 0.36) > association_label(1.2, 0.36)
    assert association_label(math.sqrt(3 * 0.36) + 1e-9, 0.36) < 0.05


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 50), st.floats(1e-3, 10))
def test_label_bounds(e, c):
    v = association_label(e, c)
    assert 0 <= v <= 1
    assert (v == 1) == (e == 0) or e * e / c < 1e-15


# -- hypotheses ------------------------------------------------------------------------

def test_zero_offset_hypothesis_equals_plain_solve(backend):
    r = RadarReturn([2, 0, 10], 2 / math.sqrt(104))
    flow = FlowField.constant(1000, 1000, [-10, 0])
    h = hypothetical_velocities(r, flow, K, STILL, RigidTransform.identity())
    plain = solve_full_velocity(r, flow, K, STILL, RigidTransform.identity())
    np.testing.assert_array_equal(h.velocity[SPEC.index_of(0, 0)], plain.velocity)
    assert h.valid.all()


def test_boundary_neighbors_invalid():
    # raw projection at x = 2: offsets -4 fall off the image
    r = RadarReturn([-4.98, 0, 10], 0.0)
    h = hypothetical_velocities(r, FlowField.zeros(1000, 1000), K, STILL, RigidTransform.identity(),
                                raw_projection=[2.0, 500.0])
    left = SPEC.offsets[:, 0] == -4
    assert (h.status[left] == SolveStatus.OUT_OF_BOUNDS).all()
    assert h.valid[~left].all()


def test_all_neighbors_invalid():
    r = RadarReturn([0, 0, 10], 0.0)
    with pytest.raises(AllNeighborsInvalid):
        hypothetical_velocities(r, FlowField(np.full((1000, 1000, 2), np.nan)), K, STILL, RigidTransform.identity())


def _scene_frame(seed, **kw):
    cfg = sim.random_scene_config(seed, **kw)
    f = sim.simulate_frame(cfg, 1)
    return f, sim.ego_state_for(cfg, cfg.time(1), cfg.time(0))


def test_true_pixel_hypothesis_is_gt():
    n = 0
    for seed in range(20):
        f, ego = _scene_frame(seed)
        for j, r in enumerate(f.returns):
            if r.gt_velocity is None or r.gt_occluded:
                continue
            h = hypothetical_velocities(r, f.flow, f.intrinsics, ego, f.radar_extrinsics)
            k0 = SPEC.index_of(0, 0)
            gt = f.radar_extrinsics.rotation @ r.gt_velocity
            if h.valid[k0]:
                np.testing.assert_allclose(h.velocity[k0], gt, atol=1e-9)
                n += 1
    assert n > 20


def test_labels_oracle_optimality():
    rng = np.random.default_rng(0)
    checked = 0
    for seed in range(40):
        f, ego = _scene_frame(seed, points_per_body=8)
        if not f.returns:
            continue
        true = raw_projections(f)
        ks = rng.integers(0, SPEC.size, len(f.returns))
        maps = generate_labels(list(f.returns), f.flow, f.intrinsics, ego, f.radar_extrinsics, list(f.boxes),
                               PARAMS, SPEC, 1, true - SPEC.offsets[ks])
        for m in maps:
            s = m.scores
            assert ((0 <= s) & (s <= 1)).all()
            k = ks[m.point_index]
            assert s[k] == pytest.approx(1.0, abs=1e-12)
            assert np.delete(s, k).max() < s[k]
            checked += 1
    assert checked > 50


def test_unmatched_points_get_no_map():
    f, ego = _scene_frame(3)
    maps = generate_labels(list(f.returns), f.flow, f.intrinsics, ego, f.radar_extrinsics, [], PARAMS, SPEC)
    assert maps == []


# -- selection --------------------------------------------------------------------------

def _map(scores):
    return AssociationScoreMap(0, 0, [100.0, 200.0], scores)


def test_select_examples():
    assert select_association(_map(np.zeros(40)), 0.3) is None
    s = np.full(40, 0.1)
    s[7] = 0.9
    np.testing.assert_array_equal(select_association(_map(s), 0.3), [100, 200] + SPEC.offsets[7])
    s = np.zeros(40)
    s[3] = s[12] = 0.8
    np.testing.assert_array_equal(select_association(_map(s), 0.3), [100, 200] + SPEC.offsets[3])
    with pytest.raises(ValidationError):
        select_association(_map(np.zeros(10)), 0.3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=40, max_size=40))
def test_select_threshold_extremes(scores):
    assert select_association(_map(scores), 0.0) is not None
    assert select_association(_map(scores), 1.0 + 1e-9) is None


def test_score_map_validation_and_equality():
    with pytest.raises(ValidationError):
        _map([0.5, 1.5])
    with pytest.raises(ValidationError):
        AssociationScoreMap(0, 0, [1.0], [0.5])
    assert _map([0.5, 0.25]) == _map([0.5, 0.25])
    assert _map([0.5, 0.25]) != _map([0.5, 0.3])


# -- training tensors and files ----------------------------------------------------------

def test_training_tensors_empty_frame():
    x, y = training_tensors([], FlowField.zeros(1000, 1000), K, RigidTransform.identity(), [])
    assert x.shape == (8, 1000, 1000) and y.shape == (40, 1000, 1000)
    assert not x[3].any() and not y.any()
    assert len(INPUT_CHANNELS) == 8


def test_training_tensors_single_point():
    k = CameraIntrinsics(10.0, 10.0, 5.0, 5.0, 12, 10)
    flow = FlowField.constant(12, 10, [1.5, -2.0])
    r = RadarReturn([0.4 * 12.5, 0.0, 12.5], 0.0)  # pixel (9, 5)
    lab = AssociationScoreMap(0, 0, [9, 5], np.linspace(0, 1, 40))
    x, y = training_tensors([r], flow, k, RigidTransform.identity(), [lab])
    assert np.count_nonzero(x[3]) == 1 and x[3, 5, 9] == 12.5
    assert (x[4] == 1.5).all() and (x[5] == -2.0).all()
    assert not x[:3].any() and not x[6:].any()
    np.testing.assert_array_equal(y[:, 5, 9], np.linspace(0, 1, 40).astype(np.float32))
    assert np.count_nonzero(y.any(axis=0)) == 1


def test_training_tensors_nearer_point_wins():
    k = CameraIntrinsics(10.0, 10.0, 5.0, 5.0, 12, 10)
    pts = [RadarReturn([0, 0, 20.0], 0.0), RadarReturn([0, 0, 8.0], 0.0)]
    x, _ = training_tensors(pts, None, k, RigidTransform.identity(), [])
    assert x[3, 5, 5] == 8.0


def test_export_round_trip(tmp_path):
    f, ego = _scene_frame(1)
    labels = generate_labels(list(f.returns), f.flow, f.intrinsics, ego, f.radar_extrinsics, list(f.boxes))
    xp, yp = export_training_sample(tmp_path / "s", list(f.returns), f.flow, f.intrinsics, f.radar_extrinsics,
                                    labels)
    x, y = training_tensors(list(f.returns), f.flow, f.intrinsics, f.radar_extrinsics, labels)
    assert np.array_equal(read_tensor(xp), x) and np.array_equal(read_tensor(yp), y)


def test_predicted_associations_round_trip(tmp_path):
    f, ego = _scene_frame(2)
    labels = generate_labels(list(f.returns), f.flow, f.intrinsics, ego, f.radar_extrinsics, list(f.boxes),
                             frame=1)
    p = tmp_path / "maps.txt"
    write_score_maps(p, labels)
    assert load_predicted_associations(p) == labels
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert load_predicted_associations(empty) == []


def test_truncated_record_names_index(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("0,0,1.0,2.0,3,0.1,0.2,0.3\n0,1,1.0,2.0,3,0.1\n")
    with pytest.raises(MalformedFile, match="record 1"):
        load_predicted_associations(p)
