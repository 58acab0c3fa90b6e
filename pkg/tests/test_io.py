import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fullvel import sim
from fullvel.assoc import AssociationScoreMap
from fullvel.errors import BadMagic, DimensionMismatch, MalformedFile, TruncatedFile, ValidationError
from fullvel.frames import CameraIntrinsics, RigidTransform
from fullvel.io import (
    CLOUD_COLUMNS,
    SOLVE_COLUMNS,
    intrinsics_from_dict,
    intrinsics_to_dict,
    read_csv,
    read_flo,
    read_flow,
    read_scene_config,
    read_score_maps,
    read_sequence,
    read_solve_csv,
    read_tensor,
    scene_config_from_dict,
    scene_config_to_dict,
    transform_from_dict,
    transform_to_dict,
    write_csv,
    write_flo,
    write_flow,
    write_scene_config,
    write_score_maps,
    write_sequence,
    write_tensor,
)
from fullvel.solver import FlowField

from conftest import random_transform

seeds = st.integers(0, 2**32 - 1)


def _flow32(rng, h=7, w=5):
    vec = rng.normal(size=(h, w, 2)).astype(np.float32) * 20
    vec[0, 0] = np.nan
    return FlowField(vec)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_flo_round_trip_bit_exact(tmp_path_factory, seed):
    p = tmp_path_factory.mktemp("flo") / "f.flo"
    f = _flow32(np.random.default_rng(seed))
    write_flo(p, f)
    g = read_flo(p)
    assert g.vectors.tobytes() == f.vectors.astype(np.float32).tobytes()
    np.testing.assert_array_equal(g.valid, f.valid)
    q = p.with_name("g.flo")
    write_flo(q, g)
    assert q.read_bytes() == p.read_bytes()


def test_flo_layout(tmp_path):
    p = tmp_path / "f.flo"
    vec = np.arange(2 * 3 * 2, dtype=np.float32).reshape(2, 3, 2)
    write_flo(p, FlowField(vec))
    data = p.read_bytes()
    magic, w, h = struct.unpack("<fii", data[:12])
    assert (magic, w, h) == (202021.25, 3, 2)
    assert len(data) == 12 + 2 * 3 * 8
    np.testing.assert_array_equal(np.frombuffer(data[12:], "<f4"), vec.ravel())


def test_flo_errors(tmp_path):
    p = tmp_path / "bad.flo"
    p.write_bytes(struct.pack("<fii", 0.0, 2, 2) + b"\0" * 32)
    with pytest.raises(BadMagic):
        read_flo(p)
    p.write_bytes(struct.pack("<fii", 202021.25, 100, 100) + b"\0" * (50 * 100 * 8))
    with pytest.raises(TruncatedFile, match="50"):
        read_flo(p)
    p.write_bytes(struct.pack("<fii", 202021.25, 2, 2) + b"\0" * 40)
    with pytest.raises(DimensionMismatch):
        read_flo(p)
    p.write_bytes(struct.pack("<fii", 202021.25, 2, 2) + b"\0" * 32)
    with pytest.raises(DimensionMismatch):
        read_flo(p, expected_shape=(3, 2))
    p.write_bytes(b"\0\0")
    with pytest.raises(TruncatedFile):
        read_flo(p)


def test_npy_flow_round_trip(tmp_path, rng):
    vec = rng.normal(size=(6, 4, 2))
    vec[2, 3] = np.nan
    f = FlowField(vec)
    p = tmp_path / "f.npy"
    write_flow(p, f)
    g = read_flow(p, expected_shape=(6, 4))
    assert g.vectors.tobytes() == f.vectors.tobytes()
    with pytest.raises(DimensionMismatch):
        read_flow(p, expected_shape=(4, 6))
    write_tensor(p, np.zeros((3, 3)))
    with pytest.raises(DimensionMismatch):
        read_flow(p)


def test_tensor_round_trip(tmp_path, rng):
    for a in (rng.normal(size=(8, 5, 4)).astype(np.float32), np.arange(12).reshape(3, 4)):
        p = tmp_path / "t.npy"
        write_tensor(p, a)
        b = read_tensor(p)
        assert b.dtype == a.dtype and b.tobytes() == a.tobytes()
    (tmp_path / "junk.npy").write_bytes(b"not a tensor")
    with pytest.raises(MalformedFile):
        read_tensor(tmp_path / "junk.npy")


def test_score_maps_round_trip(tmp_path, rng):
    maps = [AssociationScoreMap(i, j, rng.uniform(0, 100, 2), rng.random(40)) for i in range(3) for j in range(2)]
    p = tmp_path / "m.txt"
    write_score_maps(p, maps)
    assert read_score_maps(p) == maps
    text = p.read_text()
    p.write_text("# header comment\n\n" + text)
    assert read_score_maps(p) == maps


def test_score_maps_errors(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("0,0,1.0,2.0,2,0.5,0.5,0.5\n")
    with pytest.raises(DimensionMismatch, match="record 0"):
        read_score_maps(p)
    p.write_text("0,0,1.0\n")
    with pytest.raises(TruncatedFile, match="line 1"):
        read_score_maps(p)
    p.write_text("0,0,1.0,2.0,1,1.5\n")
    with pytest.raises(MalformedFile):
        read_score_maps(p)
    p.write_text("0,x,1.0,2.0,1,0.5\n")
    with pytest.raises(MalformedFile):
        read_score_maps(p)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_json_transform_round_trip(seed):
    t = random_transform(np.random.default_rng(seed))
    assert transform_from_dict(json.loads(json.dumps(transform_to_dict(t)))) == t


def test_json_intrinsics_and_unknown_keys():
    k = CameraIntrinsics(401.5, 399.25, 320.125, 240.5, 640, 480)
    assert intrinsics_from_dict(json.loads(json.dumps(intrinsics_to_dict(k)))) == k
    d = intrinsics_to_dict(k)
    d["skew"] = 0.0
    with pytest.raises(ValidationError):
        intrinsics_from_dict(d)
    with pytest.raises(ValidationError):
        transform_from_dict({"rotation": np.eye(3).ravel().tolist(), "translation": [0, 0, 0], "scale": 1})


def test_scene_config_round_trip(tmp_path):
    cfg = sim.random_scene_config(5, noise=sim.NoiseSpec(doppler_sigma=0.1, flow_sigma=0.5),
                                  doppler_kind=sim.DopplerKind.RAW, see_through_prob=0.25)
    p = tmp_path / "c.json"
    write_scene_config(p, cfg)
    back = read_scene_config(p)
    assert scene_config_to_dict(back) == scene_config_to_dict(cfg)
    q = tmp_path / "d.json"
    write_scene_config(q, back)
    assert p.read_bytes() == q.read_bytes()
    for a, b in zip(sim.simulate(cfg)[1:], sim.simulate(back)[1:]):
        np.testing.assert_array_equal(a.flow.vectors, b.flow.vectors)


def test_scene_config_rejects_unknown_keys():
    d = scene_config_to_dict(sim.random_scene_config(1))
    d["colour"] = "red"
    with pytest.raises(ValidationError):
        scene_config_from_dict(d)


def _same_frames(a, b):
    assert len(a) == len(b)
    for fa, fb in zip(a, b):
        assert fa.index == fb.index and fa.timestamp == fb.timestamp
        assert fa.ego_pose == fb.ego_pose and fa.radar_extrinsics == fb.radar_extrinsics
        assert fa.intrinsics == fb.intrinsics
        np.testing.assert_array_equal(fa.radar_velocity, fb.radar_velocity)
        assert len(fa.returns) == len(fb.returns)
        for ra, rb in zip(fa.returns, fb.returns):
            np.testing.assert_array_equal(ra.position, rb.position)
            assert (ra.radial_speed, ra.doppler_kind, ra.gt_body_id, ra.gt_occluded) == \
                (rb.radial_speed, rb.doppler_kind, rb.gt_body_id, rb.gt_occluded)
            np.testing.assert_array_equal(ra.gt_velocity, rb.gt_velocity)
        for ba, bb in zip(fa.boxes, fb.boxes):
            for name in ("center", "half_extents", "rotation", "velocity"):
                np.testing.assert_array_equal(getattr(ba, name), getattr(bb, name))
            assert (ba.moving, ba.body_id) == (bb.moving, bb.body_id)


def test_sequence_round_trip(tmp_path):
    frames = sim.simulate(sim.random_scene_config(9, frame_count=3, doppler_kind=sim.DopplerKind.RAW,
                                                  see_through_prob=0.5))
    p = write_sequence(tmp_path / "seq.json", frames)
    back = read_sequence(p)
    _same_frames(frames, back)
    assert back[0].flow is None
    for a, b in zip(frames[1:], back[1:]):
        assert a.flow.vectors.tobytes() == b.flow.vectors.tobytes()
    (tmp_path / "again").mkdir()
    q = write_sequence(tmp_path / "again" / "seq.json", back)
    assert q.read_bytes() == p.read_bytes()
    assert sorted(x.name for x in (tmp_path / "seq_flow").iterdir()) == ["frame_0001.npy", "frame_0002.npy"]


def test_sequence_flo_is_float32(tmp_path):
    frames = sim.simulate(sim.random_scene_config(9))
    p = write_sequence(tmp_path / "s.json", frames, flow_format="flo")
    back = read_sequence(p)
    np.testing.assert_allclose(back[1].flow.vectors, frames[1].flow.vectors, atol=1e-3)
    assert back[1].flow.vectors.dtype == np.float32
    with pytest.raises(ValidationError):
        write_sequence(tmp_path / "x.json", frames, flow_format="png")


def test_sequence_errors(tmp_path):
    frames = sim.simulate(sim.random_scene_config(2, frame_count=3))
    p = write_sequence(tmp_path / "s.json", frames)
    missing = tmp_path / "s_flow" / "frame_0002.npy"
    missing.unlink()
    with pytest.raises(FileNotFoundError) as info:
        read_sequence(p)
    assert str(missing) in str(info.value)
    doc = json.loads(p.read_text())
    doc["frames"][2]["flow"] = None
    doc["frames"][1]["timestamp"] = doc["frames"][0]["timestamp"]
    p.write_text(json.dumps(doc))
    with pytest.raises(MalformedFile, match="frame 1"):
        read_sequence(p)
    doc["frames"][1]["timestamp"] = 1.0
    doc["frames"][1]["extra"] = 1
    p.write_text(json.dumps(doc))
    with pytest.raises(MalformedFile):
        read_sequence(p)


def test_csv_round_trip(tmp_path):
    rows = [(1, 0, 0.1, -2.5e-17, 3.0, 12.5, 9.75, "ok", "raw"),
            (1, 1, float("nan"), float("nan"), float("nan"), float("inf"), float("nan"), "occluded", "oracle")]
    p = tmp_path / "s.csv"
    write_csv(p, SOLVE_COLUMNS, rows)
    back = read_solve_csv(p)
    np.testing.assert_array_equal(back[0]["velocity"], [0.1, -2.5e-17, 3.0])
    assert back[1]["status"] == "occluded" and np.isnan(back[1]["velocity"]).all()
    assert back[1]["condition"] == float("inf")
    q = tmp_path / "t.csv"
    write_csv(q, SOLVE_COLUMNS, [tuple(r.values()) for r in read_csv(p, SOLVE_COLUMNS)])
    assert q.read_bytes() == p.read_bytes()
    with pytest.raises(MalformedFile):
        read_csv(p, CLOUD_COLUMNS)
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(MalformedFile):
        read_csv(tmp_path / "e.csv")
    (tmp_path / "r.csv").write_text("x,y,z,source_frame,flag\n1,2,3\n")
    with pytest.raises(MalformedFile, match="line 2"):
        read_csv(tmp_path / "r.csv", CLOUD_COLUMNS)


def test_identity_transform_dict():
    d = transform_to_dict(RigidTransform.identity())
    assert d == {"rotation": [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], "translation": [0.0, 0.0, 0.0]}
