"""File formats: flow rasters, tensors, score maps, scene configs, sequences and CSVs.

Every writer has a reader that returns bit-identical data. Floats in text
formats are written with ``repr`` so they survive the round trip exactly.

Scene sequence
    A JSON document ``{"version": 1, "frames": [...]}``. Each frame holds its
    timestamp, the world-to-camera ``ego_pose``, ``radar_extrinsics``
    (radar-to-camera), ``intrinsics``, the radar's own velocity in the camera
    frame, the radar returns, the GT boxes in the radar frame and the path of
    its flow file relative to the JSON file (``null`` on the first frame).
    Rotations are 9 floats in row-major order.

Score maps
    One record per line: ``frame,point_index,raw_x,raw_y,n,s_1,...,s_n``.
    Blank lines and lines starting with ``#`` are ignored.

Tensors
    Standard ``.npy`` files (``numpy.save`` without pickling).
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .assoc import AssociationScoreMap, GtBox
from .errors import BadMagic, DimensionMismatch, MalformedFile, TruncatedFile, ValidationError
from .frames import CameraIntrinsics, RigidTransform
from .solver import DopplerKind, FlowField, RadarReturn

FLO_MAGIC = 202021.25
_FLO_HEADER = np.dtype([("magic", "<f4"), ("width", "<i4"), ("height", "<i4")])


# -- flow ---------------------------------------------------------------------

def write_flo(path, flow: FlowField) -> None:
    """Middlebury ``.flo``: magic, int32 width, int32 height, float32 (u, v) pairs.

    Values are stored as float32; invalid pixels are NaN.
    """
    header = np.array([(FLO_MAGIC, flow.width, flow.height)], dtype=_FLO_HEADER)
    body = np.ascontiguousarray(flow.vectors, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(body.tobytes())


def read_flo(path, expected_shape: tuple[int, int] | None = None) -> FlowField:
    """Read a ``.flo`` file; ``expected_shape`` is ``(height, width)`` if given."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFile(path, "byte 0", "file shorter than the magic number")
    magic = np.frombuffer(data[:4], dtype="<f4")[0]
    if magic != np.float32(FLO_MAGIC):
        raise BadMagic(path, "byte 0", f"magic {float(magic)!r} != {FLO_MAGIC}")
    if len(data) < _FLO_HEADER.itemsize:
        raise TruncatedFile(path, "byte 4", "header ends before width/height")
    hdr = np.frombuffer(data[:_FLO_HEADER.itemsize], dtype=_FLO_HEADER)[0]
    w, h = int(hdr["width"]), int(hdr["height"])
    if w < 1 or h < 1:
        raise DimensionMismatch(path, "byte 4", f"invalid size {w}x{h}")
    if expected_shape is not None and (h, w) != tuple(expected_shape):
        raise DimensionMismatch(path, "byte 4",
                                f"size {w}x{h} does not match expected {expected_shape[1]}x{expected_shape[0]}")
    need = _FLO_HEADER.itemsize + 8 * w * h
    if len(data) < need:
        rows = (len(data) - _FLO_HEADER.itemsize) // (8 * w)
        raise TruncatedFile(path, f"byte {len(data)}", f"header claims {h} rows but body holds {rows}")
    if len(data) > need:
        raise DimensionMismatch(path, f"byte {need}", f"{len(data) - need} trailing bytes after {w}x{h} body")
    vec = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=_FLO_HEADER.itemsize)
    return FlowField(vec.reshape(h, w, 2).astype(np.float32))


def write_flow_npy(path, flow: FlowField) -> None:
    """Lossless flow: ``(H, W, 2)`` array in its native dtype."""
    np.save(path, np.asarray(flow.vectors), allow_pickle=False)


def read_flow_npy(path, expected_shape: tuple[int, int] | None = None) -> FlowField:
    arr = read_tensor(path)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise DimensionMismatch(path, "header", f"flow array has shape {arr.shape}, expected (H, W, 2)")
    if expected_shape is not None and arr.shape[:2] != tuple(expected_shape):
        raise DimensionMismatch(path, "header", f"flow size {arr.shape[:2]} does not match {tuple(expected_shape)}")
    return FlowField(arr)


def write_flow(path, flow: FlowField) -> None:
    """Dispatch on suffix: ``.flo`` or ``.npy``."""
    if Path(path).suffix == ".flo":
        write_flo(path, flow)
    else:
        write_flow_npy(path, flow)


def read_flow(path, expected_shape=None) -> FlowField:
    if Path(path).suffix == ".flo":
        return read_flo(path, expected_shape)
    return read_flow_npy(path, expected_shape)


# -- tensors ------------------------------------------------------------------

def write_tensor(path, array) -> None:
    np.save(path, np.asarray(array), allow_pickle=False)


def read_tensor(path) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except (ValueError, EOFError) as exc:
        raise MalformedFile(path, "header", str(exc)) from exc


# -- score maps ---------------------------------------------------------------

def format_score_map(m: AssociationScoreMap) -> str:
    fields = [str(m.frame), str(m.point_index), repr(float(m.raw_projection[0])),
              repr(float(m.raw_projection[1])), str(m.scores.shape[0])]
    fields += [repr(float(s)) for s in m.scores]
    return ",".join(fields)


def write_score_maps(path, maps) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in maps:
            fh.write(format_score_map(m) + "\n")


def read_score_maps(path) -> list[AssociationScoreMap]:
    out = []
    record = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            where = f"record {record} (line {lineno})"
            parts = line.split(",")
            if len(parts) < 5:
                raise TruncatedFile(path, where, f"expected at least 5 fields, got {len(parts)}")
            try:
                frame, idx, n = int(parts[0]), int(parts[1]), int(parts[4])
                raw = (float(parts[2]), float(parts[3]))
                scores = [float(s) for s in parts[5:]]
            except ValueError as exc:
                raise MalformedFile(path, where, str(exc)) from exc
            if len(scores) < n:
                raise TruncatedFile(path, where, f"declares {n} scores but holds {len(scores)}")
            if len(scores) > n:
                raise DimensionMismatch(path, where, f"declares {n} scores but holds {len(scores)}")
            try:
                out.append(AssociationScoreMap(frame, idx, raw, scores))
            except ValidationError as exc:
                raise MalformedFile(path, where, str(exc)) from exc
            record += 1
    return out


# -- JSON helpers -------------------------------------------------------------

def _floats(a) -> list[float]:
    return [float(x) for x in np.asarray(a, dtype=np.float64).ravel()]


def transform_to_dict(t: RigidTransform) -> dict:
    return {"rotation": _floats(t.rotation), "translation": _floats(t.translation)}


def transform_from_dict(d: dict) -> RigidTransform:
    _check_keys(d, {"rotation", "translation"}, "transform")
    return RigidTransform(np.reshape(np.array(d["rotation"], dtype=np.float64), (3, 3)),
                          np.array(d["translation"], dtype=np.float64))


def intrinsics_to_dict(k: CameraIntrinsics) -> dict:
    return {"fx": float(k.fx), "fy": float(k.fy), "cx": float(k.cx), "cy": float(k.cy),
            "width": int(k.width), "height": int(k.height)}


def intrinsics_from_dict(d: dict) -> CameraIntrinsics:
    _check_keys(d, {"fx", "fy", "cx", "cy", "width", "height"}, "intrinsics")
    return CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                            int(d["width"]), int(d["height"]))


def _check_keys(d, allowed, what, required=None):
    if not isinstance(d, dict):
        raise ValidationError(f"{what} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ValidationError(f"unknown {what} keys: {sorted(unknown)}")
    missing = set(allowed if required is None else required) - set(d)
    if missing:
        raise ValidationError(f"missing {what} keys: {sorted(missing)}")


def _dump_json(path, obj) -> None:
    text = json.dumps(obj, indent=1, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _load_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedFile(path, f"line {exc.lineno} column {exc.colno}", exc.msg) from exc


# -- scene configs ------------------------------------------------------------

_NOISE_KEYS = {"doppler_sigma", "range_sigma", "azimuth_sigma", "elevation_sigma", "flow_sigma",
               "dropout_prob"}
_CONFIG_KEYS = {"seed", "doppler_kind", "see_through_prob", "ground_y", "intrinsics",
                "radar_extrinsics", "ego", "timing", "noise", "bodies"}


def scene_config_to_dict(cfg) -> dict:
    import dataclasses

    return {
        "seed": int(cfg.seed),
        "doppler_kind": cfg.doppler_kind.value,
        "see_through_prob": float(cfg.see_through_prob),
        "ground_y": None if cfg.ground_y is None else float(cfg.ground_y),
        "intrinsics": intrinsics_to_dict(cfg.sensors.intrinsics),
        "radar_extrinsics": transform_to_dict(cfg.sensors.radar_extrinsics),
        "ego": {"initial_pose": transform_to_dict(cfg.ego.initial_pose),
                "velocity": _floats(cfg.ego.velocity), "yaw_rate": float(cfg.ego.yaw_rate)},
        "timing": {"frame_period": float(cfg.timing.frame_period),
                   "frame_count": int(cfg.timing.frame_count),
                   "start_time": float(cfg.timing.start_time)},
        "noise": {k: float(v) for k, v in dataclasses.asdict(cfg.noise).items()},
        "bodies": [{"center": _floats(b.center), "half_extents": _floats(b.half_extents),
                    "velocity": _floats(b.velocity), "yaw": float(b.yaw),
                    "surface_points": int(b.surface_points)} for b in cfg.bodies],
    }


def scene_config_from_dict(d: dict):
    """Build a ``SceneConfig``; unknown keys anywhere are rejected."""
    from .sim import BodyConfig, EgoConfig, NoiseSpec, SceneConfig, SensorConfig, TimingConfig

    _check_keys(d, _CONFIG_KEYS, "scene config", required={"intrinsics", "bodies", "timing"})
    ego = d.get("ego", {})
    _check_keys(ego, {"initial_pose", "velocity", "yaw_rate"}, "ego", required=set())
    timing = d["timing"]
    _check_keys(timing, {"frame_period", "frame_count", "start_time"}, "timing",
                required={"frame_period", "frame_count"})
    noise = d.get("noise", {})
    _check_keys(noise, _NOISE_KEYS, "noise", required=set())
    bodies = []
    for i, b in enumerate(d["bodies"]):
        _check_keys(b, {"center", "half_extents", "velocity", "yaw", "surface_points"}, f"bodies[{i}]",
                    required={"center", "half_extents", "velocity"})
        bodies.append(BodyConfig(b["center"], b["half_extents"], b["velocity"], float(b.get("yaw", 0.0)),
                                 int(b.get("surface_points", 10))))
    radar = d.get("radar_extrinsics")
    return SceneConfig(
        bodies=bodies,
        sensors=SensorConfig(intrinsics_from_dict(d["intrinsics"]),
                             RigidTransform.identity() if radar is None else transform_from_dict(radar)),
        ego=EgoConfig(transform_from_dict(ego["initial_pose"]) if "initial_pose" in ego
                      else RigidTransform.identity(),
                      ego.get("velocity", [0.0, 0.0, 0.0]), float(ego.get("yaw_rate", 0.0))),
        timing=TimingConfig(float(timing["frame_period"]), int(timing["frame_count"]),
                            float(timing.get("start_time", 0.0))),
        noise=NoiseSpec(**{k: float(v) for k, v in noise.items()}),
        seed=int(d.get("seed", 0)),
        doppler_kind=DopplerKind(d.get("doppler_kind", DopplerKind.EGO_COMPENSATED.value)),
        see_through_prob=float(d.get("see_through_prob", 0.0)),
        ground_y=None if d.get("ground_y") is None else float(d["ground_y"]),
    )


def write_scene_config(path, cfg) -> None:
    _dump_json(path, scene_config_to_dict(cfg))


def read_scene_config(path):
    return scene_config_from_dict(_load_json(path))


# -- scene sequences ----------------------------------------------------------

def _return_to_dict(r: RadarReturn) -> dict:
    x, y, z = _floats(r.position)
    return {"x": x, "y": y, "z": z, "radial_speed": float(r.radial_speed),
            "doppler_kind": r.doppler_kind.value,
            "gt_body_id": r.gt_body_id,
            "gt_velocity": None if r.gt_velocity is None else _floats(r.gt_velocity),
            "gt_occluded": bool(r.gt_occluded)}


def _return_from_dict(d: dict, t: float) -> RadarReturn:
    _check_keys(d, {"x", "y", "z", "radial_speed", "doppler_kind", "gt_body_id", "gt_velocity",
                    "gt_occluded"}, "return", required={"x", "y", "z", "radial_speed"})
    gid = d.get("gt_body_id")
    return RadarReturn([d["x"], d["y"], d["z"]], d["radial_speed"],
                       DopplerKind(d.get("doppler_kind", DopplerKind.EGO_COMPENSATED.value)), t,
                       None if gid is None else int(gid), d.get("gt_velocity"),
                       bool(d.get("gt_occluded", False)))


def _box_to_dict(b: GtBox) -> dict:
    return {"body_id": b.body_id, "center": _floats(b.center), "half_extents": _floats(b.half_extents),
            "rotation": _floats(b.rotation), "velocity": _floats(b.velocity), "moving": bool(b.moving)}


def _box_from_dict(d: dict) -> GtBox:
    _check_keys(d, {"body_id", "center", "half_extents", "rotation", "velocity", "moving"}, "box",
                required={"center", "half_extents", "rotation", "velocity"})
    v = np.array(d["velocity"], dtype=np.float64)
    gid = d.get("body_id")
    return GtBox(d["center"], d["half_extents"], np.reshape(np.array(d["rotation"], dtype=np.float64), (3, 3)),
                 v, bool(d.get("moving", np.linalg.norm(v) > 0)), None if gid is None else int(gid))


def write_sequence(path, frames, flow_format: str = "npy") -> Path:
    """Write ``frames`` as a JSON sequence plus one flow file per frame with flow.

    Flow files go to ``<stem>_flow/frame_NNNN.<flow_format>`` next to ``path``;
    ``npy`` keeps float64 flow exact, ``flo`` stores float32.
    """
    if flow_format not in ("npy", "flo"):
        raise ValidationError(f"unknown flow format {flow_format!r}")
    path = Path(path)
    flow_dir = path.with_name(path.stem + "_flow")
    records = []
    for f in frames:
        flow_rel = None
        if f.flow is not None:
            flow_dir.mkdir(parents=True, exist_ok=True)
            fp = flow_dir / f"frame_{f.index:04d}.{flow_format}"
            write_flow(fp, f.flow)
            flow_rel = fp.relative_to(path.parent).as_posix()
        records.append({
            "index": int(f.index),
            "timestamp": float(f.timestamp),
            "ego_pose": transform_to_dict(f.ego_pose),
            "radar_extrinsics": transform_to_dict(f.radar_extrinsics),
            "intrinsics": intrinsics_to_dict(f.intrinsics),
            "radar_velocity": _floats(f.radar_velocity),
            "flow": flow_rel,
            "returns": [_return_to_dict(r) for r in f.returns],
            "boxes": [_box_to_dict(b) for b in f.boxes],
        })
    _dump_json(path, {"version": 1, "frames": records})
    return path


_FRAME_KEYS = {"index", "timestamp", "ego_pose", "radar_extrinsics", "intrinsics", "radar_velocity",
               "flow", "returns", "boxes"}


def read_sequence(path, load_flow: bool = True) -> list:
    """Read a sequence written by :func:`write_sequence`.

    Timestamps must increase strictly and every referenced flow file must
    exist; a missing one raises ``FileNotFoundError`` naming its path.
    """
    from .sim import SceneFrame

    path = Path(path)
    doc = _load_json(path)
    if not isinstance(doc, dict) or "frames" not in doc:
        raise MalformedFile(path, "root", "missing 'frames'")
    frames = []
    prev_t = -math.inf
    for i, rec in enumerate(doc["frames"]):
        where = f"frame {i}"
        try:
            _check_keys(rec, _FRAME_KEYS, "frame", required=_FRAME_KEYS - {"index", "radar_velocity"})
            t = float(rec["timestamp"])
            if not t > prev_t:
                raise ValidationError(f"timestamp {t!r} does not increase")
            prev_t = t
            k = intrinsics_from_dict(rec["intrinsics"])
            flow = None
            if rec["flow"] is not None:
                fp = path.parent / rec["flow"]
                if not fp.is_file():
                    raise FileNotFoundError(2, "flow file not found", str(fp))
                if load_flow:
                    flow = read_flow(fp, (k.height, k.width))
            frames.append(SceneFrame(
                int(rec.get("index", i)), t, transform_from_dict(rec["ego_pose"]),
                transform_from_dict(rec["radar_extrinsics"]), k,
                rec.get("radar_velocity", [0.0, 0.0, 0.0]),
                [_return_from_dict(r, t) for r in rec["returns"]],
                [_box_from_dict(b) for b in rec["boxes"]], flow))
        except (ValidationError, KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, MalformedFile):
                raise
            raise MalformedFile(path, where, str(exc)) from exc
    return frames


# -- CSV ----------------------------------------------------------------------

SOLVE_COLUMNS = ("frame", "point_id", "vx", "vy", "vz", "condition", "d_p", "status", "assoc_mode")
CLOUD_COLUMNS = ("x", "y", "z", "source_frame", "flag")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path_or_file, columns, rows) -> None:
    """Write ``rows`` (sequences aligned with ``columns``); floats use ``repr``."""
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="", encoding="utf-8") as fh:
            emit(fh)


def read_csv(path, columns=None) -> list[dict]:
    """Rows as dicts of strings; checks the header when ``columns`` is given."""
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        try:
            header = next(r)
        except StopIteration:
            raise MalformedFile(path, "line 1", "empty CSV (no header)") from None
        if columns is not None and tuple(header) != tuple(columns):
            raise MalformedFile(path, "line 1", f"header {header} != {list(columns)}")
        rows = []
        for lineno, row in enumerate(r, start=2):
            if len(row) != len(header):
                raise MalformedFile(path, f"line {lineno}", f"expected {len(header)} fields, got {len(row)}")
            rows.append(dict(zip(header, row)))
    return rows


def read_solve_csv(path) -> list[dict]:
    """Typed rows of a solve CSV."""
    out = []
    for row in read_csv(path, SOLVE_COLUMNS):
        out.append({"frame": int(row["frame"]), "point_id": int(row["point_id"]),
                    "velocity": np.array([float(row["vx"]), float(row["vy"]), float(row["vz"])]),
                    "condition": float(row["condition"]), "d_p": float(row["d_p"]),
                    "status": row["status"], "assoc_mode": row["assoc_mode"]})
    return out
