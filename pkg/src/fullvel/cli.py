"""``fullvel`` command line.

Subcommands: simulate, solve, labels, accumulate, eval, export-tensors.
Settings come from flags, then an optional JSON ``--config`` file, then the
built-in defaults. The worker count is read from ``FULLVEL_WORKERS``
(default: available CPUs).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .accum import CompensationMode, accumulate, accumulation_error
from .assoc import AssociationParams, NeighborhoodSpec, training_tensors
from .errors import FullVelError, ValidationError
from .metrics import COMPONENTS, binned_heatmap, object_velocity, point_error_stats
from .pipeline import collect_samples, frame_labels, solve_frames, solve_rows
from .sim import simulate
from .solver import SolveStatus

WORKERS_ENV = "FULLVEL_WORKERS"


@dataclass(frozen=True)
class RunConfig:
    seed: int | None = None
    assoc: str = "raw"
    mode: str = "full"
    horizon: int = 25
    flow_format: str = "npy"
    association: AssociationParams = field(default_factory=AssociationParams)
    neighborhood: NeighborhoodSpec = field(default_factory=NeighborhoodSpec)
    workers: int = 1

    def __post_init__(self):
        if self.assoc not in ("raw", "oracle") and not self.assoc.startswith("file:"):
            raise ValidationError(f"--assoc must be raw, oracle or file:PATH, got {self.assoc!r}")
        if self.assoc.startswith("file:") and not self.assoc[5:]:
            raise ValidationError("--assoc file: needs a path")
        CompensationMode(self.mode)
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if self.flow_format not in ("npy", "flo"):
            raise ValidationError("flow_format must be npy or flo")
        if self.seed is not None and not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if self.workers < 1:
            raise ValidationError("worker count must be >= 1")

    @property
    def assoc_mode(self) -> str:
        return "file" if self.assoc.startswith("file:") else self.assoc

    @property
    def assoc_path(self) -> str | None:
        return self.assoc[5:] if self.assoc.startswith("file:") else None


_SCALARS = ("seed", "assoc", "mode", "horizon", "flow_format")
_ASSOC_KEYS = tuple(f.name for f in dataclasses.fields(AssociationParams))
_NEIGHBOR_KEYS = tuple(f.name for f in dataclasses.fields(NeighborhoodSpec))


def _workers_from_env() -> int:
    text = os.environ.get(WORKERS_ENV)
    if text is None or text == "":
        return os.cpu_count() or 1
    try:
        return int(text)
    except ValueError:
        raise ValidationError(f"{WORKERS_ENV} must be an integer, got {text!r}") from None


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge flags over the ``--config`` file over defaults; unknown keys are errors."""
    values: dict = {}
    assoc_vals: dict = {}
    neigh_vals: dict = {}
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ValidationError("run config must be a JSON object")
        unknown = set(doc) - set(_SCALARS) - {"association", "neighborhood"}
        if unknown:
            raise ValidationError(f"unknown run config keys: {sorted(unknown)}")
        for k in _SCALARS:
            if k in doc:
                values[k] = doc[k]
        for key, allowed, dest in (("association", _ASSOC_KEYS, assoc_vals),
                                   ("neighborhood", _NEIGHBOR_KEYS, neigh_vals)):
            sub = doc.get(key, {})
            if not isinstance(sub, dict) or set(sub) - set(allowed):
                raise ValidationError(f"unknown {key} keys: {sorted(set(sub) - set(allowed))}")
            dest.update(sub)
    for k in _SCALARS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    for k in _ASSOC_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            assoc_vals[k] = v
    for k in _NEIGHBOR_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            neigh_vals[k] = v
    return RunConfig(association=AssociationParams(**assoc_vals), neighborhood=NeighborhoodSpec(**neigh_vals),
                     workers=_workers_from_env(), **values)


# -- commands -----------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig) -> int:
    scene = io.read_scene_config(args.scene)
    if cfg.seed is not None:
        scene = dataclasses.replace(scene, seed=cfg.seed)
    frames = simulate(scene)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_sequence(out / "sequence.json", frames, cfg.flow_format)
    print(f"wrote {len(frames)} frames to {out / 'sequence.json'}", file=sys.stderr)
    return 0


def _score_map_index(path):
    return {(m.frame, m.point_index): m for m in io.read_score_maps(path)}


def _solve_all(frames, cfg: RunConfig, indices=None):
    maps = _score_map_index(cfg.assoc_path) if cfg.assoc_mode == "file" else None
    return solve_frames(frames, cfg.assoc_mode, maps, cfg.association.t_a, cfg.neighborhood,
                        cfg.workers, indices)


def cmd_solve(args, cfg: RunConfig) -> int:
    frames = io.read_sequence(args.sequence)
    solves = _solve_all(frames, cfg)
    io.write_csv(args.out, io.SOLVE_COLUMNS, solve_rows(solves))
    n_ok = sum(int(s.ok.sum()) for s in solves)
    n = sum(len(s) for s in solves)
    print(f"solved {n_ok}/{n} returns", file=sys.stderr)
    return 0


def cmd_labels(args, cfg: RunConfig) -> int:
    frames = io.read_sequence(args.sequence)
    maps = frame_labels(frames, cfg.association, cfg.neighborhood, cfg.workers)
    io.write_score_maps(args.out, maps)
    print(f"wrote {len(maps)} score maps", file=sys.stderr)
    return 0


def cmd_accumulate(args, cfg: RunConfig) -> int:
    frames = io.read_sequence(args.sequence)
    if args.frame is not None:
        indices = [f.index for f in frames]
        if args.frame not in indices:
            raise ValidationError(f"no frame with index {args.frame}")
        frames = frames[:indices.index(args.frame) + 1]
    horizon = cfg.horizon
    if horizon > len(frames):
        raise ValidationError(f"horizon {horizon} exceeds the {len(frames)} available frames")
    mode = CompensationMode(cfg.mode)
    velocities = None
    if mode is CompensationMode.FULL:
        first = len(frames) - horizon
        solves = _solve_all(frames, cfg, range(first, len(frames)))
        velocities = [None] * first + [s.radar_velocity(frames[first + i].radar_extrinsics)
                                       for i, s in enumerate(solves)]
    cloud = accumulate(frames, horizon, mode, velocities)
    rows = [(*cloud.positions[j], int(cloud.source_frame[j]), int(cloud.flags[j])) for j in range(len(cloud))]
    io.write_csv(args.out, io.CLOUD_COLUMNS, rows)
    if len(cloud) and np.all(cloud.body_id >= 0):
        try:
            err = accumulation_error(cloud, frames[-1].boxes)
            print(f"accumulation_error {err!r}")
        except FullVelError as exc:
            print(f"accumulation error unavailable: {exc}", file=sys.stderr)
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    frames = io.read_sequence(args.sequence, load_flow=False)
    by_index = {f.index: f for f in frames}
    estimates: dict = {}
    for path in args.solve:
        for row in io.read_solve_csv(path):
            f = by_index.get(row["frame"])
            if f is None or not 0 <= row["point_id"] < len(f.returns):
                raise ValidationError(f"{path}: row refers to unknown return {row['frame']}/{row['point_id']}")
            method = row["assoc_mode"]
            per = estimates.setdefault(method, {})
            arr = per.setdefault(row["frame"], np.full((len(f.returns), 3), np.nan))
            if row["status"] == SolveStatus.OK.label:
                arr[row["point_id"]] = row["velocity"]
    samples = collect_samples(frames, estimates)
    stats = point_error_stats(samples)
    rows = [(m, c, s[c].mean, s[c].std, s[c].count) for m, s in stats.items() for c in COMPONENTS]
    io.write_csv(args.out, ("method", "component", "mean", "std", "count"), rows)
    if args.heatmap:
        grids = binned_heatmap(samples)
        hrows = []
        for m, per in grids.items():
            for c in COMPONENTS:
                g = per[c]
                for i in range(g.depth_edges.size - 1):
                    for j in range(g.alpha_edges.size - 1):
                        s = g.cell(i, j)
                        hrows.append((m, c, g.depth_edges[i], g.depth_edges[i + 1], g.alpha_edges[j],
                                      g.alpha_edges[j + 1], s.mean, s.std, s.count))
        io.write_csv(args.heatmap, ("method", "component", "depth_lo", "depth_hi", "alpha_lo", "alpha_hi",
                                    "mean", "std", "count"), hrows)
    if args.objects:
        orows = []
        for m, per in estimates.items():
            for fi in sorted(per):
                f = by_index[fi]
                ok = np.all(np.isfinite(per[fi]), axis=1)
                ids = [r.gt_body_id if ok[j] else None for j, r in enumerate(f.returns)]
                for body, v in object_velocity(np.nan_to_num(per[fi]), ids).items():
                    box = f.box_for(body)
                    gt = (np.full(3, np.nan) if box is None else f.radar_extrinsics.rotation @ box.velocity)
                    orows.append((m, fi, body, *v, *gt, sum(1 for x in ids if x == body)))
        io.write_csv(args.objects, ("method", "frame", "body_id", "vx", "vy", "vz", "gt_vx", "gt_vy", "gt_vz",
                                    "count"), orows)
    for m, s in stats.items():
        print(f"{m}: " + "  ".join(f"{c} {s[c].mean:.6g} ({s[c].std:.6g})" for c in COMPONENTS)
              + f"  n={s['full'].count}")
    return 0


def cmd_export_tensors(args, cfg: RunConfig) -> int:
    frames = io.read_sequence(args.sequence)
    if args.scores:
        maps = io.read_score_maps(args.scores)
    else:
        maps = frame_labels(frames, cfg.association, cfg.neighborhood, cfg.workers)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for f in frames:
        if f.flow is None:
            continue
        labels = [m for m in maps if m.frame == f.index]
        x, y = training_tensors(list(f.returns), f.flow, f.intrinsics, f.radar_extrinsics, labels,
                                cfg.neighborhood)
        io.write_tensor(out / f"frame_{f.index:04d}_input.npy", x)
        io.write_tensor(out / f"frame_{f.index:04d}_labels.npy", y)
        n += 1
    print(f"wrote {n} tensor pairs to {out}", file=sys.stderr)
    return 0


# -- parser -------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (flags override it)")
    p.add_argument("--seed", type=int, default=None)


def _assoc_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--assoc", default=None, help="raw | oracle | file:PATH (default raw)")
    g = p.add_argument_group("association parameters")
    for k in _ASSOC_KEYS:
        g.add_argument(f"--{k.replace('_', '-')}", dest=k, type=float, default=None)
    g = p.add_argument_group("neighbourhood")
    for k in _NEIGHBOR_KEYS:
        g.add_argument(f"--{k}", dest=k, type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fullvel", description="Full radar velocity from Doppler and optical flow.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic scene sequence")
    p.add_argument("scene", help="scene config JSON")
    p.add_argument("out_dir")
    p.add_argument("--flow-format", dest="flow_format", choices=("npy", "flo"), default=None)
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("solve", help="per-return full velocity CSV")
    p.add_argument("sequence")
    p.add_argument("--out", "-o", required=True)
    _common(p)
    _assoc_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("labels", help="association score maps from GT boxes")
    p.add_argument("sequence")
    p.add_argument("--out", "-o", required=True)
    _common(p)
    _assoc_flags(p)
    p.set_defaults(func=cmd_labels)

    p = sub.add_parser("accumulate", help="motion-compensated multi-frame cloud CSV")
    p.add_argument("sequence")
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--mode", choices=[m.value for m in CompensationMode], default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--frame", type=int, default=None, help="current frame index (default: last)")
    _common(p)
    _assoc_flags(p)
    p.set_defaults(func=cmd_accumulate)

    p = sub.add_parser("eval", help="error statistics of solve CSVs against GT")
    p.add_argument("sequence")
    p.add_argument("--solve", action="append", required=True, help="solve CSV (repeatable)")
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--heatmap", default=None, help="optional depth x alpha CSV")
    p.add_argument("--objects", default=None, help="optional per-object velocity CSV")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-tensors", help="8-channel input and N-channel label rasters")
    p.add_argument("sequence")
    p.add_argument("out_dir")
    p.add_argument("--scores", default=None, help="score map file (default: generate from GT)")
    _common(p)
    _assoc_flags(p)
    p.set_defaults(func=cmd_export_tensors)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_run_config(args)
        return args.func(args, cfg)
    except (FullVelError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"fullvel {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
