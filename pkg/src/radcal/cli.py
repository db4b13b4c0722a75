"""Command-line entry point: ``radcal {density,splat,refine,sweep,gradcheck}``.

Every command accepts ``--config`` pointing at one JSON file with optional
sections ``density``, ``grid``, ``scene``, ``sweep``, ``descent`` and
``loss_weights`` plus a top-level ``seed``; keys mirror the dataclass
fields and anything omitted keeps its default.
Angles on the command line are in degrees.
"""

from __future__ import annotations

import argparse
from dataclasses import fields, replace
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import formats
from .harness import (
    AXES,
    DescentOptions,
    SceneSpec,
    SweepConfig,
    SWEEP_HEADER,
    evaluate,
    generate_scene,
    inject_miscalibration,
    refine_scene,
    run_sweep,
    summary_table,
    sweep_json,
    sweep_rows,
)
from .objectives import LossWeights
from .projection import embed_feature, embed_features, lift_detections, project_batch, splat_image_plane
from .radar_density import DensityParams, GridSpec, build_density, fit_intensity_stats, group_frames

log = logging.getLogger("radcal")

_TUPLE_FIELDS = {"blur_schedule", "reflector_log_power", "clutter_log_power", "mount_translation", "axes", "magnitudes", "seeds", "box"}


def _build(cls, section: dict | None, **extra):
    section = dict(section or {})
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise SystemExit(f"unknown {cls.__name__} keys in config: {sorted(unknown)}")
    for k, v in section.items():
        if k in _TUPLE_FIELDS and isinstance(v, list):
            section[k] = tuple(v)
    section.update(extra)
    return cls(**section)


class Config:
    """Parsed JSON config with dataclass defaults for missing sections."""

    def __init__(self, data: dict | None = None):
        self.data = data or {}
        known = {"density", "scene", "sweep", "descent", "loss_weights", "grid", "seed"}
        unknown = set(self.data) - known
        if unknown:
            raise SystemExit(f"unknown config sections: {sorted(unknown)}")

    @classmethod
    def load(cls, path) -> "Config":
        return cls(json.loads(Path(path).read_text())) if path else cls()

    def density(self) -> DensityParams:
        return _build(DensityParams, self.data.get("density"))

    def grid(self) -> GridSpec:
        g = dict(self.data.get("grid", {}))
        for k in ("az_min", "az_max"):
            if k + "_deg" in g:
                g[k] = math.radians(g.pop(k + "_deg"))
        return _build(GridSpec, g)

    def scene(self) -> SceneSpec:
        return _build(SceneSpec, self.data.get("scene"))

    def descent(self) -> DescentOptions:
        return _build(DescentOptions, self.data.get("descent"))

    def loss_weights(self) -> LossWeights:
        return _build(LossWeights, self.data.get("loss_weights"))

    def sweep(self) -> SweepConfig:
        return _build(SweepConfig, self.data.get("sweep"), scene=self.scene(), descent=self.descent())


def _scene(args, cfg: Config):
    if args.scene:
        return formats.load_scene(args.scene)
    seed = args.seed if args.seed is not None else int(cfg.data.get("seed", 0))
    return generate_scene(cfg.scene(), seed)


def cmd_density(args, cfg: Config) -> int:
    dets = formats.read_detections(args.input)
    params = cfg.density()
    if "mu_s" not in cfg.data.get("density", {}) and dets:
        mu, sd = fit_intensity_stats(dets)
        params = replace(params, mu_s=mu, sigma_s=sd)
    frames = group_frames(dets)
    spec = cfg.grid()
    D, F = build_density(frames, spec, params)
    formats.write_float_grid(args.out, formats.FloatGrid.from_density(D.values, spec))
    if args.pgm:
        formats.write_pgm(args.pgm, D.values)
    print(f"{len(dets)} detections in {len(frames)} frames -> {spec.n_range}x{spec.n_azimuth} map, max persistence {int(F.counts.max()) if F.counts.size else 0}")
    return 0


def cmd_splat(args, cfg: Config) -> int:
    scene = _scene(args, cfg)
    T = formats.read_transform(args.transform) if args.transform else scene.T_true
    dets = scene.window_detections()
    pts = lift_detections(dets, scene.spec.h0)
    feats = embed_features(dets, lambda d: embed_feature(d, scene.density))
    K = scene.map_spec.K
    u, v, _, vis = project_batch(pts, K, T, scene.map_spec.z_min)
    smap = splat_image_plane(u, v, vis, feats, K.width, K.height)
    formats.write_float_grid(args.out, formats.FloatGrid(smap.values))
    if args.pgm:
        formats.write_pgm(args.pgm, smap.mass)
    print(f"splatted {int(vis.sum())}/{len(pts)} visible detections onto {K.width}x{K.height}x{smap.values.shape[0]}")
    return 0


def _parse_delta(args) -> np.ndarray:
    xi = np.zeros(6)
    for item in args.perturb or []:
        axis, _, val = item.partition("=")
        if axis not in AXES or not val:
            raise SystemExit(f"--perturb expects AXIS=VALUE with AXIS in {AXES}, got {item!r}")
        i = AXES.index(axis)
        xi[i] = math.radians(float(val)) if axis.startswith("r") else float(val)
    return xi


def cmd_refine(args, cfg: Config) -> int:
    scene = _scene(args, cfg)
    T_p = formats.read_transform(args.init) if args.init else inject_miscalibration(scene.T_true, _parse_delta(args))
    res = refine_scene(scene, T_p, cfg.descent(), gating=not args.no_gating)
    ev = evaluate(res.T, scene.T_true, T_p)
    out_text = formats.format_transform(res.T, quaternion=True)
    if args.out:
        Path(args.out).write_text(out_text)
    else:
        sys.stdout.write(out_text)
    if args.trace:
        Path(args.trace).write_text(json.dumps({"trace": [[s, float(f)] for s, f in res.trace], "iterations": res.iterations, "converged": res.converged, "message": res.message, "metrics": ev}, indent=1))
    print(
        f"rotation {ev['rot_before_deg']:.4f} -> {ev['rot_after_deg']:.4f} deg, "
        f"translation {100 * ev['trans_before_m']:.2f} -> {100 * ev['trans_after_m']:.2f} cm, "
        f"{res.iterations} iterations{'' if res.converged else ' (not converged)'}",
        file=sys.stderr,
    )
    return 0


def cmd_sweep(args, cfg: Config) -> int:
    sc = cfg.sweep()
    if args.seed is not None:
        sc = replace(sc, seeds=tuple(range(args.seed, args.seed + len(sc.seeds))))
    results = run_sweep(sc, workers=args.workers)
    formats.write_rows_csv(args.csv, SWEEP_HEADER, sweep_rows(results))
    if args.json:
        Path(args.json).write_text(json.dumps(sweep_json(results), indent=1))
    print("objective: NCC surrogate against a rendered occupancy raster")
    print(summary_table(results))
    return 0


def cmd_gradcheck(args, cfg: Config) -> int:
    from .gradcheck import crossmodal_gradient_suite, splat_gradient_suite

    seed = args.seed if args.seed is not None else 0
    reports = [splat_gradient_suite(args.scenes, seed), crossmodal_gradient_suite(seed=seed)]
    for r in reports:
        print(r.line())
    ok = reports[0].max_rel_err < 1e-4 and reports[1].max_rel_err < 1e-3
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="radcal", description="Radar-camera extrinsic refinement tools.")
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--seed", type=int, help="scene / sweep seed override")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("density", help="radar detections -> range-azimuth density map")
    p.add_argument("input", help=".jsonl or .csv detections")
    p.add_argument("--out", required=True, help="float-grid output")
    p.add_argument("--pgm", help="optional PGM preview")
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("splat", help="scene + transform -> image-plane feature map")
    p.add_argument("--scene", help="scene JSON (default: generate from --seed)")
    p.add_argument("--transform", help="transform text file (default: the scene's true extrinsic)")
    p.add_argument("--out", required=True)
    p.add_argument("--pgm")
    p.set_defaults(func=cmd_splat)

    p = sub.add_parser("refine", help="scene + perturbation -> refined transform and trace")
    p.add_argument("--scene")
    p.add_argument("--init", help="initial transform file; overrides --perturb")
    p.add_argument("--perturb", action="append", metavar="AXIS=VALUE", help="e.g. ry=5 (degrees) or tx=0.2 (meters); repeatable")
    p.add_argument("--no-gating", action="store_true", help="disable Doppler gating of the detection weights")
    p.add_argument("--out", help="refined transform (default: stdout)")
    p.add_argument("--trace", help="JSON file for the loss trace and metrics")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("sweep", help="axis-wise injection sweep -> CSV/JSON report")
    p.add_argument("--csv", required=True)
    p.add_argument("--json")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--scenes", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = Config.load(args.config)
        return args.func(args, cfg)
    except (OSError, ValueError) as exc:
        print(f"radcal {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
