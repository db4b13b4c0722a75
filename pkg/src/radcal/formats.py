"""File formats: radar detections, float grids, transforms and scenes.

Float-grid container: one ASCII header line

    n_rows n_cols r_max az_min_deg az_max_deg [channels]

followed by row-major little-endian float32 values (channel-major when
``channels`` is present). Range-azimuth maps fill the geometry fields; image
plane maps write zeros there.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import ExtrinsicTransform, matrix_to_quat, se3_from_quat_trans
from .radar_density import DensityParams, GridSpec, RadarDetection

DETECTION_FIELDS = ("frame", "r", "theta_deg", "v", "s")


# -- radar detections ----------------------------------------------------------------


def _detection_from_record(rec: dict) -> RadarDetection:
    missing = [k for k in DETECTION_FIELDS if k not in rec]
    if missing:
        raise ValueError(f"detection record is missing {missing}")
    return RadarDetection(
        r=float(rec["r"]),
        theta=math.radians(float(rec["theta_deg"])),
        v=float(rec["v"]),
        s=float(rec["s"]),
        frame=int(rec["frame"]),
    )


def _detection_record(d: RadarDetection) -> dict:
    return {"frame": d.frame, "r": d.r, "theta_deg": math.degrees(d.theta), "v": d.v, "s": d.s}


def read_detections(path) -> list[RadarDetection]:
    """Read detections from ``.jsonl`` (one object per line) or ``.csv``."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or set(DETECTION_FIELDS) - set(reader.fieldnames):
                raise ValueError(f"CSV header must contain {','.join(DETECTION_FIELDS)}")
            return [_detection_from_record(row) for row in reader]
    out = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(_detection_from_record(json.loads(line)))
            except (json.JSONDecodeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_detections(path, dets: Iterable[RadarDetection]) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=DETECTION_FIELDS)
            w.writeheader()
            for d in dets:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in _detection_record(d).items()})
        return
    with path.open("w") as fh:
        for d in dets:
            fh.write(json.dumps(_detection_record(d)) + "\n")


# -- float grids ---------------------------------------------------------------------


@dataclass
class FloatGrid:
    values: np.ndarray  # (rows, cols) or (channels, rows, cols)
    r_max: float = 0.0
    az_min_deg: float = 0.0
    az_max_deg: float = 0.0

    @classmethod
    def from_density(cls, values: np.ndarray, spec: GridSpec) -> "FloatGrid":
        return cls(np.asarray(values), spec.r_max, math.degrees(spec.az_min), math.degrees(spec.az_max))

    def grid_spec(self) -> GridSpec:
        rows, cols = self.values.shape[-2:]
        return GridSpec(rows, cols, self.r_max, math.radians(self.az_min_deg), math.radians(self.az_max_deg))


def write_float_grid(path, grid: FloatGrid) -> None:
    v = np.asarray(grid.values)
    if v.ndim not in (2, 3):
        raise ValueError("float grid must be 2-D or 3-D")
    rows, cols = v.shape[-2:]
    fields = [str(rows), str(cols), repr(float(grid.r_max)), repr(float(grid.az_min_deg)), repr(float(grid.az_max_deg))]
    if v.ndim == 3:
        fields.append(str(v.shape[0]))
    with open(path, "wb") as fh:
        fh.write((" ".join(fields) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_float_grid(path) -> FloatGrid:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        payload = fh.read()
    if len(header) not in (5, 6):
        raise ValueError(f"bad float-grid header: {header!r}")
    rows, cols = int(header[0]), int(header[1])
    shape = (rows, cols) if len(header) == 5 else (int(header[5]), rows, cols)
    data = np.frombuffer(payload, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"expected {int(np.prod(shape))} floats, found {data.size}")
    return FloatGrid(data.reshape(shape).astype(np.float64), float(header[2]), float(header[3]), float(header[4]))


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM preview scaled from the map's min..max."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 2:
        raise ValueError("PGM preview needs a 2-D map")
    lo, hi = float(v.min()), float(v.max())
    img = np.zeros(v.shape, dtype=np.uint8) if hi <= lo else np.round(255 * (v - lo) / (hi - lo)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


# -- transforms ----------------------------------------------------------------------


def format_transform(T: ExtrinsicTransform, quaternion: bool = False) -> str:
    """Four rows of the homogeneous matrix, optionally followed by ``qw qx qy qz tx ty tz``."""
    rows = [" ".join(repr(float(x)) for x in row) for row in T.as_matrix()]
    if quaternion:
        q = matrix_to_quat(T.rotation)
        rows.append(" ".join(repr(float(x)) for x in np.r_[q, T.translation]))
    return "\n".join(rows) + "\n"


def parse_transform(text: str) -> ExtrinsicTransform:
    """Accept either the 4-row matrix form or a single quaternion+translation line."""
    lines = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) == 1 and len(lines[0]) == 7:
        vals = [float(x) for x in lines[0]]
        return se3_from_quat_trans(vals[:4], vals[4:])
    if len(lines) < 4 or any(len(ln) != 4 for ln in lines[:4]):
        raise ValueError("transform must be 4 rows of 4 numbers or one line of 7")
    return ExtrinsicTransform.from_matrix(np.array([[float(x) for x in ln] for ln in lines[:4]]))


def read_transform(path) -> ExtrinsicTransform:
    return parse_transform(Path(path).read_text())


def write_transform(path, T: ExtrinsicTransform, quaternion: bool = False) -> None:
    Path(path).write_text(format_transform(T, quaternion))


# -- scenes --------------------------------------------------------------------------


def scene_to_dict(scene) -> dict:
    return {
        "seed": scene.seed,
        "spec": asdict(scene.spec),
        "density": asdict(scene.density),
        "T_true": scene.T_true.as_matrix().tolist(),
        "reflectors": np.asarray(scene.reflectors).tolist(),
        "clutter": np.asarray(scene.clutter).tolist(),
        "ego_poses": [T.as_matrix().tolist() for T in scene.ego_poses],
        "frames": [[_detection_record(d) for d in dets] for dets in scene.frames],
    }


def scene_from_dict(data: dict):
    from .harness import SceneSpec, SyntheticScene, render_occupancy

    spec_fields = dict(data["spec"])
    for key in ("reflector_log_power", "clutter_log_power", "mount_translation"):
        if key in spec_fields:
            spec_fields[key] = tuple(spec_fields[key])
    spec = SceneSpec(**spec_fields)
    density = DensityParams(**data["density"])
    T_true = ExtrinsicTransform.from_matrix(np.array(data["T_true"]))
    reflectors = np.array(data["reflectors"], dtype=float).reshape(-1, 4)
    clutter = np.array(data["clutter"], dtype=float).reshape(-1, 4)
    frames = [[_detection_from_record(r) for r in dets] for dets in data["frames"]]
    ego = [ExtrinsicTransform.from_matrix(np.array(m)) for m in data["ego_poses"]]
    pts = np.column_stack([reflectors[:, :2], np.full(len(reflectors), spec.h0)])
    target = render_occupancy(pts, spec.map_spec(), T_true)
    return SyntheticScene(spec, T_true, reflectors, clutter, frames, ego, target, density, int(data.get("seed", 0)))


def save_scene(path, scene) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1))


def load_scene(path):
    return scene_from_dict(json.loads(Path(path).read_text()))


def write_rows_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
