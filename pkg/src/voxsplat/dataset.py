"""Dataset manifests: posed cameras, images, sparse points, depth priors.

A dataset directory is described by a JSON manifest:

    {
      "version": 1,
      "points": "points.ply",
      "pseudo_depth": {"scale": 2.0, "shift": 0.3},        # optional, bookkeeping
      "cameras": [
        {"id": 0, "width": 128, "height": 128,
         "fx": 110.8, "fy": 110.8, "cx": 64.0, "cy": 64.0,
         "qw": 1.0, "qx": 0.0, "qy": 0.0, "qz": 0.0,
         "tx": 0.0, "ty": 0.0, "tz": 2.5,
         "image": "images/view_000.png",
         "gt_depth": "depth_gt/view_000.json",             # optional
         "mono_depth": "depth_mono/view_000.json"},        # optional
        ...
      ]
    }

Rotation is the world-to-camera quaternion (w, x, y, z) paired with the
translation of x_cam = R x_world + t. Every 8th camera (by list order,
starting at the first) forms the held-out evaluation split. Points live in
an ascii PLY file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput, IoError
from .geometry import CameraView, quat_to_rotmat
from .imio import read_float_map, read_png
from .scene import SparsePoints

MANIFEST_VERSION = 1
TEST_EVERY = 8

_CAMERA_KEYS = ("id", "width", "height", "fx", "fy", "cx", "cy",
                "qw", "qx", "qy", "qz", "tx", "ty", "tz", "image")


def write_ply_points(path, positions: np.ndarray, colors: np.ndarray | None = None) -> Path:
    """Write an ascii PLY point cloud (colors optional, float in [0,1])."""
    path = Path(path)
    pos = np.asarray(positions, np.float64).reshape(-1, 3)
    if not len(pos):
        raise InvalidInput("refusing to write an empty point cloud")
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pos)}",
             "property double x", "property double y", "property double z"]
    if colors is not None:
        colors = np.clip(np.rint(np.asarray(colors, np.float64).reshape(-1, 3) * 255),
                         0, 255).astype(np.uint8)
        if len(colors) != len(pos):
            raise InvalidInput("colors/positions length mismatch")
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        f.write("\n".join(lines) + "\n")
        for i in range(len(pos)):
            row = f"{pos[i, 0]:.10g} {pos[i, 1]:.10g} {pos[i, 2]:.10g}"
            if colors is not None:
                row += f" {colors[i, 0]} {colors[i, 1]} {colors[i, 2]}"
            f.write(row + "\n")
    return path


def read_ply_points(path) -> SparsePoints:
    """Read an ascii PLY point cloud (x/y/z plus optional red/green/blue)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read point cloud {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise IoError(f"point cloud {path}: not a PLY file")
    count = None
    props: list[str] = []
    body_at = None
    in_vertex = False
    for i, ln in enumerate(lines[1:], start=1):
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise IoError(f"point cloud {path}: only ascii PLY is supported")
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                if count is not None:
                    raise IoError(f"point cloud {path}: duplicate vertex element")
                count = int(parts[2])
        if parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        if parts[0] == "end_header":
            body_at = i + 1
            break
    if count is None or body_at is None:
        raise IoError(f"point cloud {path}: malformed header")
    for axis in ("x", "y", "z"):
        if axis not in props:
            raise IoError(f"point cloud {path}: vertex has no {axis!r} property")
    rows = []
    for ln in lines[body_at:body_at + count]:
        vals = ln.split()
        if len(vals) != len(props):
            raise IoError(f"point cloud {path}: vertex row has {len(vals)} fields, "
                          f"expected {len(props)}")
        rows.append([float(v) for v in vals])
    if len(rows) != count:
        raise IoError(f"point cloud {path}: expected {count} vertices, got {len(rows)}")
    tab = np.asarray(rows, np.float64)
    pos = np.stack([tab[:, props.index(a)] for a in ("x", "y", "z")], axis=-1)
    colors = None
    if all(c in props for c in ("red", "green", "blue")):
        colors = np.stack([tab[:, props.index(c)] for c in ("red", "green", "blue")],
                          axis=-1) / 255.0
    return SparsePoints(positions=pos, colors=colors)


def _camera_from_entry(entry: dict, where: str) -> CameraView:
    for key in _CAMERA_KEYS:
        if key not in entry:
            raise InvalidInput(f"{where} is missing required key {key!r}")
    q = np.array([entry["qw"], entry["qx"], entry["qy"], entry["qz"]], np.float64)
    if abs(float(np.linalg.norm(q)) - 1.0) > 1e-6:
        raise InvalidInput(f"{where}: rotation quaternion is not unit length")
    return CameraView(
        view_id=int(entry["id"]), width=int(entry["width"]), height=int(entry["height"]),
        fx=float(entry["fx"]), fy=float(entry["fy"]),
        cx=float(entry["cx"]), cy=float(entry["cy"]),
        r=quat_to_rotmat(q),
        t=np.array([entry["tx"], entry["ty"], entry["tz"]], np.float64))


def camera_to_entry(view: CameraView, image: str, gt_depth: str | None = None,
                    mono_depth: str | None = None) -> dict:
    from .geometry import rotmat_to_quat
    q = rotmat_to_quat(view.r)
    entry = {"id": view.view_id, "width": view.width, "height": view.height,
             "fx": view.fx, "fy": view.fy, "cx": view.cx, "cy": view.cy,
             "qw": q[0], "qx": q[1], "qy": q[2], "qz": q[3],
             "tx": view.t[0], "ty": view.t[1], "tz": view.t[2],
             "image": image}
    if gt_depth is not None:
        entry["gt_depth"] = gt_depth
    if mono_depth is not None:
        entry["mono_depth"] = mono_depth
    return entry


@dataclass
class Dataset:
    root: Path
    views: list[CameraView]
    image_files: list[Path]
    points: SparsePoints
    gt_depth_files: list[Path | None] = field(default_factory=list)
    mono_depth_files: list[Path | None] = field(default_factory=list)
    pseudo_depth_info: dict | None = None

    @property
    def count(self) -> int:
        return len(self.views)

    @property
    def test_indices(self) -> list[int]:
        return list(range(0, self.count, TEST_EVERY))

    @property
    def train_indices(self) -> list[int]:
        held = set(self.test_indices)
        return [i for i in range(self.count) if i not in held]

    def load_image(self, index: int) -> np.ndarray:
        img = read_png(self.image_files[index])
        v = self.views[index]
        if img.shape[:2] != (v.height, v.width):
            raise InvalidInput(
                f"image {self.image_files[index]} is {img.shape[1]}x{img.shape[0]}, "
                f"camera {v.view_id} expects {v.width}x{v.height}")
        return img

    def _load_depth(self, files: list, index: int, kind: str) -> np.ndarray:
        f = files[index]
        if f is None:
            raise IoError(f"view {self.views[index].view_id} has no {kind} depth")
        arr, _ = read_float_map(f)
        v = self.views[index]
        if arr.shape != (v.height, v.width):
            raise InvalidInput(f"{kind} depth {f} shape {arr.shape} does not match "
                               f"camera {v.view_id} size")
        return arr

    def load_gt_depth(self, index: int) -> np.ndarray:
        return self._load_depth(self.gt_depth_files, index, "ground-truth")

    def load_mono_depth(self, index: int) -> np.ndarray:
        return self._load_depth(self.mono_depth_files, index, "monocular")

    def has_mono_depth(self) -> bool:
        return all(f is not None for f in self.mono_depth_files)


def ingest(manifest_path) -> Dataset:
    """Load and validate a dataset manifest; raises on schema violations."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise IoError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise InvalidInput(f"manifest {manifest_path}: unsupported version "
                           f"{manifest.get('version')!r}")
    if "points" not in manifest or "cameras" not in manifest:
        raise InvalidInput(f"manifest {manifest_path}: needs 'points' and 'cameras'")
    root = manifest_path.parent
    cams = manifest["cameras"]
    if not isinstance(cams, list) or not cams:
        raise InvalidInput(f"manifest {manifest_path}: 'cameras' must be a non-empty list")
    views, images, gts, monos = [], [], [], []
    seen_ids: set[int] = set()
    for i, entry in enumerate(cams):
        where = f"{manifest_path}: cameras[{i}]"
        view = _camera_from_entry(entry, where)
        if view.view_id in seen_ids:
            raise InvalidInput(f"{where}: duplicate camera id {view.view_id}")
        seen_ids.add(view.view_id)
        img = root / entry["image"]
        if not img.exists():
            raise IoError(f"{where}: image file {img} does not exist")
        views.append(view)
        images.append(img)
        for key, acc in (("gt_depth", gts), ("mono_depth", monos)):
            if key in entry:
                p = root / entry[key]
                if not p.exists():
                    raise IoError(f"{where}: {key} file {p} does not exist")
                acc.append(p)
            else:
                acc.append(None)
    points_path = root / manifest["points"]
    if not points_path.exists():
        raise IoError(f"manifest {manifest_path}: points file {points_path} does not exist")
    points = read_ply_points(points_path)
    return Dataset(root=root, views=views, image_files=images, points=points,
                   gt_depth_files=gts, mono_depth_files=monos,
                   pseudo_depth_info=manifest.get("pseudo_depth"))


def write_manifest(out_dir, cameras: list[dict], points_rel: str,
                   pseudo_depth_info: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"version": MANIFEST_VERSION, "points": points_rel, "cameras": cameras}
    if pseudo_depth_info is not None:
        manifest["pseudo_depth"] = pseudo_depth_info
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path
