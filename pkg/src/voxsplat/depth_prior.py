"""Aligning and filtering per-view monocular depth priors.

A raw relative depth map is fit to the metric scale of the sparse point
cloud with a least-squares scale/shift, robustly refit once after dropping
MAD outliers, and then cross-checked against neighboring views: a pixel
survives only if lifting it to 3D, resampling a neighbor's aligned depth
at its reprojection, and mapping that point back produces a small pixel
round-trip error. Surviving pixels form the enhanced depth prior used for
supervision.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateFit, InsufficientData, InvalidInput, IoError
from .geometry import CameraView, world_to_camera

MIN_FIT_SAMPLES = 8
MAD_FACTOR = 3.0
VAR_GUARD = 1e-12
Z_EPS = 1e-9
DEFAULT_TAU = 1.0
NEIGHBOR_MIN_DOT = 0.5


@dataclass(frozen=True)
class ScaleShiftFit:
    scale: float
    shift: float
    samples: int
    inliers: int


@dataclass
class AlignedDepthMap:
    values: np.ndarray          # (H, W) float64, metric depth
    valid: np.ndarray           # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, np.float64)
        self.valid = np.asarray(self.valid, bool)
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise InvalidInput("aligned depth map needs matching 2-d value/valid arrays")


@dataclass
class EnhancedDepthMap:
    values: np.ndarray          # (H, W) float64, zero where invalid
    valid: np.ndarray           # (H, W) bool
    min_roundtrip: np.ndarray   # (H, W) float64, inf where never measured
    tau: float


def _bilinear_with_valid(values: np.ndarray, valid: np.ndarray,
                         u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear sample requiring all four touched texels valid."""
    h, w = values.shape
    u0 = np.clip(np.floor(u), 0, w - 2).astype(np.int64)
    v0 = np.clip(np.floor(v), 0, h - 2).astype(np.int64)
    fu = u - u0
    fv = v - v0
    ok = (valid[v0, u0] & valid[v0, u0 + 1] & valid[v0 + 1, u0] & valid[v0 + 1, u0 + 1])
    s = (values[v0, u0] * (1 - fu) * (1 - fv) + values[v0, u0 + 1] * fu * (1 - fv)
         + values[v0 + 1, u0] * (1 - fu) * fv + values[v0 + 1, u0 + 1] * fu * fv)
    return s, ok


def _solve_scale_shift(d: np.ndarray, z: np.ndarray) -> tuple[float, float]:
    a = np.array([[float(d @ d), float(d.sum())],
                  [float(d.sum()), float(len(d))]])
    rhs = np.array([float(d @ z), float(z.sum())])
    try:
        s, b = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFit("scale/shift normal equations are singular") from exc
    return float(s), float(b)


def fit_scale_shift(depth: np.ndarray, view: CameraView, points: np.ndarray,
                    valid: np.ndarray | None = None) -> ScaleShiftFit:
    """Fit metric = scale * raw + shift against sparse points seen by `view`.

    Points are projected into the view; raw depth is sampled bilinearly at
    the projections and regressed against the points' camera-space z. One
    robust refit drops samples whose residual deviates from the median by
    more than three median-absolute-deviations.
    """
    depth = np.asarray(depth, np.float64)
    if depth.ndim != 2:
        raise InvalidInput("raw depth must be a 2-d array")
    if valid is None:
        valid = np.isfinite(depth) & (depth > 0)
    pts = np.asarray(points, np.float64).reshape(-1, 3)
    cam = world_to_camera(pts, view)
    front = cam[:, 2] > Z_EPS
    cam = cam[front]
    u = view.fx * cam[:, 0] / cam[:, 2] + view.cx
    v = view.fy * cam[:, 1] / cam[:, 2] + view.cy
    inb = (u >= 0) & (u <= view.width - 1) & (v >= 0) & (v <= view.height - 1)
    u, v, z = u[inb], v[inb], cam[inb, 2]
    if len(u) < MIN_FIT_SAMPLES:
        raise InsufficientData(
            f"only {len(u)} projected points, need {MIN_FIT_SAMPLES}")
    raw, ok = _bilinear_with_valid(depth, valid, u, v)
    raw, z = raw[ok], z[ok]
    if len(raw) < MIN_FIT_SAMPLES:
        raise InsufficientData(
            f"only {len(raw)} samples on valid depth, need {MIN_FIT_SAMPLES}")
    if float(np.var(raw)) < VAR_GUARD:
        raise DegenerateFit("raw depth has no variance at the sample points")
    s, b = _solve_scale_shift(raw, z)
    res = s * raw + b - z
    med = float(np.median(res))
    mad = float(np.median(np.abs(res - med)))
    keep = np.abs(res - med) <= MAD_FACTOR * mad if mad >= VAR_GUARD else np.ones_like(res, bool)
    inliers = int(keep.sum())
    if inliers >= MIN_FIT_SAMPLES and float(np.var(raw[keep])) >= VAR_GUARD:
        s, b = _solve_scale_shift(raw[keep], z[keep])
    else:
        inliers = len(raw)
    if s <= 0:
        raise DegenerateFit(f"non-positive depth scale {s:.3g}")
    return ScaleShiftFit(scale=s, shift=b, samples=len(raw), inliers=inliers)


def apply_scale_shift(depth: np.ndarray, fit: ScaleShiftFit,
                      valid: np.ndarray | None = None) -> AlignedDepthMap:
    depth = np.asarray(depth, np.float64)
    if valid is None:
        valid = np.isfinite(depth) & (depth > 0)
    vals = fit.scale * depth + fit.shift
    ok = np.asarray(valid, bool) & np.isfinite(vals) & (vals > 0)
    return AlignedDepthMap(values=np.where(ok, vals, 0.0), valid=ok)


def reprojection_error(src: AlignedDepthMap, view_src: CameraView,
                       ref: AlignedDepthMap, view_ref: CameraView) -> np.ndarray:
    """Pixel round-trip error map for every valid source pixel.

    Each source pixel is lifted with its aligned depth, projected into the
    reference view, the reference aligned depth is sampled there, that sample
    is lifted in the reference frame and projected back into the source view;
    the result is the distance in pixels to where it started. Pixels whose
    chain breaks (behind a camera, outside the image, invalid reference
    samples) get +inf.
    """
    h, w = src.values.shape
    err = np.full((h, w), np.inf)
    vv, uu = np.nonzero(src.valid)
    if uu.size == 0:
        return err
    z = src.values[vv, uu]
    x = (uu - view_src.cx) / view_src.fx * z
    y = (vv - view_src.cy) / view_src.fy * z
    cam_src = np.stack([x, y, z], axis=-1)
    world = (cam_src - view_src.t) @ view_src.r
    cam_ref = world @ view_ref.r.T + view_ref.t
    ok = cam_ref[:, 2] > Z_EPS
    ur = view_ref.fx * cam_ref[:, 0] / np.where(ok, cam_ref[:, 2], 1.0) + view_ref.cx
    vr = view_ref.fy * cam_ref[:, 1] / np.where(ok, cam_ref[:, 2], 1.0) + view_ref.cy
    ok &= (ur >= 0) & (ur <= view_ref.width - 1) & (vr >= 0) & (vr <= view_ref.height - 1)
    if not ok.any():
        return err
    zs, sok = _bilinear_with_valid(ref.values, ref.valid,
                                   np.where(ok, ur, 0.0), np.where(ok, vr, 0.0))
    ok &= sok & (zs > 0)
    xr = (ur - view_ref.cx) / view_ref.fx * zs
    yr = (vr - view_ref.cy) / view_ref.fy * zs
    cam_ref2 = np.stack([xr, yr, zs], axis=-1)
    world2 = (cam_ref2 - view_ref.t) @ view_ref.r
    cam_src2 = world2 @ view_src.r.T + view_src.t
    ok &= cam_src2[:, 2] > Z_EPS
    zsafe = np.where(ok, cam_src2[:, 2], 1.0)
    u2 = view_src.fx * cam_src2[:, 0] / zsafe + view_src.cx
    v2 = view_src.fy * cam_src2[:, 1] / zsafe + view_src.cy
    e = np.hypot(u2 - uu, v2 - vv)
    err[vv[ok], uu[ok]] = e[ok]
    return err


def select_neighbors(views: list[CameraView], index: int, k: int = 2,
                     min_dot: float = NEIGHBOR_MIN_DOT) -> list[int]:
    """Indices of the k nearest other cameras looking the same general way."""
    me = views[index]
    fwd_me = me.r[2]
    scored = []
    for j, v in enumerate(views):
        if j == index:
            continue
        if float(fwd_me @ v.r[2]) < min_dot:
            continue
        scored.append((float(np.linalg.norm(v.center - me.center)), j))
    scored.sort()
    return [j for _, j in scored[:k]]


def enhance(src: AlignedDepthMap, view_src: CameraView,
            neighbors: list[tuple[AlignedDepthMap, CameraView]],
            tau: float = DEFAULT_TAU) -> EnhancedDepthMap:
    """Keep source pixels whose best cross-view round-trip error is <= tau."""
    if tau <= 0:
        raise InvalidInput("tau must be positive")
    emin = np.full(src.values.shape, np.inf)
    for ref, view_ref in neighbors:
        emin = np.minimum(emin, reprojection_error(src, view_src, ref, view_ref))
    valid = src.valid & (emin <= tau)
    return EnhancedDepthMap(values=np.where(valid, src.values, 0.0),
                            valid=valid, min_roundtrip=emin, tau=tau)


@dataclass
class DepthPriorCache:
    """Disk cache of enhanced depth maps, keyed by the inputs that define them."""
    root: Path
    hits: int = 0
    misses: int = 0
    _mem: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(view_id: int, fit: ScaleShiftFit, neighbor_ids: list[int], tau: float) -> str:
        blob = json.dumps({"view": view_id, "scale": fit.scale, "shift": fit.shift,
                           "neighbors": sorted(neighbor_ids), "tau": tau},
                          sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:16]

    def path(self, key: str) -> Path:
        return self.root / f"enhanced_{key}.npz"

    def load(self, key: str) -> EnhancedDepthMap | None:
        if key in self._mem:
            self.hits += 1
            return self._mem[key]
        p = self.path(key)
        if not p.exists():
            self.misses += 1
            return None
        try:
            with np.load(p) as z:
                out = EnhancedDepthMap(values=z["values"], valid=z["valid"].astype(bool),
                                       min_roundtrip=z["min_roundtrip"], tau=float(z["tau"]))
        except (OSError, KeyError, ValueError) as exc:
            raise IoError(f"corrupt depth cache entry {p}: {exc}") from exc
        self.hits += 1
        self._mem[key] = out
        return out

    def store(self, key: str, e: EnhancedDepthMap) -> Path:
        p = self.path(key)
        np.savez(p, values=e.values, valid=e.valid,
                 min_roundtrip=e.min_roundtrip, tau=np.float64(e.tau))
        self._mem[key] = e
        return p
