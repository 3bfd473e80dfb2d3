"""Depth-map fusion into a truncated signed distance volume and meshing.

Rendered (or ground-truth) depth maps are integrated into a dense TSDF grid
with per-voxel running averages; the zero level set is extracted with
marching cubes restricted to observed voxels. Point-cloud agreement is
scored with distance-threshold precision/recall/F1 via a KD-tree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMesh, InvalidInput, ResourceError
from .geometry import CameraView, world_to_camera

DEFAULT_VOXEL_BUDGET = 64_000_000
Z_EPS = 1e-9


@dataclass
class TriangleMesh:
    vertices: np.ndarray    # (V, 3) float64
    faces: np.ndarray       # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidInput("face indices out of range")


@dataclass(frozen=True)
class PointSetScore:
    precision: float
    recall: float
    f1: float
    mean_forward: float   # mean predicted-to-reference distance
    mean_backward: float  # mean reference-to-predicted distance


class TsdfVolume:
    """Dense truncated signed distance volume on a regular grid.

    Voxel (i, j, k) is centered at origin + (i, j, k) * voxel_size. The
    truncation band must be at least one voxel wide, and the total voxel
    count must fit the budget.
    """

    def __init__(self, origin, dims, voxel_size: float, truncation: float,
                 budget: int = DEFAULT_VOXEL_BUDGET):
        self.origin = np.asarray(origin, np.float64).reshape(3)
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise InvalidInput(f"volume dims must be three values >= 2, got {dims}")
        if voxel_size <= 0:
            raise InvalidInput("voxel size must be positive")
        if truncation < voxel_size:
            raise InvalidInput(
                f"truncation {truncation:.4g} narrower than one voxel {voxel_size:.4g}")
        total = int(np.prod(self.dims, dtype=np.int64))
        if total > budget:
            raise ResourceError(
                f"volume of {total} voxels exceeds the budget of {budget}")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.tsdf = np.ones(total, np.float64)
        self.weight = np.zeros(total, np.float64)
        g = np.stack(np.meshgrid(np.arange(self.dims[0]), np.arange(self.dims[1]),
                                 np.arange(self.dims[2]), indexing="ij"), axis=-1)
        self._centers = self.origin + g.reshape(-1, 3) * self.voxel_size

    @classmethod
    def from_bounds(cls, lower, upper, voxel_size: float, truncation: float,
                    budget: int = DEFAULT_VOXEL_BUDGET, auto_coarsen: bool = False):
        """Volume covering an axis-aligned box. With auto_coarsen the voxel
        size (and truncation, proportionally) doubles until the budget fits."""
        lower = np.asarray(lower, np.float64).reshape(3)
        upper = np.asarray(upper, np.float64).reshape(3)
        if not (upper > lower).all():
            raise InvalidInput("upper bound must exceed lower bound on every axis")
        vs, tr = float(voxel_size), float(truncation)
        while True:
            dims = np.maximum(np.ceil((upper - lower) / vs).astype(np.int64) + 1, 2)
            total = int(np.prod(dims, dtype=np.int64))
            if total <= budget:
                break
            if not auto_coarsen:
                raise ResourceError(
                    f"volume of {total} voxels exceeds the budget of {budget}; "
                    "enlarge the voxel size or pass auto_coarsen")
            vs *= 2.0
            tr *= 2.0
        return cls(lower, dims, vs, tr, budget=budget)

    @property
    def observed_fraction(self) -> float:
        return float((self.weight > 0).mean())

    def integrate(self, depth: np.ndarray, valid: np.ndarray, view: CameraView) -> int:
        """Fold one depth map into the volume; returns voxels touched.

        Each voxel center is projected into the view and compared with the
        stored depth at the nearest pixel. Voxels more than one truncation
        band behind the surface are occluded-unknown and skipped; the rest
        update the clamped-distance running average.
        """
        depth = np.asarray(depth, np.float64)
        valid = np.asarray(valid, bool)
        if depth.shape != (view.height, view.width) or valid.shape != depth.shape:
            raise InvalidInput("depth/valid shape must match the view size")
        cam = world_to_camera(self._centers, view)
        z = cam[:, 2]
        ok = z > Z_EPS
        zs = np.where(ok, z, 1.0)
        u = np.rint(view.fx * cam[:, 0] / zs + view.cx).astype(np.int64)
        v = np.rint(view.fy * cam[:, 1] / zs + view.cy).astype(np.int64)
        ok &= (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
        ui = np.where(ok, u, 0)
        vi = np.where(ok, v, 0)
        ok &= valid[vi, ui] & (depth[vi, ui] > 0)
        sdf = depth[vi, ui] - z
        ok &= sdf >= -self.truncation
        if not ok.any():
            return 0
        idx = np.flatnonzero(ok)
        val = np.clip(sdf[idx], -self.truncation, self.truncation) / self.truncation
        w = self.weight[idx]
        self.tsdf[idx] = (self.tsdf[idx] * w + val) / (w + 1.0)
        self.weight[idx] = w + 1.0
        return int(len(idx))

    def extract_mesh(self) -> TriangleMesh:
        """Marching cubes over the observed region of the zero level set.

        Marching-cubes masks only gate whole cubes, so a cube straddling the
        observed boundary can still interpolate against never-observed voxels
        whose +1 prior would invent geometry (e.g. a phantom inner shell just
        inside a closed surface). Every vertex lies on an axis-aligned edge
        between two voxel centers; vertices are kept only when both endpoint
        voxels carry real observations, and faces only when all three
        vertices survive.
        """
        from skimage.measure import marching_cubes
        observed = (self.weight > 0).reshape(self.dims)
        field = self.tsdf.reshape(self.dims)
        if not observed.any():
            raise EmptyMesh("no voxel was ever observed")
        if not ((field[observed] < 0).any() and (field[observed] > 0).any()):
            raise EmptyMesh("observed region contains no zero crossing")
        try:
            verts, faces, _, _ = marching_cubes(
                field, level=0.0, spacing=(self.voxel_size,) * 3, mask=observed)
        except (ValueError, RuntimeError) as exc:
            raise EmptyMesh(f"no surface could be extracted: {exc}") from exc
        if len(verts) == 0 or len(faces) == 0:
            raise EmptyMesh("marching cubes produced no triangles")
        verts = verts.astype(np.float64)
        lat = verts / self.voxel_size
        top = np.array(self.dims) - 1
        lo = np.clip(np.floor(lat + 1e-4).astype(np.int64), 0, top)
        hi = np.clip(np.ceil(lat - 1e-4).astype(np.int64), 0, top)
        supported = (observed[lo[:, 0], lo[:, 1], lo[:, 2]]
                     & observed[hi[:, 0], hi[:, 1], hi[:, 2]])
        faces = faces[supported[faces].all(axis=1)]
        if len(faces) == 0:
            raise EmptyMesh("no surface is supported by observed voxels")
        used = np.unique(faces)
        remap = np.full(len(verts), -1, np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(vertices=verts[used] + self.origin, faces=remap[faces])


def integrate_views(volume: TsdfVolume, depths, valids, views) -> int:
    touched = 0
    for d, m, v in zip(depths, valids, views):
        touched += volume.integrate(d, m, v)
    return touched


def sample_mesh_points(mesh: TriangleMesh, count: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if len(mesh.faces) == 0:
        raise EmptyMesh("cannot sample an empty mesh")
    if count <= 0:
        raise InvalidInput("sample count must be positive")
    v = mesh.vertices
    tri = v[mesh.faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area = 0.5 * np.linalg.norm(cross, axis=-1)
    if area.sum() <= 0:
        raise EmptyMesh("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(area), size=count, p=area / area.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    a, b, c = tri[pick, 0], tri[pick, 1], tri[pick, 2]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def eval_pointcloud(pred: np.ndarray, reference: np.ndarray, tau: float) -> PointSetScore:
    """Distance-threshold precision/recall/F1 between two point sets."""
    pred = np.asarray(pred, np.float64).reshape(-1, 3)
    reference = np.asarray(reference, np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(reference) == 0:
        raise InvalidInput("both point sets must be non-empty")
    if tau <= 0:
        raise InvalidInput("distance threshold must be positive")
    fwd, _ = cKDTree(reference).query(pred)
    bwd, _ = cKDTree(pred).query(reference)
    precision = float((fwd <= tau).mean())
    recall = float((bwd <= tau).mean())
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return PointSetScore(precision=precision, recall=recall, f1=f1,
                         mean_forward=float(fwd.mean()), mean_backward=float(bwd.mean()))
