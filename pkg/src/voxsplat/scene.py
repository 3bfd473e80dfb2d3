"""Level-of-detail voxel scene model.

A scene holds K voxel levels. Level k has cell edge `base_voxel_size / 2**k`;
a voxel's center is its integer grid coordinate times the cell edge, obtained
by round-half-away-from-zero quantization of the source points. Each voxel
carries a learnable embedding, an anisotropic scale triple, and n offset
vectors that the shared decoder turns into n gaussians.

Within a level voxels are stored in canonical order: Morton (Z-order) over
grid coordinates shifted to be non-negative. Levels concatenate level-major
into one canonical scene order, which worker partitioning strides over.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput
from .geometry import CameraView, world_to_camera

EMBED_DIM = 32
FRUSTUM_MARGIN = 0.10


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (unlike numpy's half-even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(points: np.ndarray, cell: float) -> np.ndarray:
    """Snap points (..., 3) to the lattice of pitch `cell`; returns int64 grid coords."""
    if cell <= 0:
        raise InvalidInput("cell size must be positive")
    return round_half_away(np.asarray(points, dtype=np.float64) / cell).astype(np.int64)


def _spread_bits(v: np.ndarray) -> np.ndarray:
    """Spread the low 21 bits of v so they occupy every third bit."""
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_key(grid: np.ndarray) -> np.ndarray:
    """Morton (Z-order) key per row of int grid coords (N, 3).

    Coordinates are shifted by the per-call minimum so negatives are allowed;
    the induced order is translation invariant.
    """
    grid = np.asarray(grid, dtype=np.int64).reshape(-1, 3)
    if grid.size == 0:
        return np.empty(0, dtype=np.uint64)
    shifted = grid - grid.min(axis=0)
    if np.any(shifted >= (1 << 21)):
        raise InvalidInput("grid extent exceeds 21-bit Morton range")
    return (_spread_bits(shifted[:, 0])
            | (_spread_bits(shifted[:, 1]) << np.uint64(1))
            | (_spread_bits(shifted[:, 2]) << np.uint64(2)))


@dataclass
class SparsePoints:
    """Seed point cloud, e.g. from a reconstruction front end or a synthetic surface."""

    positions: np.ndarray                 # (N, 3) float64
    colors: np.ndarray | None = None      # (N, 3) float64 in [0, 1]

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.positions.shape[0] == 0:
            raise InvalidInput("empty point set")
        if not np.all(np.isfinite(self.positions)):
            raise InvalidInput("non-finite point positions")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if self.colors.shape[0] != self.positions.shape[0]:
                raise InvalidInput("colors/positions length mismatch")


@dataclass
class SceneLevel:
    """Struct-of-arrays storage for one LoD level, rows in canonical Morton order."""

    level: int
    cell_size: float
    grid: np.ndarray          # (v, 3) int64 lattice coordinates
    embeddings: np.ndarray    # (v, EMBED_DIM) float64
    scales: np.ndarray        # (v, 3) float64, componentwise > 0
    offsets: np.ndarray       # (v, n, 3) float64
    owner: np.ndarray         # (v,) int32, worker id or -1 when unassigned

    @property
    def count(self) -> int:
        return int(self.grid.shape[0])

    @property
    def centers(self) -> np.ndarray:
        return self.grid.astype(np.float64) * self.cell_size

    def validate(self) -> None:
        v = self.count
        if self.embeddings.shape != (v, EMBED_DIM):
            raise InvalidInput(f"level {self.level}: embedding shape {self.embeddings.shape}")
        if self.scales.shape != (v, 3) or np.any(self.scales <= 0):
            raise InvalidInput(f"level {self.level}: scales must be positive (v,3)")
        if self.offsets.ndim != 3 or self.offsets.shape[0] != v or self.offsets.shape[2] != 3:
            raise InvalidInput(f"level {self.level}: offsets shape {self.offsets.shape}")
        if self.owner.shape != (v,):
            raise InvalidInput(f"level {self.level}: owner shape {self.owner.shape}")
        if v and len(np.unique(self.grid, axis=0)) != v:
            raise InvalidInput(f"level {self.level}: duplicate lattice cells")


@dataclass
class VoxelRecord:
    """Single-voxel view used by narrow-waist APIs; arrays are slices, not copies."""

    level: int
    index: int
    cell_size: float
    grid: np.ndarray
    center: np.ndarray
    embedding: np.ndarray
    scale: np.ndarray
    offsets: np.ndarray
    owner: int


@dataclass
class SceneModel:
    base_voxel_size: float
    lod_count: int
    offsets_per_voxel: int
    levels: list[SceneLevel]
    seed: int = 0
    lod_ref_distance: float = 1.0
    lod_bias: int = 0

    def __post_init__(self) -> None:
        if self.base_voxel_size <= 0:
            raise InvalidInput("base voxel size must be positive")
        if self.lod_count < 1:
            raise InvalidInput("need at least one LoD level")
        if self.offsets_per_voxel < 1:
            raise InvalidInput("need at least one offset per voxel")
        if self.lod_ref_distance <= 0:
            raise InvalidInput("LoD reference distance must be positive")

    @property
    def total_voxels(self) -> int:
        return sum(lv.count for lv in self.levels)

    def voxel(self, level: int, index: int) -> VoxelRecord:
        lv = self.levels[level]
        return VoxelRecord(
            level=level, index=index, cell_size=lv.cell_size,
            grid=lv.grid[index], center=lv.centers[index],
            embedding=lv.embeddings[index], scale=lv.scales[index],
            offsets=lv.offsets[index], owner=int(lv.owner[index]),
        )

    def validate(self) -> None:
        if len(self.levels) != self.lod_count:
            raise InvalidInput("level list does not match lod_count")
        for k, lv in enumerate(self.levels):
            if lv.level != k:
                raise InvalidInput("levels out of order")
            expect = self.base_voxel_size / (2.0 ** k)
            if not np.isclose(lv.cell_size, expect):
                raise InvalidInput(f"level {k} cell size {lv.cell_size} != {expect}")
            lv.validate()

    def set_lod_reference(self, views: list[CameraView], points: np.ndarray | None = None) -> float:
        """Set the LoD reference distance to the median camera-to-point distance."""
        if points is None:
            points = self.levels[0].centers
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not views or points.shape[0] == 0:
            raise InvalidInput("need at least one view and one point")
        d = [np.linalg.norm(points - v.center, axis=1) for v in views]
        self.lod_ref_distance = float(np.median(np.concatenate(d)))
        if self.lod_ref_distance <= 0:
            raise InvalidInput("degenerate LoD reference distance")
        return self.lod_ref_distance


def build_hierarchy(points: SparsePoints, base_voxel_size: float, lod_count: int,
                    offsets_per_voxel: int = 5, seed: int = 0,
                    views: list[CameraView] | None = None) -> SceneModel:
    """Quantize points onto every LoD lattice and initialize voxel state.

    Each level is quantized independently from the raw points (duplicates
    collapse), stored in Morton canonical order. Embeddings start near zero,
    scales at the level's cell size, offsets uniform in [-1/2, 1/2]^3.
    """
    if lod_count < 1:
        raise InvalidInput("lod_count must be >= 1")
    rng = np.random.default_rng(seed)
    levels: list[SceneLevel] = []
    for k in range(lod_count):
        cell = base_voxel_size / (2.0 ** k)
        grid = np.unique(quantize(points.positions, cell), axis=0)
        order = np.argsort(morton_key(grid), kind="stable")
        grid = grid[order]
        v = grid.shape[0]
        levels.append(SceneLevel(
            level=k, cell_size=cell, grid=grid,
            embeddings=rng.uniform(-0.01, 0.01, size=(v, EMBED_DIM)),
            scales=np.full((v, 3), cell, dtype=np.float64),
            offsets=rng.uniform(-0.5, 0.5, size=(v, offsets_per_voxel, 3)),
            owner=np.full(v, -1, dtype=np.int32),
        ))
    scene = SceneModel(base_voxel_size=base_voxel_size, lod_count=lod_count,
                       offsets_per_voxel=offsets_per_voxel, levels=levels, seed=seed)
    if views:
        scene.set_lod_reference(views, points.positions)
    else:
        centroid = points.positions.mean(axis=0)
        d = np.linalg.norm(points.positions - centroid, axis=1)
        scene.lod_ref_distance = float(max(np.median(d), base_voxel_size))
    scene.validate()
    return scene


def lod_for_distance(dist: np.ndarray, scene: SceneModel) -> np.ndarray:
    """Target LoD level for camera distances: clamp(floor(log2(ref/d) + bias), 0, K-1)."""
    dist = np.maximum(np.asarray(dist, dtype=np.float64), 1e-12)
    raw = np.floor(np.log2(scene.lod_ref_distance / dist) + scene.lod_bias)
    return np.clip(raw, 0, scene.lod_count - 1).astype(np.int64)


def active_mask(scene: SceneModel, level: int, view: CameraView) -> np.ndarray:
    """Boolean mask over a level's voxels: in the padded frustum and LoD-selected.

    A voxel is active for a view iff its center lies in front of the camera,
    projects inside the image expanded by a 10% margin per side, and the
    distance-based LoD choice equals the voxel's own level.
    """
    lv = scene.levels[level]
    if lv.count == 0:
        return np.zeros(0, dtype=bool)
    centers = lv.centers
    cam = world_to_camera(centers, view)
    z = cam[:, 2]
    front = z > 1e-9
    u = np.where(front, view.fx * cam[:, 0] / np.where(front, z, 1.0) + view.cx, -1e9)
    v = np.where(front, view.fy * cam[:, 1] / np.where(front, z, 1.0) + view.cy, -1e9)
    mx, my = FRUSTUM_MARGIN * view.width, FRUSTUM_MARGIN * view.height
    inside = (front & (u >= -mx) & (u <= view.width + mx)
              & (v >= -my) & (v <= view.height + my))
    dist = np.linalg.norm(centers - view.center, axis=1)
    return inside & (lod_for_distance(dist, scene) == level)


def select_lod(voxel: VoxelRecord, view: CameraView, scene: SceneModel) -> bool:
    """Is this voxel active (rendered) for this view?"""
    cam = world_to_camera(voxel.center, view)
    if cam[2] <= 1e-9:
        return False
    u = view.fx * cam[0] / cam[2] + view.cx
    v = view.fy * cam[1] / cam[2] + view.cy
    mx, my = FRUSTUM_MARGIN * view.width, FRUSTUM_MARGIN * view.height
    if not (-mx <= u <= view.width + mx and -my <= v <= view.height + my):
        return False
    dist = float(np.linalg.norm(voxel.center - view.center))
    return int(lod_for_distance(np.array([dist]), scene)[0]) == voxel.level
