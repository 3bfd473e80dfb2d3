"""Work division across simulated workers.

Two axes of parallelism are modeled. Voxel ownership stripes the canonical
per-level ordering round-robin across M workers, so per-level counts differ by
at most one and spatially coherent (Morton-adjacent) voxels spread evenly.
Rendering work is split into 16x16 pixel patches scheduled with a greedy
longest-processing-time heuristic over an EMA cost model of past patch times.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput
from .geometry import CameraView
from .scene import SceneModel

PATCH = 16
EMA_BETA = 0.3


@dataclass
class WorkerAssignment:
    """Voxel ownership: per level, owner[i] = i mod M over canonical order."""

    num_workers: int
    owners: list[np.ndarray]          # per level, (v,) int32
    unreachable: frozenset[int] = frozenset()

    def counts(self) -> np.ndarray:
        """Owned-voxel counts, shape (levels, workers)."""
        out = np.zeros((len(self.owners), self.num_workers), dtype=np.int64)
        for k, own in enumerate(self.owners):
            if own.size:
                out[k] = np.bincount(own, minlength=self.num_workers)
        return out


def assign_voxels(scene: SceneModel, num_workers: int) -> WorkerAssignment:
    """Stride the canonical order of every level across workers and stamp owners."""
    if num_workers < 1:
        raise InvalidInput("need at least one worker")
    owners = []
    for lv in scene.levels:
        own = (np.arange(lv.count, dtype=np.int64) % num_workers).astype(np.int32)
        lv.owner = own.copy()
        owners.append(own)
    return WorkerAssignment(num_workers=num_workers, owners=owners)


@dataclass(frozen=True)
class PatchRect:
    """One rendering work item: a pixel rectangle of a view."""

    view_id: int
    patch_index: int
    x0: int
    y0: int
    width: int
    height: int

    @property
    def pixels(self) -> int:
        return self.width * self.height


def patchify(view: CameraView) -> list[PatchRect]:
    """Row-major 16x16 tiling of a view; right/bottom patches may be ragged."""
    out = []
    idx = 0
    for y0 in range(0, view.height, PATCH):
        for x0 in range(0, view.width, PATCH):
            out.append(PatchRect(view.view_id, idx, x0, y0,
                                 min(PATCH, view.width - x0),
                                 min(PATCH, view.height - y0)))
            idx += 1
    return out


class PatchCostModel:
    """EMA of measured per-patch seconds, keyed by (view_id, patch_index)."""

    def __init__(self, beta: float = EMA_BETA):
        if not 0 < beta <= 1:
            raise InvalidInput("EMA beta must be in (0, 1]")
        self.beta = beta
        self._ema: dict[tuple[int, int], float] = {}

    def update(self, key: tuple[int, int], measured: float) -> float:
        prev = self._ema.get(key)
        new = measured if prev is None else (1.0 - self.beta) * prev + self.beta * measured
        self._ema[key] = new
        return new

    def estimate(self, patch: PatchRect) -> float | None:
        """Known EMA cost, or None when this patch has no history yet."""
        return self._ema.get((patch.view_id, patch.patch_index))


@dataclass
class PatchSchedule:
    patches: list[PatchRect]
    workers: np.ndarray              # (P,) int32 assigned worker per patch
    est_costs: np.ndarray            # (P,) float64 cost used by the scheduler
    num_workers: int

    def loads(self) -> np.ndarray:
        out = np.zeros(self.num_workers, dtype=np.float64)
        np.add.at(out, self.workers, self.est_costs)
        return out

    def patches_of(self, worker: int) -> list[PatchRect]:
        return [p for p, w in zip(self.patches, self.workers) if w == worker]


def lpt_assign(costs: np.ndarray, num_workers: int) -> np.ndarray:
    """Greedy LPT: jobs in descending cost order go to the least-loaded worker.

    Ties in cost keep submission order; ties in load go to the lowest worker
    id, so uniform costs reduce to round-robin. Guarantees makespan within
    (4/3 - 1/(3M)) of optimal.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if np.any(costs < 0):
        raise InvalidInput("negative patch cost")
    order = np.argsort(-costs, kind="stable")
    workers = np.empty(len(costs), dtype=np.int32)
    loads = np.zeros(num_workers, dtype=np.float64)
    for i in order:
        w = int(np.argmin(loads))        # argmin takes the lowest index on ties
        workers[i] = w
        loads[w] += costs[i]
    return workers


def schedule_patches(views: list[CameraView], num_workers: int,
                     cost_model: PatchCostModel | None = None) -> PatchSchedule:
    """Plan one epoch of patch work for a batch of views.

    Costs come from the EMA model where history exists; patches never seen
    before cost their pixel count (uniform per pixel), so a cold start
    degenerates to round-robin over equal-size patches.
    """
    if num_workers < 1:
        raise InvalidInput("need at least one worker")
    patches: list[PatchRect] = []
    for v in views:
        patches.extend(patchify(v))
    if not patches:
        raise InvalidInput("no patches to schedule")
    costs = np.empty(len(patches), dtype=np.float64)
    for i, p in enumerate(patches):
        est = cost_model.estimate(p) if cost_model is not None else None
        costs[i] = est if est is not None else float(p.pixels)
    workers = lpt_assign(costs, num_workers)
    return PatchSchedule(patches=patches, workers=workers,
                         est_costs=costs, num_workers=num_workers)


@dataclass
class BalanceStats:
    epoch: int
    voxel_counts: np.ndarray         # (workers,) owned voxels summed over levels
    seconds: np.ndarray              # (workers,) measured wall time
    imbalance: float                 # max/mean of per-worker seconds
    load_fraction: float             # max/total (ideal 1/M)

    def json_lines(self) -> list[str]:
        out = []
        for w in range(len(self.seconds)):
            out.append(json.dumps({
                "epoch": self.epoch, "worker": w,
                "voxels": int(self.voxel_counts[w]),
                "seconds": float(self.seconds[w]),
                "imbalance": self.imbalance,
            }))
        return out


def balance_report(assignment: WorkerAssignment, schedule: PatchSchedule,
                   measured_seconds: np.ndarray, epoch: int = 0,
                   cost_model: PatchCostModel | None = None) -> BalanceStats:
    """Summarize an executed epoch and fold measured times into the cost model.

    `measured_seconds` is per patch, aligned with `schedule.patches`.
    """
    measured = np.asarray(measured_seconds, dtype=np.float64)
    if measured.shape != (len(schedule.patches),):
        raise InvalidInput("measured seconds must align with scheduled patches")
    if np.any(measured < 0):
        raise InvalidInput("negative measured time")
    per_worker = np.zeros(schedule.num_workers, dtype=np.float64)
    np.add.at(per_worker, schedule.workers, measured)
    if cost_model is not None:
        for p, s in zip(schedule.patches, measured):
            cost_model.update((p.view_id, p.patch_index), float(s))
    total = float(per_worker.sum())
    mean = total / schedule.num_workers
    imb = float(per_worker.max() / mean) if mean > 0 else 1.0
    frac = float(per_worker.max() / total) if total > 0 else 1.0
    return BalanceStats(epoch=epoch,
                        voxel_counts=assignment.counts().sum(axis=0),
                        seconds=per_worker, imbalance=imb, load_fraction=frac)


class StageTimer:
    """Tiny wall-clock helper so callers do not hand-roll perf_counter pairs."""

    def __init__(self) -> None:
        self._t0 = time.perf_counter()

    def lap(self) -> float:
        now = time.perf_counter()
        dt = now - self._t0
        self._t0 = now
        return dt
