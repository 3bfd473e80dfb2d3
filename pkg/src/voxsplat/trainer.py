"""Three-stage progressive training over the voxel hierarchy.

Stage weights follow the step index: photometric supervision is always on;
the enhanced-depth term ramps 1 -> 0 from its start step to the end; the
multi-view consistency term ramps 0 -> w3_max from its start step. Anchor
growth watches the average gradient norm of decoded gaussian positions per
voxel and inserts finer-level children under voxels that keep straining.

The simulated cluster keeps one decoder replica per worker. All heavy math
runs once per step in a canonical order that is independent of the worker
count; worker structure contributes bookkeeping (ownership, transfer bytes,
patch schedules, balance stats) and a bitwise replica-equality barrier, so
results are reproducible bit-for-bit for any worker count.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .dataset import Dataset
from .decoder import DecoderParams, params_equal
from .depth_prior import (EnhancedDepthMap, apply_scale_shift, enhance,
                          fit_scale_shift, select_neighbors)
from .errors import InvalidInput, NumericalError, ProtocolError
from .geometry import CameraView
from .losses import bl_geo_loss, bl_rgb_loss, e_depth_loss, psnr
from .partition import (PatchCostModel, WorkerAssignment, assign_voxels,
                        balance_report, schedule_patches)
from .renderer import (ALL_TASKS, project_splats, rasterize_view,
                       transfer_gaussians)
from .scene import SceneModel, quantize
from .snapshot import save_scene

_T = torch.float64

ADAM_EPS = 1e-15
OCTANT_SIGNS = np.array([[sx, sy, sz] for sx in (-1.0, 1.0)
                         for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)])


@dataclass
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 4
    workers: int = 1
    seed: int = 0
    # stage boundaries (a start equal to total_steps disables the stage)
    step2_start: int = 800
    step3_start: int = 1400
    # learning rates, cosine-decayed to lr * final_factor
    lr_decoder: float = 2e-3
    lr_embeddings: float = 5e-3
    lr_offsets: float = 1e-2
    lr_scales: float = 5e-3
    lr_final_factor: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    # anchor growth
    growth_threshold: float = 2e-4
    growth_window: int = 100
    growth_stop: int = 1000
    # loss details
    w3_max: float = 0.2
    tau_depth: float = 1.0
    geo_patches: int = 64
    geo_patch_half: int = 3
    # fresh decoders emit gaussians near this fraction of the base voxel size
    init_scale_fraction: float = 0.125
    # bookkeeping
    log_every: int = 10
    eval_every: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.total_steps < 1:
            raise InvalidInput("total_steps must be >= 1")
        if not 0 <= self.step2_start <= self.total_steps:
            raise InvalidInput("step2_start must lie in [0, total_steps]")
        if not 0 <= self.step3_start <= self.total_steps:
            raise InvalidInput("step3_start must lie in [0, total_steps]")
        if self.batch_size < 1:
            raise InvalidInput("batch_size must be >= 1")
        if self.workers < 1:
            raise InvalidInput("workers must be >= 1")
        if self.growth_window < 1:
            raise InvalidInput("growth_window must be >= 1")
        if not 0 < self.lr_final_factor <= 1:
            raise InvalidInput("lr_final_factor must be in (0, 1]")
        for name in ("lr_decoder", "lr_embeddings", "lr_offsets", "lr_scales"):
            if getattr(self, name) <= 0:
                raise InvalidInput(f"{name} must be positive")
        if not 0 < self.init_scale_fraction <= 3:
            raise InvalidInput("init_scale_fraction must be in (0, 3]")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        bad = set(data) - known
        if bad:
            raise InvalidInput(f"unknown train config keys: {sorted(bad)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


def weight_schedule(step: int, cfg: TrainConfig) -> tuple[float, float]:
    """(depth weight, consistency weight) at a step; linear ramps 1->0 and 0->max."""
    w2 = 0.0
    if step >= cfg.step2_start and cfg.total_steps > cfg.step2_start:
        w2 = 1.0 - (step - cfg.step2_start) / (cfg.total_steps - cfg.step2_start)
    w3 = 0.0
    if step >= cfg.step3_start and cfg.total_steps > cfg.step3_start:
        w3 = cfg.w3_max * (step - cfg.step3_start) / (cfg.total_steps - cfg.step3_start)
    return w2, w3


def cosine_lr(step: int, base: float, cfg: TrainConfig) -> float:
    lo = base * cfg.lr_final_factor
    return lo + 0.5 * (base - lo) * (1.0 + np.cos(np.pi * step / cfg.total_steps))


@dataclass
class StepReport:
    step: int
    total: float
    rgb: float
    depth: float
    geo: float
    w2: float
    w3: float
    lr: float
    supervised_depth_px: int
    geo_pairs: int
    geo_patches: int
    gaussians: int
    transfer_bytes: int
    imbalance: float
    max_tile_splats: int
    seconds: float
    grown: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step, "total": self.total, "rgb": self.rgb,
            "depth": self.depth, "geo": self.geo, "w2": self.w2, "w3": self.w3,
            "lr": self.lr, "depth_px": self.supervised_depth_px,
            "geo_pairs": self.geo_pairs, "geo_patches": self.geo_patches,
            "gaussians": self.gaussians, "transfer_bytes": self.transfer_bytes,
            "imbalance": self.imbalance, "max_tile_splats": self.max_tile_splats,
            "seconds": self.seconds, "grown": self.grown})


class TrainState:
    """Mutable training state: scene mirrors, decoder replicas, optimizer slots."""

    def __init__(self, scene: SceneModel, cfg: TrainConfig):
        cfg.validate()
        self.scene = scene
        self.cfg = cfg
        self.step = 0
        self.rng = np.random.default_rng(cfg.seed)
        base = DecoderParams.init(
            scene.offsets_per_voxel, seed=cfg.seed,
            scale_bias=float(np.log(cfg.init_scale_fraction * scene.base_voxel_size)))
        self.replicas: list[DecoderParams] = [base.clone() for _ in range(cfg.workers)]
        for t in self.replicas[0].tensors.values():
            t.requires_grad_(True)
        self.level_state: dict[int, dict[str, torch.Tensor]] = {}
        for k, lv in enumerate(scene.levels):
            self.level_state[k] = {
                "embeddings": torch.tensor(lv.embeddings, dtype=_T, requires_grad=True),
                "log_scales": torch.tensor(np.log(lv.scales), dtype=_T, requires_grad=True),
                "offsets": torch.tensor(lv.offsets, dtype=_T, requires_grad=True),
            }
        self.assignment: WorkerAssignment = assign_voxels(scene, cfg.workers)
        self.cost_model = PatchCostModel()
        self.moments: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        for name, t in self.replicas[0].tensors.items():
            self.moments[f"dec/{name}"] = (torch.zeros_like(t), torch.zeros_like(t))
        for k, st in self.level_state.items():
            for key, t in st.items():
                self.moments[f"lv{k}/{key}"] = (torch.zeros_like(t), torch.zeros_like(t))
        self.grow_sum: dict[int, np.ndarray] = {
            k: np.zeros(lv.count) for k, lv in enumerate(scene.levels)}
        self.grow_cnt: dict[int, np.ndarray] = {
            k: np.zeros(lv.count) for k, lv in enumerate(scene.levels)}
        self.grow_events: list[dict] = []

    # -- decoding-side views of the live state ---------------------------------

    def decode_state(self) -> dict[int, dict[str, torch.Tensor]]:
        """Per-level tensors in the shape the decoder consumes (scales > 0)."""
        return {k: {"embeddings": st["embeddings"],
                    "scales": torch.exp(st["log_scales"]),
                    "offsets": st["offsets"]}
                for k, st in self.level_state.items()}

    def barrier_check(self) -> None:
        for i, rep in enumerate(self.replicas[1:], start=1):
            if not params_equal(self.replicas[0], rep):
                raise ProtocolError(f"decoder replica {i} diverged from replica 0")

    def sync_to_scene(self) -> None:
        """Copy live tensors back into the scene's numpy arrays."""
        with torch.no_grad():
            for k, lv in enumerate(self.scene.levels):
                st = self.level_state[k]
                lv.embeddings = st["embeddings"].detach().numpy().copy()
                lv.scales = np.exp(st["log_scales"].detach().numpy())
                lv.offsets = st["offsets"].detach().numpy().copy()

    # -- optimizer --------------------------------------------------------------

    def _adam(self, name: str, tensor_grad: torch.Tensor, lr: float) -> torch.Tensor:
        m, v = self.moments[name]
        t = self.step + 1
        with torch.no_grad():
            m.mul_(self.cfg.beta1).add_(tensor_grad, alpha=1 - self.cfg.beta1)
            v.mul_(self.cfg.beta2).addcmul_(tensor_grad, tensor_grad,
                                            value=1 - self.cfg.beta2)
            mhat = m / (1 - self.cfg.beta1 ** t)
            vhat = v / (1 - self.cfg.beta2 ** t)
            return -lr * mhat / (vhat.sqrt() + ADAM_EPS)

    def apply_decoder_grads(self, grads: dict[str, torch.Tensor]) -> None:
        lr = cosine_lr(self.step, self.cfg.lr_decoder, self.cfg)
        for name in self.replicas[0].param_names(self.replicas[0].n):
            delta = self._adam(f"dec/{name}", grads[name], lr)
            with torch.no_grad():
                for rep in self.replicas:
                    rep.tensors[name].add_(delta)

    def apply_level_grads(self, level: int, grads: dict[str, torch.Tensor]) -> None:
        lrs = {"embeddings": self.cfg.lr_embeddings,
               "log_scales": self.cfg.lr_scales,
               "offsets": self.cfg.lr_offsets}
        for key, g in grads.items():
            lr = cosine_lr(self.step, lrs[key], self.cfg)
            delta = self._adam(f"lv{level}/{key}", g, lr)
            with torch.no_grad():
                self.level_state[level][key].add_(delta)


def make_state(scene: SceneModel, cfg: TrainConfig) -> TrainState:
    return TrainState(scene, cfg)


def _zeros_like_or(g, ref: torch.Tensor) -> torch.Tensor:
    return g if g is not None else torch.zeros_like(ref)


def train_step(state: TrainState, views: list[CameraView], images: list[np.ndarray],
               enhanced: list[EnhancedDepthMap | None] | None = None) -> StepReport:
    """One optimization step over a batch of views, canonical work order."""
    cfg = state.cfg
    t0 = time.perf_counter()
    state.barrier_check()
    w2, w3 = weight_schedule(state.step, cfg)
    schedule = schedule_patches(views, cfg.workers, state.cost_model)
    patches_by_view: dict[int, list[int]] = {}
    for j, p in enumerate(schedule.patches):
        patches_by_view.setdefault(p.view_id, []).append(j)

    dstate = state.decode_state()
    targets_list = []
    means_list = []
    batch_list = []
    counts_list = []
    view_secs = []
    transfer_bytes = 0
    for view in views:
        tv0 = time.perf_counter()
        workers_of_view = frozenset(
            int(schedule.workers[j]) for j in patches_by_view[view.view_id])
        batch, tstats = transfer_gaussians(
            view, state.scene, state.assignment, state.replicas[0],
            renderer_workers=workers_of_view, state=dstate, keep_graph=True)
        splats = project_splats(batch, view)
        targets, counts = rasterize_view(splats, view, ALL_TASKS)
        targets_list.append(targets)
        means_list.append(batch.means)
        batch_list.append(batch)
        counts_list.append(counts)
        transfer_bytes += tstats.bytes_moved
        view_secs.append(time.perf_counter() - tv0)

    rgb_loss = bl_rgb_loss([t.rgb for t in targets_list],
                           [torch.as_tensor(np.asarray(im, np.float64)) for im in images])
    total = rgb_loss
    depth_val = 0.0
    supervised = 0
    if w2 > 0 and enhanced is not None and any(e is not None for e in enhanced):
        have = [i for i, e in enumerate(enhanced) if e is not None]
        d_loss, supervised = e_depth_loss(
            [targets_list[i].depth for i in have],
            [targets_list[i].valid for i in have],
            [enhanced[i].values for i in have],
            [enhanced[i].valid for i in have])
        total = total + w2 * d_loss
        depth_val = float(d_loss.detach())
    geo_val = 0.0
    geo_pairs = geo_patches = 0
    if w3 > 0 and len(views) >= 2:
        g_loss, gstats = bl_geo_loss(targets_list, views, state.rng,
                                     patch_count=cfg.geo_patches,
                                     half=cfg.geo_patch_half)
        total = total + w3 * g_loss
        geo_val = float(g_loss.detach())
        geo_pairs, geo_patches = gstats.pairs_used, gstats.patches_used

    if not torch.isfinite(total):
        raise NumericalError(
            f"non-finite loss at step {state.step}: "
            f"rgb={float(rgb_loss.detach()):.4g} "
            f"depth={depth_val:.4g} geo={geo_val:.4g}")

    dec_tensors = state.replicas[0].tensors
    dec_names = list(dec_tensors.keys())
    level_keys = [(k, key) for k in sorted(state.level_state)
                  for key in ("embeddings", "log_scales", "offsets")]
    inputs = ([dec_tensors[n] for n in dec_names]
              + [state.level_state[k][key] for k, key in level_keys]
              + means_list)
    grads = torch.autograd.grad(total, inputs, allow_unused=True)
    nd = len(dec_names)
    nl = len(level_keys)
    dec_grads = {n: _zeros_like_or(g, dec_tensors[n])
                 for n, g in zip(dec_names, grads[:nd])}
    level_grads: dict[int, dict[str, torch.Tensor]] = {}
    for (k, key), g in zip(level_keys, grads[nd:nd + nl]):
        level_grads.setdefault(k, {})[key] = _zeros_like_or(
            g, state.level_state[k][key])
    mean_grads = grads[nd + nl:]

    # growth pressure: per-voxel average gradient norm of decoded positions
    for batch, mg in zip(batch_list, mean_grads):
        if mg is None or batch.count == 0:
            continue
        norms = np.linalg.norm(mg.detach().numpy(), axis=-1)
        for k in np.unique(batch.level):
            sel = batch.level == k
            np.add.at(state.grow_sum[int(k)], batch.voxel_index[sel], norms[sel])
            np.add.at(state.grow_cnt[int(k)], batch.voxel_index[sel], 1.0)

    state.apply_decoder_grads(dec_grads)
    for k in sorted(level_grads):
        state.apply_level_grads(k, level_grads[k])

    # fold measured view seconds into per-patch costs via tile overlap counts
    measured = np.zeros(len(schedule.patches))
    for view, counts, secs in zip(views, counts_list, view_secs):
        idx = patches_by_view[view.view_id]
        weights = counts.astype(np.float64) + 1.0
        share = weights / weights.sum()
        for j, s in zip(idx, share):
            measured[j] = secs * s
    stats = balance_report(state.assignment, schedule, measured,
                           epoch=state.step, cost_model=state.cost_model)

    report = StepReport(
        step=state.step, total=float(total.detach()),
        rgb=float(rgb_loss.detach()), depth=depth_val,
        geo=geo_val, w2=w2, w3=w3, lr=cosine_lr(state.step, cfg.lr_decoder, cfg),
        supervised_depth_px=supervised, geo_pairs=geo_pairs, geo_patches=geo_patches,
        gaussians=sum(b.count for b in batch_list), transfer_bytes=transfer_bytes,
        imbalance=stats.imbalance,
        max_tile_splats=int(max((int(c.max()) if len(c) else 0) for c in counts_list)),
        seconds=time.perf_counter() - t0)
    state.step += 1
    return report


def grow_anchors(state: TrainState) -> int:
    """Insert finer-level children under voxels with persistent gradient strain.

    A voxel at level k (< finest) whose decoded-position gradient norm,
    averaged over the window, exceeds the threshold gets its octant centroid
    cells at level k+1 (deduplicated) appended in a deterministic order.
    Accumulators reset afterwards.
    """
    cfg = state.cfg
    scene = state.scene
    grown = 0
    for k in range(scene.lod_count - 1):
        cnt = state.grow_cnt[k]
        if cnt.sum() == 0:
            continue
        mean = np.where(cnt > 0, state.grow_sum[k] / np.maximum(cnt, 1.0), 0.0)
        parents = np.flatnonzero(mean > cfg.growth_threshold)
        if parents.size == 0:
            continue
        child_lv = scene.levels[k + 1]
        parent_centers = scene.levels[k].centers[parents]
        cell = scene.levels[k].cell_size
        cand = (parent_centers[:, None, :]
                + OCTANT_SIGNS[None, :, :] * (cell / 4.0)).reshape(-1, 3)
        grid = quantize(cand, child_lv.cell_size)
        grid = np.unique(grid, axis=0)
        if child_lv.count:
            existing = {tuple(g) for g in child_lv.grid}
            fresh = np.array([g for g in grid if tuple(g) not in existing],
                             dtype=np.int64).reshape(-1, 3)
        else:
            fresh = grid
        if fresh.size == 0:
            continue
        v_new = len(fresh)
        n = scene.offsets_per_voxel
        emb_dim = child_lv.embeddings.shape[1]
        new_emb = state.rng.uniform(-0.01, 0.01, size=(v_new, emb_dim))
        new_scales = np.full((v_new, 3), child_lv.cell_size)
        new_offsets = state.rng.uniform(-0.5, 0.5, size=(v_new, n, 3))
        child_lv.grid = np.concatenate([child_lv.grid, fresh])
        child_lv.embeddings = np.concatenate([child_lv.embeddings, new_emb])
        child_lv.scales = np.concatenate([child_lv.scales, new_scales])
        child_lv.offsets = np.concatenate([child_lv.offsets, new_offsets])
        child_lv.owner = np.concatenate(
            [child_lv.owner,
             ((np.arange(v_new) + child_lv.count - v_new) % cfg.workers).astype(np.int32)])

        st = state.level_state[k + 1]
        with torch.no_grad():
            grown_state = {
                "embeddings": torch.cat([st["embeddings"].detach(),
                                         torch.tensor(new_emb, dtype=_T)]),
                "log_scales": torch.cat([st["log_scales"].detach(),
                                         torch.tensor(np.log(new_scales), dtype=_T)]),
                "offsets": torch.cat([st["offsets"].detach(),
                                      torch.tensor(new_offsets, dtype=_T)]),
            }
        for key, t in grown_state.items():
            t.requires_grad_(True)
            m, v = state.moments[f"lv{k + 1}/{key}"]
            pad = t.shape[0] - m.shape[0]
            zeros = torch.zeros((pad,) + tuple(m.shape[1:]), dtype=_T)
            state.moments[f"lv{k + 1}/{key}"] = (torch.cat([m, zeros]),
                                                 torch.cat([v, zeros]))
        state.level_state[k + 1] = grown_state
        grown += v_new
        state.grow_events.append({"step": state.step, "level": k + 1,
                                  "added": v_new, "parents": int(parents.size)})
    if grown:
        state.assignment = assign_voxels(scene, cfg.workers)
        scene.validate()
    for k, lv in enumerate(scene.levels):
        state.grow_sum[k] = np.zeros(lv.count)
        state.grow_cnt[k] = np.zeros(lv.count)
    return grown


def prepare_depth_priors(dataset: Dataset, indices: list[int],
                         tau: float) -> dict[int, EnhancedDepthMap]:
    """Fit, align, and cross-view-filter the monocular priors for the given views."""
    views = [dataset.views[i] for i in indices]
    aligned: dict[int, object] = {}
    for i in indices:
        raw = dataset.load_mono_depth(i)
        fit = fit_scale_shift(raw, dataset.views[i], dataset.points.positions)
        aligned[i] = apply_scale_shift(raw, fit)
    out: dict[int, EnhancedDepthMap] = {}
    for pos, i in enumerate(indices):
        nb = select_neighbors(views, pos)
        out[i] = enhance(aligned[i], dataset.views[i],
                         [(aligned[indices[j]], views[j]) for j in nb],
                         tau=tau)
    return out


def evaluate_psnr(state: TrainState, views: list[CameraView],
                  images: list[np.ndarray]) -> float:
    """Mean PSNR of current renders against reference images (no gradients)."""
    state.sync_to_scene()
    vals = []
    with torch.no_grad():
        for view, img in zip(views, images):
            batch, _ = transfer_gaussians(view, state.scene, state.assignment,
                                          state.replicas[0])
            splats = project_splats(batch, view)
            targets, _ = rasterize_view(splats, view, frozenset({"rgb"}))
            vals.append(psnr(targets.rgb.numpy(), img))
    return float(np.mean(vals))


def train_records(state: TrainState) -> dict[str, np.ndarray]:
    """Optimizer/train state as flat arrays for the snapshot container."""
    rec = {"meta_i": np.array([state.step, state.cfg.workers], np.int64)}
    for name, (m, v) in state.moments.items():
        rec[f"adam/{name}/m"] = m.numpy()
        rec[f"adam/{name}/v"] = v.numpy()
    for k in sorted(state.grow_sum):
        rec[f"grow/lv{k}/sum"] = state.grow_sum[k]
        rec[f"grow/lv{k}/cnt"] = state.grow_cnt[k]
    rng_blob = json.dumps(state.rng.bit_generator.state).encode()
    rec["rng_state"] = np.frombuffer(rng_blob, dtype=np.uint8).copy()
    return rec


def restore_train_records(state: TrainState, rec: dict[str, np.ndarray]) -> None:
    state.step = int(rec["meta_i"][0])
    for name in state.moments:
        m = torch.from_numpy(rec[f"adam/{name}/m"].copy())
        v = torch.from_numpy(rec[f"adam/{name}/v"].copy())
        state.moments[name] = (m, v)
    for k in sorted(state.grow_sum):
        state.grow_sum[k] = rec[f"grow/lv{k}/sum"].copy()
        state.grow_cnt[k] = rec[f"grow/lv{k}/cnt"].copy()
    rng_state = json.loads(rec["rng_state"].tobytes().decode())
    state.rng.bit_generator.state = rng_state


def save_checkpoint(path, state: TrainState) -> Path:
    state.sync_to_scene()
    state.barrier_check()
    return save_scene(path, state.scene, decoder=state.replicas[0],
                      extra={"TRN1": train_records(state)})


@dataclass
class RunResult:
    checkpoint: Path
    log_path: Path
    final: StepReport | None
    heldout_psnr: float | None
    grow_events: list[dict] = field(default_factory=list)


def run(cfg: TrainConfig, scene: SceneModel, dataset: Dataset, out_dir,
        quiet: bool = True) -> RunResult:
    """Full training loop: batching, staged losses, growth, logging, checkpoint."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ids = dataset.train_indices
    test_ids = dataset.test_indices
    if len(train_ids) < cfg.batch_size:
        raise InvalidInput(f"{len(train_ids)} training views cannot fill "
                           f"batches of {cfg.batch_size}")
    views = {i: dataset.views[i] for i in train_ids + test_ids}
    images = {i: dataset.load_image(i) for i in train_ids + test_ids}

    state = make_state(scene, cfg)
    priors: dict[int, EnhancedDepthMap] = {}
    if cfg.step2_start < cfg.total_steps and dataset.has_mono_depth():
        priors = prepare_depth_priors(dataset, train_ids, cfg.tau_depth)

    log_path = out / "train_log.jsonl"
    last: StepReport | None = None
    order: list[int] = []
    with log_path.open("w") as log:
        while state.step < cfg.total_steps:
            if (state.step and state.step < cfg.growth_stop
                    and state.step % cfg.growth_window == 0):
                added = grow_anchors(state)
                if added:
                    log.write(json.dumps({"event": "growth", "step": state.step,
                                          "added": added}) + "\n")
            if len(order) < cfg.batch_size:
                order = [train_ids[j] for j in
                         state.rng.permutation(len(train_ids))]
            take, order = order[:cfg.batch_size], order[cfg.batch_size:]
            report = train_step(
                state, [views[i] for i in take], [images[i] for i in take],
                [priors.get(i) for i in take] if priors else None)
            last = report
            if cfg.log_every and report.step % cfg.log_every == 0:
                log.write(report.to_json() + "\n")
                if not quiet:
                    print(report.to_json())
            if cfg.eval_every and test_ids and (report.step + 1) % cfg.eval_every == 0:
                val = evaluate_psnr(state, [views[i] for i in test_ids],
                                    [images[i] for i in test_ids])
                log.write(json.dumps({"event": "eval", "step": report.step,
                                      "heldout_psnr": val}) + "\n")
            if (cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0
                    and state.step < cfg.total_steps):
                save_checkpoint(out / f"checkpoint_{state.step:06d}.vsnap", state)
    ckpt = save_checkpoint(out / "checkpoint_final.vsnap", state)
    heldout = None
    if test_ids:
        heldout = evaluate_psnr(state, [views[i] for i in test_ids],
                                [images[i] for i in test_ids])
    return RunResult(checkpoint=ckpt, log_path=log_path, final=last,
                     heldout_psnr=heldout, grow_events=state.grow_events)
