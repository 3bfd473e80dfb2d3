"""Patch-parallel multi-task rasterizer.

Gaussians are projected with the EWA approximation (perspective Jacobian at
the mean, plus a 0.3 px low-pass), globally sorted by camera depth with
gaussian id as the tie breaker, binned to 16x16 pixel tiles by their 3-sigma
screen radius, and alpha-blended front to back per pixel with transmittance
early-out below 1e-4.

Three quantities blend with the same weights w_i = alpha_i * T_i: color, the
camera-frame per-gaussian normal (axis of smallest scale, flipped to face the
camera), and the signed plane offset d_i = n_i . mu_cam,i. Depth is the
quotient D / (N . K^-1 p), which for coplanar contributors equals the exact
ray-plane z-depth because the accumulated-alpha factor cancels; the stored
normal buffer is renormalized to unit length.

The tile loop is expressed as one padded tensor computation per view, so the
result is bitwise independent of how patches are later distributed across
workers. All math is float64 torch; backward surfaces are autograd over this
forward graph.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

from .decoder import DecoderParams, GaussianBatch, decode_active, quat_to_rotmat_t
from .errors import ContractViolation, InvalidInput, NumericalError, TransferError
from .geometry import CameraView
from .partition import PATCH, PatchRect, WorkerAssignment, patchify
from .scene import SceneModel

_T = torch.float64

Z_NEAR = 0.01
ALPHA_CLAMP = 0.99
EARLY_STOP_T = 1e-4
ALPHA_VALID_MIN = 1e-4
DENOM_GUARD = 1e-6
LOWPASS = 0.3
BYTES_PER_GAUSSIAN = 17 * 8   # mean3 + opacity1 + color3 + scale3 + quat4 + normal3, float64

ALL_TASKS = frozenset({"rgb", "depth", "normal", "alpha"})


@dataclass
class ProjectedSplats:
    """Screen-space gaussians for one view, sorted by (camera z, gaussian id)."""

    mean2d: torch.Tensor      # (G, 2)
    conic: torch.Tensor       # (G, 3) inverse 2d covariance packed (a, b, c)
    color: torch.Tensor       # (G, 3)
    opacity: torch.Tensor     # (G,)
    normal_cam: torch.Tensor  # (G, 3) unit, faces the camera
    plane_d: torch.Tensor     # (G,) signed plane offset n . mu_cam
    radius: np.ndarray        # (G,) 3-sigma pixel radius, detached
    zkey: np.ndarray          # (G,) camera z used for ordering, detached
    gid: np.ndarray           # (G,)
    owner: np.ndarray         # (G,)
    leaves: dict[str, torch.Tensor] | None = None

    @property
    def count(self) -> int:
        return int(self.mean2d.shape[0])

    def assert_sorted(self) -> None:
        if self.count < 2:
            return
        dz = np.diff(self.zkey)
        ties = dz == 0
        if np.any(dz < 0) or np.any(np.diff(self.gid)[ties] <= 0):
            raise ContractViolation("splats are not sorted by (z, gid)")


@dataclass
class TransferStats:
    gaussians: int
    bytes_moved: int
    per_worker_bytes: np.ndarray


@dataclass
class RenderTargets:
    """Per-pixel outputs; tensors stay on the autograd graph when requested."""

    rgb: torch.Tensor          # (H, W, 3)
    depth: torch.Tensor        # (H, W)
    normal: torch.Tensor       # (H, W, 3) unit where valid, zero elsewhere
    alpha: torch.Tensor        # (H, W)
    valid: torch.Tensor        # (H, W) bool, False where alpha/denominator guards fire
    raw_normal: torch.Tensor   # (H, W, 3) unnormalized blended normal (depth quotient input)

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).detach().numpy().copy()
                for k in ("rgb", "depth", "normal", "alpha", "valid")}


@dataclass
class RenderStats:
    gaussians: int = 0
    tile_splat_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    elapsed_seconds: float = 0.0
    transfer: TransferStats | None = None


def make_leaf_gaussians(means, opacities, colors, scales, quats,
                        normals=None, requires_grad: bool = False):
    """Build raw gaussian attribute tensors (leaves) from arrays.

    When `normals` is omitted they derive from the rotation's smallest-scale
    axis, matching the decoder's convention.
    """
    t = {
        "means": torch.as_tensor(np.asarray(means, np.float64)).reshape(-1, 3).clone(),
        "opacities": torch.as_tensor(np.asarray(opacities, np.float64)).reshape(-1).clone(),
        "colors": torch.as_tensor(np.asarray(colors, np.float64)).reshape(-1, 3).clone(),
        "scales": torch.as_tensor(np.asarray(scales, np.float64)).reshape(-1, 3).clone(),
        "quats": torch.as_tensor(np.asarray(quats, np.float64)).reshape(-1, 4).clone(),
    }
    if requires_grad:
        for v in t.values():
            v.requires_grad_(True)
    q = t["quats"] / torch.linalg.norm(t["quats"], dim=-1, keepdim=True).clamp_min(1e-12)
    if normals is None:
        rot = quat_to_rotmat_t(q)
        axis = torch.argmin(t["scales"], dim=-1)
        nrm = torch.take_along_dim(rot, axis[:, None, None].expand(-1, 3, 1), -1).squeeze(-1)
    else:
        nrm = torch.as_tensor(np.asarray(normals, np.float64)).reshape(-1, 3)
    g = t["means"].shape[0]
    batch = GaussianBatch(
        means=t["means"], opacities=t["opacities"], colors=t["colors"],
        scales=t["scales"], quats=q, normals=nrm,
        level=np.zeros(g, np.int32), voxel_index=np.arange(g, dtype=np.int64),
        owner=np.zeros(g, np.int32), gid=np.arange(g, dtype=np.int64),
        leaves=t if requires_grad else None)
    return batch


def project_splats(batch: GaussianBatch, view: CameraView) -> ProjectedSplats:
    """EWA-project a gaussian batch into one view and sort by (z, gid).

    Gaussians with camera z <= 0.01 are culled. The 2d covariance is
    J W Sigma W^T J^T + 0.3 I with J the perspective Jacobian at the mean.
    """
    r = torch.as_tensor(view.r, dtype=_T)
    t = torch.as_tensor(view.t, dtype=_T)
    mu_cam_all = batch.means @ r.T + t
    keep_np = np.flatnonzero(mu_cam_all[:, 2].detach().numpy() > Z_NEAR)
    keep = torch.from_numpy(keep_np)
    mu_cam = mu_cam_all[keep]
    g = mu_cam.shape[0]
    if g == 0:
        empty = torch.zeros((0,), dtype=_T)
        return ProjectedSplats(torch.zeros((0, 2), dtype=_T), torch.zeros((0, 3), dtype=_T),
                               torch.zeros((0, 3), dtype=_T), empty,
                               torch.zeros((0, 3), dtype=_T), empty.clone(),
                               np.zeros(0), np.zeros(0), np.zeros(0, np.int64),
                               np.zeros(0, np.int32), batch.leaves)
    x, y, z = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    mean2d = torch.stack([view.fx * x / z + view.cx, view.fy * y / z + view.cy], dim=-1)

    rot = quat_to_rotmat_t(batch.quats[keep])
    s2 = batch.scales[keep] ** 2
    sigma_w = rot @ (s2.unsqueeze(-1) * rot.transpose(-1, -2))
    sigma_c = r @ sigma_w @ r.T
    zi = 1.0 / z
    j = torch.zeros((g, 2, 3), dtype=_T)
    j[:, 0, 0] = view.fx * zi
    j[:, 0, 2] = -view.fx * x * zi * zi
    j[:, 1, 1] = view.fy * zi
    j[:, 1, 2] = -view.fy * y * zi * zi
    cov2d = j @ sigma_c @ j.transpose(-1, -2)
    a = cov2d[:, 0, 0] + LOWPASS
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + LOWPASS
    det = a * c - b * b
    if torch.any(det.detach() <= 0):
        raise NumericalError("non positive definite 2d covariance")
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    mid = 0.5 * (a + c)
    lam_max = mid + torch.sqrt(torch.clamp(0.25 * (a - c) ** 2 + b * b, min=0.0))
    radius = (3.0 * torch.sqrt(lam_max)).detach().numpy()

    n_cam = batch.normals[keep] @ r.T
    face = torch.sign((n_cam * mu_cam).sum(-1)).detach()
    flip = torch.where(face > 0, -torch.ones_like(face), torch.ones_like(face))
    n_cam = n_cam * flip.unsqueeze(-1)
    plane_d = (n_cam * mu_cam).sum(-1)

    zkey = z.detach().numpy()
    gid = batch.gid[keep_np]
    order_np = np.lexsort((gid, zkey))
    order = torch.from_numpy(order_np)
    return ProjectedSplats(
        mean2d=mean2d[order], conic=conic[order],
        color=batch.colors[keep][order], opacity=batch.opacities[keep][order],
        normal_cam=n_cam[order], plane_d=plane_d[order],
        radius=radius[order_np], zkey=zkey[order_np], gid=gid[order_np],
        owner=batch.owner[keep_np][order_np], leaves=batch.leaves)


def bin_splats(splats: ProjectedSplats, width: int, height: int) -> list[np.ndarray]:
    """Per-tile splat index lists (ascending, so global z order is preserved)."""
    tx_n = (width + PATCH - 1) // PATCH
    ty_n = (height + PATCH - 1) // PATCH
    tiles: list[list[int]] = [[] for _ in range(tx_n * ty_n)]
    u = splats.mean2d[:, 0].detach().numpy()
    v = splats.mean2d[:, 1].detach().numpy()
    r = splats.radius
    for i in range(splats.count):
        x0 = max(int(np.floor((u[i] - r[i]) / PATCH)), 0)
        x1 = min(int(np.floor((u[i] + r[i]) / PATCH)), tx_n - 1)
        y0 = max(int(np.floor((v[i] - r[i]) / PATCH)), 0)
        y1 = min(int(np.floor((v[i] + r[i]) / PATCH)), ty_n - 1)
        if x1 < x0 or y1 < y0:
            continue
        for ty in range(y0, y1 + 1):
            base = ty * tx_n
            for tx in range(x0, x1 + 1):
                tiles[base + tx].append(i)
    return [np.asarray(t, dtype=np.int64) for t in tiles]


def splats_for_rect(splats: ProjectedSplats, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Indices of splats whose 3-sigma box intersects a pixel rect.

    The rect [x0, x0+w) x [y0, y0+h) uses the same half-open overlap rule as
    bin_splats, so a tile-aligned rect selects exactly the binned set.
    """
    u = splats.mean2d[:, 0].detach().numpy()
    v = splats.mean2d[:, 1].detach().numpy()
    r = splats.radius
    hit = (u + r >= x0) & (u - r < x0 + w) & (v + r >= y0) & (v - r < y0 + h)
    return np.flatnonzero(hit)


def _blend_padded(splats: ProjectedSplats, idx_mat: np.ndarray, pad_mask: np.ndarray,
                  pix_u: torch.Tensor, pix_v: torch.Tensor, view: CameraView,
                  tasks: frozenset[str]) -> dict[str, torch.Tensor]:
    """Front-to-back blend for T tiles at once; padding rows carry alpha 0.

    idx_mat (T, L) indexes sorted splats; pad entries may point anywhere.
    pix_u/pix_v are (T, P) pixel-center coordinates.
    """
    idx = torch.from_numpy(idx_mat)
    mask = torch.from_numpy(pad_mask.astype(np.float64))
    mean = splats.mean2d[idx]                       # (T, L, 2)
    conic = splats.conic[idx]
    dx = pix_u.unsqueeze(1) - mean[..., 0:1]        # (T, L, P)
    dy = pix_v.unsqueeze(1) - mean[..., 1:2]
    power = -0.5 * (conic[..., 0:1] * dx * dx
                    + 2.0 * conic[..., 1:2] * dx * dy
                    + conic[..., 2:3] * dy * dy)
    alpha = splats.opacity[idx].unsqueeze(-1) * torch.exp(torch.clamp(power, max=0.0))
    alpha = torch.clamp(alpha, max=ALPHA_CLAMP) * mask.unsqueeze(-1)
    trans = torch.cumprod(1.0 - alpha, dim=1)
    t_prev = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
    live = (t_prev >= EARLY_STOP_T).to(_T).detach()
    w = alpha * t_prev * live                        # (T, L, P)

    out: dict[str, torch.Tensor] = {"alpha": w.sum(dim=1)}
    if "rgb" in tasks:
        out["rgb"] = torch.einsum("tlp,tlc->tpc", w, splats.color[idx])
    need_normal = "normal" in tasks or "depth" in tasks
    if need_normal:
        out["raw_normal"] = torch.einsum("tlp,tlc->tpc", w, splats.normal_cam[idx])
    if "depth" in tasks:
        out["dist"] = (w * splats.plane_d[idx].unsqueeze(-1)).sum(dim=1)
        rx = (pix_u - view.cx) / view.fx
        ry = (pix_v - view.cy) / view.fy
        out["denom"] = (out["raw_normal"][..., 0] * rx
                        + out["raw_normal"][..., 1] * ry
                        + out["raw_normal"][..., 2])
    return out


def _finalize(raw: dict[str, torch.Tensor], tasks: frozenset[str]):
    """Apply validity guards; returns per-pixel output dict plus the valid mask."""
    a = raw["alpha"]
    covered = a >= ALPHA_VALID_MIN
    out: dict[str, torch.Tensor] = {"alpha": a}
    if "rgb" in tasks:
        out["rgb"] = raw["rgb"]
    valid = covered
    if "depth" in tasks:
        denom = raw["denom"]
        valid = covered & (denom.abs() >= DENOM_GUARD)
        safe = torch.where(valid, denom, torch.ones_like(denom))
        out["depth"] = torch.where(valid, raw["dist"] / safe, torch.zeros_like(denom))
    if "normal" in tasks:
        nr = raw["raw_normal"]
        nn = torch.linalg.norm(nr, dim=-1, keepdim=True).clamp_min(1e-12)
        out["normal"] = torch.where(covered.unsqueeze(-1), nr / nn, torch.zeros_like(nr))
    if "depth" in tasks or "normal" in tasks:
        out["raw_normal"] = raw["raw_normal"]
    return out, valid


def rasterize_patch(patch: PatchRect, splats: ProjectedSplats,
                    view: CameraView, tasks: frozenset[str] = ALL_TASKS,
                    indices: np.ndarray | None = None) -> dict[str, torch.Tensor]:
    """Rasterize one pixel rectangle; returns (h, w[, c]) tensors plus 'valid'.

    Splats must arrive in (z, gid) order; indices, when given, select the
    patch's overlap set and must be ascending.
    """
    splats.assert_sorted()
    if indices is None:
        indices = splats_for_rect(splats, patch.x0, patch.y0, patch.width, patch.height)
    elif indices.size > 1 and np.any(np.diff(indices) <= 0):
        raise ContractViolation("patch splat indices must be ascending")
    uu, vv = np.meshgrid(np.arange(patch.x0, patch.x0 + patch.width, dtype=np.float64),
                         np.arange(patch.y0, patch.y0 + patch.height, dtype=np.float64))
    pix_u = torch.from_numpy(uu.reshape(1, -1))
    pix_v = torch.from_numpy(vv.reshape(1, -1))
    p = patch.width * patch.height
    if indices.size == 0:
        z = torch.zeros((patch.height, patch.width), dtype=_T)
        out = {"alpha": z.clone(), "valid": torch.zeros_like(z, dtype=torch.bool)}
        if "rgb" in tasks:
            out["rgb"] = torch.zeros((patch.height, patch.width, 3), dtype=_T)
        if "depth" in tasks:
            out["depth"] = z.clone()
        if "normal" in tasks:
            out["normal"] = torch.zeros((patch.height, patch.width, 3), dtype=_T)
        return out
    idx_mat = indices.reshape(1, -1)
    pad = np.ones((1, indices.size), dtype=bool)
    raw = _blend_padded(splats, idx_mat, pad, pix_u, pix_v, view, tasks)
    fin, valid = _finalize(raw, tasks)
    shaped: dict[str, torch.Tensor] = {"valid": valid.reshape(patch.height, patch.width)}
    for k, t in fin.items():
        if k == "raw_normal":
            continue
        if t.dim() == 3:
            shaped[k] = t.reshape(patch.height, patch.width, t.shape[-1])
        else:
            shaped[k] = t.reshape(patch.height, patch.width)
    return shaped


def rasterize_backward(splats: ProjectedSplats, outputs: dict[str, torch.Tensor],
                       upstream: dict[str, torch.Tensor | np.ndarray]) -> dict[str, torch.Tensor]:
    """Gradients of patch outputs w.r.t. the 3d gaussian attribute leaves.

    `outputs` must come from a rasterize call over splats projected from
    leaf tensors (make_leaf_gaussians(..., requires_grad=True)).
    """
    if splats.leaves is None:
        raise InvalidInput("splats were not projected from leaf tensors")
    outs, cots = [], []
    for k, t in outputs.items():
        if k in upstream and upstream[k] is not None and t.dtype is _T:
            outs.append(t)
            cots.append(torch.as_tensor(upstream[k], dtype=_T).reshape(t.shape))
    if not outs:
        raise InvalidInput("no upstream gradients supplied")
    names = list(splats.leaves.keys())
    grads = torch.autograd.grad(outs, [splats.leaves[n] for n in names],
                                grad_outputs=cots, retain_graph=True, allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(splats.leaves[n]))
            for n, g in zip(names, grads)}


@lru_cache(maxsize=8)
def _tile_pixel_grids(width: int, height: int):
    tx_n = (width + PATCH - 1) // PATCH
    ty_n = (height + PATCH - 1) // PATCH
    t = tx_n * ty_n
    du, dv = np.meshgrid(np.arange(PATCH), np.arange(PATCH))
    du, dv = du.reshape(-1), dv.reshape(-1)
    pix_u = np.empty((t, PATCH * PATCH))
    pix_v = np.empty((t, PATCH * PATCH))
    for ty in range(ty_n):
        for tx in range(tx_n):
            pix_u[ty * tx_n + tx] = tx * PATCH + du
            pix_v[ty * tx_n + tx] = ty * PATCH + dv
    in_img = (pix_u < width) & (pix_v < height)
    pix_u.setflags(write=False)
    pix_v.setflags(write=False)
    in_img.setflags(write=False)
    return pix_u, pix_v, in_img


def rasterize_view(splats: ProjectedSplats, view: CameraView,
                   tasks: frozenset[str] = ALL_TASKS) -> tuple[RenderTargets, np.ndarray]:
    """Rasterize every tile of a view in one padded pass and stitch the image.

    Also returns per-tile splat-overlap counts (the patch cost driver).
    Tile traversal order is canonical row-major, so the result is bitwise
    independent of any worker assignment of patches.
    """
    splats.assert_sorted()
    h, w_img = view.height, view.width
    zero3 = torch.zeros((h, w_img, 3), dtype=_T)
    zero1 = torch.zeros((h, w_img), dtype=_T)
    targets = RenderTargets(rgb=zero3.clone(), depth=zero1.clone(), normal=zero3.clone(),
                            alpha=zero1.clone(), valid=torch.zeros((h, w_img), dtype=torch.bool),
                            raw_normal=zero3.clone())
    tiles = bin_splats(splats, w_img, h)
    counts = np.array([len(t) for t in tiles], dtype=np.int64)
    if splats.count == 0 or counts.sum() == 0:
        return targets, counts
    pix_u, pix_v, in_img = _tile_pixel_grids(w_img, h)
    busy = np.flatnonzero(counts > 0)
    # Tiles are padded to the next power of two of their splat count and
    # blended one size-bucket at a time: identical math per tile, but without
    # stretching every tile to the global maximum. Buckets depend only on the
    # per-tile counts, so the output stays canonical.
    plen = np.int64(1) << np.int64(np.ceil(np.log2(counts[busy]))).clip(min=0)
    for size in np.unique(plen):
        rows = busy[plen == size]
        idx_mat = np.zeros((rows.size, int(size)), dtype=np.int64)
        pad = np.zeros((rows.size, int(size)), dtype=bool)
        for row, t in enumerate(rows):
            lst = tiles[t]
            idx_mat[row, :lst.size] = lst
            pad[row, :lst.size] = True
        raw = _blend_padded(splats, idx_mat, pad,
                            torch.from_numpy(pix_u[rows]), torch.from_numpy(pix_v[rows]),
                            view, tasks)
        fin, valid = _finalize(raw, tasks)

        keep = in_img[rows]
        flat = (pix_v[rows] * w_img + pix_u[rows]).astype(np.int64)
        sel = torch.from_numpy(flat[keep])
        kmask = torch.from_numpy(keep)

        def scatter(field_t: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
            flat_img = image.reshape(h * w_img, *field_t.shape[2:])
            vals = field_t[kmask]
            return flat_img.index_put((sel,), vals).reshape(image.shape)

        targets.alpha = scatter(fin["alpha"], targets.alpha)
        targets.valid = scatter(valid, targets.valid)
        if "rgb" in tasks:
            targets.rgb = scatter(fin["rgb"], targets.rgb)
        if "depth" in tasks:
            targets.depth = scatter(fin["depth"], targets.depth)
        if "normal" in tasks:
            targets.normal = scatter(fin["normal"], targets.normal)
        if "raw_normal" in fin:
            targets.raw_normal = scatter(fin["raw_normal"], targets.raw_normal)
    return targets, counts


def transfer_gaussians(view: CameraView, scene: SceneModel, assignment: WorkerAssignment,
                       params: DecoderParams, renderer_workers: frozenset[int] = frozenset({0}),
                       state=None, keep_graph: bool = False) -> tuple[GaussianBatch, TransferStats]:
    """Decode all view-active voxels and account the bytes crossing workers.

    Every worker rendering a patch of this view receives the full active set;
    bytes count the gaussians it does not own. The batch itself is canonical
    and independent of the worker count.
    """
    batch = decode_active(params, scene, view, state=state, keep_graph=keep_graph)
    per_worker = np.zeros(assignment.num_workers, dtype=np.int64)
    if batch.count:
        owner_counts = np.bincount(batch.owner, minlength=assignment.num_workers)
        for w in renderer_workers:
            if w >= assignment.num_workers:
                raise InvalidInput(f"renderer worker {w} out of range")
            foreign = batch.count - int(owner_counts[w])
            per_worker[w] = foreign * BYTES_PER_GAUSSIAN
            if foreign and assignment.unreachable:
                bad = set(np.unique(batch.owner).tolist()) & (set(assignment.unreachable) - {w})
                if bad:
                    raise TransferError(f"owner worker(s) {sorted(bad)} unreachable")
    stats = TransferStats(gaussians=batch.count,
                          bytes_moved=int(per_worker.sum()),
                          per_worker_bytes=per_worker)
    return batch, stats


def render_view(view: CameraView, scene: SceneModel, assignment: WorkerAssignment,
                params: DecoderParams, tasks: frozenset[str] = ALL_TASKS,
                renderer_workers: frozenset[int] = frozenset({0}),
                state=None, keep_graph: bool = False) -> tuple[RenderTargets, RenderStats]:
    """Full single-view pipeline: decode active voxels, project, rasterize."""
    t0 = time.perf_counter()
    batch, tstats = transfer_gaussians(view, scene, assignment, params,
                                       renderer_workers=renderer_workers,
                                       state=state, keep_graph=keep_graph)
    splats = project_splats(batch, view)
    targets, counts = rasterize_view(splats, view, tasks)
    stats = RenderStats(gaussians=batch.count, tile_splat_counts=counts,
                        elapsed_seconds=time.perf_counter() - t0, transfer=tstats)
    return targets, stats


def render_gaussians(view: CameraView, means, opacities, colors, scales, quats,
                     normals=None, tasks: frozenset[str] = ALL_TASKS,
                     requires_grad: bool = False) -> tuple[RenderTargets, ProjectedSplats]:
    """Render a raw gaussian set (no scene/decoder), e.g. synthetic ground truth."""
    batch = make_leaf_gaussians(means, opacities, colors, scales, quats,
                                normals=normals, requires_grad=requires_grad)
    splats = project_splats(batch, view)
    targets, _ = rasterize_view(splats, view, tasks)
    return targets, splats
