"""Shared gaussian decoder.

One small network, replicated bitwise on every worker, decodes a voxel's
persistent state into its n gaussians. Three independent two-layer MLP heads
(tanh hidden layer of 64) map the concatenated input

    [embedding (32) | normalized camera distance (1) | view direction (3)]

to opacity (n), color (n*3), and covariance (n*7 = 3 log-scales + 4 raw
quaternion) per gaussian. Means are center + offset * scale, elementwise.

Everything runs in float64 torch so gradients come from autograd and can be
checked against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidInput, NumericalError, ProtocolError, StateError
from .geometry import CameraView
from .scene import EMBED_DIM, SceneModel, VoxelRecord, active_mask

HIDDEN = 64
IN_DIM = EMBED_DIM + 1 + 3
HEADS = ("opacity", "color", "cov")
MIN_SCALE = 1e-6

_T = torch.float64


def _head_out_dim(head: str, n: int) -> int:
    return {"opacity": n, "color": 3 * n, "cov": 7 * n}[head]


@dataclass
class DecoderParams:
    """Weights of the three decode heads plus the offsets-per-voxel count."""

    n: int
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    @staticmethod
    def param_names(n: int) -> list[str]:
        out = []
        for h in HEADS:
            out += [f"{h}_w1", f"{h}_b1", f"{h}_w2", f"{h}_b2"]
        return out

    @classmethod
    def init(cls, n: int, seed: int = 0,
             scale_bias: float | None = None) -> "DecoderParams":
        """Seeded uniform weights, zero biases.

        `scale_bias`, when given, presets the covariance head's log-scale
        outputs so freshly decoded gaussians start near exp(scale_bias)
        scene units instead of ~1; callers pass the log of a voxel-ish size.
        """
        if n < 1:
            raise InvalidInput("offsets per voxel must be >= 1")
        rng = np.random.default_rng(seed)
        t: dict[str, torch.Tensor] = {}
        for h in HEADS:
            out = _head_out_dim(h, n)
            lim1 = 1.0 / np.sqrt(IN_DIM)
            lim2 = 1.0 / np.sqrt(HIDDEN)
            t[f"{h}_w1"] = torch.from_numpy(rng.uniform(-lim1, lim1, (IN_DIM, HIDDEN)))
            t[f"{h}_b1"] = torch.zeros(HIDDEN, dtype=_T)
            t[f"{h}_w2"] = torch.from_numpy(rng.uniform(-lim2, lim2, (HIDDEN, out)))
            t[f"{h}_b2"] = torch.zeros(out, dtype=_T)
        if scale_bias is not None:
            b = t["cov_b2"].reshape(n, 7)
            with torch.no_grad():
                b[:, 0:3] = float(scale_bias)
        return cls(n=n, tensors=t)

    def clone(self) -> "DecoderParams":
        return DecoderParams(self.n, {k: v.detach().clone() for k, v in self.tensors.items()})

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.tensors.items()}

    @classmethod
    def from_arrays(cls, n: int, arrays: dict[str, np.ndarray]) -> "DecoderParams":
        t = {}
        for name in cls.param_names(n):
            if name not in arrays:
                raise InvalidInput(f"decoder checkpoint missing array {name}")
            t[name] = torch.from_numpy(np.ascontiguousarray(arrays[name], dtype=np.float64))
        return cls(n=n, tensors=t)

    def requires_grad_(self, flag: bool = True) -> "DecoderParams":
        for v in self.tensors.values():
            v.requires_grad_(flag)
        return self


def params_equal(a: DecoderParams, b: DecoderParams) -> bool:
    """Bitwise equality of two parameter sets."""
    if a.n != b.n or a.tensors.keys() != b.tensors.keys():
        return False
    return all(torch.equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def quat_to_rotmat_t(q: torch.Tensor) -> torch.Tensor:
    """Batched unit quaternion (...,4) to rotation matrices (...,3,3), torch."""
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], -2)


@dataclass
class GaussianBatch:
    """Decoded gaussians in canonical order (level-major, voxel, offset slot).

    Attribute tensors stay on the autograd graph when built with
    `keep_graph=True`; the id arrays are plain numpy bookkeeping.
    """

    means: torch.Tensor       # (G, 3) world
    opacities: torch.Tensor   # (G,)
    colors: torch.Tensor      # (G, 3)
    scales: torch.Tensor      # (G, 3)
    quats: torch.Tensor       # (G, 4) unit
    normals: torch.Tensor     # (G, 3) world, axis of smallest scale
    level: np.ndarray         # (G,)
    voxel_index: np.ndarray   # (G,) index within level
    owner: np.ndarray         # (G,)
    gid: np.ndarray           # (G,) stable id within this scene snapshot
    leaves: dict[str, torch.Tensor] | None = None

    @property
    def count(self) -> int:
        return int(self.means.shape[0])


def decode_inputs(centers: torch.Tensor, embeddings: torch.Tensor,
                  cam_center: torch.Tensor, lod_ref: float) -> torch.Tensor:
    """Assemble the (V, 36) decoder input block for one view."""
    rel = centers - cam_center
    dist = torch.linalg.norm(rel, dim=-1, keepdim=True).clamp_min(1e-12)
    return torch.cat([embeddings, dist / lod_ref, rel / dist], dim=-1)


def _head_forward(params: DecoderParams, head: str, x: torch.Tensor) -> torch.Tensor:
    t = params.tensors
    h = torch.tanh(x @ t[f"{head}_w1"] + t[f"{head}_b1"])
    return h @ t[f"{head}_w2"] + t[f"{head}_b2"]


def decode_arrays(params: DecoderParams, centers: torch.Tensor, embeddings: torch.Tensor,
                  scales: torch.Tensor, offsets: torch.Tensor, view: CameraView,
                  lod_ref: float, max_scale: float) -> dict[str, torch.Tensor]:
    """Decode V voxels worth of state into per-gaussian attribute tensors.

    Returns tensors shaped (V, n, ...) so callers can flatten in canonical
    order. `scales` is the voxel scale triple l_v (positive); `max_scale`
    caps the decoded gaussian extent at three base cells.
    """
    v = centers.shape[0]
    n = params.n
    cam = torch.as_tensor(view.center, dtype=_T)
    x = decode_inputs(centers, embeddings, cam, lod_ref)
    opacity = torch.sigmoid(_head_forward(params, "opacity", x)).reshape(v, n)
    color = torch.sigmoid(_head_forward(params, "color", x)).reshape(v, n, 3)
    cov = _head_forward(params, "cov", x).reshape(v, n, 7)
    g_scale = torch.clamp(torch.exp(cov[..., 0:3]), MIN_SCALE, max_scale)
    q_raw = cov[..., 3:7] + torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=_T)
    q = q_raw / torch.linalg.norm(q_raw, dim=-1, keepdim=True).clamp_min(1e-12)
    means = centers.unsqueeze(1) + offsets * scales.unsqueeze(1)
    rot = quat_to_rotmat_t(q)
    axis = torch.argmin(g_scale, dim=-1)
    normal = torch.take_along_dim(rot, axis[..., None, None].expand(v, n, 3, 1), dim=-1).squeeze(-1)
    return {"means": means, "opacities": opacity, "colors": color,
            "scales": g_scale, "quats": q, "normals": normal}


def decode_level(params: DecoderParams, scene: SceneModel, level: int,
                 indices: np.ndarray, view: CameraView, max_scale: float,
                 state: dict[str, torch.Tensor] | None = None,
                 keep_graph: bool = False) -> dict[str, torch.Tensor] | None:
    """Decode the given voxel indices of one level.

    `state`, when given, supplies live torch tensors (embeddings, scales,
    offsets) for the whole level, e.g. the trainer's learnable copies;
    otherwise the scene's numpy arrays are used read-only.
    """
    if indices.size == 0:
        return None
    lv = scene.levels[level]
    idx = torch.from_numpy(np.ascontiguousarray(indices, dtype=np.int64))
    centers = torch.from_numpy(lv.centers[indices])
    if state is not None:
        emb, sc, off = (state["embeddings"][idx], state["scales"][idx], state["offsets"][idx])
    else:
        emb = torch.from_numpy(lv.embeddings[indices])
        sc = torch.from_numpy(lv.scales[indices])
        off = torch.from_numpy(lv.offsets[indices])
    ctx = torch.enable_grad() if keep_graph else torch.no_grad()
    with ctx:
        return decode_arrays(params, centers, emb, sc, off, view,
                             scene.lod_ref_distance, max_scale)


def decode_active(params: DecoderParams, scene: SceneModel, view: CameraView,
                  state: dict[int, dict[str, torch.Tensor]] | None = None,
                  keep_graph: bool = False,
                  validate: bool = True) -> GaussianBatch:
    """Decode every voxel active for `view`, all levels, in canonical order."""
    n = params.n
    max_scale = 3.0 * scene.base_voxel_size
    parts: list[dict[str, torch.Tensor]] = []
    levels, vidx, owners = [], [], []
    gid_base = 0
    gids = []
    for k, lv in enumerate(scene.levels):
        mask = active_mask(scene, k, view)
        idx = np.flatnonzero(mask)
        lvl_state = state.get(k) if state is not None else None
        dec = decode_level(params, scene, k, idx, view, max_scale,
                           state=lvl_state, keep_graph=keep_graph)
        if dec is not None:
            parts.append(dec)
            levels.append(np.full(idx.size * n, k, dtype=np.int32))
            vidx.append(np.repeat(idx, n))
            owners.append(np.repeat(lv.owner[idx], n))
            gids.append((gid_base + idx[:, None] * n + np.arange(n)).reshape(-1))
        gid_base += lv.count * n
    if not parts:
        z3 = torch.zeros((0, 3), dtype=_T)
        return GaussianBatch(z3, torch.zeros(0, dtype=_T), z3.clone(), z3.clone(),
                             torch.zeros((0, 4), dtype=_T), z3.clone(),
                             np.zeros(0, np.int32), np.zeros(0, np.int64),
                             np.zeros(0, np.int32), np.zeros(0, np.int64))
    cat = {k: torch.cat([p[k].reshape(-1, *p[k].shape[2:]) for p in parts]) for k in parts[0]}
    batch = GaussianBatch(
        means=cat["means"], opacities=cat["opacities"], colors=cat["colors"],
        scales=cat["scales"], quats=cat["quats"], normals=cat["normals"],
        level=np.concatenate(levels), voxel_index=np.concatenate(vidx),
        owner=np.concatenate(owners), gid=np.concatenate(gids))
    if validate:
        for name in ("means", "opacities", "colors", "scales", "quats"):
            if not torch.all(torch.isfinite(getattr(batch, name))):
                raise NumericalError(f"non-finite decoder output in {name}")
    return batch


def decode(voxel: VoxelRecord, view: CameraView, params: DecoderParams,
           scene: SceneModel) -> dict[str, np.ndarray]:
    """Single-voxel convenience wrapper; returns numpy attribute arrays (n, ...)."""
    with torch.no_grad():
        dec = decode_arrays(
            params,
            torch.from_numpy(voxel.center.reshape(1, 3)),
            torch.from_numpy(np.ascontiguousarray(voxel.embedding).reshape(1, -1)),
            torch.from_numpy(np.ascontiguousarray(voxel.scale).reshape(1, 3)),
            torch.from_numpy(np.ascontiguousarray(voxel.offsets).reshape(1, -1, 3)),
            view, scene.lod_ref_distance, 3.0 * scene.base_voxel_size)
    return {k: v[0].numpy() for k, v in dec.items()}


def decoder_backward(outputs: dict[str, torch.Tensor],
                     upstream: dict[str, torch.Tensor | np.ndarray],
                     leaves: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Pull upstream gradients on decoded attributes back to decoder leaves.

    `outputs` are graph tensors from a keep_graph decode, `upstream` matching
    cotangents (missing keys mean zero), `leaves` the named leaf tensors
    (decoder weights and/or voxel state) to differentiate with respect to.
    """
    outs, cots = [], []
    seen = 0
    for k, out in outputs.items():
        if k in upstream and upstream[k] is not None:
            seen += 1
            if out.requires_grad:   # constant outputs contribute zero gradient
                outs.append(out)
                cots.append(torch.as_tensor(upstream[k], dtype=_T).reshape(out.shape))
    if seen == 0:
        raise InvalidInput("no upstream gradients supplied")
    if not outs:
        raise StateError("decode was not run with keep_graph=True")
    names = list(leaves.keys())
    grads = torch.autograd.grad(outs, [leaves[n] for n in names], grad_outputs=cots,
                                retain_graph=True, allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(leaves[n]))
            for n, g in zip(names, grads)}


def sync_params(worker_grads: list[dict[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    """All-reduce simulation: arithmetic mean of gradient sets in worker-id order."""
    if not worker_grads:
        raise ProtocolError("sync called with no participants")
    keys = list(worker_grads[0].keys())
    for i, g in enumerate(worker_grads):
        if list(g.keys()) != keys:
            raise ProtocolError(f"worker {i} gradient keys differ")
        for k in keys:
            if g[k].shape != worker_grads[0][k].shape:
                raise ProtocolError(f"worker {i} gradient shape differs for {k}")
    out: dict[str, torch.Tensor] = {}
    for k in keys:
        acc = worker_grads[0][k].clone()
        for g in worker_grads[1:]:
            acc = acc + g[k]
        out[k] = acc / len(worker_grads)
    return out
