"""Small constructors and gradient-check machinery shared across test modules."""

from __future__ import annotations

import numpy as np
import torch

from voxsplat.geometry import CameraView, look_at, rotmat_to_quat


def make_view(view_id: int = 0, width: int = 64, height: int = 48,
              eye=(0.0, 0.0, -3.0), target=(0.0, 0.0, 0.0),
              focal: float = 60.0) -> CameraView:
    r, t = look_at(np.asarray(eye, float), np.asarray(target, float))
    return CameraView(view_id=view_id, width=width, height=height,
                      fx=focal, fy=focal, cx=(width - 1) / 2.0,
                      cy=(height - 1) / 2.0, r=r, t=t)


def identity_view(view_id: int = 0, width: int = 64, height: int = 48,
                  focal: float = 60.0) -> CameraView:
    """Camera at the world origin looking straight down world +z."""
    return CameraView(view_id=view_id, width=width, height=height,
                      fx=focal, fy=focal, cx=(width - 1) / 2.0,
                      cy=(height - 1) / 2.0, r=np.eye(3), t=np.zeros(3))


# --- finite differences -----------------------------------------------------
#
# Gradient checks rebuild the whole forward from perturbed numpy arrays, so
# they exercise exactly the public path a caller uses. Instances are built
# with margins that keep every non-differentiable guard (alpha clamp,
# transmittance early-out, validity masks, argmin axes, facing flips) from
# flipping under the probe step.

FD_H = 1e-5
FD_REL = 2e-3
FD_ABS = 1e-7


def assert_grads_close(pairs, rel: float = FD_REL, abs_floor: float = FD_ABS,
                       label: str = "") -> None:
    """Each (analytic, fd) pair must satisfy |a-f| <= rel*max(|a|,|f|) + floor."""
    for i, (an, fd) in enumerate(pairs):
        tol = rel * max(abs(an), abs(fd)) + abs_floor
        assert abs(an - fd) <= tol, (
            f"{label} probe {i}: analytic {an:.10g} vs fd {fd:.10g} "
            f"(diff {abs(an - fd):.3g} > tol {tol:.3g})")


def central_diff(f, arrays: dict, name: str, index: int, h: float = FD_H) -> float:
    work = {k: v.copy() for k, v in arrays.items()}
    flat = work[name].reshape(-1)
    flat[index] += h
    up = f(work)
    flat[index] -= 2 * h
    down = f(work)
    return (up - down) / (2.0 * h)


def probe_pairs(f, arrays: dict, analytic: dict, rng: np.random.Generator,
                probes_per_leaf: int = 3, h: float = FD_H):
    """(analytic, central-difference) pairs at random coordinates of each leaf."""
    pairs = []
    for name in sorted(analytic):
        g = np.asarray(analytic[name]).reshape(-1)
        take = min(probes_per_leaf, g.size)
        for idx in rng.choice(g.size, size=take, replace=False):
            pairs.append((float(g[idx]), central_diff(f, arrays, name, int(idx), h)))
    return pairs


def random_leaf_arrays(rng: np.random.Generator, count: int = 4,
                       view: CameraView | None = None) -> dict:
    """Random gaussians projecting inside the view with guard margins.

    Scale triples keep a >= 0.04 gap so the min-scale axis cannot swap under
    an FD step; instances are re-rolled until every normal has |n.mu| >= 0.05
    in camera space so the facing flip cannot change sign either.
    """
    view = view or identity_view(width=16, height=16, focal=20.0)
    while True:
        z = rng.uniform(1.6, 2.6, size=count)
        u = rng.uniform(3.0, 12.0, size=count)
        v = rng.uniform(3.0, 12.0, size=count)
        means = np.stack([(u - view.cx) / view.fx * z,
                          (v - view.cy) / view.fy * z, z], axis=-1)
        bands = np.stack([rng.uniform(0.04, 0.08, count),
                          rng.uniform(0.13, 0.18, count),
                          rng.uniform(0.22, 0.30, count)], axis=-1)
        scales = np.stack([r[rng.permutation(3)] for r in bands])
        quats = rng.normal(size=(count, 4))
        quats /= np.linalg.norm(quats, axis=-1, keepdims=True)
        arrays = {"means": means,
                  "opacities": rng.uniform(0.25, 0.7, size=count),
                  "colors": rng.uniform(0.1, 0.9, size=(count, 3)),
                  "scales": scales, "quats": quats}
        from voxsplat.geometry import quat_to_rotmat
        rots = quat_to_rotmat(quats)
        axes = np.argmin(scales, axis=-1)
        normals = rots[np.arange(count), :, axes]
        if np.min(np.abs(np.sum(normals * means, axis=-1))) >= 0.05:
            return arrays


def rasterizer_fd_pairs(seed: int, probes_per_leaf: int = 3):
    """(analytic, fd) gradient pairs for a random rasterization micro-instance.

    The scalar objective is a fixed random weighting of the rendered rgb,
    alpha, depth, and normal buffers; depth and normal cotangents are masked
    to pixels with comfortable margins from the validity guards, and the mask
    is frozen before probing.
    """
    from voxsplat.renderer import (make_leaf_gaussians, project_splats,
                                   rasterize_view)
    rng = np.random.default_rng(seed)
    view = identity_view(width=16, height=16, focal=20.0)
    arrays = random_leaf_arrays(rng, count=4, view=view)

    def forward(arr, requires_grad=False):
        batch = make_leaf_gaussians(arr["means"], arr["opacities"], arr["colors"],
                                    arr["scales"], arr["quats"],
                                    requires_grad=requires_grad)
        splats = project_splats(batch, view)
        targets, _ = rasterize_view(splats, view)
        return targets, splats

    base, _ = forward(arrays)
    rx = (np.arange(view.width) - view.cx) / view.fx
    ry = (np.arange(view.height) - view.cy) / view.fy
    rn = base.raw_normal.detach().numpy()
    denom = rn[..., 0] * rx[None, :] + rn[..., 1] * ry[:, None] + rn[..., 2]
    guard = (base.alpha.detach().numpy() > 0.2) & (np.abs(denom) > 1e-3)
    cot = {"rgb": rng.normal(size=(view.height, view.width, 3)),
           "alpha": rng.normal(size=(view.height, view.width)),
           "depth": rng.normal(size=(view.height, view.width)) * guard,
           "normal": rng.normal(size=(view.height, view.width, 3)) * guard[..., None]}

    def scalar(arr) -> float:
        t, _ = forward(arr)
        total = (t.rgb * torch.as_tensor(cot["rgb"])).sum() \
            + (t.alpha * torch.as_tensor(cot["alpha"])).sum() \
            + (t.depth * torch.as_tensor(cot["depth"])).sum() \
            + (t.normal * torch.as_tensor(cot["normal"])).sum()
        return float(total)

    targets, splats = forward(arrays, requires_grad=True)
    from voxsplat.renderer import rasterize_backward
    grads = rasterize_backward(
        splats,
        {"rgb": targets.rgb, "alpha": targets.alpha,
         "depth": targets.depth, "normal": targets.normal},
        cot)
    analytic = {k: g.numpy() for k, g in grads.items()}
    return probe_pairs(scalar, arrays, analytic, rng,
                       probes_per_leaf=probes_per_leaf)


def decoder_fd_pairs(seed: int, probes_per_leaf: int = 2):
    """(analytic, fd) gradient pairs for decoder weights on a random scene.

    The decoded scale preset keeps exp(raw) far from both clamp rails so the
    objective stays smooth; normals are excluded because their axis choice is
    intentionally discrete (covered by the rasterizer check, which controls
    the scale gaps).
    """
    from voxsplat.decoder import (DecoderParams, decode_level,
                                  decoder_backward)
    rng = np.random.default_rng(seed)
    from voxsplat.scene import SparsePoints, build_hierarchy
    pts = SparsePoints(positions=rng.uniform(-1, 1, size=(30, 3)))
    scene = build_hierarchy(pts, 0.5, 1, offsets_per_voxel=2, seed=seed)
    view = make_view(eye=tuple(rng.uniform(-3, 3, 2)) + (-3.0,))
    count = min(6, scene.levels[0].count)
    idx = np.arange(count)

    def decode_with(params: DecoderParams, keep_graph=False):
        return decode_level(params, scene, 0, idx, view,
                            max_scale=3.0 * scene.base_voxel_size,
                            keep_graph=keep_graph)

    base = DecoderParams.init(2, seed=seed + 1,
                              scale_bias=float(np.log(0.05)))
    probe_out = decode_with(base)
    cot = {k: rng.normal(size=tuple(v.shape))
           for k, v in probe_out.items()
           if k in ("opacities", "colors", "scales", "quats")}

    def scalar(arrays: dict) -> float:
        params = DecoderParams.from_arrays(2, arrays)
        dec = decode_with(params)
        return float(sum((dec[k] * torch.as_tensor(c)).sum()
                         for k, c in cot.items()))

    live = base.clone().requires_grad_()
    dec = decode_with(live, keep_graph=True)
    grads = decoder_backward(dec, cot, live.tensors)
    analytic = {k: g.numpy() for k, g in grads.items()}
    return probe_pairs(scalar, base.to_arrays(), analytic, rng,
                       probes_per_leaf=probes_per_leaf)


def rgb_loss_fd_pairs(seed: int, probes: int = 4):
    """FD pairs for the photometric L1, away from its |x| kink."""
    from voxsplat.losses import bl_rgb_loss, loss_bl_rgb
    rng = np.random.default_rng(seed)
    shape = (6, 5, 3)
    refs = [rng.uniform(0, 1, shape) for _ in range(2)]
    rendered = []
    for g in refs:
        r = g + rng.uniform(0.05, 0.4, shape) * rng.choice([-1.0, 1.0], shape)
        rendered.append(r)
    _, analytic = loss_bl_rgb(rendered, refs)

    def scalar(arrays: dict) -> float:
        imgs = [torch.as_tensor(arrays[f"r{i}"]) for i in range(2)]
        return float(bl_rgb_loss(imgs, [torch.as_tensor(g) for g in refs]))

    arrays = {f"r{i}": rendered[i] for i in range(2)}
    named = {f"r{i}": analytic[i] for i in range(2)}
    return probe_pairs(scalar, arrays, named, rng, probes_per_leaf=probes)


def depth_loss_fd_pairs(seed: int, probes: int = 4):
    """FD pairs for the masked depth L1, away from its kink and fixed masks."""
    from voxsplat.losses import e_depth_loss, loss_e_depth
    rng = np.random.default_rng(seed)
    shape = (7, 6)
    priors = [rng.uniform(0.5, 2.0, shape) for _ in range(2)]
    pvalid = [rng.uniform(size=shape) > 0.3 for _ in range(2)]
    rvalid = [rng.uniform(size=shape) > 0.2 for _ in range(2)]
    depths = [p + rng.uniform(0.05, 0.3, shape) * rng.choice([-1.0, 1.0], shape)
              for p in priors]
    _, analytic, supervised = loss_e_depth(depths, rvalid, priors, pvalid)
    assert supervised > 0

    def scalar(arrays: dict) -> float:
        d = [torch.as_tensor(arrays[f"d{i}"]) for i in range(2)]
        rv = [torch.as_tensor(v) for v in rvalid]
        val, _ = e_depth_loss(d, rv, priors, pvalid)
        return float(val)

    arrays = {f"d{i}": depths[i] for i in range(2)}
    named = {f"d{i}": analytic[i] for i in range(2)}
    return probe_pairs(scalar, arrays, named, rng, probes_per_leaf=probes)


def _smooth_colors(means: np.ndarray, phase: float) -> np.ndarray:
    """Low-frequency color field: keeps warped-image sampling nearly kink-free."""
    x, y = means[:, 0], means[:, 1]
    return np.stack([0.5 + 0.3 * np.sin(1.1 * x + 0.6 * y + phase),
                     0.5 + 0.3 * np.sin(0.7 * x - 1.3 * y + 2 * phase),
                     0.5 + 0.3 * np.cos(1.7 * x + 0.9 * y - phase)], axis=-1)


def geo_loss_fd_pairs(seed: int, probes_per_leaf: int = 2):
    """FD pairs for the multi-view NCC loss through real renders.

    Source and reference views render separately parameterized coplanar
    sheets with different smooth textures, so the NCC sits away from its
    perfect-match stationary point and the warp carries depth/normal
    gradient. The plane overfills both frusta (every pixel saturated) and the
    reference image is larger than the warp's reach, so none of the detached
    candidate/validity decisions can flip under a probe step.
    """
    from voxsplat.losses import bl_geo_loss
    from voxsplat.renderer import make_leaf_gaussians, project_splats, \
        rasterize_view
    rng = np.random.default_rng(seed)
    tilt = rng.uniform(-0.15, 0.15, size=2)
    normal = np.array([tilt[0], tilt[1], 1.0])
    point = np.array([0.0, 0.0, 2.2])
    src_view = identity_view(view_id=0, width=24, height=24, focal=30.0)
    ref_view = CameraView(view_id=1, width=40, height=40, fx=30.0, fy=30.0,
                          cx=19.5, cy=19.5, r=np.eye(3),
                          t=-np.array([0.06, 0.04, 0.0]))
    src_arrays = plane_gaussian_arrays(normal, point, extent=2.0, spacing=0.18)
    src_arrays["colors"] = _smooth_colors(src_arrays["means"],
                                          phase=rng.uniform(0, 3))
    ref_arrays = plane_gaussian_arrays(normal, point, extent=2.0, spacing=0.18)
    ref_arrays["colors"] = _smooth_colors(ref_arrays["means"],
                                          phase=rng.uniform(3, 6))
    leaf_names = ("means", "opacities", "colors", "scales", "quats")

    def render_pair(arrays, requires_grad=False):
        batch = make_leaf_gaussians(*(arrays[k] for k in leaf_names),
                                    requires_grad=requires_grad)
        src_t, _ = rasterize_view(project_splats(batch, src_view), src_view)
        ref_batch = make_leaf_gaussians(*(ref_arrays[k] for k in leaf_names))
        ref_t, _ = rasterize_view(project_splats(ref_batch, ref_view), ref_view)
        return [ref_t, src_t], batch

    views = [ref_view, src_view]

    def scalar(arrays: dict) -> float:
        targets, _ = render_pair(arrays)
        val, stats = bl_geo_loss(targets, views, np.random.default_rng(seed),
                                 patch_count=12)
        assert stats.patches_used > 0
        return float(val)

    probe_arrays = {k: np.asarray(src_arrays[k], np.float64) for k in leaf_names}
    targets, batch = render_pair(probe_arrays, requires_grad=True)
    val, _ = bl_geo_loss(targets, views, np.random.default_rng(seed),
                         patch_count=12)
    grads = torch.autograd.grad(val, [batch.leaves[k] for k in leaf_names],
                                allow_unused=True)
    analytic = {k: (g.numpy() if g is not None else np.zeros(probe_arrays[k].shape))
                for k, g in zip(leaf_names, grads)}
    return probe_pairs(scalar, probe_arrays, analytic, rng,
                       probes_per_leaf=probes_per_leaf, h=3e-6)


# --- analytic plane scenes ----------------------------------------------------

def plane_frame(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = np.asarray(normal, np.float64)
    n = n / np.linalg.norm(n)
    helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    tu = np.cross(helper, n)
    tu /= np.linalg.norm(tu)
    tv = np.cross(n, tu)
    return tu, tv, n


def plane_gaussian_arrays(normal, point, extent: float = 2.0,
                          spacing: float = 0.15, opacity: float = 0.95,
                          thin: float = 0.005) -> dict:
    """Opaque coplanar gaussian sheet; min-scale axis equals the plane normal."""
    tu, tv, n = plane_frame(normal)
    point = np.asarray(point, np.float64)
    ax = np.arange(-extent, extent + 1e-9, spacing)
    uu, vv = np.meshgrid(ax, ax)
    uu, vv = uu.reshape(-1), vv.reshape(-1)
    means = point[None, :] + uu[:, None] * tu[None, :] + vv[:, None] * tv[None, :]
    count = means.shape[0]
    quat = rotmat_to_quat(np.stack([tu, tv, n], axis=-1))
    return {"means": means,
            "opacities": np.full(count, opacity),
            "colors": np.tile([0.7, 0.4, 0.2], (count, 1)),
            "scales": np.tile([1.5 * spacing, 1.5 * spacing, thin], (count, 1)),
            "quats": np.tile(quat, (count, 1)),
            "plane_normal": n, "plane_point": point}


def plane_depth_errors(view: CameraView, normal, point, **kw):
    """Render a coplanar sheet and compare depth to the exact ray-plane depth.

    Returns (max relative depth error over valid pixels, valid-pixel fraction).
    """
    from voxsplat.renderer import render_gaussians
    arrays = plane_gaussian_arrays(normal, point, **kw)
    targets, _ = render_gaussians(
        view, arrays["means"], arrays["opacities"], arrays["colors"],
        arrays["scales"], arrays["quats"], tasks=frozenset({"depth", "alpha"}))
    n, p0 = arrays["plane_normal"], arrays["plane_point"]
    # identity-view camera frame == world frame
    rx = (np.arange(view.width) - view.cx) / view.fx
    ry = (np.arange(view.height) - view.cy) / view.fy
    denom = n[0] * rx[None, :] + n[1] * ry[:, None] + n[2]
    exact = float(n @ p0) / denom
    valid = targets.valid.numpy()
    depth = targets.depth.detach().numpy()
    rel = np.abs(depth[valid] - exact[valid]) / np.abs(exact[valid])
    return float(rel.max()), float(valid.mean())
