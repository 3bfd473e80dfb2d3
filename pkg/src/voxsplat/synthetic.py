"""Synthetic scenes with exact geometry for end-to-end checks.

Primitives (textured planes, boxes, spheres) are converted to a dense set
of surface-aligned gaussians and rendered into ground-truth color images;
depth comes from analytic ray intersections, not from the renderer, so it
is an independent reference. A corrupted "monocular" pseudo-depth is
derived from the analytic depth by a known affine map plus noise, with an
optional multiplicative stripe artifact on chosen views to exercise the
cross-view filtering. The resulting directory is a normal dataset manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import camera_to_entry, write_manifest, write_ply_points
from .errors import InvalidInput
from .geometry import CameraView, look_at, rotmat_to_quat
from .imio import write_float_map, write_png
from .renderer import render_gaussians

Z_EPS = 1e-9


@dataclass(frozen=True)
class PlaneSpec:
    """Finite textured rectangle: center, unit normal, half extents along the
    two tangent axes derived from up_hint."""
    center: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)
    half_extent: tuple = (1.0, 1.0)
    up_hint: tuple = (0.0, 1.0, 0.0)
    texture: str = "checker"
    checker_cells: float = 0.25
    color_a: tuple = (0.9, 0.9, 0.9)
    color_b: tuple = (0.1, 0.1, 0.4)

    def frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = np.asarray(self.normal, np.float64)
        n = n / np.linalg.norm(n)
        up = np.asarray(self.up_hint, np.float64)
        tu = np.cross(up, n)
        if np.linalg.norm(tu) < 1e-9:
            up = np.array([1.0, 0.0, 0.0])
            tu = np.cross(up, n)
        tu /= np.linalg.norm(tu)
        tv = np.cross(n, tu)
        return tu, tv, n


@dataclass(frozen=True)
class SphereSpec:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    texture: str = "checker"
    checker_cells: float = 0.25
    color_a: tuple = (0.9, 0.6, 0.2)
    color_b: tuple = (0.2, 0.2, 0.2)


@dataclass(frozen=True)
class BoxSpec:
    center: tuple = (0.0, 0.0, 0.0)
    size: tuple = (0.5, 0.5, 0.5)
    texture: str = "checker"
    checker_cells: float = 0.2
    color_a: tuple = (0.8, 0.3, 0.3)
    color_b: tuple = (0.95, 0.95, 0.95)

    def faces(self) -> list[PlaneSpec]:
        c = np.asarray(self.center, np.float64)
        s = np.asarray(self.size, np.float64) / 2.0
        out = []
        for axis in range(3):
            for sign in (-1.0, 1.0):
                n = np.zeros(3)
                n[axis] = sign
                others = [i for i in range(3) if i != axis]
                up = np.zeros(3)
                up[others[1]] = 1.0
                out.append(PlaneSpec(
                    center=tuple(c + n * s[axis]), normal=tuple(n),
                    half_extent=(float(s[others[0]]), float(s[others[1]])),
                    up_hint=tuple(up), texture=self.texture,
                    checker_cells=self.checker_cells,
                    color_a=self.color_a, color_b=self.color_b))
        return out


def _checker(u: np.ndarray, v: np.ndarray, cells: float,
             color_a, color_b) -> np.ndarray:
    par = (np.floor(u / cells) + np.floor(v / cells)).astype(np.int64) % 2 == 0
    a = np.asarray(color_a, np.float64)
    b = np.asarray(color_b, np.float64)
    return np.where(par[:, None], a[None, :], b[None, :])


def _texture(spec, u, v, rng: np.random.Generator) -> np.ndarray:
    if spec.texture == "checker":
        return _checker(u, v, spec.checker_cells, spec.color_a, spec.color_b)
    if spec.texture == "noise":
        base = np.asarray(spec.color_a, np.float64)
        jit = rng.uniform(-0.25, 0.25, size=(len(u), 3))
        return np.clip(base[None, :] + jit, 0.0, 1.0)
    raise InvalidInput(f"unknown texture {spec.texture!r}")


def _frame_quats(tu, tv, n, count: int) -> np.ndarray:
    rot = np.stack([tu, tv, n], axis=-1)
    q = rotmat_to_quat(rot)
    return np.tile(q, (count, 1))


@dataclass
class SurfaceGaussians:
    means: np.ndarray
    colors: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacities: np.ndarray
    normals: np.ndarray


def _plane_gaussians(spec: PlaneSpec, spacing: float, opacity: float,
                     rng: np.random.Generator) -> SurfaceGaussians:
    tu, tv, n = spec.frame()
    hu, hv = spec.half_extent
    nu = max(int(np.ceil(2 * hu / spacing)), 1)
    nv = max(int(np.ceil(2 * hv / spacing)), 1)
    us = (np.arange(nu) + 0.5) / nu * 2 * hu - hu
    vs = (np.arange(nv) + 0.5) / nv * 2 * hv - hv
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    uu = uu.reshape(-1)
    vv = vv.reshape(-1)
    c = np.asarray(spec.center, np.float64)
    means = c[None, :] + uu[:, None] * tu[None, :] + vv[:, None] * tv[None, :]
    colors = _texture(spec, uu + hu, vv + hv, rng)
    su = 2 * hu / nu
    sv = 2 * hv / nv
    scales = np.tile([0.75 * su, 0.75 * sv, 0.02 * min(su, sv)], (len(uu), 1))
    quats = _frame_quats(tu, tv, n, len(uu))
    return SurfaceGaussians(means=means, colors=colors, scales=scales, quats=quats,
                            opacities=np.full(len(uu), opacity),
                            normals=np.tile(n, (len(uu), 1)))


def _sphere_gaussians(spec: SphereSpec, spacing: float, opacity: float,
                      rng: np.random.Generator) -> SurfaceGaussians:
    count = max(int(np.ceil(4 * np.pi * spec.radius ** 2 / spacing ** 2)), 16)
    i = np.arange(count, dtype=np.float64)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    z = 1.0 - 2.0 * (i + 0.5) / count
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    th = golden * i
    n = np.stack([r * np.cos(th), r * np.sin(th), z], axis=-1)
    c = np.asarray(spec.center, np.float64)
    means = c[None, :] + spec.radius * n
    helper = np.where(np.abs(n[:, 2:3]) < 0.9,
                      np.tile([0.0, 0.0, 1.0], (count, 1)),
                      np.tile([1.0, 0.0, 0.0], (count, 1)))
    tu = np.cross(helper, n)
    tu /= np.linalg.norm(tu, axis=-1, keepdims=True)
    tv = np.cross(n, tu)
    theta = np.arccos(np.clip(z, -1, 1)) * spec.radius
    phi = (np.arctan2(n[:, 1], n[:, 0]) + np.pi) * spec.radius
    colors = _texture(spec, phi, theta, rng)
    rots = np.stack([tu, tv, n], axis=-1)
    quats = np.stack([rotmat_to_quat(m) for m in rots])
    scales = np.tile([0.75 * spacing, 0.75 * spacing, 0.02 * spacing], (count, 1))
    return SurfaceGaussians(means=means, colors=colors, scales=scales, quats=quats,
                            opacities=np.full(count, opacity), normals=n)


def surface_gaussians(primitives: list, spacing: float, opacity: float = 0.95,
                      seed: int = 0) -> SurfaceGaussians:
    """Flatten primitives into one surface-aligned gaussian set."""
    if spacing <= 0:
        raise InvalidInput("gaussian spacing must be positive")
    rng = np.random.default_rng(seed)
    parts: list[SurfaceGaussians] = []
    for p in primitives:
        if isinstance(p, PlaneSpec):
            parts.append(_plane_gaussians(p, spacing, opacity, rng))
        elif isinstance(p, BoxSpec):
            parts += [_plane_gaussians(f, spacing, opacity, rng) for f in p.faces()]
        elif isinstance(p, SphereSpec):
            parts.append(_sphere_gaussians(p, spacing, opacity, rng))
        else:
            raise InvalidInput(f"unknown primitive {type(p).__name__}")
    if not parts:
        raise InvalidInput("no primitives given")
    return SurfaceGaussians(
        means=np.concatenate([p.means for p in parts]),
        colors=np.concatenate([p.colors for p in parts]),
        scales=np.concatenate([p.scales for p in parts]),
        quats=np.concatenate([p.quats for p in parts]),
        opacities=np.concatenate([p.opacities for p in parts]),
        normals=np.concatenate([p.normals for p in parts]))


def _ray_grid(view: CameraView) -> np.ndarray:
    uu, vv = np.meshgrid(np.arange(view.width, dtype=np.float64),
                         np.arange(view.height, dtype=np.float64))
    return np.stack([(uu - view.cx) / view.fx, (vv - view.cy) / view.fy,
                     np.ones_like(uu)], axis=-1)


def _plane_hits(spec: PlaneSpec, view: CameraView, rays: np.ndarray) -> np.ndarray:
    tu, tv, n = spec.frame()
    n_c = view.r @ n
    tu_c = view.r @ tu
    tv_c = view.r @ tv
    p_c = view.r @ np.asarray(spec.center, np.float64) + view.t
    denom = rays @ n_c
    safe = np.where(np.abs(denom) > Z_EPS, denom, 1.0)
    t = (p_c @ n_c) / safe
    q = t[..., None] * rays - p_c
    lu = q @ tu_c
    lv = q @ tv_c
    hit = ((np.abs(denom) > Z_EPS) & (t > Z_EPS)
           & (np.abs(lu) <= spec.half_extent[0]) & (np.abs(lv) <= spec.half_extent[1]))
    return np.where(hit, t, np.inf)


def _sphere_hits(spec: SphereSpec, view: CameraView, rays: np.ndarray) -> np.ndarray:
    s_c = view.r @ np.asarray(spec.center, np.float64) + view.t
    a = np.sum(rays * rays, axis=-1)
    b = -2.0 * (rays @ s_c)
    c = float(s_c @ s_c) - spec.radius ** 2
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t1 = (-b - sq) / (2 * a)
    t2 = (-b + sq) / (2 * a)
    t = np.where(t1 > Z_EPS, t1, t2)
    return np.where(ok & (t > Z_EPS), t, np.inf)


def analytic_depth(view: CameraView, primitives: list) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-pixel depth of the nearest primitive; (depth, hit-mask).

    Rays use unit z, so the intersection parameter is the camera-space
    depth directly. Misses have depth 0 and mask False.
    """
    rays = _ray_grid(view)
    best = np.full((view.height, view.width), np.inf)
    for p in primitives:
        if isinstance(p, PlaneSpec):
            best = np.minimum(best, _plane_hits(p, view, rays))
        elif isinstance(p, BoxSpec):
            for f in p.faces():
                best = np.minimum(best, _plane_hits(f, view, rays))
        elif isinstance(p, SphereSpec):
            best = np.minimum(best, _sphere_hits(p, view, rays))
        else:
            raise InvalidInput(f"unknown primitive {type(p).__name__}")
    hit = np.isfinite(best)
    return np.where(hit, best, 0.0), hit


def sample_surface_points(primitives: list, count: int, seed: int = 0,
                          color: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Uniform-by-area random samples over the primitive surfaces."""
    gs = surface_gaussians(primitives, spacing=0.05, seed=seed)
    rng = np.random.default_rng(seed + 1)
    pick = rng.integers(0, len(gs.means), size=count)
    tang = rng.uniform(-0.5, 0.5, size=(count, 2))
    from .geometry import quat_to_rotmat
    rots = quat_to_rotmat(gs.quats[pick])
    pts = (gs.means[pick]
           + rots[:, :, 0] * (tang[:, 0] * gs.scales[pick, 0])[:, None]
           + rots[:, :, 1] * (tang[:, 1] * gs.scales[pick, 1])[:, None])
    return pts, (gs.colors[pick] if color else None)


def sample_visible_points(views: list[CameraView], depths: list[np.ndarray],
                          images: list[np.ndarray], count: int,
                          seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Triangulation-style points: random visible-surface pixels, backprojected.

    Mimics multi-view reconstruction output — every point lies on a surface
    actually observed from at least one camera, so projecting it back into
    views mostly lands on the surface it came from.
    """
    rng = np.random.default_rng(seed)
    per = np.full(len(views), count // len(views))
    per[:count % len(views)] += 1
    pts, cols = [], []
    for view, depth, img, c in zip(views, depths, images, per):
        vv, uu = np.nonzero(depth > 0)
        if uu.size == 0 or c == 0:
            continue
        pick = rng.integers(0, uu.size, size=int(c))
        u, v = uu[pick], vv[pick]
        z = depth[v, u]
        x = (u - view.cx) / view.fx * z
        y = (v - view.cy) / view.fy * z
        cam = np.stack([x, y, z], axis=-1)
        pts.append((cam - view.t) @ view.r)
        cols.append(img[v, u])
    if not pts:
        raise InvalidInput("no visible surface pixels to sample points from")
    return np.concatenate(pts), np.concatenate(cols)


@dataclass(frozen=True)
class PseudoDepthSpec:
    """Known corruption applied to analytic depth to fake a monocular prior."""
    scale: float = 0.5
    shift: float = 0.2
    noise_sigma: float = 0.002
    stripe_views: tuple = ()
    stripe_rows: tuple = (0.70, 0.80)     # fractional row band
    stripe_magnitude: float = 0.35


@dataclass
class SyntheticSpec:
    name: str = "scene"
    width: int = 128
    height: int = 128
    view_count: int = 9
    fov_deg: float = 60.0
    orbit_radius: float = 2.2
    orbit_height: float = 1.2
    orbit_target: tuple = (0.0, 0.0, 0.0)
    orbit_span_deg: float = 360.0
    primitives: list = field(default_factory=list)
    gaussian_spacing: float = 0.06
    gaussian_opacity: float = 0.95
    point_count: int = 600
    seed: int = 0
    pseudo: PseudoDepthSpec = field(default_factory=PseudoDepthSpec)


def orbit_views(spec: SyntheticSpec) -> list[CameraView]:
    f = 0.5 * spec.width / np.tan(np.radians(spec.fov_deg) / 2.0)
    views = []
    tgt = np.asarray(spec.orbit_target, np.float64)
    for i in range(spec.view_count):
        ang = np.radians(spec.orbit_span_deg) * i / spec.view_count
        eye = tgt + np.array([spec.orbit_radius * np.cos(ang),
                              spec.orbit_radius * np.sin(ang),
                              spec.orbit_height])
        r, t = look_at(eye, tgt)
        views.append(CameraView(view_id=i, width=spec.width, height=spec.height,
                                fx=f, fy=f, cx=(spec.width - 1) / 2.0,
                                cy=(spec.height - 1) / 2.0, r=r, t=t))
    return views


def default_primitives(kind: str) -> list:
    if kind == "plane":
        return [PlaneSpec(center=(0, 0, 0), normal=(0, 0, 1), half_extent=(1.0, 1.0),
                          checker_cells=0.25)]
    if kind == "plane-box":
        return [PlaneSpec(center=(0, 0, 0), normal=(0, 0, 1), half_extent=(1.2, 1.2),
                          checker_cells=0.3),
                BoxSpec(center=(0, 0, 0.25), size=(0.5, 0.5, 0.5))]
    if kind == "sphere":
        return [PlaneSpec(center=(0, 0, -0.4), normal=(0, 0, 1), half_extent=(1.2, 1.2),
                          checker_cells=0.3, color_a=(0.85, 0.85, 0.85),
                          color_b=(0.25, 0.35, 0.2)),
                SphereSpec(center=(0, 0, 0.1), radius=0.45)]
    raise InvalidInput(f"unknown preset {kind!r} (use plane, plane-box, or sphere)")


def corrupt_depth(depth: np.ndarray, hit: np.ndarray, view_index: int,
                  pseudo: PseudoDepthSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply the known affine map, noise, and optional stripe; zero off-surface."""
    raw = pseudo.scale * depth + pseudo.shift
    raw = raw + rng.normal(0.0, pseudo.noise_sigma, size=depth.shape)
    if view_index in tuple(pseudo.stripe_views):
        h = depth.shape[0]
        y0 = int(pseudo.stripe_rows[0] * h)
        y1 = int(pseudo.stripe_rows[1] * h)
        raw[y0:y1, :] *= 1.0 + pseudo.stripe_magnitude
    return np.where(hit, np.maximum(raw, 1e-4), 0.0)


def generate(spec: SyntheticSpec, out_dir) -> Path:
    """Write a full synthetic dataset; returns the manifest path."""
    if not spec.primitives:
        raise InvalidInput("synthetic spec has no primitives")
    out = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    views = orbit_views(spec)
    gs = surface_gaussians(spec.primitives, spec.gaussian_spacing,
                           spec.gaussian_opacity, seed=spec.seed)
    cameras = []
    depth_maps, image_maps = [], []
    for i, view in enumerate(views):
        targets, _ = render_gaussians(view, gs.means, gs.opacities, gs.colors,
                                      gs.scales, gs.quats, normals=gs.normals,
                                      tasks=frozenset({"rgb", "alpha"}))
        img = np.clip(targets.rgb.numpy(), 0.0, 1.0)   # black where uncovered
        img_rel = f"images/view_{i:03d}.png"
        write_png(out / img_rel, img)
        depth, hitmask = analytic_depth(view, spec.primitives)
        gt_rel = f"depth_gt/view_{i:03d}"
        write_float_map(out / gt_rel, depth, meta={"kind": "analytic depth"})
        mono = corrupt_depth(depth, hitmask, i, spec.pseudo, rng)
        mono_rel = f"depth_mono/view_{i:03d}"
        write_float_map(out / mono_rel, mono, meta={"kind": "pseudo monocular depth"})
        cameras.append(camera_to_entry(view, img_rel, gt_depth=gt_rel + ".json",
                                       mono_depth=mono_rel + ".json"))
        depth_maps.append(depth)
        image_maps.append(img)
    pts, cols = sample_visible_points(views, depth_maps, image_maps,
                                      spec.point_count, seed=spec.seed)
    write_ply_points(out / "points.ply", pts, cols)
    info = {"scale": spec.pseudo.scale, "shift": spec.pseudo.shift,
            "noise_sigma": spec.pseudo.noise_sigma,
            "stripe_views": list(spec.pseudo.stripe_views)}
    manifest = write_manifest(out, cameras, "points.ply", pseudo_depth_info=info)
    (out / "spec.json").write_text(json.dumps({
        "name": spec.name, "width": spec.width, "height": spec.height,
        "views": spec.view_count, "seed": spec.seed,
        "primitives": [type(p).__name__ for p in spec.primitives]}, indent=1))
    return manifest
