"""Training losses and image metrics.

Three training terms:
  * photometric: mean absolute color error, averaged over pixels, channels,
    and the batch;
  * depth: masked L1 between rendered depth and the enhanced prior, averaged
    over valid pixels per view, then over the batch;
  * multi-view consistency: one minus the normalized cross correlation of
    7x7 grayscale patches warped between paired views by the plane-induced
    homography built from rendered normal and depth. The warped reference
    colors are constants (stop gradient), but the warp positions keep their
    dependence on the plane, so geometry still receives gradient.

Losses are float64 torch expressions over render buffers; metric helpers
(psnr, ssim) are plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegeneratePlane, InvalidInput
from .geometry import CameraView

_T = torch.float64

GRAY_WEIGHTS = (0.299, 0.587, 0.114)
NCC_STD_GUARD = 1e-6
PLANE_D_GUARD = 1e-6
GEO_ALPHA_MIN = 0.9
PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _as_t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, np.float64))


def bl_rgb_loss(rendered: list[torch.Tensor], reference: list[torch.Tensor]) -> torch.Tensor:
    """Batch photometric L1: mean over batch of per-view mean |diff|."""
    if len(rendered) != len(reference) or not rendered:
        raise InvalidInput("batch lists must be equal length and non-empty")
    terms = []
    for r, g in zip(rendered, reference):
        g = _as_t(g)
        if r.shape != g.shape:
            raise InvalidInput(f"image shape mismatch {tuple(r.shape)} vs {tuple(g.shape)}")
        terms.append((r - g).abs().mean())
    return torch.stack(terms).mean()


def loss_bl_rgb(rendered: list[np.ndarray], reference: list[np.ndarray]):
    """Value-and-gradient surface: returns (float, per-view gradient arrays)."""
    leaves = [torch.as_tensor(np.asarray(r, np.float64)).clone().requires_grad_(True)
              for r in rendered]
    val = bl_rgb_loss(leaves, [_as_t(g) for g in reference])
    grads = torch.autograd.grad(val, leaves)
    return float(val.detach()), [g.numpy() for g in grads]


def e_depth_loss(rendered_depth: list[torch.Tensor], rendered_valid: list[torch.Tensor],
                 prior_depth: list, prior_valid: list) -> tuple[torch.Tensor, int]:
    """Masked depth L1. A pixel counts iff the prior kept it and the render
    covers it; a view with no counted pixels contributes zero. Returns the
    loss and the total number of supervised pixels (zero means "warn")."""
    if not rendered_depth or len({len(rendered_depth), len(rendered_valid),
                                  len(prior_depth), len(prior_valid)}) != 1:
        raise InvalidInput("depth loss needs aligned non-empty batch lists")
    terms = []
    supervised = 0
    for d, dv, p, pv in zip(rendered_depth, rendered_valid, prior_depth, prior_valid):
        p = _as_t(p)
        mask = (torch.as_tensor(np.asarray(pv, bool)) & dv).to(_T)
        cnt = int(mask.sum())
        supervised += cnt
        if cnt == 0:
            terms.append(torch.zeros((), dtype=_T))
        else:
            terms.append(((d - p).abs() * mask).sum() / cnt)
    return torch.stack(terms).mean(), supervised


def loss_e_depth(rendered_depth, rendered_valid, prior_depth, prior_valid):
    """Value-and-gradient surface over rendered depth buffers."""
    leaves = [torch.as_tensor(np.asarray(d, np.float64)).clone().requires_grad_(True)
              for d in rendered_depth]
    rv = [torch.as_tensor(np.asarray(v, bool)) for v in rendered_valid]
    val, supervised = e_depth_loss(leaves, rv, prior_depth, prior_valid)
    grads = torch.autograd.grad(val, leaves, allow_unused=True)
    return float(val.detach()), [g.numpy() if g is not None else np.zeros(l.shape)
                                 for g, l in zip(grads, leaves)], supervised


def compute_homography(view_a: CameraView, view_b: CameraView,
                       n_world: np.ndarray, d_world: float) -> np.ndarray:
    """Plane-induced homography mapping view_a pixels onto view_b.

    The plane is n_world . x = d_world in world coordinates. Result is
    normalized so H[2,2] = 1.
    """
    n_world = np.asarray(n_world, np.float64).reshape(3)
    n_a = view_a.r @ n_world
    d_a = float(d_world - n_world @ view_a.center)
    if abs(d_a) < PLANE_D_GUARD:
        raise DegeneratePlane("plane passes through the source camera center")
    r_rel = view_b.r @ view_a.r.T
    t_rel = view_b.t - r_rel @ view_a.t
    h = view_b.kmat @ (r_rel + np.outer(t_rel, n_a) / d_a) @ view_a.kinv
    if abs(h[2, 2]) < 1e-12:
        raise DegeneratePlane("homography normalization is singular")
    return h / h[2, 2]


def homography_batch_t(n_cam: torch.Tensor, d_cam: torch.Tensor,
                       view_a: CameraView, view_b: CameraView) -> torch.Tensor:
    """Batched differentiable homographies from source-camera-frame planes (P,3),(P,)."""
    r_rel = torch.as_tensor(view_b.r @ view_a.r.T, dtype=_T)
    t_rel = torch.as_tensor(view_b.t - (view_b.r @ view_a.r.T) @ view_a.t, dtype=_T)
    k2 = torch.as_tensor(view_b.kmat, dtype=_T)
    k1i = torch.as_tensor(view_a.kinv, dtype=_T)
    outer = t_rel.reshape(1, 3, 1) * n_cam.unsqueeze(1)        # (P, 3, 3)
    mid = r_rel.unsqueeze(0) + outer / d_cam.reshape(-1, 1, 1)
    return k2.unsqueeze(0) @ mid @ k1i.unsqueeze(0)


def grayscale_t(img: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(GRAY_WEIGHTS, dtype=_T)
    return img @ w


def bilinear_t(img: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Differentiable bilinear sample of (H, W) at float pixel coords inside bounds."""
    h, w = img.shape
    u0 = torch.clamp(u.floor(), 0, w - 2)
    v0 = torch.clamp(v.floor(), 0, h - 2)
    fu = u - u0
    fv = v - v0
    u0l = u0.long()
    v0l = v0.long()
    flat = img.reshape(-1)
    i00 = flat[v0l * w + u0l]
    i01 = flat[v0l * w + u0l + 1]
    i10 = flat[(v0l + 1) * w + u0l]
    i11 = flat[(v0l + 1) * w + u0l + 1]
    return (i00 * (1 - fu) * (1 - fv) + i01 * fu * (1 - fv)
            + i10 * (1 - fu) * fv + i11 * fu * fv)


def pair_views(views: list[CameraView]) -> list[tuple[int, int]]:
    """Greedy proximity chain over camera centers, then consecutive pairs.

    Returns (reference_idx, source_idx) pairs; an odd trailing view is unused.
    """
    if len(views) < 2:
        return []
    centers = np.stack([v.center for v in views])
    unused = list(range(len(views)))
    chain = [unused.pop(0)]
    while unused:
        d = [np.linalg.norm(centers[j] - centers[chain[-1]]) for j in unused]
        chain.append(unused.pop(int(np.argmin(d))))
    return [(chain[i], chain[i + 1]) for i in range(0, len(chain) - 1, 2)]


@dataclass
class GeoLossStats:
    pairs_used: int = 0
    patches_used: int = 0
    patches_rejected: int = 0


def _stratified_centers(cand_u: np.ndarray, cand_v: np.ndarray, width: int, height: int,
                        count: int, rng: np.random.Generator) -> np.ndarray:
    """Pick up to `count` candidate indices, spread over a coarse cell grid."""
    cells = int(np.ceil(np.sqrt(count)))
    cw = max(width / cells, 1.0)
    ch = max(height / cells, 1.0)
    cell_id = (cand_v / ch).astype(np.int64) * cells + (cand_u / cw).astype(np.int64)
    order = np.argsort(cell_id, kind="stable")
    picked: list[int] = []
    by_cell: dict[int, list[int]] = {}
    for i in order:
        by_cell.setdefault(int(cell_id[i]), []).append(int(i))
    queues = [rng.permutation(np.asarray(v)).tolist() for _, v in sorted(by_cell.items())]
    while len(picked) < count and any(queues):
        for q in queues:
            if q and len(picked) < count:
                picked.append(q.pop())
    return np.asarray(picked, dtype=np.int64)


def bl_geo_loss(targets: list, views: list[CameraView], rng: np.random.Generator,
                patch_count: int = 64, half: int = 3) -> tuple[torch.Tensor, GeoLossStats]:
    """Multi-view patch NCC loss over paired views of a batch.

    `targets` are RenderTargets (graph tensors). For each (reference, source)
    pair, up to `patch_count` stratified patch centers are drawn from source
    pixels that are alpha-saturated (> 0.9) with a valid plane; each 7x7
    source patch is compared against the reference image warped through the
    homography of the source's rendered plane at the center. Reference colors
    are detached.
    """
    stats = GeoLossStats()
    pairs = pair_views(views)
    terms = []
    size = 2 * half + 1
    du, dv = np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1))
    du = du.reshape(-1).astype(np.float64)
    dv = dv.reshape(-1).astype(np.float64)
    for ref_i, src_i in pairs:
        src, ref = targets[src_i], targets[ref_i]
        vs, vr = views[src_i], views[ref_i]
        h_img, w_img = vs.height, vs.width
        alpha = src.alpha.detach().numpy()
        valid = src.valid.numpy()
        nrm = src.normal.detach().numpy()
        cand = ((alpha > GEO_ALPHA_MIN) & valid
                & (np.linalg.norm(nrm, axis=-1) > 0.5))
        cand[:half, :] = False
        cand[-half:, :] = False
        cand[:, :half] = False
        cand[:, -half:] = False
        vv, uu = np.nonzero(cand)
        if uu.size == 0:
            continue
        pick = _stratified_centers(uu.astype(np.float64), vv.astype(np.float64),
                                   w_img, h_img, patch_count, rng)
        cu, cv = uu[pick], vv[pick]

        n_c = src.normal[cv, cu]                       # (P, 3) unit, graph
        dep = src.depth[cv, cu]                        # (P,)
        ray = torch.stack([
            (torch.as_tensor(cu, dtype=_T) - vs.cx) / vs.fx,
            (torch.as_tensor(cv, dtype=_T) - vs.cy) / vs.fy,
            torch.ones(len(cu), dtype=_T)], dim=-1)
        x_cam = dep.unsqueeze(-1) * ray
        d_plane = (n_c * x_cam).sum(-1)
        ok = d_plane.detach().abs().numpy() > PLANE_D_GUARD
        stats.patches_rejected += int((~ok).sum())
        if not ok.any():
            continue
        sel = np.flatnonzero(ok)
        selt = torch.from_numpy(sel)
        hmat = homography_batch_t(n_c[selt], d_plane[selt], vs, vr)   # (P, 3, 3)

        pu = torch.as_tensor(cu[sel, None] + du[None, :], dtype=_T)   # (P, 49)
        pv = torch.as_tensor(cv[sel, None] + dv[None, :], dtype=_T)
        ones = torch.ones_like(pu)
        hom = torch.stack([pu, pv, ones], dim=-1)                      # (P, 49, 3)
        warped = hom @ hmat.transpose(1, 2)
        wz = warped[..., 2]
        good_z = (wz.detach().numpy() > 1e-8).all(axis=1)
        wz = torch.clamp(wz, min=1e-8)
        qu = warped[..., 0] / wz
        qv = warped[..., 1] / wz
        qun, qvn = qu.detach().numpy(), qv.detach().numpy()
        inside = (good_z & (qun >= 0).all(1) & (qun <= vr.width - 1).all(1)
                  & (qvn >= 0).all(1) & (qvn <= vr.height - 1).all(1))
        stats.patches_rejected += int((~inside).sum())
        if not inside.any():
            continue
        keep = torch.from_numpy(np.flatnonzero(inside))
        qu, qv = qu[keep], qv[keep]

        gray_src_img = grayscale_t(src.rgb)
        iu = torch.as_tensor(cu[sel][inside][:, None] + du[None, :], dtype=torch.long)
        iv = torch.as_tensor(cv[sel][inside][:, None] + dv[None, :], dtype=torch.long)
        patch_src = gray_src_img[iv, iu]                               # (P, 49)
        gray_ref_img = grayscale_t(ref.rgb).detach()
        patch_ref = bilinear_t(gray_ref_img, qu.reshape(-1), qv.reshape(-1)).reshape(qu.shape)

        xm = patch_src - patch_src.mean(dim=1, keepdim=True)
        ym = patch_ref - patch_ref.mean(dim=1, keepdim=True)
        cov = (xm * ym).mean(dim=1)
        sx = torch.clamp(xm.pow(2).mean(dim=1).sqrt(), min=NCC_STD_GUARD)
        sy = torch.clamp(ym.pow(2).mean(dim=1).sqrt(), min=NCC_STD_GUARD)
        ncc = cov / (sx * sy)
        terms.append((1.0 - ncc).mean())
        stats.pairs_used += 1
        stats.patches_used += int(qu.shape[0])
    if not terms:
        return torch.zeros((), dtype=_T), stats
    return torch.stack(terms).mean(), stats


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 99."""
    img = np.asarray(img, np.float64)
    ref = np.asarray(ref, np.float64)
    if img.shape != ref.shape:
        raise InvalidInput(f"psnr shape mismatch {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_CAP)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(a: np.ndarray, b: np.ndarray, kern: np.ndarray) -> float:
    from numpy.lib.stride_tricks import sliding_window_view
    win = kern.shape[0]
    wa = sliding_window_view(a, (win, win))
    wb = sliding_window_view(b, (win, win))
    mu_a = np.tensordot(wa, kern, axes=((2, 3), (0, 1)))
    mu_b = np.tensordot(wb, kern, axes=((2, 3), (0, 1)))
    e_aa = np.tensordot(wa * wa, kern, axes=((2, 3), (0, 1)))
    e_bb = np.tensordot(wb * wb, kern, axes=((2, 3), (0, 1)))
    e_ab = np.tensordot(wa * wb, kern, axes=((2, 3), (0, 1)))
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim(img: np.ndarray, ref: np.ndarray) -> float:
    """Mean SSIM with an 11x11 gaussian window (sigma 1.5), channels averaged."""
    img = np.asarray(img, np.float64)
    ref = np.asarray(ref, np.float64)
    if img.shape != ref.shape:
        raise InvalidInput(f"ssim shape mismatch {img.shape} vs {ref.shape}")
    if min(img.shape[0], img.shape[1]) < 11:
        raise InvalidInput("image smaller than the 11x11 ssim window")
    kern = _gaussian_kernel()
    if img.ndim == 2:
        return _ssim_channel(img, ref, kern)
    return float(np.mean([_ssim_channel(img[..., c], ref[..., c], kern)
                          for c in range(img.shape[2])]))
