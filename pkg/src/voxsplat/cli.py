"""Command-line entry points.

    voxsplat make-synthetic --preset plane-box --out data/scene
    voxsplat build --manifest data/scene/manifest.json --out run/scene.vsnap
    voxsplat train --manifest ... --scene run/scene.vsnap --out-dir run
    voxsplat render --checkpoint run/checkpoint_final.vsnap --manifest ... --out-dir out
    voxsplat enhance-depth --manifest ... --out-dir out
    voxsplat mesh --checkpoint ... --manifest ... --out out/mesh.ply
    voxsplat eval --checkpoint ... --manifest ... --out out/metrics.json
    voxsplat bench --manifest ... --scene ... --workers 1,2,4 --out out/bench.json

Options may also come from a JSON config file (--config) holding sections
named after the subcommands; explicit command-line flags win over the file,
which wins over built-in defaults. Exit codes: 0 success, 2 invalid input or
unreadable file, 3 numerical failure, 4 resource budget exceeded.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import (InvalidInput, IoError, NumericalError, ResourceError,
                     VoxsplatError)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
EXIT_RESOURCE = 4


def _exit_code(exc: VoxsplatError) -> int:
    if isinstance(exc, (NumericalError,)):
        return EXIT_NUMERICAL
    if isinstance(exc, ResourceError):
        return EXIT_RESOURCE
    return EXIT_INVALID


def _load_config(path: str | None, section: str) -> dict:
    if not path:
        return {}
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except OSError as exc:
        raise IoError(f"cannot read config {p}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidInput(f"config {p} must be a JSON object")
    sec = data.get(section, {})
    if not isinstance(sec, dict):
        raise InvalidInput(f"config {p}: section {section!r} must be an object")
    return sec


def _merge(args: argparse.Namespace, file_vals: dict, name: str, default):
    """CLI flag (if given) > config file value > default."""
    cli = getattr(args, name.replace("-", "_"), None)
    if cli is not None:
        return cli
    if name in file_vals:
        return file_vals[name]
    return default


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise InvalidInput(f"expected comma-separated integers, got {text!r}") from exc


# ---------------------------------------------------------------- subcommands


def _cmd_make_synthetic(args) -> int:
    from .synthetic import (PseudoDepthSpec, SyntheticSpec, default_primitives,
                            generate)
    vals = _load_config(args.config, "make-synthetic")
    spec = SyntheticSpec(
        name=_merge(args, vals, "preset", "plane"),
        width=int(_merge(args, vals, "width", 128)),
        height=int(_merge(args, vals, "height", 128)),
        view_count=int(_merge(args, vals, "views", 9)),
        fov_deg=float(_merge(args, vals, "fov", 60.0)),
        orbit_radius=float(_merge(args, vals, "orbit-radius", 2.2)),
        orbit_height=float(_merge(args, vals, "orbit-height", 1.2)),
        gaussian_spacing=float(_merge(args, vals, "spacing", 0.06)),
        point_count=int(_merge(args, vals, "points", 600)),
        seed=int(_merge(args, vals, "seed", 0)),
        primitives=default_primitives(_merge(args, vals, "preset", "plane")),
        pseudo=PseudoDepthSpec(
            scale=float(_merge(args, vals, "pseudo-scale", 0.5)),
            shift=float(_merge(args, vals, "pseudo-shift", 0.2)),
            noise_sigma=float(_merge(args, vals, "pseudo-noise", 0.002)),
            stripe_views=tuple(_int_list(_merge(args, vals, "stripe-views", ""))),
        ))
    manifest = generate(spec, args.out)
    print(f"synthetic dataset written: {manifest}")
    return EXIT_OK


def _cmd_build(args) -> int:
    from .dataset import ingest
    from .scene import build_hierarchy
    from .snapshot import save_scene
    vals = _load_config(args.config, "build")
    ds = ingest(args.manifest)
    scene = build_hierarchy(
        ds.points,
        base_voxel_size=float(_merge(args, vals, "voxel-size", 0.4)),
        lod_count=int(_merge(args, vals, "levels", 3)),
        offsets_per_voxel=int(_merge(args, vals, "offsets", 5)),
        seed=int(_merge(args, vals, "seed", 0)),
        views=ds.views)
    path = save_scene(args.out, scene)
    counts = ", ".join(f"L{lv.level}={lv.count}" for lv in scene.levels)
    print(f"scene written: {path} ({counts}, ref={scene.lod_ref_distance:.3f})")
    return EXIT_OK


def _train_config_from(args, vals: dict):
    from .trainer import TrainConfig
    kw = {}
    for f in fields(TrainConfig):
        flag = f.name.replace("_", "-")
        v = _merge(args, vals, flag, None)
        if v is not None:
            kw[f.name] = type(f.default)(v)
    return TrainConfig.from_dict(kw)


def _cmd_train(args) -> int:
    from .dataset import ingest
    from .snapshot import load_scene
    from .trainer import run
    vals = _load_config(args.config, "train")
    ds = ingest(args.manifest)
    scene, _, _ = load_scene(args.scene)
    cfg = _train_config_from(args, vals)
    result = run(cfg, scene, ds, args.out_dir, quiet=not args.verbose)
    line = {"checkpoint": str(result.checkpoint), "log": str(result.log_path)}
    if result.final is not None:
        line["final_total"] = result.final.total
        line["final_rgb"] = result.final.rgb
    if result.heldout_psnr is not None:
        line["heldout_psnr"] = result.heldout_psnr
    print(json.dumps(line))
    return EXIT_OK


def _resolve_view_indices(ds, text: str) -> list[int]:
    if text == "all":
        return list(range(ds.count))
    if text == "test":
        return ds.test_indices
    if text == "train":
        return ds.train_indices
    ids = set(_int_list(text))
    out = [i for i, v in enumerate(ds.views) if v.view_id in ids]
    missing = ids - {ds.views[i].view_id for i in out}
    if missing:
        raise InvalidInput(f"unknown view ids: {sorted(missing)}")
    return out


def _checkpoint_state(args):
    from .partition import assign_voxels
    from .snapshot import load_scene
    scene, decoder, _ = load_scene(args.checkpoint)
    if decoder is None:
        raise InvalidInput(f"snapshot {args.checkpoint} has no decoder weights")
    workers = int(getattr(args, "workers", 1) or 1)
    assignment = assign_voxels(scene, workers)
    return scene, decoder, assignment


def _cmd_render(args) -> int:
    from .dataset import ingest
    from .imio import write_float_map, write_png
    from .renderer import render_view
    ds = ingest(args.manifest)
    scene, decoder, assignment = _checkpoint_state(args)
    tasks = frozenset(t.strip() for t in args.tasks.split(",") if t.strip())
    bad = tasks - {"rgb", "depth", "normal", "alpha"}
    if bad:
        raise InvalidInput(f"unknown render tasks: {sorted(bad)}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in _resolve_view_indices(ds, args.views):
        view = ds.views[i]
        targets, stats = render_view(view, scene, assignment, decoder, tasks=tasks)
        buf = targets.to_numpy()
        stem = f"view_{view.view_id:03d}"
        if "rgb" in tasks:
            write_png(out / f"{stem}_rgb.png", np.clip(buf["rgb"], 0, 1))
        if "depth" in tasks:
            write_float_map(out / f"{stem}_depth", buf["depth"],
                            meta={"kind": "rendered depth"})
        if "normal" in tasks:
            write_float_map(out / f"{stem}_normal", buf["normal"],
                            meta={"kind": "rendered normal"})
        if "alpha" in tasks:
            write_float_map(out / f"{stem}_alpha", buf["alpha"],
                            meta={"kind": "rendered alpha"})
        write_float_map(out / f"{stem}_valid", buf["valid"].astype(np.float64),
                        meta={"kind": "depth validity"})
        print(f"rendered view {view.view_id}: {stats.gaussians} gaussians, "
              f"{stats.elapsed_seconds:.3f}s")
    return EXIT_OK


def _cmd_enhance_depth(args) -> int:
    from .dataset import ingest
    from .depth_prior import DepthPriorCache, apply_scale_shift, enhance, \
        fit_scale_shift, select_neighbors
    from .imio import write_float_map
    ds = ingest(args.manifest)
    if not ds.has_mono_depth():
        raise InvalidInput("dataset has no monocular depth maps to enhance")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = DepthPriorCache(out / "cache") if args.cache else None
    indices = _resolve_view_indices(ds, args.views)
    aligned = {}
    fits = {}
    for i in indices:
        raw = ds.load_mono_depth(i)
        fit = fit_scale_shift(raw, ds.views[i], ds.points.positions)
        fits[i] = fit
        aligned[i] = apply_scale_shift(raw, fit)
    views = [ds.views[i] for i in indices]
    summary = {}
    for pos, i in enumerate(indices):
        nb = select_neighbors(views, pos)
        nb_ids = [views[j].view_id for j in nb]
        key = None
        result = None
        if cache is not None:
            key = cache.key(ds.views[i].view_id, fits[i], nb_ids, args.tau)
            result = cache.load(key)
        if result is None:
            result = enhance(aligned[i], ds.views[i],
                             [(aligned[indices[j]], views[j]) for j in nb],
                             tau=args.tau)
            if cache is not None:
                cache.store(key, result)
        stem = f"view_{ds.views[i].view_id:03d}"
        write_float_map(out / f"{stem}_enhanced", result.values,
                        meta={"kind": "enhanced depth", "tau": args.tau,
                              "scale": fits[i].scale, "shift": fits[i].shift})
        write_float_map(out / f"{stem}_valid", result.valid.astype(np.float64),
                        meta={"kind": "enhanced depth validity"})
        kept = float(result.valid.mean())
        summary[ds.views[i].view_id] = kept
        print(f"view {ds.views[i].view_id}: scale={fits[i].scale:.4f} "
              f"shift={fits[i].shift:.4f} kept={kept:.3f}")
    (out / "summary.json").write_text(json.dumps(
        {"tau": args.tau, "kept_fraction": summary}, indent=1, sort_keys=True))
    return EXIT_OK


def _write_mesh_ply(path, mesh) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    v, f = mesh.vertices, mesh.faces
    lines = ["ply", "format ascii 1.0", f"element vertex {len(v)}",
             "property double x", "property double y", "property double z",
             f"element face {len(f)}", "property list uchar int vertex_indices",
             "end_header"]
    with path.open("w") as fh:
        fh.write("\n".join(lines) + "\n")
        for p in v:
            fh.write(f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g}\n")
        for tri in f:
            fh.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")
    return path


def _cmd_mesh(args) -> int:
    from .dataset import ingest
    from .fusion import TsdfVolume
    from .renderer import render_view
    vals = _load_config(args.config, "mesh")
    ds = ingest(args.manifest)
    scene, decoder, assignment = _checkpoint_state(args)
    indices = _resolve_view_indices(ds, args.views)
    depths, valids, views = [], [], []
    for i in indices:
        view = ds.views[i]
        targets, _ = render_view(view, scene, assignment, decoder,
                                 tasks=frozenset({"depth"}))
        buf = targets.to_numpy()
        depths.append(buf["depth"])
        valids.append(buf["valid"])
        views.append(view)
    pts = ds.points.positions
    margin = 4.0 * float(_merge(args, vals, "tsdf-voxel", 0.04))
    vol = TsdfVolume.from_bounds(
        pts.min(axis=0) - margin, pts.max(axis=0) + margin,
        voxel_size=float(_merge(args, vals, "tsdf-voxel", 0.04)),
        truncation=float(_merge(args, vals, "tsdf-trunc", 0.12)),
        budget=int(_merge(args, vals, "budget", 64_000_000)),
        auto_coarsen=bool(_merge(args, vals, "auto-coarsen", False)))
    touched = 0
    for d, m, v in zip(depths, valids, views):
        touched += vol.integrate(d, m, v)
    mesh = vol.extract_mesh()
    path = _write_mesh_ply(args.out, mesh)
    print(f"mesh written: {path} ({len(mesh.vertices)} vertices, "
          f"{len(mesh.faces)} faces, {touched} voxel updates, "
          f"observed={vol.observed_fraction:.3f})")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .dataset import ingest
    from .fusion import eval_pointcloud
    from .losses import psnr, ssim
    from .renderer import render_view
    ds = ingest(args.manifest)
    scene, decoder, assignment = _checkpoint_state(args)
    indices = _resolve_view_indices(ds, args.views)
    out: dict = {"views": {}}
    ps, ss = [], []
    for i in indices:
        view = ds.views[i]
        targets, _ = render_view(view, scene, assignment, decoder,
                                 tasks=frozenset({"rgb", "depth"}))
        buf = targets.to_numpy()
        ref = ds.load_image(i)
        p = psnr(np.clip(buf["rgb"], 0, 1), ref)
        s = ssim(np.clip(buf["rgb"], 0, 1), ref)
        entry = {"psnr": p, "ssim": s}
        if ds.gt_depth_files[i] is not None:
            gt = ds.load_gt_depth(i)
            mask = (gt > 0) & buf["valid"]
            if mask.any():
                entry["depth_mae"] = float(np.abs(buf["depth"] - gt)[mask].mean())
                entry["depth_coverage"] = float(mask.mean())
        out["views"][view.view_id] = entry
        ps.append(p)
        ss.append(s)
    out["mean_psnr"] = float(np.mean(ps))
    out["mean_ssim"] = float(np.mean(ss))
    if args.mesh:
        from .dataset import read_ply_points
        mesh_pts = read_ply_points(args.mesh).positions
        if args.gt_points:
            gt_pts = read_ply_points(args.gt_points).positions
        else:
            gt_pts = ds.points.positions
        score = eval_pointcloud(mesh_pts, gt_pts, tau=args.tau_f)
        out["surface"] = {"precision": score.precision, "recall": score.recall,
                          "f1": score.f1, "mean_forward": score.mean_forward,
                          "mean_backward": score.mean_backward, "tau": args.tau_f}
    text = json.dumps(out, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"metrics written: {args.out}")
    else:
        print(text)
    return EXIT_OK


def _cmd_bench(args) -> int:
    import hashlib
    from .dataset import ingest
    from .partition import assign_voxels, schedule_patches
    from .renderer import render_view
    from .snapshot import load_scene
    ds = ingest(args.manifest)
    scene, decoder, _ = load_scene(args.scene)
    if decoder is None:
        from .decoder import DecoderParams
        decoder = DecoderParams.init(scene.offsets_per_voxel, seed=scene.seed)
    indices = _resolve_view_indices(ds, args.views)
    report = {"workers": {}, "views": len(indices)}
    digests = set()
    for m in _int_list(args.workers):
        if m < 1:
            raise InvalidInput("worker counts must be >= 1")
        assignment = assign_voxels(scene, m)
        schedule = schedule_patches([ds.views[i] for i in indices], m)
        h = hashlib.sha256()
        secs = 0.0
        moved = 0
        for i in indices:
            targets, stats = render_view(
                ds.views[i], scene, assignment, decoder,
                renderer_workers=frozenset(range(m)))
            buf = targets.to_numpy()
            for key in ("rgb", "depth", "normal", "alpha"):
                h.update(np.ascontiguousarray(buf[key]).tobytes())
            secs += stats.elapsed_seconds
            moved += stats.transfer.bytes_moved
        loads = schedule.loads()
        digest = h.hexdigest()
        digests.add(digest)
        report["workers"][m] = {
            "render_seconds": secs, "transfer_bytes": moved,
            "schedule_imbalance": float(loads.max() / loads.mean()),
            "output_sha256": digest}
        print(f"workers={m}: {secs:.3f}s render, {moved} bytes moved, "
              f"digest {digest[:12]}")
    report["outputs_identical"] = len(digests) == 1
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True))
    if not report["outputs_identical"]:
        raise NumericalError("renders differ across worker counts")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="voxsplat",
        description="LoD voxel scene training and rendering toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file with per-command sections")

    p = sub.add_parser("make-synthetic", help="generate a synthetic dataset")
    add_common(p)
    p.add_argument("--preset", choices=["plane", "plane-box", "sphere"])
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--fov", type=float)
    p.add_argument("--orbit-radius", type=float)
    p.add_argument("--orbit-height", type=float)
    p.add_argument("--spacing", type=float)
    p.add_argument("--points", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pseudo-scale", type=float)
    p.add_argument("--pseudo-shift", type=float)
    p.add_argument("--pseudo-noise", type=float)
    p.add_argument("--stripe-views")
    p.set_defaults(func=_cmd_make_synthetic)

    p = sub.add_parser("build", help="build the LoD voxel hierarchy from points")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--offsets", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("train", help="run the progressive training loop")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--verbose", action="store_true")
    from .trainer import TrainConfig
    for f in fields(TrainConfig):
        kind = type(f.default)
        p.add_argument(f"--{f.name.replace('_', '-')}",
                       type=float if kind is float else int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="render views from a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--views", default="all")
    p.add_argument("--tasks", default="rgb,depth,normal")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("enhance-depth", help="align and cross-view-filter priors")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--views", default="train")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--cache", action="store_true")
    p.set_defaults(func=_cmd_enhance_depth)

    p = sub.add_parser("mesh", help="fuse rendered depth and extract a mesh")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", default="train")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--tsdf-voxel", type=float)
    p.add_argument("--tsdf-trunc", type=float)
    p.add_argument("--budget", type=int)
    p.add_argument("--auto-coarsen", action="store_true", default=None)
    p.set_defaults(func=_cmd_mesh)

    p = sub.add_parser("eval", help="image and surface metrics for a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--views", default="test")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--mesh", help="PLY mesh or point cloud to score")
    p.add_argument("--gt-points", help="reference points (default: manifest points)")
    p.add_argument("--tau-f", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="render with several worker counts and compare")
    add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--workers", default="1,2,4")
    p.add_argument("--views", default="all")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except VoxsplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
