"""Image and float-map file I/O.

Color images are 8-bit PNG. Float maps (depth, normals) are raw little-endian
float32 planes with a JSON sidecar describing width/height/channels/layout,
so they survive exact round-trips without image-format quantization.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidInput, IoError

RAW_SUFFIX = ".raw"
META_SUFFIX = ".json"


def write_png(path, image: np.ndarray) -> Path:
    """Save a float image in [0, 1], shape (H, W) or (H, W, 3), as 8-bit PNG."""
    path = Path(path)
    img = np.asarray(image, np.float64)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise InvalidInput(f"expected (H,W) or (H,W,3) image, got {img.shape}")
    if not np.isfinite(img).all():
        raise InvalidInput("image contains non-finite values")
    b = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(b, mode="L" if b.ndim == 2 else "RGB").save(path)
    return path


def read_png(path) -> np.ndarray:
    """Load a PNG as float64 in [0, 1]; color images come back (H, W, 3)."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB") if im.mode not in ("L", "RGB") else im
            arr = np.asarray(im, np.uint8)
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def _norm_base(path) -> Path:
    path = Path(path)
    if path.suffix in (RAW_SUFFIX, META_SUFFIX):
        return path.with_suffix("")
    return path


def write_float_map(path, data: np.ndarray, meta: dict | None = None) -> Path:
    """Write (H, W) or (H, W, C) float data as planar float32 + JSON sidecar.

    `path` may be the base name or either of the two produced files; returns
    the sidecar path.
    """
    base = _norm_base(path)
    arr = np.asarray(data, np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise InvalidInput(f"expected (H,W) or (H,W,C) map, got {np.asarray(data).shape}")
    h, w, c = arr.shape
    planar = np.ascontiguousarray(arr.transpose(2, 0, 1).astype("<f4"))
    base.parent.mkdir(parents=True, exist_ok=True)
    (base.parent / (base.name + RAW_SUFFIX)).write_bytes(planar.tobytes())
    sidecar = base.parent / (base.name + META_SUFFIX)
    info = {"width": w, "height": h, "channels": c, "dtype": "float32",
            "layout": "planar", "data": base.name + RAW_SUFFIX}
    info.update(meta or {})
    sidecar.write_text(json.dumps(info, indent=1, sort_keys=True))
    return sidecar


def read_float_map(path) -> tuple[np.ndarray, dict]:
    """Read a float map written by write_float_map; returns (array, metadata).

    Single-channel maps come back (H, W); multi-channel maps (H, W, C).
    """
    base = _norm_base(path)
    sidecar = base.parent / (base.name + META_SUFFIX)
    try:
        meta = json.loads(sidecar.read_text())
    except OSError as exc:
        raise IoError(f"cannot read map sidecar {sidecar}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoError(f"map sidecar {sidecar} is not valid JSON: {exc}") from exc
    for key in ("width", "height", "channels", "dtype", "layout"):
        if key not in meta:
            raise IoError(f"map sidecar {sidecar} is missing {key!r}")
    if meta["dtype"] != "float32" or meta["layout"] != "planar":
        raise IoError(f"map sidecar {sidecar}: unsupported encoding "
                      f"{meta['dtype']}/{meta['layout']}")
    w, h, c = int(meta["width"]), int(meta["height"]), int(meta["channels"])
    raw_path = base.parent / meta.get("data", base.name + RAW_SUFFIX)
    try:
        blob = raw_path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read map data {raw_path}: {exc}") from exc
    if len(blob) != 4 * w * h * c:
        raise IoError(f"map data {raw_path}: expected {4 * w * h * c} bytes, "
                      f"got {len(blob)}")
    arr = np.frombuffer(blob, dtype="<f4").reshape(c, h, w).transpose(1, 2, 0)
    arr = arr.astype(np.float64)
    return (arr[..., 0] if c == 1 else arr), meta
