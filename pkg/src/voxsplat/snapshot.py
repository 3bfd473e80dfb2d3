"""Binary snapshot container for scenes, decoder weights, and train state.

Layout (all integers little-endian):

    magic   6 bytes  b"PH23D\\0"
    version u32      currently 1
    count   u32      number of sections
    section := tag (4 ascii bytes) + u32 record count + records
    record  := u16 name length + name (utf-8) + u8 dtype code + u8 ndim
               + ndim * u64 shape + u64 payload bytes + raw C-order payload

Sections used by the package: "SCNE" scene hierarchy, "DEC1" decoder
weights, "TRN1" optimizer/train state. Readers preserve section and record
order and reject unknown magic, versions, or truncated payloads.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInput, IoError

MAGIC = b"PH23D\0"
VERSION = 1

_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8", 3: "<i4", 4: "|u1", 5: "<u8", 6: "<u4"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}

SCENE_TAG = "SCNE"
DECODER_TAG = "DEC1"
TRAIN_TAG = "TRN1"


def _encode_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    key = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if np.dtype(key) not in _CODES:
        raise InvalidInput(f"unsupported dtype {arr.dtype} for record {name!r}")
    arr = arr.astype(np.dtype(_DTYPES[_CODES[np.dtype(key)]]), copy=False)
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb
    head += struct.pack("<BB", _CODES[np.dtype(key)], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = arr.tobytes()
    head += struct.pack("<Q", len(payload))
    return head + payload


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise IoError(f"snapshot {self.path}: truncated at byte {self.off}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def write_snapshot(path, sections: list[tuple[str, dict[str, np.ndarray]]]) -> Path:
    """Write sections (tag -> ordered name->array mapping) to `path`."""
    path = Path(path)
    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for tag, records in sections:
        tb = tag.encode("ascii")
        if len(tb) != 4:
            raise InvalidInput(f"section tag must be 4 ascii bytes, got {tag!r}")
        parts.append(tb + struct.pack("<I", len(records)))
        for name, arr in records.items():
            parts.append(_encode_array(name, np.asarray(arr)))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


def read_snapshot(path) -> dict[str, dict[str, np.ndarray]]:
    """Read a snapshot back as {tag: {name: array}} preserving order."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read snapshot {path}: {exc}") from exc
    r = _Reader(blob, str(path))
    if r.take(len(MAGIC)) != MAGIC:
        raise IoError(f"snapshot {path}: bad magic, not a scene snapshot")
    version = r.u("<I")
    if version != VERSION:
        raise IoError(f"snapshot {path}: unsupported version {version}")
    out: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(r.u("<I")):
        tag = r.take(4).decode("ascii", errors="replace")
        records: dict[str, np.ndarray] = {}
        for _ in range(r.u("<I")):
            name = r.take(r.u("<H")).decode("utf-8")
            code = r.u("<B")
            if code not in _DTYPES:
                raise IoError(f"snapshot {path}: unknown dtype code {code}")
            ndim = r.u("<B")
            shape = tuple(r.u("<Q") for _ in range(ndim))
            nbytes = r.u("<Q")
            arr = np.frombuffer(r.take(nbytes), dtype=_DTYPES[code]).copy()
            expect = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            if arr.size != expect:
                raise IoError(f"snapshot {path}: record {name!r} payload size mismatch")
            records[name] = arr.reshape(shape)
        if tag in out:
            raise IoError(f"snapshot {path}: duplicate section {tag!r}")
        out[tag] = records
    if r.off != len(blob):
        raise IoError(f"snapshot {path}: {len(blob) - r.off} trailing bytes")
    return out


def scene_to_records(scene) -> dict[str, np.ndarray]:
    rec: dict[str, np.ndarray] = {
        "meta_f": np.array([scene.base_voxel_size, scene.lod_ref_distance], np.float64),
        "meta_i": np.array([scene.lod_count, scene.offsets_per_voxel, scene.seed,
                            scene.lod_bias], np.int64),
    }
    for lv in scene.levels:
        p = f"level{lv.level}/"
        rec[p + "grid"] = lv.grid
        rec[p + "embeddings"] = lv.embeddings
        rec[p + "scales"] = lv.scales
        rec[p + "offsets"] = lv.offsets
        rec[p + "owner"] = lv.owner.astype(np.int64)
    return rec


def scene_from_records(rec: dict[str, np.ndarray]):
    from .scene import SceneLevel, SceneModel
    try:
        mf, mi = rec["meta_f"], rec["meta_i"]
        base, lod_ref = float(mf[0]), float(mf[1])
        k, n, seed, bias = int(mi[0]), int(mi[1]), int(mi[2]), int(mi[3])
        levels = []
        for lvl in range(k):
            p = f"level{lvl}/"
            levels.append(SceneLevel(
                level=lvl, cell_size=base / (2 ** lvl),
                grid=rec[p + "grid"].astype(np.int64),
                embeddings=rec[p + "embeddings"].astype(np.float64),
                scales=rec[p + "scales"].astype(np.float64),
                offsets=rec[p + "offsets"].astype(np.float64),
                owner=rec[p + "owner"].astype(np.int32)))
    except KeyError as exc:
        raise IoError(f"scene section is missing record {exc}") from exc
    scene = SceneModel(base_voxel_size=base, lod_count=k, offsets_per_voxel=n,
                       levels=levels, seed=seed, lod_ref_distance=lod_ref,
                       lod_bias=bias)
    scene.validate()
    return scene


def decoder_to_records(params) -> dict[str, np.ndarray]:
    rec = {"meta_i": np.array([params.n], np.int64)}
    rec.update(params.to_arrays())
    return rec


def decoder_from_records(rec: dict[str, np.ndarray]):
    from .decoder import DecoderParams
    try:
        n = int(rec["meta_i"][0])
    except KeyError as exc:
        raise IoError(f"decoder section is missing record {exc}") from exc
    arrays = {k: v for k, v in rec.items() if k != "meta_i"}
    return DecoderParams.from_arrays(n, arrays)


def save_scene(path, scene, decoder=None, extra=None) -> Path:
    sections = [(SCENE_TAG, scene_to_records(scene))]
    if decoder is not None:
        sections.append((DECODER_TAG, decoder_to_records(decoder)))
    for tag, rec in (extra or {}).items():
        sections.append((tag, rec))
    return write_snapshot(path, sections)


def load_scene(path):
    """Returns (scene, decoder-or-None, remaining sections)."""
    data = read_snapshot(path)
    if SCENE_TAG not in data:
        raise IoError(f"snapshot {path} has no scene section")
    scene = scene_from_records(data.pop(SCENE_TAG))
    decoder = None
    if DECODER_TAG in data:
        decoder = decoder_from_records(data.pop(DECODER_TAG))
    return scene, decoder, data
