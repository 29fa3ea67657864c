"""Binary checkpoints: one JSON header line, then little-endian f32 blobs."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .field import GridField

MAGIC = "ddrnerf-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    field: GridField
    xi: np.ndarray
    delta_f: np.ndarray
    step: int = 0
    adam: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _sections(ckpt):
    p = np.asarray(ckpt.field.params)
    out = [("sigma", p[..., 0]), ("color", p[..., 1:]), ("xi", ckpt.xi), ("delta_f", ckpt.delta_f)]
    for name in sorted(ckpt.adam):
        out.append((f"adam.{name}", ckpt.adam[name]))
    return out


def save(path, ckpt):
    """Write ``ckpt``; every array is stored as little-endian float32."""
    sections = []
    blobs = []
    for name, arr in _sections(ckpt):
        a = np.ascontiguousarray(arr, dtype="<f4")
        sections.append({"name": name, "shape": list(a.shape), "nbytes": a.nbytes})
        blobs.append(a.tobytes())
    lo, hi = ckpt.field.bbox
    header = {
        "format": MAGIC,
        "version": VERSION,
        "resolution": list(ckpt.field.resolution),
        "bbox": [list(map(float, lo)), list(map(float, hi))],
        "frame_count": ckpt.field.frame_count,
        "dtype": "f32",
        "byte_order": "little",
        "step": int(ckpt.step),
        "sections": sections,
        "extra": ckpt.extra,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        for b in blobs:
            f.write(b)
    tmp.replace(path)
    return path


def load(path):
    path = Path(path)
    try:
        with open(path, "rb") as f:
            line = f.readline()
            body = f.read()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    try:
        header = json.loads(line.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path}: malformed checkpoint header") from exc
    if header.get("format") != MAGIC:
        raise DatasetError(f"{path}: not a checkpoint file")
    if header.get("dtype") != "f32" or header.get("byte_order") != "little":
        raise DatasetError(f"{path}: unsupported dtype/byte order")
    expected = sum(s["nbytes"] for s in header["sections"])
    if len(body) != expected:
        raise DatasetError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    arrays = {}
    pos = 0
    for s in header["sections"]:
        n = s["nbytes"]
        if n != 4 * int(np.prod(s["shape"], dtype=np.int64)):
            raise DatasetError(f"{path}: section {s['name']} size does not match its shape")
        arrays[s["name"]] = np.frombuffer(body[pos:pos + n], dtype="<f4").reshape(s["shape"]).astype(np.float32)
        pos += n
    F = header["frame_count"]
    res = tuple(header["resolution"])
    sigma, color = arrays["sigma"], arrays["color"]
    if sigma.shape != (F,) + res or color.shape != (F,) + res + (3,):
        raise DatasetError(f"{path}: field blobs do not match resolution {res} x {F} frames")
    params = np.concatenate([sigma[..., None], color], axis=-1)
    lo, hi = header["bbox"]
    fld = GridField(params, (tuple(lo), tuple(hi)))
    adam = {k[5:]: v for k, v in arrays.items() if k.startswith("adam.")}
    return Checkpoint(fld, arrays["xi"], arrays["delta_f"], int(header["step"]), adam, header.get("extra", {}))
