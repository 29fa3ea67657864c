"""PNG, PFM, PGM and camera-JSON readers/writers."""

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError
from .geometry import CameraRig, Pose


def write_png(path, img):
    arr = np.clip(np.round(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_pfm(path, data):
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("PFM writer expects a 2-D map")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(data).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", "replace").strip()
        if header not in ("Pf", "PF"):
            raise DatasetError(f"{path}: not a PFM file (header {header!r})")
        dims = f.readline().decode("ascii", "replace")
        m = re.match(r"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise DatasetError(f"{path}: malformed PFM dimensions {dims!r}")
        w, h = int(m.group(1)), int(m.group(2))
        try:
            scale = float(f.readline().decode("ascii").strip())
        except ValueError as exc:
            raise DatasetError(f"{path}: malformed PFM scale") from exc
        channels = 3 if header == "PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        raw = f.read()
    expected = w * h * channels * 4
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} data bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(h, w, channels) if channels == 3 else \
        np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)


def write_pgm(path, values):
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PGM supported")
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise DatasetError(f"{path}: truncated PGM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def cameras_to_json(rig):
    frames = []
    for k in range(len(rig)):
        frames.append({
            "f_init": float(rig.f_init[k]),
            "principal_point": [float(v) for v in rig.principal_point[k]],
            "rotation": [float(v) for v in rig.rotations[k].ravel()],
            "translation": [float(v) for v in rig.translations[k]],
        })
    return {"width": int(rig.width), "height": int(rig.height), "frames": frames}


def save_cameras(path, rig):
    Path(path).write_text(json.dumps(cameras_to_json(rig), indent=2))


def cameras_from_json(doc, width=None, height=None, tol=1e-6):
    width = doc.get("width", width)
    height = doc.get("height", height)
    if width is None or height is None:
        raise DatasetError("camera file lacks image dimensions")
    frames = doc.get("frames")
    if not frames:
        raise DatasetError("camera file has no frames")
    f, pp, rots, trans = [], [], [], []
    for i, fr in enumerate(frames):
        try:
            R = np.asarray(fr["rotation"], dtype=float)
            t = np.asarray(fr["translation"], dtype=float)
            if R.size != 9 or t.size != 3:
                raise DatasetError(f"frame {i}: rotation needs 9 floats and translation 3")
            R = R.reshape(3, 3)
            try:
                Pose(R, t).validate(tol)
            except ValueError as exc:
                raise DatasetError(f"frame {i}: {exc}") from exc
            f.append(float(fr["f_init"]))
            pp.append(fr.get("principal_point", [width / 2, height / 2]))
        except KeyError as exc:
            raise DatasetError(f"frame {i}: missing key {exc}") from exc
        rots.append(R)
        trans.append(t)
    return CameraRig(int(width), int(height), f, pp, rots, trans)


def load_cameras(path, width=None, height=None):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from exc
    return cameras_from_json(doc, width, height)
