"""Synthetic scenes with exact ground truth, dataset I/O and depth alignment."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import DatasetError
from .field import AnalyticField, GridField, Slab, Sphere, Texture, NDC_BBOX, logit
from .geometry import CameraRig, PinholeCamera, ndc_to_world, pixel_centers

DEFAULT_BASELINE_FRACTION = 0.01


@dataclass
class SceneSpec:
    primitives: list
    background_depth: float = None
    frame_count: int = 1
    name: str = "custom"
    background_color: tuple = (0.55, 0.55, 0.7)
    background_texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")

    def field_at(self, frame):
        prims = [p.moved(frame) for p in self.primitives]
        if self.background_depth is not None:
            d = float(self.background_depth)
            prims.append(Slab(-d - 1e3, -d, color=self.background_color, texture=self.background_texture))
        return AnalyticField(prims)

    @property
    def is_static(self):
        return all(not np.any(p.velocity) for p in self.primitives)


def two_spheres(frame_count=3):
    """Default toy scene: foreground sphere at depth 2, background wall at depth 6."""
    return SceneSpec(
        primitives=[
            Sphere((-0.3, 0.0, -2.0), 0.35, color=(0.85, 0.25, 0.2),
                   texture=Texture(0.12, (0.0, 9.0, 0.0))),
            Sphere((0.5, -0.1, -3.5), 0.5, color=(0.25, 0.7, 0.35),
                   texture=Texture(0.12, (6.0, 0.0, 0.0), 0.5)),
        ],
        background_depth=6.0,
        frame_count=frame_count,
        name="two-spheres",
        background_texture=Texture(0.2, (2.5, 1.8, 0.0)),
    )


def moving_sphere(frame_count=3, velocity=(0.1, 0.0, 0.0)):
    return SceneSpec(
        primitives=[Sphere((0.0, 0.0, -2.5), 0.4, color=(0.9, 0.5, 0.1), velocity=velocity)],
        background_depth=6.0,
        frame_count=frame_count,
        name="moving-sphere",
    )


SCENES = {"two-spheres": two_spheres, "moving-sphere": moving_sphere}


def default_focal(width, fov_deg=50.0):
    return (width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)


def view_assignment(frame_count, n_views):
    """Map frames onto views in contiguous blocks (thirds for three views)."""
    return np.minimum(np.arange(frame_count) * n_views // frame_count, n_views - 1)


def small_baseline_rig(width=48, height=36, focal=None, frame_count=3, n_views=3, baseline=0.04):
    """Fronto-parallel views spread along x over a total span of ``baseline``."""
    focal = default_focal(width) if focal is None else focal
    xs = np.linspace(-baseline / 2, baseline / 2, n_views) if n_views > 1 else np.zeros(1)
    view = view_assignment(frame_count, n_views)
    trans = np.zeros((frame_count, 3))
    trans[:, 0] = xs[view]
    rots = np.repeat(np.eye(3)[None], frame_count, axis=0)
    pp = np.tile([width / 2.0, height / 2.0], (frame_count, 1))
    return CameraRig(width, height, np.full(frame_count, focal), pp, rots, trans)


def scene_rig(spec, width=48, height=36, baseline_fraction=DEFAULT_BASELINE_FRACTION, n_views=3, focal=None):
    """Small-baseline rig whose span is a fraction of the mean reference depth."""
    ref = small_baseline_rig(width, height, focal, 1, 1, 0.0)
    depth, _, _ = render_analytic(spec.field_at(0), ref, 0)
    return small_baseline_rig(width, height, focal, spec.frame_count, n_views,
                              baseline_fraction * float(depth.mean()))


def render_analytic(fld, rig, k, t_far=1e4):
    """Exact depth (ray distance), colour and hit index for every pixel."""
    W, H = rig.width, rig.height
    o, d = rig.rays(k, pixel_centers(W, H))
    t, which, color = fld.trace(o, d, 0.0, t_far)
    return t.reshape(H, W), color.reshape(H, W, 3), which.reshape(H, W)


@dataclass
class Dataset:
    images: np.ndarray
    depths: np.ndarray
    rig: CameraRig
    frame_ids: np.ndarray = None
    hits: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.depths = np.asarray(self.depths, dtype=float)
        if self.frame_ids is None:
            self.frame_ids = np.arange(self.images.shape[0])
        F, H, W = self.depths.shape
        if self.images.shape != (F, H, W, 3):
            raise DatasetError(f"image stack {self.images.shape} inconsistent with depth {self.depths.shape}")
        if len(self.rig) != F or self.rig.width != W or self.rig.height != H:
            raise DatasetError("camera rig does not match image dimensions/frame count")

    @property
    def frame_count(self):
        return self.images.shape[0]

    @property
    def height(self):
        return self.images.shape[1]

    @property
    def width(self):
        return self.images.shape[2]

    def save(self, path):
        path = Path(path)
        (path / "frames").mkdir(parents=True, exist_ok=True)
        (path / "depth").mkdir(parents=True, exist_ok=True)
        for i in range(self.frame_count):
            io.write_png(path / "frames" / f"{i:03d}.png", self.images[i])
            io.write_pfm(path / "depth" / f"{i:03d}.pfm", self.depths[i])
        io.save_cameras(path / "cameras.json", self.rig)
        meta = {"frame_count": self.frame_count, "width": self.width, "height": self.height, "units": "scene"}
        meta.update({k: v for k, v in self.meta.items() if k not in meta})
        (path / "meta.json").write_text(json.dumps(meta, indent=2))
        return path


def generate(spec, rig):
    """Ray-trace every frame of ``spec`` through ``rig``."""
    if not spec.primitives and spec.background_depth is None:
        raise DatasetError("scene has no primitives")
    if len(rig) != spec.frame_count:
        raise DatasetError(f"rig has {len(rig)} cameras for {spec.frame_count} frames")
    imgs, depths, hits = [], [], []
    for k in range(spec.frame_count):
        d, c, w = render_analytic(spec.field_at(k), rig, k)
        imgs.append(c)
        depths.append(d)
        hits.append(w)
    return Dataset(np.stack(imgs), np.stack(depths), rig, hits=np.stack(hits), meta={"scene": spec.name})


def load(path):
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"{path}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    try:
        n, W, H = int(meta["frame_count"]), int(meta["width"]), int(meta["height"])
    except KeyError as exc:
        raise DatasetError(f"meta.json lacks {exc}") from exc
    cam_path = path / "cameras.json"
    if not cam_path.exists():
        raise DatasetError(f"{path}: missing cameras.json")
    rig = io.load_cameras(cam_path, W, H)
    if len(rig) != n:
        raise DatasetError(f"cameras.json lists {len(rig)} frames, meta.json says {n}")
    imgs, depths = [], []
    for i in range(n):
        fp = path / "frames" / f"{i:03d}.png"
        dp = path / "depth" / f"{i:03d}.pfm"
        if not fp.exists():
            raise DatasetError(f"frame {i}: missing image {fp.name}")
        if not dp.exists():
            raise DatasetError(f"frame {i}: missing depth file {dp.name}")
        img = io.read_png(fp)
        dep = io.read_pfm(dp)
        if img.shape != (H, W, 3) or dep.shape != (H, W):
            raise DatasetError(f"frame {i}: dimensions {img.shape[:2]}/{dep.shape} do not match {H}x{W}")
        imgs.append(img)
        depths.append(dep.astype(np.float64))
    extra = {k: v for k, v in meta.items() if k not in ("frame_count", "width", "height")}
    return Dataset(np.stack(imgs), np.stack(depths), rig, meta=extra)


def align_depth(relative, metric_ref):
    """Least-squares scale/shift mapping a relative depth map onto metric samples.

    ``metric_ref`` is a sequence of ``((col, row), depth)`` pairs.  Returns
    ``(aligned_map, scale, shift)``.
    """
    relative = np.asarray(relative, dtype=float)
    if len(metric_ref) < 2:
        raise ValueError("need at least two reference points")
    cols = np.array([int(p[0][0]) for p in metric_ref])
    rows = np.array([int(p[0][1]) for p in metric_ref])
    target = np.array([float(p[1]) for p in metric_ref])
    rel = relative[rows, cols]
    if np.ptp(rel) == 0 or np.ptp(relative) == 0:
        raise ValueError("relative depth is constant; alignment is degenerate")
    A = np.stack([rel, np.ones_like(rel)], axis=1)
    (s, b), *_ = np.linalg.lstsq(A, target, rcond=None)
    return s * relative + b, float(s), float(b)


def voxelize(spec, ndc_cam, near=1.0, resolution=64, frames=None, sharpness=20000.0, clip=40000.0,
             bias=0.125):
    """Grid whose raw density is a clipped linear function of the scene SDF.

    The SDF is rescaled to NDC voxel units by its finite-difference gradient in
    NDC, so the zero crossing of the interpolated raw density sits on the
    analytic surface to sub-voxel accuracy.
    """
    res = int(resolution)
    lo, hi = np.asarray(NDC_BBOX[0]), np.asarray(NDC_BBOX[1])
    axes = [np.linspace(lo[i], hi[i], res) for i in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([X, Y, np.minimum(Z, 1.0 - 1e-4)], axis=-1).reshape(-1, 3)
    world = ndc_to_world(pts, ndc_cam, near)
    voxel = (hi - lo) / (res - 1)
    h = 1e-5
    offsets = [ndc_to_world(pts + h * np.eye(3)[i], ndc_cam, near) for i in range(3)]
    offsets_m = [ndc_to_world(pts - h * np.eye(3)[i], ndc_cam, near) for i in range(3)]
    if frames is None:
        frames = [0] if spec.is_static else list(range(spec.frame_count))
    params = np.empty((len(frames), res, res, res, 4))
    for slot, k in enumerate(frames):
        fld = spec.field_at(k)
        sdf = fld.sdf(world)
        # gradient per voxel step along each NDC axis
        grad = np.stack([(fld.sdf(p) - fld.sdf(m)) / (2 * h) * voxel[i]
                         for i, (p, m) in enumerate(zip(offsets, offsets_m))], axis=1)
        gnorm = np.maximum(np.linalg.norm(grad, axis=1), 1e-12)
        sdf_vox = sdf / gnorm
        # trilinear interpolation of a convex SDF overestimates it between
        # lattice points; shift by the mean interpolation error of a cell
        lap = np.zeros_like(sdf_vox)
        grid = sdf_vox.reshape(res, res, res)
        for ax in range(3):
            lap += np.gradient(np.gradient(grid, axis=ax), axis=ax).ravel()
        sdf_vox = sdf_vox - bias * lap
        raw_sigma = np.clip(-sharpness * sdf_vox, -clip, clip)
        which = fld.nearest(world)
        color = fld.color_of(_column_hits(fld, world, which), which)
        params[slot, ..., 0] = raw_sigma.reshape(res, res, res)
        params[slot, ..., 1:] = logit(np.clip(color, 0.01, 0.99)).reshape(res, res, res, 3)
    return GridField(params, NDC_BBOX)


def _column_hits(fld, world, which):
    """Where each point's ray from the origin meets its nearest primitive.

    NDC columns are rays through the origin, so colouring a whole column by its
    visible surface keeps texture from drifting with depth.
    """
    d = world / np.linalg.norm(world, axis=1, keepdims=True)
    out = world.copy()
    o = np.zeros_like(world)
    for k, p in enumerate(fld.primitives):
        m = which == k
        if np.any(m):
            t = p.intersect(o[m], d[m])
            ok = np.isfinite(t)
            sub = out[m]
            sub[ok] = t[ok, None] * d[m][ok]
            out[m] = sub
    return out


def reference_camera(rig):
    """Camera defining the shared NDC space (frame 0 intrinsics, no residual)."""
    return PinholeCamera(rig.width, rig.height, float(rig.f_init[0]), 0.0, tuple(rig.principal_point[0]))
