"""Weight maps, full-view rendering and per-ray peak statistics."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .errors import OutOfBoundsError
from .geometry import ndc_t_to_world_distance, pixel_centers, world_distance_to_ndc_t
from .pipeline import Batch, RenderConfig, forward, world_rays
from .scenes import reference_camera

PEAK_WINDOW = 2
MODE_THRESHOLD = 0.1


def render_rays(fld, rig, frame, pixels, n_samples=128, near=1.0, background=(0.0, 0.0, 0.0),
                ndc_cam=None, chunk=4096, backend=None):
    """Deterministic (midpoint-sampled) render of arbitrary pixels of one frame.

    Returns a dict with rgb, NDC depth, world distance, weights, t and the
    residual transmittance.
    """
    ndc_cam = reference_camera(rig) if ndc_cam is None else ndc_cam
    cfg = RenderConfig(n_samples=n_samples, near=near, jitter=False, background=background)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    out = {k: [] for k in ("rgb", "depth", "distance", "weights", "t", "residual")}
    for s in range(0, pixels.shape[0], chunk):
        px = pixels[s:s + chunk]
        B = px.shape[0]
        batch = Batch(np.full(B, frame, dtype=np.int64), px, np.zeros((B, 3)), np.ones(B), np.arange(B))
        c = forward(fld, rig, ndc_cam, batch, cfg, gt_t=np.zeros(B), backend=backend)
        dist = ndc_t_to_world_distance(np.repeat(c.origins, n_samples, 0), np.repeat(c.dirs, n_samples, 0),
                                       c.t.reshape(-1), near).reshape(B, n_samples)
        out["rgb"].append(c.rgb)
        out["depth"].append(c.depth)
        out["distance"].append(np.sum(c.weights * dist, axis=1))
        out["weights"].append(c.weights)
        out["t"].append(c.t)
        out["residual"].append(c.trans[:, -1])
    return {k: np.concatenate(v) for k, v in out.items()}


@dataclass
class RenderedView:
    image: np.ndarray
    depth: np.ndarray
    distance: np.ndarray
    frame: int

    def export(self, stem):
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        io.write_png(stem.with_suffix(".png"), self.image)
        io.write_pfm(stem.with_suffix(".pfm"), self.distance)
        return stem.with_suffix(".png"), stem.with_suffix(".pfm")


def render_view(fld, rig, frame, n_samples=128, near=1.0, background=(0.0, 0.0, 0.0), ndc_cam=None, backend=None):
    """Full image plus depth.

    ``depth`` is the composited NDC ray parameter; ``distance`` is the
    weight-averaged world distance of the samples (0 for an empty field).
    """
    W, H = rig.width, rig.height
    r = render_rays(fld, rig, frame, pixel_centers(W, H), n_samples, near, background, ndc_cam, backend=backend)
    return RenderedView(r["rgb"].reshape(H, W, 3), r["depth"].reshape(H, W), r["distance"].reshape(H, W), frame)


@dataclass
class WeightMap:
    values: np.ndarray
    row: int
    frame: int
    scale: float
    residual: np.ndarray = None

    @property
    def normalized(self):
        if self.scale <= 0:
            return np.zeros_like(self.values)
        return self.values / self.scale

    @property
    def shape(self):
        return self.values.shape


def make_weight_map(weights, row=0, frame=0, residual=None):
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    return WeightMap(w, row, frame, float(w.max()) if w.size else 0.0, residual)


def weight_map(fld, rig, frame, row, n_samples=128, near=1.0, ndc_cam=None, backend=None):
    """W×N rendering weights for one image row, normalised by the map maximum."""
    if not 0 <= row < rig.height:
        raise OutOfBoundsError(f"row {row} outside image of height {rig.height}")
    px = np.stack([np.arange(rig.width) + 0.5, np.full(rig.width, row + 0.5)], axis=1)
    r = render_rays(fld, rig, frame, px, n_samples, near, ndc_cam=ndc_cam, backend=backend)
    return make_weight_map(r["weights"], row, frame, r["residual"])


def export_pgm(wmap, path):
    """8-bit PGM with W columns and N rows (sample index grows downward)."""
    path = Path(path)
    q = np.round(255.0 * wmap.normalized.T).astype(np.uint8)
    io.write_pgm(path, q)
    meta = {"row": int(wmap.row), "frame": int(wmap.frame), "normalization": "per-map max",
            "max_weight": wmap.scale, "width": int(wmap.values.shape[0]), "samples": int(wmap.values.shape[1])}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path


@dataclass
class UnimodalityReport:
    peak: np.ndarray
    mass_ratio: np.ndarray
    modality: np.ndarray

    @property
    def mean_modality(self):
        return float(np.mean(self.modality))


def count_modes(w, threshold=MODE_THRESHOLD):
    """Local maxima (plateaus counted once) at or above ``threshold``·max."""
    w = np.asarray(w, dtype=float)
    top = w.max() if w.size else 0.0
    if top <= 0:
        return 0
    keep = np.r_[True, np.diff(w) != 0]
    v = w[keep]
    padded = np.r_[-np.inf, v, -np.inf]
    is_max = (padded[1:-1] > padded[:-2]) & (padded[1:-1] > padded[2:])
    return int(np.sum(is_max & (v >= threshold * top)))


def unimodality_from_weights(weights, window=PEAK_WINDOW, threshold=MODE_THRESHOLD):
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    if w.shape[0] == 0:
        raise ValueError("empty pixel set")
    P, N = w.shape
    peak = np.argmax(w, axis=1)
    idx = np.arange(N)[None]
    near = np.abs(idx - peak[:, None]) <= window
    total = w.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(total > 0, np.sum(w * near, axis=1) / total, 0.0)
    modes = np.array([count_modes(r, threshold) for r in w])
    return UnimodalityReport(peak, np.clip(ratio, 0.0, 1.0), modes)


def unimodality(fld, rig, frame, pixels, n_samples=128, near=1.0, ndc_cam=None, backend=None):
    r = render_rays(fld, rig, frame, pixels, n_samples, near, ndc_cam=ndc_cam, backend=backend)
    return unimodality_from_weights(r["weights"])


def depth_bin(rig, frame, pixels, distance, n_samples, near=1.0, ndc_cam=None):
    """Sample index whose bin contains the given world distance along each ray."""
    frames = np.full(len(pixels), frame)
    o, d = world_rays(rig, frames, np.asarray(pixels, dtype=float))
    t = world_distance_to_ndc_t(o, d, distance, near)
    return np.clip(np.floor(t * n_samples).astype(int), 0, n_samples - 1)
