"""Batched forward/backward through camera residuals, grid, renderer and losses.

The computation graph is fixed, so reverse mode is written as explicit
per-stage adjoints.  Depth targets are converted into the NDC ray parameter
of each ray and treated as constants (no gradient through the target).
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .ddr import DensityLossConfig, GumbelConfig
from .errors import ShapeMismatchError
from .geometry import ndc_rays, ndc_rays_backward, world_distance_to_ndc_t
from .losses import DEFAULT_LAMBDAS, aggregate, depth_loss, grad_loss_runs, rgb_loss


@dataclass
class RenderConfig:
    n_samples: int = 128
    near: float = 1.0
    jitter: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    run_length: int = 32
    lambdas: tuple = DEFAULT_LAMBDAS
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)
    density: DensityLossConfig = field(default_factory=DensityLossConfig)


@dataclass
class GradientBuffer:
    field: np.ndarray
    xi: np.ndarray
    delta_f: np.ndarray

    @classmethod
    def zeros_like(cls, fld, rig):
        n = len(rig) if rig is not None else 0
        return cls(np.zeros(fld.params.shape), np.zeros((n, 6)), np.zeros(n))

    def zero(self):
        self.field[...] = 0.0
        self.xi[...] = 0.0
        self.delta_f[...] = 0.0

    def merge(self, other):
        if self.field.shape != other.field.shape or self.xi.shape != other.xi.shape:
            raise ShapeMismatchError("cannot merge gradient buffers of different shapes")
        self.field += other.field
        self.xi += other.xi
        self.delta_f += other.delta_f
        return self

    def flat(self):
        return np.concatenate([self.field.ravel(), self.xi.ravel(), self.delta_f.ravel()])


@dataclass
class Batch:
    frames: np.ndarray
    pixels: np.ndarray
    rgb: np.ndarray
    depth: np.ndarray
    ray_ids: np.ndarray


@dataclass
class ForwardCache:
    frames: np.ndarray
    pixels: np.ndarray
    origins: np.ndarray
    dirs: np.ndarray
    o_ndc: np.ndarray
    d_ndc: np.ndarray
    t: np.ndarray
    delta: np.ndarray
    points: np.ndarray
    raw: np.ndarray
    inside: np.ndarray
    spatial: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    trans: np.ndarray
    weights: np.ndarray
    rgb: np.ndarray
    depth: np.ndarray
    gt_t: np.ndarray


@dataclass
class StepResult:
    losses: object
    grads: GradientBuffer
    cache: ForwardCache
    skipped: np.ndarray


def world_rays(rig, frames, pixels):
    B = frames.shape[0]
    origins = np.empty((B, 3))
    dirs = np.empty((B, 3))
    for k in np.unique(frames):
        m = frames == k
        o, d = rig.rays(int(k), pixels[m])
        origins[m] = o
        dirs[m] = d
    return origins, dirs


def noise_keys(seed):
    return (
        kernels.stream_key(seed, "jitter"),
        kernels.stream_key(seed, "gumbel"),
        kernels.stream_key(seed, "triangle"),
    )


def forward(fld, rig, ndc_cam, batch, cfg, seed=0, gt_t=None, want_spatial=False, backend=None):
    k = kernels.get_backend(backend)
    key_j, _, _ = noise_keys(seed)
    frames = np.asarray(batch.frames, dtype=np.int64)
    origins, dirs = world_rays(rig, frames, batch.pixels)
    o_ndc, d_ndc = ndc_rays(origins, dirs, ndc_cam, cfg.near)
    if gt_t is None:
        gt_t = world_distance_to_ndc_t(origins, dirs, batch.depth, cfg.near)
    B = frames.shape[0]
    ray_ids = np.asarray(batch.ray_ids, dtype=np.int64)
    t, delta = k.stratified_t(np.zeros(B), np.ones(B), cfg.n_samples, ray_ids, key_j, cfg.jitter)
    points = o_ndc[:, None, :] + t[..., None] * d_ndc[:, None, :]
    raw, inside, spatial = fld.gather(frames, points, want_spatial=want_spatial, backend=backend)
    bg = np.asarray(cfg.background, dtype=float)
    sigma, color, trans, weights, rgb, depth = k.render_forward(raw, inside, t, delta, bg)
    return ForwardCache(frames, batch.pixels, origins, dirs, o_ndc, d_ndc, t, delta, points, raw, inside,
                        spatial, sigma, color, trans, weights, rgb, depth, np.asarray(gt_t, dtype=float))


def evaluate_losses(cache, batch, cfg, seed=0, backend=None):
    """Loss bundle plus upstream gradients on rgb, depth, weights and sigma."""
    k = kernels.get_backend(backend)
    _, key_g, key_t = noise_keys(seed)
    lam = cfg.lambdas
    B, N = cache.weights.shape
    gt_t = cache.gt_t

    l_rgb, g_rgb = rgb_loss(cache.rgb, batch.rgb)
    l_depth, g_depth = depth_loss(cache.depth, gt_t)

    skipped = np.zeros(B, dtype=bool)
    g_w = np.zeros((B, N))
    l_weight = 0.0
    if lam[2] > 0:
        gc = cfg.gumbel
        half = cache.delta.mean(axis=1)
        per_ray, gw, skipped = k.ddr_weight_loss(
            cache.weights, cache.t, half, gt_t, np.asarray(batch.ray_ids, dtype=np.int64), key_g, key_t,
            gc.n_samples, gc.epsilon, gc.weight_floor,
        )
        l_weight = float(per_ray.sum() / B)
        g_w = gw / B

    boundary = gt_t - cfg.density.margin * cache.delta.mean(axis=1)
    mask = cache.t < boundary[:, None]
    l_density = float(np.sum(cache.sigma * mask) / B)
    g_sigma = mask / B

    if B >= 2 and B % cfg.run_length == 0 and cfg.run_length >= 2:
        l_grad, g_grad = grad_loss_runs(cache.depth, gt_t, cfg.run_length)
    elif B >= 2:
        l_grad, g_grad = grad_loss_runs(cache.depth, gt_t, B)
    else:
        l_grad, g_grad = 0.0, np.zeros(B)

    bundle = aggregate((l_rgb, l_depth, l_weight, l_density, l_grad), lam)
    upstream = {
        "rgb": lam[0] * g_rgb,
        "depth": lam[1] * g_depth + lam[4] * g_grad,
        "weights": lam[2] * g_w,
        "sigma": lam[3] * g_sigma,
    }
    bundle.gradients = upstream
    return bundle, skipped


def backward(fld, rig, ndc_cam, cache, upstream, cfg, want_field=True, want_camera=True, backend=None,
             buffer=None):
    k = kernels.get_backend(backend)
    if buffer is None:
        buffer = GradientBuffer.zeros_like(fld, rig)
    bg = np.asarray(cfg.background, dtype=float)
    grad_raw = k.render_backward(
        cache.raw, cache.inside, cache.t, cache.delta, bg, cache.color, cache.trans, cache.weights,
        upstream["rgb"], upstream["depth"], upstream["weights"], upstream["sigma"],
    )
    if want_field:
        fld.scatter(buffer.field, cache.frames, cache.points, grad_raw, backend=backend)
    if want_camera and rig is not None:
        if cache.spatial.shape[0] != cache.points.shape[0]:
            raise ShapeMismatchError("camera gradients need a forward pass with spatial derivatives")
        g_x = np.einsum("bnc,bncd->bnd", grad_raw, cache.spatial)
        g_o_ndc = g_x.sum(axis=1)
        g_d_ndc = np.einsum("bn,bnd->bd", cache.t, g_x)
        g_o, g_d = ndc_rays_backward(cache.origins, cache.dirs, ndc_cam, cfg.near, g_o_ndc, g_d_ndc)
        for f in np.unique(cache.frames):
            m = cache.frames == f
            gxi, gdf = rig.rays_backward(int(f), cache.pixels[m], g_o[m], g_d[m])
            buffer.xi[f] += gxi
            buffer.delta_f[f] += gdf
    return buffer


def step(fld, rig, ndc_cam, batch, cfg, seed=0, want_field=True, want_camera=True, gt_t=None, backend=None):
    """Forward, losses and backward for one batch."""
    cache = forward(fld, rig, ndc_cam, batch, cfg, seed, gt_t=gt_t, want_spatial=want_camera, backend=backend)
    bundle, skipped = evaluate_losses(cache, batch, cfg, seed, backend=backend)
    grads = backward(fld, rig, ndc_cam, cache, bundle.gradients, cfg, want_field, want_camera, backend=backend)
    return StepResult(bundle, grads, cache, skipped)


def total_loss(fld, rig, ndc_cam, batch, cfg, seed=0, gt_t=None, backend=None):
    cache = forward(fld, rig, ndc_cam, batch, cfg, seed, gt_t=gt_t, backend=backend)
    bundle, _ = evaluate_losses(cache, batch, cfg, seed, backend=backend)
    return bundle.total
