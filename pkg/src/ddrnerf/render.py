"""Discrete volume rendering along a single ray.

These are the reference per-ray routines; batched training goes through
``pipeline`` and the kernels, which are tested against them.
"""

from dataclasses import dataclass

import numpy as np

from .errors import MissingCacheError, ShapeMismatchError

UNCONVERGED_MASS = 0.5


@dataclass(frozen=True)
class RaySampling:
    t: np.ndarray
    delta: np.ndarray


@dataclass(frozen=True)
class WeightDistribution:
    t: np.ndarray
    w: np.ndarray

    @property
    def mass(self):
        return float(np.sum(self.w))


@dataclass
class RenderResult:
    color: np.ndarray
    depth: float
    weights: WeightDistribution
    transmittance: np.ndarray
    residual_transmittance: float
    cache: dict = None

    @property
    def unconverged(self):
        return self.weights.mass < UNCONVERGED_MASS


def stratified_sample(ray, n=128, rng=None, jitter=True):
    """One sample per equal-width bin of [t_near, t_far].

    Without ``rng`` (or with ``jitter=False``) samples sit at bin midpoints.
    The last spacing is the bin width.
    """
    if n < 2:
        raise ValueError("need at least two samples per ray")
    h = (ray.t_far - ray.t_near) / n
    if rng is not None and jitter:
        u = rng.random(n) + 2.0**-54
    else:
        u = np.full(n, 0.5)
    t = ray.t_near + (np.arange(n) + u) * h
    delta = np.empty(n)
    delta[:-1] = np.diff(t)
    delta[-1] = h
    return RaySampling(t, delta)


def _check(sigma, delta):
    sigma = np.asarray(sigma, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if sigma.shape != delta.shape:
        raise ShapeMismatchError(f"sigma {sigma.shape} vs delta {delta.shape}")
    return sigma, delta


def compute_transmittance(sigma, delta):
    """T_i = exp(-sum_{j<i} sigma_j delta_j); T_1 = 1."""
    sigma, delta = _check(sigma, delta)
    acc = np.concatenate([[0.0], np.cumsum(sigma * delta)[:-1]])
    return np.exp(-acc)


def _transmittance_full(sigma, delta):
    acc = np.concatenate([[0.0], np.cumsum(sigma * delta)])
    return np.exp(-acc)


def compute_weights(sigma, delta, t=None):
    sigma, delta = _check(sigma, delta)
    T = compute_transmittance(sigma, delta)
    w = T * -np.expm1(-sigma * delta)
    if t is None:
        t = np.cumsum(delta) - delta
    return WeightDistribution(np.asarray(t, dtype=float), w)


def composite_color(weights, colors, residual_transmittance=0.0, background=(0.0, 0.0, 0.0)):
    w = weights.w if isinstance(weights, WeightDistribution) else np.asarray(weights, dtype=float)
    colors = np.asarray(colors, dtype=float)
    if colors.shape != (w.shape[0], 3):
        raise ShapeMismatchError(f"colors {colors.shape} do not match {w.shape[0]} weights")
    return w @ colors + residual_transmittance * np.asarray(background, dtype=float)


def composite_depth(weights):
    """Unnormalised expected depth sum_i w_i t_i."""
    return float(np.dot(weights.w, weights.t))


def render_samples(sigma, colors, sampling, background=(0.0, 0.0, 0.0)):
    """Forward pass over per-sample densities/colours; keeps a backward cache."""
    sigma, delta = _check(sigma, sampling.delta)
    colors = np.asarray(colors, dtype=float)
    T_full = _transmittance_full(sigma, delta)
    T = T_full[:-1]
    w = T * -np.expm1(-sigma * delta)
    dist = WeightDistribution(np.asarray(sampling.t, dtype=float), w)
    bg = np.asarray(background, dtype=float)
    color = composite_color(dist, colors, T_full[-1], bg)
    cache = {"sigma": sigma, "delta": delta, "t": dist.t, "colors": colors, "T_full": T_full, "w": w, "bg": bg}
    return RenderResult(color, composite_depth(dist), dist, T, float(T_full[-1]), cache)


def render_ray(fld, ray, sampling, frame=0, background=(0.0, 0.0, 0.0)):
    from .field import AnalyticField

    pts = ray.at(sampling.t)
    if isinstance(fld, AnalyticField):
        sigma, colors = fld.evaluate(pts)
    else:
        sigma, colors = fld.query_many(pts, frame)
    return render_samples(sigma, colors, sampling, background)


def render_backward(upstream, cache):
    """Gradients of a scalar loss w.r.t. per-sample sigma and colour.

    ``upstream`` is a dict with optional keys ``color`` (3,), ``depth`` (scalar),
    ``weights`` (N,) and ``residual`` (scalar).  Returns ``(d_sigma, d_colors)``.
    """
    if not cache:
        raise MissingCacheError("render_backward needs the forward cache")
    sigma, delta, t = cache["sigma"], cache["delta"], cache["t"]
    colors, T_full, w, bg = cache["colors"], cache["T_full"], cache["w"], cache["bg"]
    g_c = np.asarray(upstream.get("color", np.zeros(3)), dtype=float)
    g_d = float(upstream.get("depth", 0.0))
    g_w = np.asarray(upstream.get("weights", np.zeros_like(w)), dtype=float)
    g_res = float(upstream.get("residual", 0.0)) + float(g_c @ bg)

    G = colors @ g_c + g_d * t + g_w
    gw = G * w
    suffix = np.concatenate([np.cumsum(gw[::-1])[::-1][1:], [0.0]])
    d_sigma = delta * (G * T_full[1:] - suffix - g_res * T_full[-1])
    d_colors = w[:, None] * g_c[None, :]
    return d_sigma, d_colors
