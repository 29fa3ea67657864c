"""Scene representations: learnable trilinear grids and analytic oracle fields."""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import OutOfBoundsError, ShapeMismatchError

# x/y padded so cameras moved or rescaled relative to the reference still see
# their image borders inside the grid
NDC_BBOX = ((-1.1, -1.1, -1.0), (1.1, 1.1, 1.0))


@dataclass(frozen=True)
class FieldSample:
    sigma: float
    color: np.ndarray


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30, y, np.log(np.expm1(np.maximum(y, 1e-300))))


def logit(p):
    p = np.clip(np.asarray(p, dtype=float), 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


class GridField:
    """Density/colour voxel grid, optionally one grid per frame.

    ``params`` has shape (frame_count, RX, RY, RZ, 4): channel 0 is raw
    density, channels 1-3 are raw colour.  Density is softplus of the
    trilinearly interpolated raw value, colour is its logistic squash.
    """

    def __init__(self, params, bbox=NDC_BBOX):
        params = np.asarray(params)
        if params.ndim != 5 or params.shape[-1] != 4:
            raise ShapeMismatchError(f"params must be (F, RX, RY, RZ, 4), got {params.shape}")
        if min(params.shape[1:4]) < 2:
            raise ShapeMismatchError("grid resolution must be at least 2 per axis")
        self.params = params
        lo, hi = (np.asarray(b, dtype=float).reshape(3) for b in bbox)
        if np.any(hi <= lo):
            raise ShapeMismatchError("degenerate bbox")
        self.lo, self.hi = lo, hi

    @classmethod
    def create(cls, resolution=(64, 64, 64), bbox=NDC_BBOX, frame_count=1, sigma_init=0.0,
               color_init=0.0, noise=0.0, seed=0, dtype=np.float64):
        res = tuple(int(r) for r in np.broadcast_to(resolution, 3))
        params = np.empty((frame_count, *res, 4), dtype=dtype)
        params[..., 0] = sigma_init
        params[..., 1:] = color_init
        if noise:
            rng = np.random.default_rng(seed)
            params += (noise * rng.standard_normal(params.shape)).astype(dtype)
        return cls(params, bbox)

    @property
    def resolution(self):
        return tuple(self.params.shape[1:4])

    @property
    def frame_count(self):
        return self.params.shape[0]

    @property
    def bbox(self):
        return (tuple(self.lo), tuple(self.hi))

    @property
    def sigma_params(self):
        return self.params[..., 0]

    @property
    def color_params(self):
        return self.params[..., 1:]

    def copy(self):
        return GridField(self.params.copy(), self.bbox)

    def frame_index(self, frame):
        frame = int(frame)
        if frame < 0:
            raise OutOfBoundsError(f"negative frame index {frame}")
        if self.frame_count == 1:
            return 0
        if frame >= self.frame_count:
            raise OutOfBoundsError(f"frame {frame} >= frame_count {self.frame_count}")
        return frame

    def frame_indices(self, frames):
        frames = np.asarray(frames, dtype=np.int64)
        if np.any(frames < 0):
            raise OutOfBoundsError("negative frame index")
        if self.frame_count == 1:
            return np.zeros_like(frames)
        if np.any(frames >= self.frame_count):
            raise OutOfBoundsError(f"frame index >= frame_count {self.frame_count}")
        return frames

    def gather(self, frames, points, want_spatial=False, backend=None):
        """Raw interpolated parameters for a (B, N, 3) point batch."""
        k = kernels.get_backend(backend)
        frames = self.frame_indices(frames)
        return k.grid_gather(self.params, self.lo, self.hi, frames, np.asarray(points, dtype=float), want_spatial)

    def scatter(self, grad, frames, points, grad_raw, backend=None):
        k = kernels.get_backend(backend)
        frames = self.frame_indices(frames)
        k.grid_scatter(grad, self.lo, self.hi, frames, np.asarray(points, dtype=float), grad_raw)

    def query_many(self, points, frame=0):
        pts = np.asarray(points, dtype=float).reshape(1, -1, 3)
        raw, inside, _ = self.gather(np.array([frame]), pts)
        raw, inside = raw[0], inside[0]
        sigma = np.where(inside, softplus(raw[:, 0]), 0.0)
        color = np.where(inside[:, None], sigmoid(raw[:, 1:]), 0.0)
        return sigma, color


def query(fld, x, frame=0):
    """Density and colour at a single point."""
    if isinstance(fld, AnalyticField):
        s, c = fld.evaluate(np.asarray(x, dtype=float)[None])
        return FieldSample(float(s[0]), c[0])
    fld.frame_index(frame)
    sigma, color = fld.query_many(np.asarray(x, dtype=float)[None], frame)
    return FieldSample(float(sigma[0]), color[0])


def query_gradient(fld, x, frame, upstream, buffer=None):
    """Accumulate upstream * d(FieldSample)/d(params) into ``buffer``.

    ``upstream`` is ``(d_sigma, d_color[3])``.  Returns the buffer.
    """
    if buffer is None:
        buffer = np.zeros_like(fld.params, dtype=float)
    if buffer.shape != fld.params.shape:
        raise ShapeMismatchError("gradient buffer does not match field parameters")
    d_sigma, d_color = upstream
    pts = np.asarray(x, dtype=float).reshape(1, 1, 3)
    frames = np.array([fld.frame_index(frame)])
    raw, inside, _ = fld.gather(frames, pts)
    if not inside[0, 0]:
        return buffer
    r = raw[0, 0]
    c = sigmoid(r[1:])
    g = np.empty((1, 1, 4))
    g[0, 0, 0] = float(d_sigma) * sigmoid(r[0])
    g[0, 0, 1:] = np.asarray(d_color, dtype=float) * c * (1.0 - c)
    fld.scatter(buffer, frames, pts, g)
    return buffer


# --- analytic oracle fields --------------------------------------------------


@dataclass
class Texture:
    """Low-frequency colour modulation ``amp * sin(freq . x + phase)``."""

    amplitude: float = 0.0
    frequency: tuple = (0.0, 0.0, 0.0)
    phase: float = 0.0

    def apply(self, base, x):
        if not self.amplitude:
            return np.broadcast_to(base, x.shape).copy()
        s = np.sin(x @ np.asarray(self.frequency, dtype=float) + self.phase)
        shift = self.amplitude * s[:, None] * np.array([1.0, -0.5, 0.75])
        return np.clip(base + shift, 0.0, 1.0)


@dataclass
class Sphere:
    center: tuple
    radius: float
    sigma: float = 1e4
    color: tuple = (1.0, 1.0, 1.0)
    texture: Texture = field(default_factory=Texture)
    velocity: tuple = (0.0, 0.0, 0.0)

    def moved(self, frame):
        c = np.asarray(self.center, dtype=float) + frame * np.asarray(self.velocity, dtype=float)
        return Sphere(tuple(c), self.radius, self.sigma, self.color, self.texture)

    def sdf(self, x):
        return np.linalg.norm(x - np.asarray(self.center, dtype=float), axis=-1) - self.radius

    def intersect(self, o, d):
        """Entry distance along unit-direction rays (inf if missed); (M,) arrays."""
        oc = o - np.asarray(self.center, dtype=float)
        b = np.sum(oc * d, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 >= 0, t0, np.where(t1 >= 0, 0.0, np.inf))
        return np.where(hit, t, np.inf)


@dataclass
class Box:
    lo: tuple
    hi: tuple
    sigma: float = 1e4
    color: tuple = (1.0, 1.0, 1.0)
    texture: Texture = field(default_factory=Texture)
    velocity: tuple = (0.0, 0.0, 0.0)

    def moved(self, frame):
        v = frame * np.asarray(self.velocity, dtype=float)
        return Box(tuple(np.asarray(self.lo) + v), tuple(np.asarray(self.hi) + v), self.sigma, self.color, self.texture)

    def sdf(self, x):
        lo, hi = np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)
        c, h = (lo + hi) / 2, (hi - lo) / 2
        q = np.abs(x - c) - h
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(np.max(q, axis=-1), 0.0)

    def intersect(self, o, d):
        lo, hi = np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (lo - o) * inv
            tb = (hi - o) * inv
        tmin = np.nan_to_num(np.minimum(ta, tb), nan=-np.inf)
        tmax = np.nan_to_num(np.maximum(ta, tb), nan=np.inf)
        t_in = np.max(tmin, axis=-1)
        t_out = np.min(tmax, axis=-1)
        hit = (t_out >= np.maximum(t_in, 0.0))
        return np.where(hit, np.maximum(t_in, 0.0), np.inf)


@dataclass
class Slab:
    """Unbounded layer between two z values (e.g. a background wall)."""

    z_min: float
    z_max: float
    sigma: float = 1e4
    color: tuple = (1.0, 1.0, 1.0)
    texture: Texture = field(default_factory=Texture)
    velocity: tuple = (0.0, 0.0, 0.0)

    def moved(self, frame):
        dz = frame * float(self.velocity[2])
        return Slab(self.z_min + dz, self.z_max + dz, self.sigma, self.color, self.texture)

    def sdf(self, x):
        mid = (self.z_min + self.z_max) / 2
        return np.abs(x[..., 2] - mid) - (self.z_max - self.z_min) / 2

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (self.z_min - o[..., 2]) / d[..., 2]
            tb = (self.z_max - o[..., 2]) / d[..., 2]
        inside = (o[..., 2] >= self.z_min) & (o[..., 2] <= self.z_max)
        t_in = np.minimum(ta, tb)
        t_out = np.maximum(ta, tb)
        t = np.where(inside, 0.0, np.where((t_in >= 0) & np.isfinite(t_in), t_in, np.inf))
        return np.where(np.isnan(t_out) & ~inside, np.inf, t)


class AnalyticField:
    """Closed-form union of opaque primitives (test oracle)."""

    def __init__(self, primitives):
        self.primitives = list(primitives)
        for p in self.primitives:
            if p.sigma < 0:
                raise ValueError("primitive density must be nonnegative")

    def at_frame(self, frame):
        return AnalyticField([p.moved(frame) for p in self.primitives])

    def sdf(self, x):
        x = np.atleast_2d(x)
        return np.min(np.stack([p.sdf(x) for p in self.primitives]), axis=0)

    def nearest(self, x):
        x = np.atleast_2d(x)
        return np.argmin(np.stack([p.sdf(x) for p in self.primitives]), axis=0)

    def color_of(self, x, which):
        x = np.atleast_2d(x)
        out = np.zeros((x.shape[0], 3))
        for k, p in enumerate(self.primitives):
            m = which == k
            if np.any(m):
                out[m] = p.texture.apply(np.asarray(p.color, dtype=float), x[m])
        return out

    def evaluate(self, x):
        """(sigma, color) at points; colour is that of the containing primitive."""
        x = np.atleast_2d(x)
        sig = np.zeros(x.shape[0])
        which = np.full(x.shape[0], -1)
        for k, p in enumerate(self.primitives):
            inside = p.sdf(x) <= 0
            sig = np.where(inside, sig + p.sigma, sig)
            which = np.where(inside & (which < 0), k, which)
        color = self.color_of(x, which)
        return sig, color

    def trace(self, origins, dirs, t_near=0.0, t_far=np.inf):
        """First-hit distance, primitive index (-1 = miss) and surface colour."""
        o = np.atleast_2d(origins)
        d = np.atleast_2d(dirs)
        ts = np.stack([p.intersect(o, d) for p in self.primitives])
        ts = np.where(ts >= t_near, ts, np.inf)
        which = np.argmin(ts, axis=0)
        t = ts[which, np.arange(o.shape[0])]
        hit = np.isfinite(t) & (t <= t_far)
        which = np.where(hit, which, -1)
        t = np.where(hit, t, t_far)
        pts = o + np.where(hit, t, 0.0)[:, None] * d
        return t, which, self.color_of(pts, which)


def analytic_depth(fld, ray):
    """Distance to the first opaque surface along ``ray``, or ``ray.t_far``."""
    t, _, _ = fld.trace(ray.origin[None], ray.direction[None], ray.t_near, ray.t_far)
    return float(t[0])
