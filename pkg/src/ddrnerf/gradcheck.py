"""Finite-difference validation and the per-ray reference backward pass."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import ddr, geometry, losses, pipeline, render
from .errors import DomainError, MissingCacheError, ShapeMismatchError
from .field import GridField, query_gradient, sigmoid, softplus
from .kernels import numpy_impl

SMOOTH_TOL = 1e-6
STOCHASTIC_TOL = 1e-3


@dataclass
class FDReport:
    op: str
    max_rel_error: float
    argmax: int
    h: float
    tol: float = SMOOTH_TOL
    n_checked: int = 0
    kinks: list = field(default_factory=list)

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    @property
    def kink(self):
        return bool(self.kinks)


def rel_error(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def fd_check(fn, x, h=1e-5, analytic=None, op="op", tol=SMOOTH_TOL, indices=None):
    """Compare an analytic gradient against central differences.

    ``fn(x)`` returns a scalar, or ``(scalar, grad)`` when ``analytic`` is not
    given.  Coordinates where the one-sided slopes disagree are reported as
    kinks and excluded from the error.
    """
    if not h > 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=float)
    shape = x.shape
    x = x.ravel()

    def f(v):
        out = fn(v.reshape(shape))
        val = out[0] if isinstance(out, tuple) else out
        val = float(val)
        if not np.isfinite(val):
            raise DomainError(f"{op}: non-finite evaluation")
        return val

    f0 = f(x)
    if analytic is None:
        out = fn(x.reshape(shape))
        analytic = out[1]
    analytic = np.asarray(analytic, dtype=float).ravel()
    if analytic.shape != x.shape:
        raise ShapeMismatchError(f"{op}: gradient shape {analytic.shape} != {x.shape}")
    idx = range(x.size) if indices is None else indices
    worst, where, kinks, n = 0.0, -1, [], 0
    for i in idx:
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = f(xp), f(xm)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if abs(fwd - bwd) > max(0.1 * max(abs(fwd), abs(bwd)), 1e3 * h):
            kinks.append(int(i))
            continue
        fd = (fp - fm) / (2 * h)
        # differences below the roundoff of the difference quotient are unresolvable
        noise = 4.0 * np.finfo(float).eps * (abs(fp) + abs(fm) + abs(f0)) / h
        err = 0.0 if abs(analytic[i] - fd) <= noise else float(rel_error(analytic[i], fd))
        n += 1
        if err > worst:
            worst, where = err, int(i)
    return FDReport(op, worst, where, h, tol, n, kinks)


# --- per-ray reference pass ----------------------------------------------------


@dataclass
class RayCache:
    frame: int
    pixel: np.ndarray
    origin: np.ndarray
    direction: np.ndarray
    o_ndc: np.ndarray
    d_ndc: np.ndarray
    points: np.ndarray
    raw: np.ndarray
    inside: np.ndarray
    spatial: np.ndarray
    result: render.RenderResult
    sampling: render.RaySampling


def forward_ray(fld, rig, ndc_cam, frame, pixel, sampling, cfg):
    """Single-ray forward pass that keeps everything ``backward_ray`` needs."""
    o, d = rig.rays(frame, np.asarray(pixel, dtype=float)[None])
    o_n, d_n = geometry.ndc_rays(o, d, ndc_cam, cfg.near)
    pts = o_n[0] + sampling.t[:, None] * d_n[0]
    f = np.array([fld.frame_index(frame)])
    raw, inside, spatial = numpy_impl.grid_gather(fld.params, fld.lo, fld.hi, f, pts[None], True)
    raw, inside, spatial = raw[0], inside[0], spatial[0]
    sigma = np.where(inside, softplus(raw[:, 0]), 0.0)
    colors = np.where(inside[:, None], sigmoid(raw[:, 1:]), 0.0)
    res = render.render_samples(sigma, colors, sampling, cfg.background)
    return RayCache(frame, np.asarray(pixel, dtype=float), o[0], d[0], o_n[0], d_n[0], pts, raw, inside, spatial,
                    res, sampling)


def backward_ray(fld, rig, ndc_cam, cache, upstream, cfg, buffer=None):
    """Accumulate this ray's parameter gradients into a GradientBuffer.

    ``upstream`` holds dL/d(color), dL/d(depth), dL/d(weights) and
    dL/d(sigma) for the ray.
    """
    if cache is None or cache.result.cache is None:
        raise MissingCacheError("backward_ray needs a complete forward cache")
    if buffer is None:
        buffer = pipeline.GradientBuffer.zeros_like(fld, rig)
    n = cache.points.shape[0]
    g_sigma_extra = np.asarray(upstream.get("sigma", np.zeros(n)), dtype=float)
    if g_sigma_extra.shape != (n,):
        raise ShapeMismatchError("upstream sigma gradient has the wrong length")
    d_sigma, d_colors = render.render_backward(upstream, cache.result.cache)
    d_sigma = d_sigma + g_sigma_extra

    colors = cache.result.cache["colors"]
    g_raw = np.zeros((n, 4))
    g_raw[:, 0] = d_sigma * sigmoid(cache.raw[:, 0])
    g_raw[:, 1:] = d_colors * colors * (1.0 - colors)
    g_raw[~cache.inside] = 0.0

    for i in range(n):
        if cache.inside[i]:
            query_gradient(fld, cache.points[i], cache.frame, (d_sigma[i], d_colors[i]), buffer.field)

    if rig is not None:
        g_x = np.einsum("nc,ncd->nd", g_raw, cache.spatial)
        g_o_n = g_x.sum(axis=0)
        g_d_n = cache.sampling.t @ g_x
        g_o, g_d = geometry.ndc_rays_backward(cache.origin[None], cache.direction[None], ndc_cam, cfg.near,
                                              g_o_n[None], g_d_n[None])
        gxi, gdf = rig.rays_backward(cache.frame, cache.pixel[None], g_o, g_d)
        buffer.xi[cache.frame] += gxi
        buffer.delta_f[cache.frame] += gdf
    return buffer


# --- registry --------------------------------------------------------------------


@dataclass
class GradCase:
    name: str
    make: object
    tol: float = SMOOTH_TOL
    h: float = 1e-5
    stochastic: bool = False


REGISTRY = []


def register(name, tol=SMOOTH_TOL, h=1e-5, stochastic=False):
    def deco(make):
        REGISTRY.append(GradCase(name, make, tol, h, stochastic))
        return make

    return deco


def _rand_pose(rng):
    R = geometry.so3_exp(rng.normal(size=3) * 0.3)
    return geometry.Pose(R, rng.normal(size=3) * 0.05)


@register("geometry.effective_focal")
def _case_focal(rng):
    f0 = rng.uniform(50, 500)

    def fn(x):
        return geometry.effective_focal(geometry.PinholeCamera(64, 48, f0, float(x[0]))), np.array([1.0])

    return fn, np.array([rng.uniform(-10, 10)])


@register("geometry.compose_pose")
def _case_compose(rng):
    p = _rand_pose(rng)
    A = rng.normal(size=(3, 3))
    b = rng.normal(size=3)

    def fn(xi):
        q = geometry.compose_pose(p, geometry.PoseResidual(xi))
        val = np.sum(A * q.rotation) + b @ q.translation
        J = geometry.so3_exp_jacobian(xi[:3])
        g = np.zeros(6)
        for i in range(3):
            g[i] = np.sum(A * (p.rotation @ J[i]))
        g[3:] = p.rotation.T @ b
        return val, g

    return fn, rng.normal(size=6) * 0.5


@register("geometry.pixel_ray")
def _case_pixel_ray(rng):
    W, H = 40, 30
    f0 = rng.uniform(30, 60)
    p = _rand_pose(rng)
    px = rng.uniform([0, 0], [W, H], size=(5, 2))
    A = rng.normal(size=(5, 3))
    Bm = rng.normal(size=(5, 3))

    def fn(x):
        cam = geometry.PinholeCamera(W, H, f0, float(x[6]))
        pose = geometry.compose_pose(p, geometry.PoseResidual(x[:6]))
        o, d = geometry.pixel_rays(cam, pose, px)
        gxi, gdf = geometry.pixel_rays_backward(cam, p, x[:6], px, A, Bm)
        return np.sum(A * o) + np.sum(Bm * d), np.concatenate([gxi, [gdf]])

    return fn, np.concatenate([rng.normal(size=6) * 0.2, [rng.uniform(-2, 2)]])


@register("geometry.to_ndc")
def _case_ndc(rng):
    cam = geometry.PinholeCamera(40, 30, 35.0)
    a = rng.normal(size=3)
    b = rng.normal(size=3)
    near = 1.0

    def fn(x):
        o, d = x[:3][None], x[3:][None]
        on, dn = geometry.ndc_rays(o, d, cam, near)
        go, gd = geometry.ndc_rays_backward(o, d, cam, near, a[None], b[None])
        return a @ on[0] + b @ dn[0], np.concatenate([go[0], gd[0]])

    o = rng.uniform(-0.1, 0.1, size=3)
    d = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.3, 0.3), -1.0])
    return fn, np.concatenate([o, d / np.linalg.norm(d)])


def _small_grid(rng, frames=2, res=4):
    params = rng.normal(size=(frames, res, res, res, 4))
    return GridField(params)


@register("field.query")
def _case_query(rng):
    fld = _small_grid(rng)
    x = rng.uniform(-0.95, 0.95, size=3)
    frame = int(rng.integers(0, 2))
    a = rng.normal()
    b = rng.normal(size=3)
    from .field import query

    def fn(p):
        g = GridField(p, fld.bbox)
        s = query(g, x, frame)
        return a * s.sigma + b @ s.color, query_gradient(g, x, frame, (a, b))

    return fn, fld.params.copy()


@register("field.query_position")
def _case_query_pos(rng):
    fld = _small_grid(rng)
    a = rng.normal()
    b = rng.normal(size=3)

    def fn(x):
        raw, inside, sp = numpy_impl.grid_gather(fld.params, fld.lo, fld.hi, np.array([1]), x[None, None], True)
        r, J = raw[0, 0], sp[0, 0]
        c = sigmoid(r[1:])
        val = a * softplus(r[0]) + b @ c
        g = a * sigmoid(r[0]) * J[0] + (b * c * (1 - c)) @ J[1:]
        return val, g

    return fn, rng.uniform(-0.95, 0.95, size=3)


def _random_sigma(rng, n):
    return rng.uniform(0.0, 3.0, size=n), rng.uniform(0.05, 0.3, size=n)


@register("render.compute_transmittance")
def _case_trans(rng):
    n = 12
    _, delta = _random_sigma(rng, n)
    r = rng.normal(size=n)

    def fn(s):
        T = render.compute_transmittance(s, delta)
        rt = r * T
        suffix = np.concatenate([np.cumsum(rt[::-1])[::-1][1:], [0.0]])
        return r @ T, -delta * suffix

    return fn, _random_sigma(rng, n)[0]


def _render_case(rng, which):
    n = 10
    sigma, delta = _random_sigma(rng, n)
    t = np.cumsum(delta)
    colors = rng.uniform(0, 1, size=(n, 3))
    samp = render.RaySampling(t, delta)
    r3 = rng.normal(size=3)
    rn = rng.normal(size=n)
    a = rng.normal()
    bg = rng.uniform(0, 1, size=3)

    def fn(s):
        res = render.render_samples(s, colors, samp, bg)
        up = {}
        if which == "weights":
            val = rn @ res.weights.w
            up["weights"] = rn
        elif which == "color":
            val = r3 @ res.color
            up["color"] = r3
        elif which == "depth":
            val = render.composite_depth(res.weights)
            up["depth"] = 1.0
        else:
            val = r3 @ res.color + a * res.depth + rn @ res.weights.w
            up = {"color": r3, "depth": a, "weights": rn}
        ds, _ = render.render_backward(up, res.cache)
        return val, ds

    return fn, sigma


@register("render.compute_weights")
def _case_weights(rng):
    return _render_case(rng, "weights")


@register("render.composite_color")
def _case_color(rng):
    return _render_case(rng, "color")


@register("render.composite_depth")
def _case_depth(rng):
    return _render_case(rng, "depth")


@register("render.render_backward")
def _case_render_all(rng):
    return _render_case(rng, "all")


@register("render.composite_color_wrt_colors")
def _case_color_c(rng):
    n = 8
    sigma, delta = _random_sigma(rng, n)
    samp = render.RaySampling(np.cumsum(delta), delta)
    r3 = rng.normal(size=3)

    def fn(c):
        c = c.reshape(n, 3)
        res = render.render_samples(sigma, c, samp)
        _, dc = render.render_backward({"color": r3}, res.cache)
        return r3 @ res.color, dc

    return fn, rng.uniform(0, 1, size=(n, 3))


@register("ddr.gumbel_softmax")
def _case_gs(rng):
    n = 8
    g = ddr.gumbel_noise(rng.uniform(0.01, 0.99, size=n))
    r = rng.normal(size=n)
    eps = rng.choice([0.5, 1.0, 2.0])

    def fn(w):
        wh = ddr.gumbel_softmax(w, g, eps)
        return r @ wh, wh * (r - r @ wh) / (eps * w)

    return fn, rng.uniform(0.05, 1.0, size=n)


@register("ddr.composite_sample")
def _case_cs(rng):
    n = 6
    t_hat = rng.uniform(0, 1, size=n)

    def fn(wh):
        return ddr.composite_sample(wh, t_hat), t_hat

    w = rng.uniform(0.1, 1, size=n)
    return fn, w / w.sum()


@register("ddr.weight_loss", tol=STOCHASTIC_TOL, h=1e-6, stochastic=True)
def _case_weight_loss(rng):
    n = 8
    t = (np.arange(n) + 0.5) / n
    noise = ddr.draw_noise(rng, 30, n)
    cfg = ddr.GumbelConfig(epsilon=float(rng.choice([0.5, 2.0])))
    depth = rng.uniform(0.2, 0.8)

    def fn(w):
        res = ddr.weight_loss(render.WeightDistribution(t, w), depth, cfg, noise=noise)
        return res.loss, res.grad

    return fn, rng.uniform(0.02, 0.3, size=n)


@register("ddr.density_loss")
def _case_density(rng):
    n = 16
    t = (np.arange(n) + 0.5) / n
    samp = render.RaySampling(t, np.full(n, 1.0 / n))
    depth = rng.uniform(0.3, 0.9)

    def fn(s):
        res = ddr.density_loss(samp, s, depth)
        return res.loss, res.grad

    return fn, rng.uniform(0.1, 2.0, size=n)


@register("losses.rgb_loss")
def _case_rgb(rng):
    target = rng.uniform(0, 1, size=(6, 3))

    def fn(p):
        return losses.rgb_loss(p.reshape(6, 3), target)

    return fn, rng.uniform(0, 1, size=(6, 3))


@register("losses.depth_loss")
def _case_dl(rng):
    gt = rng.uniform(0, 1, size=7)
    return (lambda p: losses.depth_loss(p, gt)), rng.uniform(0, 1, size=7)


@register("losses.grad_loss", tol=STOCHASTIC_TOL)
def _case_gl(rng):
    gt = rng.uniform(0, 1, size=9)
    return (lambda p: losses.grad_loss(p, gt)), rng.uniform(0, 1, size=9)


def toy_pipeline_problem(rng, res=4, n_rays=8, n_samples=12, frames=2):
    """Tiny random scene + camera rig used by the pipeline gradient checks."""
    W, H = 16, 12
    params = rng.normal(size=(1, res, res, res, 4))
    params[..., 0] += 1.0
    fld = GridField(params)
    f0 = 14.0
    rots = [geometry.so3_exp(rng.normal(size=3) * 0.01) for _ in range(frames)]
    trans = [rng.normal(size=3) * 0.01 for _ in range(frames)]
    rig = geometry.CameraRig(W, H, [f0] * frames, [(W / 2, H / 2)] * frames, rots, trans,
                             xi=rng.normal(size=(frames, 6)) * 0.01, delta_f=rng.normal(size=frames) * 0.2)
    ndc_cam = geometry.PinholeCamera(W, H, f0)
    cols = rng.integers(0, W - n_rays // 2, size=2)
    row = rng.integers(0, H, size=2)
    px = np.concatenate([
        np.stack([cols[k] + np.arange(n_rays // 2) + 0.5, np.full(n_rays // 2, row[k] + 0.5)], axis=1)
        for k in range(2)
    ])
    frames_arr = np.repeat(np.arange(2) % frames, n_rays // 2)
    batch = pipeline.Batch(frames_arr, px, rng.uniform(0, 1, size=(n_rays, 3)),
                           rng.uniform(2.0, 6.0, size=n_rays), np.arange(n_rays))
    cfg = pipeline.RenderConfig(n_samples=n_samples, jitter=True, run_length=n_rays // 2,
                                gumbel=ddr.GumbelConfig(n_samples=8))
    return fld, rig, ndc_cam, batch, cfg


@register("pipeline.full", tol=STOCHASTIC_TOL, stochastic=True)
def _case_pipeline(rng):
    fld, rig, ndc_cam, batch, cfg = toy_pipeline_problem(rng)
    base = pipeline.forward(fld, rig, ndc_cam, batch, cfg)
    gt_t = base.gt_t
    nf = fld.params.size
    nr = len(rig)

    def unpack(x):
        f = GridField(x[:nf].reshape(fld.params.shape), fld.bbox)
        r = rig.with_residuals(x[nf:nf + 6 * nr], x[nf + 6 * nr:])
        return f, r

    def fn(x):
        f, r = unpack(x)
        out = pipeline.step(f, r, ndc_cam, batch, cfg, gt_t=gt_t, backend="numpy")
        return out.losses.total, out.grads.flat()

    x0 = np.concatenate([fld.params.ravel(), rig.xi.ravel(), rig.delta_f])
    return fn, x0


def run_registry(points=20, seed=0, names=None):
    """Run every registered case at ``points`` random points; one report per op."""
    reports = []
    for case in REGISTRY:
        if names and case.name not in names:
            continue
        rng = np.random.default_rng([seed, len(reports)])
        worst = None
        start = time.perf_counter()
        total_n, kinks = 0, []
        for _ in range(points):
            fn, x = case.make(rng)
            rep = fd_check(fn, x, case.h, op=case.name, tol=case.tol)
            total_n += rep.n_checked
            kinks.extend(rep.kinks)
            if worst is None or rep.max_rel_error > worst.max_rel_error:
                worst = rep
        worst.n_checked = total_n
        worst.kinks = kinks
        worst.elapsed = time.perf_counter() - start
        reports.append(worst)
    return reports


def format_reports(reports):
    lines = [f"{'op':38s} {'max_rel_err':>12s} {'tol':>8s} {'h':>8s} {'n':>6s} {'kinks':>5s}  status"]
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.op:38s} {r.max_rel_error:12.3e} {r.tol:8.0e} {r.h:8.0e} {r.n_checked:6d} "
                     f"{len(r.kinks):5d}  {status}")
    return "\n".join(lines)
