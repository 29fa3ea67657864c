"""Vectorised numpy kernels; same signatures and results as ``_numba``."""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0


def mix64(z):
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def uniform(key, counter):
    counter = np.asarray(counter, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = mix64(np.uint64(key) + (counter + np.uint64(1)) * _GOLDEN)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _cells(points, lo, hi, res):
    res = np.asarray(res)
    g = (points - lo) / (hi - lo) * (res - 1)
    inside = np.all((g >= 0.0) & (g <= res - 1), axis=-1)
    idx = np.minimum(np.floor(g), res - 2)
    idx = np.where(inside[..., None], idx, 0).astype(np.int64)
    frac = np.where(inside[..., None], g - idx, 0.0)
    return idx, frac, inside


def _corners():
    return np.array([[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])


def grid_gather(params, lo, hi, frames, points, want_spatial):
    F, RX, RY, RZ, C = params.shape
    res = np.array([RX, RY, RZ])
    idx, frac, inside = _cells(points, lo, hi, res)
    fr = frames if F > 1 else np.zeros_like(frames)
    B, N = points.shape[:2]
    raw = np.zeros((B, N, C))
    spatial = np.zeros((B, N, C, 3) if want_spatial else (1, 1, C, 3))
    scale = (res - 1) / (hi - lo)
    for corner in _corners():
        wts = np.where(corner == 1, frac, 1.0 - frac)
        w = wts[..., 0] * wts[..., 1] * wts[..., 2]
        ii = idx + corner
        v = params[fr[:, None], ii[..., 0], ii[..., 1], ii[..., 2]]
        v = np.where(inside[..., None], v, 0.0)
        raw += w[..., None] * v
        if want_spatial:
            sign = np.where(corner == 1, 1.0, -1.0)
            for a in range(3):
                dw = sign[a] * np.prod(np.delete(wts, a, axis=-1), axis=-1) * scale[a]
                spatial[..., a] += dw[..., None] * v
    return raw, inside, spatial


def grid_scatter(grad, lo, hi, frames, points, grad_raw):
    F, RX, RY, RZ, C = grad.shape
    res = np.array([RX, RY, RZ])
    idx, frac, inside = _cells(points, lo, hi, res)
    fr = frames if F > 1 else np.zeros_like(frames)
    fr = np.broadcast_to(fr[:, None], inside.shape)
    for corner in _corners():
        wts = np.where(corner == 1, frac, 1.0 - frac)
        w = wts[..., 0] * wts[..., 1] * wts[..., 2]
        ii = idx + corner
        contrib = w[..., None] * grad_raw
        m = inside
        np.add.at(grad, (fr[m], ii[..., 0][m], ii[..., 1][m], ii[..., 2][m]), contrib[m])


def render_forward(raw, inside, t, delta, bg):
    sigma = np.where(inside, _softplus(raw[..., 0]), 0.0)
    color = np.where(inside[..., None], _sigmoid(raw[..., 1:4]), 0.0)
    sd = sigma * delta
    csum = np.cumsum(sd, axis=1)
    excl = np.concatenate([np.zeros((sd.shape[0], 1)), csum], axis=1)
    trans = np.exp(-excl)
    weights = trans[:, :-1] * -np.expm1(-sd)
    rgb = np.einsum("bn,bnc->bc", weights, color) + trans[:, -1:] * bg
    depth = np.sum(weights * t, axis=1)
    return sigma, color, trans, weights, rgb, depth


def render_backward(raw, inside, t, delta, bg, color, trans, weights, g_rgb, g_depth, g_w, g_sigma):
    G = g_depth[:, None] * t + g_w + np.einsum("bc,bnc->bn", g_rgb, color)
    gw = G * weights
    # suffix[k] = sum_{i>k} G_i w_i
    suffix = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1] - gw
    tail = (g_rgb @ bg) * trans[:, -1]
    d_sigma = delta * (G * trans[:, 1:] - suffix - tail[:, None]) + g_sigma
    grad_raw = np.zeros(raw.shape)
    grad_raw[..., 0] = d_sigma * _sigmoid(raw[..., 0])
    grad_raw[..., 1:4] = weights[..., None] * g_rgb[:, None, :] * color * (1.0 - color)
    return np.where(inside[..., None], grad_raw, 0.0)


def triangle_offset(u):
    u = np.asarray(u, dtype=float)
    return np.where(u <= 0.5, -1.0 + np.sqrt(2.0 * u), 1.0 - np.sqrt(2.0 * (1.0 - u)))


def ddr_noise(ray_ids, n_samples, n, key_gumbel, key_tri):
    """Uniform draws used by ``ddr_weight_loss`` for each (ray, k, i)."""
    rid = np.asarray(ray_ids, dtype=np.uint64)
    k = np.arange(n_samples, dtype=np.uint64)
    i = np.arange(n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        ctr = (rid[:, None, None] * np.uint64(n_samples) + k[None, :, None]) * np.uint64(n) + i[None, None, :]
    return uniform(key_gumbel, ctr), uniform(key_tri, ctr)


def ddr_weight_loss(w, t, half_width, depth_gt, ray_ids, key_gumbel, key_tri, n_samples, eps, eta):
    B, N = w.shape
    ug, ut = ddr_noise(ray_ids, n_samples, N, key_gumbel, key_tri)
    total = w.sum(axis=1)
    skipped = ~(total >= N * eta)
    wf = np.where(w > eta, w, eta)
    S = wf.sum(axis=1, keepdims=True)
    logp = np.log(wf / S)
    g = -np.log(-np.log(ug))
    that = t[:, None, :] + half_width[:, None, None] * triangle_offset(ut)
    z = (g + logp[:, None, :]) / eps
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z)
    what = e / e.sum(axis=2, keepdims=True)
    Th = np.sum(what * that, axis=2)
    r = Th - depth_gt[:, None]
    loss = np.abs(r).mean(axis=1)
    sgn = np.sign(r)
    A = np.sum(sgn[..., None] * what * (that - Th[..., None]), axis=1) / (n_samples * eps)
    grad = np.where(w > eta, A / wf - A.sum(axis=1, keepdims=True) / S, 0.0)
    loss = np.where(skipped, 0.0, loss)
    grad = np.where(skipped[:, None], 0.0, grad)
    return loss, grad, skipped


def stratified_t(t_near, t_far, n, ray_ids, key, jitter):
    h = (t_far - t_near) / n
    i = np.arange(n)
    if jitter:
        rid = np.asarray(ray_ids, dtype=np.uint64)
        with np.errstate(over="ignore"):
            ctr = rid[:, None] * np.uint64(n) + i.astype(np.uint64)[None, :]
        u = uniform(key, ctr)
    else:
        u = np.full((len(ray_ids), n), 0.5)
    t = t_near[:, None] + (i[None, :] + u) * h[:, None]
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = h
    return t, delta


def adam_update(p, g, m, v, lr, b1, b2, eps, step):
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    g64 = g.astype(np.float64)
    m[...] = b1 * m.astype(np.float64) + (1.0 - b1) * g64
    v[...] = b2 * v.astype(np.float64) + (1.0 - b2) * g64 * g64
    p[...] = p.astype(np.float64) - lr * (m.astype(np.float64) / bc1) / (np.sqrt(v.astype(np.float64) / bc2) + eps)
