"""Jitted loop kernels.  Each mirrors a function in ``_numpy`` exactly."""

import math

import numpy as np

from .._accel import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_TWO = np.uint64(2)
_INV53 = 1.0 / 9007199254740992.0


@njit
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit
def uniform(key, counter):
    h = mix64(key + (counter + _ONE) * _GOLDEN)
    return (float(h >> _S11) + 0.5) * _INV53


@njit
def _softplus(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit
def _cell(x, lo, hi, res):
    g = (x - lo) / (hi - lo) * (res - 1)
    if g < 0.0 or g > res - 1:
        return -1, 0.0
    i = int(math.floor(g))
    if i > res - 2:
        i = res - 2
    return i, g - i


@njit
def grid_gather(params, lo, hi, frames, points, want_spatial):
    F, RX, RY, RZ, C = params.shape
    B, N, _ = points.shape
    raw = np.zeros((B, N, C))
    inside = np.zeros((B, N), dtype=np.bool_)
    if want_spatial:
        spatial = np.zeros((B, N, C, 3))
    else:
        spatial = np.zeros((1, 1, C, 3))
    sx = (RX - 1) / (hi[0] - lo[0])
    sy = (RY - 1) / (hi[1] - lo[1])
    sz = (RZ - 1) / (hi[2] - lo[2])
    for b in range(B):
        fr = frames[b] if F > 1 else 0
        for n in range(N):
            i, fx = _cell(points[b, n, 0], lo[0], hi[0], RX)
            if i < 0:
                continue
            j, fy = _cell(points[b, n, 1], lo[1], hi[1], RY)
            if j < 0:
                continue
            k, fz = _cell(points[b, n, 2], lo[2], hi[2], RZ)
            if k < 0:
                continue
            inside[b, n] = True
            for dx in range(2):
                wx = fx if dx else 1.0 - fx
                gx = 1.0 if dx else -1.0
                for dy in range(2):
                    wy = fy if dy else 1.0 - fy
                    gy = 1.0 if dy else -1.0
                    for dz in range(2):
                        wz = fz if dz else 1.0 - fz
                        gz = 1.0 if dz else -1.0
                        w = wx * wy * wz
                        for c in range(C):
                            v = params[fr, i + dx, j + dy, k + dz, c]
                            raw[b, n, c] += w * v
                            if want_spatial:
                                spatial[b, n, c, 0] += gx * wy * wz * v * sx
                                spatial[b, n, c, 1] += wx * gy * wz * v * sy
                                spatial[b, n, c, 2] += wx * wy * gz * v * sz
    return raw, inside, spatial


@njit
def grid_scatter(grad, lo, hi, frames, points, grad_raw):
    F, RX, RY, RZ, C = grad.shape
    B, N, _ = points.shape
    for b in range(B):
        fr = frames[b] if F > 1 else 0
        for n in range(N):
            i, fx = _cell(points[b, n, 0], lo[0], hi[0], RX)
            if i < 0:
                continue
            j, fy = _cell(points[b, n, 1], lo[1], hi[1], RY)
            if j < 0:
                continue
            k, fz = _cell(points[b, n, 2], lo[2], hi[2], RZ)
            if k < 0:
                continue
            for dx in range(2):
                wx = fx if dx else 1.0 - fx
                for dy in range(2):
                    wy = fy if dy else 1.0 - fy
                    for dz in range(2):
                        wz = fz if dz else 1.0 - fz
                        w = wx * wy * wz
                        for c in range(C):
                            grad[fr, i + dx, j + dy, k + dz, c] += w * grad_raw[b, n, c]


@njit
def render_forward(raw, inside, t, delta, bg):
    B, N, _ = raw.shape
    sigma = np.zeros((B, N))
    color = np.zeros((B, N, 3))
    trans = np.zeros((B, N + 1))
    weights = np.zeros((B, N))
    rgb = np.zeros((B, 3))
    depth = np.zeros(B)
    for b in range(B):
        acc = 0.0
        for n in range(N):
            trans[b, n] = math.exp(-acc)
            if inside[b, n]:
                s = _softplus(raw[b, n, 0])
                sigma[b, n] = s
                for c in range(3):
                    color[b, n, c] = _sigmoid(raw[b, n, 1 + c])
            acc += sigma[b, n] * delta[b, n]
        trans[b, N] = math.exp(-acc)
        for n in range(N):
            w = trans[b, n] * -math.expm1(-sigma[b, n] * delta[b, n])
            weights[b, n] = w
            depth[b] += w * t[b, n]
            for c in range(3):
                rgb[b, c] += w * color[b, n, c]
        for c in range(3):
            rgb[b, c] += trans[b, N] * bg[c]
    return sigma, color, trans, weights, rgb, depth


@njit
def render_backward(raw, inside, t, delta, bg, color, trans, weights, g_rgb, g_depth, g_w, g_sigma):
    B, N, C = raw.shape
    grad_raw = np.zeros((B, N, C))
    for b in range(B):
        g_res = g_rgb[b, 0] * bg[0] + g_rgb[b, 1] * bg[1] + g_rgb[b, 2] * bg[2]
        tail = g_res * trans[b, N]
        suffix = 0.0
        for n in range(N - 1, -1, -1):
            G = g_depth[b] * t[b, n] + g_w[b, n]
            for c in range(3):
                G += g_rgb[b, c] * color[b, n, c]
            d_sigma = delta[b, n] * (G * trans[b, n + 1] - suffix - tail) + g_sigma[b, n]
            suffix += G * weights[b, n]
            if inside[b, n]:
                grad_raw[b, n, 0] = d_sigma * _sigmoid(raw[b, n, 0])
                for c in range(3):
                    cc = color[b, n, c]
                    grad_raw[b, n, 1 + c] = weights[b, n] * g_rgb[b, c] * cc * (1.0 - cc)
    return grad_raw


@njit
def triangle_offset(u):
    if u <= 0.5:
        return -1.0 + math.sqrt(2.0 * u)
    return 1.0 - math.sqrt(2.0 * (1.0 - u))


@njit
def ddr_weight_loss(w, t, half_width, depth_gt, ray_ids, key_gumbel, key_tri, n_samples, eps, eta):
    B, N = w.shape
    loss = np.zeros(B)
    grad = np.zeros((B, N))
    skipped = np.zeros(B, dtype=np.bool_)
    logp = np.empty(N)
    wf = np.empty(N)
    logits = np.empty(N)
    that = np.empty(N)
    acc = np.empty(N)
    nn = np.uint64(N)
    ns = np.uint64(n_samples)
    for b in range(B):
        total = 0.0
        S = 0.0
        for i in range(N):
            total += w[b, i]
            wf[i] = w[b, i] if w[b, i] > eta else eta
            S += wf[i]
        if not total >= N * eta:
            skipped[b] = True
            continue
        for i in range(N):
            logp[i] = math.log(wf[i] / S)
            acc[i] = 0.0
        rid = np.uint64(ray_ids[b])
        delta = half_width[b]
        d_gt = depth_gt[b]
        L = 0.0
        for k in range(n_samples):
            base = (rid * ns + np.uint64(k)) * nn
            mx = -np.inf
            for i in range(N):
                ctr = base + np.uint64(i)
                ug = uniform(key_gumbel, ctr)
                g = -math.log(-math.log(ug))
                ut = uniform(key_tri, ctr)
                that[i] = t[b, i] + delta * triangle_offset(ut)
                z = (g + logp[i]) / eps
                logits[i] = z
                if z > mx:
                    mx = z
            Z = 0.0
            for i in range(N):
                e = math.exp(logits[i] - mx)
                logits[i] = e
                Z += e
            Th = 0.0
            for i in range(N):
                logits[i] /= Z
                Th += logits[i] * that[i]
            r = Th - d_gt
            L += abs(r)
            if r > 0:
                sgn = 1.0
            elif r < 0:
                sgn = -1.0
            else:
                sgn = 0.0
            if sgn != 0.0:
                for i in range(N):
                    acc[i] += sgn * logits[i] * (that[i] - Th)
        loss[b] = L / n_samples
        scale = 1.0 / (n_samples * eps)
        sumA = 0.0
        for i in range(N):
            acc[i] *= scale
            sumA += acc[i]
        for i in range(N):
            if w[b, i] > eta:
                grad[b, i] = acc[i] / wf[i] - sumA / S
    return loss, grad, skipped


@njit
def stratified_t(t_near, t_far, n, ray_ids, key, jitter):
    B = ray_ids.shape[0]
    t = np.empty((B, n))
    delta = np.empty((B, n))
    for b in range(B):
        h = (t_far[b] - t_near[b]) / n
        rid = np.uint64(ray_ids[b])
        for i in range(n):
            if jitter:
                u = uniform(key, rid * np.uint64(n) + np.uint64(i))
            else:
                u = 0.5
            t[b, i] = t_near[b] + (i + u) * h
        for i in range(n - 1):
            delta[b, i] = t[b, i + 1] - t[b, i]
        delta[b, n - 1] = h
    return t, delta


@njit
def adam_update(p, g, m, v, lr, b1, b2, eps, step):
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    pf = p.reshape(-1)
    gf = g.reshape(-1)
    mf = m.reshape(-1)
    vf = v.reshape(-1)
    for i in range(pf.shape[0]):
        gi = float(gf[i])
        mi = b1 * float(mf[i]) + (1.0 - b1) * gi
        vi = b2 * float(vf[i]) + (1.0 - b2) * gi * gi
        mf[i] = mi
        vf[i] = vi
        pf[i] = float(pf[i]) - lr * (float(mf[i]) / bc1) / (math.sqrt(float(vf[i]) / bc2) + eps)
