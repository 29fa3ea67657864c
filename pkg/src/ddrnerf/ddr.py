"""Distribution-based depth regularisation.

The discrete rendering weights of a ray are continued into a mixture of
triangles centred on the samples.  A differentiable draw from that mixture
is built from a Gumbel-Softmax selection over the triangles and one
inverse-CDF draw per triangle.  The weight loss is the Monte-Carlo mean of
``|depth_gt - draw|``: an expectation of the error, which penalises spread
and multimodality that an error-of-expectation depth loss cannot see.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeMismatchError

DEFAULT_EPSILON = 2.0
DEFAULT_N_SAMPLES = 30
DEFAULT_WEIGHT_FLOOR = 1e-8
DEFAULT_DENSITY_MARGIN = 2


@dataclass(frozen=True)
class GumbelConfig:
    epsilon: float = DEFAULT_EPSILON
    n_samples: int = DEFAULT_N_SAMPLES
    weight_floor: float = DEFAULT_WEIGHT_FLOOR
    seed: int = 0

    def __post_init__(self):
        if not (self.epsilon > 0 and self.n_samples >= 1 and self.weight_floor > 0):
            raise ValueError(f"invalid GumbelConfig {self}")


@dataclass(frozen=True)
class DensityLossConfig:
    margin: int = DEFAULT_DENSITY_MARGIN

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("density margin must be >= 0")


def normalize_weights(w, floor=DEFAULT_WEIGHT_FLOOR):
    """Floor at ``floor`` and renormalise to unit sum."""
    wf = np.maximum(np.asarray(w, dtype=float), floor)
    return wf / wf.sum()


@dataclass(frozen=True)
class TriangularMixture:
    centers: np.ndarray
    half_width: float
    weights: np.ndarray

    @classmethod
    def from_distribution(cls, dist, half_width=None, floor=DEFAULT_WEIGHT_FLOOR):
        t = np.asarray(dist.t, dtype=float)
        if half_width is None:
            half_width = float(np.mean(np.diff(t))) if t.size > 1 else 1.0
        return cls(t, float(half_width), normalize_weights(dist.w, floor))


def triangle_pdf(t, center, half_width):
    r = np.abs(np.asarray(t, dtype=float) - center) / half_width
    return np.where(r < 1.0, (1.0 - r) / half_width, 0.0)


def mixture_pdf(mix, t):
    if not mix.half_width > 0:
        raise DomainError("triangle half-width must be positive")
    t = np.asarray(t, dtype=float)
    vals = triangle_pdf(t[..., None], mix.centers, mix.half_width) @ mix.weights
    return float(vals) if vals.ndim == 0 else vals


def _check_open_unit(u):
    u = np.asarray(u, dtype=float)
    if np.any(~((u > 0) & (u < 1))):
        raise DomainError("uniform draw outside (0, 1)")
    return u


def gumbel_noise(u):
    u = _check_open_unit(u)
    g = -np.log(-np.log(u))
    return float(g) if g.ndim == 0 else g


def gumbel_softmax(w, g, epsilon=DEFAULT_EPSILON):
    """softmax_i((g_i + log w_i) / epsilon)."""
    w = np.asarray(w, dtype=float)
    g = np.asarray(g, dtype=float)
    if w.shape[-1] != g.shape[-1]:
        raise ShapeMismatchError("weights and noise differ in length")
    if not epsilon > 0:
        raise DomainError("temperature must be positive")
    z = (g + np.log(w)) / epsilon
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gumbel_max(w, g):
    """Index chosen by the hard (zero-temperature) Gumbel-Max rule."""
    return np.argmax(np.asarray(g) + np.log(np.asarray(w, dtype=float)), axis=-1)


def sample_triangle(center, half_width, u):
    """Inverse CDF of the symmetric triangle on [center - hw, center + hw]."""
    u = _check_open_unit(u)
    off = np.where(u <= 0.5, -1.0 + np.sqrt(2.0 * u), 1.0 - np.sqrt(2.0 * (1.0 - u)))
    out = center + half_width * off
    return float(out) if np.ndim(out) == 0 else out


def composite_sample(w_hat, t_hat):
    w_hat = np.asarray(w_hat, dtype=float)
    t_hat = np.asarray(t_hat, dtype=float)
    if w_hat.shape != t_hat.shape:
        raise ShapeMismatchError("selection weights and sub-points differ in shape")
    out = np.sum(w_hat * t_hat, axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass
class WeightLossResult:
    loss: float
    grad: np.ndarray
    skipped: bool = False
    samples: np.ndarray = None


def draw_noise(rng, n_samples, n):
    """Open-interval uniforms (gumbel, triangle), each (n_samples, n)."""
    tiny = 2.0**-54
    return rng.random((n_samples, n)) + tiny, rng.random((n_samples, n)) + tiny


def weight_loss(dist, depth_gt, cfg=GumbelConfig(), rng=None, noise=None, half_width=None):
    """Expectation-of-error loss for one ray and its gradient w.r.t. raw weights.

    ``noise`` may be given as a pair of (n_samples, N) uniform arrays to
    evaluate with common random numbers; otherwise it is drawn from ``rng``
    (or a generator seeded with ``cfg.seed``).
    """
    w = np.asarray(dist.w, dtype=float)
    t = np.asarray(dist.t, dtype=float)
    n = w.shape[0]
    eta = cfg.weight_floor
    if not w.sum() >= n * eta:
        return WeightLossResult(0.0, np.zeros(n), skipped=True)
    if half_width is None:
        half_width = float(np.mean(np.diff(t))) if n > 1 else 1.0
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        noise = draw_noise(rng, cfg.n_samples, n)
    u_g, u_t = (np.asarray(a, dtype=float) for a in noise)
    ns = u_g.shape[0]

    wf = np.where(w > eta, w, eta)
    S = wf.sum()
    p = wf / S
    g = gumbel_noise(u_g)
    t_hat = sample_triangle(t[None, :], half_width, u_t)
    w_hat = gumbel_softmax(p[None, :], g, cfg.epsilon)
    T_hat = composite_sample(w_hat, t_hat)
    r = T_hat - depth_gt
    loss = float(np.mean(np.abs(r)))

    # d/dlog p_i, then through the floor-and-normalise step
    A = np.sum(np.sign(r)[:, None] * w_hat * (t_hat - T_hat[:, None]), axis=0) / (ns * cfg.epsilon)
    grad_p = A / p
    grad_wf = (grad_p - np.dot(p, grad_p)) / S
    grad = np.where(w > eta, grad_wf, 0.0)
    return WeightLossResult(loss, grad, samples=T_hat)


@dataclass
class DensityLossResult:
    loss: float
    grad: np.ndarray
    mask: np.ndarray


def density_loss(sampling, sigma, depth_gt, cfg=DensityLossConfig()):
    """L1 density over samples at least ``margin`` spacings before the surface."""
    t = np.asarray(sampling.t, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if t.shape != sigma.shape:
        raise ShapeMismatchError("sampling and sigma differ in length")
    boundary = depth_gt - cfg.margin * float(np.mean(sampling.delta))
    mask = t < boundary
    return DensityLossResult(float(np.sum(np.abs(sigma[mask]))), mask.astype(float), mask)
