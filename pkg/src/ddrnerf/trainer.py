"""Joint optimisation of grid fields and camera residuals with Adam."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import checkpoint as ckpt_io
from . import kernels
from .ddr import DensityLossConfig, GumbelConfig
from .errors import ShapeMismatchError, TrainingAborted
from .field import GridField, NDC_BBOX
from .losses import DEFAULT_LAMBDAS, LOSS_NAMES
from .geometry import pixel_centers
from .pipeline import Batch, RenderConfig, step as pipeline_step
from .scenes import reference_camera

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration",) + LOSS_NAMES + ("total",)


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 1024
    samples_per_ray: int = 128
    lr_field: float = 0.05
    lr_camera: float = 1e-3
    lr_focal: float = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    lambdas: tuple = DEFAULT_LAMBDAS
    ddr_epsilon: float = 2.0
    ddr_samples: int = 30
    ddr_weight_floor: float = 1e-8
    density_margin: float = 2.0
    seed: int = 0
    run_length: int = 32
    near: float = 1.0
    jitter: bool = True
    learn_field: bool = True
    learn_camera: bool = True
    backend: str = None

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr_field <= 0:
            raise ValueError("lr_field must be > 0")
        if self.lr_camera < 0 or (self.lr_focal is not None and self.lr_focal < 0):
            raise ValueError("camera learning rates must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps_adam <= 0:
            raise ValueError("invalid Adam constants")
        if self.batch_size % self.run_length:
            raise ValueError("batch_size must be a multiple of run_length")

    def render_config(self):
        return RenderConfig(
            n_samples=self.samples_per_ray,
            near=self.near,
            jitter=self.jitter,
            run_length=self.run_length,
            lambdas=self.lambdas,
            gumbel=GumbelConfig(self.ddr_epsilon, self.ddr_samples, self.ddr_weight_floor, self.seed),
            density=DensityLossConfig(self.density_margin),
        )

    def to_dict(self):
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    moments: dict = field(default_factory=dict)
    step: int = 0

    def group(self, name, like):
        if name not in self.moments:
            self.moments[name] = (np.zeros(like.shape, np.float32), np.zeros(like.shape, np.float32))
        m, v = self.moments[name]
        if m.shape != like.shape:
            raise ShapeMismatchError(f"Adam buffers for {name!r} have shape {m.shape}, params {like.shape}")
        return m, v

    def flat(self):
        out = {}
        for name, (m, v) in self.moments.items():
            out[f"{name}.m"] = m
            out[f"{name}.v"] = v
        return out

    @classmethod
    def from_flat(cls, arrays, step):
        names = sorted({k.rsplit(".", 1)[0] for k in arrays})
        return cls({n: (arrays[f"{n}.m"].copy(), arrays[f"{n}.v"].copy()) for n in names}, step)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, backend=None):
    """Bias-corrected Adam over named parameter groups, in place.

    ``params``/``grads`` are dicts of arrays; ``lr`` is a scalar or a dict of
    per-group rates.  A group with rate 0 is left untouched.
    """
    k = kernels.get_backend(backend)
    if set(params) != set(grads):
        raise ShapeMismatchError("params and grads name different groups")
    state.step += 1
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ShapeMismatchError(f"group {name!r}: param {p.shape} vs grad {g.shape}")
        rate = lr[name] if isinstance(lr, dict) else lr
        m, v = state.group(name, p)
        if rate == 0:
            continue
        k.adam_update(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                      m.reshape(-1), v.reshape(-1), float(rate), beta1, beta2, eps, state.step)
    return params, state


def sample_batch(dataset, cfg, iteration):
    """Contiguous horizontal runs of ``cfg.run_length`` pixels.

    Draws depend only on (seed, iteration), so any iteration can be
    regenerated without replaying the ones before it.
    """
    rng = np.random.default_rng([cfg.seed, iteration])
    L = cfg.run_length
    n_runs = cfg.batch_size // L
    W, H = dataset.width, dataset.height
    if W < L:
        raise ValueError(f"image width {W} shorter than run length {L}")
    frames = rng.integers(0, dataset.frame_count, n_runs)
    rows = rng.integers(0, H, n_runs)
    starts = rng.integers(0, W - L + 1, n_runs)
    cols = starts[:, None] + np.arange(L)[None]
    f = np.repeat(frames, L)
    r = np.repeat(rows, L)
    c = cols.reshape(-1)
    pixels = np.stack([c + 0.5, r + 0.5], axis=1)
    ray_ids = iteration * cfg.batch_size + np.arange(cfg.batch_size, dtype=np.int64)
    return Batch(f, pixels, dataset.images[f, r, c], dataset.depths[f, r, c], ray_ids)


@dataclass
class TrainResult:
    field: GridField
    rig: object
    adam: AdamState
    history: list
    aborted: bool = False


def _format_row(it, bundle):
    return [str(it)] + [repr(float(x)) for x in bundle.components()] + [repr(float(bundle.total))]


def make_checkpoint(fld, rig, adam, extra=None):
    return ckpt_io.Checkpoint(fld, rig.xi.astype(np.float32), rig.delta_f.astype(np.float32), adam.step,
                              adam.flat(), extra or {})


def restore(path, rig):
    """Load a checkpoint, returning (field, rig with residuals, AdamState)."""
    c = ckpt_io.load(path)
    rig = rig.copy()
    if c.xi.shape != rig.xi.shape:
        raise ShapeMismatchError(f"checkpoint has {c.xi.shape[0]} cameras, rig has {len(rig)}")
    rig.xi = c.xi.astype(np.float64)
    rig.delta_f = c.delta_f.astype(np.float64)
    return c.field, rig, AdamState.from_flat(c.adam, c.step)


def init_field(dataset, resolution=32, sigma_init=-2.0, bbox=NDC_BBOX):
    return GridField.create((resolution,) * 3, bbox, 1, sigma_init, 0.0, dtype=np.float32)


def train(dataset, fld, rig, cfg, out_dir=None, adam=None, ndc_cam=None, progress=None):
    """Run ``cfg.iterations`` total steps (continuing from ``adam.step``).

    Field parameters and camera residuals are stored as float32 so that
    checkpoints capture the exact optimiser state; arithmetic is float64.
    """
    if fld.frame_count not in (1, dataset.frame_count):
        raise ShapeMismatchError(f"field has {fld.frame_count} frames, dataset {dataset.frame_count}")
    if len(rig) != dataset.frame_count:
        raise ShapeMismatchError(f"rig has {len(rig)} cameras, dataset {dataset.frame_count} frames")
    rcfg = cfg.render_config()
    ndc_cam = reference_camera(rig) if ndc_cam is None else ndc_cam
    fld = GridField(np.asarray(fld.params, dtype=np.float32).copy(), fld.bbox)
    rig = rig.copy()
    xi = rig.xi.astype(np.float32)
    df = rig.delta_f.astype(np.float32)
    rig.xi, rig.delta_f = xi.astype(np.float64), df.astype(np.float64)
    adam = AdamState() if adam is None else adam
    learn_cam = cfg.learn_camera and cfg.lr_camera > 0
    # focal residuals are in pixels; by default step them in relative units
    lr_focal = cfg.lr_focal if cfg.lr_focal is not None else cfg.lr_camera * float(np.mean(rig.f_init))

    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        resume = adam.step > 0 and (out / "metrics.csv").exists()
        fh = open(out / "metrics.csv", "a" if resume else "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if not resume:
            writer.writerow(METRIC_COLUMNS)

    history = []
    try:
        for it in range(adam.step, cfg.iterations):
            batch = sample_batch(dataset, cfg, it)
            try:
                res = pipeline_step(fld, rig, ndc_cam, batch, rcfg, seed=cfg.seed, want_field=cfg.learn_field,
                                    want_camera=learn_cam, backend=cfg.backend)
            except TrainingAborted as exc:
                exc.checkpoint = _save_abort(out, fld, rig, adam)
                raise
            g = res.grads
            if not (np.all(np.isfinite(g.field)) and np.all(np.isfinite(g.xi)) and np.all(np.isfinite(g.delta_f))):
                raise TrainingAborted(f"non-finite gradient at iteration {it}", component="gradient",
                                      checkpoint=_save_abort(out, fld, rig, adam))
            params = {"field": fld.params, "xi": xi, "delta_f": df}
            grads = {"field": g.field, "xi": g.xi, "delta_f": g.delta_f}
            lr = {"field": cfg.lr_field if cfg.learn_field else 0.0,
                  "xi": cfg.lr_camera if learn_cam else 0.0,
                  "delta_f": lr_focal if learn_cam else 0.0}
            adam_step(params, grads, adam, lr, cfg.beta1, cfg.beta2, cfg.eps_adam, backend=cfg.backend)
            rig.xi[...] = xi
            rig.delta_f[...] = df
            row = _format_row(it, res.losses)
            history.append(res.losses.as_row())
            if writer is not None:
                writer.writerow(row)
            if progress is not None:
                progress(it, res.losses)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        ckpt_io.save(out / "checkpoint.bin", make_checkpoint(fld, rig, adam))
    return TrainResult(fld, rig, adam, history)


def _save_abort(out, fld, rig, adam):
    if out is None:
        return None
    path = out / "checkpoint.bin"
    ckpt_io.save(path, make_checkpoint(fld, rig, adam, {"aborted": True}))
    log.error("training aborted; last good state written to %s", path)
    return str(path)


def resume(dataset, rig, cfg, out_dir, progress=None):
    """Continue a run from ``out_dir/checkpoint.bin`` up to ``cfg.iterations``."""
    fld, rig, adam = restore(Path(out_dir) / "checkpoint.bin", rig)
    return train(dataset, fld, rig, cfg, out_dir, adam=adam, progress=progress)


@dataclass
class RefineInfo:
    iterations: list
    losses: list
    converged: list


def refine_cameras(dataset, fld, rig, lambdas=(1.0, 0.0, 0.0, 0.0, 0.0), samples_per_ray=128, ndc_cam=None,
                   max_iter=300, frames=None, rot_bound=np.radians(3.0), trans_bound=0.01, focal_bound=0.05,
                   restarts=3, backend=None):
    """Refine camera residuals against a frozen field with L-BFGS-B.

    With the field fixed the loss splits into one independent problem per
    frame, each over (xi, delta_f) on the full deterministic image.  Adam on
    random batches stalls here: lateral translation trades off against
    rotation and forward translation against focal, and a quasi-Newton step
    resolves those coupled directions.  Bounds keep the search in the
    small-residual regime: ``rot_bound`` radians, ``trans_bound`` times the
    mean ground-truth depth, ``focal_bound`` times the initial focal.
    """
    ndc_cam = reference_camera(rig) if ndc_cam is None else ndc_cam
    rig = rig.copy()
    W, H = dataset.width, dataset.height
    px = pixel_centers(W, H)
    cfg = RenderConfig(n_samples=samples_per_ray, jitter=False, run_length=W, lambdas=tuple(lambdas))
    tb = trans_bound * float(np.mean(dataset.depths))
    info = RefineInfo([], [], [])
    for k in range(len(rig)) if frames is None else frames:
        batch = Batch(np.full(len(px), k), px, dataset.images[k].reshape(-1, 3), dataset.depths[k].reshape(-1),
                      np.arange(len(px), dtype=np.int64))
        fb = focal_bound * float(rig.f_init[k])
        x0 = np.r_[rig.xi[k], rig.delta_f[k]]
        # search in units of the bound half-widths so radians, scene units
        # and pixels are comparably scaled
        half = np.r_[[rot_bound] * 3, [tb] * 3, fb]

        def fun(z, k=k, batch=batch):
            x = x0 + half * z
            rig.xi[k] = x[:6]
            rig.delta_f[k] = x[6]
            res = pipeline_step(fld, rig, ndc_cam, batch, cfg, want_field=False, want_camera=True, backend=backend)
            return res.losses.total, half * np.r_[res.grads.xi[k], res.grads.delta_f[k]]

        z = np.zeros(7)
        nit = 0
        for _ in range(restarts + 1):
            out = minimize(fun, z, jac=True, method="L-BFGS-B", bounds=[(-1.0, 1.0)] * 7,
                           options={"maxiter": max_iter - nit, "gtol": 1e-12, "ftol": 1e-15})
            z, nit = out.x, nit + int(out.nit)
            # an abnormal line-search exit usually means stale curvature pairs
            if out.success or nit >= max_iter:
                break
        out.x = x0 + half * z
        rig.xi[k] = out.x[:6]
        rig.delta_f[k] = out.x[6]
        info.iterations.append(nit)
        info.losses.append(float(out.fun))
        info.converged.append(bool(out.success))
        log.info("frame %d: %d L-BFGS iterations, loss %.6g", k, nit, out.fun)
    return rig, info
