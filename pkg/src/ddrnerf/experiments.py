"""Toy experiments on the two-spheres scene used by the acceptance suite."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import scenes, trainer, viz
from .geometry import so3_exp

RGB_DEPTH = (1.0, 0.1, 0.0, 0.0, 0.0)
RGB_DEPTH_DDR = (1.0, 0.1, 0.1, 0.01, 0.0)
RGB_DEPTH_GRAD = (1.0, 0.1, 0.0, 0.0, 0.1)


@dataclass
class ToySetup:
    width: int = 48
    height: int = 36
    frames: int = 3
    resolution: int = 32
    iterations: int = 20000
    batch_size: int = 64
    samples: int = 64
    lr_field: float = 0.05
    seed: int = 0


def toy_dataset(setup=ToySetup()):
    spec = scenes.two_spheres(setup.frames)
    rig = scenes.scene_rig(spec, setup.width, setup.height)
    return spec, scenes.generate(spec, rig)


def fit(dataset, lambdas, setup=ToySetup(), out_dir=None, progress=None, **overrides):
    cfg = trainer.TrainConfig(
        iterations=setup.iterations, batch_size=setup.batch_size, samples_per_ray=setup.samples,
        lr_field=setup.lr_field, lambdas=lambdas, seed=setup.seed, learn_camera=False, **overrides,
    )
    fld = trainer.init_field(dataset, setup.resolution)
    return trainer.train(dataset, fld, dataset.rig, cfg, out_dir, progress=progress)


def foreground_pixels(dataset, count=500, seed=0):
    """(frame, pixel) pairs on the spheres, sampled without replacement."""
    wall = int(dataset.hits.max())
    f, r, c = np.nonzero((dataset.hits >= 0) & (dataset.hits != wall))
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(f), size=min(count, len(f)), replace=False))
    return f[pick], np.stack([c[pick] + 0.5, r[pick] + 0.5], axis=1), dataset.depths[f[pick], r[pick], c[pick]]


@dataclass
class PeakStats:
    mean_modality: float
    peak_hit_rate: float
    mean_mass_ratio: float
    report: viz.UnimodalityReport


def peak_statistics(fld, rig, dataset, n_samples, count=500, seed=0, tol_bins=2):
    frames, px, depth = foreground_pixels(dataset, count, seed)
    reports, hits = [], []
    for k in np.unique(frames):
        m = frames == k
        rep = viz.unimodality(fld, rig, int(k), px[m], n_samples)
        target = viz.depth_bin(rig, int(k), px[m], depth[m], n_samples)
        reports.append(rep)
        hits.append(np.abs(rep.peak - target) <= tol_bins)
    rep = viz.UnimodalityReport(*(np.concatenate([getattr(r, a) for r in reports])
                                  for a in ("peak", "mass_ratio", "modality")))
    return PeakStats(rep.mean_modality, float(np.mean(np.concatenate(hits))), float(np.mean(rep.mass_ratio)), rep)


def smooth_mask(dataset, frame, margin=2):
    """Pixels at least ``margin`` pixels away from a ground-truth depth edge.

    Edges are changes of the visible primitive between 4-neighbours, i.e. the
    occlusion boundaries where the true depth map jumps.
    """
    h = dataset.hits[frame]
    edge = np.zeros(h.shape, dtype=bool)
    edge[:, 1:] |= h[:, 1:] != h[:, :-1]
    edge[:, :-1] |= h[:, 1:] != h[:, :-1]
    edge[1:] |= h[1:] != h[:-1]
    edge[:-1] |= h[1:] != h[:-1]
    if margin > 1:
        edge = ndimage.binary_dilation(edge, iterations=margin - 1)
    return ~edge


def depth_laplacian(fld, rig, frame, n_samples, mask=None):
    """Mean absolute 4-neighbour Laplacian of the rendered (NDC) depth map,
    optionally restricted to ``mask``."""
    view = viz.render_view(fld, rig, frame, n_samples)
    lap = np.abs(ndimage.laplace(view.depth, mode="nearest"))
    return float(np.mean(lap if mask is None else lap[mask]))


def depth_noise(fld, rig, dataset, n_samples, margin=2):
    """Depth-map Laplacian away from true occlusion edges, averaged over frames."""
    return float(np.mean([depth_laplacian(fld, rig, k, n_samples, smooth_mask(dataset, k, margin))
                          for k in range(dataset.frame_count)]))


def camera_recovery(setup=ToySetup(), rot_deg=0.5, trans_frac=0.005, focal_frac=0.02, resolution=128,
                    lambdas=(1.0, 0.0, 0.0, 0.0, 0.0), seed=0):
    """Perturb the toy cameras, refine against the voxelised ground truth.

    Returns (rotation error deg, translation error, focal error px) per frame
    and the perturbation magnitudes (deg, translation, px).
    """
    spec, ds = toy_dataset(setup)
    mean_depth = float(ds.depths.mean())
    rig_p, _, _ = perturb_rig(ds.rig, mean_depth, rot_deg, trans_frac, focal_frac, seed)
    ndc = scenes.reference_camera(rig_p)
    gt = scenes.voxelize(spec, ndc, resolution=resolution)
    est, _ = trainer.refine_cameras(ds, gt, rig_p, lambdas, ndc_cam=ndc)
    errs = recovery_error(est, ds.rig)
    mags = (rot_deg, trans_frac * mean_depth, focal_frac * ds.rig.f_init)
    return errs, mags


def perturb_rig(rig, mean_depth, rot_deg=0.5, trans_frac=0.005, focal_frac=0.02, seed=0):
    """Rig whose *initial* poses/focals are off by the given magnitudes.

    Returns (perturbed rig, true residuals xi, true delta_f): composing the
    perturbed initial pose with the true residual recovers the exact pose.
    """
    rng = np.random.default_rng(seed)
    n = len(rig)
    out = rig.copy()
    xi_true = np.zeros((n, 6))
    df_true = np.zeros(n)
    for k in range(n):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        tdir = rng.standard_normal(3)
        tdir /= np.linalg.norm(tdir)
        w = np.radians(rot_deg) * axis
        v = trans_frac * mean_depth * tdir
        # true = perturbed ∘ residual  =>  perturbed = true ∘ residual⁻¹
        R_res = so3_exp(w)
        R_true, t_true = rig.rotations[k], rig.translations[k]
        R_p = R_true @ R_res.T
        t_p = t_true - R_p @ v
        out.rotations[k] = R_p
        out.translations[k] = t_p
        xi_true[k] = np.r_[w, v]
        df_true[k] = -focal_frac * rig.f_init[k]
        out.f_init[k] = rig.f_init[k] * (1 + focal_frac)
    return out, xi_true, df_true


def recovery_error(rig_est, rig_true):
    """Per-frame rotation angle (deg), translation error and focal error of the
    recovered cameras against the truth."""
    rot, trans, foc = [], [], []
    for k in range(len(rig_true)):
        p = rig_est.pose(k)
        q = rig_true.init_pose(k)
        dR = p.rotation.T @ q.rotation
        rot.append(np.degrees(np.arccos(np.clip((np.trace(dR) - 1) / 2, -1, 1))))
        trans.append(np.linalg.norm(p.translation - q.translation))
        foc.append(abs(rig_est.f_init[k] + rig_est.delta_f[k] - rig_true.f_init[k]))
    return np.array(rot), np.array(trans), np.array(foc)


__all__ = ["ToySetup", "toy_dataset", "fit", "foreground_pixels", "peak_statistics", "depth_laplacian",
           "smooth_mask", "depth_noise", "perturb_rig", "recovery_error", "camera_recovery"]
