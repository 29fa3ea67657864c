"""Command-line entry point: gen-scene, fit, render, weightmap, gradcheck, eval."""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, metrics, scenes, trainer, viz
from .errors import DDRError, DatasetError, TrainingAborted

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION = 0, 1, 2

log = logging.getLogger("ddrnerf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {p} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p}: {exc}") from exc


def _opt(args, cfg, name, default=None):
    """Flag value if given, else the config-file value, else ``default``."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


def _require(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required (flag or config file)")
    return value


class Manifest:
    def __init__(self, out, command, params):
        self.out = Path(out)
        self.doc = {"command": command, "parameters": params, "artifacts": []}

    def add(self, path, kind, **params):
        self.doc["artifacts"].append({"path": str(Path(path).relative_to(self.out)), "kind": kind,
                                      "parameters": params})

    def write(self, **extra):
        self.doc.update(extra)
        path = self.out / "manifest.json"
        path.write_text(json.dumps(self.doc, indent=2, sort_keys=True, default=_jsonable))
        return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _load_model(args, cfg):
    data = scenes.load(_require(_opt(args, cfg, "data"), "--data"))
    ckpt = Path(_require(_opt(args, cfg, "checkpoint"), "--checkpoint"))
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} not found")
    fld, rig, _ = trainer.restore(ckpt, data.rig)
    return data, fld, rig


def cmd_gen_scene(args, cfg):
    name = _opt(args, cfg, "scene", "two-spheres")
    if name not in scenes.SCENES:
        raise UsageError(f"unknown scene {name!r}; choose from {sorted(scenes.SCENES)}")
    frames = int(_opt(args, cfg, "frames", 3))
    width = int(_opt(args, cfg, "width", 48))
    height = int(_opt(args, cfg, "height", 36))
    frac = float(_opt(args, cfg, "baseline_fraction", scenes.DEFAULT_BASELINE_FRACTION))
    spec = scenes.SCENES[name](frames)
    rig = scenes.scene_rig(spec, width, height, frac)
    ds = scenes.generate(spec, rig)
    out = Path(args.out)
    ds.save(out)
    params = {"scene": name, "frames": frames, "width": width, "height": height, "baseline_fraction": frac}
    m = Manifest(out, "gen-scene", params)
    for i in range(frames):
        m.add(out / "frames" / f"{i:03d}.png", "image", frame=i)
        m.add(out / "depth" / f"{i:03d}.pfm", "depth", frame=i)
    m.add(out / "cameras.json", "cameras")
    m.add(out / "meta.json", "meta")
    m.write()
    print(f"wrote {frames} frames to {out}")
    return EXIT_OK


def cmd_fit(args, cfg):
    data = scenes.load(_require(_opt(args, cfg, "data"), "--data"))
    train_cfg = dict(cfg.get("train", {}))
    for key in ("iterations", "seed", "batch_size", "samples_per_ray"):
        v = getattr(args, key, None)
        if v is not None:
            train_cfg[key] = v
    try:
        tcfg = trainer.TrainConfig.from_dict(train_cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc
    resolution = int(_opt(args, cfg, "resolution", 32))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    every = max(1, tcfg.iterations // 20)

    def progress(it, b):
        if it % every == 0 or it == tcfg.iterations - 1:
            log.info("iter %d total %.6g", it, b.total)

    if args.resume and (out / "checkpoint.bin").exists():
        res = trainer.resume(data, data.rig, tcfg, out, progress=progress)
    else:
        fld = trainer.init_field(data, resolution)
        res = trainer.train(data, fld, data.rig, tcfg, out, progress=progress)
    m = Manifest(out, "fit", {"data": str(_opt(args, cfg, "data")), "resolution": resolution, **tcfg.to_dict()})
    m.add(out / "checkpoint.bin", "checkpoint", step=res.adam.step)
    m.add(out / "metrics.csv", "metrics")
    m.add(out / "config.resolved.json", "config")
    m.write(final_losses=res.history[-1] if res.history else None)
    print(f"trained to step {res.adam.step}; outputs in {out}")
    return EXIT_OK


def cmd_render(args, cfg):
    data, fld, rig = _load_model(args, cfg)
    frame = int(_opt(args, cfg, "frame", 0))
    if not 0 <= frame < data.frame_count:
        raise UsageError(f"frame {frame} out of range")
    n = int(_opt(args, cfg, "samples", 128))
    out = Path(args.out)
    view = viz.render_view(fld, rig, frame, n)
    png, pfm = view.export(out / f"view_{frame:03d}")
    m = Manifest(out, "render", {"frame": frame, "samples": n})
    m.add(png, "image", frame=frame)
    m.add(pfm, "depth", frame=frame, units="world distance")
    m.write(psnr=metrics.psnr(np.clip(view.image, 0, 1), data.images[frame]))
    print(f"rendered frame {frame} to {png}")
    return EXIT_OK


def cmd_weightmap(args, cfg):
    data, fld, rig = _load_model(args, cfg)
    frame = int(_opt(args, cfg, "frame", 0))
    row = int(_require(_opt(args, cfg, "row"), "--row"))
    if not 0 <= row < data.height:
        raise UsageError(f"row {row} outside image of height {data.height}")
    n = int(_opt(args, cfg, "samples", 128))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wm = viz.weight_map(fld, rig, frame, row, n)
    path = viz.export_pgm(wm, out / f"weights_f{frame:03d}_r{row:03d}.pgm")
    m = Manifest(out, "weightmap", {"frame": frame, "row": row, "samples": n})
    m.add(path, "weightmap", normalization="per-map max", max_weight=wm.scale)
    m.add(path.with_suffix(".json"), "weightmap-meta")
    m.write()
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    points = int(_opt(args, cfg, "points", 20))
    names = _opt(args, cfg, "ops")
    reports = gradcheck.run_registry(points=points, seed=int(_opt(args, cfg, "seed", 0)), names=names)
    if not reports:
        raise UsageError("no registered op matched --ops")
    text = gradcheck.format_reports(reports)
    print(text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.txt").write_text(text + "\n")
    m = Manifest(out, "gradcheck", {"points": points, "ops": names})
    m.add(out / "gradcheck.txt", "report")
    failed = [r.op for r in reports if not r.passed]
    m.write(results=[{"op": r.op, "max_rel_error": r.max_rel_error, "tol": r.tol, "passed": r.passed}
                     for r in reports], failed=failed)
    return EXIT_VALIDATION if failed else EXIT_OK


def cmd_eval(args, cfg):
    data, fld, rig = _load_model(args, cfg)
    n = int(_opt(args, cfg, "samples", 128))
    count = int(_opt(args, cfg, "pixels", 500))
    per_frame = []
    for k in range(data.frame_count):
        view = viz.render_view(fld, rig, k, n)
        img = np.clip(view.image, 0, 1)
        per_frame.append({"frame": k, "psnr": metrics.psnr(img, data.images[k]),
                          "ssim": metrics.ssim(img, data.images[k])})
    rng = np.random.default_rng(0)
    f = rng.integers(0, data.frame_count, count)
    px = np.stack([rng.integers(0, data.width, count) + 0.5, rng.integers(0, data.height, count) + 0.5], axis=1)
    reps = [viz.unimodality(fld, rig, int(k), px[f == k], n) for k in np.unique(f)]
    modality = np.concatenate([r.modality for r in reps])
    ratio = np.concatenate([r.mass_ratio for r in reps])
    summary = {
        "frames": per_frame,
        "mean_psnr": float(np.mean([p["psnr"] for p in per_frame])),
        "mean_ssim": float(np.mean([p["ssim"] for p in per_frame])),
        "unimodality": {"rays": int(count), "mean_modality": float(modality.mean()),
                        "mean_peak_mass_ratio": float(ratio.mean())},
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(summary, indent=2))
    m = Manifest(out, "eval", {"samples": n, "pixels": count})
    m.add(out / "eval.json", "metrics")
    m.write()
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="ddrnerf", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, model=False):
        sp.add_argument("--config", help="JSON file; flags override its keys")
        sp.add_argument("--out", required=True, help="output directory")
        if model:
            sp.add_argument("--data", help="dataset directory")
            sp.add_argument("--checkpoint", help="checkpoint.bin from fit")
            sp.add_argument("--samples", type=int, help="samples per ray")

    g = sub.add_parser("gen-scene", help="ray-trace a synthetic dataset")
    common(g)
    g.add_argument("--scene")
    g.add_argument("--frames", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--baseline-fraction", dest="baseline_fraction", type=float)
    g.set_defaults(func=cmd_gen_scene)

    f = sub.add_parser("fit", help="optimise a grid field and camera residuals")
    common(f)
    f.add_argument("--data")
    f.add_argument("--iterations", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--batch-size", dest="batch_size", type=int)
    f.add_argument("--samples-per-ray", dest="samples_per_ray", type=int)
    f.add_argument("--resolution", type=int)
    f.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.bin")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("render", help="render a view to PNG + PFM")
    common(r, model=True)
    r.add_argument("--frame", type=int)
    r.set_defaults(func=cmd_render)

    w = sub.add_parser("weightmap", help="export a W×N rendering-weight map as PGM")
    common(w, model=True)
    w.add_argument("--frame", type=int)
    w.add_argument("--row", type=int)
    w.set_defaults(func=cmd_weightmap)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    common(gc)
    gc.add_argument("--points", type=int)
    gc.add_argument("--seed", type=int)
    gc.add_argument("--ops", nargs="*")
    gc.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="PSNR/SSIM and unimodality against a dataset")
    common(e, model=True)
    e.add_argument("--pixels", type=int)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"ddrnerf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"ddrnerf: training aborted: {exc} (checkpoint: {exc.checkpoint})", file=sys.stderr)
        return EXIT_VALIDATION
    except (DatasetError, DDRError, ValueError) as exc:
        print(f"ddrnerf: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
