"""Command-line entry point: synth | align-depth | init | train | render | eval.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import io
from .config import ConfigError, RunConfig
from .metrics import psnr, ssim
from .scene import Camera, DataError, PriorBundle
from .shape_init import (InitResult, PrefitConfig, RefFrameSelection, align_frame, prefit_deformation)
from .synth import generate
from .trainer import NumericalFailure, build_initial, evaluate, render_frame, train
from . import quaternion as quat

log = logging.getLogger("refsplat")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of dotted keys")
    g = p.add_argument_group("configuration keys (each also accepted in --config)")
    for key, default in RunConfig().flat().items():
        g.add_argument(f"--{key}", dest=f"cfg:{key}", default=argparse.SUPPRESS, metavar="V",
                       help=f"default: {default}")


def _config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:")}
    return config_mod.load(args.config, overrides)


def _run_dir(cfg: RunConfig, args) -> Path:
    d = Path(args.out) if getattr(args, "out", None) else cfg.run_dir()
    d.mkdir(parents=True, exist_ok=True)
    return d


def interpolate_camera(bundle: PriorBundle, t: float) -> Camera:
    """Camera at normalized time ``t``: rotations slerped and centers lerped between neighboring frames."""
    times = bundle.times
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"query time {t} outside [0, 1]")
    j = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2)) if len(times) > 1 else 0
    if len(times) == 1:
        return bundle.cameras[0]
    a, b = bundle.cameras[j], bundle.cameras[j + 1]
    u = float((t - times[j]) / (times[j + 1] - times[j]))
    if u <= 0:
        return a
    if u >= 1:
        return b
    qa, qb = quat.from_rotmat(a.R), quat.from_rotmat(b.R)
    if np.dot(qa, qb) < 0:
        qb = -qb
    omega = np.arccos(np.clip(np.dot(qa, qb), -1.0, 1.0))
    q = qa if omega < 1e-12 else (np.sin((1 - u) * omega) * qa + np.sin(u * omega) * qb) / np.sin(omega)
    R = quat.to_rotmat(q)
    c = (1 - u) * a.center + u * b.center
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ c
    K = (1 - u) * a.K + u * b.K
    return Camera(K, E, a.width, a.height)


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, cfg: RunConfig) -> dict:
    out = Path(args.out) if args.out else cfg.run_dir() / "bundle"
    bundle, gt = generate(cfg.synth)
    io.save_bundle(bundle, out)
    _write_json(out / "ground_truth.json", gt.to_json())
    return {"bundle": str(out), "frames": len(bundle)}


def _alignments(bundle: PriorBundle, cfg: RunConfig):
    return [align_frame(fr, cam, cfg.init.ransac_iters, cfg.init.ransac_thresh, cfg.init.seed)
            for fr, cam in zip(bundle.frames, bundle.cameras)]


def cmd_align_depth(args, cfg: RunConfig) -> dict:
    bundle = io.load_bundle(args.bundle)
    d = _run_dir(cfg, args) / "depth"
    d.mkdir(parents=True, exist_ok=True)
    report = []
    for i, a in enumerate(_alignments(bundle, cfg)):
        io.save_depth(d / f"frame_{i:05d}.depth_star.f32", a.depth_star)
        report.append(dict(frame=i, **a.alignment.to_json()))
    _write_json(d / "alignment.json", report)
    return {"depth_dir": str(d), "frames": len(report)}


def cmd_init(args, cfg: RunConfig) -> dict:
    bundle = io.load_bundle(args.bundle)
    tcfg = cfg.resolved_train()
    train_frames, _ = tcfg.split(len(bundle))
    init, params = build_initial(bundle, tcfg, train_frames)
    hist = []
    if tcfg.use_prefit and tcfg.iters_prefit > 0:
        pcfg = PrefitConfig(iters=tcfg.iters_prefit, lr=tcfg.prefit_lr, seed=tcfg.seed)
        params, hist = prefit_deformation(init.frame_set, params, init.targets, pcfg, frames=train_frames)
    d = _run_dir(cfg, args)
    sel = {"indices": init.selection.indices.tolist(), "cost": init.selection.cost,
           "final_deform_loss": hist[-1] if hist else None}
    io.save_checkpoint(d / "init.bin", init.frame_set, params, {"selection": sel, "prefit_iters": len(hist)})
    _write_json(d / "selection.json", sel)
    return {"checkpoint": str(d / "init.bin"), **sel}


def cmd_train(args, cfg: RunConfig) -> dict:
    bundle = io.load_bundle(args.bundle)
    tcfg = cfg.resolved_train()
    d = _run_dir(cfg, args)
    init = params = None
    if args.init:
        fs, params, meta = io.load_checkpoint(args.init)
        sel = meta.get("selection", {})
        depth_star = [a.depth_star for a in _alignments(bundle, cfg)]
        init = InitResult(fs, None, depth_star, [], RefFrameSelection(fs.ref_indices, sel.get("cost", float("nan"))))
    result = train(bundle, tcfg, run_dir=d, init=init, params=params)
    return {"checkpoint": str(d / "final.bin"), "report": str(d / "report.jsonl"), **result.report.eval}


def cmd_render(args, cfg: RunConfig) -> dict:
    bundle = io.load_bundle(args.bundle)
    fs, params, _ = io.load_checkpoint(args.checkpoint)
    d = _run_dir(cfg, args) / "renders"
    d.mkdir(parents=True, exist_ok=True)
    outs = []
    for t in args.t:
        out = render_frame(fs, params, interpolate_camera(bundle, t), t)
        stem = f"t_{t:.6f}"
        io.write_png(d / f"{stem}.png", out.rgb)
        io.save_depth(d / f"{stem}.depth.f32", out.depth)
        outs.append(str(d / f"{stem}.png"))
    return {"renders": outs}


def cmd_eval(args, cfg: RunConfig) -> dict:
    bundle = io.load_bundle(args.bundle)
    _, held = cfg.resolved_train().split(len(bundle))
    frames = held if not args.frames else [int(f) for f in args.frames]
    if args.images:
        per = {}
        for f in frames:
            pred = io.read_png(Path(args.images) / f"frame_{f:05d}.image.png")
            gt = bundle.frames[f].image
            per[f] = {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt)}
        res = {"frames": per, "mean_psnr": float(np.mean([v["psnr"] for v in per.values()])),
               "mean_ssim": float(np.mean([v["ssim"] for v in per.values()]))}
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --images")
        fs, params, _ = io.load_checkpoint(args.checkpoint)
        res = evaluate(fs, params, bundle, frames)
    res = {"frames": {str(k): v for k, v in res["frames"].items()}, "mean_psnr": res["mean_psnr"],
           "mean_ssim": res["mean_ssim"]}
    d = _run_dir(cfg, args)
    _write_json(d / "eval.json", res)
    return res


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refsplat", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic prior bundle with ground truth")
    p.add_argument("--out", help="bundle directory (default: <run dir>/bundle)")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("align-depth", help="aligned depth rasters and alignment report")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_align_depth)

    p = sub.add_parser("init", help="shape-aware initialization and deformation pre-fit")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("train", help="joint optimization")
    p.add_argument("--bundle", required=True)
    p.add_argument("--init", help="checkpoint from `init`; without it initialization runs first")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render RGB and depth at normalized times")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t", type=float, nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM on held-out frames")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--images", help="directory of frame_%%05d.image.png predictions instead of a checkpoint")
    p.add_argument("--frames", nargs="*", help="frame indices (default: held-out frames)")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    for sp in sub.choices.values():
        _add_config_flags(sp)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) if e.code in (0, None) else _fail(EXIT_CONFIG, "usage", "invalid arguments")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        result = args.fn(args, cfg)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", str(e))
    except DataError as e:
        return _fail(EXIT_DATA, "data", str(e))
    except NumericalFailure as e:
        return _fail(EXIT_NUMERIC, "numerical", str(e))
    except ValueError as e:
        return _fail(EXIT_CONFIG, "config", str(e))
    sys.stdout.write(json.dumps(result, sort_keys=True, default=float) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
