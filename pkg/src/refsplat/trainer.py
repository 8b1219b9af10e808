"""Joint optimization of the reference-frame Gaussians and the deformation network.

Phase 1 fits only the network to the lifted keypoints. Phase 2 renders the
deformed scene at a training frame, back-propagates the image, depth,
rigidity, freeze and weight losses through the rasterizer and the blend into
both the reference-frame Gaussians and the network, and steps one Adam
instance with per-group learning rates. Density control runs on a fixed
interval and is applied identically to every reference frame.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from . import deform_net
from .adam import Adam
from .deform_field import deform_backward, deform_human, weight_mask
from .deform_net import DeformNetParams, EncodingConfig
from .densify import DensifyConfig, densify_sync
from .io import save_checkpoint
from .metrics import psnr, ssim
from .rasterizer import RenderOutput, project, render, render_backward
from .scene import Gaussians, GaussianFrameSet, PriorBundle
from .shape_init import (InitConfig, InitResult, PrefitConfig, discard_unreferenced, initialize,
                         prefit_deformation)

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    def __init__(self, iteration: int, checkpoint: str | None):
        super().__init__(f"non-finite loss at iteration {iteration}; last good checkpoint: {checkpoint}")
        self.iteration = iteration
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    iters_total: int = 30000
    iters_prefit: int = 5000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_net: float = 1e-4
    lambda_color: float = 0.8
    lambda_dssim: float = 0.2
    lambda_depth: float = 0.05
    lambda_rigid: float = 0.01
    lambda_weight: float = 0.01
    n_freeze: int = 10
    densify_interval: int = 500
    densify_until: float = 0.6
    densify_grad: float = 2e-4
    split_fraction: float = 0.01
    prune_opacity: float = 5e-3
    max_human: int | None = None
    k_nn: int = 8
    net_depth: int = 8
    net_width: int = 256
    net_skip: int = 4
    holdout_every: int = 8
    holdout_offset: int = 4
    checkpoint_every: int = 1000
    seed: int = 0
    init: InitConfig = field(default_factory=InitConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    prefit_lr: float = 1e-4
    use_prefit: bool = True

    def validate(self) -> None:
        rates = ("lr_position", "lr_position_final", "lr_rotation", "lr_scale", "lr_opacity", "lr_color", "lr_net",
                 "prefit_lr")
        for name in rates:
            if not getattr(self, name) > 0:
                raise ValueError(f"learning rate {name} must be > 0")
        if not 0 <= self.iters_prefit < self.iters_total:
            raise ValueError("need 0 <= iters_prefit < iters_total")
        if self.n_freeze < 1:
            raise ValueError("n_freeze must be >= 1")

    def split(self, T: int) -> tuple[list[int], list[int]]:
        """(training frames, held-out frames)."""
        held = [i for i in range(T) if self.holdout_every > 0 and i % self.holdout_every == self.holdout_offset]
        return [i for i in range(T) if i not in held], held


# ---------------------------------------------------------------- losses


def freeze_weight(epoch: float, n_freeze: int) -> float:
    """Warm-up coefficient decaying linearly from 1 at epoch 0 to 0 at ``n_freeze``."""
    return 1.0 - min(epoch, n_freeze) / n_freeze


@dataclass
class LossTerms:
    color: float = 0.0
    dssim: float = 0.0
    depth: float = 0.0
    rigid: float = 0.0
    freeze: float = 0.0
    weight: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def image_losses(out: RenderOutput, image: NDArray, depth_star: NDArray | None,
                 cfg: TrainConfig) -> tuple[LossTerms, NDArray, NDArray]:
    """Weighted L1 color, D-SSIM and gated depth loss with their gradients on the rendered rgb and depth."""
    diff = out.rgb - image
    l1 = float(np.mean(np.abs(diff)))
    s, g_ssim = ssim(out.rgb, image, return_grad=True)
    g_rgb = cfg.lambda_color * np.sign(diff) / diff.size - cfg.lambda_dssim * g_ssim
    g_depth = np.zeros_like(out.depth)
    ldepth = 0.0
    if depth_star is not None and cfg.lambda_depth > 0:
        gate = (out.alpha > 0.5) & (depth_star >= 0)
        n = int(gate.sum())
        if n:
            dd = out.depth - depth_star
            ldepth = float(np.abs(dd[gate]).mean())
            g_depth[gate] = cfg.lambda_depth * np.sign(dd[gate]) / n
    terms = LossTerms(color=l1, dssim=1.0 - s, depth=ldepth)
    return terms, g_rgb, g_depth


@dataclass
class RigidGraph:
    i: NDArray
    j: NDArray
    rest: NDArray

    @classmethod
    def build(cls, positions: NDArray, k_nn: int) -> RigidGraph:
        n = len(positions)
        if n < 2:
            return cls(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
        k = min(k_nn + 1, n)
        _, nbr = cKDTree(positions).query(positions, k=k)
        i = np.repeat(np.arange(n), k - 1)
        j = nbr[:, 1:].ravel()
        return cls(i, j, np.linalg.norm(positions[i] - positions[j], axis=1))


def rigid_loss(mu: NDArray, graph: RigidGraph) -> tuple[float, NDArray]:
    """Mean squared change of neighbor distances and its gradient on ``mu``."""
    g = np.zeros_like(mu)
    if len(graph.i) == 0:
        return 0.0, g
    d = mu[graph.i] - mu[graph.j]
    n = np.linalg.norm(d, axis=1)
    r = n - graph.rest
    loss = float(np.mean(r**2))
    coef = (2 * r / len(r) / np.maximum(n, 1e-12))[:, None] * d
    np.add.at(g, graph.i, coef)
    np.add.at(g, graph.j, -coef)
    return loss, g


@dataclass
class FreezeTargets:
    """Deformed positions per training frame, cached when joint optimization starts."""

    positions: dict[int, NDArray]
    row_of: dict[int, int]  # lineage id -> row in the cached arrays

    @classmethod
    def capture(cls, frame_set: GaussianFrameSet, params: DeformNetParams, frames, times) -> FreezeTargets:
        pos = {int(f): deform_human(frame_set, params, float(times[f]), record=False)[0].mu.copy() for f in frames}
        return cls(pos, {int(l): r for r, l in enumerate(frame_set.frames[0].lineage)})

    def rows_for(self, frame_set: GaussianFrameSet) -> NDArray:
        return np.array([self.row_of.get(frame_set.source_of(l, self.row_of), -1)
                         for l in frame_set.frames[0].lineage], dtype=np.int64)


def freeze_loss(mu: NDArray, target: NDArray, rows: NDArray, zeta: float) -> tuple[float, NDArray]:
    """zeta * sum ||mu - target[src]||^2 over Gaussians with a known source; exactly zero once zeta is 0."""
    g = np.zeros_like(mu)
    if zeta <= 0.0:
        return 0.0, g
    ok = rows >= 0
    d = mu[ok] - target[rows[ok]]
    g[ok] = 2 * zeta * d
    return float(zeta * np.sum(d**2)), g


@dataclass
class FrameContext:
    frame: int
    t: float
    camera: object
    image: NDArray
    depth_star: NDArray | None


def loss_total(frame_set: GaussianFrameSet, params: DeformNetParams, ctx: FrameContext, cfg: TrainConfig,
               epoch: float = math.inf, graph: RigidGraph | None = None, freeze: FreezeTargets | None = None,
               freeze_rows: NDArray | None = None, record: bool = True):
    """Render frame ``ctx`` and assemble every loss term.

    Returns (terms, state) where ``state`` carries what ``loss_backward`` needs.
    """
    human, rec = deform_human(frame_set, params, ctx.t, record=record)
    scene = Gaussians.concat([human, frame_set.background])
    proj = project(scene, ctx.camera)
    out = render(proj, ctx.camera)
    terms, g_rgb, g_depth = image_losses(out, ctx.image, ctx.depth_star, cfg)
    g_mu_extra = np.zeros_like(human.mu)
    if graph is not None and cfg.lambda_rigid > 0:
        lr, gr = rigid_loss(human.mu, graph)
        terms.rigid = lr
        g_mu_extra += cfg.lambda_rigid * gr
    if freeze is not None and ctx.frame in freeze.positions:
        rows = freeze.rows_for(frame_set) if freeze_rows is None else freeze_rows
        lf, gf = freeze_loss(human.mu, freeze.positions[ctx.frame], rows, freeze_weight(epoch, cfg.n_freeze))
        terms.freeze = lf
        g_mu_extra += gf
    wm = weight_mask(frame_set, ctx.frame)
    terms.weight = float(np.sum(wm * rec.out.w**2))
    terms.total = (cfg.lambda_color * terms.color + cfg.lambda_dssim * terms.dssim + cfg.lambda_depth * terms.depth
                   + cfg.lambda_rigid * terms.rigid + terms.freeze + cfg.lambda_weight * terms.weight)
    state = dict(rec=rec, proj=proj, out=out, g_rgb=g_rgb, g_depth=g_depth, g_mu_extra=g_mu_extra,
                 g_w=2 * cfg.lambda_weight * wm * rec.out.w, n_human=len(human))
    return terms, state


def loss_backward(state: dict):
    """Gradients of the total loss: (rasterizer grads for the whole scene, reference-frame/net grads)."""
    rg = render_backward(state["proj"], state["out"], state["g_rgb"], state["g_depth"])
    n = state["n_human"]
    fg = deform_backward(state["rec"], rg.mu[:n] + state["g_mu_extra"], rg.rot[:n], rg.scale[:n],
                         g_w_extra=state["g_w"])
    return rg, fg


# ---------------------------------------------------------------- optimizer plumbing


def _logit(o: NDArray) -> NDArray:
    o = np.clip(o, 1e-6, 1 - 1e-6)
    return np.log(o / (1 - o))


def _sigmoid(x: NDArray) -> NDArray:
    return 1.0 / (1.0 + np.exp(-x))


def position_lr(cfg: TrainConfig, step: int, n_steps: int) -> float:
    """Log-linear decay from the initial to the final position rate."""
    frac = min(max(step / max(n_steps, 1), 0.0), 1.0)
    return float(np.exp((1 - frac) * np.log(cfg.lr_position) + frac * np.log(cfg.lr_position_final)))


def _step_gaussians(adam: Adam, prefix: str, mu, rot, scale, opacity, color, g_mu, g_rot, g_scale, g_op, g_col,
                    cfg: TrainConfig, lr_pos: float):
    mu = adam.step(prefix + "mu", mu, g_mu, lr_pos)
    rot = adam.step(prefix + "rot", rot, g_rot, cfg.lr_rotation)
    rot = rot / np.linalg.norm(rot, axis=-1, keepdims=True)
    log_s = adam.step(prefix + "log_scale", np.log(scale), g_scale * scale, cfg.lr_scale)
    scale = np.exp(log_s)
    logit = adam.step(prefix + "opacity", _logit(opacity), g_op * opacity * (1 - opacity), cfg.lr_opacity)
    opacity = _sigmoid(logit)
    color = np.clip(adam.step(prefix + "color", color, g_col, cfg.lr_color), 0.0, 1.0)
    return mu, rot, scale, opacity, color


def scene_extent(frame_set: GaussianFrameSet) -> float:
    pts = np.concatenate([frame_set.frames[0].mu, frame_set.background.mu]) if len(frame_set.background) \
        else frame_set.frames[0].mu
    c = pts.mean(axis=0)
    return float(np.max(np.linalg.norm(pts - c, axis=1))) if len(pts) else 1.0


# ---------------------------------------------------------------- training loop


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    eval: dict = field(default_factory=dict)
    selection: dict = field(default_factory=dict)

    def log(self, rec: dict) -> None:
        self.records.append(rec)

    def losses(self, key: str = "total") -> list[float]:
        return [r["loss"][key] for r in self.records if "loss" in r]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
            fh.write(json.dumps({"eval": self.eval, "selection": self.selection}, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    frame_set: GaussianFrameSet
    params: DeformNetParams
    report: TrainReport
    init: InitResult


def evaluate(frame_set: GaussianFrameSet, params: DeformNetParams, bundle: PriorBundle, frames) -> dict:
    """Per-frame PSNR/SSIM of renders against the bundle images, plus means."""
    per = {}
    for f in frames:
        img = render_frame(frame_set, params, bundle.cameras[f], float(bundle.times[f])).rgb
        per[int(f)] = {"psnr": psnr(img, bundle.frames[f].image), "ssim": ssim(img, bundle.frames[f].image)}
    vals = list(per.values())
    return {"frames": per, "mean_psnr": float(np.mean([v["psnr"] for v in vals])) if vals else float("nan"),
            "mean_ssim": float(np.mean([v["ssim"] for v in vals])) if vals else float("nan")}


def render_frame(frame_set: GaussianFrameSet, params: DeformNetParams, camera, t: float) -> RenderOutput:
    human, _ = deform_human(frame_set, params, t, record=False)
    scene = Gaussians.concat([human, frame_set.background])
    return render(project(scene, camera), camera)


def build_initial(bundle: PriorBundle, cfg: TrainConfig, train_frames) -> tuple[InitResult, DeformNetParams]:
    init = initialize(bundle, cfg.init, train_frames=train_frames)
    init = discard_unreferenced(init)
    params = deform_net.init_params(init.frame_set.B, cfg.encoding, cfg.net_depth, cfg.net_width,
                                    (cfg.net_skip,) if 0 < cfg.net_skip < cfg.net_depth else (), cfg.seed)
    return init, params


def train(bundle: PriorBundle, cfg: TrainConfig, run_dir=None, init: InitResult | None = None,
          params: DeformNetParams | None = None) -> TrainResult:
    """Both training phases; phase 1 is skipped when ``init``/``params`` come already pre-fitted or prefit is off."""
    cfg.validate()
    T = len(bundle)
    train_frames, held = cfg.split(T)
    rng = np.random.default_rng(cfg.seed)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    report = TrainReport()
    adam = Adam()
    prefit_done = init is not None and params is not None
    if not prefit_done:
        init, params = build_initial(bundle, cfg, train_frames)
    fs = init.frame_set
    report.selection = {"indices": fs.ref_indices.tolist(), "cost": init.selection.cost}
    times = bundle.times

    it = 0
    if not prefit_done and cfg.use_prefit and cfg.iters_prefit > 0:
        pcfg = PrefitConfig(iters=cfg.iters_prefit, lr=cfg.prefit_lr, seed=cfg.seed)
        params, hist = prefit_deformation(fs, params, init.targets, pcfg, frames=train_frames, adam=adam)
        for h in hist:
            report.log({"iter": it, "phase": 1, "loss": {"deform": h, "total": h}, "counts": [len(g) for g in fs.frames]})
            it += 1
    elif not prefit_done:
        it = cfg.iters_prefit
    phase2_start = it
    n_phase2 = cfg.iters_total - phase2_start

    graph = RigidGraph.build(fs.frames[0].mu, cfg.k_nn)
    freeze = FreezeTargets.capture(fs, params, train_frames, times)
    freeze_rows = freeze.rows_for(fs)
    extent = scene_extent(fs)
    dcfg = DensifyConfig(cfg.densify_grad, cfg.split_fraction, cfg.prune_opacity, cfg.k_nn, cfg.max_human)
    densify_stop = int(cfg.densify_until * cfg.iters_total)
    grad_accum = np.zeros(fs.n_human)
    denom = np.zeros(fs.n_human)
    last_ckpt = None
    order: list[int] = []
    epoch = 0
    steps_in_phase = 0
    while it < cfg.iters_total:
        if not order:
            if steps_in_phase:
                epoch += 1
            order = list(rng.permutation(train_frames))[::-1]
        f = int(order.pop())
        fr = bundle.frames[f]
        ctx = FrameContext(f, float(times[f]), bundle.cameras[f], fr.image, init.depth_star[f])
        terms, state = loss_total(fs, params, ctx, cfg, epoch, graph, freeze, freeze_rows)
        if not np.isfinite(terms.total):
            raise NumericalFailure(it, last_ckpt)
        rg, fgr = loss_backward(state)
        n = fs.n_human
        lr_pos = position_lr(cfg, steps_in_phase, n_phase2)

        # human reference frames: per-frame geometry, shared appearance
        mu, rot, scale, op, col = _step_gaussians(
            adam, "human.", fs.stacked("mu"), fs.stacked("rot"), fs.stacked("scale"), fs.frames[0].opacity,
            fs.frames[0].color, fgr.mu, fgr.rot, fgr.scale, rg.opacity[:n], rg.color[:n], cfg, lr_pos)
        fs.set_stacked("mu", mu)
        fs.set_stacked("rot", rot)
        fs.set_stacked("scale", scale)
        for g in fs.frames:
            g.opacity, g.color = op.copy(), col.copy()
        bg = fs.background
        if len(bg):
            bg.mu, bg.rot, bg.scale, bg.opacity, bg.color = _step_gaussians(
                adam, "background.", bg.mu, bg.rot, bg.scale, bg.opacity, bg.color, rg.mu[n:], rg.rot[n:],
                rg.scale[n:], rg.opacity[n:], rg.color[n:], cfg, lr_pos)
        for name, arr in params.named_arrays():
            params.set_named(name, adam.step("net." + name, arr, fgr.net[name], cfg.lr_net))
        params.bump()

        # screen-space gradient statistics in normalized device units
        cam = bundle.cameras[f]
        g2 = rg.mu2d[:n] * np.array([cam.width / 2.0, cam.height / 2.0])
        gn = np.linalg.norm(g2, axis=1)
        grad_accum += gn
        denom += gn > 0

        it += 1
        steps_in_phase += 1
        report.log({"iter": it - 1, "phase": 2, "epoch": epoch, "frame": f, "loss": terms.as_dict(),
                    "counts": [len(g) for g in fs.frames], "background": len(fs.background)})

        if steps_in_phase % cfg.densify_interval == 0 and it < densify_stop:
            res = densify_sync(fs, grad_accum, denom, extent, dcfg, rng)
            for name in ("mu", "rot", "log_scale", "opacity", "color"):
                adam.remap_rows("human." + name, res.source_rows)
            graph = RigidGraph.build(fs.frames[0].mu, cfg.k_nn)
            freeze_rows = freeze.rows_for(fs)
            grad_accum = np.zeros(fs.n_human)
            denom = np.zeros(fs.n_human)
            report.log({"iter": it - 1, "densify": {"clone": res.n_clone, "split": res.n_split,
                                                    "prune": res.n_prune, "fallback": res.n_fallback},
                        "counts": [len(g) for g in fs.frames]})
        if run_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            last_ckpt = str(run_dir / f"checkpoint_{it:06d}.bin")
            save_checkpoint(last_ckpt, fs, params, {"iter": it})
    fs.check_synchronized()
    report.eval = evaluate(fs, params, bundle, held)
    if run_dir is not None:
        save_checkpoint(run_dir / "final.bin", fs, params, {"iter": it})
        report.write_jsonl(run_dir / "report.jsonl")
    return TrainResult(fs, params, report, init)


def deformed_trajectories(frame_set: GaussianFrameSet, params: DeformNetParams, times) -> NDArray:
    """(T, N, 3) deformed human positions at each time."""
    return np.stack([deform_human(frame_set, params, float(t), record=False)[0].mu for t in times])
