"""Synthetic dynamic scenes with known answers.

A small articulated "human" made of cylindrical parts stands in front of a
textured backdrop wall and is filmed by a camera sweeping a short arc. Every
part carries a regular uv lattice of surface points; these are both the
ground-truth Gaussians and the keypoint tracks. Images come from the
rasterizer; the two relative depth maps are affinely corrupted copies of the
true depth.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.typing import NDArray

from . import quaternion as quat
from .rasterizer import render_gaussians
from .scene import (INVALID_DEPTH, Camera, FramePriors, Gaussians, KeypointTrack, Observation, PriorBundle,
                    normalized_times)

MOTIONS = ("static", "rigid-translation", "sinusoidal-bend", "two-segment-articulation")


@dataclass
class SynthConfig:
    T: int = 16
    width: int = 64
    height: int = 64
    motion: str = "static"
    motion_amplitude: float = 0.4
    grid: int = 16  # uv lattice per part; human point count = parts * grid^2
    parts: int = 3
    wall_cols: int = 36
    wall_rows: int = 24
    orbit_radius: float = 2.5
    orbit_degrees: float = 15.0
    focal: float = 68.6
    depth_scale: float = 2.0
    depth_shift: float = 0.5
    depth_noise: float = 0.0
    depth_outliers: float = 0.0
    keypoint_dropout: float = 0.0
    sparse_fraction: float = 0.8
    occlusion_tol: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}, got {self.motion!r}")
        for name in ("depth_outliers", "keypoint_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not 0.0 < self.sparse_fraction <= 1.0:
            raise ValueError("sparse_fraction must lie in (0, 1]")
        if self.grid < 2 or not 1 <= self.parts <= 3:
            raise ValueError("need grid >= 2 and 1 <= parts <= 3")

    @property
    def n_human(self) -> int:
        return self.parts * self.grid * self.grid

    @property
    def n_background(self) -> int:
        return self.wall_cols * self.wall_rows


@dataclass
class GroundTruth:
    humans: list[Gaussians]  # per frame
    background: Gaussians
    trajectories: NDArray  # (T, K, 3) human point positions
    depth: list[NDArray]  # per-frame true depth rasters
    part_id: NDArray  # (K,)
    uv: NDArray  # (K, 2)
    config: dict = field(default_factory=dict)

    def scene_at(self, f: int) -> Gaussians:
        return Gaussians.concat([self.humans[f], self.background])

    @property
    def motion_magnitude(self) -> float:
        """Peak displacement of any human point from its frame-0 position."""
        return float(np.max(np.linalg.norm(self.trajectories - self.trajectories[:1], axis=2)))

    def to_json(self) -> dict:
        return {"config": self.config, "trajectories": self.trajectories.tolist(), "part_id": self.part_id.tolist(),
                "uv": self.uv.tolist(), "motion_magnitude": self.motion_magnitude,
                "background_mu": self.background.mu.tolist()}


# ---------------------------------------------------------------- geometry


def look_at(eye: NDArray, target: NDArray, up=(0.0, -1.0, 0.0)) -> NDArray:
    """World-to-camera transform with x right, y down, z forward."""
    eye, target = np.asarray(eye, float), np.asarray(target, float)
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, float))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    E = np.eye(4)
    E[:3, :3] = np.stack([x, y, z])
    E[:3, 3] = -E[:3, :3] @ eye
    return E


def orbit_cameras(cfg: SynthConfig) -> list[Camera]:
    K = np.array([[cfg.focal, 0, (cfg.width - 1) / 2], [0, cfg.focal, (cfg.height - 1) / 2], [0, 0, 1.0]])
    cams = []
    for t in normalized_times(cfg.T):
        a = np.deg2rad(cfg.orbit_degrees) * (2 * t - 1)
        eye = cfg.orbit_radius * np.array([np.sin(a), 0.0, -np.cos(a)])
        cams.append(Camera(K, look_at(eye, np.zeros(3)), cfg.width, cfg.height))
    return cams


# (center, radius, half length) of each part's axis; parts 2 and 3 form an arm hanging off the torso's side
_PARTS = [
    (np.array([0.0, 0.05, 0.0]), 0.2, 0.45),
    (np.array([0.32, -0.1, 0.0]), 0.07, 0.25),
    (np.array([0.32, 0.42, 0.0]), 0.07, 0.25),
]
_SHOULDER = np.array([0.32, -0.35, 0.0])
_ELBOW = np.array([0.32, 0.15, 0.0])


def human_rest(cfg: SynthConfig) -> tuple[NDArray, NDArray, NDArray, NDArray]:
    """Rest positions, colors, part ids and uv of the lattice points (part-major, u-major order)."""
    g = np.linspace(0.0, 1.0, cfg.grid)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    uu, vv = uu.ravel(), vv.ravel()
    pts, cols, pid, uvs = [], [], [], []
    for p in range(cfg.parts):
        c, r, h = _PARTS[p]
        ang = 2 * np.pi * uu * (cfg.grid - 1) / cfg.grid
        y = c[1] + (2 * vv - 1) * h
        pts.append(np.stack([c[0] + r * np.sin(ang), y, c[2] - r * np.cos(ang)], axis=1))
        hue = 0.25 + 0.2 * p
        cols.append(np.stack([0.55 + 0.3 * np.cos(ang) * (1 - hue), 0.35 + 0.25 * vv + 0.1 * p,
                              0.3 + hue * 0.5 + 0.15 * np.sin(ang)], axis=1))
        pid.append(np.full(len(uu), p + 1))
        uvs.append(np.stack([uu, vv], axis=1))
    return (np.concatenate(pts), np.clip(np.concatenate(cols), 0, 1), np.concatenate(pid),
            np.concatenate(uvs))


def _rot_z(angle: NDArray) -> NDArray:
    c, s = np.cos(angle), np.sin(angle)
    R = np.zeros(np.shape(angle) + (3, 3))
    R[..., 0, 0], R[..., 0, 1], R[..., 1, 0], R[..., 1, 1], R[..., 2, 2] = c, -s, s, c, 1.0
    return R


def deform_points(rest: NDArray, part: NDArray, motion: str, t: float, amp: float) -> tuple[NDArray, NDArray]:
    """Positions and local rotation matrices of the rest points at normalized time ``t``."""
    n = len(rest)
    if motion == "static":
        return rest.copy(), np.tile(np.eye(3), (n, 1, 1))
    if motion == "rigid-translation":
        return rest + np.array([amp * t, 0.0, 0.0]), np.tile(np.eye(3), (n, 1, 1))
    if motion == "sinusoidal-bend":
        # lateral sway growing quadratically from the bottom (y = 0.5) toward the top
        h = np.clip((0.5 - rest[:, 1]) / 1.0, 0.0, None)
        phase = np.sin(np.pi * t)
        out = rest.copy()
        out[:, 0] += amp * phase * h**2
        slope = -2 * amp * phase * h  # d x / d y
        return out, _rot_z(np.arctan(slope))
    if motion == "two-segment-articulation":
        out = rest.copy()
        R = np.tile(np.eye(3), (n, 1, 1))
        a1 = amp * 1.5 * np.sin(np.pi * t)
        arm = part >= 2
        R1 = _rot_z(np.array(-a1))
        out[arm] = (rest[arm] - _SHOULDER) @ R1.T + _SHOULDER
        R[arm] = R1
        fore = part == 3
        elbow = (_ELBOW - _SHOULDER) @ R1.T + _SHOULDER
        R2 = _rot_z(np.array(-a1 * 0.8)) @ R1
        out[fore] = (rest[fore] - _ELBOW) @ R2.T + elbow
        R[fore] = R2
        return out, R
    raise ValueError(f"unknown motion {motion!r}")


WALL_CENTER = np.array([0.0, 0.0, 1.2])
WALL_TILT = (np.deg2rad(25.0), np.deg2rad(15.0))  # about the y axis, then the x axis


def wall_rotation() -> NDArray:
    a, b = WALL_TILT
    Ry = np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])
    Rx = np.array([[1, 0, 0], [0, np.cos(b), -np.sin(b)], [0, np.sin(b), np.cos(b)]])
    return Rx @ Ry


def wall(cfg: SynthConfig) -> Gaussians:
    """A tilted backdrop so every view sees a spread of depths."""
    xs = np.linspace(-4.5, 4.5, cfg.wall_cols)
    ys = np.linspace(-3.0, 3.0, cfg.wall_rows)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    X, Y = X.ravel(), Y.ravel()
    n = len(X)
    R = wall_rotation()
    mu = np.stack([X, Y, np.zeros(n)], axis=1) @ R.T + WALL_CENTER
    spacing = max(xs[1] - xs[0], ys[1] - ys[0])
    col = np.stack([0.5 + 0.3 * np.sin(1.3 * X), 0.45 + 0.25 * np.cos(1.1 * Y), 0.6 + 0.2 * np.sin(0.7 * (X + Y))],
                   axis=1)
    scale = np.tile([0.75 * spacing, 0.75 * spacing, 0.02], (n, 1))
    g = Gaussians(mu, np.tile(quat.from_rotmat(R), (n, 1)), scale, np.full(n, 0.95), np.clip(col, 0, 1),
                  np.arange(100000, 100000 + n))
    # keep what the orbit sees, away from every camera
    seen = np.zeros(n, dtype=bool)
    near = np.zeros(n, dtype=bool)
    margin = 0.3 * cfg.width
    for cam in orbit_cameras(cfg):
        p, z = cam.project(mu)
        seen |= (p[:, 0] > -margin) & (p[:, 0] < cfg.width + margin) & (p[:, 1] > -margin) & \
            (p[:, 1] < cfg.height + margin) & (z > 0)
        near |= z < 1.5
    return g.subset(seen & ~near)


def plane_depth(cam: Camera, point: NDArray, normal: NDArray) -> NDArray:
    """Camera depth of the plane through ``point`` with ``normal`` at every pixel center."""
    H, W = cam.height, cam.width
    xs, ys = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    rays = np.stack([xs, ys, np.ones_like(xs)], axis=-1) @ np.linalg.inv(cam.K).T  # camera coords at z = 1
    d_world = rays @ cam.R  # world displacement per unit camera depth
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.dot(point - cam.center, normal) / (d_world @ normal)
    return np.where(np.isfinite(depth) & (depth > 0), depth, INVALID_DEPTH)


# ---------------------------------------------------------------- generation


def generate(cfg: SynthConfig) -> tuple[PriorBundle, GroundTruth]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    cams = orbit_cameras(cfg)
    times = normalized_times(cfg.T)
    rest, colors, part, uv = human_rest(cfg)
    K = len(rest)
    spacing = np.median(np.linalg.norm(rest[1:cfg.grid] - rest[:cfg.grid - 1], axis=1))
    spacing = min(spacing, 2 * np.pi * _PARTS[0][1] / cfg.grid)
    h_scale = 0.8 * spacing
    bg = wall(cfg)
    normal = wall_rotation()[:, 2]
    a_hum, b_hum = rng.uniform(0.6, 1.6), rng.uniform(-0.3, 0.3)

    humans, trajs, depths, frames = [], [], [], []
    vis = np.zeros((K, cfg.T), dtype=bool)
    pix = np.zeros((K, cfg.T, 2))
    for f, (cam, t) in enumerate(zip(cams, times)):
        X, R = deform_points(rest, part, cfg.motion, t, cfg.motion_amplitude)
        h = Gaussians(X, quat.from_rotmat(R), np.full((K, 3), h_scale), np.full(K, 0.95), colors, np.arange(K))
        humans.append(h)
        trajs.append(X)
        _, full = render_gaussians(Gaussians.concat([h, bg]), cam)
        _, hum = render_gaussians(h, cam)
        mask = hum.alpha > 0.5
        hum_depth = np.where(hum.alpha > 1e-6, hum.depth / np.maximum(hum.alpha, 1e-12), INVALID_DEPTH)
        true_depth = np.where(mask, hum_depth, plane_depth(cam, WALL_CENTER, normal))
        depths.append(true_depth)

        valid = true_depth > 0
        d_com = (true_depth - cfg.depth_shift) / cfg.depth_scale
        d_com = d_com + cfg.depth_noise * rng.standard_normal(d_com.shape)
        if cfg.depth_outliers > 0:
            out = rng.random(d_com.shape) < cfg.depth_outliers
            lo, hi = d_com[valid].min(), d_com[valid].max()
            d_com = np.where(out, rng.uniform(lo, hi, d_com.shape), d_com)
        d_com = np.where(valid & (d_com > 0), d_com, INVALID_DEPTH)
        d_hum = np.where(mask & valid, (true_depth - b_hum) / a_hum, INVALID_DEPTH)

        # sparse points: visible wall centers, random subset
        p, z = cam.project(bg.mu)
        inside = (p[:, 0] >= 0) & (p[:, 0] <= cfg.width - 1) & (p[:, 1] >= 0) & (p[:, 1] <= cfg.height - 1) & (z > 0)
        pi = np.clip(np.round(p).astype(int), 0, [cfg.width - 1, cfg.height - 1])
        unoccluded = inside & ~mask[pi[:, 1], pi[:, 0]]
        chosen = unoccluded & (rng.random(len(z)) < cfg.sparse_fraction)
        frames.append(FramePriors(float(t), np.clip(full.rgb, 0, 1), mask, d_com, d_hum, bg.mu[chosen].copy()))

        # keypoint visibility: inside the image and not behind the rendered surface
        p, z = cam.project(X)
        pix[:, f] = p
        inside = (p[:, 0] >= 0) & (p[:, 0] <= cfg.width - 1) & (p[:, 1] >= 0) & (p[:, 1] <= cfg.height - 1)
        pi = np.clip(np.round(p).astype(int), 0, [cfg.width - 1, cfg.height - 1])
        surface = true_depth[pi[:, 1], pi[:, 0]]
        vis[:, f] = inside & (surface > 0) & (z <= surface + cfg.occlusion_tol)
    if cfg.keypoint_dropout > 0:
        vis &= rng.random(vis.shape) >= cfg.keypoint_dropout

    tracks = [KeypointTrack(k, int(part[k]), uv[k].copy(),
                            [Observation(f, pix[k, f].copy(), bool(vis[k, f])) for f in range(cfg.T)])
              for k in range(K)]
    bundle = PriorBundle(cams, frames, tracks)
    gt = GroundTruth(humans, bg, np.stack(trajs), depths, part, uv, asdict(cfg))
    return bundle, gt


def match_tracks(tracks: list[KeypointTrack], gt: GroundTruth) -> NDArray:
    """Ground-truth point index of each track, matched on (part id, uv); -1 when nothing coincides."""
    out = np.full(len(tracks), -1, dtype=np.int64)
    for k, tr in enumerate(tracks):
        d = np.linalg.norm(gt.uv - np.asarray(tr.uv), axis=1)
        d[gt.part_id != tr.part_id] = np.inf
        j = int(np.argmin(d))
        if d[j] < 1e-9:
            out[k] = j
    return out


def trajectory_error(positions: NDArray, gt_index: NDArray, gt: GroundTruth, reference: str = "first") -> float:
    """Mean 3D error of predicted (T, M, 3) trajectories against ground truth.

    ``reference`` picks what is subtracted from both trajectories before
    comparing: "first" uses each point's frame-0 position, "mean" its temporal
    mean and "none" compares absolute positions. The first two discount a
    constant per-point offset such as surface versus center depth.
    """
    truth = gt.trajectories[:, gt_index]
    if reference == "first":
        positions, truth = positions - positions[:1], truth - truth[:1]
    elif reference == "mean":
        positions, truth = positions - positions.mean(axis=0), truth - truth.mean(axis=0)
    elif reference != "none":
        raise ValueError(f"unknown trajectory reference {reference!r}")
    return float(np.mean(np.linalg.norm(positions - truth, axis=2)))
