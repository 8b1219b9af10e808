"""Core data types: Gaussians, cameras, per-frame priors, keypoint tracks and
the multi-reference-frame container."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from . import quaternion as quat

# Invalid-depth sentinel used by every depth raster.
INVALID_DEPTH = -1.0


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class Gaussians:
    """Struct-of-arrays set of N anisotropic 3D Gaussians."""

    mu: NDArray[np.float64]  # (N, 3)
    rot: NDArray[np.float64]  # (N, 4) unit quaternions, w first
    scale: NDArray[np.float64]  # (N, 3) per-axis std devs
    opacity: NDArray[np.float64]  # (N,)
    color: NDArray[np.float64]  # (N, 3)
    lineage: NDArray[np.int64]  # (N,)

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(-1, 4)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(-1, 3)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(-1)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(-1, 3)
        self.lineage = np.asarray(self.lineage, dtype=np.int64).reshape(-1)
        n = len(self.mu)
        for name in ("rot", "scale", "opacity", "color", "lineage"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"Gaussians.{name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.mu)

    @classmethod
    def empty(cls) -> Gaussians:
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
                   np.zeros(0, dtype=np.int64))

    @classmethod
    def concat(cls, parts: list[Gaussians]) -> Gaussians:
        parts = [p for p in parts if len(p)] or [cls.empty()]
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("mu", "rot", "scale", "opacity", "color", "lineage")))

    def subset(self, idx) -> Gaussians:
        return Gaussians(self.mu[idx], self.rot[idx], self.scale[idx], self.opacity[idx], self.color[idx],
                         self.lineage[idx])

    def copy(self) -> Gaussians:
        return Gaussians(self.mu.copy(), self.rot.copy(), self.scale.copy(), self.opacity.copy(),
                         self.color.copy(), self.lineage.copy())

    def normalize_rotations(self) -> None:
        self.rot = quat.normalize(self.rot)

    def validate(self, tol: float = 1e-9) -> None:
        if len(self) == 0:
            return
        if np.any(np.abs(np.linalg.norm(self.rot, axis=1) - 1.0) > tol):
            raise ValueError("quaternion not unit-norm")
        if np.any(self.scale <= 0):
            raise ValueError("non-positive scale")
        if np.any((self.opacity < 0) | (self.opacity > 1)):
            raise ValueError("opacity outside [0, 1]")
        if np.any((self.color < 0) | (self.color > 1)):
            raise ValueError("color outside [0, 1]")


def covariance_of(rot: NDArray, scale: NDArray) -> NDArray:
    """R diag(scale^2) R^T for (..., 4) quaternions and (..., 3) scales."""
    R = quat.to_rotmat(rot)
    s2 = np.asarray(scale, dtype=np.float64) ** 2
    return np.einsum("...ij,...j,...kj->...ik", R, s2, R)


@dataclass
class Camera:
    """Pinhole camera; ``E`` maps world to camera coordinates."""

    K: NDArray[np.float64]
    E: NDArray[np.float64]
    width: int
    height: int

    def __post_init__(self) -> None:
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.E = np.asarray(self.E, dtype=np.float64).reshape(4, 4)
        self.width = int(self.width)
        self.height = int(self.height)

    def validate(self) -> None:
        K = self.K
        if abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0 or K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] != 1:
            raise DataError("K must be upper-triangular with positive focal lengths and K[2,2] = 1")
        R = self.E[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or np.linalg.det(R) < 0:
            raise DataError("rotation block of E is not orthonormal")
        if self.width <= 0 or self.height <= 0:
            raise DataError("camera dimensions must be positive")

    @property
    def R(self) -> NDArray:
        return self.E[:3, :3]

    @property
    def t(self) -> NDArray:
        return self.E[:3, 3]

    @property
    def center(self) -> NDArray:
        return -self.R.T @ self.t

    def world_to_camera(self, X: NDArray) -> NDArray:
        return np.asarray(X) @ self.R.T + self.t

    def project(self, X: NDArray) -> tuple[NDArray, NDArray]:
        """Pixel coordinates (..., 2) and camera depth (...) of world points."""
        pc = self.world_to_camera(X)
        z = pc[..., 2]
        uvw = pc @ self.K.T
        return uvw[..., :2] / z[..., None], z

    def unproject(self, pixel: NDArray, depth: NDArray) -> NDArray:
        """World points for pixel coordinates at camera-space depth ``z``."""
        pixel = np.asarray(pixel, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        h = np.concatenate([pixel, np.ones(pixel.shape[:-1] + (1,))], axis=-1)
        rays = h @ np.linalg.inv(self.K).T
        pc = rays * depth[..., None]
        return (pc - self.t) @ self.R


@dataclass
class FramePriors:
    t: float
    image: NDArray[np.float64]  # (H, W, 3) in [0, 1]
    mask: NDArray[np.bool_]  # (H, W)
    depth_com: NDArray[np.float64]  # (H, W)
    depth_hum: NDArray[np.float64]  # (H, W), sentinel outside the mask
    sparse_points: NDArray[np.float64]  # (P, 3) world points visible in this frame

    def validate(self, camera: Camera, where: str = "") -> None:
        shape = (camera.height, camera.width)
        for name in ("image", "mask", "depth_com", "depth_hum"):
            arr = getattr(self, name)
            if arr.shape[:2] != shape:
                raise DataError(f"{where}{name}: dimensions {arr.shape[:2]} do not match camera {shape}")
        if np.any(self.depth_hum[~self.mask] != INVALID_DEPTH):
            raise DataError(f"{where}depth_hum: valid depth outside the human mask")


@dataclass
class Observation:
    frame: int
    pixel: NDArray[np.float64]
    visible: bool


@dataclass
class KeypointTrack:
    kp_id: int
    part_id: int
    uv: NDArray[np.float64]
    obs: list[Observation]


@dataclass
class VisibilityMatrix:
    vis: NDArray[np.bool_]  # (keypoints, frames)

    @classmethod
    def from_tracks(cls, tracks: list[KeypointTrack], n_frames: int) -> VisibilityMatrix:
        vis = np.zeros((len(tracks), n_frames), dtype=bool)
        for k, tr in enumerate(tracks):
            for ob in tr.obs:
                vis[k, ob.frame] = ob.visible
        return cls(vis)


@dataclass
class PriorBundle:
    cameras: list[Camera]
    frames: list[FramePriors]
    tracks: list[KeypointTrack]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def times(self) -> NDArray:
        return np.array([f.t for f in self.frames])

    def validate(self) -> None:
        if len(self.cameras) != len(self.frames):
            raise DataError("camera count does not match frame count")
        for i, (cam, fr) in enumerate(zip(self.cameras, self.frames)):
            cam.validate()
            fr.validate(cam, where=f"frame {i}: ")
        for tr in self.tracks:
            for ob in tr.obs:
                if not 0 <= ob.frame < len(self.frames):
                    raise DataError(f"keypoint {tr.kp_id}: observation frame {ob.frame} out of range")
                cam = self.cameras[ob.frame]
                x, y = ob.pixel
                if ob.visible and not (0 <= x <= cam.width - 1 and 0 <= y <= cam.height - 1):
                    raise DataError(f"keypoint {tr.kp_id}: visible pixel {tuple(ob.pixel)} outside image")


def normalized_times(n_frames: int) -> NDArray:
    return np.arange(n_frames) / max(n_frames - 1, 1)


@dataclass
class GaussianFrameSet:
    """Human Gaussians in B reference frames plus shared static background.

    Every frame holds the same lineage ids in the same order. ``visibility``
    is an (N, T) flag array per human Gaussian over all video frames; its
    columns at ``ref_indices`` are the per-reference-frame flags.
    """

    ref_times: NDArray[np.float64]
    ref_indices: NDArray[np.int64]
    frames: list[Gaussians]
    background: Gaussians
    visibility: NDArray[np.bool_]
    lineage: dict[int, int] = field(default_factory=dict)
    next_id: int = 0

    def __post_init__(self) -> None:
        self.ref_times = np.asarray(self.ref_times, dtype=np.float64)
        self.ref_indices = np.asarray(self.ref_indices, dtype=np.int64)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if len(self.frames) and self.next_id == 0:
            ids = [int(g.lineage.max()) for g in self.frames if len(g)]
            if len(self.background):
                ids.append(int(self.background.lineage.max()))
            self.next_id = max(ids, default=-1) + 1

    @property
    def B(self) -> int:
        return len(self.frames)

    @property
    def n_human(self) -> int:
        return len(self.frames[0]) if self.frames else 0

    @property
    def ref_visibility(self) -> NDArray[np.bool_]:
        return self.visibility[:, self.ref_indices]

    def stacked(self, name: str) -> NDArray:
        """(N, B, ...) array of a per-frame field."""
        return np.stack([getattr(g, name) for g in self.frames], axis=1)

    def set_stacked(self, name: str, value: NDArray) -> None:
        for i, g in enumerate(self.frames):
            setattr(g, name, np.array(value[:, i]))

    def source_of(self, lineage_id: int, known) -> int:
        """Follow the lineage map until an id in ``known`` is reached."""
        lid = int(lineage_id)
        seen = set()
        while lid not in known and lid in self.lineage and lid not in seen:
            seen.add(lid)
            lid = self.lineage[lid]
        return lid

    def check_synchronized(self) -> None:
        if not self.frames:
            return
        ref = Counter(self.frames[0].lineage.tolist())
        for i, g in enumerate(self.frames[1:], start=1):
            if Counter(g.lineage.tolist()) != ref:
                raise AssertionError(f"reference frame {i} lineage multiset differs from frame 0")
        if len(self.visibility) != len(self.frames[0]):
            raise AssertionError("visibility rows do not match Gaussian count")
        if len(self.ref_times) and (np.any(np.diff(self.ref_times) <= 0) or self.ref_times[0] < 0
                                    or self.ref_times[-1] > 1):
            raise AssertionError("ref_times must be strictly increasing within [0, 1]")

    def copy(self) -> GaussianFrameSet:
        return GaussianFrameSet(self.ref_times.copy(), self.ref_indices.copy(), [g.copy() for g in self.frames],
                                self.background.copy(), self.visibility.copy(), dict(self.lineage), self.next_id)
