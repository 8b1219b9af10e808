"""Shape-aware initialization.

Depth alignment (robust scale/shift for the generic depth, quantile affine for
the human depth, masked composition), keypoint lifting, Procrustes rotations,
reference-frame selection, construction of the initial frame set, and the
deformation pre-fit against lifted keypoints.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import cKDTree

from . import deform_net
from . import quaternion as quat
from .adam import Adam
from .deform_field import substitute_invisible, weight_mask
from .deform_net import DeformNetParams
from .scene import (INVALID_DEPTH, Camera, DataError, FramePriors, Gaussians, GaussianFrameSet, KeypointTrack,
                    Observation, PriorBundle, VisibilityMatrix)

log = logging.getLogger(__name__)

MAX_COMBINATIONS = 10**7


class InsufficientDataError(DataError):
    pass


class DegenerateGeometryError(DataError):
    pass


# ---------------------------------------------------------------- depth alignment


@dataclass
class DepthAlignment:
    s_star: float
    t_star: float
    a_star: float = 1.0
    b_star: float = 0.0
    inlier_ratio: float = 1.0
    degenerate: bool = False

    def to_json(self) -> dict:
        return {"s_star": self.s_star, "t_star": self.t_star, "a_star": self.a_star, "b_star": self.b_star,
                "inlier_ratio": self.inlier_ratio, "degenerate": self.degenerate}


def sample_bilinear(raster: NDArray, pixels: NDArray) -> tuple[NDArray, NDArray]:
    """Bilinear samples of an (H, W) or (H, W, C) raster at (x, y) pixel coordinates.

    Returns values and a validity flag; a sample is invalid when it falls outside
    the image or any tap holds the invalid-depth sentinel (2D rasters only).
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    H, W = raster.shape[:2]
    x, y = pixels[:, 0], pixels[:, 1]
    inside = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1) & np.isfinite(x) & np.isfinite(y)
    xc = np.clip(np.where(inside, x, 0), 0, W - 1)
    yc = np.clip(np.where(inside, y, 0), 0, H - 1)
    x0 = np.minimum(np.floor(xc).astype(int), W - 1)
    y0 = np.minimum(np.floor(yc).astype(int), H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx, fy = xc - x0, yc - y0
    taps = [raster[y0, x0], raster[y0, x1], raster[y1, x0], raster[y1, x1]]
    wts = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    if raster.ndim == 3:
        wts = [w[:, None] for w in wts]
    val = sum(w * tp for w, tp in zip(wts, taps))
    valid = inside.copy()
    if raster.ndim == 2:
        for tp in taps:
            valid &= tp >= 0
    return val, valid


def _order_seed(x: NDArray, y: NDArray, seed: int) -> tuple[NDArray, NDArray, np.random.Generator]:
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    digest = hashlib.sha256(np.ascontiguousarray(np.stack([xs, ys])).tobytes()).digest()
    key = int.from_bytes(digest[:8], "little") ^ (seed & 0xFFFFFFFFFFFFFFFF)
    return xs, ys, np.random.default_rng(key)


def _irls_l1(x: NDArray, y: NDArray, s: float, t: float, iters: int) -> tuple[float, float]:
    A = np.stack([x, np.ones_like(x)], axis=1)
    for _ in range(iters):
        r = np.abs(s * x + t - y)
        w = 1.0 / np.maximum(r, 1e-9)
        Aw = A * w[:, None]
        try:
            s, t = np.linalg.solve(A.T @ Aw, Aw.T @ y)
        except np.linalg.LinAlgError:
            break
    return float(s), float(t)


def ransac_fit(x: NDArray, y: NDArray, iters: int = 2000, thresh_frac: float = 0.02, irls_iters: int = 10,
               seed: int = 0) -> DepthAlignment:
    """Robust fit of y ~ s x + t with s > 0 from paired samples.

    Two-point hypotheses score by inlier count (|residual| below
    ``thresh_frac * median(y)``); the winner is refit by iteratively
    reweighted least squares toward the L1 optimum on its consensus set.
    The generator is keyed on the sorted sample content, so the result does
    not depend on sample order.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) < 2:
        raise InsufficientDataError(f"scale/shift alignment needs at least 2 samples, got {len(x)}")
    xs, ys, rng = _order_seed(x, y, seed)
    n = len(xs)
    thr = thresh_frac * float(np.median(ys))
    i = rng.integers(0, n, iters)
    j = rng.integers(0, n - 1, iters)
    j = j + (j >= i)
    dx = xs[i] - xs[j]
    ok = np.abs(dx) > 1e-12 * max(1.0, float(np.max(np.abs(xs))))
    s = np.where(ok, (ys[i] - ys[j]) / np.where(ok, dx, 1.0), 0.0)
    ok &= s > 0
    if not np.any(ok):
        raise DegenerateGeometryError("no valid scale/shift hypothesis: samples are rank deficient")
    s, i = s[ok], i[ok]
    t = ys[i] - s * xs[i]
    best, best_key = -1, None
    for start in range(0, len(s), 256):
        res = np.abs(s[start:start + 256, None] * xs[None, :] + t[start:start + 256, None] - ys[None, :])
        inl = res < thr
        counts = inl.sum(axis=1)
        cost = np.where(inl, res, 0.0).sum(axis=1)
        for k in range(len(counts)):
            key = (-int(counts[k]), float(cost[k]))
            if best_key is None or key < best_key:
                best, best_key = start + k, key
    s0, t0 = float(s[best]), float(t[best])
    inliers = np.abs(s0 * xs + t0 - ys) < thr
    if inliers.sum() >= 2 and np.ptp(xs[inliers]) > 0:
        A = np.stack([xs[inliers], np.ones(inliers.sum())], axis=1)
        ls, lt = np.linalg.lstsq(A, ys[inliers], rcond=None)[0]
        s1, t1 = _irls_l1(xs[inliers], ys[inliers], float(ls), float(lt), irls_iters)
        if s1 > 0 and np.isfinite(s1) and np.isfinite(t1):
            s0, t0 = s1, t1
    ratio = float(np.mean(np.abs(s0 * xs + t0 - ys) < thr))
    degenerate = ratio < 0.2
    if degenerate:
        log.warning("depth alignment inlier ratio %.3f below 0.2", ratio)
    return DepthAlignment(s0, t0, inlier_ratio=ratio, degenerate=degenerate)


def sparse_depth_samples(frame: FramePriors, camera: Camera) -> tuple[NDArray, NDArray]:
    """(pixel, depth) samples of the sparse points that project inside the image."""
    pts = np.asarray(frame.sparse_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros((0, 2)), np.zeros(0)
    pix, z = camera.project(pts)
    keep = (z > 0) & (pix[:, 0] >= 0) & (pix[:, 0] <= camera.width - 1) & (pix[:, 1] >= 0) & \
        (pix[:, 1] <= camera.height - 1)
    return pix[keep], z[keep]


def ransac_scale_shift(depth_com: NDArray, samples: tuple[NDArray, NDArray], **kw) -> DepthAlignment:
    """Align a relative depth map to sparse metric depths: s * depth_com + t ~ sparse depth."""
    pixels, depths = samples
    vals, valid = sample_bilinear(depth_com, pixels)
    return ransac_fit(vals[valid], np.asarray(depths)[valid], **kw)


def apply_affine(depth: NDArray, s: float, t: float) -> NDArray:
    """s * depth + t on valid pixels; the sentinel (and non-positive results) stay invalid."""
    out = s * depth + t
    return np.where((depth >= 0) & (out > 0), out, INVALID_DEPTH)


def quantile_affine(depth_hum: NDArray, depth_com_star: NDArray, mask: NDArray,
                    qs=(0.1, 0.5, 0.9)) -> tuple[float, float]:
    """Least-squares (a, b) mapping human-depth quantiles onto aligned generic-depth quantiles under the mask."""
    mask = np.asarray(mask, dtype=bool)
    src = depth_hum[mask & (depth_hum >= 0)]
    tgt = depth_com_star[mask & (depth_com_star >= 0)]
    if len(src) < 10 or len(tgt) < 10:
        raise InsufficientDataError(f"quantile alignment needs >= 10 masked pixels, got {min(len(src), len(tgt))}")
    return affine_from_quantiles(np.quantile(src, qs), np.quantile(tgt, qs))


def affine_from_quantiles(src_q: NDArray, tgt_q: NDArray) -> tuple[float, float]:
    src_q = np.asarray(src_q, dtype=np.float64)
    A = np.stack([src_q, np.ones_like(src_q)], axis=1)
    if np.ptp(src_q) <= 0:
        raise DegenerateGeometryError("human depth quantiles are all equal")
    a, b = np.linalg.lstsq(A, np.asarray(tgt_q, dtype=np.float64), rcond=None)[0]
    return float(a), float(b)


def compose_depth(mask: NDArray, depth_hum_star: NDArray, depth_com_star: NDArray) -> NDArray:
    """Human depth inside the mask, generic depth outside; invalid sentinels propagate."""
    mask = np.asarray(mask, dtype=bool)
    return np.where(mask, depth_hum_star, depth_com_star)


@dataclass
class AlignedFrame:
    depth_star: NDArray
    alignment: DepthAlignment


def align_frame(frame: FramePriors, camera: Camera, ransac_iters: int = 2000, thresh_frac: float = 0.02,
                seed: int = 0) -> AlignedFrame:
    al = ransac_scale_shift(frame.depth_com, sparse_depth_samples(frame, camera), iters=ransac_iters,
                            thresh_frac=thresh_frac, seed=seed)
    com_star = apply_affine(frame.depth_com, al.s_star, al.t_star)
    if frame.mask.sum() > 0:
        al.a_star, al.b_star = quantile_affine(frame.depth_hum, com_star, frame.mask)
        hum_star = apply_affine(frame.depth_hum, al.a_star, al.b_star)
    else:
        hum_star = np.full_like(com_star, INVALID_DEPTH)
    return AlignedFrame(compose_depth(frame.mask, hum_star, com_star), al)


# ---------------------------------------------------------------- keypoints


def lattice_uv(grid: int) -> NDArray:
    g = np.linspace(0.0, 1.0, grid)
    uu, vv = np.meshgrid(g, g, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def interpolate_keypoints(tracks: list[KeypointTrack], n_frames: int, grid: int) -> list[KeypointTrack]:
    """Resample tracks onto a fixed grid x grid uv lattice per part.

    A lattice point that coincides with an observed track copies it, including
    its visibility. Other lattice points are linearly interpolated in uv from the
    visible tracks of the same part and are invisible outside their convex hull.
    ``grid = 0`` keeps the observed tracks. Tracks with part id 0 are dropped.
    """
    tracks = [tr for tr in tracks if tr.part_id != 0]
    if grid <= 0:
        return tracks
    lat = lattice_uv(grid)
    out: list[KeypointTrack] = []
    next_id = 0
    for part in sorted({tr.part_id for tr in tracks}):
        ptr = [tr for tr in tracks if tr.part_id == part]
        uvs = np.array([tr.uv for tr in ptr])
        exact = {}
        tree = cKDTree(uvs)
        d, idx = tree.query(lat)
        for li in range(len(lat)):
            if d[li] < 1e-9:
                exact[li] = ptr[idx[li]]
        pix = np.full((len(ptr), n_frames, 2), np.nan)
        vis = np.zeros((len(ptr), n_frames), dtype=bool)
        for k, tr in enumerate(ptr):
            for ob in tr.obs:
                pix[k, ob.frame] = ob.pixel
                vis[k, ob.frame] = ob.visible
        interp = {}
        for f in range(n_frames):
            sel = vis[:, f]
            if sel.sum() >= 3 and len(exact) < len(lat):
                try:
                    interp[f] = LinearNDInterpolator(uvs[sel], pix[sel, f])
                except Exception:  # qhull rejects degenerate (collinear) point sets
                    interp[f] = None
        for li, uv in enumerate(lat):
            obs = []
            if li in exact:
                src = exact[li]
                obs = [Observation(ob.frame, np.asarray(ob.pixel, dtype=float), bool(ob.visible)) for ob in src.obs]
            else:
                for f in range(n_frames):
                    fn = interp.get(f)
                    p = fn(uv[None])[0] if fn is not None else np.array([np.nan, np.nan])
                    ok = bool(np.all(np.isfinite(p)))
                    obs.append(Observation(f, p if ok else np.zeros(2), ok))
            out.append(KeypointTrack(next_id, part, uv.copy(), obs))
            next_id += 1
    return out


def lift_keypoints(tracks: list[KeypointTrack], depth_star: list[NDArray], cameras: list[Camera],
                   masks: list[NDArray] | None = None) -> tuple[NDArray, VisibilityMatrix]:
    """Unproject visible keypoint pixels with the aligned depth.

    Returns (K, T, 3) world positions (NaN where invisible) and the visibility
    matrix after dropping observations that land on invalid depth. With
    ``masks``, observations whose bilinear footprint leaves the human mask are
    dropped too, since their depth would mix in the background.
    """
    T = len(cameras)
    K = len(tracks)
    X = np.full((K, T, 3), np.nan)
    vis = VisibilityMatrix.from_tracks(tracks, T).vis
    pix = np.zeros((K, T, 2))
    for k, tr in enumerate(tracks):
        for ob in tr.obs:
            pix[k, ob.frame] = ob.pixel
    for f in range(T):
        cam = cameras[f]
        sel = np.nonzero(vis[:, f])[0]
        if len(sel) == 0:
            continue
        p = pix[sel, f]
        oob = (p[:, 0] < 0) | (p[:, 0] > cam.width - 1) | (p[:, 1] < 0) | (p[:, 1] > cam.height - 1)
        if np.any(oob):
            k = sel[np.argmax(oob)]
            raise DataError(f"keypoint {tracks[k].kp_id}: visible pixel {tuple(pix[k, f])} outside image in frame {f}")
        d, ok = sample_bilinear(depth_star[f], p)
        ok &= d > 0
        if masks is not None:
            inside, _ = sample_bilinear(masks[f].astype(np.float64), p)
            ok &= inside > 1.0 - 1e-9
        X[sel[ok], f] = cam.unproject(p[ok], d[ok])
        vis[sel[~ok], f] = False
    return X, VisibilityMatrix(vis)


# ---------------------------------------------------------------- rotations


def procrustes_matrix(a: NDArray, b: NDArray) -> NDArray:
    """Proper rotation R minimizing sum ||R (a_i - mean a) - (b_i - mean b)||^2."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3 or len(a) < 3:
        raise DegenerateGeometryError(f"Procrustes needs two corresponded (N>=3, 3) clouds, got {a.shape}, {b.shape}")
    H = (a - a.mean(0)).T @ (b - b.mean(0))
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 1e-300 or S[1] <= 1e-9 * S[0]:
        raise DegenerateGeometryError("cross-covariance is rank deficient (collinear or coincident points)")
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


def procrustes_rotation(a: NDArray, b: NDArray) -> NDArray:
    return quat.from_rotmat(procrustes_matrix(a, b))


def _batched_procrustes(A: NDArray, Bm: NDArray, w: NDArray) -> tuple[NDArray, NDArray]:
    """Weighted Procrustes for stacks of (M, P, 3) clouds; returns rotations and a validity flag."""
    ws = w.sum(axis=1, keepdims=True)
    safe = np.maximum(ws, 1e-12)
    ca = np.einsum("mp,mpk->mk", w, A) / safe
    cb = np.einsum("mp,mpk->mk", w, Bm) / safe
    Ac = (A - ca[:, None]) * w[:, :, None]
    Bc = Bm - cb[:, None]
    H = np.einsum("mpi,mpj->mij", Ac, Bc)
    U, S, Vt = np.linalg.svd(H)
    V = np.transpose(Vt, (0, 2, 1))
    d = np.sign(np.linalg.det(V @ np.transpose(U, (0, 2, 1))))
    d[d == 0] = 1.0
    D = np.zeros_like(H)
    D[:, 0, 0] = D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = V @ D @ np.transpose(U, (0, 2, 1))
    ok = (ws[:, 0] >= 3) & (S[:, 0] > 1e-300) & (S[:, 1] > 1e-9 * np.maximum(S[:, 0], 1e-300))
    return R, ok


def keypoint_rotations(X: NDArray, vis: NDArray, canonical: NDArray, k_nn: int = 8) -> NDArray:
    """(K, T, 4) rotation of each keypoint's neighborhood from the canonical frame to every frame."""
    K, T = vis.shape
    q = np.tile(quat.IDENTITY, (K, T, 1))
    if K < 3:
        return q
    tree = cKDTree(canonical)
    kk = min(k_nn + 1, K)
    _, nbr = tree.query(canonical, k=kk)
    nbr = nbr.reshape(K, kk)
    A = canonical[nbr]  # (K, P, 3)
    for f in range(T):
        Xf = np.nan_to_num(X[nbr, f])
        w = vis[nbr, f].astype(float)
        R, ok = _batched_procrustes(A, Xf, w)
        q[ok, f] = quat.from_rotmat(R[ok])
    return q


# ---------------------------------------------------------------- reference frames


@dataclass
class RefFrameSelection:
    indices: NDArray  # 0-based frame indices, strictly increasing
    cost: float


def reference_cost(combo, vis: NDArray, T: int, lambda_ref: float, n_neigh: int) -> float:
    combo = list(combo)
    gaps = np.diff(np.asarray(combo, dtype=np.float64))
    var = float(np.var(gaps)) if len(gaps) else 0.0
    B = len(combo)
    cover = 0
    for i in range(B):
        window = combo[i:min(i + n_neigh, B)]
        cover += int(np.any(vis[:, window], axis=1).sum())
    return var / T - lambda_ref / vis.shape[0] * cover


def select_reference_frames(vis: NDArray, T: int, B: int, lambda_ref: float = 0.2, n_neigh: int = 3,
                            candidates=None) -> RefFrameSelection:
    """Exhaustive minimization of gap variance minus windowed keypoint coverage.

    Equal costs prefer the tuple spanning more of the sequence, then the
    lexicographically smallest one. ``candidates`` restricts the eligible
    frames (e.g. to training frames); gaps are still measured in frame indices.
    """
    vis = np.asarray(getattr(vis, "vis", vis), dtype=bool)
    if vis.size == 0 or vis.shape[0] == 0:
        raise InsufficientDataError("visibility matrix is empty")
    pool = list(range(T)) if candidates is None else sorted(int(c) for c in candidates)
    if not 1 <= B <= len(pool):
        raise ValueError(f"need 1 <= B <= {len(pool)} eligible frames, got B={B}")
    if math.comb(len(pool), B) > MAX_COMBINATIONS:
        raise ValueError(f"C({len(pool)},{B}) = {math.comb(len(pool), B)} candidate tuples exceeds the bound "
                         f"{MAX_COMBINATIONS}")
    best, best_cost = None, np.inf
    for combo in itertools.combinations(pool, B):
        c = reference_cost(combo, vis, T, lambda_ref, n_neigh)
        if c < best_cost - 1e-12 or (abs(c - best_cost) <= 1e-12 and combo[-1] - combo[0] > best[-1] - best[0]):
            best, best_cost = combo, c
    return RefFrameSelection(np.array(best, dtype=np.int64), float(best_cost))


# ---------------------------------------------------------------- initial frame set


@dataclass
class InitConfig:
    B: int = 4
    lambda_ref: float = 0.2
    n_neigh: int = 3
    keypoint_grid: int = 16
    k_nn: int = 8
    ransac_iters: int = 2000
    ransac_thresh: float = 0.02
    init_opacity: float = 0.8
    seed: int = 0


@dataclass
class KeypointTargets:
    """Per-Gaussian, per-frame supervision for the pre-fit (rows follow the frame set)."""

    X: NDArray  # (N, T, 3), NaN where invisible
    rot: NDArray  # (N, T, 4)
    sigma0: float
    vis: NDArray  # (N, T)
    kp_index: NDArray  # (N,) row in the lifted keypoint array


@dataclass
class InitResult:
    frame_set: GaussianFrameSet
    targets: KeypointTargets
    depth_star: list[NDArray]
    alignments: list[DepthAlignment]
    selection: RefFrameSelection
    tracks: list[KeypointTrack] = field(repr=False, default_factory=list)
    track_of_lineage: NDArray = field(repr=False, default=None)  # initial lineage id -> index into ``tracks``


def _sample_colors(X: NDArray, bundle: PriorBundle, frames_order) -> NDArray:
    col = np.full((len(X), 3), 0.5)
    todo = np.ones(len(X), dtype=bool)
    for f in frames_order:
        if not todo.any():
            break
        cam = bundle.cameras[f]
        pix, z = cam.project(X)
        c, ok = sample_bilinear(bundle.frames[f].image, pix)
        ok &= z > 0
        take = todo & ok & np.all(np.isfinite(X), axis=1)
        col[take] = c[take]
        todo &= ~take
    return np.clip(col, 0.0, 1.0)


def _background(bundle: PriorBundle, next_id: int, opacity: float) -> Gaussians:
    pts = [np.asarray(f.sparse_points).reshape(-1, 3) for f in bundle.frames]
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    if len(pts) == 0:
        return Gaussians.empty()
    pts = np.unique(pts, axis=0)
    col = _sample_colors(pts, bundle, range(len(bundle)))
    k = min(4, len(pts))
    if k > 1:
        d, _ = cKDTree(pts).query(pts, k=k)
        s = np.mean(d[:, 1:], axis=1)
        s = np.where(s > 0, s, np.median(s[s > 0]) if np.any(s > 0) else 0.01)
    else:
        s = np.full(len(pts), 0.01)
    n = len(pts)
    return Gaussians(pts, np.tile(quat.IDENTITY, (n, 1)), np.repeat(s[:, None], 3, axis=1), np.full(n, opacity), col,
                     np.arange(next_id, next_id + n))


def build_frame_set(X: NDArray, vis: NDArray, rot: NDArray, ref_idx: NDArray, times: NDArray,
                    sigma0: float, colors: NDArray, opacity: float, background: Gaussians) -> GaussianFrameSet:
    """Human Gaussians at the reference frames; invisible entries take the mean of visible ones."""
    K = len(X)
    Xr = np.nan_to_num(X[:, ref_idx])
    vr = vis[:, ref_idx]
    xbar = substitute_invisible(Xr, vr)
    none = vr.sum(axis=1) == 0
    if np.any(none):
        cnt = np.maximum(vis.sum(axis=1), 1)
        mean_all = np.nansum(np.where(vis[:, :, None], X, 0.0), axis=1) / cnt[:, None]
        xbar[none] = mean_all[none][:, None, :]
    q = rot[:, ref_idx].copy()
    first_vis = np.argmax(vr, axis=1)
    fill_q = q[np.arange(K), first_vis]
    q = np.where(vr[:, :, None], q, fill_q[:, None, :])
    frames = []
    for i in range(len(ref_idx)):
        frames.append(Gaussians(xbar[:, i], q[:, i], np.full((K, 3), sigma0), np.full(K, opacity), colors,
                                np.arange(K)))
    return GaussianFrameSet(times[ref_idx], ref_idx, frames, background, vis.copy())


def initialize(bundle: PriorBundle, cfg: InitConfig = InitConfig(), ref_indices=None,
               train_frames=None) -> InitResult:
    """Everything before the pre-fit: aligned depth, lifted keypoints, reference frames, initial Gaussians.

    Frames outside ``train_frames`` contribute no keypoints, colors or reference frames.
    """
    bundle.validate()
    T = len(bundle)
    train = np.arange(T) if train_frames is None else np.asarray(sorted(train_frames), dtype=np.int64)
    aligned = [align_frame(fr, cam, cfg.ransac_iters, cfg.ransac_thresh, cfg.seed)
               for fr, cam in zip(bundle.frames, bundle.cameras)]
    depth_star = [a.depth_star for a in aligned]
    tracks = interpolate_keypoints(bundle.tracks, T, cfg.keypoint_grid)
    X, vm = lift_keypoints(tracks, depth_star, bundle.cameras, [fr.mask for fr in bundle.frames])
    vis = vm.vis
    held = np.setdiff1d(np.arange(T), train)
    vis[:, held] = False
    X[:, held] = np.nan
    keep = vis.any(axis=1)
    if keep.sum() == 0:
        raise InsufficientDataError("no keypoint could be lifted to 3D")
    kp_index = np.nonzero(keep)[0]
    X, vis = X[keep], vis[keep]

    cnt = np.maximum(vis.sum(axis=1), 1)
    mean_all = np.nansum(np.where(vis[:, :, None], X, 0.0), axis=1) / cnt[:, None]
    f0 = int(train[0])
    canonical = np.where(vis[:, f0:f0 + 1], np.nan_to_num(X[:, f0]), mean_all)
    rot = keypoint_rotations(X, vis, canonical, cfg.k_nn)
    first = X[vis[:, f0], f0] if vis[:, f0].sum() >= 2 else canonical
    nn, _ = cKDTree(first).query(first, k=2)
    sigma0 = 0.5 * float(np.median(nn[:, 1]))

    if ref_indices is None:
        sel = select_reference_frames(vis, T, min(cfg.B, len(train)), cfg.lambda_ref, cfg.n_neigh, train)
    else:
        ref_indices = np.asarray(ref_indices, dtype=np.int64)
        sel = RefFrameSelection(ref_indices, reference_cost(ref_indices, vis, T, cfg.lambda_ref, cfg.n_neigh))
    order = np.argsort(-vis.sum(axis=0), kind="stable")
    colors = np.full((len(X), 3), 0.5)
    todo = np.ones(len(X), dtype=bool)
    for f in order:
        c, ok = sample_bilinear(bundle.frames[f].image, bundle.cameras[f].project(np.nan_to_num(X[:, f]))[0])
        take = todo & vis[:, f] & ok
        colors[take] = c[take]
        todo &= ~take
    colors = np.clip(colors, 0, 1)
    bg = _background(bundle, len(X), cfg.init_opacity)
    fs = build_frame_set(X, vis, rot, sel.indices, bundle.times, sigma0, colors, cfg.init_opacity, bg)
    targets = KeypointTargets(X, rot, sigma0, vis, kp_index)
    return InitResult(fs, targets, depth_star, [a.alignment for a in aligned], sel, tracks, kp_index.copy())


# ---------------------------------------------------------------- deformation pre-fit


@dataclass
class PrefitConfig:
    iters: int = 5000
    lr: float = 1e-4
    lambda_pos: float = 1.0
    lambda_rot: float = 0.1
    lambda_scale: float = 0.1
    lambda_weight: float = 0.01
    seed: int = 0


def deform_loss(frame_set: GaussianFrameSet, params: DeformNetParams, targets: KeypointTargets, frame: int,
                t: float, cfg: PrefitConfig, grad: bool = True):
    """Masked per-reference-frame fit to lifted keypoints at one frame, plus the weight penalty.

    Each reference frame's branch x_bar_i + dx_i is compared with the lifted
    position at ``frame``, masked by co-visibility of (reference i, frame).
    Returns (loss, position-term, net gradients or None).
    """
    vis_ref = frame_set.ref_visibility
    xtilde = substitute_invisible(frame_set.stacked("mu"), vis_ref)
    out = deform_net.forward(params, xtilde, t, record=grad)
    M = (vis_ref & targets.vis[:, [frame]]).astype(float)  # (N, B)
    tx = np.nan_to_num(targets.X[:, frame])
    ex = xtilde + out.dx - tx[:, None, :]
    v = frame_set.stacked("rot") + out.dr
    vn = np.linalg.norm(v, axis=2, keepdims=True)
    q = v / vn
    tq = targets.rot[:, frame]
    sgn = np.where(np.sum(q * tq[:, None, :], axis=2) < 0, -1.0, 1.0)
    er = q - sgn[:, :, None] * tq[:, None, :]
    es = frame_set.stacked("scale") + out.ds - targets.sigma0
    wmask = 1.0 - M
    pos = float(np.sum(M[:, :, None] * ex**2))
    loss = (cfg.lambda_pos * pos + cfg.lambda_rot * np.sum(M[:, :, None] * er**2)
            + cfg.lambda_scale * np.sum(M[:, :, None] * es**2) + cfg.lambda_weight * np.sum(wmask * out.w**2))
    if not grad:
        return float(loss), pos, None
    g_dx = 2 * cfg.lambda_pos * M[:, :, None] * ex
    g_q = 2 * cfg.lambda_rot * M[:, :, None] * er
    g_dr = (g_q - q * np.sum(q * g_q, axis=2, keepdims=True)) / vn
    g_ds = 2 * cfg.lambda_scale * M[:, :, None] * es
    g_w = 2 * cfg.lambda_weight * wmask * out.w
    grads = deform_net.backward(out, g_w=g_w, g_dx=g_dx, g_dr=g_dr, g_ds=g_ds)
    return float(loss), pos, grads


def prefit_deformation(frame_set: GaussianFrameSet, params: DeformNetParams, targets: KeypointTargets,
                       cfg: PrefitConfig = PrefitConfig(), frames=None, adam: Adam | None = None,
                       log_every: int = 0) -> tuple[DeformNetParams, list[float]]:
    """Fit the network (Gaussians frozen) to lifted keypoints with Adam; returns params and the loss history."""
    T = targets.vis.shape[1]
    frames = list(range(T)) if frames is None else list(frames)
    times = np.arange(T) / max(T - 1, 1)
    rng = np.random.default_rng(cfg.seed)
    adam = adam or Adam(eps=1e-8)
    history = []
    order: list[int] = []
    for it in range(cfg.iters):
        if not order:
            order = list(rng.permutation(frames))
        f = int(order.pop())
        loss, _, grads = deform_loss(frame_set, params, targets, f, times[f], cfg)
        history.append(loss)
        for name, arr in params.named_arrays():
            params.set_named(name, adam.step("net." + name, arr, grads[name], cfg.lr))
        params.bump()
        if log_every and it % log_every == 0:
            log.info("prefit %d loss %.6g", it, loss)
    return params, history


def prefit_report(frame_set: GaussianFrameSet, params: DeformNetParams, targets: KeypointTargets,
                  cfg: PrefitConfig = PrefitConfig()) -> float:
    """Total masked deformation loss summed over all frames."""
    T = targets.vis.shape[1]
    times = np.arange(T) / max(T - 1, 1)
    return sum(deform_loss(frame_set, params, targets, f, times[f], cfg, grad=False)[0] for f in range(T))


def discard_unreferenced(init: InitResult) -> InitResult:
    """Drop human Gaussians that are not visible in any reference frame."""
    fs = init.frame_set
    keep = fs.ref_visibility.any(axis=1)
    if keep.all():
        return init
    fs.frames = [g.subset(keep) for g in fs.frames]
    fs.visibility = fs.visibility[keep]
    tg = init.targets
    init.targets = KeypointTargets(tg.X[keep], tg.rot[keep], tg.sigma0, tg.vis[keep], tg.kp_index[keep])
    return init


__all__ = [
    "DepthAlignment", "ransac_fit", "ransac_scale_shift", "quantile_affine", "compose_depth", "apply_affine",
    "lift_keypoints", "interpolate_keypoints", "procrustes_matrix", "procrustes_rotation", "keypoint_rotations",
    "select_reference_frames", "reference_cost", "RefFrameSelection", "initialize", "InitConfig", "InitResult",
    "prefit_deformation", "PrefitConfig", "deform_loss", "discard_unreferenced", "weight_mask",
]
