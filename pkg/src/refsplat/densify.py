"""Density control applied identically to every reference frame.

A clone or split is decided once per Gaussian from its accumulated
screen-space gradient and performed in the frame that triggered it. The
child's offset from its parent is then carried to every other reference frame
by the rotation and scale change of the parent's neighborhood between the two
frames, so all frames keep the same lineage multiset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from . import quaternion as quat
from .scene import Gaussians, GaussianFrameSet

log = logging.getLogger(__name__)

SPLIT_FACTOR = 1.6


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    split_fraction: float = 0.01  # of scene extent
    prune_opacity: float = 5e-3
    k_nn: int = 8
    max_human: int | None = None


@dataclass
class DensifyResult:
    source_rows: NDArray  # new row -> old row, -1 for newly created Gaussians
    n_clone: int = 0
    n_split: int = 0
    n_prune: int = 0
    n_fallback: int = 0


def triggering_frame(frame_set: GaussianFrameSet) -> NDArray:
    """First reference frame in which each Gaussian is visible (0 when none)."""
    return np.argmax(frame_set.ref_visibility, axis=1)


def neighborhood_transport(frame_set: GaussianFrameSet, rows: NDArray, src: NDArray,
                           k_nn: int) -> tuple[NDArray, NDArray, int]:
    """Rotation (M, B, 3, 3) and scale ratio (M, B) taking offsets around ``rows`` from frame ``src`` to each frame.

    Fit by Procrustes on each parent's k_nn-neighbor constellation; rank-deficient
    constellations fall back to the identity with unit scale.
    """
    mu = frame_set.stacked("mu")  # (N, B, 3)
    N, B = mu.shape[:2]
    M = len(rows)
    R = np.tile(np.eye(3), (M, B, 1, 1))
    ratio = np.ones((M, B))
    if M == 0 or N < 4:
        return R, ratio, M if N < 4 else 0
    k = min(k_nn + 1, N)
    fallback = np.zeros(M, dtype=bool)
    for b_src in np.unique(src):
        sel = np.nonzero(src == b_src)[0]
        _, nbr = cKDTree(mu[:, b_src]).query(mu[rows[sel], b_src], k=k)
        nbr = nbr.reshape(len(sel), k)
        A = mu[nbr, b_src] - mu[rows[sel], b_src][:, None]
        Ac = A - A.mean(axis=1, keepdims=True)
        for b in range(B):
            if b == b_src:
                continue
            Bm = mu[nbr, b] - mu[rows[sel], b][:, None]
            Bc = Bm - Bm.mean(axis=1, keepdims=True)
            H = np.einsum("mpi,mpj->mij", Ac, Bc)
            U, S, Vt = np.linalg.svd(H)
            V = np.transpose(Vt, (0, 2, 1))
            Ut = np.transpose(U, (0, 2, 1))
            d = np.sign(np.linalg.det(V @ Ut))
            d[d == 0] = 1.0
            D = np.tile(np.eye(3), (len(sel), 1, 1))
            D[:, 2, 2] = d
            Rb = V @ D @ Ut
            na = np.sqrt(np.sum(Ac**2, axis=(1, 2)))
            nb = np.sqrt(np.sum(Bc**2, axis=(1, 2)))
            ok = (S[:, 1] > 1e-9 * np.maximum(S[:, 0], 1e-300)) & (na > 1e-12) & (nb > 1e-12)
            fallback[sel[~ok]] = True
            R[sel[ok], b] = Rb[ok]
            ratio[sel[ok], b] = nb[ok] / na[ok]
    n_fb = int(fallback.sum())
    if n_fb:
        log.info("identity transport for %d Gaussians with degenerate neighborhoods", n_fb)
    return R, ratio, n_fb


def _children(frame_set: GaussianFrameSet, rows: NDArray, offsets_src: NDArray, src: NDArray, scale_div: float,
              k_nn: int) -> tuple[list[Gaussians], int]:
    """Per-frame children of ``rows`` displaced by ``offsets_src`` (given in each parent's source frame)."""
    R, ratio, n_fb = neighborhood_transport(frame_set, rows, src, k_nn)
    out = []
    for b, g in enumerate(frame_set.frames):
        off = np.einsum("mij,mj->mi", R[:, b], offsets_src) * ratio[:, b:b + 1]
        out.append(Gaussians(g.mu[rows] + off, g.rot[rows].copy(), g.scale[rows] / scale_div,
                             g.opacity[rows].copy(), g.color[rows].copy(), np.zeros(len(rows), dtype=np.int64)))
    return out, n_fb


def apply_events(frame_set: GaussianFrameSet, clone_rows=(), split_rows=(), prune_rows=(), k_nn: int = 8,
                 rng: np.random.Generator | None = None) -> DensifyResult:
    """Clone, split and prune the given human rows in all reference frames at once (mutates ``frame_set``).

    Split parents are replaced by two children; clones add one child next to the
    original. Every child records its parent in the lineage map.
    """
    rng = rng or np.random.default_rng(0)
    N = frame_set.n_human
    clone_rows = np.unique(np.asarray(clone_rows, dtype=np.int64))
    split_rows = np.unique(np.asarray(split_rows, dtype=np.int64))
    prune = np.zeros(N, dtype=bool)
    prune[np.asarray(prune_rows, dtype=np.int64)] = True
    clone_rows = clone_rows[~np.isin(clone_rows, split_rows)]
    src_all = triggering_frame(frame_set)

    parts: list[list[Gaussians]] = [[] for _ in range(frame_set.B)]
    vis_parts, lids, parents = [], [], []
    n_fb = 0
    if len(clone_rows):
        kids, fb = _children(frame_set, clone_rows, np.zeros((len(clone_rows), 3)), src_all[clone_rows], 1.0, k_nn)
        n_fb += fb
        for b in range(frame_set.B):
            parts[b].append(kids[b])
        vis_parts.append(frame_set.visibility[clone_rows])
        parents.append(clone_rows)
    if len(split_rows):
        src = src_all[split_rows]
        g_src = [frame_set.frames[b] for b in src]
        scale = np.stack([g.scale[r] for g, r in zip(g_src, split_rows)])
        Rp = quat.to_rotmat(np.stack([g.rot[r] for g, r in zip(g_src, split_rows)]))
        for _ in range(2):
            z = rng.standard_normal((len(split_rows), 3)) * scale
            off = np.einsum("mij,mj->mi", Rp, z)
            kids, fb = _children(frame_set, split_rows, off, src, SPLIT_FACTOR, k_nn)
            n_fb += fb
            for b in range(frame_set.B):
                parts[b].append(kids[b])
            vis_parts.append(frame_set.visibility[split_rows])
            parents.append(split_rows)
    keep = ~prune
    keep[split_rows] = False
    parents = np.concatenate(parents) if parents else np.zeros(0, dtype=np.int64)
    # children of pruned parents are pruned too
    child_keep = ~prune[parents]
    parent_lids = frame_set.frames[0].lineage[parents[child_keep]]
    new_ids = np.arange(frame_set.next_id, frame_set.next_id + len(parent_lids), dtype=np.int64)
    frame_set.next_id += len(new_ids)
    for lid, pid in zip(new_ids.tolist(), parent_lids.tolist()):
        frame_set.lineage[lid] = pid
    for b in range(frame_set.B):
        kids = Gaussians.concat(parts[b]) if parts[b] else Gaussians.empty()
        kids = kids.subset(child_keep)
        kids.lineage = new_ids.copy()
        frame_set.frames[b] = Gaussians.concat([frame_set.frames[b].subset(keep), kids])
    vis_new = np.concatenate(vis_parts)[child_keep] if vis_parts else np.zeros((0, frame_set.visibility.shape[1]),
                                                                               dtype=bool)
    frame_set.visibility = np.concatenate([frame_set.visibility[keep], vis_new])
    source_rows = np.concatenate([np.nonzero(keep)[0], np.full(len(new_ids), -1)])
    frame_set.check_synchronized()
    return DensifyResult(source_rows, int(len(clone_rows) - prune[clone_rows].sum()),
                         int(len(split_rows) - prune[split_rows].sum()), int(prune.sum()), n_fb)


def densify_sync(frame_set: GaussianFrameSet, grad_accum: NDArray, denom: NDArray, extent: float,
                 cfg: DensifyConfig = DensifyConfig(), rng: np.random.Generator | None = None) -> DensifyResult:
    """Gradient-driven clone/split plus low-opacity pruning, synchronized across reference frames."""
    N = frame_set.n_human
    mean_grad = np.where(denom > 0, grad_accum / np.maximum(denom, 1), 0.0)
    hot = np.nonzero(mean_grad > cfg.grad_threshold)[0]
    prune_rows = np.nonzero(frame_set.frames[0].opacity < cfg.prune_opacity)[0]
    if cfg.max_human is not None:
        room = cfg.max_human - (N - len(prune_rows))
        if len(hot) > max(room, 0):
            hot = hot[np.argsort(-mean_grad[hot], kind="stable")[:max(room, 0)]]
            hot.sort()
    hot = hot[~np.isin(hot, prune_rows)]
    src = triggering_frame(frame_set)
    big = np.array([frame_set.frames[b].scale[r].max() for r, b in zip(hot, src[hot])]) if len(hot) else np.zeros(0)
    thr = cfg.split_fraction * extent
    return apply_events(frame_set, hot[big <= thr], hot[big > thr], prune_rows, cfg.k_nn, rng)
