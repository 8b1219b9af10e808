"""Blend the B reference frames into the deformed Gaussians at a query time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import deform_net
from .deform_net import DeformNetParams, DeformOutput
from .scene import Gaussians, GaussianFrameSet

SCALE_MIN = 1e-6


@dataclass
class DeformRecord:
    out: DeformOutput
    vis: NDArray  # (N, B) reference visibility used for substitution
    xtilde: NDArray  # (N, B, 3) reference positions after substitution
    v: NDArray  # (N, B, 4) raw per-frame quaternions
    q: NDArray  # (N, B, 4) normalized and sign aligned
    sign: NDArray  # (N, B)
    u: NDArray  # (N, 4) unnormalized blend
    q_star: NDArray
    s_frames: NDArray  # (N, B, 3) per-frame scale plus offset
    s_raw: NDArray  # (N, 3) blended scale before the floor
    n_human: int


@dataclass
class FrameGrads:
    mu: NDArray  # (N, B, 3) on the stored reference positions
    rot: NDArray  # (N, B, 4)
    scale: NDArray  # (N, B, 3)
    w: NDArray  # (N, B)
    net: dict[str, NDArray]


def substitute_invisible(xbar: NDArray, vis: NDArray) -> NDArray:
    """Replace positions in frames where a Gaussian is invisible by the mean of its visible frames.

    Rows with no visible frame are returned unchanged.
    """
    cnt = vis.sum(axis=1)
    mean = np.einsum("nb,nbk->nk", vis.astype(float), xbar) / np.maximum(cnt, 1)[:, None]
    fill = (~vis) & (cnt > 0)[:, None]
    return np.where(fill[:, :, None], mean[:, None, :], xbar)


def deform_human(frame_set: GaussianFrameSet, params: DeformNetParams, t: float, record: bool = True,
                 net_out: DeformOutput | None = None) -> tuple[Gaussians, DeformRecord]:
    """Deformed human Gaussians at ``t``. ``net_out`` reuses earlier network outputs."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"query time {t} outside [0, 1]")
    vis = frame_set.ref_visibility
    xbar = frame_set.stacked("mu")
    xtilde = substitute_invisible(xbar, vis)
    out = net_out if net_out is not None else deform_net.forward(params, xtilde, t, record=record)
    w = out.w
    mu = np.einsum("nb,nbk->nk", w, xtilde + out.dx)

    v = frame_set.stacked("rot") + out.dr
    q = v / np.linalg.norm(v, axis=2, keepdims=True)
    dots = np.sum(q * q[:, :1], axis=2)
    sign = np.where(dots < 0, -1.0, 1.0)
    q = q * sign[:, :, None]
    u = np.einsum("nb,nbk->nk", w, q)
    q_star = u / np.linalg.norm(u, axis=1, keepdims=True)

    s_frames = frame_set.stacked("scale") + out.ds
    s_raw = np.einsum("nb,nbk->nk", w, s_frames)
    first = frame_set.frames[0]
    g = Gaussians(mu, q_star, np.maximum(s_raw, SCALE_MIN), first.opacity, first.color, first.lineage)
    rec = DeformRecord(out, vis, xtilde, v, q, sign, u, q_star, s_frames, s_raw, len(first))
    return g, rec


def deform_at(frame_set: GaussianFrameSet, params: DeformNetParams, t: float,
              record: bool = True) -> tuple[Gaussians, DeformRecord]:
    """Deformed scene at time ``t``: human Gaussians first, then the untouched background."""
    human, rec = deform_human(frame_set, params, t, record)
    return Gaussians.concat([human, frame_set.background]), rec


def deform_backward(rec: DeformRecord, g_mu: NDArray, g_rot: NDArray, g_scale: NDArray,
                    g_w_extra: NDArray | None = None) -> FrameGrads:
    """Gradients w.r.t. reference-frame parameters and network parameters.

    ``g_*`` are gradients on the deformed human Gaussians (first ``n_human`` rows);
    ``g_w_extra`` adds a direct gradient on the blend weights (e.g. from the weight penalty).
    """
    n = rec.n_human
    g_mu, g_rot, g_scale = g_mu[:n], g_rot[:n], g_scale[:n]
    w, out = rec.out.w, rec.out
    g_w = np.zeros_like(w) if g_w_extra is None else np.array(g_w_extra, dtype=float)

    # position
    g_w += np.einsum("nbk,nk->nb", rec.xtilde + out.dx, g_mu)
    g_dx = w[:, :, None] * g_mu[:, None, :]
    g_xtilde = g_dx.copy()
    vis = rec.vis
    cnt = vis.sum(axis=1)
    fill = (~vis) & (cnt > 0)[:, None]
    g_fill = np.einsum("nb,nbk->nk", fill.astype(float), g_xtilde) / np.maximum(cnt, 1)[:, None]
    g_xbar = np.where(fill[:, :, None], 0.0, g_xtilde) + vis[:, :, None] * g_fill[:, None, :]

    # rotation
    un = np.linalg.norm(rec.u, axis=1, keepdims=True)
    g_u = (g_rot - rec.q_star * np.sum(rec.q_star * g_rot, axis=1, keepdims=True)) / un
    g_w += np.einsum("nbk,nk->nb", rec.q, g_u)
    g_q = (w * rec.sign)[:, :, None] * g_u[:, None, :]
    qn = rec.q * rec.sign[:, :, None]
    vn = np.linalg.norm(rec.v, axis=2, keepdims=True)
    g_v = (g_q - qn * np.sum(qn * g_q, axis=2, keepdims=True)) / vn

    # scale
    g_s = np.where(rec.s_raw > SCALE_MIN, g_scale, 0.0)
    g_w += np.einsum("nbk,nk->nb", rec.s_frames, g_s)
    g_ds = w[:, :, None] * g_s[:, None, :]

    net = {}
    if out.tape is not None:
        net = deform_net.backward(out, g_w=g_w, g_dx=g_dx, g_dr=g_v, g_ds=g_ds)
    return FrameGrads(g_xbar, g_v, g_ds, g_w, net)


def weight_mask(frame_set: GaussianFrameSet, frame: int) -> NDArray:
    """(N, B) value of 1 - M_{t_i, t}(x): 1 where the pair (reference i, frame) is not co-visible."""
    ref_vis = frame_set.ref_visibility
    return 1.0 - (ref_vis & frame_set.visibility[:, [frame]]).astype(float)


def weight_regularization(frame_set: GaussianFrameSet, params: DeformNetParams, frames, times=None) -> float:
    """Sum over frames, Gaussians and reference frames of (1 - M) * w^2."""
    total = 0.0
    for k, f in enumerate(frames):
        t = times[k] if times is not None else f / max(frame_set.visibility.shape[1] - 1, 1)
        _, rec = deform_human(frame_set, params, t, record=False)
        total += float(np.sum(weight_mask(frame_set, f) * rec.out.w**2))
    return total
