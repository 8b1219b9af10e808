"""CPU splatting of 3D Gaussians into RGB and depth, with analytic gradients.

Pixel (row r, column c) has its center at image coordinates (c, r).
Compositing is front to back over Gaussians sorted by camera depth, then by
source index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.typing import NDArray

from . import quaternion as quat
from .scene import Camera, Gaussians, covariance_of

NEAR_PLANE = 0.01
DILATION = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


class RenderStateError(RuntimeError):
    """Backward called with a forward record that does not belong to the inputs."""


@dataclass
class Projected2DGaussians:
    """Projected splats, sorted front to back. Arrays are indexed by sorted position."""

    mu2d: NDArray  # (M, 2)
    cov2d: NDArray  # (M, 2, 2), before dilation
    depth: NDArray  # (M,)
    color: NDArray  # (M, 3)
    opacity: NDArray  # (M,)
    source_index: NDArray  # (M,) row in the input Gaussians
    n_source: int
    # cached for backward
    p_cam: NDArray = field(repr=False, default=None)
    jac: NDArray = field(repr=False, default=None)  # (M, 2, 3) d mu2d / d p_cam
    cov3d: NDArray = field(repr=False, default=None)
    rot: NDArray = field(repr=False, default=None)
    scale: NDArray = field(repr=False, default=None)
    camera: Camera = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.depth)


@dataclass
class RenderOutput:
    rgb: NDArray  # (H, W, 3)
    depth: NDArray  # (H, W)
    alpha: NDArray  # (H, W)
    n_contrib: NDArray  # (H, W) sorted position of the last blended splat + 1
    final_T: NDArray  # (H, W)
    skipped: int = 0
    dilation: float = DILATION
    _source: object = field(repr=False, default=None)


@dataclass
class GaussianGrads:
    mu: NDArray
    rot: NDArray
    scale: NDArray
    opacity: NDArray
    color: NDArray
    mu2d: NDArray  # (N, 2) gradient w.r.t. projected pixel position


def project(g: Gaussians, camera: Camera, near: float = NEAR_PLANE) -> Projected2DGaussians:
    """Perspective projection of means and local-affine projection of covariances."""
    pc = camera.world_to_camera(g.mu)
    z = pc[:, 2]
    keep = np.nonzero(z > near)[0]
    pc, z = pc[keep], z[keep]
    K = camera.K
    uv = pc @ K[:2].T  # (M, 2)
    mu2d = uv / z[:, None]
    jac = np.zeros((len(keep), 2, 3))
    jac[:, :, :] = K[None, :2, :] / z[:, None, None]
    jac[:, :, 2] -= uv / (z * z)[:, None]
    cov3d = covariance_of(g.rot[keep], g.scale[keep])
    M = jac @ camera.R
    cov2d = M @ cov3d @ np.transpose(M, (0, 2, 1))
    cov2d = 0.5 * (cov2d + np.transpose(cov2d, (0, 2, 1)))
    order = np.lexsort((keep, z))
    keep = keep[order]
    return Projected2DGaussians(
        mu2d=mu2d[order], cov2d=cov2d[order], depth=z[order], color=g.color[keep], opacity=g.opacity[keep],
        source_index=keep, n_source=len(g), p_cam=pc[order], jac=jac[order], cov3d=cov3d[order],
        rot=g.rot[keep], scale=g.scale[keep], camera=camera,
    )


def _conics(cov2d: NDArray, dilation: float):
    a = cov2d[:, 0, 0] + dilation
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + dilation
    det = a * c - b * b
    valid = (det > 0) & (a > 0) & (c > 0) & np.isfinite(det)
    safe = np.where(valid, det, 1.0)
    conic = np.stack([c / safe, -b / safe, a / safe], axis=1)
    rx = 3.0 * np.sqrt(np.where(valid, a, 0.0))
    ry = 3.0 * np.sqrt(np.where(valid, c, 0.0))
    return conic, rx, ry, valid


@numba.njit(cache=True)
def _bbox(mu2d, rx, ry, valid, H, W):
    M = mu2d.shape[0]
    box = np.empty((M, 4), dtype=np.int64)
    for k in range(M):
        if not valid[k]:
            box[k, 0] = 1
            box[k, 1] = 0
            box[k, 2] = 1
            box[k, 3] = 0
            continue
        box[k, 0] = max(0, int(np.ceil(mu2d[k, 0] - rx[k])))
        box[k, 1] = min(W - 1, int(np.floor(mu2d[k, 0] + rx[k])))
        box[k, 2] = max(0, int(np.ceil(mu2d[k, 1] - ry[k])))
        box[k, 3] = min(H - 1, int(np.floor(mu2d[k, 1] + ry[k])))
    return box


@numba.njit(cache=True)
def _forward_kernel(mu2d, conic, opac, color, depth, box, H, W):
    M = mu2d.shape[0]
    rgb = np.zeros((H, W, 3))
    dep = np.zeros((H, W))
    final_T = np.ones((H, W))
    n_contrib = np.zeros((H, W), dtype=np.int64)
    for py in range(H):
        for px in range(W):
            T = 1.0
            last = 0
            for k in range(M):
                if px < box[k, 0] or px > box[k, 1] or py < box[k, 2] or py > box[k, 3]:
                    continue
                dx = px - mu2d[k, 0]
                dy = py - mu2d[k, 1]
                power = -0.5 * (conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy)
                if power > 0.0:
                    continue
                alpha = opac[k] * np.exp(power)
                if alpha > 0.99:
                    alpha = 0.99
                if alpha < 1.0 / 255.0:
                    continue
                w = T * alpha
                rgb[py, px, 0] += w * color[k, 0]
                rgb[py, px, 1] += w * color[k, 1]
                rgb[py, px, 2] += w * color[k, 2]
                dep[py, px] += w * depth[k]
                T *= 1.0 - alpha
                last = k + 1
                if T < 1e-4:
                    break
            final_T[py, px] = T
            n_contrib[py, px] = last
    return rgb, dep, final_T, n_contrib


@numba.njit(cache=True)
def _backward_kernel(mu2d, conic, opac, color, depth, box, n_contrib, g_rgb, g_dep):
    M = mu2d.shape[0]
    H, W = n_contrib.shape
    g_mu2d = np.zeros((M, 2))
    g_conic = np.zeros((M, 3))
    g_opac = np.zeros(M)
    g_color = np.zeros((M, 3))
    g_depth = np.zeros(M)
    idx = np.empty(M, dtype=np.int64)
    alphas = np.empty(M)
    Ts = np.empty(M)
    gauss = np.empty(M)
    clamped = np.zeros(M, dtype=np.bool_)
    for py in range(H):
        for px in range(W):
            last = n_contrib[py, px]
            n = 0
            T = 1.0
            for k in range(last):
                if px < box[k, 0] or px > box[k, 1] or py < box[k, 2] or py > box[k, 3]:
                    continue
                dx = px - mu2d[k, 0]
                dy = py - mu2d[k, 1]
                power = -0.5 * (conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy)
                if power > 0.0:
                    continue
                G = np.exp(power)
                alpha = opac[k] * G
                cl = False
                if alpha > 0.99:
                    alpha = 0.99
                    cl = True
                if alpha < 1.0 / 255.0:
                    continue
                idx[n] = k
                alphas[n] = alpha
                Ts[n] = T
                gauss[n] = G
                clamped[n] = cl
                n += 1
                T *= 1.0 - alpha
            gr0 = g_rgb[py, px, 0]
            gr1 = g_rgb[py, px, 1]
            gr2 = g_rgb[py, px, 2]
            gd = g_dep[py, px]
            # behind_*: sum over later splats of T_j alpha_j value_j
            b0 = 0.0
            b1 = 0.0
            b2 = 0.0
            bd = 0.0
            for m in range(n - 1, -1, -1):
                k = idx[m]
                a = alphas[m]
                Ti = Ts[m]
                w = Ti * a
                g_color[k, 0] += w * gr0
                g_color[k, 1] += w * gr1
                g_color[k, 2] += w * gr2
                g_depth[k] += w * gd
                inv = 1.0 / (1.0 - a)
                g_alpha = (gr0 * (Ti * color[k, 0] - b0 * inv) + gr1 * (Ti * color[k, 1] - b1 * inv)
                           + gr2 * (Ti * color[k, 2] - b2 * inv) + gd * (Ti * depth[k] - bd * inv))
                b0 += w * color[k, 0]
                b1 += w * color[k, 1]
                b2 += w * color[k, 2]
                bd += w * depth[k]
                if clamped[m]:
                    continue
                g_opac[k] += g_alpha * gauss[m]
                g_power = g_alpha * a
                dx = px - mu2d[k, 0]
                dy = py - mu2d[k, 1]
                g_mu2d[k, 0] += g_power * (conic[k, 0] * dx + conic[k, 1] * dy)
                g_mu2d[k, 1] += g_power * (conic[k, 1] * dx + conic[k, 2] * dy)
                g_conic[k, 0] += -0.5 * g_power * dx * dx
                g_conic[k, 1] += -g_power * dx * dy
                g_conic[k, 2] += -0.5 * g_power * dy * dy
    return g_mu2d, g_conic, g_opac, g_color, g_depth


def render(projected: Projected2DGaussians, camera: Camera, dilation: float = DILATION) -> RenderOutput:
    """Front-to-back alpha compositing of projected splats into RGB, depth and alpha."""
    H, W = camera.height, camera.width
    if len(projected) == 0:
        return RenderOutput(np.zeros((H, W, 3)), np.zeros((H, W)), np.zeros((H, W)),
                            np.zeros((H, W), dtype=np.int64), np.ones((H, W)), 0, dilation, projected)
    conic, rx, ry, valid = _conics(projected.cov2d, dilation)
    box = _bbox(projected.mu2d, rx, ry, valid, H, W)
    rgb, dep, final_T, n_contrib = _forward_kernel(
        projected.mu2d, conic, projected.opacity.astype(np.float64), projected.color, projected.depth, box, H, W)
    return RenderOutput(rgb, dep, 1.0 - final_T, n_contrib, final_T, int(np.sum(~valid)), dilation, projected)


def render_gaussians(g: Gaussians, camera: Camera, dilation: float = DILATION):
    proj = project(g, camera)
    return proj, render(proj, camera, dilation)


def render_backward(projected: Projected2DGaussians, out: RenderOutput, g_rgb: NDArray,
                    g_depth: NDArray) -> GaussianGrads:
    """Gradients of a scalar loss w.r.t. every source Gaussian's parameters.

    ``g_rgb`` and ``g_depth`` are dLoss/dRGB (H, W, 3) and dLoss/dDepth (H, W).
    Culled Gaussians receive zero gradient.
    """
    if out._source is not projected:
        raise RenderStateError("render output was not produced from these projected Gaussians")
    N = projected.n_source
    grads = GaussianGrads(np.zeros((N, 3)), np.zeros((N, 4)), np.zeros((N, 3)), np.zeros(N), np.zeros((N, 3)),
                          np.zeros((N, 2)))
    if len(projected) == 0:
        return grads
    H, W = out.depth.shape
    g_rgb = np.ascontiguousarray(g_rgb, dtype=np.float64).reshape(H, W, 3)
    g_depth = np.ascontiguousarray(g_depth, dtype=np.float64).reshape(H, W)
    conic, rx, ry, valid = _conics(projected.cov2d, out.dilation)
    box = _bbox(projected.mu2d, rx, ry, valid, H, W)
    g_mu2d, g_conic, g_opac, g_color, g_d = _backward_kernel(
        projected.mu2d, conic, projected.opacity.astype(np.float64), projected.color, projected.depth, box,
        out.n_contrib, g_rgb, g_depth)

    # conic = inv(cov2d + dilation I); b enters the quadratic form twice
    A = np.empty((len(conic), 2, 2))
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]
    gA = np.empty_like(A)
    gA[:, 0, 0], gA[:, 1, 1] = g_conic[:, 0], g_conic[:, 2]
    gA[:, 0, 1] = gA[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_cov2d = -A @ gA @ A
    g_cov2d[~valid] = 0.0

    cam = projected.camera
    Rc = cam.R
    Mj = projected.jac @ Rc  # (M, 2, 3)
    g_cov3d = np.transpose(Mj, (0, 2, 1)) @ g_cov2d @ Mj
    g_M = 2.0 * g_cov2d @ Mj @ projected.cov3d
    g_jac = g_M @ Rc.T

    pc = projected.p_cam
    z = pc[:, 2]
    K2 = cam.K[:2]
    u = pc @ K2.T  # (M, 2)
    g_p = np.zeros_like(pc)
    # mean path: mu2d_a = u_a / z
    g_p += g_mu2d @ K2 / z[:, None]
    g_p[:, 2] -= np.sum(g_mu2d * u, axis=1) / z**2
    # depth path
    g_p[:, 2] += g_d
    # Jacobian path: J[a, m] = K[a, m] / z - u_a / z^2 [m == 2]
    gJ = g_jac
    g_p[:, 2] -= np.einsum("nam,am->n", gJ, K2) / z**2
    g_p -= np.einsum("na,am->nm", gJ[:, :, 2], K2) / (z**2)[:, None]
    g_p[:, 2] += 2.0 * np.sum(gJ[:, :, 2] * u, axis=1) / z**3
    g_mu = g_p @ Rc

    Rq = quat.to_rotmat(projected.rot)
    s = projected.scale
    S2 = s**2
    g_Rq = 2.0 * g_cov3d @ Rq * S2[:, None, :]
    g_scale = 2.0 * s * np.einsum("nji,njk,nki->ni", Rq, g_cov3d, Rq)
    g_rot = quat.rotmat_grad_to_quat(projected.rot, g_Rq)

    src = projected.source_index
    grads.mu[src] = g_mu
    grads.rot[src] = g_rot
    grads.scale[src] = g_scale
    grads.opacity[src] = g_opac
    grads.color[src] = g_color
    grads.mu2d[src] = g_mu2d
    return grads
