"""Unit quaternion helpers, scalar-first (w, x, y, z)."""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q: NDArray) -> NDArray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def to_rotmat(q: NDArray) -> NDArray:
    """Rotation matrices for (..., 4) quaternions. Input is normalized first."""
    q = normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q: NDArray, dR: NDArray) -> NDArray:
    """Pull a gradient on R(normalize(q)) back onto the raw quaternion q."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    du = np.stack([dw, dx, dy, dz], axis=-1)
    # d(q/|q|)/dq = (I - u u^T) / |q|
    return (du - u * np.sum(du * u, axis=-1, keepdims=True)) / n


def from_rotmat(R: NDArray) -> NDArray:
    """Quaternion (w >= 0) for a proper rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for k, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        if q[0] < 0:
            q = -q
        out[k] = q / np.linalg.norm(q)
    return out.reshape(R.shape[:-2] + (4,))


def multiply(a: NDArray, b: NDArray) -> NDArray:
    """Hamilton product a * b (rotation b applied first)."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def from_axis_angle(axis: NDArray, angle: NDArray) -> NDArray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)
