"""
Differentiable image warping.

Output pixel (i, j) of a warped image pulls its value from the source at
T^-1(P_u(j), P_v(i)) through the bilinear kernel max(0, 1 - |t|) on each axis.
Samples that land more than one pixel outside the grid read zero.

Derivatives of the kernel are one-sided at its kinks: the sample point is
assigned to the cell whose top-left node is (floor(i_f), floor(j_f)) in
fractional row/column space, and the derivative is that cell's bilinear
slope. The choice is fixed so sign-gradient steps are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from aroface import geometry
from aroface.errors import ContractViolation
from aroface.geometry import AffineParams, CenteredPoint, GridShape


@dataclass(frozen=True)
class WarpJacobian:
    """d x'[c, i, j] / d theta stacked as values[c, i, j, slot], slots (phi, du, dv, scale)."""

    values: np.ndarray

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape


def check_image(x: np.ndarray) -> np.ndarray:
    """Validate a (channels, height, width) float image and return it as float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or min(x.shape) < 1:
        raise ContractViolation(f"image must have shape (channels, height, width), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractViolation("image contains non-finite values")
    return x


def image_shape(x: np.ndarray) -> GridShape:
    return GridShape(x.shape[-2], x.shape[-1])


def _cells(shape: GridShape, u: np.ndarray, v: np.ndarray):
    """Floor-indexed cell and fractional offsets of centered coordinates."""
    jf = u + (shape.width - 1) / 2.0
    i_f = (shape.height - 1) / 2.0 - v
    j0 = np.floor(jf)
    i0 = np.floor(i_f)
    return i0.astype(np.int64), j0.astype(np.int64), i_f - i0, jf - j0


def _gather(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """x[..., rows, cols] with zeros wherever the index falls off the grid."""
    h, w = x.shape[-2], x.shape[-1]
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    values = x[..., np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)]
    return np.where(inside, values, 0.0)


def _corners(x: np.ndarray, u: np.ndarray, v: np.ndarray):
    i0, j0, fy, fx = _cells(image_shape(x), u, v)
    x00 = _gather(x, i0, j0)
    x01 = _gather(x, i0, j0 + 1)
    x10 = _gather(x, i0 + 1, j0)
    x11 = _gather(x, i0 + 1, j0 + 1)
    return x00, x01, x10, x11, fy, fx


def sample_at(x: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear samples of every channel of x at centered coordinates (u, v)."""
    x00, x01, x10, x11, fy, fx = _corners(x, u, v)
    return ((1.0 - fy) * ((1.0 - fx) * x00 + fx * x01)
            + fy * ((1.0 - fx) * x10 + fx * x11))


def sample_gradient_at(x: np.ndarray, u: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(dI/du, dI/dv) of the bilinear interpolant at (u, v), one-sided at kinks."""
    x00, x01, x10, x11, fy, fx = _corners(x, u, v)
    d_du = (1.0 - fy) * (x01 - x00) + fy * (x11 - x10)
    # i_f grows as v shrinks
    d_dv = -((1.0 - fx) * (x10 - x00) + fx * (x11 - x01))
    return d_du, d_dv


def bilinear_sample(channel: np.ndarray, p: CenteredPoint) -> float:
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim != 2:
        raise ContractViolation(f"channel must be a 2-D grid, got shape {channel.shape}")
    return float(sample_at(channel, np.float64(p.u), np.float64(p.v)))


def sample_gradient(channel: np.ndarray, p: CenteredPoint) -> Tuple[float, float]:
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim != 2:
        raise ContractViolation(f"channel must be a 2-D grid, got shape {channel.shape}")
    d_du, d_dv = sample_gradient_at(channel, np.float64(p.u), np.float64(p.v))
    return float(d_du), float(d_dv)


def warp_image(x: np.ndarray, theta: AffineParams) -> np.ndarray:
    x = check_image(x)
    u, v = geometry.grid_coordinates(image_shape(x))
    uq, vq = geometry.inverse_coords(theta, u, v)
    return sample_at(x, uq, vq)


def warp_param_jacobian(x: np.ndarray, theta: AffineParams) -> WarpJacobian:
    x = check_image(x)
    u, v = geometry.grid_coordinates(image_shape(x))
    uq, vq = geometry.inverse_coords(theta, u, v)
    d_du, d_dv = sample_gradient_at(x, uq, vq)
    dq_u, dq_v = geometry.inverse_coords_jacobian(theta, u, v)
    return WarpJacobian(d_du[..., None] * dq_u[None] + d_dv[..., None] * dq_v[None])


def warp_with_jacobian(x: np.ndarray, theta: AffineParams) -> Tuple[np.ndarray, WarpJacobian]:
    """warp_image and warp_param_jacobian sharing one corner gather."""
    x = check_image(x)
    u, v = geometry.grid_coordinates(image_shape(x))
    uq, vq = geometry.inverse_coords(theta, u, v)
    x00, x01, x10, x11, fy, fx = _corners(x, uq, vq)
    top = (1.0 - fx) * x00 + fx * x01
    bottom = (1.0 - fx) * x10 + fx * x11
    warped = (1.0 - fy) * top + fy * bottom
    d_du = (1.0 - fy) * (x01 - x00) + fy * (x11 - x10)
    d_dv = -(bottom - top)
    dq_u, dq_v = geometry.inverse_coords_jacobian(theta, u, v)
    return warped, WarpJacobian(d_du[..., None] * dq_u[None] + d_dv[..., None] * dq_v[None])


def loss_grad_wrt_theta(dL_dxprime: np.ndarray, jac: WarpJacobian) -> np.ndarray:
    """Contract an upstream image gradient with the warp Jacobian into a 4-vector.

    Terms are accumulated channel-major, then row-major, in a fixed sequence.
    """
    upstream = np.asarray(dL_dxprime, dtype=np.float64)
    if upstream.shape != jac.values.shape[:-1]:
        raise ContractViolation(
            f"upstream gradient shape {upstream.shape} does not match Jacobian {jac.values.shape[:-1]}"
        )
    terms = upstream.reshape(-1, 1) * jac.values.reshape(-1, 4)
    # axis-0 reduction of a C-contiguous array adds rows in storage order
    return np.ascontiguousarray(terms).sum(axis=0)
