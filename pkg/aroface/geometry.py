"""
Centered image coordinates and the 4-parameter affine transform family.

Pixel (i, j) (row, column) sits at u = j - (w-1)/2, v = (h-1)/2 - i, so the
origin is the image center and v points up. A transform theta applies

    T(p) = scale * R(phi) @ p + (du, dv)

with R(phi) a counterclockwise rotation in the (u, v) frame. The inverse is
closed form: T^-1(q) = R(-phi) @ (q - (du, dv)) / scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from aroface.errors import ContractViolation

# Slot order of theta wherever it is handled as a 4-vector.
THETA_SLOTS = ("phi", "du", "dv", "scale")


@dataclass(frozen=True)
class GridShape:
    height: int
    width: int

    def __post_init__(self):
        if int(self.height) != self.height or int(self.width) != self.width:
            raise ContractViolation(f"grid dims must be integers, got {self.height}x{self.width}")
        if self.height < 1 or self.width < 1:
            raise ContractViolation(f"grid dims must be >= 1, got {self.height}x{self.width}")


@dataclass(frozen=True)
class CenteredPoint:
    u: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ContractViolation(f"point components must be finite, got ({self.u}, {self.v})")

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v], dtype=np.float64)


@dataclass(frozen=True)
class AffineParams:
    """theta = (phi, du, dv, scale); `scale` is the multiplicative factor 1 + lambda."""

    phi: float = 0.0
    du: float = 0.0
    dv: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        values = (self.phi, self.du, self.dv, self.scale)
        if not all(math.isfinite(x) for x in values):
            raise ContractViolation(f"affine parameters must be finite, got {values}")
        if self.scale <= 0:
            raise ContractViolation(f"scale must be > 0, got {self.scale}")

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(0.0, 0.0, 0.0, 1.0)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "AffineParams":
        phi, du, dv, scale = (float(x) for x in values)
        return cls(phi, du, dv, scale)

    def as_array(self) -> np.ndarray:
        return np.array([self.phi, self.du, self.dv, self.scale], dtype=np.float64)

    @property
    def lam(self) -> float:
        return self.scale - 1.0

    def deviation(self) -> np.ndarray:
        """Offset from the identity transform, (phi, du, dv, scale - 1)."""
        return np.array([self.phi, self.du, self.dv, self.scale - 1.0], dtype=np.float64)

    def with_components(self, mask: np.ndarray) -> "AffineParams":
        """Reset every slot whose mask entry is 0 to its identity value."""
        ident = AffineParams.identity().as_array()
        values = np.where(np.asarray(mask) > 0, self.as_array(), ident)
        return AffineParams.from_array(values)

    def to_dict(self) -> dict:
        return {"phi": self.phi, "du": self.du, "dv": self.dv, "scale": self.scale, "lambda": self.lam}


def to_centered(i: float, j: float, shape: GridShape) -> CenteredPoint:
    return CenteredPoint(j - (shape.width - 1) / 2.0, (shape.height - 1) / 2.0 - i)


def from_centered(p: CenteredPoint, shape: GridShape) -> Tuple[float, float]:
    return (shape.height - 1) / 2.0 - p.v, p.u + (shape.width - 1) / 2.0


def grid_coordinates(shape: GridShape) -> Tuple[np.ndarray, np.ndarray]:
    """Centered (u, v) of every pixel, each array of shape (height, width)."""
    rows = np.arange(shape.height, dtype=np.float64)
    cols = np.arange(shape.width, dtype=np.float64)
    u = np.broadcast_to(cols - (shape.width - 1) / 2.0, (shape.height, shape.width))
    v = np.broadcast_to(((shape.height - 1) / 2.0 - rows)[:, None], (shape.height, shape.width))
    return np.array(u), np.array(v)


def forward_coords(theta: AffineParams, u, v):
    c, s = math.cos(theta.phi), math.sin(theta.phi)
    return (theta.scale * (c * u - s * v) + theta.du,
            theta.scale * (s * u + c * v) + theta.dv)


def inverse_coords(theta: AffineParams, u, v):
    c, s = math.cos(theta.phi), math.sin(theta.phi)
    a = u - theta.du
    b = v - theta.dv
    return (c * a + s * b) / theta.scale, (c * b - s * a) / theta.scale


def inverse_coords_jacobian(theta: AffineParams, u, v) -> Tuple[np.ndarray, np.ndarray]:
    """Derivatives of T^-1(u, v) with respect to (phi, du, dv, scale).

    Returns (du'/dtheta, dv'/dtheta), each stacked along a trailing axis of size 4.
    """
    c, s = math.cos(theta.phi), math.sin(theta.phi)
    k = theta.scale
    uq, vq = inverse_coords(theta, np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))
    ones = np.ones_like(uq)
    du_dtheta = np.stack([vq, -c / k * ones, -s / k * ones, -uq / k], axis=-1)
    dv_dtheta = np.stack([-uq, s / k * ones, -c / k * ones, -vq / k], axis=-1)
    return du_dtheta, dv_dtheta


def forward(theta: AffineParams, p: CenteredPoint) -> CenteredPoint:
    u, v = forward_coords(theta, p.u, p.v)
    return CenteredPoint(u, v)


def inverse(theta: AffineParams, p: CenteredPoint) -> CenteredPoint:
    u, v = inverse_coords(theta, p.u, p.v)
    return CenteredPoint(u, v)


def wrap_angle(phi: float) -> float:
    """Representative of phi modulo 2*pi in (-pi, pi]."""
    wrapped = math.remainder(phi, 2.0 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped
