"""
The feasible set S of alignment perturbations.

A transform theta is feasible when the summed norms of the five landmark flow
vectors f_p = T^-1(p) - p stay within the total budget derived from the
per-component upper bounds. Projection shrinks the deviation from identity
along a ray until the constraint is tight.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from aroface import geometry
from aroface.errors import ContractViolation, ProjectionError
from aroface.geometry import AffineParams, CenteredPoint, GridShape

logger = logging.getLogger(__name__)

N_LANDMARKS = 5
FEASIBILITY_TOL = 1e-9
BISECTION_STEPS = 48
COMPONENTS = ("rotation", "translation", "scale")
_COMPONENT_SLOTS = {"rotation": (0,), "translation": (1, 2), "scale": (3,)}


@dataclass(frozen=True)
class LandmarkTemplate:
    points: Tuple[CenteredPoint, ...]
    shape: GridShape

    def __post_init__(self):
        if len(self.points) != N_LANDMARKS:
            raise ContractViolation(f"template needs exactly {N_LANDMARKS} landmarks, got {len(self.points)}")
        half_w = (self.shape.width - 1) / 2.0
        half_h = (self.shape.height - 1) / 2.0
        for p in self.points:
            if abs(p.u) > half_w or abs(p.v) > half_h:
                raise ContractViolation(f"landmark ({p.u}, {p.v}) lies outside a {self.shape.height}x{self.shape.width} grid")

    @classmethod
    def from_array(cls, points: np.ndarray, shape: GridShape) -> "LandmarkTemplate":
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return cls(tuple(CenteredPoint(float(u), float(v)) for u, v in points), shape)

    def as_array(self) -> np.ndarray:
        return np.array([[p.u, p.v] for p in self.points], dtype=np.float64)

    def rescaled(self, shape: GridShape) -> "LandmarkTemplate":
        """The same layout on another grid; each axis scales with its pixel extent."""
        pts = self.as_array()
        pts[:, 0] *= shape.width / self.shape.width
        pts[:, 1] *= shape.height / self.shape.height
        return LandmarkTemplate.from_array(pts, shape)


class BudgetSpec(BaseModel):
    """Upper bounds theta-bar: radians, pixels, pixels, and |scale - 1|."""

    max_rotation: float = Field(0.01, ge=0.0)
    max_translation_u: float = Field(0.01, ge=0.0)
    max_translation_v: float = Field(0.01, ge=0.0)
    max_scale_deviation: float = Field(0.01, ge=0.0, lt=1.0)

    def upper_theta(self) -> AffineParams:
        return AffineParams(self.max_rotation, self.max_translation_u, self.max_translation_v,
                            1.0 + self.max_scale_deviation)


@dataclass(frozen=True)
class FlowBudget:
    per_landmark: Tuple[float, ...]
    total: float

    @classmethod
    def from_per_landmark(cls, values: Iterable[float]) -> "FlowBudget":
        values = tuple(float(x) for x in values)
        if any(x < 0 for x in values):
            raise ContractViolation(f"per-landmark budgets must be >= 0, got {values}")
        return cls(values, math.fsum(values))


def load_template(path: Union[str, Path]) -> LandmarkTemplate:
    """Read a template file: a header line "h w", then five lines "u v"."""
    path = Path(path)
    try:
        lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    except FileNotFoundError as e:
        raise ContractViolation(f"template file not found: {path}") from e
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    try:
        h, w = (int(tok) for tok in lines[0].split())
        points = [tuple(float(tok) for tok in ln.split()) for ln in lines[1:]]
    except (IndexError, ValueError) as e:
        raise ContractViolation(f"malformed template file {path}: {e}") from e
    if any(len(p) != 2 for p in points):
        raise ContractViolation(f"malformed template file {path}: every landmark line needs two values")
    return LandmarkTemplate.from_array(np.array(points), GridShape(h, w))


def component_mask(components: Iterable[str]) -> np.ndarray:
    """0/1 mask over (phi, du, dv, scale) enabling the named components."""
    mask = np.zeros(4, dtype=np.float64)
    for name in components:
        if name not in _COMPONENT_SLOTS:
            raise ContractViolation(f"unknown transform component {name!r}; expected one of {COMPONENTS}")
        mask[list(_COMPONENT_SLOTS[name])] = 1.0
    return mask


def _flows(theta: AffineParams, pts: np.ndarray) -> np.ndarray:
    uq, vq = geometry.inverse_coords(theta, pts[:, 0], pts[:, 1])
    return np.stack([uq - pts[:, 0], vq - pts[:, 1]], axis=1)


def _total_flow(theta: AffineParams, pts: np.ndarray) -> float:
    return math.fsum(np.hypot(*_flows(theta, pts).T))


def landmark_flow(theta: AffineParams, tpl: LandmarkTemplate) -> np.ndarray:
    """Flow vectors f_p = T^-1(p) - p, shape (5, 2)."""
    return _flows(theta, tpl.as_array())


def total_flow(theta: AffineParams, tpl: LandmarkTemplate) -> float:
    return _total_flow(theta, tpl.as_array())


def compute_budget(bound: BudgetSpec, tpl: LandmarkTemplate) -> FlowBudget:
    flows = landmark_flow(bound.upper_theta(), tpl)
    return FlowBudget.from_per_landmark(np.hypot(flows[:, 0], flows[:, 1]))


def is_feasible(theta: AffineParams, budget: FlowBudget, tpl: LandmarkTemplate) -> bool:
    return total_flow(theta, tpl) <= budget.total + FEASIBILITY_TOL


def _along_ray(delta: np.ndarray, t: float) -> AffineParams:
    return AffineParams(t * delta[0], t * delta[1], t * delta[2], 1.0 + t * delta[3])


def project(theta: AffineParams, budget: FlowBudget, tpl: LandmarkTemplate) -> AffineParams:
    """Map theta into S.

    Feasible inputs come back unchanged. Otherwise the deviation from identity
    is shrunk by the largest t in [0, 1] that keeps the total flow within
    budget, found by bisection.
    """
    if is_feasible(theta, budget, tpl):
        if budget.total > 0.0 or theta == AffineParams.identity():
            return theta
    if budget.total == 0.0:
        return AffineParams.identity()

    pts = tpl.as_array()
    delta = theta.deviation()
    delta[0] = geometry.wrap_angle(delta[0])
    lo, hi = 0.0, 1.0
    flow_lo, flow_hi = 0.0, _total_flow(_along_ray(delta, hi), pts)
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        flow_mid = _total_flow(_along_ray(delta, mid), pts)
        if not (flow_lo - FEASIBILITY_TOL <= flow_mid <= flow_hi + FEASIBILITY_TOL):
            raise ProjectionError(
                "total landmark flow is not monotone along the projection ray",
                {"theta": theta.to_dict(), "t_lo": lo, "t_mid": mid, "t_hi": hi,
                 "flow_lo": flow_lo, "flow_mid": flow_mid, "flow_hi": flow_hi},
            )
        if flow_mid <= budget.total:
            lo, flow_lo = mid, flow_mid
        else:
            hi, flow_hi = mid, flow_mid
    return _along_ray(delta, lo)
