"""
Inner maximisation: per-sample projected sign-gradient ascent over theta.

Each sample draws its own theta_0 and step size alpha from a counter-keyed
stream, takes k steps theta <- proj_S(theta + alpha * sign(dL/dtheta)) and
returns the crafted transform together with the losses before and after.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Literal, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from aroface import constraint, warp
from aroface.constraint import COMPONENTS, BudgetSpec, FlowBudget, LandmarkTemplate
from aroface.errors import ContractViolation, NumericalAbort
from aroface.geometry import AffineParams, GridShape
from aroface.recognizer import Recognizer
from aroface.utils import rng as rng_utils

logger = logging.getLogger(__name__)

# Smallest scale a sign step may leave behind before projection.
MIN_SCALE = 1e-3


class PGDConfig(BaseModel):
    k: int = Field(1, ge=0)
    alpha_mean: float = 0.0
    alpha_std: float = Field(0.1, ge=0.0)
    random_alpha: bool = True
    init_scale_mean: float = 1.0
    init_scale_std: float = Field(0.1, ge=0.0)
    init_other_std: float = Field(0.1, ge=0.0)
    budget: BudgetSpec = Field(default_factory=BudgetSpec)
    components: List[str] = Field(default_factory=lambda: list(COMPONENTS))
    project: bool = True
    # "normalized" measures du/dv init, steps and bounds in half-extents of the grid
    translation_units: Literal["pixels", "normalized"] = "pixels"

    @field_validator("components")
    @classmethod
    def _known_components(cls, value: List[str]) -> List[str]:
        unknown = [c for c in value if c not in COMPONENTS]
        if unknown:
            raise ValueError(f"unknown components {unknown}; expected a subset of {list(COMPONENTS)}")
        return [c for c in COMPONENTS if c in value]

    def mask(self) -> np.ndarray:
        return constraint.component_mask(self.components)

    def slot_units(self, shape: GridShape) -> np.ndarray:
        """Pixels (or radians, or scale) per configured unit of each theta slot."""
        if self.translation_units == "pixels":
            return np.ones(4)
        return np.array([1.0, (shape.width - 1) / 2.0, (shape.height - 1) / 2.0, 1.0])

    def pixel_bound(self, shape: GridShape) -> BudgetSpec:
        """Upper bounds in pixel units; components left out of the attack are bounded at zero."""
        units = self.slot_units(shape)
        b = self.budget
        enabled = set(self.components)
        return BudgetSpec(
            max_rotation=b.max_rotation if "rotation" in enabled else 0.0,
            max_translation_u=b.max_translation_u * units[1] if "translation" in enabled else 0.0,
            max_translation_v=b.max_translation_v * units[2] if "translation" in enabled else 0.0,
            max_scale_deviation=b.max_scale_deviation if "scale" in enabled else 0.0,
        )


@dataclass(frozen=True)
class AttackContext:
    """Everything an attack needs besides the sample: template, budget and config."""

    cfg: PGDConfig
    template: LandmarkTemplate
    budget: FlowBudget
    units: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)

    @classmethod
    def build(cls, cfg: PGDConfig, template: LandmarkTemplate) -> "AttackContext":
        budget = constraint.compute_budget(cfg.pixel_bound(template.shape), template)
        units = tuple(float(x) for x in cfg.slot_units(template.shape))
        return cls(cfg, template, budget, units)

    def project(self, theta: AffineParams) -> AffineParams:
        if not self.cfg.project:
            return theta
        return constraint.project(theta, self.budget, self.template)


@dataclass(frozen=True)
class AdversarialResult:
    theta_star: AffineParams
    theta_init: AffineParams
    theta_unprojected: AffineParams
    alpha: float
    loss_before: float
    loss_after: float
    steps_taken: int

    def pre_projection_deviation(self) -> float:
        return float(np.linalg.norm(self.theta_unprojected.as_array() - self.theta_init.as_array()))


def sample_init_theta(gen: np.random.Generator, ctx: AttackContext) -> AffineParams:
    cfg = ctx.cfg
    z = gen.standard_normal(4)
    values = np.array([
        cfg.init_other_std * z[0],
        cfg.init_other_std * z[1] * ctx.units[1],
        cfg.init_other_std * z[2] * ctx.units[2],
        cfg.init_scale_mean + cfg.init_scale_std * z[3],
    ])
    if values[3] <= 0.0:
        logger.warning("initial scale %.4g clamped to %.1g", values[3], MIN_SCALE)
        values[3] = MIN_SCALE
    theta = AffineParams.from_array(values).with_components(cfg.mask())
    return ctx.project(theta)


def sample_alpha(gen: np.random.Generator, cfg: PGDConfig) -> float:
    z = gen.standard_normal()
    if not cfg.random_alpha:
        return float(cfg.alpha_mean)
    return float(cfg.alpha_mean + cfg.alpha_std * z)


def _checked(value: float, what: str, sample_id) -> float:
    if not math.isfinite(value):
        raise NumericalAbort(f"non-finite {what} during attack", {"sample": sample_id})
    return value


def _tagged(call, sample_id):
    """Run a model call, naming the sample in any abort it raises."""
    try:
        return call()
    except NumericalAbort as e:
        context = dict(e.context)
        context.setdefault("sample", sample_id)
        raise NumericalAbort("non-finite value in the recognizer during attack", context) from e


def pgd_attack(model: Recognizer, x: np.ndarray, y: int, ctx: AttackContext,
               gen: np.random.Generator, sample_id=None) -> AdversarialResult:
    """Craft theta* for one sample."""
    x = warp.check_image(x)
    step_scale = ctx.cfg.mask() * np.asarray(ctx.units)
    theta0 = sample_init_theta(gen, ctx)
    alpha = sample_alpha(gen, ctx.cfg)

    theta = theta0
    stepped = theta0
    loss_before = None
    for _ in range(ctx.cfg.k):
        warped, jac = warp.warp_with_jacobian(x, theta)
        loss, grad_x = _tagged(lambda: model.loss_and_input_grad(warped, y), sample_id)
        _checked(loss, "loss", sample_id)
        if loss_before is None:
            loss_before = loss
        grad_theta = warp.loss_grad_wrt_theta(grad_x, jac)
        if not np.all(np.isfinite(grad_theta)):
            raise NumericalAbort("non-finite theta gradient during attack", {"sample": sample_id})
        values = theta.as_array() + alpha * np.sign(grad_theta) * step_scale
        if values[3] <= 0.0:
            logger.warning("sample %s: scale step to %.4g clamped to %.1g", sample_id, values[3], MIN_SCALE)
            values[3] = MIN_SCALE
        stepped = AffineParams.from_array(values)
        theta = ctx.project(stepped)

    final = warp.warp_image(x, theta)
    loss_after = _checked(_tagged(lambda: model.loss(final, y), sample_id), "loss", sample_id)
    if loss_before is None:
        loss_before = loss_after
    return AdversarialResult(theta, theta0, stepped, alpha, loss_before, loss_after, ctx.cfg.k)


def sample_stream(master_seed: int, iteration: int, sample_id: int) -> np.random.Generator:
    return rng_utils.stream(master_seed, "pgd", iteration, sample_id)


def augment_batch(model: Recognizer, images: np.ndarray, labels: Sequence[int], sample_ids: Sequence[int],
                  ctx: AttackContext, master_seed: int, iteration: int = 0,
                  workers: int = 1) -> Tuple[np.ndarray, List[AdversarialResult]]:
    """Attack every sample of a batch; each sample's stream is keyed by its id."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ContractViolation(f"batch must be a non-empty (n, c, h, w) array, got {images.shape}")
    if not (len(labels) == len(sample_ids) == images.shape[0]):
        raise ContractViolation("images, labels and sample ids must have equal length")

    def attack(n: int) -> AdversarialResult:
        sid = int(sample_ids[n])
        return pgd_attack(model, images[n], int(labels[n]), ctx, sample_stream(master_seed, iteration, sid), sid)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(attack, range(images.shape[0])))
    else:
        results = [attack(n) for n in range(images.shape[0])]
    warped = np.stack([warp.warp_image(images[n], r.theta_star) for n, r in enumerate(results)])
    return warped, results


def random_batch(images: np.ndarray, sample_ids: Sequence[int], ctx: AttackContext,
                 master_seed: int, iteration: int = 0) -> Tuple[np.ndarray, List[AffineParams]]:
    """Random spatial augmentation: theta_0 draws projected to S, no adversarial step."""
    thetas = [sample_init_theta(sample_stream(master_seed, iteration, int(sid)), ctx) for sid in sample_ids]
    warped = np.stack([warp.warp_image(img, th) for img, th in zip(images, thetas)])
    return warped, thetas
