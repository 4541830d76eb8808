"""
Finite-difference verification of every analytic gradient in the training path.

Three suites: the warp Jacobian d x'/d theta at single pixels, the recognizer's
parameter and input gradients on a tiny model, and the end-to-end dL/d theta
of the loss taken through the warp and the model. A trial passes when the
analytic and central-difference values agree to a relative error of 1e-3 or
an absolute error of 1e-6.
"""

import logging
from typing import Callable, Dict, List, Optional

import numpy as np
from pydantic import BaseModel

from aroface import geometry, warp
from aroface.geometry import AffineParams, GridShape, THETA_SLOTS
from aroface.harness import reports
from aroface.harness.config import RunConfig
from aroface.recognizer import ModelParams, ModelSpec, Recognizer, backward, init_params
from aroface.utils import rng as rng_utils
from aroface.warp import WarpJacobian

logger = logging.getLogger(__name__)

REL_TOL = 1e-3
ABS_FLOOR = 1e-6
PASS_FRACTION = 0.95
WARP_STEP = 1e-5
PARAM_STEP = 1e-5
THETA_STEP = 1e-6
# Source coordinates closer than this to a cell edge are skipped by the warp suite.
KINK_MARGIN = 0.05

GRID = GridShape(8, 8)
TINY_MODEL = ModelSpec(kind="conv", input_channels=1, height=GRID.height, width=GRID.width,
                       conv_channels=[2, 3], kernel_size=3, stride=2, embedding_dim=4, num_classes=3)


class GradcheckEntry(BaseModel):
    component: str
    trials: int
    passed: int
    worst_rel_error: float

    @property
    def pass_fraction(self) -> float:
        return self.passed / self.trials if self.trials else 1.0

    @property
    def ok(self) -> bool:
        return self.pass_fraction >= PASS_FRACTION


class GradcheckReport(BaseModel):
    n_trials: int
    seed: int
    entries: List[GradcheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.ok for e in self.entries)

    def failures(self) -> List[str]:
        return [e.component for e in self.entries if not e.ok]


class _Tally:
    def __init__(self):
        self.results: Dict[str, List[float]] = {}

    def add(self, component: str, analytic: float, numeric: float) -> None:
        diff = abs(analytic - numeric)
        scale = max(abs(analytic), abs(numeric))
        rel = diff / scale if scale > 0 else 0.0
        # a pass under the absolute floor counts as zero relative error
        self.results.setdefault(component, []).append(0.0 if diff <= ABS_FLOOR else rel)

    def entries(self) -> List[GradcheckEntry]:
        return [GradcheckEntry(component=name, trials=len(errs), passed=sum(e <= REL_TOL for e in errs),
                               worst_rel_error=max(errs, default=0.0))
                for name, errs in self.results.items()]


def _random_theta(gen: np.random.Generator) -> AffineParams:
    z = gen.standard_normal(4)
    return AffineParams(0.1 * z[0], 0.5 * z[1], 0.5 * z[2], 1.0 + 0.05 * z[3])


def _bumped(theta: AffineParams, slot: int, h: float) -> AffineParams:
    values = theta.as_array()
    values[slot] += h
    return AffineParams.from_array(values)


def corrupted(jac: WarpJacobian, slot: Optional[int]) -> WarpJacobian:
    """Jacobian with one slot deliberately wrong; used as a negative control."""
    if slot is None:
        return jac
    values = jac.values.copy()
    values[..., slot] = values[..., slot] * 1.5 + 0.01
    return WarpJacobian(values)


def _smooth_pixels(theta: AffineParams, shape: GridShape) -> np.ndarray:
    """Flat indices of output pixels whose source point sits well inside one interior cell."""
    u, v = geometry.grid_coordinates(shape)
    uq, vq = geometry.inverse_coords(theta, u, v)
    col = uq + (shape.width - 1) / 2.0
    row = (shape.height - 1) / 2.0 - vq
    fc, fr = col - np.floor(col), row - np.floor(row)
    ok = ((fc > KINK_MARGIN) & (fc < 1 - KINK_MARGIN) & (fr > KINK_MARGIN) & (fr < 1 - KINK_MARGIN)
          & (col > 0) & (col < shape.width - 1) & (row > 0) & (row < shape.height - 1))
    return np.flatnonzero(ok.reshape(-1))


def warp_suite(tally: _Tally, n_trials: int, gen: np.random.Generator, corrupt_slot: Optional[int]) -> None:
    for slot, name in enumerate(THETA_SLOTS):
        done = 0
        while done < n_trials:
            x = gen.standard_normal((int(gen.integers(1, 4)), GRID.height, GRID.width))
            theta = _random_theta(gen)
            candidates = _smooth_pixels(theta, GRID)
            if candidates.size == 0:
                continue
            flat = int(gen.choice(candidates))
            i, j = divmod(flat, GRID.width)
            c = int(gen.integers(0, x.shape[0]))
            jac = corrupted(warp.warp_param_jacobian(x, theta), corrupt_slot)
            plus = warp.warp_image(x, _bumped(theta, slot, WARP_STEP))[c, i, j]
            minus = warp.warp_image(x, _bumped(theta, slot, -WARP_STEP))[c, i, j]
            tally.add(f"warp.{name}", float(jac.values[c, i, j, slot]), (plus - minus) / (2 * WARP_STEP))
            done += 1


def _tiny_batch(gen: np.random.Generator, spec: ModelSpec, n: int = 2):
    x = gen.standard_normal((n, spec.input_channels, spec.height, spec.width))
    y = gen.integers(0, spec.num_classes, size=n)
    return x, y


def recognizer_suite(tally: _Tally, n_trials: int, gen: np.random.Generator, cfg: RunConfig) -> None:
    params = init_params(TINY_MODEL, int(gen.integers(0, 2 ** 31)))
    names = list(params.arrays())

    def loss_with(p: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
        return backward(p, x, y, cfg.margin).loss

    for _ in range(n_trials):
        x, y = _tiny_batch(gen, TINY_MODEL)
        result = backward(params, x, y, cfg.margin)
        name = names[int(gen.integers(0, len(names)))]
        arrays = params.arrays()
        idx = tuple(int(gen.integers(0, s)) for s in arrays[name].shape)
        numeric = []
        for h in (PARAM_STEP, -PARAM_STEP):
            bumped = arrays[name].copy()
            bumped[idx] += h
            numeric.append(loss_with(params.replace({**arrays, name: bumped}), x, y))
        tally.add(f"recognizer.{name}", float(result.grads[name][idx]), (numeric[0] - numeric[1]) / (2 * PARAM_STEP))

        idx = tuple(int(gen.integers(0, s)) for s in x.shape)
        numeric = []
        for h in (PARAM_STEP, -PARAM_STEP):
            bumped = x.copy()
            bumped[idx] += h
            numeric.append(loss_with(params, bumped, y))
        tally.add("recognizer.input", float(result.grad_input[idx]), (numeric[0] - numeric[1]) / (2 * PARAM_STEP))


def end_to_end_suite(tally: _Tally, n_trials: int, gen: np.random.Generator, cfg: RunConfig,
                     corrupt_slot: Optional[int]) -> None:
    model = Recognizer(init_params(TINY_MODEL, int(gen.integers(0, 2 ** 31))), cfg.margin)
    for slot, name in enumerate(THETA_SLOTS):
        for _ in range(n_trials):
            x, y = _tiny_batch(gen, TINY_MODEL, n=1)
            x, y = x[0], int(y[0])
            theta = _random_theta(gen)
            warped, jac = warp.warp_with_jacobian(x, theta)
            _, grad_x = model.loss_and_input_grad(warped, y)
            analytic = warp.loss_grad_wrt_theta(grad_x, corrupted(jac, corrupt_slot))[slot]
            plus = model.loss(warp.warp_image(x, _bumped(theta, slot, THETA_STEP)), y)
            minus = model.loss(warp.warp_image(x, _bumped(theta, slot, -THETA_STEP)), y)
            tally.add(f"end_to_end.{name}", float(analytic), (plus - minus) / (2 * THETA_STEP))


def gradcheck(cfg: RunConfig, n_trials: int = 100, seed: int = 0, corrupt: Optional[str] = None) -> GradcheckReport:
    """Run every suite with `n_trials` trials per component.

    `corrupt` names a theta slot (phi, du, dv or scale) whose analytic warp
    Jacobian is deliberately falsified.
    """
    corrupt_slot = THETA_SLOTS.index(corrupt) if corrupt is not None else None
    tally = _Tally()
    if n_trials > 0:
        suites: List[Callable[[np.random.Generator], None]] = [
            lambda g: warp_suite(tally, n_trials, g, corrupt_slot),
            lambda g: recognizer_suite(tally, n_trials, g, cfg),
            lambda g: end_to_end_suite(tally, n_trials, g, cfg, corrupt_slot),
        ]
        for n, suite in enumerate(suites):
            suite(rng_utils.stream(seed, "gradcheck", n))
    report = GradcheckReport(n_trials=n_trials, seed=seed, entries=tally.entries())
    for name in report.failures():
        logger.warning("gradient check failed for %s", name)
    return report


def format_gradcheck(report: GradcheckReport) -> str:
    rows = [(e.component, e.trials, e.passed, e.worst_rel_error, e.ok) for e in report.entries]
    verdict = "PASS" if report.passed else "FAIL: " + ", ".join(report.failures())
    return (reports.format_table(("component", "trials", "passed", "worst_rel", "ok"), rows,
                                 title=f"gradient check (seed {report.seed})")
            + f"\n{verdict}\n")
