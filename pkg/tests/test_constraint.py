import math

import numpy as np
import pytest

from aroface import constraint
from aroface.constraint import BudgetSpec, FlowBudget, LandmarkTemplate
from aroface.errors import ContractViolation, ProjectionError
from aroface.geometry import AffineParams, GridShape


def _random_template(rng, size: int = 112) -> LandmarkTemplate:
    half = (size - 1) / 2.0
    return LandmarkTemplate.from_array(rng.uniform(-0.8 * half, 0.8 * half, size=(5, 2)), GridShape(size, size))


def _random_theta(rng) -> AffineParams:
    return AffineParams(rng.normal(0, 0.05), rng.normal(0, 1.0), rng.normal(0, 1.0), 1.0 + rng.normal(0, 0.03))


class TestTemplate:
    def test_shipped_fixture(self, template_112):
        assert template_112.shape == GridShape(112, 112)
        assert len(template_112.points) == 5
        # eyes above the mouth corners
        assert template_112.points[0].v > template_112.points[3].v

    def test_rescaled_follows_axis_extent(self, template_112):
        small = template_112.rescaled(GridShape(64, 32))
        np.testing.assert_allclose(small.as_array()[:, 0], template_112.as_array()[:, 0] * 32 / 112)
        np.testing.assert_allclose(small.as_array()[:, 1], template_112.as_array()[:, 1] * 64 / 112)

    def test_needs_five_points(self):
        with pytest.raises(ContractViolation):
            LandmarkTemplate.from_array(np.zeros((4, 2)), GridShape(10, 10))

    def test_points_inside_grid(self):
        with pytest.raises(ContractViolation):
            LandmarkTemplate.from_array(np.array([[0, 0]] * 4 + [[6.0, 0.0]]), GridShape(10, 10))

    def test_load_skips_comments(self, tmp_path):
        path = tmp_path / "tpl.txt"
        path.write_text("# fixture\n8 8\n0 0\n1 1\n-1 1\n2 -2\n-2 -2\n", encoding="utf-8")
        tpl = constraint.load_template(path)
        assert tpl.shape == GridShape(8, 8)
        assert tpl.points[3].u == 2.0

    def test_load_malformed(self, tmp_path):
        path = tmp_path / "tpl.txt"
        path.write_text("8 8\n0 0 0\n", encoding="utf-8")
        with pytest.raises(ContractViolation):
            constraint.load_template(path)


class TestLandmarkFlow:
    def test_pure_translation(self, template_112):
        flows = constraint.landmark_flow(AffineParams(du=3.0), template_112)
        np.testing.assert_allclose(flows, np.tile([-3.0, 0.0], (5, 1)), atol=1e-12)

    def test_closed_forms(self, rng):
        for _ in range(100):
            tpl = _random_template(rng)
            r = np.hypot(tpl.as_array()[:, 0], tpl.as_array()[:, 1])
            phi = rng.uniform(0.0, 0.5)
            scale = rng.uniform(0.5, 1.5)
            shift = rng.normal(size=2)
            rot = np.hypot(*constraint.landmark_flow(AffineParams(phi=phi), tpl).T)
            sca = np.hypot(*constraint.landmark_flow(AffineParams(scale=scale), tpl).T)
            tra = np.hypot(*constraint.landmark_flow(AffineParams(du=shift[0], dv=shift[1]), tpl).T)
            np.testing.assert_allclose(rot, 2 * r * math.sin(phi / 2), rtol=0, atol=1e-9)
            np.testing.assert_allclose(sca, r * abs(1 / scale - 1), rtol=0, atol=1e-9)
            np.testing.assert_allclose(tra, np.hypot(*shift), rtol=0, atol=1e-9)


class TestBudget:
    def test_translation_only(self, template_112):
        budget = constraint.compute_budget(BudgetSpec(max_rotation=0.0, max_translation_u=0.4,
                                                      max_translation_v=0.0, max_scale_deviation=0.0),
                                           template_112)
        assert budget.total == pytest.approx(2.0, abs=1e-12)

    def test_zero_bound(self, template_112):
        budget = constraint.compute_budget(BudgetSpec(max_rotation=0.0, max_translation_u=0.0,
                                                      max_translation_v=0.0, max_scale_deviation=0.0),
                                           template_112)
        assert budget.total == 0.0

    def test_default_bound_matches_flow_at_upper_theta(self, template_112):
        bound = BudgetSpec()
        budget = constraint.compute_budget(bound, template_112)
        expected = np.hypot(*constraint.landmark_flow(AffineParams(0.01, 0.01, 0.01, 1.01), template_112).T)
        np.testing.assert_allclose(budget.per_landmark, expected, rtol=0, atol=1e-12)
        assert budget.total == pytest.approx(math.fsum(expected), abs=1e-12)

    def test_scale_bound_below_one(self):
        with pytest.raises(ValueError):
            BudgetSpec(max_scale_deviation=1.0)

    def test_negative_per_landmark(self):
        with pytest.raises(ContractViolation):
            FlowBudget.from_per_landmark([1.0, 1.0, -1.0, 1.0, 1.0])


class TestFeasibility:
    budget = FlowBudget.from_per_landmark([1.0] * 5)

    def test_identity(self, template_112):
        assert constraint.is_feasible(AffineParams.identity(), self.budget, template_112)

    def test_boundary_translation(self, template_112):
        assert constraint.is_feasible(AffineParams(du=0.6, dv=0.8), self.budget, template_112)

    def test_double_budget_translation(self, template_112):
        assert not constraint.is_feasible(AffineParams(du=1.2, dv=1.6), self.budget, template_112)


class TestProject:
    def test_feasible_unchanged(self, template_112):
        theta = AffineParams(0.0, 0.1, -0.1, 1.0)
        budget = FlowBudget.from_per_landmark([1.0] * 5)
        assert constraint.project(theta, budget, template_112) is theta

    def test_translation_closed_form(self, template_112):
        budget = FlowBudget.from_per_landmark([0.5] * 5)
        theta = AffineParams(du=3.0, dv=-4.0)
        out = constraint.project(theta, budget, template_112)
        shrink = budget.total / (5 * 5.0)
        assert out.du == pytest.approx(3.0 * shrink, abs=1e-9)
        assert out.dv == pytest.approx(-4.0 * shrink, abs=1e-9)
        assert (out.phi, out.scale) == (0.0, 1.0)

    def test_zero_budget_collapses_to_identity(self, template_112):
        budget = FlowBudget.from_per_landmark([0.0] * 5)
        assert constraint.project(AffineParams(0.2, 1.0, 1.0, 1.1), budget, template_112) == AffineParams.identity()

    def test_random_soundness_tightness_idempotence(self, rng, template_112):
        budget = constraint.compute_budget(BudgetSpec(), template_112)
        for _ in range(1000):
            theta = _random_theta(rng)
            out = constraint.project(theta, budget, template_112)
            flow = constraint.total_flow(out, template_112)
            assert flow - budget.total <= 1e-9
            if not constraint.is_feasible(theta, budget, template_112):
                assert abs(flow - budget.total) <= 1e-6
            again = constraint.project(out, budget, template_112)
            np.testing.assert_allclose(again.as_array(), out.as_array(), rtol=0, atol=1e-9)

    def test_non_monotone_ray_aborts(self, template_112, monkeypatch):
        monkeypatch.setattr(constraint, "_total_flow", lambda theta, pts: 10.0 if theta.du == 0.5 else 2.0 * theta.du)
        budget = FlowBudget.from_per_landmark([0.2] * 5)
        with pytest.raises(ProjectionError):
            constraint.project(AffineParams(du=1.0), budget, template_112)


class TestComponentMask:
    @pytest.mark.parametrize("components, expected", [
        (["rotation"], [1, 0, 0, 0]),
        (["translation"], [0, 1, 1, 0]),
        (["scale"], [0, 0, 0, 1]),
        (["rotation", "translation", "scale"], [1, 1, 1, 1]),
        ([], [0, 0, 0, 0]),
    ])
    def test_slots(self, components, expected):
        np.testing.assert_array_equal(constraint.component_mask(components), expected)

    def test_unknown(self):
        with pytest.raises(ContractViolation):
            constraint.component_mask(["shear"])
