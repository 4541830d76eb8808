import math

import numpy as np
import pytest

from aroface import geometry
from aroface.errors import ContractViolation
from aroface.geometry import AffineParams, CenteredPoint, GridShape


class TestCenteredCoordinates:
    def test_corner_of_3x3(self):
        p = geometry.to_centered(0, 0, GridShape(3, 3))
        assert (p.u, p.v) == (-1.0, 1.0)

    def test_center_maps_to_origin(self):
        p = geometry.to_centered(1, 1, GridShape(3, 3))
        assert (p.u, p.v) == (0.0, 0.0)

    def test_corner_of_112(self):
        p = geometry.to_centered(0, 0, GridShape(112, 112))
        assert (p.u, p.v) == (-55.5, 55.5)

    @pytest.mark.parametrize("p, expected", [
        (CenteredPoint(0.0, 0.0), (1.0, 1.0)),
        (CenteredPoint(-1.0, 1.0), (0.0, 0.0)),
    ])
    def test_from_centered_3x3(self, p, expected):
        assert geometry.from_centered(p, GridShape(3, 3)) == expected

    def test_from_centered_112(self):
        assert geometry.from_centered(CenteredPoint(-55.5, 55.5), GridShape(112, 112)) == (0.0, 0.0)

    def test_round_trip_on_integer_grid(self):
        shape = GridShape(5, 8)
        for i in range(shape.height):
            for j in range(shape.width):
                assert geometry.from_centered(geometry.to_centered(i, j, shape), shape) == (i, j)

    def test_grid_coordinates_matches_pointwise(self):
        shape = GridShape(4, 7)
        u, v = geometry.grid_coordinates(shape)
        assert u.shape == v.shape == (4, 7)
        for i in range(shape.height):
            for j in range(shape.width):
                p = geometry.to_centered(i, j, shape)
                assert (u[i, j], v[i, j]) == (p.u, p.v)

    def test_rejects_empty_grid(self):
        with pytest.raises(ContractViolation):
            GridShape(0, 4)


class TestAffineParams:
    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ContractViolation):
            AffineParams(0.0, 0.0, 0.0, 0.0)

    def test_rejects_non_finite(self):
        with pytest.raises(ContractViolation):
            AffineParams(float("nan"), 0.0, 0.0, 1.0)

    def test_lam_is_scale_deviation(self):
        assert AffineParams(scale=1.25).lam == 0.25

    def test_with_components_resets_masked_slots_to_identity(self):
        theta = AffineParams(0.3, 1.0, -2.0, 1.5)
        kept = theta.with_components(np.array([0.0, 1.0, 1.0, 0.0]))
        assert kept == AffineParams(0.0, 1.0, -2.0, 1.0)


class TestForwardInverse:
    def test_identity(self):
        p = CenteredPoint(2.5, -7.0)
        assert geometry.forward(AffineParams.identity(), p) == p
        assert geometry.inverse(AffineParams.identity(), p) == p

    def test_quarter_turn(self):
        q = geometry.forward(AffineParams(phi=math.pi / 2), CenteredPoint(1.0, 0.0))
        assert q.u == pytest.approx(0.0, abs=1e-15)
        assert q.v == pytest.approx(1.0)

    def test_scale_then_shift(self):
        q = geometry.forward(AffineParams(0.0, 1.0, 0.0, 2.0), CenteredPoint(1.0, 1.0))
        assert (q.u, q.v) == (3.0, 2.0)

    def test_inverse_subtracts_shift(self):
        q = geometry.inverse(AffineParams(du=3.0), CenteredPoint(0.0, 0.0))
        assert (q.u, q.v) == (-3.0, 0.0)

    def test_round_trip_random(self, rng):
        for _ in range(200):
            theta = AffineParams(rng.uniform(-math.pi, math.pi), rng.normal(0, 5), rng.normal(0, 5),
                                 rng.uniform(0.5, 2.0))
            p = CenteredPoint(*rng.normal(0, 30, size=2))
            back = geometry.forward(theta, geometry.inverse(theta, p))
            there = geometry.inverse(theta, geometry.forward(theta, p))
            assert np.linalg.norm(back.as_array() - p.as_array()) <= 1e-10
            assert np.linalg.norm(there.as_array() - p.as_array()) <= 1e-10

    def test_pure_rotation_inverse_is_negated_angle(self, rng):
        phi = 0.7
        p = CenteredPoint(*rng.normal(size=2))
        assert np.allclose(geometry.inverse(AffineParams(phi=phi), p).as_array(),
                           geometry.forward(AffineParams(phi=-phi), p).as_array(), atol=1e-12)

    def test_pure_scale_inverse_is_reciprocal(self):
        p = CenteredPoint(4.0, -2.0)
        q = geometry.inverse(AffineParams(scale=2.0), p)
        assert (q.u, q.v) == (2.0, -1.0)


class TestInverseJacobian:
    def test_matches_central_differences(self, rng):
        u, v = rng.normal(0, 5, size=(2, 6))
        theta = AffineParams(0.2, 0.5, -1.0, 1.1)
        du_dt, dv_dt = geometry.inverse_coords_jacobian(theta, u, v)
        h = 1e-6
        for slot in range(4):
            plus, minus = theta.as_array(), theta.as_array()
            plus[slot] += h
            minus[slot] -= h
            up, vp = geometry.inverse_coords(AffineParams.from_array(plus), u, v)
            um, vm = geometry.inverse_coords(AffineParams.from_array(minus), u, v)
            np.testing.assert_allclose(du_dt[:, slot], (up - um) / (2 * h), rtol=1e-6, atol=1e-8)
            np.testing.assert_allclose(dv_dt[:, slot], (vp - vm) / (2 * h), rtol=1e-6, atol=1e-8)


class TestWrapAngle:
    @pytest.mark.parametrize("phi, expected", [
        (0.0, 0.0),
        (2 * math.pi + 0.5, 0.5),
        (-math.pi, math.pi),
    ])
    def test_representative(self, phi, expected):
        assert geometry.wrap_angle(phi) == pytest.approx(expected, abs=1e-12)
