import numpy as np
import pytest

from mcls.core import BoxConstraints, ReferenceSolution, project

BOX = BoxConstraints(np.array([0.0, 1.0]), np.array([2.0, 3.0]))


def test_project_clamps():
    np.testing.assert_array_equal(project([3.0, 0.5], BOX), [2.0, 1.0])


def test_project_identity_on_feasible():
    x = np.array([1.2, 2.9])
    np.testing.assert_array_equal(project(x, BOX), x)


def test_project_idempotent_monotone_nonexpansive(rng):
    pts = 5.0 * rng.standard_normal((200, 2))
    for a, b in zip(pts[:-1], pts[1:]):
        pa, pb = project(a, BOX), project(b, BOX)
        np.testing.assert_array_equal(project(pa, BOX), pa)
        assert np.max(np.abs(pa - pb)) <= np.max(np.abs(a - b)) + 1e-15
        hi = np.maximum(a, b)
        assert np.all(project(hi, BOX) >= pa)


def test_project_shape_mismatch():
    with pytest.raises(ValueError):
        project([1.0, 2.0, 3.0], BOX)


def test_box_validation():
    with pytest.raises(ValueError):
        BoxConstraints(np.array([1.0]), np.array([0.0]))
    assert BOX.contains([1.0, 1.0]) and not BOX.contains([1.0, 0.0])
    assert BoxConstraints.unbounded(3).dim == 3


def test_reference_requires_symmetric_precond():
    with pytest.raises(ValueError):
        ReferenceSolution(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    ref = ReferenceSolution(np.zeros(2), np.eye(2))
    np.testing.assert_array_equal(ref.s_matrix, np.eye(2))
    ref2 = ReferenceSolution(np.zeros(2), np.eye(2), hessian=2 * np.eye(2))
    np.testing.assert_array_equal(ref2.s_matrix, 2 * np.eye(2))
