import numpy as np
import numpy.testing as npt
import pytest

from volsdf.sdf import (
    Box,
    Complement,
    Intersection,
    Plane,
    SdfScene,
    Sphere,
    Torus,
    Translate,
    Union,
    eval_sdf,
    grad_sdf,
)

R = 3.0


def _scenes():
    return {
        "sphere": SdfScene(Sphere([0, 0, 0], 1.0), R),
        "two_sphere_union": SdfScene(Union((Sphere([-0.9, 0, 0], 0.6), Sphere([0.9, 0, 0], 0.6))), R),
        "box": SdfScene(Box([0, 0, 0], [0.7, 0.5, 0.6]), R),
        "torus": SdfScene(Torus([0, 0, 0], 1.0, 0.35), R),
        "plane": SdfScene(Plane([0, 0, 1], -0.5), R),
        "translated_box": SdfScene(Translate(Box([0, 0, 0], [0.3, 0.3, 0.3]), [0.5, -0.2, 0.1]), R),
        "intersection": SdfScene(Intersection((Sphere([0, 0, 0], 1.0), Box([0.5, 0, 0], [0.6, 0.6, 0.6]))), R),
        "carved": SdfScene(Intersection((Box([0, 0, 0], [0.8, 0.8, 0.8]), Complement(Sphere([0, 0, 0], 0.9)))), R),
    }


EXACT = ("sphere", "two_sphere_union", "box", "torus", "plane", "translated_box")


class TestExamples:
    def test_sphere_center(self):
        sc = _scenes()["sphere"]
        assert eval_sdf(sc, [0, 0, 0]) == -1.0

    def test_both_terms_equal(self):
        sc = _scenes()["sphere"]
        assert eval_sdf(sc, [2, 0, 0]) == 1.0

    def test_clamp_dominates_outside(self):
        sc = _scenes()["sphere"]
        assert eval_sdf(sc, [4, 0, 0]) == -1.0

    def test_sphere_gradient_radial(self):
        # at (0,0,2) the sphere and the clamp tie; the root branch wins the tie
        g, smooth = grad_sdf(_scenes()["sphere"], [0, 0, 2])
        npt.assert_allclose(g, [0, 0, 1])
        assert not smooth
        g, smooth = grad_sdf(_scenes()["sphere"], [0, 0, 1.5])
        npt.assert_allclose(g, [0, 0, 1])
        assert smooth

    def test_plane_gradient_constant(self):
        sc = SdfScene(Plane([0, 0, 1], 0.0), 10.0)
        g, smooth = grad_sdf(sc, [5, 5, -3])
        npt.assert_allclose(g, [0, 0, 1])
        assert smooth

    def test_union_gradient_matches_finite_difference(self):
        sc = _scenes()["two_sphere_union"]
        x = np.array([1.2, 0.4, -0.3])
        g, smooth = grad_sdf(sc, x)
        h = 1e-5
        fd = [(eval_sdf(sc, x + h * e) - eval_sdf(sc, x - h * e)) / (2 * h) for e in np.eye(3)]
        assert smooth
        npt.assert_allclose(g, fd, atol=1e-4)

    def test_box_values(self):
        b = Box([0, 0, 0], [1, 2, 3])
        npt.assert_allclose(b.eval(np.array([[0, 0, 0], [2, 0, 0], [2, 3, 0], [0.5, 0, 0]])),
                            [-1, 1, np.sqrt(2), -0.5])

    def test_torus_values(self):
        t = Torus([0, 0, 0], 1.0, 0.25)
        npt.assert_allclose(t.eval(np.array([[1, 0, 0], [0, 0, 0], [2, 0, 0], [0, 1, 0.5]])),
                            [-0.25, 0.75, 0.75, 0.25])

    def test_complement_flips_sign(self):
        s = Sphere([0, 0, 0], 1.0)
        p = np.array([[0.2, 0.3, 0.1], [2, 0, 0]])
        npt.assert_allclose(Complement(s).eval(p), -s.eval(p))

    def test_empty_scene_is_the_clamp(self):
        sc = SdfScene(None, 2.0)
        npt.assert_allclose(sc.eval(np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0]])), [2, 1, -1])


class TestValidation:
    @pytest.mark.parametrize("make", [
        lambda: Sphere([0, 0, 0], 0.0),
        lambda: Sphere([0, 0, 0], -1.0),
        lambda: Box([0, 0, 0], [1, 0, 1]),
        lambda: Torus([0, 0, 0], 1.0, 0.0),
        lambda: Torus([0, 0, 0], -1.0, 0.2),
        lambda: Plane([0, 0, 2], 0.0),
        lambda: Sphere([0, 0], 1.0),
        lambda: Sphere([0, 0, np.nan], 1.0),
        lambda: SdfScene(Sphere([0, 0, 0], 1.0), 0.0),
        lambda: Union(()),
    ])
    def test_rejects(self, make):
        with pytest.raises(ValueError):
            make()

    def test_plane_normal_tolerance(self):
        Plane([0, 0, 1 + 5e-10], 0.0)
        with pytest.raises(ValueError):
            Plane([0, 0, 1 + 1e-8], 0.0)


class TestProperties:
    @pytest.mark.parametrize("name", list(_scenes()))
    def test_one_lipschitz(self, name):
        sc = _scenes()[name]
        rng = np.random.default_rng(7)
        x = rng.uniform(-R, R, (100_000, 3))
        y = rng.uniform(-R, R, (100_000, 3))
        # half the pairs close together, where violations would show first
        y[::2] = x[::2] + rng.normal(scale=0.05, size=(50_000, 3))
        gap = np.abs(sc.eval(x) - sc.eval(y)) - np.linalg.norm(x - y, axis=1)
        assert gap.max() <= 1e-9

    @pytest.mark.parametrize("name", EXACT)
    def test_eikonal_at_smooth_points(self, name):
        sc = _scenes()[name]
        x = np.random.default_rng(1).uniform(-R, R, (20_000, 3))
        g, smooth = sc.grad(x)
        norms = np.linalg.norm(g, axis=1)[smooth]
        assert smooth.mean() > 0.99
        npt.assert_allclose(norms, 1.0, atol=1e-6)

    @pytest.mark.parametrize("name", list(_scenes()))
    def test_gradient_matches_central_differences(self, name):
        sc = _scenes()[name]
        x = np.random.default_rng(2).uniform(-R, R, (2000, 3))
        g, smooth = sc.grad(x)
        h = 1e-5
        fd = np.stack([(sc.eval(x + h * e) - sc.eval(x - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
        # keep points whose h-neighbourhood stays on one branch
        ok = smooth & (np.abs(np.linalg.norm(fd, axis=1) - np.linalg.norm(g, axis=1)) < 1e-3)
        assert ok.mean() > 0.98
        npt.assert_allclose(g[ok], fd[ok], atol=1e-4)

    @pytest.mark.parametrize("name", list(_scenes()))
    def test_clamp_outside_bounding_sphere(self, name):
        sc = _scenes()[name]
        u = np.random.default_rng(3).normal(size=(5000, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        x = u * np.random.default_rng(4).uniform(R, 10 * R, (5000, 1))
        assert np.all(sc.eval(x) <= 0.0)

    def test_tie_breaks_to_lowest_index(self):
        a, b = Sphere([-1, 0, 0], 0.5), Sphere([1, 0, 0], 0.5)
        g, smooth = Union((a, b)).grad(np.array([[0.0, 0.3, 0.0]]))
        ga, _ = a.grad(np.array([[0.0, 0.3, 0.0]]))
        npt.assert_array_equal(g, ga)
        assert not smooth[0]

    def test_sphere_center_flagged(self):
        _, smooth = Sphere([0, 0, 0], 1.0).grad(np.zeros((1, 3)))
        assert not smooth[0]

    def test_finite_everywhere(self):
        x = np.random.default_rng(5).uniform(-1e6, 1e6, (1000, 3))
        for sc in _scenes().values():
            assert np.all(np.isfinite(sc.eval(x)))
            assert np.all(np.isfinite(sc.grad(x)[0]))
