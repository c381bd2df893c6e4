import io
import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volsdf.bounds import Ray, SampleTrack, global_bound
from volsdf.density import DensityParams
from volsdf.sampler import (
    TRACE_COLUMNS,
    SamplerConfig,
    allocate,
    beta_plus_init,
    bisect_beta,
    inverse_cdf_sample,
    ray_rng,
    run_algorithm1,
    sample_rays,
    stratified_targets,
    upsample,
    write_trace_csv,
)
from volsdf.sdf import Box, SdfScene, Sphere, Torus

SPHERE = SdfScene(Sphere([0, 0, 0], 1.0), 3.0)


def _random_rays(n, seed, radius=3.0):
    rng = np.random.default_rng(seed)
    o = rng.normal(size=(n, 3))
    o *= radius / 1.1 / np.linalg.norm(o, axis=1, keepdims=True)
    d = rng.uniform(-0.8, 0.8, (n, 3)) - o
    return o, d / np.linalg.norm(d, axis=1, keepdims=True)


class TestConfig:
    def test_defaults(self):
        c = SamplerConfig()
        assert (c.epsilon, c.n_init, c.m_final, c.max_outer_iters, c.max_bisect_iters) == (0.1, 128, 64, 5, 10)

    @pytest.mark.parametrize("kw", [
        {"epsilon": 0.0}, {"n_init": 1}, {"m_final": 1}, {"max_outer_iters": 0},
        {"rng_seed": -1}, {"final_sample_mode": "sobol"},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)


class TestBetaPlusInit:
    def test_decoupled_example(self):
        p = DensityParams(1e-3, alpha=1000.0, coupled=False)
        bp = beta_plus_init(p, 6.0, 128, 0.1)
        npt.assert_allclose(bp, 36000.0 / (508.0 * math.log(1.1)), rtol=1e-12)
        npt.assert_allclose(bp, 743.531718, rtol=1e-6)
        ray = Ray.for_scene([0, 0, 2.5], [0, 0, -1], SPHERE)
        tr = SampleTrack.uniform(ray, SPHERE, 128, p)
        assert global_bound(tr, p.with_beta(bp)) <= 0.1

    def test_coupled_moves_alpha(self):
        p = DensityParams(1e-3)
        bp = beta_plus_init(p, 6.0, 128, 0.1)
        npt.assert_allclose(bp, math.sqrt(36.0 / (4 * 127 * math.log(1.1))), rtol=1e-12)
        ray = Ray.for_scene([0, 0, 2.5], [0, 0, -1], SPHERE)
        tr = SampleTrack.uniform(ray, SPHERE, 128, p)
        assert global_bound(tr, p.with_beta(bp)) <= 0.1

    def test_large_epsilon_clamps_to_beta(self):
        p = DensityParams(0.2)
        assert beta_plus_init(p, 6.0, 128, 1e300) == 0.2

    def test_certifies_random_tracks(self):
        rng = np.random.default_rng(4)
        scenes = [SPHERE, SdfScene(Box([0, 0, 0], [0.6, 0.5, 0.7]), 3.0), SdfScene(Torus([0, 0, 0], 1, 0.3), 3.0)]
        for i in range(100):
            scene = scenes[i % 3]
            coupled = bool(i % 2)
            beta = 10 ** rng.uniform(-4, 0)
            p = DensityParams(beta) if coupled else DensityParams(beta, 10 ** rng.uniform(-1, 4), False)
            o, d = _random_rays(1, i)
            ray = Ray(o[0], d[0], rng.uniform(1, 8))
            n, eps = int(rng.integers(2, 600)), 10 ** rng.uniform(-4, 0)
            bp = beta_plus_init(p, ray.far, n, eps)
            assert global_bound(SampleTrack.uniform(ray, scene, n, p), p.with_beta(bp)) <= eps


class TestAllocate:
    def test_single_interval(self):
        npt.assert_array_equal(allocate([0, 0, 1.0, 0], 4), [[0, 0, 4, 0]])

    def test_largest_remainder(self):
        npt.assert_array_equal(allocate([2.0, 1.0], 3), [[2, 1]])

    def test_argmax_gets_a_knot(self):
        c = allocate([1.0] + [0.9] * 20, 5)[0]
        assert c[0] >= 1 and c.sum() == 5

    def test_all_zero_falls_back(self):
        npt.assert_array_equal(allocate([0.0, 0.0, 0.0, 0.0], 8), [[2, 2, 2, 2]])
        npt.assert_array_equal(allocate([0.0, 0.0], 4, widths=[3.0, 1.0]), [[3, 1]])

    def test_infinite_bounds(self):
        npt.assert_array_equal(allocate([np.inf, 1.0, np.inf], 4), [[2, 0, 2]])

    @given(st.lists(st.floats(0, 1e6), min_size=1, max_size=60), st.integers(1, 300))
    @settings(max_examples=200, deadline=None)
    def test_counts(self, bounds, n_add):
        c = allocate(bounds, n_add)[0]
        assert c.sum() == n_add and np.all(c >= 0)
        b = np.asarray(bounds)
        if b.max() > 0:
            assert c[np.argmax(b)] >= 1

    def test_upsample_equispaced(self):
        p = DensityParams(0.1)
        ray = Ray([0, 0, 2.5], [0, 0, -1], 6.0)
        tr = SampleTrack.build(ray, SPHERE, [0.0, 1.0, 2.5, 6.0], p)
        up = upsample(tr, [0.0, 1.0, 0.0], 4, ray, SPHERE)
        npt.assert_allclose(up.t, [0.0, 1.0, 1.3, 1.6, 1.9, 2.2, 2.5, 6.0])
        npt.assert_allclose(up.d, SPHERE.eval(ray.at(up.t)))


class TestBisect:
    def _track(self):
        ray = Ray.for_scene([0, 0, 2.5], [0.1, 0, -1], SPHERE)
        return SampleTrack.uniform(ray, SPHERE, 400, DensityParams(1e-3))

    def test_certified(self):
        tr = self._track()
        b = bisect_beta(tr, 1e-3, 0.5, 0.1, 10)
        assert global_bound(tr, tr.params.with_beta(b)) <= 0.1
        assert 1e-3 <= b <= 0.5
        # the answer lies on the dyadic grid of the bracket
        k = (b - 1e-3) / (0.5 - 1e-3) * 2**10
        npt.assert_allclose(k, round(k), atol=1e-6)

    def test_endpoint_exactly_at_epsilon(self):
        tr = self._track()
        eps = global_bound(tr, tr.params.with_beta(0.3))
        assert bisect_beta(tr, 1e-3, 0.3, eps, 0) == 0.3

    def test_bracket_violation(self):
        tr = self._track()
        with pytest.raises(ValueError):
            bisect_beta(tr, 0.5, 0.6, 0.1, 10)
        with pytest.raises(ValueError):
            bisect_beta(tr, 1e-3, 2e-3, 0.1, 10)


class TestInverseCdf:
    def test_linear_regular(self):
        tr = SampleTrack(np.array([0.0, 6.0]), np.array([0.0, 0.0]), DensityParams(0.1))
        s = inverse_cdf_sample(tr, 0.1, 8, "regular")
        npt.assert_allclose(s, 6.0 * (np.arange(1, 9) - 0.5) / 8)

    def test_transparent_falls_back_to_uniform(self):
        tr = SampleTrack(np.linspace(0, 2, 5), np.full(5, 1e3), DensityParams(0.01))
        s = inverse_cdf_sample(tr, 0.01, 4, "regular")
        npt.assert_allclose(s, [0.25, 0.75, 1.25, 1.75])

    def test_stratified_targets(self):
        u = stratified_targets(1000, "random-stratified", np.random.default_rng(0))
        j = np.arange(1, 1001)
        assert np.all((u > (j - 1) / 1000) & (u <= j / 1000))

    def test_reproducible(self):
        a = stratified_targets(16, "random-stratified", ray_rng(7, 3))
        b = stratified_targets(16, "random-stratified", ray_rng(7, 3))
        c = stratified_targets(16, "random-stratified", ray_rng(7, 4))
        npt.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_samples_concentrate_at_surface(self):
        rep, s = run_algorithm1(Ray.for_scene([0, 0, 2.5], [0, 0, -1], SPHERE), SPHERE, DensityParams(1e-3),
                                SamplerConfig())
        assert rep.converged
        # transition band of the opacity: a few beta around the hit at t = 1.5
        assert np.all(np.abs(s - 1.5) < 10 * 1e-3 * math.log(1e3))


class TestAlgorithm:
    def test_contract(self):
        cfg = SamplerConfig()
        o, d = _random_rays(300, 1)
        res = sample_rays(o, d, 6.0, SPHERE, DensityParams(1e-3), cfg, trace=True)
        for i in range(300):
            rep = res.report(i, DensityParams(1e-3))
            assert rep.certified_bound <= cfg.epsilon + 1e-12
            assert global_bound(rep.track) <= cfg.epsilon + 1e-12
            assert rep.beta_plus >= 1e-3
            assert rep.samples.shape == (64,)
            assert np.all(np.diff(rep.samples) >= 0) and rep.samples[0] >= 0 and rep.samples[-1] <= 6.0
            assert rep.total_knots <= cfg.n_init * (rep.outer_iters_used + 1)
            bps = [row[2] for row in rep.trace]
            assert all(b1 <= b0 for b0, b1 in zip(bps, bps[1:]))
            assert rep.converged == (rep.beta_plus == 1e-3)

    def test_deterministic_and_batch_independent(self):
        cfg = SamplerConfig(rng_seed=99)
        o, d = _random_rays(40, 2)
        whole = sample_rays(o, d, 6.0, SPHERE, DensityParams(1e-3), cfg)
        again = sample_rays(o, d, 6.0, SPHERE, DensityParams(1e-3), cfg)
        npt.assert_array_equal(whole.samples, again.samples)
        for i in (0, 17, 39):
            one = sample_rays(o[i:i + 1], d[i:i + 1], 6.0, SPHERE, DensityParams(1e-3), cfg, indices=[i])
            npt.assert_array_equal(one.samples[0], whole.samples[i])
            assert one.beta_plus[0] == whole.beta_plus[i]

    def test_empty_scene_one_iteration(self):
        scene = SdfScene(None, 3.0)
        rep, s = run_algorithm1(Ray.for_scene([0, 0, 0], [1, 0, 0], scene), scene, DensityParams(0.1),
                                SamplerConfig())
        assert rep.outer_iters_used == 1
        assert rep.certified_bound <= 0.1

    def test_regular_mode(self):
        cfg = SamplerConfig(final_sample_mode="regular")
        ray = Ray.for_scene([0, 0, 2.5], [0, 0.2, -1], SPHERE)
        a = run_algorithm1(ray, SPHERE, DensityParams(1e-2), cfg, index=0)[1]
        b = run_algorithm1(ray, SPHERE, DensityParams(1e-2), cfg, index=5)[1]
        npt.assert_array_equal(a, b)

    def test_decoupled_density(self):
        p = DensityParams(0.01, alpha=50.0, coupled=False)
        o, d = _random_rays(50, 3)
        res = sample_rays(o, d, 6.0, SPHERE, p, SamplerConfig())
        assert np.all(res.certified_bound <= 0.1)
        assert np.all(res.beta_plus >= 0.01)

    def test_trace_csv(self):
        rep, _ = run_algorithm1(Ray.for_scene([0, 0, 2.5], [0, 0, -1], SPHERE), SPHERE, DensityParams(1e-3),
                                SamplerConfig(), trace=True)
        buf = io.StringIO()
        write_trace_csv(rep.trace, buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == ",".join(TRACE_COLUMNS)
        assert len(lines) == rep.outer_iters_used + 2
        assert lines[1].startswith("0,128,")
