import numpy as np
import pytest

from windinr.baselines import (
    BaselineResult,
    FinetuneConfig,
    build_methods,
    full_finetune,
    idw_correct,
    isotropic_correct,
    no_obs_predict,
    partial_finetune,
    windinr_correct,
)
from windinr.correction import CorrectionConfig, Observation
from windinr.model import WindModel, compute_norm_stats, params_hash
from windinr.prior import estimate_prior, isotropic_prior
from windinr.storage import sha256_file
from windinr.synth import enumerate_case_params, generate_terrain, generate_wind_case


@pytest.fixture(scope="module")
def setup():
    terrain = generate_terrain(51, 16)
    case = generate_wind_case(terrain, enumerate_case_params(1, 11)[0],
                              n_hr_points=216, name="bl_case")
    mean, std = compute_norm_stats([case])
    model = WindModel.create(8, mean, std)
    rng = np.random.default_rng(9)
    model.params["decoder.head_out.W"] = rng.normal(
        size=model.params["decoder.head_out.W"].shape) * 0.05
    e = list(rng.normal(size=(8, 128)) * 0.3)
    prior = estimate_prior(e)
    prior_iso = isotropic_prior(e)
    return case, model, prior, prior_iso


def make_obs(case, n, rng=None, sigma=(0.5, 0.5, 0.2)):
    rng = rng or np.random.default_rng(4)
    idx = rng.choice(len(case.hr_points), n, replace=False)
    obs = []
    for i in idx:
        p = case.hr_points[i, :3]
        y = case.hr_points[i, 3:6]
        obs.append(Observation.full(p, y, sigma))
    return obs


class TestNoObs:
    def test_matches_predict_at(self, setup):
        case, model, prior, _ = setup
        res = no_obs_predict(case, model, prior)
        from windinr.correction import predict_at
        from windinr.prior import bias_correct

        z0 = bias_correct(model.no_obs_latent(case), prior)
        pts = case.hr_points[:5, :3]
        np.testing.assert_allclose(res.accessor(pts), predict_at(case, model, z0, pts),
                                   atol=1e-12)
        assert res.wall_time_s is None
        assert res.steps == 0

    def test_independent_of_observations_and_deterministic(self, setup):
        case, model, prior, _ = setup
        a = no_obs_predict(case, model, prior)
        b = no_obs_predict(case, model, prior)
        pts = case.hr_points[:4, :3]
        np.testing.assert_array_equal(a.accessor(pts), b.accessor(pts))


class TestIDW:
    def test_exact_at_observation_sites(self, setup):
        case, model, prior, _ = setup
        obs = make_obs(case, 5)
        res = idw_correct(case, model, prior, obs)
        pts = np.stack([o.p for o in obs])
        got = res.accessor(pts)
        want = np.stack([o.y for o in obs])
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_two_equidistant_sites_average(self, setup):
        case, model, prior, _ = setup
        # construct two observations symmetric about the query point
        p1 = np.array([0.3, 0.0, 0.5])
        p2 = np.array([-0.3, 0.0, 0.5])
        q = np.array([[0.0, 0.0, 0.5]])
        from windinr.correction import predict_at
        from windinr.prior import bias_correct

        z0 = bias_correct(model.no_obs_latent(case), prior)
        base = predict_at(case, model, z0, np.stack([p1, p2, q[0]]))
        r1 = np.array([1.0, 0.0, 0.0])
        r2 = np.array([3.0, 0.0, 0.0])
        obs = [Observation.full(p1, base[0] + r1), Observation.full(p2, base[1] + r2)]
        res = idw_correct(case, model, prior, obs)
        got = res.accessor(q)[0]
        np.testing.assert_allclose(got - base[2], (r1 + r2) / 2, atol=1e-10)

    def test_single_observation_constant_residual(self, setup):
        case, model, prior, _ = setup
        obs = make_obs(case, 1)
        res = idw_correct(case, model, prior, obs)
        from windinr.correction import predict_at
        from windinr.prior import bias_correct

        z0 = bias_correct(model.no_obs_latent(case), prior)
        rng = np.random.default_rng(3)
        pts = np.column_stack([rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6),
                               rng.uniform(0, 1, 6)])
        base = predict_at(case, model, z0, pts)
        corr = res.accessor(pts) - base
        np.testing.assert_allclose(corr, np.tile(corr[0], (6, 1)), atol=1e-10)

    def test_unobserved_component_unchanged(self, setup):
        case, model, prior, _ = setup
        p = case.hr_points[0, :3]
        o = Observation(p, [2.0, 1.0], np.array([True, True, False]), [0.25, 0.25])
        res = idw_correct(case, model, prior, [o])
        from windinr.correction import predict_at
        from windinr.prior import bias_correct

        z0 = bias_correct(model.no_obs_latent(case), prior)
        pts = case.hr_points[5:9, :3]
        base = predict_at(case, model, z0, pts)
        got = res.accessor(pts)
        np.testing.assert_array_equal(got[:, 2], base[:, 2])

    def test_empty_observations_rejected(self, setup):
        case, model, prior, _ = setup
        with pytest.raises(ValueError):
            idw_correct(case, model, prior, [])


class TestFinetune:
    def test_partial_zero_obs_unchanged(self, setup):
        case, model, prior, _ = setup
        before = params_hash(model.params)
        res = partial_finetune(case, model, [], prior)
        assert params_hash(model.params) == before
        assert res.steps == 0

    def test_partial_subset_contract(self, setup):
        case, model, prior, _ = setup
        before = params_hash(model.params)
        obs = make_obs(case, 6)
        partial_finetune(case, model, obs, prior, FinetuneConfig(steps=3))
        # original model untouched
        assert params_hash(model.params) == before

    def test_partial_huge_anchor_pins_params(self, setup):
        case, model, prior, _ = setup
        obs = make_obs(case, 6)
        res = partial_finetune(case, model, obs, prior,
                               FinetuneConfig(steps=5, anchor_weight=1e9))
        base = no_obs_predict(case, model, prior)
        pts = case.hr_points[10:16, :3]
        np.testing.assert_allclose(res.accessor(pts), base.accessor(pts), atol=1e-4)

    def test_full_zero_lr_identical_to_noobs(self, setup):
        case, model, prior, _ = setup
        obs = make_obs(case, 6)
        res = full_finetune(case, model, obs, prior, FinetuneConfig(steps=3, lr=0.0))
        base = no_obs_predict(case, model, prior)
        pts = case.hr_points[20:26, :3]
        np.testing.assert_allclose(res.accessor(pts), base.accessor(pts), atol=1e-12)

    def test_full_misfit_no_worse_than_start(self, setup):
        case, model, prior, _ = setup
        obs = make_obs(case, 8)
        res = full_finetune(case, model, obs, prior, FinetuneConfig(steps=10))
        pts = np.stack([o.p for o in obs])
        y = np.stack([o.y for o in obs])
        inv_r = 1.0 / np.stack([np.array([0.25, 0.25, 0.04]) for _ in obs])
        base = no_obs_predict(case, model, prior)

        def misfit(pred):
            return 0.5 * float((inv_r * (pred - y) ** 2).sum())

        assert misfit(res.accessor(pts)) <= misfit(base.accessor(pts)) + 1e-12

    def test_full_does_not_mutate_original(self, setup):
        case, model, prior, _ = setup
        before = params_hash(model.params)
        full_finetune(case, model, make_obs(case, 4), prior, FinetuneConfig(steps=2))
        assert params_hash(model.params) == before


class TestIso:
    def test_zero_obs_is_z0(self, setup):
        case, model, _, prior_iso = setup
        res = isotropic_correct(case, model, prior_iso, [])
        base_pts = case.hr_points[:3, :3]
        from windinr.correction import predict_at
        from windinr.prior import bias_correct

        z0 = bias_correct(model.no_obs_latent(case), prior_iso)
        np.testing.assert_allclose(res.accessor(base_pts),
                                   predict_at(case, model, z0, base_pts), atol=1e-12)

    def test_requires_isotropic_kind(self, setup):
        case, model, prior, _ = setup
        with pytest.raises(ValueError, match="isotropic"):
            isotropic_correct(case, model, prior, [])

    def test_deterministic(self, setup):
        case, model, _, prior_iso = setup
        obs = make_obs(case, 4)
        cfg = CorrectionConfig(steps=4)
        a = isotropic_correct(case, model, prior_iso, obs, cfg)
        b = isotropic_correct(case, model, prior_iso, obs, cfg)
        pts = case.hr_points[:4, :3]
        np.testing.assert_array_equal(a.accessor(pts), b.accessor(pts))


class TestInterface:
    def test_build_methods_uniform(self, setup):
        case, model, prior, prior_iso = setup
        methods = build_methods(model, prior, prior_iso,
                                CorrectionConfig(steps=2), FinetuneConfig(steps=2))
        obs = make_obs(case, 3)
        pts = case.hr_points[:3, :3]
        for name, fn in methods.items():
            res = fn(case, obs)
            assert isinstance(res, BaselineResult)
            assert res.method == name
            out = res.accessor(pts)
            assert out.shape == (3, 3)
            assert np.all(np.isfinite(out))

    def test_checkpoint_file_untouched(self, setup, tmp_path):
        case, model, prior, prior_iso = setup
        ckpt = tmp_path / "m.ckpt"
        pfile = tmp_path / "p.prior"
        model.save(ckpt)
        prior.save(pfile)
        h1, h2 = sha256_file(ckpt), sha256_file(pfile)
        methods = build_methods(model, prior, prior_iso,
                                CorrectionConfig(steps=2), FinetuneConfig(steps=2))
        obs = make_obs(case, 3)
        for fn in methods.values():
            fn(case, obs)
        assert sha256_file(ckpt) == h1
        assert sha256_file(pfile) == h2

    def test_unknown_method_rejected(self, setup):
        _, model, prior, prior_iso = setup
        with pytest.raises(ValueError, match="unknown"):
            build_methods(model, prior, prior_iso, include=("bogus",))
