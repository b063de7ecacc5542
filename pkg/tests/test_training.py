import numpy as np
import pytest

from windinr import autodiff as ad
from windinr.autodiff import Graph, finite_diff_check
from windinr.model import WindModel, compute_norm_stats, params_hash
from windinr.synth import WindCaseParams, generate_terrain, generate_wind_case
from windinr.training import (
    StageConfig,
    TrainingDiverged,
    loss_beta,
    loss_ref,
    sample_support_query,
    train_stage1,
    train_stage2,
    _stage1_case_loss,
    _stage2_case_loss,
)


def make_cases(n=2, n_hr=128, res=16, seed=5):
    terrain = generate_terrain(seed, res)
    from windinr.synth import enumerate_case_params

    cases = []
    for i, p in enumerate(enumerate_case_params(n, seed)):
        cases.append(generate_wind_case(terrain, p, n_hr_points=n_hr, name=f"case_{i:04d}"))
    return cases


@pytest.fixture(scope="module")
def tiny_cases():
    return make_cases(n=2, n_hr=128)


@pytest.fixture(scope="module")
def tiny_model(tiny_cases):
    mean, std = compute_norm_stats(tiny_cases)
    return WindModel.create(3, mean, std)


class TestSampling:
    def test_exhaustive_partition(self, tiny_cases):
        case = tiny_cases[0]
        small = case
        small.hr_points = case.hr_points[:5]
        sup, qry = sample_support_query(small, 2, 3, seed=0)
        assert sorted(np.concatenate([sup, qry]).tolist()) == [0, 1, 2, 3, 4]
        small.hr_points = case.hr_points

    def test_deterministic(self, tiny_cases):
        a = sample_support_query(tiny_cases[0], 16, 32, seed=[1, 2])
        b = sample_support_query(tiny_cases[0], 16, 32, seed=[1, 2])
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_disjoint(self, tiny_cases):
        sup, qry = sample_support_query(tiny_cases[0], 32, 64, seed=7)
        assert set(sup.tolist()).isdisjoint(qry.tolist())

    def test_proportional_downscale(self, tiny_cases):
        sup, qry = sample_support_query(tiny_cases[0], 2048, 8192, seed=0)
        assert len(sup) + len(qry) <= len(tiny_cases[0].hr_points)
        assert len(qry) == pytest.approx(4 * len(sup), rel=0.05)

    def test_insufficient_points(self, tiny_cases):
        case = tiny_cases[0]
        keep = case.hr_points
        case.hr_points = keep[:1]
        with pytest.raises(ValueError, match="points"):
            sample_support_query(case, 2048, 8192, seed=0)
        case.hr_points = keep


class TestLossValues:
    def test_ref_perfect_zero(self):
        p = np.zeros((10, 3))
        assert loss_ref(p, p, np.zeros(8)) == 0.0

    def test_ref_latent_penalty(self):
        p = np.zeros((10, 3))
        z = np.full(4, 5.0)  # ||z||^2 = 100
        assert loss_ref(p, p, z, lambda_ref=1e-4) == pytest.approx(0.01)

    def test_ref_constant_error_pools_components(self):
        e = np.array([1.0, 2.0, 3.0])
        pred = np.tile(e, (7, 1))
        labels = np.zeros((7, 3))
        assert loss_ref(pred, labels, np.zeros(2), 0.0) == pytest.approx((e @ e) / 3)

    def test_beta_aligned_perfect_zero(self):
        p = np.ones((4, 3))
        z = np.arange(5.0)
        assert loss_beta(p, p, z, z) == 0.0

    def test_beta_alignment_term(self):
        p = np.zeros((4, 3))
        z_bg = np.array([2.0, 0.0])
        z_ref = np.array([0.0, 0.0])  # squared distance 4
        assert loss_beta(p, p, z_bg, z_ref, lambda_align=1.0) == pytest.approx(4.0)

    def test_beta_zero_align_is_pure_mse(self):
        pred = np.ones((4, 3))
        labels = np.zeros((4, 3))
        got = loss_beta(pred, labels, np.ones(3), np.zeros(3), lambda_align=0.0)
        assert got == pytest.approx(1.0)


class TestStage1:
    def test_zero_lr_keeps_params(self, tiny_cases, tiny_model):
        import copy

        model = WindModel(tiny_model.config, copy.deepcopy(tiny_model.params),
                          tiny_model.norm_mean, tiny_model.norm_std)
        cfg = StageConfig.desk(m_sup=16, m_qry=32, epochs=2, lr=0.0, weight_decay=0.0)
        before = params_hash(model.params)
        train_stage1(tiny_cases, [], model, cfg)
        assert params_hash(model.params) == before

    def test_single_case_overfit(self, tiny_cases):
        mean, std = compute_norm_stats(tiny_cases[:1])
        model = WindModel.create(11, mean, std)
        cfg = StageConfig.desk(m_sup=24, m_qry=48, epochs=300, batch_size=1, seed=1)
        tape_losses = train_stage1(tiny_cases[:1], [], model, cfg).curve
        first = tape_losses[0]["train_loss"]
        last = np.mean([r["train_loss"] for r in tape_losses[-10:]])
        assert last < first / 10

    def test_best_checkpoint_contract(self, tiny_cases, tiny_model):
        import copy

        model = WindModel(tiny_model.config, copy.deepcopy(tiny_model.params),
                          tiny_model.norm_mean, tiny_model.norm_std)
        cfg = StageConfig.desk(m_sup=16, m_qry=32, epochs=4, seed=2)
        res = train_stage1(tiny_cases[:1], tiny_cases[1:], model, cfg)
        assert res.best_val <= res.final_val + 1e-12


class TestStage2:
    def test_freeze_bitwise(self, tiny_cases, tiny_model):
        import copy

        model = WindModel(tiny_model.config, copy.deepcopy(tiny_model.params),
                          tiny_model.norm_mean, tiny_model.norm_std)
        frozen = params_hash({k: v for k, v in model.params.items()
                              if not k.startswith("noobs_predictor")})
        cfg = StageConfig.desk(m_sup=16, m_qry=32, epochs=2, seed=3)
        train_stage2(tiny_cases, [], model, cfg)
        after = params_hash({k: v for k, v in model.params.items()
                             if not k.startswith("noobs_predictor")})
        assert frozen == after

    def test_zero_epochs_params_unchanged(self, tiny_cases, tiny_model):
        import copy

        model = WindModel(tiny_model.config, copy.deepcopy(tiny_model.params),
                          tiny_model.norm_mean, tiny_model.norm_std)
        before = params_hash(model.params)
        cfg = StageConfig.desk(m_sup=16, m_qry=32, epochs=0)
        train_stage2(tiny_cases, [], model, cfg)
        assert params_hash(model.params) == before

    def test_alignment_gap_decreases(self, tiny_cases, tiny_model):
        import copy

        model = WindModel(tiny_model.config, copy.deepcopy(tiny_model.params),
                          tiny_model.norm_mean, tiny_model.norm_std)
        cfg = StageConfig.desk(m_sup=24, m_qry=48, epochs=30, seed=4)

        def gap(mdl):
            gaps = []
            for ci, case in enumerate(tiny_cases):
                sup, _ = sample_support_query(case, cfg.m_sup, cfg.m_qry, [99, ci])
                z_ref = mdl.reference_latent(case, case.hr_points[sup, :3],
                                             case.hr_points[sup, 3:6]).z
                z_bg = mdl.no_obs_latent(case).z
                gaps.append(np.linalg.norm(z_bg - z_ref))
            return np.mean(gaps)

        before = gap(model)
        res = train_stage2(tiny_cases, [], model, cfg)
        assert gap(model) < before

    def test_determinism(self, tiny_cases, tiny_model):
        import copy

        runs = []
        for _ in range(2):
            model = WindModel(tiny_model.config, copy.deepcopy(tiny_model.params),
                              tiny_model.norm_mean, tiny_model.norm_std)
            cfg = StageConfig.desk(m_sup=16, m_qry=32, epochs=2, seed=5)
            train_stage2(tiny_cases, [], model, cfg)
            runs.append(params_hash(model.params))
        assert runs[0] == runs[1]


class TestLossGradients:
    def _loss_graph(self, model, case, stage):
        sup_idx, qry_idx = sample_support_query(case, 8, 16, seed=0)

        def build(lv):
            tape = next(iter(lv.values())).tape
            pnodes = {}
            for k, v in model.params.items():
                pnodes[k] = lv[k] if k in lv else tape.constant(v)
            if stage == 1:
                loss, _ = _stage1_case_loss(model, tape, pnodes, case,
                                            sup_idx, qry_idx, 1e-4)
            else:
                loss, _, _ = _stage2_case_loss(model, tape, pnodes, case,
                                               sup_idx, qry_idx, 1.0)
            return loss

        return build

    @pytest.mark.parametrize("stage,leaf", [
        (1, "decoder.film1.ln.b"),
        (1, "reference_encoder.score.b"),
        (2, "noobs_predictor.l3.b"),
    ])
    def test_fd_matches(self, tiny_cases, tiny_model, stage, leaf):
        rng = np.random.default_rng(17)
        import copy

        model = WindModel(tiny_model.config, copy.deepcopy(tiny_model.params),
                          tiny_model.norm_mean, tiny_model.norm_std)
        # random nonzero head so gradients are generic
        model.params["decoder.head_out.W"] = rng.normal(
            size=model.params["decoder.head_out.W"].shape) * 0.05
        g = Graph(self._loss_graph(model, tiny_cases[0], stage), [leaf])
        g.forward({leaf: model.params[leaf] + rng.normal(size=model.params[leaf].shape) * 0.01})
        entries = range(0, model.params[leaf].size, max(1, model.params[leaf].size // 24))
        assert finite_diff_check(g, leaf, 1e-5, entries=entries) < 1e-4
