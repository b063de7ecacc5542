"""Numerical verification suites behind the ``selfcheck`` subcommand.

Three independent cross-checks of the core math:

* gradient suite: analytic gradients of both training losses and of the
  correction objective against central finite differences;
* linearized-oracle suite: on random linear synthetic decoders, the
  normal-equation and gain-form closed solutions must coincide, and the
  iterative correction must converge to them given a large step budget;
* prior-arithmetic suite: shrinkage identity, hand-computed example,
  Cholesky feasibility, and the mean-shifted-equivalence identity.

Each suite returns (name, passed, detail) rows so callers can print one
line per criterion.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tape, finite_diff_check
from .correction import (
    CorrectionConfig,
    Observation,
    correct_latent,
    linearized_update,
    objective,
)
from .linalg import cholesky_factor
from .model import WindModel, compute_norm_stats
from .prior import PriorStats, bias_correct, estimate_prior, isotropic_prior
from .synth import enumerate_case_params, generate_terrain, generate_wind_case
from .training import _stage1_case_loss, _stage2_case_loss, sample_support_query
from .model import LatentState


class LinearFieldModel:
    """Synthetic decoder that is exactly linear in the latent.

    decode(p, z) = G(p) z + c(p) with G and c smooth in p, so the correction
    objective is a quadratic whose minimizer has a closed form.
    """

    def __init__(self, d: int, seed: int, scale: float = 0.6):
        rng = np.random.default_rng(seed)
        self.d = d
        self.T = rng.normal(size=(4, 3, d)) * scale / np.sqrt(d)
        self.C = rng.normal(size=(4, 3)) * scale
        self.params = {"linear_stub": np.zeros(1)}

    def matrices(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(pts)
        feats = np.column_stack([np.ones(len(pts)), pts])  # (n, 4)
        G = np.einsum("nf,fcd->ncd", feats, self.T)
        c = feats @ self.C.reshape(4, -1)
        return G, c.reshape(-1, 3)

    def make_field(self, case):
        def decode_fn(tape: Tape, pts: np.ndarray, z_node):
            G, c = self.matrices(pts)
            flat = tape.constant(G.reshape(-1, self.d))
            z2 = ad.reshape(z_node, (self.d, 1))
            out = ad.reshape(ad.matmul(flat, z2), (len(G), 3))
            return ad.add(out, tape.constant(c))

        return decode_fn


def random_prior(d: int, rng, spread: float = 0.5) -> PriorStats:
    e = rng.normal(size=(max(d + 2, 6), d)) * spread
    return estimate_prior(list(e))


def random_observations(rng, n_obs: int, components="mixed") -> list[Observation]:
    obs = []
    for _ in range(n_obs):
        p = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 1)])
        if components == "full":
            mask = np.ones(3, bool)
        else:
            mask = rng.random(3) < 0.7
            if not mask.any():
                mask[rng.integers(3)] = True
        k = int(mask.sum())
        sig = np.array([0.5, 0.5, 0.2])[mask]
        obs.append(Observation(p, rng.normal(size=k), mask, sig**2))
    return obs


# ---------------------------------------------------------------------------
# suite 1: gradients


def _tiny_setup(seed: int):
    terrain = generate_terrain(seed, 16)
    params = enumerate_case_params(1, seed)[0]
    case = generate_wind_case(terrain, params, n_hr_points=27, name=f"chk_{seed}")
    mean, std = compute_norm_stats([case])
    model = WindModel.create(seed, mean, std)
    rng = np.random.default_rng([seed, 55])
    # randomize the zero-initialized head so gradients are generic
    model.params["decoder.head_out.W"] = rng.normal(
        size=model.params["decoder.head_out.W"].shape) * 0.05
    model.params["decoder.head_out.b"] = rng.normal(size=3) * 0.05
    return case, model, rng


_GRAD_LEAVES = [
    "decoder.film0.ln.g",
    "decoder.head_out.b",
    "reference_encoder.score.b",
    "noobs_predictor.l3.b",
    "decoder.ln_proj.b",
]


def _probe(model, leaf: str, n: int = 20) -> range:
    """Deterministic stride over a leaf's entries (full FD on every entry of
    every parameter would blow the runtime budget without adding power)."""
    size = model.params[leaf].size
    return range(0, size, max(1, size // n))


def suite_gradients(n_instances: int = 21, step: float = 1e-5,
                    tol: float = 1e-4) -> list[tuple[str, bool, str]]:
    rows = []
    per = max(1, n_instances // 3)
    worst = {"stage1": 0.0, "stage2": 0.0, "objective": 0.0}
    for i in range(per):
        case, model, rng = _tiny_setup(100 + i)
        sup_idx, qry_idx = sample_support_query(case, 4, 8, seed=[i, 1])
        leaf = _GRAD_LEAVES[i % len(_GRAD_LEAVES)]

        def build_s1(lv):
            tape = lv[leaf].tape
            p = {k: (lv[k] if k in lv else tape.constant(v))
                 for k, v in model.params.items()}
            loss, _ = _stage1_case_loss(model, tape, p, case, sup_idx, qry_idx, 1e-4)
            return loss

        g = Graph(build_s1, [leaf])
        g.forward({leaf: model.params[leaf] + rng.normal(size=model.params[leaf].shape) * 0.02})
        worst["stage1"] = max(worst["stage1"],
                              finite_diff_check(g, leaf, step, entries=_probe(model, leaf)))

        leaf2 = "noobs_predictor.l3.b" if i % 2 == 0 else "noobs_predictor.l1.b"

        def build_s2(lv):
            tape = lv[leaf2].tape
            p = {k: (lv[k] if k in lv else tape.constant(v))
                 for k, v in model.params.items()}
            loss, _, _ = _stage2_case_loss(model, tape, p, case, sup_idx, qry_idx, 1.0)
            return loss

        g2 = Graph(build_s2, [leaf2])
        g2.forward({leaf2: model.params[leaf2] + rng.normal(size=model.params[leaf2].shape) * 0.02})
        worst["stage2"] = max(worst["stage2"],
                              finite_diff_check(g2, leaf2, step, entries=_probe(model, leaf2)))

        d = model.config.latent_dim
        prior = random_prior(d, rng)
        obs = random_observations(rng, 2)
        z0 = rng.normal(size=d) * 0.2
        decode_fn = model.make_field(case)
        from .correction import _objective_node, _stack_observations

        def build_j(lv):
            tape = lv["xi"].tape
            return _objective_node(tape, lv["xi"], z0, decode_fn,
                                   _stack_observations(obs), prior, None)

        gj = Graph(build_j, ["xi"])
        gj.forward({"xi": rng.normal(size=d) * 0.1})
        worst["objective"] = max(
            worst["objective"],
            finite_diff_check(gj, "xi", step, entries=range(0, d, 5)))
    for name in ("stage1", "stage2", "objective"):
        rows.append((f"gradient/{name}", worst[name] < tol,
                     f"max rel err {worst[name]:.2e} over {per} instances (tol {tol:g})"))
    return rows


# ---------------------------------------------------------------------------
# suite 2: linearized oracle


def suite_linearized_oracle(n_instances: int = 50, seed: int = 0,
                            converge_tol: float = 1e-6) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    worst_gap = 0.0
    worst_conv = 0.0
    ok = True
    for i in range(n_instances):
        d = int(rng.integers(2, 17))
        n_obs = int(rng.integers(1, 9))
        stub = LinearFieldModel(d, int(rng.integers(1 << 30)))
        prior = random_prior(d, rng)
        obs = random_observations(rng, n_obs)
        z0 = rng.normal(size=d) * 0.3
        try:
            dz = linearized_update(z0, obs, prior, None, stub)  # checks gain form
        except FloatingPointError as exc:
            return [("oracle/forms-agree", False, str(exc)),
                    ("oracle/iterative-converges", False, "skipped")]
        cfg = CorrectionConfig(steps=2000)
        z_star, _ = correct_latent(z0, obs, prior, None, stub, cfg)
        gap = float(np.linalg.norm(z_star.z - (z0 + dz)))
        worst_conv = max(worst_conv, gap)
        ok = ok and gap <= converge_tol
    rows = [("oracle/forms-agree", True,
             f"normal-equation vs gain form within 1e-8 on {n_instances} instances"),
            ("oracle/iterative-converges", ok,
             f"max |iterative - closed form| = {worst_conv:.2e} "
             f"(tol {converge_tol:g}, 2000-step budget)")]
    return rows


# ---------------------------------------------------------------------------
# suite 3: prior arithmetic and mean-shift equivalence


def suite_prior_arithmetic(seed: int = 0) -> list[tuple[str, bool, str]]:
    rows = []
    # hand-computed shrinkage example
    stats = estimate_prior([np.array([1.0, 0.0]), np.array([3.0, 0.0])])
    expect_B = np.array([[2.0001, 0.0], [0.0, 1e-4]])
    hand_ok = (np.allclose(stats.b_z, [2.0, 0.0], atol=1e-12)
               and np.allclose(stats.sigma_z, [[2.0, 0.0], [0.0, 0.0]], atol=1e-12)
               and np.allclose(stats.B_z, expect_B, atol=1e-12))
    rows.append(("prior/hand-example", hand_ok,
                 "b_z=(2,0), B_z=[[2.0001,0],[0,1e-4]] reproduced to 1e-12"))

    rng = np.random.default_rng(seed)
    ident_ok = True
    chol_ok = True
    for _ in range(20):
        d = int(rng.integers(2, 24))
        e = list(rng.normal(size=(int(rng.integers(2, 12)), d)))
        st = estimate_prior(e)
        recon = (1 - st.rho) * st.sigma_z + st.rho * np.diag(np.diag(st.sigma_z)) \
            + st.eps * np.eye(d)
        ident_ok = ident_ok and np.array_equal(st.B_z, recon)
        try:
            L = cholesky_factor(st.B_z)
            chol_ok = chol_ok and bool(np.min(np.diag(L)) >= np.sqrt(st.eps) - 1e-12)
        except Exception:
            chol_ok = False
    rows.append(("prior/shrinkage-identity", ident_ok,
                 "B_z equals (1-rho) Sigma + rho diag(Sigma) + eps I entrywise"))
    rows.append(("prior/cholesky-feasible", chol_ok,
                 "Cholesky succeeds with pivots >= sqrt(eps)"))

    # mean-shift equivalence on linear decoders
    worst = 0.0
    for i in range(20):
        d = int(rng.integers(2, 13))
        stub = LinearFieldModel(d, 300 + i)
        prior = random_prior(d, rng)
        obs = random_observations(rng, int(rng.integers(1, 6)))
        z_bg = LatentState(rng.normal(size=d) * 0.4, "no_obs_raw")
        z0 = bias_correct(z_bg, prior)
        dz_zero = linearized_update(z0.z, obs, prior, None, stub)
        dz_mean = linearized_update(z_bg.z, obs, prior, None, stub,
                                    prior_mean=-prior.b_z)
        gap = float(np.linalg.norm((z0.z + dz_zero) - (z_bg.z + dz_mean)))
        worst = max(worst, gap)
    rows.append(("prior/mean-shift-equivalence", worst <= 1e-8,
                 f"bias-absorbed vs explicit-mean corrected latents differ by "
                 f"{worst:.2e} (tol 1e-8)"))
    return rows


def run_all(verbose: bool = True) -> bool:
    suites = [
        ("gradients", suite_gradients),
        ("linearized-oracle", suite_linearized_oracle),
        ("prior-arithmetic", suite_prior_arithmetic),
    ]
    all_ok = True
    for _, fn in suites:
        for name, passed, detail in fn():
            all_ok = all_ok and passed
            if verbose:
                print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return all_ok
