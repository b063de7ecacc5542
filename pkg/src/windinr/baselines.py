"""Online-correction baselines sharing one field-accessor interface.

Every method consumes a case plus an observation list and produces a
``BaselineResult`` whose accessor maps query points (k, 3) to wind (k, 3).
All optimization-based methods run the same fixed step budget so wall-time
comparisons are like-for-like; reported times cover only the online update
loop (never field evaluation, artifact loading, or freeze checks).

Fine-tuning variants work on a private copy of the parameters, so the
persisted checkpoint and the in-memory model are never mutated.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .correction import (
    CorrectionConfig,
    Observation,
    _stack_observations,
    correct_latent,
    predict_at,
)
from .model import LatentState, WindModel, params_hash
from .optim import Adam
from .prior import PriorStats, bias_correct
from .synth import Case

METHOD_IDS = ("noobs", "idw", "iso", "partial_ft", "full_ft", "windinr")

PARTIAL_FT_BLOCKS = ("decoder.latent_seed", "decoder.head_out")


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 20
    lr: float = 1e-3
    anchor_weight: float = 1e-2  # partial variant only


@dataclass
class BaselineResult:
    method: str
    accessor: Callable[[np.ndarray], np.ndarray]
    wall_time_s: float | None  # None when no online update runs
    steps: int


def _noobs_latent(case: Case, model: WindModel, prior: PriorStats) -> LatentState:
    return bias_correct(model.no_obs_latent(case), prior)


def no_obs_predict(case: Case, model: WindModel, prior: PriorStats) -> BaselineResult:
    """Decode the bias-corrected initial latent; observations are ignored."""
    z0 = _noobs_latent(case, model, prior)

    def accessor(pts):
        return predict_at(case, model, z0, pts)

    return BaselineResult("noobs", accessor, None, 0)


def windinr_correct(case: Case, model: WindModel, prior: PriorStats,
                    observations: list[Observation],
                    config: CorrectionConfig = CorrectionConfig()) -> BaselineResult:
    z0 = _noobs_latent(case, model, prior)
    z_star, trace = correct_latent(z0, observations, prior, case, model, config)

    def accessor(pts):
        return predict_at(case, model, z_star, pts)

    wall = trace.wall_time_s if observations else None
    return BaselineResult("windinr", accessor, wall, trace.steps_run)


def isotropic_correct(case: Case, model: WindModel, prior_iso: PriorStats,
                      observations: list[Observation],
                      config: CorrectionConfig = CorrectionConfig()) -> BaselineResult:
    """Identical pipeline to the adaptive correction with the scalar prior."""
    if prior_iso.kind != "isotropic":
        raise ValueError("isotropic_correct requires an isotropic prior")
    res = windinr_correct(case, model, prior_iso, observations, config)
    return BaselineResult("iso", res.accessor, res.wall_time_s, res.steps)


def idw_correct(case: Case, model: WindModel, prior: PriorStats,
                observations: list[Observation], power: float = 2.0) -> BaselineResult:
    """Inverse-distance interpolation of observation residuals.

    Residuals relative to the no-observation prediction are interpolated in
    normalized 3-D coordinates with weights dist^-power over all observation
    sites (no neighbour cutoff); components nobody observed stay unchanged,
    and a query on top of a site reproduces its observed components exactly.
    """
    if not observations:
        raise ValueError("idw correction requires at least one observation")
    z0 = _noobs_latent(case, model, prior)
    obs_pts = np.stack([o.p for o in observations])

    t0 = time.perf_counter()
    pred_at_obs = predict_at(case, model, z0, obs_pts)
    resid = np.zeros((len(observations), 3))
    seen = np.zeros((len(observations), 3), dtype=bool)
    for i, o in enumerate(observations):
        resid[i, o.M] = o.y - pred_at_obs[i, o.M]
        seen[i, o.M] = True
    wall = time.perf_counter() - t0

    def accessor(pts):
        pts = np.atleast_2d(pts)
        base = predict_at(case, model, z0, pts)
        d2 = ((pts[:, None, :] - obs_pts[None, :, :]) ** 2).sum(axis=2)
        exact = d2 < 1e-24
        with np.errstate(divide="ignore"):
            w = np.where(exact, 0.0, d2) ** (-power / 2.0)
        w[exact] = 0.0  # zero-distance sites handled by the exact branch
        out = base.copy()
        for c in range(3):
            mask = seen[:, c]
            if not mask.any():
                continue
            wc = w[:, mask]
            rc = resid[mask, c]
            den = wc.sum(axis=1)
            corr = np.divide(wc @ rc, den, out=np.zeros(len(pts)), where=den > 0)
            ex = exact[:, mask]
            has_exact = ex.any(axis=1)
            if has_exact.any():
                first = np.argmax(ex[has_exact], axis=1)
                corr[has_exact] = rc[first]
            out[:, c] += corr
        return out

    return BaselineResult("idw", accessor, wall, 0)


def _misfit_node(tape: Tape, pred, obs_pack):
    _, y, inv_r = obs_pack
    resid = ad.sub(pred, tape.constant(y))
    return ad.mul(ad.sum_(ad.mul(ad.square(resid), inv_r)), 0.5)


def partial_finetune(case: Case, model: WindModel, observations: list[Observation],
                     prior: PriorStats,
                     config: FinetuneConfig = FinetuneConfig()) -> BaselineResult:
    """Tune only the latent-seed module and the final output layer.

    Minimizes the observation misfit plus an anchor penalty pinning the
    tuned subset to its pretrained values; every other block is bytewise
    untouched (hash-asserted).
    """
    z0 = _noobs_latent(case, model, prior)
    subset = [k for k in model.params
              if k.startswith(PARTIAL_FT_BLOCKS[0]) or k.startswith(PARTIAL_FT_BLOCKS[1])]
    if not observations:
        def accessor(pts):
            return predict_at(case, model, z0, pts)

        return BaselineResult("partial_ft", accessor, None, 0)

    work = WindModel(model.config, {k: v.copy() for k, v in model.params.items()},
                     model.norm_mean, model.norm_std)
    frozen_before = params_hash({k: v for k, v in work.params.items() if k not in subset})
    anchors = {k: work.params[k].copy() for k in subset}
    decode_fn = work.make_field(case, trainable=set(subset))
    obs_pack = _stack_observations(observations)
    obs_pts = obs_pack[0]
    opt = Adam({k: work.params[k] for k in subset}, lr=config.lr)
    best = (np.inf, {k: work.params[k].copy() for k in subset})

    t0 = time.perf_counter()
    for step in range(config.steps + 1):
        tape = Tape()
        pred = decode_fn(tape, obs_pts, tape.constant(z0.z))
        obj = _misfit_node(tape, pred, obs_pack)
        # anchor term over the subset leaves
        leaves = {n.name: n for n in tape.nodes if n.name in subset}
        for k in subset:
            dev = ad.sub(leaves[k], tape.constant(anchors[k]))
            obj = ad.add(obj, ad.mul(ad.sum_(ad.square(dev)), config.anchor_weight))
        val = float(obj.value)
        if val < best[0]:
            best = (val, {k: work.params[k].copy() for k in subset})
        if step < config.steps:
            grads = tape.gradient(obj, leaves)
            opt.step(grads)
    wall = time.perf_counter() - t0

    for k in subset:
        work.params[k] = best[1][k]
    frozen_after = params_hash({k: v for k, v in work.params.items() if k not in subset})
    if frozen_after != frozen_before:
        raise RuntimeError("partial fine-tuning mutated parameters outside the subset")

    def accessor(pts):
        return predict_at(case, work, z0, pts)

    return BaselineResult("partial_ft", accessor, wall, config.steps)


def full_finetune(case: Case, model: WindModel, observations: list[Observation],
                  prior: PriorStats,
                  config: FinetuneConfig = FinetuneConfig()) -> BaselineResult:
    """Tune every parameter online against the observation misfit.

    The context encoders participate, so the encode step re-runs inside the
    graph on every iteration; the pretrained model object is never touched.
    """
    z0 = _noobs_latent(case, model, prior)
    if not observations:
        def accessor(pts):
            return predict_at(case, model, z0, pts)

        return BaselineResult("full_ft", accessor, None, 0)

    work = WindModel(model.config, {k: v.copy() for k, v in model.params.items()},
                     model.norm_mean, model.norm_std)
    obs_pack = _stack_observations(observations)
    obs_pts = obs_pack[0]
    opt = Adam(work.params, lr=config.lr)
    best = (np.inf, {k: v.copy() for k, v in work.params.items()})

    t0 = time.perf_counter()
    for step in range(config.steps + 1):
        tape = Tape()
        pnodes = work.param_nodes(tape, trainable="all")
        ctx = work.encode_context(tape, pnodes, case)
        pred = work.decode(ctx, obs_pts, tape.constant(z0.z), pnodes)
        obj = _misfit_node(tape, pred, obs_pack)
        val = float(obj.value)
        if not np.isfinite(val):
            break  # divergence: stop early, best iterate is still returned
        if val < best[0]:
            best = (val, {k: v.copy() for k, v in work.params.items()})
        if step < config.steps:
            grads = tape.gradient(obj, pnodes)
            opt.step(grads)
    wall = time.perf_counter() - t0

    work = WindModel(model.config, best[1], model.norm_mean, model.norm_std)

    def accessor(pts):
        return predict_at(case, work, z0, pts)

    return BaselineResult("full_ft", accessor, wall, config.steps)


def build_methods(model: WindModel, prior: PriorStats, prior_iso: PriorStats | None,
                  corr_config: CorrectionConfig = CorrectionConfig(),
                  ft_config: FinetuneConfig = FinetuneConfig(),
                  include: tuple[str, ...] = METHOD_IDS,
                  ) -> dict[str, Callable[[Case, list[Observation]], BaselineResult]]:
    """Uniform (case, observations) -> BaselineResult callables per method id."""
    table = {
        "noobs": lambda case, obs: no_obs_predict(case, model, prior),
        "idw": lambda case, obs: idw_correct(case, model, prior, obs),
        "iso": lambda case, obs: isotropic_correct(case, model, prior_iso, obs, corr_config),
        "partial_ft": lambda case, obs: partial_finetune(case, model, obs, prior, ft_config),
        "full_ft": lambda case, obs: full_finetune(case, model, obs, prior, ft_config),
        "windinr": lambda case, obs: windinr_correct(case, model, prior, obs, corr_config),
    }
    unknown = set(include) - set(table)
    if unknown:
        raise ValueError(f"unknown method ids {sorted(unknown)}")
    if "iso" in include and prior_iso is None:
        raise ValueError("isotropic method requested without an isotropic prior")
    return {m: table[m] for m in include}
