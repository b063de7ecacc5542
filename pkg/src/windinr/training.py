"""Two-stage offline training.

Stage 1 jointly fits the context encoders, the privileged reference encoder,
and the decoder: the reference latent is inferred from a labelled support
set and the reconstruction loss is taken on a disjoint query set, plus a
small L2 penalty on the latent. Stage 2 freezes everything from stage 1 and
fits only the deployable no-observation predictor, combining reconstruction
under the frozen decoder with alignment to the per-step reference latent.

Reconstruction losses pool the squared normalized error over query points
and components jointly (divide by m_qry * 3), matching the RMSE convention
used by the evaluation harness.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .model import WindModel, params_hash
from .optim import adamw
from .synth import Case


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the global step for diagnostics."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


class FrozenBlockMutated(RuntimeError):
    """A stage-2 update touched stage-1 parameters."""


@dataclass(frozen=True)
class StageConfig:
    m_sup: int = 2048
    m_qry: int = 8192
    lambda_ref: float = 1e-4
    lambda_align: float = 1.0
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 2
    epochs: int = 30
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("m_sup", "m_qry", "lambda_ref", "lambda_align", "lr",
                     "weight_decay", "batch_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def desk(cls, **overrides) -> "StageConfig":
        """Laptop-scale defaults: smaller point budgets, same proportions."""
        base = dict(m_sup=512, m_qry=2048, epochs=30)
        base.update(overrides)
        return cls(**base)


STAGE1_BLOCKS = {"terrain_encoder", "lr_encoder", "reference_encoder", "decoder"}
STAGE2_BLOCKS = {"noobs_predictor"}


def sample_support_query(case: Case, m_sup: int, m_qry: int,
                         seed) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint support/query index sets, without replacement, seeded.

    When the case holds fewer points than m_sup + m_qry both sizes are
    scaled down proportionally.
    """
    n = len(case.hr_points)
    if m_sup + m_qry > n:
        scale = n / (m_sup + m_qry)
        m_sup = int(m_sup * scale)
        m_qry = int(m_qry * scale)
    if m_sup < 1 or m_qry < 1:
        raise ValueError(f"case {case.name}: {n} points cannot supply "
                         f"support+query sets")
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, m_sup + m_qry, replace=False)
    return idx[:m_sup], idx[m_sup:]


def loss_ref(pred_norm: np.ndarray, labels_norm: np.ndarray, z_ref: np.ndarray,
             lambda_ref: float = 1e-4) -> float:
    """Pooled MSE over points and components plus lambda * ||z_ref||^2."""
    mse = float(np.mean((pred_norm - labels_norm) ** 2))
    return mse + lambda_ref * float(z_ref @ z_ref)


def loss_beta(pred_norm: np.ndarray, labels_norm: np.ndarray, z_bg: np.ndarray,
              z_ref: np.ndarray, lambda_align: float = 1.0) -> float:
    """Pooled MSE plus lambda * ||z_bg - z_ref||^2 (frozen-decoder stage)."""
    mse = float(np.mean((pred_norm - labels_norm) ** 2))
    d = z_bg - z_ref
    return mse + lambda_align * float(d @ d)


def _mse_node(pred, labels_norm_const):
    return ad.mean_(ad.square(ad.sub(pred, labels_norm_const)))


@dataclass
class TrainResult:
    model: WindModel
    curve: list[dict]
    best_val: float
    final_val: float


def _case_rng(seed, stage, epoch, case_index):
    return [seed, stage, epoch, case_index]


def _stage1_case_loss(model: WindModel, tape: Tape, pnodes, case: Case,
                      sup_idx, qry_idx, lam):
    ctx = model.encode_context(tape, pnodes, case)
    sup = case.hr_points[sup_idx]
    qry = case.hr_points[qry_idx]
    z_ref = model.reference_encode(ctx, sup[:, :3], sup[:, 3:6], pnodes)
    pred = model.decode(ctx, qry[:, :3], z_ref, pnodes)
    pred_n = ad.mul(ad.sub(pred, model.norm_mean), 1.0 / model.norm_std)
    labels_n = tape.constant(model.normalize(qry[:, 3:6]))
    return ad.add(_mse_node(pred_n, labels_n),
                  ad.mul(ad.sum_(ad.square(z_ref)), lam)), z_ref


def _stage2_case_loss(model: WindModel, tape: Tape, pnodes, case: Case,
                      sup_idx, qry_idx, lam_align):
    ctx = model.encode_context(tape, pnodes, case)
    sup = case.hr_points[sup_idx]
    qry = case.hr_points[qry_idx]
    z_ref = model.reference_encode(ctx, sup[:, :3], sup[:, 3:6], pnodes)
    z_bg = model.predict_no_obs(ctx, pnodes)
    pred = model.decode(ctx, qry[:, :3], z_bg, pnodes)
    pred_n = ad.mul(ad.sub(pred, model.norm_mean), 1.0 / model.norm_std)
    labels_n = tape.constant(model.normalize(qry[:, 3:6]))
    align = ad.sum_(ad.square(ad.sub(z_bg, z_ref)))
    return ad.add(_mse_node(pred_n, labels_n), ad.mul(align, lam_align)), z_bg, z_ref


def _validate(model: WindModel, cases: list[Case], config: StageConfig,
              stage: int) -> float:
    losses = []
    for ci, case in enumerate(cases):
        sup_idx, qry_idx = sample_support_query(
            case, config.m_sup, config.m_qry, _case_rng(config.seed, 90 + stage, 0, ci))
        tape = Tape()
        pnodes = model.param_nodes(tape, trainable=None)
        if stage == 1:
            loss, _ = _stage1_case_loss(model, tape, pnodes, case, sup_idx, qry_idx,
                                        config.lambda_ref)
        else:
            loss, _, _ = _stage2_case_loss(model, tape, pnodes, case, sup_idx, qry_idx,
                                           config.lambda_align)
        losses.append(float(loss.value))
    return float(np.mean(losses))


def _train_stage(model: WindModel, train_cases: list[Case], val_cases: list[Case],
                 config: StageConfig, stage: int) -> TrainResult:
    trainable = STAGE1_BLOCKS if stage == 1 else STAGE2_BLOCKS
    live = {k: v for k, v in model.params.items() if k.split(".")[0] in trainable}
    frozen_hash = params_hash({k: v for k, v in model.params.items()
                               if k.split(".")[0] not in trainable})
    opt = adamw(live, lr=config.lr, weight_decay=config.weight_decay)
    order_rng = np.random.default_rng([config.seed, 10 + stage])
    curve: list[dict] = []
    best_val = np.inf
    best_params = None
    step = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(train_cases))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo : lo + config.batch_size]
            tape = Tape()
            pnodes = model.param_nodes(tape, trainable=trainable)
            terms = []
            for ci in batch:
                case = train_cases[ci]
                sup_idx, qry_idx = sample_support_query(
                    case, config.m_sup, config.m_qry,
                    _case_rng(config.seed, stage, epoch, int(ci)))
                if stage == 1:
                    loss, _ = _stage1_case_loss(model, tape, pnodes, case,
                                                sup_idx, qry_idx, config.lambda_ref)
                else:
                    loss, _, _ = _stage2_case_loss(model, tape, pnodes, case,
                                                   sup_idx, qry_idx, config.lambda_align)
                terms.append(loss)
            total = terms[0]
            for t in terms[1:]:
                total = ad.add(total, t)
            total = ad.mul(total, 1.0 / len(terms))
            if not np.isfinite(total.value):
                raise TrainingDiverged(step, float(total.value))
            grads = tape.gradient(total, {k: pnodes[k] for k in live})
            opt.step(grads)
            epoch_losses.append(float(total.value))
            step += 1
        val_loss = None
        if val_cases and (epoch + 1) % config.eval_every == 0:
            val_loss = _validate(model, val_cases, config, stage)
            if val_loss < best_val:
                best_val = val_loss
                best_params = copy.deepcopy(model.params)
        curve.append({"step": step, "train_loss": float(np.mean(epoch_losses)),
                      "val_loss": val_loss})
        if stage == 2:
            now = params_hash({k: v for k, v in model.params.items()
                               if k.split(".")[0] not in trainable})
            if now != frozen_hash:
                raise FrozenBlockMutated(f"frozen parameters changed at epoch {epoch}")
    final_val = _validate(model, val_cases, config, stage) if val_cases else np.nan
    if best_params is None:
        best_params = copy.deepcopy(model.params)
        best_val = final_val
    best_model = WindModel(model.config, best_params, model.norm_mean, model.norm_std)
    return TrainResult(best_model, curve, best_val, final_val)


def train_stage1(train_cases: list[Case], val_cases: list[Case], model: WindModel,
                 config: StageConfig) -> TrainResult:
    """Fit encoders + decoder through the reference branch; keeps the
    checkpoint with the best validation loss."""
    return _train_stage(model, train_cases, val_cases, config, stage=1)


def train_stage2(train_cases: list[Case], val_cases: list[Case], model: WindModel,
                 config: StageConfig) -> TrainResult:
    """Fit only the no-observation predictor under frozen stage-1 weights.

    Any byte-level change to a frozen block raises FrozenBlockMutated.
    """
    return _train_stage(model, train_cases, val_cases, config, stage=2)


def curve_csv_rows(curve: list[dict]) -> list[str]:
    rows = ["step,train_loss,val_loss"]
    for r in curve:
        val = "" if r["val_loss"] is None else repr(float(r["val_loss"]))
        rows.append(f"{r['step']},{float(r['train_loss'])!r},{val}")
    return rows
