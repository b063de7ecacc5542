"""Dataset-adaptive Gaussian prior over latent corrections.

For every training case the deployable predictor's raw latent is compared
with the privileged reference latent; the discrepancies e_z = z_bg - z_ref
are summarized into a mean (used as a deterministic bias correction of the
initial latent) and a shrinkage covariance

    B_z = (1 - rho) * Sigma_z + rho * diag(Sigma_z) + eps * I,

which is positive-definite by construction for eps > 0. The isotropic
variant replaces B_z by sigma_bar^2 * I with sigma_bar^2 the mean of the
diagonal empirical variances (floored at eps so a degenerate prior never
yields an unbounded correction objective).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import cholesky_factor
from .model import LatentState, WindModel
from .storage import read_container, write_container
from .synth import Case
from .training import sample_support_query

PRIOR_MAGIC = b"WINDPRIR"
DEFAULT_RHO = 0.1
DEFAULT_EPS = 1e-4


@dataclass
class PriorStats:
    b_z: np.ndarray  # mean of z_bg - z_ref over training cases
    sigma_z: np.ndarray  # unbiased covariance of the centered discrepancies
    B_z: np.ndarray  # shrunk (or isotropic) covariance used for correction
    chol_Bz: np.ndarray  # lower Cholesky factor of B_z
    rho: float
    eps: float
    n_samples: int
    kind: str = "adaptive"  # adaptive | isotropic
    checkpoint_hash: str = ""

    @property
    def dim(self) -> int:
        return len(self.b_z)

    def save(self, path) -> None:
        meta = {
            "kind": self.kind,
            "rho": self.rho,
            "eps": self.eps,
            "n_samples": self.n_samples,
            "checkpoint_hash": self.checkpoint_hash,
        }
        write_container(path, PRIOR_MAGIC, meta, {
            "b_z": self.b_z, "sigma_z": self.sigma_z,
            "B_z": self.B_z, "chol_Bz": self.chol_Bz,
        })

    @classmethod
    def load(cls, path, expect_checkpoint_hash: str | None = None) -> "PriorStats":
        meta, arrays = read_container(path, PRIOR_MAGIC)
        stats = cls(arrays["b_z"], arrays["sigma_z"], arrays["B_z"], arrays["chol_Bz"],
                    float(meta["rho"]), float(meta["eps"]), int(meta["n_samples"]),
                    meta["kind"], meta["checkpoint_hash"])
        if expect_checkpoint_hash and stats.checkpoint_hash != expect_checkpoint_hash:
            from .storage import DataError

            raise DataError(
                "prior was estimated from a different checkpoint "
                f"({stats.checkpoint_hash[:12]}... != {expect_checkpoint_hash[:12]}...)"
            )
        return stats


def collect_discrepancies(train_cases: list[Case], model: WindModel,
                          m_sup: int = 256, seed: int = 0) -> list[np.ndarray]:
    """One e_z = z_bg - z_ref vector per training case, order-stable.

    Reference latents use one fixed seeded support draw per case, mirroring
    the training-time sampling policy.
    """
    if len(train_cases) < 2:
        raise ValueError("need at least two cases to estimate a covariance")
    out = []
    for ci, case in enumerate(train_cases):
        sup_idx, _ = sample_support_query(case, m_sup, 1, [seed, 70, ci])
        sup = case.hr_points[sup_idx]
        z_ref = model.reference_latent(case, sup[:, :3], sup[:, 3:6]).z
        z_bg = model.no_obs_latent(case).z
        out.append(z_bg - z_ref)
    return out


def estimate_prior(discrepancies: list[np.ndarray], rho: float = DEFAULT_RHO,
                   eps: float = DEFAULT_EPS, checkpoint_hash: str = "") -> PriorStats:
    """Mean + unbiased covariance + shrinkage, with its Cholesky factor."""
    e = np.asarray(discrepancies, dtype=np.float64)
    if e.ndim != 2 or len(e) < 2:
        raise ValueError("need at least two discrepancy vectors")
    b_z = e.mean(axis=0)
    c = e - b_z
    sigma = c.T @ c / (len(e) - 1)
    B = (1.0 - rho) * sigma + rho * np.diag(np.diag(sigma)) + eps * np.eye(e.shape[1])
    return PriorStats(b_z, sigma, B, cholesky_factor(B), rho, eps, len(e),
                      "adaptive", checkpoint_hash)


def isotropic_prior(discrepancies: list[np.ndarray], eps: float = DEFAULT_EPS,
                    checkpoint_hash: str = "") -> PriorStats:
    """Scalar covariance sigma_bar^2 I, floored at eps when degenerate."""
    e = np.asarray(discrepancies, dtype=np.float64)
    if e.ndim != 2 or len(e) < 2:
        raise ValueError("need at least two discrepancy vectors")
    b_z = e.mean(axis=0)
    c = e - b_z
    sigma = c.T @ c / (len(e) - 1)
    var = max(float(np.mean(np.diag(sigma))), eps)
    B = var * np.eye(e.shape[1])
    return PriorStats(b_z, sigma, B, cholesky_factor(B), 0.0, eps, len(e),
                      "isotropic", checkpoint_hash)


def bias_correct(z_bg: LatentState, prior: PriorStats) -> LatentState:
    """Shift the raw deployable latent by the empirical mean discrepancy.

    z0 = z_bg - b_z; optimizing a zero-mean increment around z0 is
    algebraically identical to optimizing a mean -b_z increment around z_bg.
    """
    if z_bg.z.shape != prior.b_z.shape:
        raise ValueError(f"latent dim {z_bg.z.shape} != prior dim {prior.b_z.shape}")
    return LatentState(z_bg.z - prior.b_z, "no_obs_corrected_bias")
