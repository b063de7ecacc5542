"""Synthetic-truth evaluation protocols.

Random-observation protocol: per test case, draw disjoint observation and
holdout index sets from the truth point cloud with a deterministic
case-specific seed (FNV-1a hash of the case name XORed with the global
seed), perturb observed values with Gaussian noise, correct with every
method, and score field/holdout errors in m/s. Optionally sweeps the
observation count (holdout indices stay fixed across the sweep) and bins
holdout errors by height.

Trajectory protocol: a helicopter flies a straight valley path at fixed
height while a lead vehicle samples wind every 100 m ahead of it; at each
step all samples collected so far are assimilated and the corrected field
is scored on a moving look-ahead corridor grid against neighbour-inter-
polated truth. Step 0 is evaluated before any sample has arrived, so every
method must coincide with the no-observation prediction there.

Wall times cover only each method's online update (reported by the method
itself from a monotonic clock); decoding for evaluation is never timed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .baselines import BaselineResult
from .correction import OBS_SIGMA_DEFAULT, Observation
from .storage import fnv1a64
from .synth import Case, HALF_DOMAIN_M, Z_TOP_M

HEIGHT_BINS = 8  # equal bins over [0, 2000] m AGL


@dataclass(frozen=True)
class RandomOsseConfig:
    n_obs: int = 128
    n_holdout: int = 256
    sigmas: tuple = OBS_SIGMA_DEFAULT
    seed: int = 0
    sweep: tuple = ()  # e.g. (8, 16, 32, 64, 128, 256)
    height_bins: int = HEIGHT_BINS


@dataclass(frozen=True)
class UavOsseConfig:
    start: tuple = (-0.75, -0.35)
    end: tuple = (0.75, 0.35)
    height_agl_m: float = 80.0
    helicopter_speed_ms: float = 20.0
    lead_m: float = 500.0
    spacing_m: float = 100.0
    corridor_length_m: float = 800.0
    corridor_cross_m: float = 300.0
    n_along: int = 16
    n_cross: int = 7
    truth_knn: int = 16
    truth_power: float = 2.0
    sigmas: tuple = OBS_SIGMA_DEFAULT
    seed: int = 0
    map_step: int | None = None  # improvement-map step; default midway
    map_resolution: int = 48

    @property
    def step_seconds(self) -> float:
        return self.spacing_m / self.helicopter_speed_ms


@dataclass
class MetricsReport:
    method: str
    n_cases: int = 0
    field_rmse: float = np.nan
    field_mae: float = np.nan
    holdout_rmse: float = np.nan
    holdout_mae: float = np.nan
    holdout_rmse_u: float = np.nan
    holdout_rmse_v: float = np.nan
    holdout_rmse_w: float = np.nan
    height_rmse: list = field(default_factory=list)  # None entries for empty bins
    assim_time_mean_s: float | None = None
    assim_time_total_s: float | None = None
    frac_improved: float = 0.0
    steps: int = 0
    failures: int = 0


def case_seed(case_name: str, global_seed: int) -> int:
    return fnv1a64(case_name) ^ (global_seed & 0xFFFFFFFFFFFFFFFF)


def sample_observations(case: Case, config: RandomOsseConfig,
                        n_obs: int | None = None, n_pool: int | None = None,
                        ) -> tuple[list[Observation], np.ndarray]:
    """Noisy observations plus disjoint holdout indices, case-deterministic.

    ``n_pool`` reserves a larger observation pool (for sweeps) whose first
    ``n_obs`` entries are used; the holdout set stays disjoint from the
    whole pool so it is identical for every sweep point.
    """
    n_obs = config.n_obs if n_obs is None else n_obs
    n_pool = n_obs if n_pool is None else n_pool
    if n_pool < n_obs:
        raise ValueError("observation pool smaller than requested count")
    n = len(case.hr_points)
    if n < n_pool + config.n_holdout:
        raise ValueError(f"case {case.name}: needs {n_pool + config.n_holdout} "
                         f"points, has {n}")
    rng = np.random.default_rng(case_seed(case.name, config.seed))
    idx = rng.choice(n, n_pool + config.n_holdout, replace=False)
    pool, holdout = idx[:n_pool], idx[n_pool:]
    sig = np.asarray(config.sigmas)
    noise = rng.normal(size=(n_pool, 3)) * sig
    obs = []
    for j in range(n_obs):
        row = case.hr_points[pool[j]]
        obs.append(Observation(row[:3], row[3:6] + noise[j], np.ones(3, bool), sig**2))
    return obs, holdout


def compute_metrics(pred: np.ndarray, truth: np.ndarray,
                    heights: np.ndarray | None = None,
                    n_bins: int = HEIGHT_BINS) -> dict:
    """Pooled RMSE/MAE, per-component RMSE, optional height-binned RMSE.

    RMSE pools squared errors over points and components jointly; heights
    are normalized AGL (h = z/2000 m), binned over [0, 1]. Empty bins are
    reported as None, never zero.
    """
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    err = pred - truth
    out = {
        "rmse": float(np.sqrt(np.mean(err**2))),
        "mae": float(np.mean(np.abs(err))),
        "rmse_by_component": tuple(float(v) for v in np.sqrt(np.mean(err**2, axis=0))),
    }
    if heights is not None:
        edges = np.linspace(0.0, 1.0, n_bins + 1)
        bins = []
        for b in range(n_bins):
            sel = (heights >= edges[b]) & (
                (heights < edges[b + 1]) if b < n_bins - 1 else (heights <= edges[b + 1]))
            bins.append(float(np.sqrt(np.mean(err[sel] ** 2))) if sel.any() else None)
        out["height_rmse"] = bins
    return out


MethodMap = dict[str, Callable[[Case, list[Observation]], BaselineResult]]


def run_random_osse(cases: list[Case], methods: MethodMap,
                    config: RandomOsseConfig) -> tuple[dict[str, MetricsReport], list[dict]]:
    """Per-method aggregate metrics plus one record per (case, method).

    The no-observation reference is always evaluated (it anchors the
    fraction-improved statistic) even when absent from ``methods``. A
    method failure on a case is recorded and the run continues.
    """
    from .baselines import no_obs_predict  # local import to avoid cycle at module load

    reports = {m: MetricsReport(m) for m in methods}
    bin_acc = {m: [np.zeros(config.height_bins), np.zeros(config.height_bins, int)]
               for m in methods}
    per_case: list[dict] = []
    pool = max((config.n_obs, *config.sweep)) if config.sweep else config.n_obs

    for case in cases:
        obs, holdout_idx = sample_observations(case, config, n_pool=pool)
        field_pts = case.hr_points[:, :3]
        field_truth = case.hr_points[:, 3:6]
        hold_pts = case.hr_points[holdout_idx, :3]
        hold_truth = case.hr_points[holdout_idx, 3:6]

        if "noobs" in methods:
            noobs_res = methods["noobs"](case, obs)
        else:
            noobs_res = None
        noobs_hold_rmse = None
        if noobs_res is not None:
            noobs_hold_rmse = compute_metrics(noobs_res.accessor(hold_pts),
                                              hold_truth)["rmse"]

        for name, fn in methods.items():
            rep = reports[name]
            try:
                res = noobs_res if (name == "noobs" and noobs_res is not None) \
                    else fn(case, obs)
                fpred = res.accessor(field_pts)
                hpred = res.accessor(hold_pts)
            except Exception as exc:  # failures recorded, run continues
                rep.failures += 1
                per_case.append({"case": case.name, "method": name,
                                 "n_obs": config.n_obs, "failed": str(exc)})
                continue
            fm = compute_metrics(fpred, field_truth)
            hm = compute_metrics(hpred, hold_truth, heights=hold_pts[:, 2],
                                 n_bins=config.height_bins)
            improved = (noobs_hold_rmse is not None
                        and hm["rmse"] < noobs_hold_rmse and name != "noobs")
            per_case.append({
                "case": case.name, "method": name, "n_obs": config.n_obs,
                "field_rmse": fm["rmse"], "field_mae": fm["mae"],
                "holdout_rmse": hm["rmse"], "holdout_mae": hm["mae"],
                "holdout_rmse_u": hm["rmse_by_component"][0],
                "holdout_rmse_v": hm["rmse_by_component"][1],
                "holdout_rmse_w": hm["rmse_by_component"][2],
                "assim_time_s": res.wall_time_s, "steps": res.steps,
                "improved": int(improved), "failed": "",
            })
            rep.n_cases += 1
            _accumulate(rep, fm, hm, res, improved)
            err = hpred - hold_truth
            edges = np.linspace(0, 1, config.height_bins + 1)
            for b in range(config.height_bins):
                sel = (hold_pts[:, 2] >= edges[b]) & (hold_pts[:, 2] < edges[b + 1]) \
                    if b < config.height_bins - 1 else \
                    (hold_pts[:, 2] >= edges[b]) & (hold_pts[:, 2] <= edges[b + 1])
                bin_acc[name][0][b] += float((err[sel] ** 2).sum())
                bin_acc[name][1][b] += int(sel.sum()) * 3

    for name, rep in reports.items():
        n = max(rep.n_cases, 1)
        rep.field_rmse /= n
        rep.field_mae /= n
        rep.holdout_rmse /= n
        rep.holdout_mae /= n
        rep.holdout_rmse_u /= n
        rep.holdout_rmse_v /= n
        rep.holdout_rmse_w /= n
        rep.frac_improved /= n
        sq, cnt = bin_acc[name]
        rep.height_rmse = [float(np.sqrt(s / c)) if c else None
                           for s, c in zip(sq, cnt)]
        if rep.assim_time_total_s is not None and rep.n_cases:
            rep.assim_time_mean_s = rep.assim_time_total_s / rep.n_cases
    return reports, per_case


def _accumulate(rep: MetricsReport, fm: dict, hm: dict, res: BaselineResult,
                improved: bool) -> None:
    rep.field_rmse = (0.0 if np.isnan(rep.field_rmse) else rep.field_rmse) + fm["rmse"]
    rep.field_mae = (0.0 if np.isnan(rep.field_mae) else rep.field_mae) + fm["mae"]
    rep.holdout_rmse = (0.0 if np.isnan(rep.holdout_rmse) else rep.holdout_rmse) + hm["rmse"]
    rep.holdout_mae = (0.0 if np.isnan(rep.holdout_mae) else rep.holdout_mae) + hm["mae"]
    u, v, w = hm["rmse_by_component"]
    rep.holdout_rmse_u = (0.0 if np.isnan(rep.holdout_rmse_u) else rep.holdout_rmse_u) + u
    rep.holdout_rmse_v = (0.0 if np.isnan(rep.holdout_rmse_v) else rep.holdout_rmse_v) + v
    rep.holdout_rmse_w = (0.0 if np.isnan(rep.holdout_rmse_w) else rep.holdout_rmse_w) + w
    rep.frac_improved += float(improved)
    rep.steps = res.steps
    if res.wall_time_s is not None:
        rep.assim_time_total_s = (rep.assim_time_total_s or 0.0) + res.wall_time_s


def run_observation_sweep(cases: list[Case], methods: MethodMap,
                          config: RandomOsseConfig) -> list[dict]:
    """Mean holdout RMSE per (n_obs, method) over the sweep list."""
    rows = []
    pool = max(config.sweep) if config.sweep else config.n_obs
    for n_obs in config.sweep:
        acc = {m: [] for m in methods}
        for case in cases:
            obs, holdout_idx = sample_observations(case, config, n_obs=n_obs, n_pool=pool)
            hold_pts = case.hr_points[holdout_idx, :3]
            hold_truth = case.hr_points[holdout_idx, 3:6]
            for name, fn in methods.items():
                try:
                    res = fn(case, obs)
                    m = compute_metrics(res.accessor(hold_pts), hold_truth)
                    acc[name].append(m["rmse"])
                except Exception:
                    continue
        for name, vals in acc.items():
            if vals:
                rows.append({"n_obs": n_obs, "method": name,
                             "holdout_rmse": float(np.mean(vals))})
    return rows


# ---------------------------------------------------------------------------
# trajectory protocol


class TruthInterpolator:
    """Neighbour inverse-distance truth lookup over the case point cloud."""

    def __init__(self, case: Case, knn: int = 16, power: float = 2.0):
        self.tree = cKDTree(case.hr_points[:, :3])
        self.values = case.hr_points[:, 3:6]
        self.knn = min(knn, len(case.hr_points))
        self.power = power

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        dist, idx = self.tree.query(pts, k=self.knn)
        dist = dist.reshape(len(pts), self.knn)
        idx = idx.reshape(len(pts), self.knn)
        exact = dist[:, 0] < 1e-12
        with np.errstate(divide="ignore"):
            w = dist ** (-self.power)
        w[exact] = 0.0
        out = np.einsum("nk,nkc->nc", w, self.values[idx]) / \
            np.maximum(w.sum(axis=1), 1e-300)[:, None]
        out[exact] = self.values[idx[exact, 0]]
        return out


@dataclass
class UavStep:
    step: int
    t_s: float
    heli_s_m: float
    uav_s_m: float
    lead_m: float
    n_obs: int
    rmse: dict


@dataclass
class UavResult:
    steps: list[UavStep]
    improvement_maps: dict  # method -> dict(delta_e=..., e_method=...)
    e_noobs: np.ndarray | None
    map_grid: np.ndarray | None
    map_step: int | None
    clip_warnings: int


def _path_geometry(config: UavOsseConfig):
    a = np.asarray(config.start, dtype=np.float64)
    b = np.asarray(config.end, dtype=np.float64)
    delta = b - a
    length_m = float(np.linalg.norm(delta)) * HALF_DOMAIN_M
    tangent = delta / np.linalg.norm(delta)
    normal = np.array([-tangent[1], tangent[0]])
    return a, tangent, normal, length_m


def uav_schedule(config: UavOsseConfig) -> list[dict]:
    """Per-step geometry: positions, lead distance, cumulative sample count.

    The lead vehicle holds its full lead past the path end (continuing along
    the straight extension), so the separation stays fixed at every step.
    Step 0 is evaluated before any sample has been delivered; afterwards the
    count follows floor(min(distance flown, path length) / spacing) + 1.
    """
    _, _, _, length_m = _path_geometry(config)
    n_steps = int(np.floor(length_m / config.spacing_m))
    rows = []
    for k in range(n_steps + 1):
        t = k * config.step_seconds
        heli = k * config.spacing_m
        uav = heli + config.lead_m
        flown = config.helicopter_speed_ms * t
        n_obs = 0 if k == 0 else int(np.floor(min(flown, length_m) / config.spacing_m)) + 1
        rows.append({"step": k, "t_s": t, "heli_s_m": heli, "uav_s_m": uav,
                     "lead_m": uav - heli, "n_obs": n_obs})
    return rows


def _point_on_path(a, tangent, s_m, height_h):
    xy = a + tangent * (s_m / HALF_DOMAIN_M)
    return np.array([xy[0], xy[1], height_h])


def corridor_grid(config: UavOsseConfig, heli_s_m: float) -> tuple[np.ndarray, int]:
    """Look-ahead corridor points (n_along * n_cross, 3); clamps to the
    domain and returns how many coordinates needed clamping."""
    a, tangent, normal, _ = _path_geometry(config)
    h = config.height_agl_m / Z_TOP_M
    along = heli_s_m + np.linspace(0.0, config.corridor_length_m, config.n_along)
    cross = np.linspace(-config.corridor_cross_m / 2, config.corridor_cross_m / 2,
                        config.n_cross)
    pts = []
    for s in along:
        base = a + tangent * (s / HALF_DOMAIN_M)
        for c in cross:
            xy = base + normal * (c / HALF_DOMAIN_M)
            pts.append([xy[0], xy[1], h])
    pts = np.asarray(pts)
    clipped = int(np.sum(np.abs(pts[:, :2]) > 1.0))
    pts[:, :2] = np.clip(pts[:, :2], -1.0, 1.0)
    return pts, clipped


def uav_observations(case: Case, config: UavOsseConfig, count: int,
                     truth: TruthInterpolator) -> list[Observation]:
    """First ``count`` lead-vehicle samples (spaced along the path, noisy)."""
    a, tangent, _, _ = _path_geometry(config)
    h = config.height_agl_m / Z_TOP_M
    sig = np.asarray(config.sigmas)
    seed = case_seed(case.name, config.seed)
    obs = []
    for m in range(count):
        p = _point_on_path(a, tangent, config.lead_m + m * config.spacing_m, h)
        rng = np.random.default_rng([seed, 31, m])
        y = truth(p[None])[0] + rng.normal(size=3) * sig
        obs.append(Observation(p, y, np.ones(3, bool), sig**2))
    return obs


def improvement_map(method_pred: np.ndarray, noobs_pred: np.ndarray,
                    truth: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise error reduction: positive where the method beats no-obs."""
    e_m = np.linalg.norm(method_pred - truth, axis=1)
    e_0 = np.linalg.norm(noobs_pred - truth, axis=1)
    return e_0 - e_m, e_0, e_m


def run_uav_osse(case: Case, methods: MethodMap, config: UavOsseConfig) -> UavResult:
    """Assimilate the growing sample set step by step and score the corridor."""
    if "idw" in methods:
        # too few spatially distributed samples for 3-D interpolation here
        methods = {k: v for k, v in methods.items() if k != "idw"}
    truth = TruthInterpolator(case, config.truth_knn, config.truth_power)
    schedule = uav_schedule(config)
    all_obs = uav_observations(case, config, schedule[-1]["n_obs"], truth)
    map_step = config.map_step if config.map_step is not None else len(schedule) // 2

    steps: list[UavStep] = []
    clip_total = 0
    maps = {}
    e_noobs_map = None
    map_grid = None
    for row in schedule:
        grid, clipped = corridor_grid(config, row["heli_s_m"])
        clip_total += clipped
        grid_truth = truth(grid)
        obs_now = all_obs[: row["n_obs"]]
        rmse = {}
        preds = {}
        for name, fn in methods.items():
            res = fn(case, obs_now)
            pred = res.accessor(grid)
            preds[name] = pred
            rmse[name] = compute_metrics(pred, grid_truth)["rmse"]
        steps.append(UavStep(row["step"], row["t_s"], row["heli_s_m"], row["uav_s_m"],
                             row["lead_m"], row["n_obs"], rmse))
        if row["step"] == map_step and "noobs" in preds:
            res_x = np.linspace(-1, 1, config.map_resolution)
            gx, gy = np.meshgrid(res_x, res_x)
            h = config.height_agl_m / Z_TOP_M
            map_grid = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, h)])
            map_truth = truth(map_grid)
            noobs_pred = methods["noobs"](case, obs_now).accessor(map_grid)
            for name, fn in methods.items():
                if name == "noobs":
                    continue
                pred = fn(case, obs_now).accessor(map_grid)
                delta, e0, em = improvement_map(pred, noobs_pred, map_truth)
                maps[name] = {"delta_e": delta.reshape(config.map_resolution, -1),
                              "e_method": em.reshape(config.map_resolution, -1)}
                e_noobs_map = e0.reshape(config.map_resolution, -1)
    return UavResult(steps, maps, e_noobs_map, map_grid, map_step, clip_total)


# ---------------------------------------------------------------------------
# delimited output


def _fmt(x) -> str:
    if x is None:
        return "--"
    if isinstance(x, float):
        return repr(x)
    return str(x)


AGG_COLUMNS = ["method", "n_cases", "field_rmse", "field_mae", "holdout_rmse",
               "holdout_mae", "holdout_rmse_u", "holdout_rmse_v", "holdout_rmse_w",
               "frac_improved", "steps", "failures",
               "assim_time_mean_s", "assim_time_total_s"]

PER_CASE_COLUMNS = ["case", "method", "n_obs", "field_rmse", "field_mae",
                    "holdout_rmse", "holdout_mae", "holdout_rmse_u",
                    "holdout_rmse_v", "holdout_rmse_w", "steps", "improved",
                    "failed", "assim_time_s"]


def aggregate_csv_rows(reports: dict[str, MetricsReport]) -> list[str]:
    rows = [",".join(AGG_COLUMNS)]
    for name in sorted(reports):
        r = reports[name]
        vals = [r.method, r.n_cases, r.field_rmse, r.field_mae, r.holdout_rmse,
                r.holdout_mae, r.holdout_rmse_u, r.holdout_rmse_v, r.holdout_rmse_w,
                r.frac_improved, r.steps, r.failures,
                r.assim_time_mean_s, r.assim_time_total_s]
        rows.append(",".join(_fmt(v) for v in vals))
    return rows


def per_case_csv_rows(per_case: list[dict]) -> list[str]:
    rows = [",".join(PER_CASE_COLUMNS)]
    for rec in per_case:
        rows.append(",".join(_fmt(rec.get(c)) for c in PER_CASE_COLUMNS))
    return rows


def height_csv_rows(reports: dict[str, MetricsReport], n_bins: int = HEIGHT_BINS) -> list[str]:
    edges = np.linspace(0.0, Z_TOP_M, n_bins + 1)
    rows = ["method,bin_low_m,bin_high_m,holdout_rmse"]
    for name in sorted(reports):
        for b, v in enumerate(reports[name].height_rmse):
            rows.append(f"{name},{edges[b]!r},{edges[b + 1]!r},{_fmt(v)}")
    return rows


def sweep_csv_rows(sweep_rows: list[dict]) -> list[str]:
    rows = ["n_obs,method,holdout_rmse"]
    for rec in sweep_rows:
        rows.append(f"{rec['n_obs']},{rec['method']},{rec['holdout_rmse']!r}")
    return rows


def trajectory_csv_rows(result: UavResult) -> list[str]:
    methods = sorted(result.steps[0].rmse) if result.steps else []
    header = ["step", "t_s", "heli_s_m", "uav_s_m", "lead_m", "n_obs"]
    header += [f"rmse_{m}" for m in methods]
    rows = [",".join(header)]
    for s in result.steps:
        vals = [s.step, s.t_s, s.heli_s_m, s.uav_s_m, s.lead_m, s.n_obs]
        vals += [s.rmse[m] for m in methods]
        rows.append(",".join(_fmt(v) for v in vals))
    return rows
