"""Report assembly: one combined CSV plus rendered figures.

Walks a runs directory for the delimited outputs the other subcommands
emit (aggregate/per-case/height/sweep metrics, trajectory series, training
curves, improvement-map grids), concatenates everything into a single
long-format CSV, and renders a PNG figure per artifact family next to it.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .storage import MissingArtifactError, atomic_write_bytes, atomic_write_text, read_grid

FIGURE_DPI = 150

METHOD_LABELS = {
    "noobs": "no-obs",
    "idw": "interpolation",
    "iso": "isotropic prior",
    "partial_ft": "partial fine-tune",
    "full_ft": "full fine-tune",
    "windinr": "adaptive prior",
}


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _num(row: dict, key: str) -> float | None:
    v = row.get(key, "")
    if v in ("", "--", None):
        return None
    return float(v)


def _save(fig, path: Path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=FIGURE_DPI, bbox_inches="tight")
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def find_artifacts(runs_dir: Path) -> dict[str, list[Path]]:
    runs_dir = Path(runs_dir)
    if not runs_dir.is_dir():
        raise MissingArtifactError(str(runs_dir))
    kinds = {
        "aggregate": sorted(runs_dir.rglob("aggregate.csv")),
        "per_case": sorted(runs_dir.rglob("per_case.csv")),
        "height": sorted(runs_dir.rglob("height.csv")),
        "sweep": sorted(runs_dir.rglob("sweep.csv")),
        "trajectory": sorted(runs_dir.rglob("trajectory.csv")),
        "curves": sorted(runs_dir.rglob("training_curve_stage*.csv")),
        "maps": sorted(runs_dir.rglob("improvement_*.wgrid")),
        "noobs_error": sorted(runs_dir.rglob("error_noobs.wgrid")),
    }
    return kinds


def plot_aggregate(rows: list[dict], out: Path) -> None:
    methods = [r["method"] for r in rows]
    labels = [METHOD_LABELS.get(m, m) for m in methods]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    hold = [_num(r, "holdout_rmse") for r in rows]
    axes[0].bar(labels, hold, color="#4878a8")
    axes[0].set_ylabel("holdout RMSE (m/s)")
    axes[0].set_title("Holdout error by method")
    width = 0.27
    x = np.arange(len(methods))
    for i, comp in enumerate("uvw"):
        vals = [_num(r, f"holdout_rmse_{comp}") for r in rows]
        axes[1].bar(x + (i - 1) * width, vals, width, label=comp)
    axes[1].set_xticks(x, labels, rotation=20)
    axes[1].set_ylabel("component RMSE (m/s)")
    axes[1].set_title("Per-component holdout error")
    axes[1].legend()
    times = [_num(r, "assim_time_mean_s") for r in rows]
    have = [(l, t) for l, t in zip(labels, times) if t is not None]
    if have:
        axes[2].bar([l for l, _ in have], [t for _, t in have], color="#a85448")
    axes[2].set_ylabel("online update time (s)")
    axes[2].set_title("Assimilation wall time")
    for ax in axes:
        ax.tick_params(axis="x", rotation=20)
    _save(fig, out)


def plot_sweep(rows: list[dict], out: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    methods = sorted({r["method"] for r in rows})
    for m in methods:
        pts = sorted((int(r["n_obs"]), float(r["holdout_rmse"]))
                     for r in rows if r["method"] == m)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=METHOD_LABELS.get(m, m))
    ax.set_xscale("log", base=2)
    ax.set_xlabel("assimilated observations")
    ax.set_ylabel("holdout RMSE (m/s)")
    ax.set_title("Error vs observation count")
    ax.legend(fontsize=8)
    _save(fig, out)


def plot_height(rows: list[dict], out: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    methods = sorted({r["method"] for r in rows})
    for m in methods:
        sub = [r for r in rows if r["method"] == m and _num(r, "holdout_rmse") is not None]
        mids = [(float(r["bin_low_m"]) + float(r["bin_high_m"])) / 2 for r in sub]
        vals = [float(r["holdout_rmse"]) for r in sub]
        ax.plot(vals, mids, marker="o", label=METHOD_LABELS.get(m, m))
    ax.set_xlabel("holdout RMSE (m/s)")
    ax.set_ylabel("height AGL (m)")
    ax.set_title("Error by height")
    ax.legend(fontsize=8)
    _save(fig, out)


def plot_trajectory(rows: list[dict], out: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.5, 3.8))
    methods = [k[5:] for k in rows[0] if k.startswith("rmse_")]
    t = [float(r["t_s"]) for r in rows]
    for m in methods:
        ax.plot(t, [float(r[f"rmse_{m}"]) for r in rows],
                label=METHOD_LABELS.get(m, m))
    ax.set_xlabel("approach time (s)")
    ax.set_ylabel("corridor RMSE (m/s)")
    ax.set_title("Error along the approach")
    ax.legend(fontsize=8)
    _save(fig, out)


def plot_curves(paths: list[Path], out: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for p in paths:
        rows = _read_csv(p)
        label = p.stem.replace("training_curve_", "")
        ax.plot([int(r["step"]) for r in rows],
                [float(r["train_loss"]) for r in rows], label=f"{label} train")
        val = [(int(r["step"]), float(r["val_loss"])) for r in rows if r["val_loss"]]
        if val:
            ax.plot([v[0] for v in val], [v[1] for v in val], "--", label=f"{label} val")
    ax.set_yscale("log")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("loss")
    ax.set_title("Training curves")
    ax.legend(fontsize=8)
    _save(fig, out)


def plot_improvement_maps(map_paths: list[Path], noobs_paths: list[Path],
                          out: Path) -> None:
    panels = []
    if noobs_paths:
        panels.append(("no-obs error", read_grid(noobs_paths[0]), "viridis", None))
    for p in map_paths:
        method = p.stem.replace("improvement_", "")
        grid = read_grid(p)
        lim = float(np.abs(grid).max()) or 1.0
        panels.append((f"improvement: {METHOD_LABELS.get(method, method)}",
                       grid, "RdBu_r", lim))
    if not panels:
        return
    fig, axes = plt.subplots(1, len(panels), figsize=(4.2 * len(panels), 3.8))
    if len(panels) == 1:
        axes = [axes]
    for ax, (title, grid, cmap, lim) in zip(axes, panels):
        kw = {"vmin": -lim, "vmax": lim} if lim is not None else {}
        im = ax.imshow(grid, origin="lower", extent=(-1, 1, -1, 1), cmap=cmap, **kw)
        ax.set_title(title, fontsize=9)
        fig.colorbar(im, ax=ax, shrink=0.8)
    _save(fig, out)


def build_report(runs_dir, out_csv) -> dict:
    """Concatenate every delimited artifact under ``runs_dir`` into one CSV
    and render figures alongside it. Returns a summary of what was found."""
    runs_dir = Path(runs_dir)
    out_csv = Path(out_csv)
    art = find_artifacts(runs_dir)
    fig_dir = out_csv.parent
    made = {"figures": [], "sources": 0}

    combined: list[str] = ["source,kind,row"]
    for kind in ("aggregate", "per_case", "height", "sweep", "trajectory"):
        for path in art[kind]:
            rel = path.relative_to(runs_dir)
            lines = path.read_text().strip().splitlines()
            for line in lines[1:]:
                combined.append(f"{rel},{kind},\"{line}\"")
            made["sources"] += 1
    atomic_write_text(out_csv, "\n".join(combined) + "\n")

    if art["aggregate"]:
        plot_aggregate(_read_csv(art["aggregate"][0]), fig_dir / "aggregate.png")
        made["figures"].append("aggregate.png")
    if art["sweep"]:
        rows = [r for p in art["sweep"] for r in _read_csv(p)]
        if rows:
            plot_sweep(rows, fig_dir / "sweep.png")
            made["figures"].append("sweep.png")
    if art["height"]:
        rows = [r for p in art["height"] for r in _read_csv(p)]
        if rows:
            plot_height(rows, fig_dir / "height.png")
            made["figures"].append("height.png")
    if art["trajectory"]:
        rows = _read_csv(art["trajectory"][0])
        if rows:
            plot_trajectory(rows, fig_dir / "trajectory.png")
            made["figures"].append("trajectory.png")
    if art["curves"]:
        plot_curves(art["curves"], fig_dir / "training_curves.png")
        made["figures"].append("training_curves.png")
    if art["maps"] or art["noobs_error"]:
        plot_improvement_maps(art["maps"], art["noobs_error"],
                              fig_dir / "improvement_maps.png")
        made["figures"].append("improvement_maps.png")
    return made
