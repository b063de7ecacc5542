"""Procedural terrain and analytic surrogate wind fields.

The surrogate truth replaces CFD output: a sheared inflow rotated by
direction, accelerated on windward slopes, deflected along terrain contours
with a saturating channeling term, and given a terrain-following vertical
component that decays with height. Every field is an exact analytic function
of the seed-drawn terrain parameters and the case parameters, so cases are
bit-reproducible and truth can be evaluated at arbitrary coordinates during
generation.

Coordinates: horizontal positions are normalized to [-1, 1]^2 over a
6.4 km x 6.4 km domain; heights are h = AGL / 2000 m in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DOMAIN_M = 6400.0  # full horizontal side length
HALF_DOMAIN_M = DOMAIN_M / 2.0  # metres per normalized unit
Z_TOP_M = 2000.0
GRAD_SCALE = 1.0  # slopes are already dimensionless m/m

SPEEDS = (8.0, 12.0, 16.0, 20.0, 24.0)
SHEARS = (0.01, 0.03, 0.10, 0.30, 0.50)
N_DIRECTIONS = 48

# Low-resolution background grid: 7x7 nodes with exactly 1 km spacing,
# covering the central 6 km of the domain. Queries outside the node hull
# clamp to the border.
LR_N = 7
LR_SPACING_M = 1000.0
LR_SPACING_NORM = LR_SPACING_M / HALF_DOMAIN_M
LR_EXTENT = (LR_N - 1) / 2.0 * LR_SPACING_NORM  # 0.9375
LR_HEIGHT_M = 20.0  # AGL plane the background represents

# Surrogate-model constants, sized so that wind magnitudes stay below
# twice the inflow speed for any admissible terrain.
SPEEDUP_COEF = 0.5
SPEEDUP_SLOPE_CLIP = 1.0
CHANNEL_COEF = 0.3
W_SLOPE_CLIP = 0.6
W_DECAY_M = 400.0
PROFILE_H_FLOOR = 0.002

TRAIN_FRAC, VAL_FRAC, TEST_FRAC = 0.70, 0.15, 0.15


class ParameterError(ValueError):
    """Case parameters outside the enumerated sets."""


@dataclass(frozen=True)
class WindCaseParams:
    direction_index: int
    speed: float
    shear: float
    seed: int

    def __post_init__(self):
        if not 0 <= self.direction_index < N_DIRECTIONS:
            raise ParameterError(f"direction_index {self.direction_index} not in 0..47")
        if self.speed not in SPEEDS:
            raise ParameterError(f"speed {self.speed} not in {SPEEDS}")
        if self.shear not in SHEARS:
            raise ParameterError(f"shear {self.shear} not in {SHEARS}")

    @property
    def direction(self) -> float:
        return 2.0 * np.pi * self.direction_index / N_DIRECTIONS


class TerrainField:
    """Analytic heightfield: rotated sinusoid octaves plus Gaussian ridge lines.

    The raw field g lies in [-C, C] with C known analytically, so elevation
    amp * (g + C) / (2C) is bounded in [0, amp] without any sampling.
    """

    def __init__(self, seed: int, amplitude_m: float = 600.0, n_octaves: int = 4,
                 n_ridges: int = 3):
        rng = np.random.default_rng(seed)
        self.amplitude_m = float(amplitude_m)
        self.base_freq = rng.uniform(0.5, 1.0)
        self.octave_amp = 1.0 / 2.0 ** np.arange(n_octaves)
        self.octave_freq = self.base_freq * 2.0 ** np.arange(n_octaves)
        self.octave_dir = rng.uniform(0.0, 2.0 * np.pi, n_octaves)
        self.octave_phase = rng.uniform(0.0, 2.0 * np.pi, n_octaves)
        self.ridge_amp = rng.uniform(0.5, 1.0, n_ridges) * rng.choice([-1.0, 1.0], n_ridges)
        self.ridge_width = rng.uniform(0.10, 0.25, n_ridges)
        self.ridge_point = rng.uniform(-0.8, 0.8, (n_ridges, 2))
        ang = rng.uniform(0.0, 2.0 * np.pi, n_ridges)
        self.ridge_normal = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        self.bound = float(np.sum(self.octave_amp) + np.sum(np.abs(self.ridge_amp)))

    def _raw(self, xy: np.ndarray) -> np.ndarray:
        x, y = xy[..., 0], xy[..., 1]
        g = np.zeros(x.shape)
        for a, f, d, p in zip(self.octave_amp, self.octave_freq,
                              self.octave_dir, self.octave_phase):
            g += a * np.sin(2.0 * np.pi * f * (x * np.cos(d) + y * np.sin(d)) + p)
        for a, w, pt, n in zip(self.ridge_amp, self.ridge_width,
                               self.ridge_point, self.ridge_normal):
            dist = (x - pt[0]) * n[0] + (y - pt[1]) * n[1]
            g += a * np.exp(-(dist**2) / (2.0 * w**2))
        return g

    def elevation(self, xy: np.ndarray) -> np.ndarray:
        """Elevation in metres at normalized horizontal coordinates (..., 2)."""
        if self.amplitude_m == 0.0:
            return np.zeros(xy.shape[:-1])
        return self.amplitude_m * (self._raw(xy) + self.bound) / (2.0 * self.bound)

    def gradient(self, xy: np.ndarray) -> np.ndarray:
        """Slope d(elevation)/d(metres), shape (..., 2), exact derivative."""
        x, y = xy[..., 0], xy[..., 1]
        gx = np.zeros(x.shape)
        gy = np.zeros(x.shape)
        if self.amplitude_m == 0.0:
            return np.stack([gx, gy], axis=-1)
        for a, f, d, p in zip(self.octave_amp, self.octave_freq,
                              self.octave_dir, self.octave_phase):
            arg = 2.0 * np.pi * f * (x * np.cos(d) + y * np.sin(d)) + p
            c = a * 2.0 * np.pi * f * np.cos(arg)
            gx += c * np.cos(d)
            gy += c * np.sin(d)
        for a, w, pt, n in zip(self.ridge_amp, self.ridge_width,
                               self.ridge_point, self.ridge_normal):
            dist = (x - pt[0]) * n[0] + (y - pt[1]) * n[1]
            c = -a * dist / w**2 * np.exp(-(dist**2) / (2.0 * w**2))
            gx += c * n[0]
            gy += c * n[1]
        scale = self.amplitude_m / (2.0 * self.bound) / HALF_DOMAIN_M
        return np.stack([gx * scale, gy * scale], axis=-1)


@dataclass
class TerrainGrid:
    """Sampled terrain: elevation plus central-difference slope channels.

    Arrays are (N, N) with row index along y and column index along x;
    node k sits at -1 + 2k/(N-1).
    """

    resolution: int
    elevation: np.ndarray  # metres
    grad_x: np.ndarray  # normalized slope
    grad_y: np.ndarray
    seed: int
    amplitude_m: float
    field: TerrainField | None = None

    @property
    def cell_size_m(self) -> float:
        return DOMAIN_M / (self.resolution - 1)

    def node_coords(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.resolution)


@dataclass
class LRGrid:
    """Kilometre-scale background: (u, v, valid mask) on the 7x7 node lattice."""

    u: np.ndarray
    v: np.ndarray
    mask: np.ndarray

    def node_coords(self) -> np.ndarray:
        return np.linspace(-LR_EXTENT, LR_EXTENT, LR_N)

    def sample_uv(self, pts_xy: np.ndarray) -> np.ndarray:
        """Bilinear (u, v) at normalized points, clamped to the node hull."""
        out = np.empty((len(pts_xy), 2))
        out[:, 0] = _bilinear_grid(self.u, pts_xy, LR_EXTENT)
        out[:, 1] = _bilinear_grid(self.v, pts_xy, LR_EXTENT)
        return out


def _bilinear_grid(grid: np.ndarray, pts_xy: np.ndarray, extent: float) -> np.ndarray:
    n = grid.shape[0]
    x = np.clip((pts_xy[:, 0] + extent) / (2 * extent) * (n - 1), 0, n - 1)
    y = np.clip((pts_xy[:, 1] + extent) / (2 * extent) * (n - 1), 0, n - 1)
    x0 = np.minimum(x.astype(int), n - 2)
    y0 = np.minimum(y.astype(int), n - 2)
    fx, fy = x - x0, y - y0
    return (
        grid[y0, x0] * (1 - fy) * (1 - fx)
        + grid[y0, x0 + 1] * (1 - fy) * fx
        + grid[y0 + 1, x0] * fy * (1 - fx)
        + grid[y0 + 1, x0 + 1] * fy * fx
    )


@dataclass
class Case:
    """One sample: terrain, coarse background, truth point cloud, parameters."""

    name: str
    terrain: TerrainGrid
    lr: LRGrid
    hr_points: np.ndarray  # (n, 6): rx, ry, h, u, v, w
    params: WindCaseParams


def generate_terrain(seed: int, resolution: int, amplitude_m: float = 600.0) -> TerrainGrid:
    """Sample the analytic heightfield onto an N x N node grid.

    Slope channels are central differences of the sampled elevation divided
    by the physical cell size (one-sided at the borders), normalized by the
    fixed gradient scale.
    """
    if resolution < 16:
        raise ParameterError(f"terrain resolution {resolution} below minimum 16")
    fld = TerrainField(seed, amplitude_m)
    coords = np.linspace(-1.0, 1.0, resolution)
    xx, yy = np.meshgrid(coords, coords)  # row -> y, col -> x
    elev = fld.elevation(np.stack([xx, yy], axis=-1))
    cell_m = DOMAIN_M / (resolution - 1)
    gy, gx = np.gradient(elev, cell_m)
    return TerrainGrid(resolution, elev, gx / GRAD_SCALE, gy / GRAD_SCALE,
                       seed, amplitude_m, fld)


def truth_wind(fld: TerrainField, params: WindCaseParams, pts: np.ndarray) -> np.ndarray:
    """Surrogate truth (u, v, w) in m/s at points (n, 3) = (rx, ry, h).

    Homogeneous of degree one in the inflow speed, and equivariant under
    reversing the inflow direction over flat terrain.
    """
    pts = np.asarray(pts, dtype=np.float64)
    z_agl = pts[:, 2] * Z_TOP_M
    prof = np.clip(pts[:, 2], PROFILE_H_FLOOR, 1.0) ** params.shear
    ang = params.direction
    dvec = np.array([np.cos(ang), np.sin(ang)])
    grad = fld.gradient(pts[:, :2])  # (n, 2) slope
    upslope = np.clip(grad @ dvec, -SPEEDUP_SLOPE_CLIP, SPEEDUP_SLOPE_CLIP)
    speedup = 1.0 + SPEEDUP_COEF * upslope
    u_h = params.speed * prof[:, None] * speedup[:, None] * dvec[None, :]

    gnorm = np.linalg.norm(grad, axis=1)
    safe = np.maximum(gnorm, 1e-12)
    tvec = np.stack([-grad[:, 1], grad[:, 0]], axis=1) / safe[:, None]
    sat = gnorm / (1.0 + gnorm**2)
    along = tvec @ dvec
    u_h = u_h + (CHANNEL_COEF * params.speed * prof * sat * along)[:, None] * tvec

    wslope = grad * np.minimum(1.0, W_SLOPE_CLIP / safe)[:, None]
    w = np.einsum("ij,ij->i", u_h, wslope) * np.exp(-z_agl / W_DECAY_M)
    return np.column_stack([u_h, w])


def downsample_background(fld: TerrainField, params: WindCaseParams) -> LRGrid:
    """Block-average the truth at the 20 m AGL plane onto the 1 km lattice.

    Each node averages a symmetric 4x4 subgrid over its 1 km cell, which is
    exact for fields linear in the horizontal coordinates.
    """
    nodes = np.linspace(-LR_EXTENT, LR_EXTENT, LR_N)
    offs = (np.arange(4) + 0.5) / 4.0 - 0.5  # symmetric midpoint offsets
    ox, oy = np.meshgrid(offs * LR_SPACING_NORM, offs * LR_SPACING_NORM)
    h = LR_HEIGHT_M / Z_TOP_M
    u = np.empty((LR_N, LR_N))
    v = np.empty((LR_N, LR_N))
    for i, yc in enumerate(nodes):
        for j, xc in enumerate(nodes):
            pts = np.column_stack([
                (xc + ox).ravel(),
                (yc + oy).ravel(),
                np.full(ox.size, h),
            ])
            wind = truth_wind(fld, params, pts)
            u[i, j] = wind[:, 0].mean()
            v[i, j] = wind[:, 1].mean()
    return LRGrid(u, v, np.ones((LR_N, LR_N)))


def _lattice_dims(n_points: int) -> tuple[int, int, int]:
    side = max(1, round(n_points ** (1.0 / 3.0)))
    return side, side, side


def sample_hr_points(fld: TerrainField, params: WindCaseParams,
                     n_points: int = 4096) -> np.ndarray:
    """Stratified jittered lattice over [-1,1]^2 x [0,1] with truth labels."""
    nx, ny, nz = _lattice_dims(n_points)
    rng = np.random.default_rng(params.seed)
    jit = rng.random((nx * ny * nz, 3))
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    cells = np.column_stack([ii.ravel(), jj.ravel(), kk.ravel()]).astype(np.float64)
    pts = np.empty((len(cells), 3))
    pts[:, 0] = -1.0 + (cells[:, 0] + jit[:, 0]) * 2.0 / nx
    pts[:, 1] = -1.0 + (cells[:, 1] + jit[:, 1]) * 2.0 / ny
    pts[:, 2] = (cells[:, 2] + jit[:, 2]) / nz
    wind = truth_wind(fld, params, pts)
    return np.column_stack([pts, wind])


def generate_wind_case(terrain: TerrainGrid, params: WindCaseParams,
                       n_hr_points: int = 4096, name: str = "") -> Case:
    """Build one case: truth cloud plus the matching coarse background."""
    if terrain.field is None:
        raise ValueError("terrain was loaded without its analytic field; "
                         "cases can only be generated at creation time")
    hr = sample_hr_points(terrain.field, params, n_hr_points)
    lr = downsample_background(terrain.field, params)
    return Case(name or f"case_{params.seed:08x}", terrain, lr, hr, params)


def enumerate_case_params(n_cases: int, seed: int) -> list[WindCaseParams]:
    """Deterministic case parameters drawn from the 48 x 5 x 5 enumeration.

    The full enumeration has exactly 1200 combinations; for smaller runs a
    seeded permutation picks a subset.
    """
    combos = [
        (d, s, sh)
        for d in range(N_DIRECTIONS)
        for s in SPEEDS
        for sh in SHEARS
    ]
    if n_cases > len(combos):
        raise ParameterError(f"at most {len(combos)} distinct cases, requested {n_cases}")
    order = np.random.default_rng(seed).permutation(len(combos))[:n_cases]
    out = []
    for rank, idx in enumerate(sorted(order.tolist())):
        d, s, sh = combos[idx]
        case_seed = int(np.random.SeedSequence([seed, rank]).generate_state(1, np.uint64)[0])
        out.append(WindCaseParams(d, s, sh, case_seed))
    return out


def make_splits(n_cases: int, split_seed: int) -> tuple[list[int], list[int], list[int]]:
    """Disjoint, exhaustive 70/15/15 partition by largest-remainder rounding."""
    fracs = (TRAIN_FRAC, VAL_FRAC, TEST_FRAC)
    base = [int(np.floor(n_cases * f)) for f in fracs]
    rem = [n_cases * f - b for f, b in zip(fracs, base)]
    for _ in range(n_cases - sum(base)):
        i = int(np.argmax(rem))
        base[i] += 1
        rem[i] = -1.0
    perm = np.random.default_rng(split_seed).permutation(n_cases)
    train = sorted(perm[: base[0]].tolist())
    val = sorted(perm[base[0] : base[0] + base[1]].tolist())
    test = sorted(perm[base[0] + base[1] :].tolist())
    return train, val, test
