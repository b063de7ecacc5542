"""Latent-conditioned implicit wind decoder and its companion encoders.

The pieces, in dataflow order:

* ``encode_coordinates``: Fourier features over the horizontal coordinates
  plus polynomial and Gaussian-RBF features over normalized height (63 dims).
* context encoders: small convolutional residual stacks that turn the
  terrain channels (3 -> 32 -> 64) and the coarse background channels
  (3 -> 16 -> 32) into feature maps sampled bilinearly at query points.
* reference encoder: pools per-point features of a labelled support set
  with softmax attention scores into a privileged 128-dim latent.
* no-observation predictor: maps the global mean/std descriptor of the
  context maps to an initial 128-dim latent from deployable inputs alone.
* decoder: FiLM-modulated residual MLP that adds a learned residual to a
  height-damped copy of the coarse background.

Every per-query feature vector has length 64 + 32 + 2 + 63 = 161; both
anchors (161 features, 128-dim latent) are asserted at construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .storage import read_container, write_container
from .synth import Case, LR_EXTENT, Z_TOP_M

CHECKPOINT_MAGIC = b"WINDCKPT"

QUERY_FEATURE_DIM = 161
LATENT_DIM = 128
COORD_DIM = 63

# Queries outside the normalized domain are clamped; this counts them so
# harness code can surface a warning without raising.
CLAMP_WARNINGS = {"count": 0}


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 128
    hidden: int = 256
    n_fourier: int = 10
    n_rbf: int = 20
    rbf_sigma: float = 0.05
    terrain_channels: tuple = (3, 32, 64)
    lr_channels: tuple = (3, 16, 32)
    gn_groups: int = 8
    n_film_blocks: int = 4
    tau: float = 0.30

    @property
    def coord_dim(self) -> int:
        return 4 * self.n_fourier + 3 + self.n_rbf

    @property
    def query_feature_dim(self) -> int:
        return self.terrain_channels[-1] + self.lr_channels[-1] + 2 + self.coord_dim

    @property
    def global_context_dim(self) -> int:
        return 2 * (self.terrain_channels[-1] + self.lr_channels[-1])

    def validate(self) -> None:
        if self.query_feature_dim != QUERY_FEATURE_DIM:
            raise ValueError(
                f"query feature length {self.query_feature_dim} != {QUERY_FEATURE_DIM}"
            )
        if self.coord_dim != COORD_DIM:
            raise ValueError(f"coordinate encoding length {self.coord_dim} != {COORD_DIM}")
        if self.latent_dim != LATENT_DIM:
            raise ValueError(f"latent length {self.latent_dim} != {LATENT_DIM}")


@dataclass
class QueryPoint:
    rx: float
    ry: float
    h: float  # AGL height / 2000 m

    def as_array(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.h])


LATENT_KINDS = ("reference", "no_obs_raw", "no_obs_corrected_bias", "corrected")


@dataclass
class LatentState:
    z: np.ndarray
    kind: str

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.kind not in LATENT_KINDS:
            raise ValueError(f"unknown latent kind {self.kind!r}")
        if not np.all(np.isfinite(self.z)):
            raise ValueError("latent state contains non-finite entries")


def encode_coordinates(pts: np.ndarray, config: ModelConfig = ModelConfig()) -> np.ndarray:
    """Positional encoding of (n, 3) query points, length 63 per point.

    Horizontal: sin/cos at octave frequencies 2^k * pi for k < 10, applied to
    each of (rx, ry). Vertical: (h, h^2, h^3) plus 20 Gaussian bumps with
    centres evenly spaced over [0, 1]. Out-of-domain coordinates are clamped
    (counted in CLAMP_WARNINGS).
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    xy = pts[:, :2]
    h = pts[:, 2]
    n_clamped = int(np.sum((np.abs(xy) > 1.0).any(axis=1) | (h < 0) | (h > 1)))
    if n_clamped:
        CLAMP_WARNINGS["count"] += n_clamped
        xy = np.clip(xy, -1.0, 1.0)
        h = np.clip(h, 0.0, 1.0)
    freqs = np.pi * 2.0 ** np.arange(config.n_fourier)
    args = xy[:, :, None] * freqs[None, None, :]  # (n, 2, F)
    fourier = np.concatenate(
        [np.sin(args).reshape(len(pts), -1), np.cos(args).reshape(len(pts), -1)], axis=1
    )
    poly = np.stack([h, h**2, h**3], axis=1)
    centers = np.linspace(0.0, 1.0, config.n_rbf)
    rbf = np.exp(-((h[:, None] - centers[None, :]) ** 2) / (2.0 * config.rbf_sigma**2))
    return np.concatenate([fourier, poly, rbf], axis=1)


# ---------------------------------------------------------------------------
# parameters


def _fan_in_uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def _init_linear(rng, params, name, n_in, n_out, zero=False):
    if zero:
        params[f"{name}.W"] = np.zeros((n_in, n_out))
        params[f"{name}.b"] = np.zeros(n_out)
    else:
        params[f"{name}.W"] = _fan_in_uniform(rng, n_in, (n_in, n_out))
        params[f"{name}.b"] = _fan_in_uniform(rng, n_in, n_out)


def _init_conv_block(rng, params, name, c_in, c_out):
    # two 3x3 convolutions with per-channel group-norm affine, 1x1 skip when
    # the channel count changes
    params[f"{name}.conv1.W"] = _fan_in_uniform(rng, 9 * c_in, (9 * c_in, c_out))
    params[f"{name}.conv1.b"] = _fan_in_uniform(rng, 9 * c_in, c_out)
    params[f"{name}.gn1.g"] = np.ones(c_out)
    params[f"{name}.gn1.b"] = np.zeros(c_out)
    params[f"{name}.conv2.W"] = _fan_in_uniform(rng, 9 * c_out, (9 * c_out, c_out))
    params[f"{name}.conv2.b"] = _fan_in_uniform(rng, 9 * c_out, c_out)
    params[f"{name}.gn2.g"] = np.ones(c_out)
    params[f"{name}.gn2.b"] = np.zeros(c_out)
    if c_in != c_out:
        params[f"{name}.skip.W"] = _fan_in_uniform(rng, c_in, (c_in, c_out))
        params[f"{name}.skip.b"] = _fan_in_uniform(rng, c_in, c_out)


PARAM_BLOCKS = ("terrain_encoder", "lr_encoder", "reference_encoder",
                "noobs_predictor", "decoder")


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Fan-in uniform initialization; the decoder output layer starts at zero
    so an untrained model reproduces the damped coarse-background baseline."""
    rng = np.random.default_rng([seed, 0xC0FFEE])
    p: dict[str, np.ndarray] = {}
    tc, lc = config.terrain_channels, config.lr_channels
    _init_conv_block(rng, p, "terrain_encoder.b1", tc[0], tc[1])
    _init_conv_block(rng, p, "terrain_encoder.b2", tc[1], tc[2])
    _init_conv_block(rng, p, "lr_encoder.b1", lc[0], lc[1])
    _init_conv_block(rng, p, "lr_encoder.b2", lc[1], lc[2])

    h, d, g = config.hidden, config.latent_dim, config.global_context_dim
    point_in = config.query_feature_dim + 3 + g
    _init_linear(rng, p, "reference_encoder.point1", point_in, h)
    _init_linear(rng, p, "reference_encoder.point2", h, h)
    _init_linear(rng, p, "reference_encoder.score", h, 1)
    _init_linear(rng, p, "reference_encoder.out1", 3 * h + g, h)
    _init_linear(rng, p, "reference_encoder.out2", h, d)

    _init_linear(rng, p, "noobs_predictor.l1", g, h)
    _init_linear(rng, p, "noobs_predictor.l2", h, h)
    _init_linear(rng, p, "noobs_predictor.l3", h, d)

    _init_linear(rng, p, "decoder.proj", config.query_feature_dim, h)
    p["decoder.ln_proj.g"] = np.ones(h)
    p["decoder.ln_proj.b"] = np.zeros(h)
    _init_linear(rng, p, "decoder.latent_seed.l1", d, h)
    _init_linear(rng, p, "decoder.latent_seed.l2", h, h)
    for i in range(config.n_film_blocks):
        _init_linear(rng, p, f"decoder.film{i}.mod", d, 2 * h)
        _init_linear(rng, p, f"decoder.film{i}.l1", h, h)
        p[f"decoder.film{i}.ln.g"] = np.ones(h)
        p[f"decoder.film{i}.ln.b"] = np.zeros(h)
        _init_linear(rng, p, f"decoder.film{i}.l2", h, h)
    p["decoder.head_ln.g"] = np.ones(h)
    p["decoder.head_ln.b"] = np.zeros(h)
    _init_linear(rng, p, "decoder.head_hidden", h, h)
    _init_linear(rng, p, "decoder.head_out", h, 3, zero=True)
    return p


def block_of(name: str) -> str:
    return name.split(".", 1)[0]


def param_counts(params: dict[str, np.ndarray]) -> dict[str, int]:
    counts: dict[str, int] = {b: 0 for b in PARAM_BLOCKS}
    for name, arr in params.items():
        counts[block_of(name)] += arr.size
    counts["total"] = sum(counts[b] for b in PARAM_BLOCKS)
    return counts


def flatten_params(params: dict[str, np.ndarray]) -> tuple[np.ndarray, list[tuple[str, tuple]]]:
    """Concatenate all parameters into one vector; the spec lists name/shape
    in sorted-name order so unflatten round-trips exactly."""
    spec = [(name, params[name].shape) for name in sorted(params)]
    vec = np.concatenate([params[name].ravel() for name, _ in spec])
    return vec, spec


def unflatten_params(vec: np.ndarray, spec: list[tuple[str, tuple]]) -> dict[str, np.ndarray]:
    out = {}
    off = 0
    for name, shape in spec:
        n = int(np.prod(shape)) if shape else 1
        out[name] = vec[off : off + n].reshape(shape).copy()
        off += n
    if off != vec.size:
        raise ValueError(f"flat vector length {vec.size} != spec total {off}")
    return out


def params_hash(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# graph builders


def _linear(p: dict[str, Node], name: str, x: Node) -> Node:
    return ad.add(ad.matmul(x, p[f"{name}.W"]), p[f"{name}.b"])


def _group_norm(x: Node, gain: Node, bias: Node, groups: int, eps: float = 1e-6) -> Node:
    c, h, w = x.value.shape
    xg = ad.reshape(x, (groups, (c // groups) * h * w))
    m = ad.mean_(xg, axis=1, keepdims=True)
    cen = ad.sub(xg, m)
    v = ad.mean_(ad.square(cen), axis=1, keepdims=True)
    xn = ad.mul(cen, ad.power(ad.add(v, eps), -0.5))
    xn = ad.reshape(xn, (c, h, w))
    g3 = ad.reshape(gain, (c, 1, 1))
    b3 = ad.reshape(bias, (c, 1, 1))
    return ad.add(ad.mul(xn, g3), b3)


def _conv_block(p: dict[str, Node], name: str, x: Node, c_in: int, c_out: int,
                groups: int, pad_mode: str) -> Node:
    h = ad.conv3x3(x, p[f"{name}.conv1.W"], p[f"{name}.conv1.b"], pad_mode)
    h = ad.silu(_group_norm(h, p[f"{name}.gn1.g"], p[f"{name}.gn1.b"], groups))
    h = ad.conv3x3(h, p[f"{name}.conv2.W"], p[f"{name}.conv2.b"], pad_mode)
    h = _group_norm(h, p[f"{name}.gn2.g"], p[f"{name}.gn2.b"], groups)
    skip = x
    if c_in != c_out:
        skip = ad.conv1x1(x, p[f"{name}.skip.W"], p[f"{name}.skip.b"])
    return ad.silu(ad.add(h, skip))


@dataclass
class CaseContext:
    """Per-case graph state: encoded feature maps plus cached constants."""

    f_s: Node
    f_lr: Node
    global_ctx: Node  # (1, global_context_dim)
    case: Case


@dataclass
class CachedContext:
    """Frozen-weights context maps held as plain arrays, reusable across tapes."""

    f_s: np.ndarray
    f_lr: np.ndarray
    global_ctx: np.ndarray
    case: Case


class WindModel:
    """Bundles parameters, architecture config, and label statistics.

    ``norm_mean``/``norm_std`` are the per-component training-set wind
    statistics; labels are normalized with them before losses, and the
    decoder's residual is scaled by them so its raw output works at unit
    scale.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray],
                 norm_mean: np.ndarray, norm_std: np.ndarray):
        config.validate()
        self.config = config
        self.params = params
        self.norm_mean = np.asarray(norm_mean, dtype=np.float64)
        self.norm_std = np.asarray(norm_std, dtype=np.float64)
        if self.norm_mean.shape != (3,) or self.norm_std.shape != (3,):
            raise ValueError("normalization statistics must have shape (3,)")
        if np.any(self.norm_std <= 0):
            raise ValueError("normalization stds must be positive")

    @classmethod
    def create(cls, seed: int, norm_mean, norm_std, config: ModelConfig | None = None):
        config = config or ModelConfig()
        return cls(config, init_params(config, seed), norm_mean, norm_std)

    # -- parameter plumbing ------------------------------------------------

    def param_nodes(self, tape: Tape, trainable: set[str] | str | None = None
                    ) -> dict[str, Node]:
        """Bind parameters onto a tape; ``trainable`` selects which names
        become differentiable leaves ("all", a set of names or block
        prefixes, or None for a frozen model)."""
        nodes = {}
        for name, value in self.params.items():
            if trainable == "all":
                req = True
            elif trainable is None:
                req = False
            else:
                req = name in trainable or block_of(name) in trainable
            nodes[name] = tape.leaf(value, name, requires=req)
        return nodes

    def normalize(self, wind: np.ndarray) -> np.ndarray:
        return (wind - self.norm_mean) / self.norm_std

    def denormalize(self, wind: np.ndarray) -> np.ndarray:
        return wind * self.norm_std + self.norm_mean

    # -- graph builders ----------------------------------------------------

    def encode_context(self, tape: Tape, p: dict[str, Node], case: Case,
                       pad_mode: str = "zero") -> CaseContext:
        """Run both convolutional encoders and derive the global descriptor."""
        cfg = self.config
        t = case.terrain
        terrain_in = tape.constant(np.stack([
            t.elevation / Z_TOP_M,
            t.grad_x,
            t.grad_y,
        ]))
        lr_in = tape.constant(np.stack([
            (case.lr.u - self.norm_mean[0]) / self.norm_std[0],
            (case.lr.v - self.norm_mean[1]) / self.norm_std[1],
            case.lr.mask,
        ]))
        tc, lc, g = cfg.terrain_channels, cfg.lr_channels, cfg.gn_groups
        f = _conv_block(p, "terrain_encoder.b1", terrain_in, tc[0], tc[1], g, pad_mode)
        f_s = _conv_block(p, "terrain_encoder.b2", f, tc[1], tc[2], g, pad_mode)
        f = _conv_block(p, "lr_encoder.b1", lr_in, lc[0], lc[1], g, pad_mode)
        f_lr = _conv_block(p, "lr_encoder.b2", f, lc[1], lc[2], g, pad_mode)
        global_ctx = ad.reshape(
            ad.concat([_spatial_stats(f_s), _spatial_stats(f_lr)], axis=0), (1, -1)
        )
        return CaseContext(f_s, f_lr, global_ctx, case)

    def query_features(self, ctx: CaseContext, pts: np.ndarray) -> Node:
        """Per-point feature vector (n, 161): sampled terrain features,
        sampled background features, normalized local (u, v), coordinates."""
        tape = ctx.f_s.tape
        pts = np.atleast_2d(pts)
        fs = ad.bilinear_sample(ctx.f_s, pts[:, :2], (-1.0, 1.0))
        flr = ad.bilinear_sample(ctx.f_lr, pts[:, :2], (-LR_EXTENT, LR_EXTENT))
        local_uv = ctx.case.lr.sample_uv(pts[:, :2])
        local = tape.constant(
            (local_uv - self.norm_mean[:2]) / self.norm_std[:2]
        )
        coords = tape.constant(encode_coordinates(pts, self.config))
        return ad.concat([fs, flr, local, coords], axis=1)

    def reference_encode(self, ctx: CaseContext, sup_pts: np.ndarray,
                         sup_wind: np.ndarray, p: dict[str, Node]) -> Node:
        """Privileged latent from a labelled support set (order-invariant)."""
        if len(sup_pts) == 0:
            raise ValueError("reference encoding requires a nonempty support set")
        tape = ctx.f_s.tape
        feats = self.query_features(ctx, sup_pts)
        labels = tape.constant(self.normalize(sup_wind))
        g = ad.broadcast_to(ctx.global_ctx, (len(sup_pts), ctx.global_ctx.value.shape[1]))
        x = ad.concat([feats, labels, g], axis=1)
        e = ad.silu(_linear(p, "reference_encoder.point1", x))
        e = ad.silu(_linear(p, "reference_encoder.point2", e))
        scores = _linear(p, "reference_encoder.score", e)
        w = ad.softmax(scores, axis=0)
        wmean = ad.sum_(ad.mul(w, e), axis=0, keepdims=True)
        dev = ad.sub(e, wmean)
        wstd = ad.sqrt(ad.add(ad.sum_(ad.mul(w, ad.square(dev)), axis=0, keepdims=True), 1e-8))
        emax = ad.reshape(ad.max_(e, axis=0), (1, -1))
        pooled = ad.concat([wmean, wstd, emax, ctx.global_ctx], axis=1)
        z = _linear(p, "reference_encoder.out2",
                    ad.silu(_linear(p, "reference_encoder.out1", pooled)))
        return ad.reshape(z, (-1,))

    def predict_no_obs(self, ctx: CaseContext, p: dict[str, Node]) -> Node:
        """Raw deployable latent from the global context descriptor alone."""
        h = ad.silu(_linear(p, "noobs_predictor.l1", ctx.global_ctx))
        h = ad.silu(_linear(p, "noobs_predictor.l2", h))
        return ad.reshape(_linear(p, "noobs_predictor.l3", h), (-1,))

    def decode(self, ctx: CaseContext, pts: np.ndarray, z: Node,
               p: dict[str, Node]) -> Node:
        """Wind (n, 3) in m/s: height-damped background plus learned residual."""
        tape = ctx.f_s.tape
        cfg = self.config
        pts = np.atleast_2d(pts)
        q = self.query_features(ctx, pts)
        x = ad.silu(ad.layer_norm(_linear(p, "decoder.proj", q),
                                  p["decoder.ln_proj.g"], p["decoder.ln_proj.b"]))
        z2 = ad.reshape(z, (1, -1))
        seed = ad.silu(_linear(p, "decoder.latent_seed.l1", z2))
        seed = _linear(p, "decoder.latent_seed.l2", seed)
        x = ad.add(x, seed)
        for i in range(cfg.n_film_blocks):
            mod = _linear(p, f"decoder.film{i}.mod", z2)
            sc = ad.tanh(mod[:, : cfg.hidden])
            sh = ad.tanh(mod[:, cfg.hidden :])
            h = _linear(p, f"decoder.film{i}.l1", x)
            h = ad.layer_norm(h, p[f"decoder.film{i}.ln.g"], p[f"decoder.film{i}.ln.b"])
            h = ad.add(ad.mul(ad.add(sc, 1.0), h), sh)
            h = _linear(p, f"decoder.film{i}.l2", ad.silu(h))
            x = ad.add(x, h)
        x = ad.layer_norm(x, p["decoder.head_ln.g"], p["decoder.head_ln.b"])
        out = _linear(p, "decoder.head_out", ad.silu(_linear(p, "decoder.head_hidden", x)))
        baseline = tape.constant(self.lr_baseline(ctx.case, pts))
        return ad.add(baseline, ad.mul(out, self.norm_std))

    def lr_baseline(self, case: Case, pts: np.ndarray) -> np.ndarray:
        """[alpha(h) u_LR, alpha(h) v_LR, 0] with alpha = max(exp(-h/tau), 0)."""
        pts = np.atleast_2d(pts)
        uv = case.lr.sample_uv(pts[:, :2])
        alpha = np.maximum(np.exp(-pts[:, 2] / self.config.tau), 0.0)
        return np.column_stack([alpha * uv[:, 0], alpha * uv[:, 1], np.zeros(len(pts))])

    # -- convenience inference paths ----------------------------------------

    def frozen_context(self, case: Case) -> tuple[Tape, CaseContext, dict[str, Node]]:
        tape = Tape()
        p = self.param_nodes(tape, trainable=None)
        return tape, self.encode_context(tape, p, case), p

    def cache_context(self, case: Case) -> "CachedContext":
        """Materialize the context maps once; valid while weights are frozen."""
        _, ctx, _ = self.frozen_context(case)
        return CachedContext(ctx.f_s.value, ctx.f_lr.value, ctx.global_ctx.value, case)

    def make_field(self, case: Case, trainable: set[str] | None = None):
        """Decode-graph factory over a cached context.

        Returns ``decode_fn(tape, pts, z_node) -> (n, 3) node``. With the
        default frozen binding gradients flow only through the latent, which
        is what makes latent-only correction cheap relative to re-encoding
        every step. A ``trainable`` set may mark decoder-side parameters as
        leaves (the cache stays valid only while encoder weights are
        untouched, so encoder blocks must not be in the set).
        """
        if trainable:
            assert not any(t.startswith(("terrain_encoder", "lr_encoder"))
                           for t in trainable), "cached context requires frozen encoders"
        cached = self.cache_context(case)

        def decode_fn(tape: Tape, pts: np.ndarray, z_node: Node) -> Node:
            ctx = CaseContext(tape.constant(cached.f_s), tape.constant(cached.f_lr),
                              tape.constant(cached.global_ctx), cached.case)
            p = self.param_nodes(tape, trainable=trainable)
            return self.decode(ctx, pts, z_node, p)

        return decode_fn

    def no_obs_latent(self, case: Case) -> LatentState:
        tape, ctx, p = self.frozen_context(case)
        return LatentState(self.predict_no_obs(ctx, p).value, "no_obs_raw")

    def reference_latent(self, case: Case, sup_pts, sup_wind) -> LatentState:
        tape, ctx, p = self.frozen_context(case)
        return LatentState(self.reference_encode(ctx, sup_pts, sup_wind, p).value,
                           "reference")

    def predict(self, case: Case, pts: np.ndarray, z: np.ndarray,
                chunk: int = 1024) -> np.ndarray:
        """Frozen-weights decode at arbitrary points, chunked to bound memory."""
        pts = np.atleast_2d(pts)
        tape, ctx, p = self.frozen_context(case)
        out = np.empty((len(pts), 3))
        for lo in range(0, len(pts), chunk):
            sel = slice(lo, min(lo + chunk, len(pts)))
            zn = tape.constant(z)
            out[sel] = self.decode(ctx, pts[sel], zn, p).value
        return out

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "kind": "checkpoint",
            "config": asdict(self.config),
            "param_counts": param_counts(self.params),
        }
        arrays = dict(self.params)
        arrays["__norm_mean"] = self.norm_mean
        arrays["__norm_std"] = self.norm_std
        write_container(path, CHECKPOINT_MAGIC, meta, arrays)

    @classmethod
    def load(cls, path) -> "WindModel":
        meta, arrays = read_container(path, CHECKPOINT_MAGIC)
        cfgd = dict(meta["config"])
        cfgd["terrain_channels"] = tuple(cfgd["terrain_channels"])
        cfgd["lr_channels"] = tuple(cfgd["lr_channels"])
        mean = arrays.pop("__norm_mean")
        std = arrays.pop("__norm_std")
        return cls(ModelConfig(**cfgd), arrays, mean, std)


def _spatial_stats(fmap: Node) -> Node:
    """Per-channel mean and std over the spatial axes, concatenated."""
    c = fmap.value.shape[0]
    flat = ad.reshape(fmap, (c, -1))
    m = ad.mean_(flat, axis=1)
    v = ad.mean_(ad.square(ad.sub(flat, ad.reshape(m, (c, 1)))), axis=1)
    return ad.concat([m, ad.sqrt(ad.add(v, 1e-8))], axis=0)


def compute_norm_stats(cases: list[Case]) -> tuple[np.ndarray, np.ndarray]:
    """Component-wise wind mean/std over the training cases' truth labels."""
    labels = np.concatenate([c.hr_points[:, 3:6] for c in cases], axis=0)
    mean = labels.mean(axis=0)
    std = labels.std(axis=0)
    return mean, np.maximum(std, 1e-6)
