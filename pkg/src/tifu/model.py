"""Coarse-to-fine vector decoder over learnable feature grids, with analytic gradients.

The coarse level reads a 3D feature grid at ``stations`` evenly spaced points on the
cube-spanning ray through a query point and maps the concatenated samples through a
per-axis MLP to ``n_coarse`` occupancies. The fine level reads a 2D grid at the
query's (x, y), appends a linear tap of the z-axis MLP's second hidden layer, and
predicts ``n_fine`` occupancies along z.

All parameters live in one flat ``dict[str, ndarray]`` so the optimizer and the
checkpoint code treat them uniformly; gradients use the same keys.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse

from .mesh import CANONICAL_HALF
from .occupancy import Axis, grid_coords, parse_axis

BCE_EPS = 1e-7
LEAKY_SLOPE = 0.01
AXIS_NAMES = ("x", "y", "z")


@dataclass
class TrainConfig:
    n_coarse: int = 32
    n_fine: int = 64
    delta: float = 0.05
    weights: tuple = (1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0)
    lr: float = 2e-3
    lr_schedule: str = "cosine"
    steps: int = 500
    batch_size: int = 1024
    seed: int = 0
    grid_res: int = 16
    channels: int = 16
    stations: int = 8
    fine_res: int = 32
    fine_channels: int = 64
    omega_dim: int = 64
    hidden: int = 256
    clip_norm: float = 10.0
    init_grid_std: float = 0.1

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != 3 or min(self.weights) < 0 or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("loss weights must be three non-negative numbers summing to 1")
        if self.n_fine < self.n_coarse:
            raise ValueError("n_fine must be >= n_coarse")
        for name in ("n_coarse", "n_fine", "batch_size", "grid_res", "channels", "stations",
                     "fine_res", "fine_channels", "omega_dim", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.grid_res < 2 or self.fine_res < 2:
            raise ValueError("feature grids need at least 2 nodes per side")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.steps < 0 or self.lr < 0:
            raise ValueError("steps and lr must be non-negative")

    @property
    def feature_dim(self) -> int:
        return self.stations * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = TrainConfig.__dataclass_fields__
        return TrainConfig(**{k: v for k, v in d.items() if k in known})


@dataclass
class CoarseFeatureGrid:
    """``values[i, j, k, c]`` at lattice node ``(-0.5 + i/(R-1), ...)``."""

    values: np.ndarray

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[-1]


@dataclass
class FineFeatureGrid:
    """``values[i, j, c]`` at lattice node ``(x, y) = (-0.5 + i/(P-1), -0.5 + j/(P-1))``."""

    values: np.ndarray

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[-1]


@dataclass
class DecoderParams:
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.tensors[key]


class TifuModel:
    """Parameters (grids and MLP weights) plus the configuration that shaped them."""

    def __init__(self, config: TrainConfig, params: dict):
        self.config = config
        self.params = params

    @property
    def coarse_grid(self) -> CoarseFeatureGrid:
        return CoarseFeatureGrid(self.params["coarse_grid"])

    @property
    def fine_grid(self) -> FineFeatureGrid:
        return FineFeatureGrid(self.params["fine_grid"])

    @property
    def decoder(self) -> DecoderParams:
        return DecoderParams({k: v for k, v in self.params.items() if not k.endswith("_grid")})

    def names(self):
        return list(self.params)

    def copy(self) -> "TifuModel":
        return TifuModel(TrainConfig.from_dict(self.config.to_dict()),
                         {k: v.copy() for k, v in self.params.items()})

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def param_shapes(cfg: TrainConfig) -> dict:
    shapes = {
        "coarse_grid": (cfg.grid_res,) * 3 + (cfg.channels,),
        "fine_grid": (cfg.fine_res, cfg.fine_res, cfg.fine_channels),
    }
    for a in AXIS_NAMES:
        shapes.update({
            f"g{a}.W1": (cfg.feature_dim, cfg.hidden), f"g{a}.b1": (cfg.hidden,),
            f"g{a}.W2": (cfg.hidden, cfg.hidden), f"g{a}.b2": (cfg.hidden,),
            f"g{a}.W3": (cfg.hidden, cfg.n_coarse), f"g{a}.b3": (cfg.n_coarse,),
        })
    shapes.update({
        "omega.W": (cfg.hidden, cfg.omega_dim), "omega.b": (cfg.omega_dim,),
        "fine.W1": (cfg.fine_channels + cfg.omega_dim, cfg.hidden), "fine.b1": (cfg.hidden,),
        "fine.W2": (cfg.hidden, cfg.n_fine), "fine.b2": (cfg.n_fine,),
    })
    return shapes


def init_model(cfg: TrainConfig, zero: bool = False) -> TifuModel:
    """Seeded initialization; values are float32-representable so checkpoints are exact."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if zero or name.split(".")[-1].startswith("b"):
            arr = np.zeros(shape)
        elif name.endswith("_grid"):
            arr = rng.normal(0.0, cfg.init_grid_std, size=shape)
        else:
            arr = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
        params[name] = arr.astype(np.float32).astype(np.float64)
    return TifuModel(cfg, params)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def leaky_relu(x):
    return np.maximum(x, LEAKY_SLOPE * x)


def leaky_relu_grad(x):
    g = (x > 0).astype(np.float64)
    g *= 1.0 - LEAKY_SLOPE
    g += LEAKY_SLOPE
    return g


def _lattice(coord, res):
    u = np.clip((coord + CANONICAL_HALF) * (res - 1), 0.0, res - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
    return i0, u - i0


def trilinear_weights(points, res: int):
    """Flat corner indices ``(n, 8)`` and weights ``(n, 8)`` on an ``res^3`` lattice (clamped)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    (ix, fx), (iy, fy), (iz, fz) = (_lattice(pts[:, a], res) for a in range(3))
    idx, w = [], []
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                idx.append(((ix + dx) * res + (iy + dy)) * res + (iz + dz))
                w.append(wx * wy * wz)
    return np.stack(idx, axis=1), np.stack(w, axis=1)


def bilinear_weights(points_xy, res: int):
    pts = np.asarray(points_xy, dtype=np.float64).reshape(-1, 2)
    (ix, fx), (iy, fy) = (_lattice(pts[:, a], res) for a in range(2))
    idx = np.stack([ix * res + iy, ix * res + iy + 1, (ix + 1) * res + iy, (ix + 1) * res + iy + 1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), (1 - fx) * fy, fx * (1 - fy), fx * fy], axis=1)
    return idx, w


def _gather(values_flat, idx, w):
    return np.einsum("nk,nkc->nc", w, values_flat[idx])


def _scatter(grad_flat, idx, w, dout):
    """Adjoint of ``_gather``: ``grad_flat += S @ dout`` with ``S`` the sparse stencil."""
    n, k = idx.shape
    cols = np.repeat(np.arange(n), k)
    s = sparse.csr_matrix((w.ravel(), (idx.ravel(), cols)), shape=(grad_flat.shape[0], n))
    grad_flat += s @ dout


def station_points(anchors, axis, stations: int):
    """Points at ``-0.5 + k/stations`` (k = 1..stations) along ``axis`` through each anchor."""
    axis = parse_axis(axis)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    pts = np.repeat(anchors[:, None, :], stations, axis=1)
    pts[:, :, axis] = grid_coords(stations)[None, :]
    return pts


def ray_features(grid_values, anchors, axis, stations: int = 8):
    """Ray-aligned features ``(B, stations * C)`` in station order, plus the sampling stencil."""
    res, c = grid_values.shape[0], grid_values.shape[-1]
    pts = station_points(anchors, axis, stations)
    idx, w = trilinear_weights(pts.reshape(-1, 3), res)
    feats = _gather(grid_values.reshape(-1, c), idx, w)
    return feats.reshape(len(pts), stations * c), (idx, w)


def ray_aligned_features(grid: CoarseFeatureGrid, x, axis, stations: int = 8) -> np.ndarray:
    feats, _ = ray_features(grid.values, np.asarray(x, dtype=np.float64)[None], axis, stations)
    return feats[0]


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _mlp_coarse(params, a, feats, want_omega):
    h1p = feats @ params[f"g{a}.W1"] + params[f"g{a}.b1"]
    h1 = leaky_relu(h1p)
    h2p = h1 @ params[f"g{a}.W2"] + params[f"g{a}.b2"]
    h2 = leaky_relu(h2p)
    z = h2 @ params[f"g{a}.W3"] + params[f"g{a}.b3"]
    cache = {"feats": feats, "h1p": h1p, "h1": h1, "h2p": h2p, "h2": h2, "z": z}
    omega = None
    if want_omega:
        omega = h2 @ params["omega.W"] + params["omega.b"]
    return sigmoid(z), omega, cache


def coarse_forward(params, features, axis):
    """Occupancy probabilities from ray-aligned features; ``omega`` only for the z axis."""
    axis = parse_axis(axis)
    p = params.tensors if isinstance(params, DecoderParams) else params
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    v_hat, omega, _ = _mlp_coarse(p, AXIS_NAMES[axis], feats, axis == Axis.Z)
    single = np.ndim(features) == 1
    if single:
        return v_hat[0], None if omega is None else omega[0]
    return v_hat, omega


def _mlp_fine(params, fine_feats, omega):
    inp = np.concatenate([fine_feats, omega], axis=1)
    g1p = inp @ params["fine.W1"] + params["fine.b1"]
    g1 = leaky_relu(g1p)
    z = g1 @ params["fine.W2"] + params["fine.b2"]
    return sigmoid(z), {"inp": inp, "g1p": g1p, "g1": g1, "z": z}


def fine_features(fine_values, anchors):
    res, c = fine_values.shape[0], fine_values.shape[-1]
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    idx, w = bilinear_weights(anchors[:, :2], res)
    return _gather(fine_values.reshape(-1, c), idx, w), (idx, w)


def fine_forward(params, fine_grid: FineFeatureGrid, x, omega):
    p = params.tensors if isinstance(params, DecoderParams) else params
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    om = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    ff, _ = fine_features(fine_grid.values, x)
    out, _ = _mlp_fine(p, ff, om)
    return out[0] if np.ndim(omega) == 1 else out


def predict_coarse(model: TifuModel, anchors, axis):
    """Coarse vectors ``(B, n_coarse)`` and, for z, the fine-level tap ``(B, omega_dim)``."""
    axis = parse_axis(axis)
    feats, _ = ray_features(model.params["coarse_grid"], anchors, axis, model.config.stations)
    v, omega, _ = _mlp_coarse(model.params, AXIS_NAMES[axis], feats, axis == Axis.Z)
    return v, omega


def predict_fine(model: TifuModel, anchors):
    _, omega = predict_coarse(model, anchors, Axis.Z)
    ff, _ = fine_features(model.params["fine_grid"], anchors)
    out, _ = _mlp_fine(model.params, ff, omega)
    return out


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def weighted_bce(v_hat, v_bar, mask, eps: float = BCE_EPS) -> float:
    """Masked binary cross-entropy summed over elements (a positive quantity to minimize)."""
    v_hat = np.asarray(v_hat, dtype=np.float64)
    v_bar = np.asarray(v_bar, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if not (v_hat.shape == v_bar.shape == mask.shape):
        raise ValueError(f"length mismatch: {v_hat.shape}, {v_bar.shape}, {mask.shape}")
    p = np.clip(v_hat, eps, 1.0 - eps)
    return float(-np.sum(mask * v_bar * np.log(p) + (1.0 - v_bar) * np.log1p(-p)))


def _bce_logit_grad(p, target, mask, eps=BCE_EPS):
    """d(weighted BCE)/d(logit) through the probability clamp."""
    live = (p > eps) & (p < 1.0 - eps)
    g = -(mask * target * (1.0 - p) - (1.0 - target) * p)
    return np.where(live, g, 0.0)


@dataclass
class Bucket:
    anchors: np.ndarray
    target: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.anchors)


@dataclass
class Batch:
    """Coarse buckets keyed by axis index plus the fine z bucket (any may be empty/None)."""

    coarse: dict
    fine: Bucket | None = None


def loss_and_grad(model: TifuModel, batch: Batch, need_grad: bool = True):
    """Weighted total loss and its gradient for every parameter tensor.

    Returns ``(total, parts, grads)`` where ``parts`` is ``(L_x, L_y, L_z, L_fine)``;
    each term is the per-sample summed BCE averaged over its bucket.
    """
    cfg = model.config
    P = model.params
    grads = model.zeros_like() if need_grad else None
    C = cfg.channels
    parts = [0.0, 0.0, 0.0, 0.0]
    coarse_grid_grad = grads["coarse_grid"].reshape(-1, C) if need_grad else None

    def coarse_backward(a, cache, stencil, dz, domega):
        dh2 = dz @ P[f"g{a}.W3"].T
        grads[f"g{a}.W3"] += cache["h2"].T @ dz
        grads[f"g{a}.b3"] += dz.sum(axis=0)
        if domega is not None:
            dh2 = dh2 + domega @ P["omega.W"].T
            grads["omega.W"] += cache["h2"].T @ domega
            grads["omega.b"] += domega.sum(axis=0)
        dh2p = dh2 * leaky_relu_grad(cache["h2p"])
        grads[f"g{a}.W2"] += cache["h1"].T @ dh2p
        grads[f"g{a}.b2"] += dh2p.sum(axis=0)
        dh1p = (dh2p @ P[f"g{a}.W2"].T) * leaky_relu_grad(cache["h1p"])
        grads[f"g{a}.W1"] += cache["feats"].T @ dh1p
        grads[f"g{a}.b1"] += dh1p.sum(axis=0)
        dfeat = dh1p @ P[f"g{a}.W1"].T
        idx, w = stencil
        _scatter(coarse_grid_grad, idx, w, dfeat.reshape(-1, C))

    fb = batch.fine
    if fb is not None and len(fb) == 0:
        warnings.warn("empty fine bucket; its loss term is 0", RuntimeWarning, stacklevel=2)
        fb = None
    zb = batch.coarse.get(int(Axis.Z))
    # the fine level reuses the coarse z pass when both buckets hold the same anchors
    shared = fb is not None and zb is not None and len(zb) == len(fb) and np.array_equal(zb.anchors, fb.anchors)
    z_pass = None

    for ax in Axis:
        bucket = batch.coarse.get(int(ax))
        if bucket is None or len(bucket) == 0:
            warnings.warn(f"empty {ax.name} bucket; its loss term is 0", RuntimeWarning, stacklevel=2)
            continue
        a = AXIS_NAMES[ax]
        feats, stencil = ray_features(P["coarse_grid"], bucket.anchors, ax, cfg.stations)
        want_omega = shared and ax == Axis.Z
        p, omega, cache = _mlp_coarse(P, a, feats, want_omega)
        b = len(bucket)
        parts[ax] = weighted_bce(p, bucket.target, bucket.mask) / b
        dz = cfg.weights[ax] * _bce_logit_grad(p, bucket.target, bucket.mask) / b if need_grad else None
        if want_omega:
            z_pass = (omega, cache, stencil, dz)
        elif need_grad:
            coarse_backward(a, cache, stencil, dz, None)

    if fb is not None:
        if z_pass is None:
            feats, stencil = ray_features(P["coarse_grid"], fb.anchors, Axis.Z, cfg.stations)
            omega, cache = _mlp_coarse(P, "z", feats, True)[1:]
            z_pass = (omega, cache, stencil, np.zeros((len(fb), cfg.n_coarse)) if need_grad else None)
        omega, cache, stencil, dz_coarse = z_pass
        ff, fstencil = fine_features(P["fine_grid"], fb.anchors)
        pf, fcache = _mlp_fine(P, ff, omega)
        b = len(fb)
        parts[3] = weighted_bce(pf, fb.target, fb.mask) / b
        if need_grad:
            dz = _bce_logit_grad(pf, fb.target, fb.mask) / b
            grads["fine.W2"] += fcache["g1"].T @ dz
            grads["fine.b2"] += dz.sum(axis=0)
            dg1p = (dz @ P["fine.W2"].T) * leaky_relu_grad(fcache["g1p"])
            grads["fine.W1"] += fcache["inp"].T @ dg1p
            grads["fine.b1"] += dg1p.sum(axis=0)
            dinp = dg1p @ P["fine.W1"].T
            fc = cfg.fine_channels
            idx, w = fstencil
            _scatter(grads["fine_grid"].reshape(-1, fc), idx, w, dinp[:, :fc])
            coarse_backward("z", cache, stencil, dz_coarse, dinp[:, fc:])

    wx, wy, wz = cfg.weights
    total = wx * parts[0] + wy * parts[1] + wz * parts[2] + parts[3]
    return total, tuple(parts), grads


def total_loss(model: TifuModel, batch: Batch) -> float:
    total, _, _ = loss_and_grad(model, batch, need_grad=False)
    return total
