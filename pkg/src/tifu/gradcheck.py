"""Central finite-difference check of ``loss_and_grad`` against its analytic gradients."""

from __future__ import annotations

import numpy as np

from .model import (AXIS_NAMES, Batch, Bucket, TifuModel, _mlp_coarse, _mlp_fine, fine_features,
                    loss_and_grad, ray_features)
from .occupancy import Axis

# central differences at h = 1e-4 on losses near 100 carry about 1e-10 of roundoff,
# so gradients below this magnitude cannot be resolved to 1e-4 relative accuracy
ABS_FLOOR = 1e-5


def random_batch(cfg, n: int, rng, with_fine: bool = True, mask_range=(1.0, 2.0)) -> Batch:
    """Random anchors on each face with random binary targets and masks."""
    coarse = {}
    for ax in Axis:
        a = rng.uniform(-0.5, 0.5, size=(n, 3))
        a[:, ax] = -0.5
        occ = rng.random((n, cfg.n_coarse)) < 0.4
        mask = np.where(occ, rng.uniform(*mask_range, size=occ.shape), 1.0)
        coarse[int(ax)] = Bucket(a, occ.astype(np.float64), mask)
    fine = None
    if with_fine:
        anchors = coarse[int(Axis.Z)].anchors
        occ = rng.random((n, cfg.n_fine)) < 0.4
        mask = np.where(occ, rng.uniform(*mask_range, size=occ.shape), 1.0)
        fine = Bucket(anchors, occ.astype(np.float64), mask)
    return Batch(coarse, fine)


def relative_error(analytic, numeric, floor: float = ABS_FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def activation_pattern(model: TifuModel, batch: Batch) -> np.ndarray:
    """Signs of every leaky-ReLU pre-activation the loss touches."""
    P, cfg = model.params, model.config
    signs = []
    for ax, bucket in sorted(batch.coarse.items()):
        if len(bucket):
            feats, _ = ray_features(P["coarse_grid"], bucket.anchors, ax, cfg.stations)
            cache = _mlp_coarse(P, AXIS_NAMES[ax], feats, False)[2]
            signs += [cache["h1p"] > 0, cache["h2p"] > 0]
    fb = batch.fine
    if fb is not None and len(fb):
        feats, _ = ray_features(P["coarse_grid"], fb.anchors, Axis.Z, cfg.stations)
        omega = _mlp_coarse(P, "z", feats, True)[1]
        ff, _ = fine_features(P["fine_grid"], fb.anchors)
        signs.append(_mlp_fine(P, ff, omega)[1]["g1p"] > 0)
    return np.concatenate([s.ravel() for s in signs])


def check_gradients(model: TifuModel, batch: Batch, h: float = 1e-4, per_block: int | None = 8,
                    rng=None, details: bool = False):
    """Worst relative error per parameter tensor.

    ``per_block=None`` checks every entry; otherwise the entries with the largest
    analytic gradient plus as many random ones are probed. A probe whose +-h step
    flips the sign of any pre-activation straddles a kink of the piecewise-linear
    activation; central differences say nothing there, so it is counted as skipped
    instead of scored. With ``details`` the result is ``(worst, skipped)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    _, _, grads = loss_and_grad(model, batch)
    base = activation_pattern(model, batch)
    worst, skipped = {}, {}
    for name, p in model.params.items():
        g = grads[name].ravel()
        if per_block is None:
            probe = np.arange(g.size)
        else:
            top = np.argsort(-np.abs(g), kind="stable")[:per_block]
            probe = np.unique(np.concatenate([top, rng.integers(0, g.size, per_block)]))
        flat = p.reshape(-1)
        numeric = np.empty(len(probe))
        smooth = np.ones(len(probe), dtype=bool)
        for j, i in enumerate(probe):
            old = flat[i]
            flat[i] = old + h
            up = loss_and_grad(model, batch, need_grad=False)[0]
            kink = not np.array_equal(activation_pattern(model, batch), base)
            flat[i] = old - h
            down = loss_and_grad(model, batch, need_grad=False)[0]
            kink = kink or not np.array_equal(activation_pattern(model, batch), base)
            flat[i] = old
            numeric[j] = (up - down) / (2 * h)
            smooth[j] = not kink
        err = relative_error(g[probe], numeric)[smooth]
        worst[name] = float(err.max()) if err.size else 0.0
        skipped[name] = int((~smooth).sum())
    return (worst, skipped) if details else worst
