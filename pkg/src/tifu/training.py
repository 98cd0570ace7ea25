"""Adam training over occupancy-vector datasets, volume inference, checkpoints and loss logs."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Batch, Bucket, TifuModel, TrainConfig, init_model, loss_and_grad, predict_coarse, predict_fine
from .occupancy import Axis, VectorDataset, face_anchors, mask_from_arrays
from .volume import AggregationWeights, DenseVolume, aggregate, resample_volume, stack_arrays

log = logging.getLogger(__name__)

CKPT_MAGIC = b"TIFM"
CKPT_VERSION = 1
LOSS_COLUMNS = ("step", "L_x", "L_y", "L_z", "L_fine_z", "total")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingAborted(RuntimeError):
    def __init__(self, step, message=None):
        super().__init__(message or f"non-finite loss at step {step}")
        self.step = step


class CheckpointError(ValueError):
    pass


@dataclass
class TrainingData:
    """Stacked arrays per coarse axis plus the fine z targets (same anchors as coarse z)."""

    coarse: dict
    fine: tuple | None

    @staticmethod
    def from_datasets(coarse: dict, fine: VectorDataset | None, delta: float) -> "TrainingData":
        arrays = {}
        for axis, ds in coarse.items():
            axes, anchors, occ, span = ds.arrays()
            if axes.size and np.any(axes != int(axis)):
                raise ValueError(f"dataset for axis {Axis(axis).name} holds other axes")
            arrays[int(axis)] = (anchors, occ.astype(np.float64), mask_from_arrays(occ, span, delta))
        fine_arr = None
        if fine is not None:
            axes, anchors, occ, span = fine.arrays()
            if np.any(axes != int(Axis.Z)):
                raise ValueError("fine dataset must contain z-axis vectors only")
            zc = arrays.get(int(Axis.Z))
            if zc is not None and not np.array_equal(zc[0], anchors):
                raise ValueError("fine dataset anchors must match the coarse z anchors")
            fine_arr = (anchors, occ.astype(np.float64), mask_from_arrays(occ, span, delta))
        return TrainingData(arrays, fine_arr)


class Adam:
    def __init__(self, params: dict, lr: float, betas=ADAM_BETAS, eps=ADAM_EPS):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        step = self.lr / c1
        root_c2 = np.sqrt(c2)
        for k in params:  # fixed key order
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            denom = np.sqrt(v)
            denom /= root_c2
            denom += self.eps
            params[k] -= step * m / denom


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class _Shuffler:
    """Epoch-wise permutations drawn from one seeded stream."""

    def __init__(self, n, rng):
        self.n = n
        self.rng = rng
        self.perm = np.zeros(0, dtype=np.int64)
        self.pos = 0

    def take(self, k):
        out = []
        while k > 0:
            if self.pos >= len(self.perm):
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            chunk = self.perm[self.pos:self.pos + k]
            self.pos += len(chunk)
            k -= len(chunk)
            out.append(chunk)
        return np.concatenate(out)


def lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "cosine" and cfg.steps > 0:
        return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / cfg.steps))
    return cfg.lr


def train(data: TrainingData, cfg: TrainConfig, model: TifuModel | None = None, callback=None):
    """Run ``cfg.steps`` Adam steps; returns ``(model, history)`` with one loss row per step.

    The fine bucket reuses the z-axis sample indices so both levels see the same anchors.
    """
    model = model if model is not None else init_model(cfg)
    opt = Adam(model.params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    shufflers = {ax: _Shuffler(len(arr[0]), np.random.default_rng([cfg.seed, 2, ax]))
                 for ax, arr in data.coarse.items() if len(arr[0])}
    fine_shuffle = None
    if data.fine is not None and int(Axis.Z) not in shufflers:
        fine_shuffle = _Shuffler(len(data.fine[0]), rng)
    history = []
    for step in range(cfg.steps):
        coarse, picks = {}, {}
        for ax, sh in shufflers.items():
            idx = sh.take(min(cfg.batch_size, sh.n))
            picks[ax] = idx
            anchors, target, mask = data.coarse[ax]
            coarse[ax] = Bucket(anchors[idx], target[idx], mask[idx])
        fine = None
        if data.fine is not None:
            idx = picks.get(int(Axis.Z))
            if idx is None:
                idx = fine_shuffle.take(min(cfg.batch_size, fine_shuffle.n))
            anchors, target, mask = data.fine
            fine = Bucket(anchors[idx], target[idx], mask[idx])
        # overflow shows up as a non-finite loss, reported below with the step index
        with np.errstate(over="ignore", invalid="ignore"):
            total, parts, grads = loss_and_grad(model, Batch(coarse, fine))
        if not np.isfinite(total):
            raise TrainingAborted(step)
        clip_global_norm(grads, cfg.clip_norm)
        opt.lr = lr_at(cfg, step)
        opt.step(model.params, grads)
        history.append((step, *parts, total))
        if callback is not None:
            callback(step, total)
        if step % 500 == 0:
            log.info("step %d loss %.5f", step, total)
    return model, history


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def infer_vectors(model: TifuModel, face_res: int, chunk: int = 512):
    """Per-axis ``(anchors, vectors)`` on the face grid: coarse x/y, fine z."""
    out = {}
    for axis in Axis:
        anchors = face_anchors(axis, face_res)
        parts = []
        for s in range(0, len(anchors), chunk):
            a = anchors[s:s + chunk]
            if axis == Axis.Z:
                parts.append(predict_fine(model, a))
            else:
                parts.append(predict_coarse(model, a, axis)[0])
        out[axis] = (anchors, np.concatenate(parts))
    return out


def infer_axis_volumes(model: TifuModel, face_res: int, out_res: int):
    vols = []
    for axis, (anchors, vectors) in infer_vectors(model, face_res).items():
        v = stack_arrays(anchors, vectors, axis, face_res, out_res)
        if face_res != out_res:
            v = resample_volume(v, out_res)
        vols.append(v)
    return vols


def infer_volume(model: TifuModel, face_res: int, out_res: int,
                 weights: AggregationWeights | None = None) -> DenseVolume:
    """Aggregate the three per-axis volumes at ``out_res`` (any resolution)."""
    w = weights if weights is not None else AggregationWeights(*model.config.weights)
    return aggregate(*infer_axis_volumes(model, face_res, out_res), w)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_CKPT_HEAD = struct.Struct("<4sII")


def save_checkpoint(model: TifuModel, path) -> None:
    """``TIFM`` + version + manifest length, JSON manifest, then float32 tensors in manifest order."""
    names = list(model.params)
    manifest = {
        "config": model.config.to_dict(),
        "tensors": [{"name": k, "shape": list(model.params[k].shape)} for k in names],
        "dtype": "<f4",
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.asarray(model.params[k], dtype="<f4").tobytes())


def load_checkpoint(path) -> TifuModel:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, mlen = _CKPT_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: version mismatch ({version})")
    try:
        manifest = json.loads(raw[_CKPT_HEAD.size:_CKPT_HEAD.size + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest") from exc
    offset = _CKPT_HEAD.size + mlen
    params = {}
    for t in manifest["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {t['name']}")
        params[t["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return TifuModel(TrainConfig.from_dict(manifest["config"]), params)


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def read_loss_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != LOSS_COLUMNS:
        raise ValueError(f"{path}: unexpected loss CSV header")
    return [(int(r[0]), *(float(x) for x in r[1:])) for r in rows[1:]]
