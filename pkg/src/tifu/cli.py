"""Command-line entry point: gen, train, reconstruct, eval, volume-from-gt, fixture."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

from . import config as cfgmod
from . import fixtures
from .bvh import build_bvh
from .mesh import MeshError, TriangleMesh, is_watertight, load_obj, normalize_to_canonical, save_obj
from .occupancy import Axis, DatasetFormatError, generate_dataset, read_dataset, write_dataset
from .training import (CheckpointError, TrainingAborted, TrainingData, infer_volume, load_checkpoint,
                       save_checkpoint, train, write_loss_csv)
from .volume import AggregationWeights, VolumeError, marching_cubes, volume_from_gt, write_volume

log = logging.getLogger("tifu")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
FIXTURE_PREFIX = "fixture:"
GEN_FILES = {"x": "x.tifuvec", "y": "y.tifuvec", "z": "z.tifuvec", "fine_z": "z_fine.tifuvec"}


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_mesh(source: str) -> TriangleMesh:
    if source.startswith(FIXTURE_PREFIX):
        name = source[len(FIXTURE_PREFIX):]
        if name not in fixtures.FIXTURES:
            raise UsageError(f"unknown fixture {name!r}; choose from {', '.join(sorted(fixtures.FIXTURES))}")
        return fixtures.fixture(name)
    if not Path(source).is_file():
        raise FileNotFoundError(f"mesh not found: {source}")
    return load_obj(source)


def _load_config(args) -> cfgmod.PipelineConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, cfg, files, **extra) -> None:
    manifest = {"command": command, "config": cfg.to_dict(), "files": sorted(files), **extra}
    _dump_json(manifest, out / "manifest.json")


def _write_volume_outputs(out: Path, vol, iso: float) -> list:
    from .plotting import plot_volume_slices

    write_volume(vol, out / "volume.vol", iso)
    mesh = marching_cubes(vol, iso)
    save_obj(mesh, out / "mesh.obj")
    plot_volume_slices(vol, out / "slices.png", iso)
    if mesh.is_empty():
        log.warning("volume has no iso crossing at %g; mesh.obj is empty", iso)
    else:
        log.info("mesh.obj: %d vertices, %d triangles", mesh.n_vertices, mesh.n_triangles)
    return ["volume.vol", "volume.vol.json", "mesh.obj", "slices.png"]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fixture(args) -> int:
    if args.name not in fixtures.FIXTURES:
        raise UsageError(f"unknown fixture {args.name!r}; choose from {', '.join(sorted(fixtures.FIXTURES))}")
    path = Path(args.out if args.out != "." else f"{args.name}.obj")
    if path.parent != Path("."):
        path.parent.mkdir(parents=True, exist_ok=True)
    save_obj(fixtures.fixture(args.name), path)
    print(path)
    return EXIT_OK


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    cfg = cfgmod.override(cfg, "occupancy", n=args.n, fine_n=args.fine_n, face_res=args.face_res,
                          mode=args.mode, delta=args.delta, margin=args.margin)
    o = cfg.occupancy
    if o.fine_n < o.n:
        raise UsageError("fine_n must be >= n")
    raw = _read_mesh(args.mesh)
    watertight = is_watertight(raw)
    if not watertight:
        log.warning("%s is not watertight; occupancy still uses crossing parity", args.mesh)
    mesh, xf = normalize_to_canonical(raw, o.margin)
    out = _out_dir(args)
    mesh_id = Path(args.mesh).stem if not args.mesh.startswith(FIXTURE_PREFIX) else args.mesh
    common = dict(mode=o.mode, seed=o.seed, delta=o.delta, mesh_id=mesh_id, threads=args.threads)
    bvh = build_bvh(mesh)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # reported once above
        coarse = generate_dataset(mesh, o.n, o.face_res, bvh=bvh, **common)
        fine = generate_dataset(mesh, o.fine_n, o.face_res, axes="Z", bvh=bvh, **common)
    for axis in Axis:
        write_dataset(coarse.by_axis(axis), out / GEN_FILES[axis.name.lower()])
    write_dataset(fine, out / GEN_FILES["fine_z"])
    save_obj(mesh, out / "canonical.obj")
    files = list(GEN_FILES.values()) + ["canonical.obj"]
    _write_manifest(out, "gen", cfg, files, mesh=args.mesh, watertight=watertight,
                    samples_per_axis=o.face_res ** 2, datasets=GEN_FILES, transform=xf.to_dict())
    log.info("wrote %d samples per axis (N=%d, fine N=%d) to %s", o.face_res ** 2, o.n, o.fine_n, out)
    return EXIT_OK


def _load_training_data(dataset_dir: Path, delta: float):
    manifest_path = dataset_dir / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    files = manifest.get("datasets", GEN_FILES)
    coarse = {}
    for axis in Axis:
        coarse[axis] = read_dataset(dataset_dir / files[axis.name.lower()])
    fine_path = dataset_dir / files["fine_z"]
    fine = read_dataset(fine_path) if fine_path.is_file() else None
    ns = {ds.n for ds in coarse.values()}
    if len(ns) != 1:
        raise InputError(f"{dataset_dir}: coarse datasets disagree on N ({sorted(ns)})")
    return TrainingData.from_datasets(coarse, fine, delta), ns.pop(), None if fine is None else fine.n


def cmd_train(args) -> int:
    from .plotting import plot_loss_curve

    cfg = _load_config(args)
    cfg = cfgmod.override(cfg, "model", steps=args.steps, lr=args.lr, batch_size=args.batch_size,
                          delta=args.delta)
    data_dir = Path(args.dataset)
    data, n_coarse, n_fine = _load_training_data(data_dir, cfg.model.delta)
    # the stored vector lengths decide the decoder output sizes
    cfg = cfgmod.override(cfg, "model", n_coarse=n_coarse, n_fine=n_fine if n_fine is not None else n_coarse)
    out = _out_dir(args)
    model, history = train(data, cfg.model)
    save_checkpoint(model, out / "model.tifm")
    write_loss_csv(history, out / "loss.csv")
    _dump_json(cfg.model.to_dict(), out / "config.json")
    plot_loss_curve(history, out / "loss.png")
    files = ["model.tifm", "loss.csv", "config.json", "loss.png"]
    final = history[-1][-1] if history else None
    _write_manifest(out, "train", cfg, files, dataset=str(args.dataset), final_loss=final)
    if final is not None:
        log.info("trained %d steps, final loss %.6f", len(history), final)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = _load_config(args)
    cfg = cfgmod.override(cfg, "volume", out_res=args.out_res, face_res=args.face_res, iso=args.iso)
    v = cfg.volume
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    face_res = v.face_res if v.face_res is not None else v.out_res
    vol = infer_volume(model, face_res, v.out_res, AggregationWeights(*v.weights))
    files = _write_volume_outputs(out, vol, v.iso)
    _write_manifest(out, "reconstruct", cfg, files, checkpoint=str(args.checkpoint), face_res=face_res)
    return EXIT_OK


def cmd_volume_from_gt(args) -> int:
    cfg = _load_config(args)
    cfg = cfgmod.override(cfg, "volume", out_res=args.res, iso=args.iso)
    cfg = cfgmod.override(cfg, "occupancy", margin=args.margin)
    v = cfg.volume
    raw = _read_mesh(args.mesh)
    if not is_watertight(raw):
        log.warning("%s is not watertight; occupancy still uses crossing parity", args.mesh)
    mesh, xf = normalize_to_canonical(raw, cfg.occupancy.margin)
    out = _out_dir(args)
    vol = volume_from_gt(mesh, v.out_res, AggregationWeights(*v.weights))
    files = _write_volume_outputs(out, vol, v.iso)
    save_obj(mesh, out / "canonical.obj")
    _write_manifest(out, "volume-from-gt", cfg, files + ["canonical.obj"], mesh=args.mesh,
                    transform=xf.to_dict())
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import VIEW_YAWS, evaluate
    from .plotting import normal_rgb, plot_normal_maps, write_pfm

    cfg = _load_config(args)
    cfg = cfgmod.override(cfg, "metrics", points=args.points, map_res=args.map_res,
                          normal_region=args.normal_region)
    m = cfg.metrics
    pred, gt = _read_mesh(args.pred), _read_mesh(args.gt)
    for name, mesh in (("prediction", pred), ("ground truth", gt)):
        if mesh.is_empty():
            raise InputError(f"{name} mesh is empty; nothing to evaluate")
    scores, maps = evaluate(pred, gt, m.points, m.map_res, m.seed, m.normal_region, return_maps=True)
    report = {
        "normal": scores["normal"],
        "p2s": scores["p2s"],
        "chamfer": scores["chamfer"],
        "config": {"points": m.points, "map_res": m.map_res, "seed": m.seed, "yaws": list(VIEW_YAWS),
                   "normal_region": m.normal_region, "pred": args.pred, "gt": args.gt},
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if args.out is not None:
        out = _out_dir(args)
        (out / "report.json").write_text(text, encoding="utf-8")
        if args.maps != "none":
            if args.maps == "png":
                plot_normal_maps(maps, VIEW_YAWS, out / "normals.png")
            else:
                for yaw, (mp, mg) in zip(VIEW_YAWS, maps):
                    write_pfm(out / f"normals_{int(yaw):03d}_pred.pfm", normal_rgb(mp.normals))
                    write_pfm(out / f"normals_{int(yaw):03d}_gt.pfm", normal_rgb(mg.normals))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {v}")
    return v


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config; flags override it, it overrides defaults")
    common.add_argument("--seed", type=int, help="seed for every stochastic stage")
    common.add_argument("--threads", type=_positive_int, default=1, help="worker/BLAS thread cap")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="tifu", description="Tri-directional occupancy vectors: generate, train, reconstruct, evaluate.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("fixture", parents=[common], help="write a bundled mesh as OBJ")
    s.add_argument("name", help="sphere, box or dumbbell")
    s.add_argument("--out", default=".", help="OBJ path (default NAME.obj)")
    s.set_defaults(func=cmd_fixture)

    s = sub.add_parser("gen", parents=[common], help="ground-truth vector datasets from a mesh")
    s.add_argument("mesh", help="OBJ path or fixture:NAME")
    s.add_argument("--out", default=".")
    s.add_argument("--n", type=_positive_int, help="coarse vector length")
    s.add_argument("--fine-n", type=_positive_int, help="fine z vector length")
    s.add_argument("--face-res", type=_positive_int, help="anchors per face side")
    s.add_argument("--mode", choices=("face-grid", "uniform-random"))
    s.add_argument("--delta", type=float, help="mask scale")
    s.add_argument("--margin", type=float, help="normalization margin in [0, 0.5)")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", parents=[common], help="fit the decoder to a gen output directory")
    s.add_argument("dataset", help="directory written by gen")
    s.add_argument("--out", default=".")
    s.add_argument("--steps", type=_nonneg_int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=_positive_int)
    s.add_argument("--delta", type=float, help="mask scale used by the loss")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", parents=[common], help="volume and mesh from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--out", default=".")
    s.add_argument("--out-res", type=_positive_int)
    s.add_argument("--face-res", type=_positive_int, help="anchors per face side (default out-res)")
    s.add_argument("--iso", type=float)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("eval", parents=[common], help="normal / p2s / chamfer report")
    s.add_argument("pred", help="predicted mesh (OBJ or fixture:NAME)")
    s.add_argument("gt", help="ground-truth mesh (OBJ or fixture:NAME)")
    s.add_argument("--out", default=None, help="directory for report.json and normal maps")
    s.add_argument("--points", type=_positive_int)
    s.add_argument("--map-res", type=_positive_int)
    s.add_argument("--maps", choices=("png", "pfm", "none"), default="png")
    s.add_argument("--normal-region", choices=("union", "intersection", "full"),
                   help="pixels averaged by the normal error (default union of foregrounds)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("volume-from-gt", parents=[common], help="stack ground-truth vectors, no model")
    s.add_argument("mesh", help="OBJ path or fixture:NAME")
    s.add_argument("--out", default=".")
    s.add_argument("--res", type=_positive_int, help="volume resolution")
    s.add_argument("--iso", type=float)
    s.add_argument("--margin", type=float)
    s.set_defaults(func=cmd_volume_from_gt)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="tifu: %(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    except ImportError:  # pragma: no cover
        limiter = nullcontext()
    try:
        with limiter:
            return args.func(args)
    except TrainingAborted as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (UsageError, cfgmod.ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (OSError, MeshError, DatasetFormatError, CheckpointError, VolumeError, InputError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
