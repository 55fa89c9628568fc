"""Command-line frontend.

Exit codes: 0 success, 2 usage or input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import config as kvconf
from .backward import backward, mse_loss
from .composition import CosineStack, cosine_eval, cosine_fit, partial_sums, splice_grids
from .engine import forward_streaming, track_workspace
from .errors import ConfigError, NumericalAbort
from .geometry import (estimate_normals, grid_field, marching_cubes, parse_shape, save_obj,
                       surface_chamfer, volume_metrics)
from .geometry.metrics import CD_UNIT
from .grid import init_grid, load_grid, save_grid
from .trainer import GridConfig, TrainConfig, fit

log = logging.getLogger("polyfield")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

# desk-scale batch defaults for the command line (the library default is 16384 + 16384)
DESK_BATCH = 8192

METRICS_HEADER = ["cd", "vol_ae", "vol_iou", "near_ae", "near_iou"]
BENCH_HEADER = ["I", "J", "fwd_ms", "bwd_ms", "peak_bytes"]


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be >= 1")
    return vals


# -- manifest -----------------------------------------------------------------------


class Manifest:
    """Plain-text ``key = value`` record of one run."""

    def __init__(self, command: str, argv: list[str]):
        self.items: dict[str, object] = {"command": command, "argv": " ".join(argv)}
        self.t0 = time.perf_counter()

    def update(self, prefix: str, mapping: dict) -> None:
        for k, v in mapping.items():
            self.items[f"{prefix}{k}"] = v

    def __setitem__(self, key, value):
        self.items[key] = value

    def write(self, path) -> None:
        self.items["wall_time_s"] = round(time.perf_counter() - self.t0, 3)
        Path(path).write_text(kvconf.format_kv(self.items))


# -- shared option groups -------------------------------------------------------------


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--shape", required=True, help="sphere:r=0.5, box:h=0.4, torus:R=0.5,r=0.2, "
                   "bumpy:r=0.5,a=0.03,k=4 or an OBJ path")
    p.add_argument("--variant", default=None, help="trilinear|nrbf|func|offset|combined")
    p.add_argument("--deg", default=None, help="0, 1, 2, 3 or cube")
    p.add_argument("--res", type=_positive_int, default=None, help="lattice resolution R")
    p.add_argument("--fixed-scale", action="store_true", default=None,
                   help="do not store or learn per-key scales")
    p.add_argument("--surface-keys", action="store_true", default=None,
                   help="offset variant: start every key on a surface sample")
    p.add_argument("--iters", type=_nonneg_int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default=None)
    p.add_argument("--lr-final", type=float, default=None,
                   help="final step size as a fraction of --lr (cosine schedule)")
    p.add_argument("--batch-volume", type=_nonneg_int, default=None)
    p.add_argument("--batch-near", type=_nonneg_int, default=None)
    p.add_argument("--sigma", type=float, default=None, help="near-surface jitter")
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--no-mean-shift", action="store_true", default=None)
    p.add_argument("--freeze", default=None, help="comma-separated groups, e.g. offsets")
    p.add_argument("--log-every", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=_positive_int, default=None)
    p.add_argument("--config", default=None, help="key = value file with defaults")
    p.add_argument("--eval", action="store_true",
                   help="compute volume metrics and Chamfer after training")
    p.add_argument("--eval-points", type=_positive_int, default=100_000)
    p.add_argument("--mc-res", type=_positive_int, default=64)


def _configs(args) -> tuple[GridConfig, TrainConfig]:
    gmap: dict = {}
    tmap: dict = {"batch_volume": DESK_BATCH, "batch_near": DESK_BATCH}
    if args.config:
        gnames = set(GridConfig.__dataclass_fields__)
        for k, v in kvconf.read_kv(args.config).items():
            key = k.replace("-", "_")
            (gmap if key in gnames else tmap)[key] = v
    flags = {
        "variant": ("g", args.variant), "degree": ("g", args.deg), "resolution": ("g", args.res),
        "learnable_scale": ("g", None if args.fixed_scale is None else not args.fixed_scale),
        "surface_keys": ("g", args.surface_keys),
        "iterations": ("t", args.iters), "learning_rate": ("t", args.lr),
        "lr_schedule": ("t", args.lr_schedule), "lr_final": ("t", args.lr_final),
        "batch_volume": ("t", args.batch_volume), "batch_near": ("t", args.batch_near),
        "near_surface_sigma": ("t", args.sigma), "weight_decay": ("t", args.weight_decay),
        "mean_shift": ("t", None if args.no_mean_shift is None else not args.no_mean_shift),
        "freeze": ("t", args.freeze), "log_every": ("t", args.log_every),
        "seed": ("t", args.seed), "workers": ("t", args.workers),
    }
    for key, (which, value) in flags.items():
        if value is not None:
            (gmap if which == "g" else tmap)[key] = value
    gcfg = kvconf.apply(GridConfig(), gmap)
    tcfg = kvconf.apply(TrainConfig(), tmap)
    tcfg.validate()
    return gcfg, tcfg


def _outputs(out: str, default_suffix: str) -> tuple[Path, Path, Path]:
    path = Path(out)
    if path.suffix == "":
        path = path.with_suffix(default_suffix)
    return path, path.with_suffix(".loss.csv"), path.with_suffix(".manifest")


def _write_loss(path: Path, history: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for it, loss in history:
            w.writerow([int(it), repr(float(loss))])


def _evaluate(grid_or_field, oracle, args, seed: int, workers: int) -> dict:
    rng = np.random.default_rng(seed)
    field = grid_or_field if callable(grid_or_field) else grid_field(grid_or_field, workers)
    m = volume_metrics(field, oracle, args.eval_points, args.eval_points, rng=rng)
    ex = marching_cubes(field, args.mc_res)
    cd = surface_chamfer(ex.mesh, oracle, args.eval_points, rng) * CD_UNIT
    return {"cd": cd, **m.as_dict()}


# -- commands -------------------------------------------------------------------------


def cmd_fit(args, argv) -> int:
    gcfg, tcfg = _configs(args)
    oracle = parse_shape(args.shape)
    out, loss_csv, man_path = _outputs(args.out, ".efg")
    man = Manifest("fit", argv)
    man["shape"] = args.shape
    man.update("grid.", gcfg.as_dict())
    man.update("train.", tcfg.as_dict())
    log.info("fitting %s with %s R=%d deg=%s for %d iterations", args.shape, gcfg.variant,
             gcfg.resolution, gcfg.degree, tcfg.iterations)
    result = fit(oracle, gcfg, tcfg, callback=_progress(tcfg))
    save_grid(result.grid, out)
    _write_loss(loss_csv, result.history)
    man.update("", {"output": out, "loss_csv": loss_csv, "params": result.grid.param_count(),
                    "final_loss": result.final_loss, "train_time_s": round(result.seconds, 3)})
    if args.eval:
        man.update("metric.", _evaluate(result.grid, oracle, args, tcfg.seed, tcfg.workers))
    man.write(man_path)
    print(f"wrote {out} ({result.grid.describe()}), final loss {result.final_loss:.6g}")
    return EXIT_OK


def _progress(cfg: TrainConfig):
    step = max(1, cfg.iterations // 10)

    def cb(it, loss, _model):
        if it % step == 0 or it == cfg.iterations - 1:
            log.info("iter %d loss %.6g", it, loss)
    return cb


def cmd_mesh(args, argv) -> int:
    grid = load_grid(args.grid)
    man = Manifest("mesh", argv)
    ex = marching_cubes(grid_field(grid, args.workers), args.res)
    normals = None
    if ex.empty:
        warnings.warn("field has no zero crossing; writing an empty mesh", stacklevel=1)
        print("warning: field has no zero crossing; wrote an empty mesh", file=sys.stderr)
    elif args.normals:
        normals, flagged = estimate_normals(grid, ex.mesh.vertices, args.workers)
        man["normals_flagged"] = int(flagged.sum())
    out = Path(args.out)
    save_obj(ex.mesh, out, normals)
    man.update("", {"input": args.grid, "output": out, "resolution": args.res,
                    "vertices": len(ex.mesh.vertices), "faces": len(ex.mesh.faces),
                    "empty": ex.empty})
    man.write(out.with_suffix(".manifest"))
    print(f"wrote {out}: {len(ex.mesh.vertices)} vertices, {len(ex.mesh.faces)} faces")
    return EXIT_OK


def cmd_metrics(args, argv) -> int:
    grid = load_grid(args.grid)
    oracle = parse_shape(args.reference, normalize=not args.no_normalize)
    vals = _evaluate(grid, oracle, args, args.seed, args.workers)
    print(f"CD (x1e3)    {vals['cd']:.4f}")
    print(f"Volume-AE    {vals['vol_ae']:.4f}   (x1e4)")
    print(f"Volume-IOU   {vals['vol_iou']:.3f}  (%)")
    print(f"Near-AE      {vals['near_ae']:.4f}   (x1e4)")
    print(f"Near-IOU     {vals['near_iou']:.3f}  (%)")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_HEADER)
            w.writerow([repr(float(vals[k])) for k in METRICS_HEADER])
    man = Manifest("metrics", argv)
    man.update("", {"grid": args.grid, "reference": args.reference, "seed": args.seed})
    man.update("metric.", vals)
    man.write(Path(args.csv or args.grid).with_suffix(".metrics.manifest"))
    return EXIT_OK


def cmd_decompose(args, argv) -> int:
    gcfg, tcfg = _configs(args)
    oracle = parse_shape(args.shape)
    out, loss_csv, man_path = _outputs(args.out, ".efgs")
    man = Manifest("decompose", argv)
    man["shape"] = args.shape
    man["bands"] = args.bands
    man.update("grid.", gcfg.as_dict())
    man.update("train.", tcfg.as_dict())
    stack, result = cosine_fit(oracle, args.bands, gcfg, tcfg, callback=_progress(tcfg))
    stack.save(out)
    _write_loss(loss_csv, result.history)
    slices = out.with_suffix(".slices.csv")
    _write_slices(stack, slices, args.slice_res, args.slice_z, tcfg.workers)
    man.update("", {"output": out, "loss_csv": loss_csv, "slices_csv": slices,
                    "params": stack.param_count(), "final_loss": result.final_loss})
    if args.eval:
        man.update("metric.", _evaluate(lambda p: cosine_eval(stack, p, tcfg.workers), oracle,
                                        args, tcfg.seed, tcfg.workers))
    man.write(man_path)
    print(f"wrote {out} ({len(stack.bands)} bands), final loss {result.final_loss:.6g}")
    return EXIT_OK


def _write_slices(stack: CosineStack, path: Path, res: int, z: float, workers: int) -> None:
    """Per-band outputs and partial sums on the plane ``z = const``."""
    axis = np.linspace(-1.0, 1.0, res)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    q = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], axis=1)
    bands = np.stack([forward_streaming(g, q, workers).outputs for g in stack.bands], axis=1)
    parts = partial_sums(stack, q, workers).T
    nb = len(stack.bands)
    header = (["x", "y"] + [f"band_{b}" for b in range(nb)] + [f"partial_{b}" for b in range(nb)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(q)):
            w.writerow([f"{q[k, 0]:.6g}", f"{q[k, 1]:.6g}"]
                       + [repr(float(v)) for v in bands[k]] + [repr(float(v)) for v in parts[k]])


def cmd_splice(args, argv) -> int:
    a = load_grid(args.a)
    b = load_grid(args.b)
    out = splice_grids(a, b, args.axis, args.threshold)
    save_grid(out, args.out)
    man = Manifest("splice", argv)
    man.update("", {"a": args.a, "b": args.b, "axis": args.axis, "threshold": args.threshold,
                    "output": args.out})
    man.write(Path(args.out).with_suffix(".manifest"))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    rng = np.random.default_rng(args.seed)
    rows = []
    for r in args.res:
        grid = init_grid(args.variant, args.deg, r, rng=np.random.default_rng(args.seed))
        for j in args.queries:
            q = rng.uniform(-1.0, 1.0, (j, 3))
            tgt = np.linalg.norm(q, axis=1) - 0.5
            fwd, bwd, peak = [], [], 0
            for _ in range(args.repeat):
                with track_workspace() as ws:
                    t0 = time.perf_counter()
                    batch = forward_streaming(grid, q, args.workers, cull=not args.no_cull)
                    t1 = time.perf_counter()
                    _, up = mse_loss(batch.outputs, tgt)
                    backward(grid, batch, up, args.workers, cull=not args.no_cull)
                    t2 = time.perf_counter()
                fwd.append((t1 - t0) * 1e3)
                bwd.append((t2 - t1) * 1e3)
                peak = max(peak, ws.bytes())
            rows.append([grid.num_keys, j, min(fwd), min(bwd), peak])
            print(f"I={grid.num_keys:>7d} J={j:>7d} fwd={min(fwd):9.2f} ms "
                  f"bwd={min(bwd):9.2f} ms workspace={peak} B")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(BENCH_HEADER)
            for row in rows:
                w.writerow([row[0], row[1], f"{row[2]:.3f}", f"{row[3]:.3f}", row[4]])
    man = Manifest("bench", argv)
    man.update("", {"csv": args.csv or "", "variant": args.variant, "degree": args.deg,
                    "workers": args.workers, "seed": args.seed})
    man.write(Path(args.csv).with_suffix(".manifest") if args.csv else Path("bench.manifest"))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyfield", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a grid to a shape")
    _add_train_options(p)
    p.add_argument("--out", default="fit.efg")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("mesh", help="extract the zero level set as OBJ")
    p.add_argument("grid")
    p.add_argument("--res", type=_positive_int, default=64, help="marching cubes resolution")
    p.add_argument("--out", default="mesh.obj")
    p.add_argument("--normals", action="store_true", help="write per-vertex field normals")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("metrics", help="CD, AE and IOU against a reference shape")
    p.add_argument("grid")
    p.add_argument("--reference", "--shape", dest="reference", required=True,
                   help="analytic shape spec or OBJ path")
    p.add_argument("--no-normalize", action="store_true",
                   help="use an OBJ reference in its own coordinates")
    p.add_argument("--csv", default=None)
    p.add_argument("--eval-points", type=_positive_int, default=100_000)
    p.add_argument("--mc-res", type=_positive_int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("decompose", help="fit a cosine band stack")
    _add_train_options(p)
    p.add_argument("--bands", type=_nonneg_int, default=3, help="highest band index B")
    p.add_argument("--out", default="stack.efgs")
    p.add_argument("--slice-res", type=_positive_int, default=128)
    p.add_argument("--slice-z", type=float, default=0.0)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("splice", help="combine two grids across an axis-aligned plane")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--axis", type=int, choices=(0, 1, 2), default=0)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--out", default="spliced.efg")
    p.set_defaults(func=cmd_splice)

    p = sub.add_parser("bench", help="time forward/backward and record workspace")
    p.add_argument("--res", type=_int_list, default=[4, 8, 16, 32])
    p.add_argument("--queries", type=_int_list, default=[16384])
    p.add_argument("--variant", default="func")
    p.add_argument("--deg", default="1")
    p.add_argument("--repeat", type=_positive_int, default=3)
    p.add_argument("--no-cull", action="store_true", help="visit every key for every query")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args, argv)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
