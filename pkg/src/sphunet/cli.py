"""Command-line entry point: ``sphunet <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import tracemalloc

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import dataio, icosphere, layers, models, neighborhood, training

__all__ = ["main", "bench_conv", "evaluate", "build_parser"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# library-level entry points


def bench_conv(level: int, d: int, f: int, op: str, iterations: int, warmup: int = 2, seed: int = 0) -> dict:
    """Time forward passes of one DiNe or RePa(3x3) layer on random input.

    ``peak_bytes`` is the tracemalloc peak of a single forward pass, i.e. the
    transient buffers the layer allocates beyond its input and weights.
    """
    if op not in ("dine", "repa"):
        raise ValueError(f"unknown op {op!r}; choose dine or repa")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    mesh = icosphere.generate(level)
    rng = np.random.default_rng(seed)
    x = ad.Value(rng.normal(size=(mesh.n_vertices, d)).astype(np.float32))
    if op == "dine":
        table = neighborhood.build_dine_table(mesh)
        w = ad.Value(layers.glorot_uniform(rng, (7 * d, f)).astype(np.float32))
        b = ad.Value(np.zeros(f, dtype=np.float32))
        run = lambda: layers.dine_conv(x, w, b, table)  # noqa: E731
    else:
        sampler = neighborhood.build_repa_sampler(mesh)
        w = ad.Value(layers.glorot_uniform(rng, (sampler.n_points * d, f)).astype(np.float32))
        b = ad.Value(np.zeros(f, dtype=np.float32))
        run = lambda: layers.repa_conv(x, sampler, w, b)  # noqa: E731
    with ad.no_grad():
        for _ in range(warmup):
            run()
        times = []
        for _ in range(iterations):
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)
        tracemalloc.start()
        try:
            run()
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
    median = float(np.median(times))
    return {
        "op": op,
        "level": level,
        "n_vertices": mesh.n_vertices,
        "in_channels": d,
        "out_channels": f,
        "iterations": iterations,
        "median_s": median,
        "throughput_vps": mesh.n_vertices / median,
        "peak_bytes": int(peak),
    }


def evaluate(checkpoint, dataset: dataio.Dataset, fold: str | None = None, vtk_dir=None) -> training.MetricReport:
    """Eval-mode metrics of a saved model over one fold (all samples when ``fold`` is None).

    With ``vtk_dir``, writes one VTK file per subject holding the
    prediction, the ground truth and an error map.
    """
    model = models.load_model(checkpoint)
    spec = model.spec
    if spec.top_level != dataset.level:
        raise ValueError(f"checkpoint is for level {spec.top_level}, dataset is level {dataset.level}")
    samples = dataset.fold(fold) if fold else dataset.samples
    if samples and samples[0].features.shape[1] != spec.in_channels:
        raise ValueError(f"checkpoint expects {spec.in_channels} channels, dataset has {samples[0].features.shape[1]}")
    report = training.evaluate_samples(model, samples, dataset.task, dataset.n_classes)
    if vtk_dir:
        os.makedirs(vtk_dir, exist_ok=True)
        mesh = icosphere.generate(dataset.level)
        for s in samples:
            out = training.predict(model, s.features)
            if dataset.task == "parcellation":
                pred = out.argmax(axis=1)
                arrays = {"prediction": pred, "ground_truth": s.target, "error": (pred != s.target).astype(np.int64)}
            else:
                arrays = {"prediction": out[:, 0], "ground_truth": s.target[:, 0], "abs_error": np.abs(out - s.target)[:, 0]}
            dataio.export_vtk(os.path.join(vtk_dir, f"{s.subject}.vtk"), mesh, arrays)
    return report


# ---------------------------------------------------------------------------
# subcommands


def _cmd_icosphere_gen(a):
    icosphere.write_mesh(a.out, icosphere.generate(a.level))


def _cmd_neighbors_dump(a):
    table = neighborhood.build_dine_table(icosphere.read_mesh(a.mesh))
    neighborhood.write_table(a.out, table)
    if a.csv:
        neighborhood.write_table_csv(a.csv, table)


def _parse_split(text, n):
    try:
        counts = [int(c) for c in text.split(",")]
    except ValueError:
        raise UsageError(f"--split must be comma-separated integers, got {text!r}")
    if len(counts) != 3 or min(counts) < 0 or sum(counts) != n:
        raise UsageError(f"--split needs three non-negative counts summing to --n={n}")
    return counts


def _cmd_data_synth(a):
    if a.task == "parcellation":
        ds = dataio.synth_parcellation(a.level, k=a.k, n_samples=a.n, seed=a.seed)
    else:
        ds = dataio.synth_regression(a.level, n_samples=a.n, seed=a.seed)
    if a.split:
        ds.split(_parse_split(a.split, a.n))
    else:
        ds.folds = {"train": [s.subject for s in ds.samples]}
    print(dataio.write_dataset(ds, a.out))


def _cmd_train(a):
    ds = dataio.load_dataset(a.data)
    if ds.task != a.task:
        raise UsageError(f"dataset task is {ds.task}, --task is {a.task}")
    train_set = ds.fold(a.train_fold) if ds.folds else ds.samples
    val_set = ds.fold(a.val_fold) if a.val_fold in ds.folds else None
    c_in = train_set[0].features.shape[1]
    c_out = ds.n_classes if ds.task == "parcellation" else 1
    spec = models.ModelSpec(
        a.variant, c_in, c_out, ds.level, base_channels=a.base_channels, pooling=a.pooling, depth=a.depth, seed=a.seed
    )
    cfg = training.TrainConfig(
        a.task,
        optimizer=a.optimizer,
        lr=a.lr,
        momentum=a.momentum,
        weight_decay=a.weight_decay,
        schedule=a.schedule,
        epochs=a.epochs,
        batch_size=a.batch_size,
        pooling=spec.pooling,
        seed=a.seed,
        augment=a.augment,
    )
    model = models.build(spec)
    log_path = a.log or f"{a.out}.log.jsonl"
    res = training.train(model, train_set, cfg, val_set=val_set, log_path=log_path)
    models.save_model(a.out, res.model)
    report = {
        "report": res.report.to_dict(),
        "best_epoch": res.best_epoch,
        "best_train_metric": res.best_train_metric,
        "config": cfg.to_dict(),
        "spec": json.loads(spec.to_json()),
    }
    with open(a.report or f"{a.out}.report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(json.dumps(res.report.to_dict(), sort_keys=True))


def _cmd_eval(a):
    ds = dataio.load_dataset(a.data)
    fold = a.fold if a.fold else None
    rep = evaluate(a.checkpoint, ds, fold, a.vtk)
    text = json.dumps(rep.to_dict(), indent=2, sort_keys=True)
    if a.report:
        with open(a.report, "w") as fh:
            fh.write(text)
    print(text)


def _cmd_bench(a):
    ops = ["dine", "repa"] if a.op == "both" else [a.op]
    rows = [bench_conv(a.level, a.channels_in, a.channels_out, op, a.iterations, a.warmup, a.seed) for op in ops]
    if a.csv:
        with open(a.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    for r in rows:
        print(json.dumps(r, sort_keys=True))


def _cmd_export_vtk(a):
    mesh = icosphere.read_mesh(a.mesh)
    with open(a.scalars, "rb") as fh:
        magic = fh.read(4)
    if magic == dataio.LABEL_MAGIC:
        arrays = {a.name: dataio.read_labels(a.scalars)}
    else:
        arrays = {a.name: dataio.read_features(a.scalars)}
    dataio.export_vtk(a.out, mesh, arrays)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed")
    common.add_argument("--threads", type=int, default=1, help="BLAS thread cap")
    common.add_argument("--config", help="JSON file of flag-name keys overlaying the defaults")

    p = argparse.ArgumentParser(prog="sphunet", description="Spherical U-Net on icosahedral meshes")
    sub = p.add_subparsers(dest="command", required=True)

    ico = sub.add_parser("icosphere", help="mesh generation").add_subparsers(dest="action", required=True)
    g = ico.add_parser("gen", parents=[common], help="write an icosphere mesh file")
    g.add_argument("--level", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_icosphere_gen)

    nb = sub.add_parser("neighbors", help="DiNe neighbor tables").add_subparsers(dest="action", required=True)
    g = nb.add_parser("dump", parents=[common], help="write the 7-slot table for a mesh file")
    g.add_argument("--mesh", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--csv", help="also write a CSV view")
    g.set_defaults(func=_cmd_neighbors_dump)

    data = sub.add_parser("data", help="synthetic datasets").add_subparsers(dest="action", required=True)
    g = data.add_parser("synth", parents=[common], help="generate a synthetic dataset directory")
    g.add_argument("--task", choices=["parcellation", "regression"], required=True)
    g.add_argument("--level", type=int, required=True)
    g.add_argument("--n", type=int, required=True, help="number of subjects")
    g.add_argument("--k", type=int, default=36, help="number of ROIs (parcellation)")
    g.add_argument("--split", help="train,val,test counts, e.g. 60,20,20")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_data_synth)

    g = sub.add_parser("train", parents=[common], help="train a model on a dataset manifest")
    g.add_argument("--task", choices=["parcellation", "regression"], required=True)
    g.add_argument("--data", required=True, help="manifest.json")
    g.add_argument("--out", required=True, help="checkpoint path")
    g.add_argument("--variant", choices=models.VARIANTS, default="unet18_dine")
    g.add_argument("--base-channels", type=int, default=64)
    g.add_argument("--depth", type=int)
    g.add_argument("--pooling", choices=["mean", "max"])
    g.add_argument("--optimizer", choices=["sgd", "adam"])
    g.add_argument("--lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--schedule", choices=["plateau", "step", "constant"])
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int, default=1)
    g.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True, help="random icosahedral rotations")
    g.add_argument("--train-fold", default="train")
    g.add_argument("--val-fold", default="val")
    g.add_argument("--log", help="JSON-lines training log (default <out>.log.jsonl)")
    g.add_argument("--report", help="final report JSON (default <out>.report.json)")
    g.set_defaults(func=_cmd_train)

    g = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--fold", default="test", help="fold name; empty string for all samples")
    g.add_argument("--vtk", help="directory for per-subject VTK maps")
    g.add_argument("--report")
    g.set_defaults(func=_cmd_eval)

    g = sub.add_parser("bench", parents=[common], help="DiNe vs RePa layer benchmark")
    g.add_argument("--level", type=int, default=5)
    g.add_argument("--channels-in", type=int, default=64)
    g.add_argument("--channels-out", type=int, default=64)
    g.add_argument("--op", choices=["dine", "repa", "both"], default="both")
    g.add_argument("--iterations", type=int, default=10)
    g.add_argument("--warmup", type=int, default=2)
    g.add_argument("--csv")
    g.set_defaults(func=_cmd_bench)

    ex = sub.add_parser("export", help="file export").add_subparsers(dest="action", required=True)
    g = ex.add_parser("vtk", parents=[common], help="write a mesh and per-vertex scalars as legacy VTK")
    g.add_argument("--mesh", required=True)
    g.add_argument("--scalars", required=True, help="SFMP feature file or SLBL label file")
    g.add_argument("--name", default="scalars")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_export_vtk)
    return p


def _leaf_parser(parser, argv):
    """The subparser that handles ``argv``, used to apply config overlays."""
    action = parser
    for tok in argv:
        sub = next((a for a in action._actions if isinstance(a, argparse._SubParsersAction)), None)
        if sub is None:
            break
        if tok in sub.choices:
            action = sub.choices[tok]
    return action


def _load_overlay(path) -> dict:
    try:
        with open(path) as fh:
            overlay = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise dataio.DataFormatError(f"{path}: cannot load config ({exc})") from exc
    if not isinstance(overlay, dict):
        raise dataio.DataFormatError(f"{path}: config must be a JSON object")
    return {k.replace("-", "_"): v for k, v in overlay.items()}


def parse_args(argv=None):
    """Parse ``argv``; a ``--config`` JSON overlay supplies defaults that explicit flags override."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config_path = pre.parse_known_args(argv)[0].config
    if config_path:
        overlay = _load_overlay(config_path)
        leaf = _leaf_parser(parser, argv)
        known = {a.dest for a in leaf._actions}
        unknown = sorted(set(overlay) - known - {"config", "help"})
        if unknown:
            leaf.error(f"unknown config keys: {', '.join(unknown)}")
        for act in leaf._actions:
            if act.dest in overlay:
                act.required = False
        leaf.set_defaults(**overlay)
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except dataio.DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except training.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (dataio.DataFormatError, icosphere.MeshFormatError, ad.CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
