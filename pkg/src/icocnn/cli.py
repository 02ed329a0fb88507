"""Command-line interface.

Subcommands: mesh-info, synth, rotate, project, train, crossval,
transfer, stats, verify.  Every command that writes results also writes a
``manifest.json`` next to them recording the command, the fully resolved
configuration, input file hashes, output paths, tool version and a
timestamp, so any reported number can be traced and reproduced.

Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 numeric error.
"""

from __future__ import annotations

import argparse
import csv as _csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, NumericError
from .experiments import (
    TrainConfig,
    bonferroni_pairwise,
    evaluate,
    cross_validate,
    one_way_anova,
    stratified_split,
    summarize,
    train,
    transfer_experiment,
)
from .icosphere import build_hierarchy, export_obj
from .model import (
    Model,
    build_gcnn,
    build_pcnn,
    default_freeze_count,
    load_checkpoint,
    save_checkpoint,
)
from .sampler import RectangularPatch
from .surfdata import (
    Rotation,
    demean,
    load_node_maps,
    project_dataset,
    rotate_map,
    save_node_maps,
    stack_dataset,
    synthesize_dataset,
)
from .verify import SUITES, run_suites


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, inputs, outputs) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _apply_thread_cap(args):
    cap = args.threads if args.threads is not None else os.environ.get("GCNN_THREADS")
    if cap is None:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - present in any scipy install
        print("warning: threadpoolctl unavailable, --threads ignored", file=sys.stderr)
        return None
    return threadpool_limits(int(cap))


def _resolve_train_config(args) -> TrainConfig:
    """CLI flags beat the --config file, which beats the defaults."""
    values = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(TrainConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)} in {args.config}")
        values.update(loaded)
    for flag, key in [
        ("batch_size", "batch_size"),
        ("max_epochs", "max_epochs"),
        ("extended_epochs", "extended_epochs"),
        ("lr", "lr_initial"),
        ("lr_fine", "lr_fine"),
        ("saturation_window", "saturation_window"),
        ("seed", "seed"),
    ]:
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if getattr(args, "no_shuffle", False):
        values["shuffle"] = False
    return TrainConfig(**values)


def _load_gsrf(path):
    maps = load_node_maps(path)
    if not maps:
        raise DataError(f"{path} holds no samples")
    return maps


def _prepare_mesh_dataset(path, apply_demean: bool):
    maps = _load_gsrf(path)
    if apply_demean:
        maps = [demean(m) for m in maps]
    x, y = stack_dataset(maps)
    return maps, x, y


def _load_images_npz(path):
    with np.load(path) as data:
        return data["images"].astype(np.float64), data["labels"].astype(np.int64), json.loads(str(data["meta"]))


# ---------------------------------------------------------------------------
# commands


def cmd_mesh_info(args) -> int:
    hierarchy = build_hierarchy(args.level)
    for lv in hierarchy.levels:
        print(
            f"level {lv.level}: nodes: {lv.n_nodes}  faces: {lv.n_faces}  "
            f"edges: {lv.n_edges}  mean edge length: {lv.mean_edge_length:.6f} rad"
        )
    lv = hierarchy.level(args.level)
    degs = lv.degrees()
    pent = int((degs == 5).sum())
    print(f"pentagon nodes: {pent}, hexagon nodes: {lv.n_nodes - pent}")
    hist = {int(d): int((degs == d).sum()) for d in np.unique(degs)}
    print(f"degree histogram: {hist} (sum {sum(hist.values())})")
    if args.export:
        export_obj(lv, args.export)
        out = Path(args.export)
        _write_manifest(
            out.parent if str(out.parent) else Path("."),
            "mesh-info",
            {"level": args.level, "export": str(out)},
            [],
            [out],
        )
        print(f"wrote {out}")
    return 0


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    hierarchy = build_hierarchy(args.level)
    maps = synthesize_dataset(hierarchy.level(args.level), args.samples, seed=args.seed)
    data_path = out_dir / "data.gsrf"
    save_node_maps(data_path, maps)
    config = {"level": args.level, "samples": args.samples, "seed": args.seed}
    _write_manifest(out_dir, "synth", config, [], [data_path])
    counts = np.bincount([m.label for m in maps]).tolist() if maps else []
    print(f"wrote {data_path} ({args.samples} samples, class counts {counts})")
    return 0


def cmd_rotate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = _load_gsrf(args.data)
    hierarchy = build_hierarchy(maps[0].level)
    level = hierarchy.level(maps[0].level)
    rotation = Rotation.from_axis_angle(args.axis, args.degrees)
    rotated = [rotate_map(level, m, rotation) for m in maps]
    data_path = out_dir / "data.gsrf"
    save_node_maps(data_path, rotated)
    config = {"axis": args.axis, "degrees": args.degrees, "data": str(args.data)}
    _write_manifest(out_dir, "rotate", config, [args.data], [data_path])
    print(f"wrote {data_path} (rotated {args.degrees} deg about {args.axis})")
    return 0


def cmd_project(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = _load_gsrf(args.data)
    if not args.no_demean:
        maps = [demean(m) for m in maps]
    hierarchy = build_hierarchy(maps[0].level)
    level = hierarchy.level(maps[0].level)
    images, labels = project_dataset(level, maps, args.width, args.height, args.pad)
    meta = {
        "level": maps[0].level,
        "width": args.width,
        "height": args.height,
        "pad": args.pad,
        "demeaned": not args.no_demean,
        "source": str(args.data),
    }
    data_path = out_dir / "images.npz"
    np.savez_compressed(
        data_path,
        images=images.astype(np.float32),
        labels=labels,
        meta=json.dumps(meta),
    )
    _write_manifest(out_dir, "project", meta, [args.data], [data_path])
    print(f"wrote {data_path} (image planes {images.shape[1]}x{images.shape[2]})")
    return 0


def _build_model_for_args(args, config, maps, x):
    if args.arch == "gcnn":
        level = maps[0].level
        hierarchy = build_hierarchy(level)
        patch = RectangularPatch(args.patch_size, args.patch_size)
        model = build_gcnn(
            hierarchy,
            channels=x.shape[2],
            patch=patch,
            filters_per_conv=args.filters,
            hidden=args.hidden,
            classes=int(np.max([m.label for m in maps])) + 1,
            seed=config.seed,
            start_level=level,
            end_level=args.end_level,
        )
        return model, x

    hierarchy = build_hierarchy(maps[0].level)
    level = hierarchy.level(maps[0].level)
    images, _ = project_dataset(level, maps, args.proj_width, args.proj_height, args.proj_pad)
    side_h = images.shape[1]
    side_w = images.shape[2]
    model = build_pcnn(
        width=side_w,
        height=side_h,
        channels=images.shape[3],
        classes=int(np.max([m.label for m in maps])) + 1,
        seed=config.seed,
        filters=args.filters if args.filters != 36 else 64,
        hidden=args.hidden if args.hidden != 50 else 100,
    )
    model.meta["projection"] = {
        "width": args.proj_width,
        "height": args.proj_height,
        "pad": args.proj_pad,
        "demean": not args.no_demean,
    }
    return model, images


def _print_shape_chain(model: Model):
    shapes = model.shape_chain(batch=1)
    chain = " -> ".join("x".join(str(d) for d in s[1:]) for s in shapes)
    print(f"{model.kind} shape chain: {chain}")


def _write_curves(out_dir: Path, records) -> Path:
    path = out_dir / "curves.csv"
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["fold", "epoch", "train_err", "val_err"])
        for rec in records:
            for e, (tr, va) in enumerate(zip(rec.train_errors, rec.val_errors), start=1):
                writer.writerow([rec.fold, e, f"{tr:.17g}", f"{va:.17g}"])
    return path


def _write_records(out_dir: Path, records, extra=None) -> Path:
    path = out_dir / "records.json"
    payload = {"records": [r.to_json() for r in records], "summary": summarize(records)}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
    return path


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = _resolve_train_config(args)
    maps, x, y = _prepare_mesh_dataset(args.data, not args.no_demean)
    model, data = _build_model_for_args(args, config, maps, x)
    _print_shape_chain(model)
    plan = stratified_split(y, k=args.val_k, test_fraction=args.test_fraction, seed=config.seed)
    fold = plan.folds[0]
    record = train(
        model, data[fold.train_idx], y[fold.train_idx], data[fold.val_idx], y[fold.val_idx],
        config,
    )
    record.fold = 0
    test_err, confusion = evaluate(model, data[plan.test_idx], y[plan.test_idx])
    record.test_accuracy = 1.0 - test_err
    record.confusion = confusion.tolist()

    ckpt_path = out_dir / "model.ckpt"
    save_checkpoint(model, ckpt_path)
    records_path = _write_records(out_dir, [record])
    curves_path = _write_curves(out_dir, [record])
    _write_manifest(
        out_dir,
        "train",
        {**asdict(config), "arch": args.arch, "data": str(args.data)},
        [args.data],
        [ckpt_path, records_path, curves_path],
    )
    print(
        f"test accuracy {record.test_accuracy:.4f} "
        f"(best epoch {record.chosen_epoch}/{len(record.val_errors)})"
    )
    return 0


def cmd_crossval(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = _resolve_train_config(args)
    maps, x, y = _prepare_mesh_dataset(args.data, not args.no_demean)
    proto, data = _build_model_for_args(args, config, maps, x)
    _print_shape_chain(proto)
    plan = stratified_split(y, k=args.k, test_fraction=args.test_fraction, seed=config.seed)

    def builder(seed):
        model, _ = _build_model_for_args(args, TrainConfig(**{**asdict(config), "seed": seed}), maps, x)
        return model

    records = cross_validate(builder, data, y, plan, config)
    best = max(records, key=lambda r: (r.test_accuracy, -r.fold))
    model = builder(config.seed + best.fold)
    fold = plan.folds[best.fold]
    train(model, data[fold.train_idx], y[fold.train_idx], data[fold.val_idx], y[fold.val_idx],
          TrainConfig(**{**asdict(config), "seed": config.seed + best.fold}))
    ckpt_path = out_dir / "model.ckpt"
    save_checkpoint(model, ckpt_path)

    records_path = _write_records(out_dir, records, {"best_fold": best.fold})
    curves_path = _write_curves(out_dir, records)
    _write_manifest(
        out_dir,
        "crossval",
        {**asdict(config), "arch": args.arch, "k": args.k, "data": str(args.data)},
        [args.data],
        [ckpt_path, records_path, curves_path],
    )
    s = summarize(records)
    print(
        f"{args.k}-fold test accuracy {s['mean_accuracy']:.4f} +- {s['std_accuracy']:.4f} "
        f"(best fold {best.fold})"
    )
    return 0


def cmd_transfer(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = _resolve_train_config(args)
    model = load_checkpoint(args.checkpoint)
    freeze = default_freeze_count(model) if args.freeze is None else args.freeze

    if str(args.data).endswith(".npz"):
        data, y, meta = _load_images_npz(args.data)
    elif model.kind == "pcnn":
        proj = model.meta.get("projection")
        if proj is None:
            raise ConfigError(
                "checkpoint lacks projection settings; pass pre-projected .npz data"
            )
        maps = _load_gsrf(args.data)
        if proj.get("demean", True):
            maps = [demean(m) for m in maps]
        hierarchy = build_hierarchy(maps[0].level)
        data, y = project_dataset(
            hierarchy.level(maps[0].level), maps, proj["width"], proj["height"], proj["pad"]
        )
    else:
        _, data, y = _prepare_mesh_dataset(args.data, not args.no_demean)

    plan = stratified_split(y, k=args.k, test_fraction=args.test_fraction, seed=config.seed)
    records = transfer_experiment(model, data, y, freeze, plan, config)
    records_path = _write_records(out_dir, records, {"freeze": freeze})
    curves_path = _write_curves(out_dir, records)
    _write_manifest(
        out_dir,
        "transfer",
        {**asdict(config), "checkpoint": str(args.checkpoint), "freeze": freeze,
         "k": args.k, "data": str(args.data)},
        [args.checkpoint, args.data],
        [records_path, curves_path],
    )
    s = summarize(records)
    print(
        f"transfer ({freeze} rows frozen): accuracy {s['mean_accuracy']:.4f} "
        f"+- {s['std_accuracy']:.4f}"
    )
    return 0


def cmd_stats(args) -> int:
    groups = []
    for path in args.records:
        with open(path) as fh:
            payload = json.load(fh)
        accs = payload.get("summary", {}).get("accuracies")
        if accs is None:
            raise DataError(f"{path} has no summary.accuracies")
        groups.append(accs)
    sizes = {len(g) for g in groups}
    if len(sizes) > 1:
        print(
            f"warning: unequal fold counts {sorted(len(g) for g in groups)}; "
            "proceeding with unbalanced ANOVA",
            file=sys.stderr,
        )
    anova = one_way_anova(groups)
    print(
        f"F({anova.df_between},{anova.df_within}) = {anova.f_value:.3f}, "
        f"p = {anova.p_value:.4f}"
    )
    pairs = bonferroni_pairwise(groups)
    print("pair  t        p_raw    p_corrected")
    for r in pairs:
        print(f"{r.group_a}-{r.group_b}   {r.t_value: .3f}  {r.p_raw:.4f}   {r.p_corrected:.4f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["statistic", "value"])
            writer.writerow(["F", f"{anova.f_value:.17g}"])
            writer.writerow(["df_between", anova.df_between])
            writer.writerow(["df_within", anova.df_within])
            writer.writerow(["p", f"{anova.p_value:.17g}"])
            writer.writerow(["pair", "t", "p_raw", "p_corrected"])
            for r in pairs:
                writer.writerow(
                    [f"{r.group_a}-{r.group_b}", f"{r.t_value:.17g}",
                     f"{r.p_raw:.17g}", f"{r.p_corrected:.17g}"]
                )
        print(f"wrote {args.csv}")
    return 0


def cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    checks = run_suites(names)
    failed = 0
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p, default_test_fraction=0.1):
    p.add_argument("--config", help="JSON file with training-config fields")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--extended-epochs", type=int, dest="extended_epochs")
    p.add_argument("--lr", type=float, dest="lr")
    p.add_argument("--lr-fine", type=float, dest="lr_fine")
    p.add_argument("--saturation-window", type=int, dest="saturation_window")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--test-fraction", type=float, default=default_test_fraction)
    p.add_argument("--no-demean", action="store_true")


def _add_arch_flags(p):
    p.add_argument("--arch", choices=["gcnn", "pcnn"], default="gcnn")
    p.add_argument("--filters", type=int, default=36,
                   help="mesh filters per conv (pcnn default: 64)")
    p.add_argument("--hidden", type=int, default=50, help="hidden units (pcnn default: 100)")
    p.add_argument("--patch-size", type=int, default=5, help="rectangular patch side")
    p.add_argument("--end-level", type=int, default=1, help="coarsest mesh level")
    p.add_argument("--proj-width", type=int, default=214, help="pcnn interior image width")
    p.add_argument("--proj-height", type=int, default=214, help="pcnn interior image height")
    p.add_argument("--proj-pad", type=int, default=5, help="pcnn wrap padding")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icocnn",
        description="Convolutional networks for scalar data on icosahedral spherical meshes",
    )
    parser.add_argument("--threads", type=int, help="cap BLAS worker threads (1 = bit-reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh-info", help="print mesh statistics per level")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--export", help="write the level as an OBJ file")
    p.set_defaults(func=cmd_mesh_info)

    p = sub.add_parser("synth", help="write a synthetic labeled dataset")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rotate", help="globally rotate every sample")
    p.add_argument("--data", required=True)
    p.add_argument("--axis", default="z", help="x, y, z (default z)")
    p.add_argument("--degrees", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rotate)

    p = sub.add_parser("project", help="project samples to equirectangular images")
    p.add_argument("--data", required=True)
    p.add_argument("--width", type=int, default=224)
    p.add_argument("--height", type=int, default=224)
    p.add_argument("--pad", type=int, default=5)
    p.add_argument("--no-demean", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("train", help="train one model on a single split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-k", type=int, default=10, help="validation share = 1/val_k")
    _add_arch_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", help="k-fold cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=10)
    _add_arch_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("transfer", help="retrain only the head of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--freeze", type=int, help="rows to freeze (default: all below the head)")
    p.add_argument("--k", type=int, default=10)
    _add_train_flags(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("stats", help="ANOVA and pairwise tests over records files")
    p.add_argument("--records", nargs="+", required=True)
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("verify", help="run the built-in verification suites")
    p.add_argument("--suite", choices=[*SUITES, "all"], default="all")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    limits = _apply_thread_cap(args)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:  # includes format and geometry errors
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    finally:
        if limits is not None:
            limits.unregister()


def entry() -> None:  # console-script hook
    sys.exit(main())


if __name__ == "__main__":
    entry()
