#!/usr/bin/env python3
"""
fmapnet command-line interface

Precompute spectral bases and descriptors, train the descriptor network,
match shape pairs, refine and evaluate correspondences.

Usage:
    fmapnet [--config FILE] [--seed N] [--threads N] [--out DIR] COMMAND ...
"""

import os
import sys
import json
import time
import logging
import argparse

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .config import PipelineConfig, PENALTY_NAMES
from .desc_net import save_checkpoint, load_checkpoint
from .descriptors import compute_shot, compute_hks, load_descriptors, save_descriptors
from .errors import FmapError, DataError, CacheMismatchError, ParameterError, DimensionError
from .eval_harness import geodesic_error, correlation, save_report
from .fmap_solver import FunctionalMap, save_fmap, load_fmap
from .matching import match_pair, geodesic_monitor, MATCH_METHODS
from .mesh_core import load_mesh, save_mesh
from .pointwise_map import icp_refine, load_point_map, save_point_map
from .spectral_basis import compute_basis, load_basis, save_basis, truncate
from .synthetic import isometric_pair
from .trainer import ShapeData, DescriptorTrainer, ablation_configs, smoothed
from .utils import configure_logging, ensure_dir, atomic_write, atomic_path

logger = logging.getLogger("cli")


def shape_name(path):
    return os.path.splitext(os.path.basename(path))[0]


def cache_paths(config, name):
    base = os.path.join(config.cache_dir, name)
    return {"basis": f"{base}.basis.npz", "descriptors": f"{base}.desc.csv", "meta": f"{base}.desc.json"}


def _descriptor_meta(mesh, config):
    return {"mesh_hash": mesh.content_hash(), "settings": config.descriptor.settings_key(), "k": config.k}


def _compute_descriptors(mesh, basis, config):
    settings = config.descriptor
    if settings.kind == "shot":
        radius = settings.shot_radius or settings.shot_radius_fraction * mesh.bounding_box_diagonal
        return compute_shot(mesh, radius=radius, n_jobs=config.threads)
    if settings.kind == "hks":
        return compute_hks(basis, num_times=settings.hks_times)
    if not settings.descriptor_dir:
        raise ParameterError("descriptor kind 'file' needs descriptor.descriptor_dir")
    return load_descriptors(os.path.join(settings.descriptor_dir, f"{mesh.name}.csv"), mesh.n_vertices)


def prepare_shape(path, config, auto_precompute=True, force=False):
    """
    Load a mesh with its basis and descriptors, from cache when up to date.

    Args:
        path (str): Mesh file
        config (PipelineConfig): Pipeline settings
        auto_precompute (bool): Compute missing caches instead of failing
        force (bool): Recompute even when caches are current

    Returns:
        tuple: (ShapeData, status dict with 'basis', 'descriptors' and timing entries)
    """
    mesh = load_mesh(path)
    paths = cache_paths(config, mesh.name)
    status = {"shape": mesh.name, "n": mesh.n_vertices}

    basis = None
    if not force and os.path.exists(paths["basis"]):
        try:
            basis = truncate(load_basis(paths["basis"], expected_hash=mesh.content_hash(), min_k=config.k),
                             config.k)
            status["basis"] = "cached"
        except CacheMismatchError as e:
            logger.info(f"Stale basis cache for '{mesh.name}': {e}")
    if basis is None:
        if not auto_precompute:
            raise DataError(f"no current basis cache for shape '{mesh.name}' in {config.cache_dir}; "
                            f"run 'fmapnet precompute' first")
        started = time.perf_counter()
        basis = compute_basis(mesh, k=config.k)
        save_basis(basis, paths["basis"])
        status["basis"] = "computed"
        status["basis_seconds"] = time.perf_counter() - started

    meta = _descriptor_meta(mesh, config)
    descriptors = None
    if not force and os.path.exists(paths["descriptors"]) and os.path.exists(paths["meta"]):
        with open(paths["meta"], 'r') as f:
            cached_meta = json.load(f)
        current = cached_meta.get("mesh_hash") == meta["mesh_hash"] and cached_meta.get("settings") == meta["settings"]
        # heat kernel signatures depend on the basis size
        if config.descriptor.kind == "hks":
            current = current and cached_meta.get("k") == meta["k"]
        if current:
            descriptors = load_descriptors(paths["descriptors"], mesh.n_vertices)
            status["descriptors"] = "cached"
    if descriptors is None:
        if not auto_precompute:
            raise DataError(f"no current descriptor cache for shape '{mesh.name}'; run 'fmapnet precompute' first")
        started = time.perf_counter()
        descriptors = _compute_descriptors(mesh, basis, config)
        save_descriptors(descriptors, paths["descriptors"])
        with atomic_write(paths["meta"]) as f:
            json.dump(meta, f, indent=2)
        status["descriptors"] = "computed"
        status["descriptor_seconds"] = time.perf_counter() - started

    return ShapeData(mesh.name, basis, descriptors.values, mesh=mesh), status


def _name_shape(error, path):
    error.args = (f"shape '{shape_name(path)}': {error}",)
    return error


def _load_shapes(paths, config, auto_precompute=True):
    shapes = []
    for path in paths:
        try:
            shape, _ = prepare_shape(path, config, auto_precompute=auto_precompute)
        except FmapError as e:
            raise _name_shape(e, path)
        shapes.append(shape)
    return shapes


def _parse_pairs(text):
    if not text:
        return None
    pairs = []
    for item in text.split(","):
        if ":" not in item:
            raise ParameterError(f"pair '{item}' must be written SOURCE:TARGET")
        a, b = item.split(":", 1)
        pairs.append((a.strip(), b.strip()))
    return pairs


def _parse_gt(specs, shapes):
    """SOURCE:TARGET:FILE entries, FILE mapping TARGET vertices to SOURCE vertices."""
    by_name = {s.name: s for s in shapes}
    labelled = []
    for spec in specs or []:
        parts = spec.split(":", 2)
        if len(parts) != 3:
            raise ParameterError(f"ground truth '{spec}' must be written SOURCE:TARGET:FILE")
        source, target, path = parts
        if source not in by_name or target not in by_name:
            raise ParameterError(f"ground truth '{spec}' names a shape that is not loaded")
        truth = load_point_map(path, n_source=by_name[source].n, n_target=by_name[target].n)
        labelled.append((by_name[source], by_name[target], truth))
    return labelled


def _print_table(rows):
    for key, value in rows:
        print(f"  {key:<24} {value}")


def cmd_precompute(args, config):
    paths = args.shapes or config.shapes
    if not paths:
        raise ParameterError("no shapes given")
    ensure_dir(config.cache_dir)

    def work(path):
        try:
            return prepare_shape(path, config, auto_precompute=True, force=args.force)[1]
        except FmapError as e:
            raise _name_shape(e, path)

    statuses = Parallel(n_jobs=config.threads, prefer="threads")(delayed(work)(p) for p in paths)
    print(f"Precomputed {len(statuses)} shapes (k={config.k}, descriptors={config.descriptor.kind})")
    for status in statuses:
        timing = ""
        if "basis_seconds" in status or "descriptor_seconds" in status:
            timing = (f" basis {status.get('basis_seconds', 0.0):.2f}s,"
                      f" descriptors {status.get('descriptor_seconds', 0.0):.2f}s")
        print(f"  {status['shape']}: basis {status['basis']}, descriptors {status['descriptors']}{timing}")
    return 0


def _run_header(config):
    train = config.train
    weights = train.effective_weights
    return [
        ("shapes", len(config.shapes)),
        ("k", train.k),
        ("weights (w1..w4)", weights.as_tuple()),
        ("learning rate", train.learning_rate),
        ("iterations", train.iterations),
        ("batch pairs", train.batch_pairs),
        ("points per shape", train.points_per_shape),
        ("E4 descriptor fraction", train.e4_descriptor_fraction),
        ("dtype", train.dtype),
        ("seed", train.seed),
    ]


def _train_once(shapes, config, pairs=None, labelled=None):
    monitor = None
    if labelled and config.train.eval_every:
        monitor = geodesic_monitor(labelled, n_jobs=config.threads)
    trainer = DescriptorTrainer(shapes, config.train, pairs=pairs, monitor=monitor)
    return trainer.train()


def cmd_train(args, config):
    paths = args.shapes or config.shapes
    if len(paths) < 2:
        raise ParameterError(f"training needs at least 2 shapes, got {len(paths)}")
    config.shapes = list(paths)
    print("Training run")
    _print_table(_run_header(config))

    shapes = _load_shapes(paths, config, auto_precompute=config.auto_precompute)
    labelled = _parse_gt(args.gt, shapes)
    result = _train_once(shapes, config, pairs=_parse_pairs(args.pairs), labelled=labelled)

    ensure_dir(config.out_dir)
    checkpoint = args.checkpoint or os.path.join(config.out_dir, "checkpoint.npz")
    save_checkpoint(result.params, checkpoint, config_hash=config.train.config_hash(),
                    extra={"train": config.train.to_dict(), "shapes": [s.name for s in shapes]})
    log_path = os.path.join(config.out_dir, "train_log.csv")
    with atomic_path(log_path) as tmp:
        result.log.to_csv(tmp, index=False)

    summary = {"iterations": int(len(result.log))}
    if len(result.log):
        last = result.log.iloc[-1]
        summary.update({name: float(last[name]) for name in ("loss",) + PENALTY_NAMES})
        summary["smoothed_loss"] = float(smoothed(result.loss_history)[-1])
    with atomic_write(os.path.join(config.out_dir, "train_summary.json")) as f:
        json.dump(summary, f, indent=2)

    print(f"Checkpoint: {checkpoint}")
    print(f"Training log: {log_path} ({len(result.log)} rows)")
    _print_table([(k, v) for k, v in summary.items()])
    return 0


def _resolve_method(args):
    if args.axiomatic:
        return "axiomatic"
    return args.method or ("learned" if args.checkpoint else "axiomatic")


def cmd_match(args, config, refine=False):
    source_path, target_path = args.source, args.target
    if args.direction == "reverse":
        source_path, target_path = target_path, source_path
    shape1, shape2 = _load_shapes([source_path, target_path], config, auto_precompute=config.auto_precompute)
    refine = refine or args.refine

    params = None
    method = _resolve_method(args)
    if method != "axiomatic":
        if not args.checkpoint:
            raise ParameterError(f"method '{method}' needs --checkpoint")
        params, _, _ = load_checkpoint(args.checkpoint)
        if params.d != shape1.d:
            raise DimensionError(f"checkpoint width {params.d} does not match descriptor width {shape1.d}")

    if getattr(args, "fmap", None):
        C12 = load_fmap(args.fmap).matrix
        started = time.perf_counter()
        C12, point_map, _ = icp_refine(C12, shape1.basis, shape2.basis, max_iters=config.icp_max_iters,
                                       n_jobs=config.threads)
        timings = {"refine": time.perf_counter() - started}
    else:
        result = match_pair(shape1, shape2, params=params, method=method, alpha=config.alpha, refine=refine,
                            icp_max_iters=config.icp_max_iters, n_jobs=config.threads)
        C12, point_map, timings = result.C12, result.point_map, result.timings

    stem = os.path.join(config.out_dir, f"{shape1.name}_to_{shape2.name}")
    fmap_path = args.fmap_out or f"{stem}.fmap.csv"
    map_path = args.map_out or f"{stem}.map.txt"
    save_fmap(FunctionalMap(C12, shape1.name, shape2.name), fmap_path)
    save_point_map(point_map, map_path)

    print(f"Matched {shape1.name} -> {shape2.name} ({method}{', refined' if refine else ''})")
    _print_table([("functional map", fmap_path), ("point map", map_path)]
                 + [(f"{stage} seconds", f"{seconds:.3f}") for stage, seconds in timings.items()])
    return 0


def cmd_refine(args, config):
    return cmd_match(args, config, refine=True)


def cmd_eval(args, config):
    mesh = load_mesh(args.source_mesh)
    point_map = load_point_map(args.map, n_source=mesh.n_vertices)
    truth = load_point_map(args.gt, n_source=mesh.n_vertices, n_target=len(point_map))
    report = geodesic_error(point_map, truth, mesh, n_jobs=config.threads)

    stem = os.path.join(config.out_dir, "eval")
    json_path = args.json or f"{stem}.json"
    curve_path = args.curve or f"{stem}_curve.csv"
    save_report(report, json_path, curve_path, extra={"map": args.map, "ground_truth": args.gt})
    print(f"Geodesic error of {args.map}")
    _print_table([("mean", f"{report.mean:.6g}"), ("95th percentile", f"{report.percentile95:.6g}"),
                  ("max", f"{report.max:.6g}"), ("report", json_path), ("curve", curve_path)])
    return 0


def cmd_ablation(args, config):
    paths = args.shapes or config.shapes
    if len(paths) < 2:
        raise ParameterError(f"ablation needs at least 2 shapes, got {len(paths)}")
    if not args.gt:
        raise ParameterError("ablation needs at least one --gt SOURCE:TARGET:FILE")
    try:
        k_values = [int(k) for k in args.k_values.split(",")] if args.k_values else [config.k]
    except ValueError:
        raise ParameterError(f"--k-values must be comma-separated integers, got '{args.k_values}'")
    subsets = ablation_configs()
    if args.subsets:
        wanted = [s.strip() for s in args.subsets.split(";") if s.strip()]
        unknown = [name for name in wanted if name not in subsets]
        if unknown or not wanted:
            raise ParameterError(f"unknown penalty subsets {unknown}; expected names from {list(subsets)}")
        subsets = {name: subsets[name] for name in wanted}
    config = config.with_train(k=max(k_values))
    shapes = _load_shapes(paths, config, auto_precompute=config.auto_precompute)

    rows = []
    for k in k_values:
        truncated = [ShapeData(s.name, truncate(s.basis, k), s.descriptors, s.mesh) for s in shapes]
        labelled = _parse_gt(args.gt, truncated)
        for name, active in subsets.items():
            run = config.with_train(k=k, active_penalties=list(active))
            started = time.perf_counter()
            result = DescriptorTrainer(truncated, run.train).train()
            reports = [geodesic_error(match_pair(s1, s2, params=result.params).point_map, truth, s1.mesh,
                                      n_jobs=config.threads) for s1, s2, truth in labelled]
            rows.append({
                "k": k, "penalties": name,
                "mean": float(np.mean([r.mean for r in reports])),
                "percentile95": float(np.mean([r.percentile95 for r in reports])),
                "max": float(np.max([r.max for r in reports])),
                "final_loss": float(result.loss_history[-1]) if len(result.log) else float("nan"),
                "seconds": time.perf_counter() - started,
            })
            logger.info(f"Ablation k={k} {name}: mean error {rows[-1]['mean']:.6g}")

    table = pd.DataFrame(rows)
    ensure_dir(config.out_dir)
    csv_path = os.path.join(config.out_dir, "ablation.csv")
    with atomic_path(csv_path) as tmp:
        table.to_csv(tmp, index=False)
    with atomic_write(os.path.join(config.out_dir, "ablation.json")) as f:
        json.dump(rows, f, indent=2)
    print(table.to_string(index=False))
    return 0


def cmd_correlate(args, config):
    try:
        log = pd.read_csv(args.log)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"cannot read training log {args.log}: {e}")
    if "geo_error" not in log.columns or "loss" not in log.columns:
        raise DataError(f"training log {args.log} needs 'loss' and 'geo_error' columns")
    sampled = log.dropna(subset=["geo_error"])
    r = correlation(sampled["loss"].to_numpy(), sampled["geo_error"].to_numpy())
    print(f"Pearson r between loss and geodesic error over {len(sampled)} samples: {r:.4f}")
    return 0


def cmd_synth(args, config):
    out = ensure_dir(args.directory)
    template, deformed, truth = isometric_pair(nx=args.nx, ny=args.ny, seed=config.seed, permute=not args.no_permute)
    template_path = os.path.join(out, f"{template.name}.off")
    deformed_path = os.path.join(out, f"{deformed.name}.off")
    truth_path = os.path.join(out, f"{deformed.name}_to_{template.name}.gt.txt")
    save_mesh(template, template_path)
    save_mesh(deformed, deformed_path)
    save_point_map(truth, truth_path)
    print(f"Synthetic pair written to {out}")
    _print_table([("template", template_path), ("deformed", deformed_path), ("ground truth", truth_path)])
    return 0


def _add_training_flags(parser):
    parser.add_argument('--k', type=int, help='Basis size')
    parser.add_argument('--iterations', type=int, help='Optimisation steps')
    parser.add_argument('--batch-pairs', type=int, help='Shape pairs per step')
    parser.add_argument('--learning-rate', type=float, help='ADAM learning rate')
    parser.add_argument('--points', type=int, help='Sampled vertices per shape and step')
    parser.add_argument('--e4-fraction', type=float, help='Fraction of descriptors used by E4')
    parser.add_argument('--weights', type=str, help='Penalty weights w1,w2,w3,w4')
    parser.add_argument('--penalties', type=str, help='Active penalties, e.g. E1,E2,E3,E4')
    parser.add_argument('--dtype', choices=['float32', 'float64'], help='Arithmetic precision')
    parser.add_argument('--layers', type=int, help='Residual layers of the network')
    parser.add_argument('--pairing', choices=['random', 'all'], help='Pair selection per step')
    parser.add_argument('--log-every', type=int, help='Progress logging interval')
    parser.add_argument('--eval-every', type=int, help='Geodesic-error evaluation interval (needs --gt)')
    parser.add_argument('--no-auto-precompute', action='store_true', help='Fail on missing caches')


def _add_descriptor_flags(parser):
    parser.add_argument('--descriptor', choices=['shot', 'hks', 'file'], help='Raw descriptor type')
    parser.add_argument('--descriptor-dir', type=str, help='Directory of <shape>.csv descriptor files')
    parser.add_argument('--shot-radius', type=float, help='SHOT support radius')
    parser.add_argument('--hks-times', type=int, help='Number of HKS diffusion times')


def build_parser():
    parser = argparse.ArgumentParser(prog='fmapnet', description='Unsupervised learning of descriptors for shape correspondence')
    parser.add_argument('--config', type=str, help='JSON configuration file')
    parser.add_argument('--seed', type=int, help='Random seed')
    parser.add_argument('--threads', type=int, help='Worker threads')
    parser.add_argument('--out', type=str, help='Output directory')
    parser.add_argument('--verbose', action='store_true', help='Debug logging')

    subparsers = parser.add_subparsers(dest='command', help='Command to run')
    subparsers.required = True

    precompute = subparsers.add_parser('precompute', help='Compute basis and descriptor caches')
    precompute.add_argument('shapes', nargs='*', help='Mesh files (OFF/OBJ)')
    precompute.add_argument('--k', type=int, help='Basis size')
    precompute.add_argument('--force', action='store_true', help='Recompute up-to-date caches')
    _add_descriptor_flags(precompute)

    train = subparsers.add_parser('train', help='Train the descriptor network')
    train.add_argument('shapes', nargs='*', help='Mesh files (OFF/OBJ)')
    _add_training_flags(train)
    _add_descriptor_flags(train)
    train.add_argument('--pairs', type=str, help='Restrict to pairs A:B,C:D (shape names)')
    train.add_argument('--gt', action='append', help='SOURCE:TARGET:FILE ground truth for monitoring')
    train.add_argument('--checkpoint', type=str, help='Checkpoint output path')

    for name, help_text in (('match', 'Compute a correspondence'), ('refine', 'Compute and ICP-refine a correspondence')):
        match = subparsers.add_parser(name, help=help_text)
        match.add_argument('source', help='Source mesh (S1)')
        match.add_argument('target', help='Target mesh (S2)')
        match.add_argument('--checkpoint', type=str, help='Trained network checkpoint')
        match.add_argument('--axiomatic', action='store_true', help='Regularised solve on raw descriptors')
        match.add_argument('--method', choices=MATCH_METHODS, help='Estimation method')
        match.add_argument('--alpha', type=float, help='Laplacian commutativity weight')
        match.add_argument('--refine', action='store_true', help='Run spectral ICP')
        match.add_argument('--direction', choices=['forward', 'reverse'], default='forward',
                           help='reverse swaps source and target')
        match.add_argument('--fmap-out', type=str, help='Functional map CSV path')
        match.add_argument('--map-out', type=str, help='Point map path')
        match.add_argument('--k', type=int, help='Basis size')
        match.add_argument('--no-auto-precompute', action='store_true', help='Fail on missing caches')
        _add_descriptor_flags(match)
        if name == 'refine':
            match.add_argument('--fmap', type=str, help='Refine this functional map CSV instead of estimating one')

    evaluate = subparsers.add_parser('eval', help='Geodesic error of a point map')
    evaluate.add_argument('map', help='Computed point map')
    evaluate.add_argument('gt', help='Ground-truth point map')
    evaluate.add_argument('source_mesh', help='Mesh the map entries index into')
    evaluate.add_argument('--json', type=str, help='Statistics output path')
    evaluate.add_argument('--curve', type=str, help='Curve CSV output path')

    ablation = subparsers.add_parser('ablation', help='Train one model per penalty subset')
    ablation.add_argument('shapes', nargs='*', help='Mesh files (OFF/OBJ)')
    _add_training_flags(ablation)
    _add_descriptor_flags(ablation)
    ablation.add_argument('--gt', action='append', help='SOURCE:TARGET:FILE ground truth')
    ablation.add_argument('--k-values', type=str, help='Comma-separated basis sizes to sweep')
    ablation.add_argument('--subsets', type=str, help='Semicolon-separated subset names, e.g. E3;E4;E1+E2+E3+E4')

    correlate = subparsers.add_parser('correlate', help='Loss vs geodesic error correlation of a training log')
    correlate.add_argument('log', help='Training log CSV with a geo_error column')

    synth = subparsers.add_parser('synth', help='Write a synthetic near-isometric pair')
    synth.add_argument('directory', help='Output directory')
    synth.add_argument('--nx', type=int, default=32, help='Grid vertices along x')
    synth.add_argument('--ny', type=int, default=32, help='Grid vertices along y')
    synth.add_argument('--no-permute', action='store_true', help='Keep the vertex order of the bent copy')
    return parser


_OVERRIDES = [
    ("seed", "seed"), ("threads", "threads"), ("out", "out_dir"), ("k", "k"),
    ("iterations", "train.iterations"), ("batch_pairs", "train.batch_pairs"),
    ("learning_rate", "train.learning_rate"), ("points", "train.points_per_shape"),
    ("e4_fraction", "train.e4_descriptor_fraction"), ("dtype", "train.dtype"),
    ("layers", "train.num_layers"), ("pairing", "train.pairing"), ("log_every", "train.log_every"),
    ("eval_every", "train.eval_every"), ("alpha", "alpha"),
    ("descriptor", "descriptor.kind"), ("descriptor_dir", "descriptor.descriptor_dir"),
    ("shot_radius", "descriptor.shot_radius"), ("hks_times", "descriptor.hks_times"),
]


def overrides_from_args(args):
    """Flat configuration overrides for the flags given on the command line."""
    overrides = {}
    for attr, key in _OVERRIDES:
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "weights", None):
        values = [float(v) for v in args.weights.split(",")]
        if len(values) != 4:
            raise ParameterError(f"--weights needs 4 values, got {len(values)}")
        overrides.update({f"weights.w{i + 1}": v for i, v in enumerate(values)})
    if getattr(args, "penalties", None):
        overrides["train.active_penalties"] = [p.strip().upper() for p in args.penalties.split(",") if p.strip()]
    if getattr(args, "no_auto_precompute", False):
        overrides["auto_precompute"] = False
    return overrides


COMMANDS = {
    'precompute': cmd_precompute,
    'train': cmd_train,
    'match': cmd_match,
    'refine': cmd_refine,
    'eval': cmd_eval,
    'ablation': cmd_ablation,
    'correlate': cmd_correlate,
    'synth': cmd_synth,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = PipelineConfig.load(args.config, overrides=overrides_from_args(args))
        ensure_dir(config.out_dir)
        configure_logging(os.path.join(config.out_dir, "fmapnet.log"),
                          level=logging.DEBUG if args.verbose else logging.INFO)
        logger.info(f"Running '{args.command}' with output directory {config.out_dir}")
        return COMMANDS[args.command](args, config)
    except FmapError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
