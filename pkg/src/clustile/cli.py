"""Command-line pipeline: synth, train, infer, render, analyze, compare.

Every subcommand is deterministic given identical inputs and seeds, and
exits 0 on success, 2 on validation errors, 3 on I/O errors, 4 on numerical
failures.  A text config file (``key = value`` lines, keys matching flag
names) supplies defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import aggregate as agg
from . import analysis, nmf, render, saliency, synth, tensor_io
from .errors import NumericalError, ValidationError

log = logging.getLogger("clustile")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "msg": record.getMessage()})


def _setup_logging(as_json: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if as_json:
        handler.setFormatter(_JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("[%(levelname)s] %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)


def _read_kv_file(path: Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config(subparser: argparse.ArgumentParser, cfg: dict[str, str]) -> None:
    for action in subparser._actions:
        if action.dest in cfg:
            raw = cfg[action.dest]
            if isinstance(action.const, bool) or isinstance(action.default, bool):
                value = raw.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                value = action.type(raw)
            else:
                value = raw
            subparser.set_defaults(**{action.dest: value})


def _add_nmf_flags(p: argparse.ArgumentParser, *, infer_only: bool = False) -> None:
    if not infer_only:
        p.add_argument("--k", type=int, default=6, help="number of classes")
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int,
                   default=nmf.DEFAULT_INFER_ITERS if infer_only else nmf.DEFAULT_TRAIN_ITERS)
    p.add_argument("--rel-tol", type=float,
                   default=nmf.DEFAULT_INFER_REL_TOL if infer_only else nmf.DEFAULT_REL_TOL)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="clustile",
        description="NMF clustering of CNN feature maps over whole-slide tiles",
    )
    parser.add_argument("--config", type=Path, help="key = value defaults file")
    parser.add_argument("--json", action="store_true", help="machine-readable log lines")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--spec", type=Path, help="synth spec file (key = value)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-slides", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-gradients", action="store_true")
    subparsers["synth"] = p

    p = sub.add_parser("train", help="fit the factor model on manifest tiles")
    p.add_argument("manifests", type=Path, nargs="+")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--margin", type=int, default=agg.DEFAULT_MARGIN)
    _add_nmf_flags(p)
    subparsers["train"] = p

    p = sub.add_parser("infer", help="aggregate slides and write class-weight grids")
    p.add_argument("manifests", type=Path, nargs="+")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--margin", type=int, default=agg.DEFAULT_MARGIN)
    p.add_argument("--threads", type=int, default=0, help="0 = all cores")
    p.add_argument("--prune-rel", type=float, default=nmf.DEFAULT_PRUNE_REL,
                   help="zero-snap weights below this fraction of their row max")
    _add_nmf_flags(p, infer_only=True)
    subparsers["infer"] = p

    p = sub.add_parser("render", help="render weight grids to PNG overlays")
    p.add_argument("grids", nargs="+", help="grid base paths (as written by infer)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=("all", "class", "blend", "cluster"), default="all")
    p.add_argument("--class-index", type=int, default=0, help="only this class (1-based)")
    p.add_argument("--tissue", type=Path, help="tissue image to composite under (one grid)")
    p.add_argument("--opacity", type=float, default=0.6)
    p.add_argument("--scale", type=int, default=0, help="pixels per cell; 0 = cell size")
    p.add_argument("--quantile", type=float, default=render.DEFAULT_QUANTILE)
    p.add_argument("--threads", type=int, default=0)
    subparsers["render"] = p

    p = sub.add_parser("analyze", help="correlations, cosine similarity, surrogate")
    p.add_argument("manifests", type=Path, nargs="+")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sample-size", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-kind", choices=analysis.FEATURE_KINDS, default="sum")
    p.add_argument("--all-kinds", action="store_true",
                   help="also fit the surrogate for every feature kind")
    p.add_argument("--corr-mode", choices=("bootstrap", "per_tile"), default="bootstrap")
    p.add_argument("--bootstrap-resamples", type=int, default=100)
    p.add_argument("--bootstrap-size", type=int, default=1000)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--prune-rel", type=float, default=nmf.DEFAULT_PRUNE_REL)
    subparsers["analyze"] = p

    p = sub.add_parser("compare", help="IoU and correlation against GradCAM maps")
    p.add_argument("manifests", type=Path, nargs="+")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sample-size", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-slide", action="store_true",
                   help="compare on aggregated slide grids instead of per tile")
    p.add_argument("--margin", type=int, default=agg.DEFAULT_MARGIN)
    p.add_argument("--prune-rel", type=float, default=nmf.DEFAULT_PRUNE_REL)
    subparsers["compare"] = p

    return parser, subparsers


# --- subcommand bodies -------------------------------------------------------


_SYNTH_SPEC_TYPES = {
    "seed": int, "slide_id": str, "tiles_x": int, "tiles_y": int,
    "tile_size_px": int, "stride_px": int, "feature_cells": int,
    "channels": int, "k": int, "noise_sigma": float, "n_regions": int,
    "background_fraction": float, "n_rows": int, "label_quantile": float,
    "label_threshold": float, "gradient_jitter": float, "region_layout": str,
    "basis_floor": float,
}


def _load_synth_spec(path: Path | None) -> dict:
    if path is None:
        return {}
    raw = _read_kv_file(path)
    out = {}
    for key, value in raw.items():
        if key == "label_coefficients":
            out[key] = tuple(float(x) for x in value.split(","))
            continue
        if key not in _SYNTH_SPEC_TYPES:
            raise ValidationError(f"{path}: unknown synth spec key {key!r}")
        out[key] = _SYNTH_SPEC_TYPES[key](value)
    return out


def cmd_synth(args) -> int:
    fields = _load_synth_spec(args.spec)
    if args.seed is not None:
        fields["seed"] = args.seed
    base_seed = fields.get("seed", 0)
    base_id = fields.get("slide_id", "synth")
    for i in range(args.n_slides):
        fields["seed"] = base_seed + i
        fields["slide_id"] = f"{base_id}{i}" if args.n_slides > 1 else base_id
        spec = synth.SynthSpec(**fields)
        slide = synth.gen_slide(spec)
        out = args.out / spec.slide_id if args.n_slides > 1 else args.out
        manifest = synth.write_dataset(slide, out, with_gradients=not args.no_gradients)
        kept = sum(slide.tile_kept)
        log.info("wrote %s (%d/%d tiles kept)", manifest, kept, spec.n_tiles)
    return EXIT_OK


def _load_manifests(paths) -> list[tensor_io.SlideManifest]:
    return [tensor_io.load_manifest(p) for p in paths]


def cmd_train(args) -> int:
    manifests = _load_manifests(args.manifests)
    blocks = []
    for manifest in manifests:
        for tile in manifest.tiles:
            tensor = tensor_io.read_tensor(tile.tensor_path)
            interior = agg.trim_border(tensor, args.margin)
            blocks.append(interior.reshape(-1, interior.shape[2]))
    if not blocks:
        raise ValidationError("empty training set: no tiles in the given manifests")
    V = np.concatenate(blocks, axis=0)
    log.info("training on %d feature vectors (%d channels), k = %d",
             V.shape[0], V.shape[1], args.k)
    result = nmf.nmf_train(V, args.k, max_iters=args.max_iters,
                           rel_tol=args.rel_tol, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    nmf.save_model(result.model, args.out / "model.clt")
    log_lines = ["iteration\tobjective"]
    log_lines += [f"{i}\t{obj!r}" for i, obj in enumerate(result.history)]
    (args.out / "training_log.tsv").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    log.info("final objective %.6g after %d iterations",
             result.model.final_objective, result.model.train_iterations)
    return EXIT_OK


def _thread_map(fn, items, threads: int):
    if threads == 0:
        threads = os.cpu_count() or 1
    if threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def cmd_infer(args) -> int:
    model = nmf.load_model(args.model)
    manifests = _load_manifests(args.manifests)
    out_dir = args.out / "weights"
    out_dir.mkdir(parents=True, exist_ok=True)

    def run(manifest: tensor_io.SlideManifest) -> str:
        grid = agg.aggregate_slide(manifest, margin=args.margin)
        weights = agg.infer_slide_weights(grid, model, max_iters=args.max_iters,
                                          rel_tol=args.rel_tol, prune_rel=args.prune_rel)
        agg.save_grid(weights, out_dir / manifest.slide_id)
        return manifest.slide_id

    for slide_id in _thread_map(run, manifests, args.threads):
        log.info("wrote weight grid for %s", slide_id)
    return EXIT_OK


def cmd_render(args) -> int:
    if args.tissue is not None and len(args.grids) != 1:
        raise ValidationError("--tissue requires exactly one grid")
    args.out.mkdir(parents=True, exist_ok=True)

    def run(base: str) -> str:
        grid = agg.load_grid(base)
        k = grid.channels
        palette = render.default_palette(k)
        scale = args.scale if args.scale > 0 else None
        tissue = None
        if args.tissue is not None:
            # weight grids are bounding-box crops of the slide lattice, so
            # composite over the matching tissue region
            full = render.read_image(args.tissue)
            cs = grid.cell_size_px
            y0, x0 = grid.gy0 * cs, grid.gx0 * cs
            y1, x1 = y0 + grid.height * cs, x0 + grid.width * cs
            if y1 > full.shape[0] or x1 > full.shape[1]:
                raise ValidationError(
                    f"grid bbox {x0, y0}..{x1, y1} px exceeds tissue image "
                    f"{full.shape[1]}x{full.shape[0]}"
                )
            tissue = full[y0:y1, x0:x1]

        def emit(mode: str, image: np.ndarray) -> None:
            if tissue is not None:
                image = render.composite_over_tissue(image, tissue, args.opacity)
            render.write_png(args.out / f"{grid.slide_id}.{mode}.{k}.png", image)

        if args.mode in ("all", "class"):
            classes = range(1, k + 1) if args.class_index == 0 else [args.class_index]
            for cls in classes:
                emit(f"class{cls}", render.render_class_heatmap(
                    grid, cls, palette, quantile=args.quantile, scale=scale))
        if args.mode in ("all", "blend"):
            emit("blend", render.render_blended(grid, palette,
                                                quantile=args.quantile, scale=scale))
        if args.mode in ("all", "cluster"):
            emit("cluster", render.render_clustering(grid, palette, scale=scale))
        return grid.slide_id

    for slide_id in _thread_map(run, list(args.grids), args.threads):
        log.info("rendered %s", slide_id)
    return EXIT_OK


def _sample_tiles(manifests, sample_size: int, seed: int):
    """Deterministic seeded sample of (manifest, tile) pairs, order-stable."""
    pairs = [(m, t) for m in manifests for t in m.tiles]
    if len(pairs) > sample_size:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(pairs), size=sample_size, replace=False))
        pairs = [pairs[i] for i in idx]
    return pairs


def _tile_weight_map(model, tensor: np.ndarray, prune_rel: float) -> np.ndarray:
    h, w, c = tensor.shape
    weights = nmf.prune_weights(
        nmf.nmf_infer(model, tensor.reshape(-1, c).astype(np.float64)), prune_rel
    )
    return weights.reshape(h, w, model.k)


def cmd_analyze(args) -> int:
    model = nmf.load_model(args.model)
    manifests = _load_manifests(args.manifests)
    pairs = _sample_tiles(manifests, args.sample_size, args.seed)
    if not pairs:
        raise ValidationError("no tiles to analyze")

    tile_features: list[analysis.TileClassFeatures] = []
    weight_maps: list[np.ndarray] = []
    unlabeled = 0
    for manifest, tile in pairs:
        tensor = tensor_io.read_tensor(tile.tensor_path)
        wmap = _tile_weight_map(model, tensor, args.prune_rel)
        weight_maps.append(wmap)
        if tile.label is None:
            unlabeled += 1
            continue
        tile_features.append(analysis.tile_class_features(wmap, tile.label))
    if unlabeled:
        log.warning("%d sampled tiles lack labels; excluded from the surrogate", unlabeled)

    args.out.mkdir(parents=True, exist_ok=True)
    if args.corr_mode == "bootstrap":
        if len(tile_features) < 2:
            raise ValidationError("bootstrap correlation needs >= 2 labeled tiles")
        corr = analysis.weight_correlation_matrix(
            tile_features, args.feature_kind,
            n_resamples=args.bootstrap_resamples,
            resample_size=args.bootstrap_size,
            seed=args.seed,
        )
    else:
        corr = analysis.per_tile_weight_correlation(weight_maps)
    cosine = analysis.class_cosine_similarity(model)

    (args.out / "correlation.tsv").write_text(
        analysis.format_matrix_tsv(corr), encoding="utf-8")
    (args.out / "cosine.tsv").write_text(
        analysis.format_matrix_tsv(cosine), encoding="utf-8")
    tensor_io.write_tensor(args.out / "correlation_mean.clt",
                           corr.mean.astype(np.float32)[:, :, None], signed=True)
    tensor_io.write_tensor(args.out / "correlation_std.clt",
                           corr.std.astype(np.float32)[:, :, None])
    tensor_io.write_tensor(args.out / "cosine.clt",
                           cosine.astype(np.float32)[:, :, None])

    summary = [
        f"n_tiles = {len(pairs)}",
        f"n_labeled = {len(tile_features)}",
        f"corr_mode = {args.corr_mode}",
    ]
    kinds = analysis.FEATURE_KINDS if args.all_kinds else (args.feature_kind,)
    surrogate = None
    for kind in kinds:
        fitted = analysis.fit_surrogate(tile_features, kind, l2=args.l2)
        signs = "".join("+" if c > 0 else "-" for c in fitted.coefficients)
        summary.append(f"signs_{kind} = {signs}")
        summary.append(f"auc_{kind} = {fitted.metrics.auc:.6f}")
        if kind == args.feature_kind:
            surrogate = fitted
    assert surrogate is not None
    (args.out / "surrogate.tsv").write_text(
        analysis.format_surrogate_tsv(surrogate), encoding="utf-8")
    m = surrogate.metrics
    summary += [
        f"feature_kind = {surrogate.feature_kind}",
        f"accuracy = {m.accuracy:.6f}",
        f"precision = {m.precision:.6f}",
        f"recall = {m.recall:.6f}",
        f"f1 = {m.f1:.6f}",
        f"auc = {m.auc:.6f}",
        f"converged = {surrogate.converged}",
    ]
    (args.out / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    log.info("surrogate (%s): auc %.4f accuracy %.4f",
             surrogate.feature_kind, m.auc, m.accuracy)
    return EXIT_OK


def cmd_compare(args) -> int:
    model = nmf.load_model(args.model)
    manifests = _load_manifests(args.manifests)
    pairs = _sample_tiles(manifests, args.sample_size, args.seed)
    missing = [str(t.tensor_path) for _, t in pairs if t.gradient_path is None]
    if missing:
        raise ValidationError(
            "tiles lack gradient tensors (re-export with gradients): "
            + ", ".join(missing[:8]) + ("..." if len(missing) > 8 else "")
        )

    if args.per_slide:
        weight_maps, sal_maps, labels = [], [], []
        for manifest in manifests:
            grid = agg.aggregate_slide(manifest, margin=args.margin)
            weights = agg.infer_slide_weights(grid, model, prune_rel=args.prune_rel)
            sal_tiles = [
                saliency.gradcam(
                    tensor_io.read_tensor(t.tensor_path),
                    tensor_io.read_tensor(t.gradient_path),
                )[:, :, None]
                for t in manifest.tiles
            ]
            sal_grid = agg.aggregate_slide(manifest, tensors=sal_tiles, margin=args.margin)
            present = weights.present
            weight_maps.append(np.where(present[:, :, None], weights.values, 0.0))
            sal_maps.append(np.where(present, sal_grid.values[:, :, 0], 0.0))
            labels.append(int(any(t.label == 1 for t in manifest.tiles)))
        report = saliency.saliency_correlation(weight_maps, sal_maps, labels)
    else:
        weight_maps, sal_maps, labels = [], [], []
        for manifest, tile in pairs:
            if tile.label is None:
                raise ValidationError(f"tile {tile.tensor_path} has no predicted label")
            act = tensor_io.read_tensor(tile.tensor_path)
            grad = tensor_io.read_tensor(tile.gradient_path)
            weight_maps.append(_tile_weight_map(model, act, args.prune_rel))
            sal_maps.append(saliency.gradcam(act, grad))
            labels.append(tile.label)
        report = saliency.saliency_correlation(weight_maps, sal_maps, labels)

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "gradcam_table.tsv").write_text(
        saliency.format_report(report), encoding="utf-8")
    log.info("compared %d %s against GradCAM",
             len(labels), "slides" if args.per_slide else "tiles")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "render": cmd_render,
    "analyze": cmd_analyze,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subparsers = build_parser()

    config_path = None
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            config_path = Path(argv[i + 1])
        elif arg.startswith("--config="):
            config_path = Path(arg.split("=", 1)[1])
    if config_path is not None:
        try:
            cfg = _read_kv_file(config_path)
        except OSError as exc:
            print(f"[error] cannot read config: {exc}", file=sys.stderr)
            return EXIT_IO
        except ValidationError as exc:
            print(f"[error] {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        for sp in subparsers.values():
            _apply_config(sp, cfg)

    args = parser.parse_args(argv)
    _setup_logging(args.json)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
