"""Command-line front end for the full pipeline.

Every subcommand is a thin wrapper over the library: file outputs are
byte-equal to the corresponding direct calls. Exit codes: 0 success,
1 usage error, 2 data/validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from . import query as query_mod
from . import synth as synth_mod
from .errors import FormatError, GOIError, NumericError, ValidationError
from .formats import (ensure_parent, read_feature_map, read_mask, write_feature_map,
                      write_mask, write_pgm, write_ppm)
from .osh import EmbeddingTable, Hyperplane, OSHConfig
from .rasterizer import render
from .scene import import_ply, load_camera, load_scene, save_scene
from .codebook import kmeans_init, load_codebook, save_codebook
from .trainer import (Dataset, TrainConfig, load_model, save_model,
                      train_semantic_field)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with the package's exit-code contract for bad usage."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _print_config(args: argparse.Namespace) -> None:
    shown = {k: v for k, v in sorted(vars(args).items())
             if k != "func" and v is not None}
    print("config:", json.dumps(shown, default=str))


def _parse_triple(text: str, what: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"{what} must be three comma-separated numbers")
    return np.array([float(p) for p in parts])


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_import_ply(args) -> int:
    scene = import_ply(args.input, feature_dim=args.feature_dim)
    save_scene(scene, args.out)
    print(f"imported {len(scene)} Gaussians -> {args.out}")
    return EXIT_OK


def cmd_init_codebook(args) -> int:
    dataset = Dataset.load_manifest(args.manifest)
    samples = np.concatenate(
        [gt.reshape(-1, gt.shape[2]) for _, gt in dataset.views])
    if samples.shape[0] > args.max_samples:
        rng = np.random.default_rng(args.seed)
        pick = rng.choice(samples.shape[0], size=args.max_samples,
                          replace=False)
        samples = samples[pick]
    cb = kmeans_init(samples, n_entries=args.entries, iters=args.iters,
                     seed=args.seed)
    save_codebook(cb, args.out)
    print(f"codebook with {cb.n_entries} entries -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    scene = load_scene(args.scene)
    dataset = Dataset.load_manifest(args.manifest)
    cb0 = load_codebook(args.codebook)
    cfg_dict = {}
    if args.config:
        cfg_dict = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if args.iterations is not None:
        cfg_dict["iterations"] = args.iterations
    cfg = TrainConfig.from_dict(cfg_dict)
    model = train_semantic_field(scene, dataset, cb0, cfg,
                                 log=lambda msg: print(msg, flush=True))
    save_model(model, args.out)
    print(f"trained model -> {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    model = load_model(args.model)
    cam = load_camera(args.camera)
    out = render(model.scene, cam)
    if not (args.out_rgb or args.out_feat or args.out_alpha):
        raise UsageError("render: no output requested")
    if args.out_rgb:
        ensure_parent(args.out_rgb)
        write_ppm(args.out_rgb, out.rgb)
    if args.out_feat:
        ensure_parent(args.out_feat)
        write_feature_map(args.out_feat, out.ld_features)
    if args.out_alpha:
        ensure_parent(args.out_alpha)
        write_pgm(args.out_alpha, out.alpha)
    return EXIT_OK


def cmd_query(args) -> int:
    model = load_model(args.model)
    cam = load_camera(args.camera)
    table = EmbeddingTable.load(args.embeddings)
    emb = table.lookup(args.text)
    pseudo = read_mask(args.pseudo_mask) if args.pseudo_mask else None
    use_osh = not args.no_osh
    if use_osh and pseudo is None:
        raise UsageError("query: OSH refinement needs --pseudo-mask "
                         "(or pass --no-osh)")
    result = query_mod.open_vocab_query(
        model, cam, emb, pseudo, use_osh=use_osh, threshold=args.threshold,
        osh_cfg=OSHConfig(init_threshold=args.threshold))
    ensure_parent(args.out_mask)
    write_mask(args.out_mask, result.mask)
    if args.out_overlay:
        rgb = render(model.scene, cam).rgb
        ensure_parent(args.out_overlay)
        write_ppm(args.out_overlay,
                  query_mod.overlay_image(rgb, result.mask))
    if args.out_goi:
        ensure_parent(args.out_goi)
        Path(args.out_goi).write_text(json.dumps(
            {"indices": [int(i) for i in result.goi_indices]}))
    if args.out_hyperplane:
        result.hyperplane.to_json(args.out_hyperplane)
    print(f"query {args.text!r}: {result.stats['positive_pixels']} positive "
          f"pixels, {result.stats['selected_gaussians']} Gaussians")
    return EXIT_OK


def cmd_manipulate(args) -> int:
    scene = load_scene(args.scene)
    indices = json.loads(Path(args.goi).read_text())["indices"]
    kwargs = {}
    if args.action == "translate":
        if args.delta is None:
            raise UsageError("manipulate: translate requires --delta x,y,z")
        kwargs["delta"] = _parse_triple(args.delta, "--delta")
    if args.action == "highlight":
        if args.color is None:
            raise UsageError("manipulate: highlight requires --color r,g,b")
        kwargs["color"] = _parse_triple(args.color, "--color")
    out = query_mod.manipulate(scene, indices, args.action, **kwargs)
    save_scene(out, args.out)
    print(f"{args.action}: {len(scene)} -> {len(out)} Gaussians")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    cases = metrics_mod.load_testset(args.testset)
    exp_dir = Path(args.testset).parent
    table = EmbeddingTable.load(exp_dir / "embeddings.json"
                                if args.embeddings is None else args.embeddings)
    result = metrics_mod.evaluate(model, cases, table,
                                  use_osh=not args.no_osh,
                                  threshold=args.threshold)
    metrics_mod.write_report(result, args.out)
    print(f"mIoU {result.miou:.4f}  mPA {result.mpa:.4f}  mP {result.mp:.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    exp = synth_mod.write_experiment(args.preset, args.seed, args.out)
    print(f"experiment {args.preset!r} (seed {args.seed}) -> {exp.directory}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------

def _add_common(p: Parser) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help="deterministic seed for this run")
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("GOI_THREADS", "1")),
                   help="worker budget (computation is deterministic "
                        "regardless of the value)")


def build_parser() -> Parser:
    parser = Parser(prog="goi",
                    description="Open-vocabulary semantic fields on frozen "
                                "3D Gaussian scenes")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    p = sub.add_parser("import-ply", help="import a vanilla 3DGS point file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--feature-dim", type=int, default=10)
    _add_common(p)
    p.set_defaults(func=cmd_import_ply)

    p = sub.add_parser("init-codebook",
                       help="spherical k-means codebook from GT feature maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--entries", type=int, default=300)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--max-samples", type=int, default=200_000)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_init_codebook, seed=0)

    p = sub.add_parser("train", help="optimize the semantic field")
    p.add_argument("--scene", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--config", default=None,
                   help="JSON file mirroring TrainConfig fields")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render rgb/features/alpha for a view")
    p.add_argument("--model", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out-rgb")
    p.add_argument("--out-feat")
    p.add_argument("--out-alpha")
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("query", help="open-vocabulary text query")
    p.add_argument("--model", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--pseudo-mask")
    p.add_argument("--no-osh", action="store_true")
    p.add_argument("--threshold", type=float, default=0.6)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--out-overlay")
    p.add_argument("--out-goi")
    p.add_argument("--out-hyperplane")
    _add_common(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("manipulate", help="edit the selected Gaussians")
    p.add_argument("--scene", required=True)
    p.add_argument("--goi", required=True,
                   help="JSON file with {\"indices\": [...]}")
    p.add_argument("--action", required=True,
                   choices=["delete", "extract", "translate", "highlight"])
    p.add_argument("--delta", help="x,y,z for translate")
    p.add_argument("--color", help="r,g,b for highlight")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_manipulate)

    p = sub.add_parser("eval", help="run the evaluation protocol")
    p.add_argument("--model", required=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--embeddings", default=None,
                   help="embedding table (defaults to the testset directory)")
    p.add_argument("--no-osh", action="store_true")
    p.add_argument("--threshold", type=float, default=0.6)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic benchmark directory")
    p.add_argument("--preset", required=True,
                   choices=sorted(synth_mod.PRESETS))
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_synth, seed=0)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:  # --help
            return int(e.code or 0)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        _print_config(args)
        return args.func(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except GOIError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
