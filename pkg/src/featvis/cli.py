"""Command-line entry points for reproducible facet-visualization runs.

Every run writes a self-describing directory: config echo, manifest with
content hashes, delimited outputs, and report figures. Flag precedence is
CLI flag > config-file value > built-in default; config files are flat
JSON whose dotted keys mirror the flags (e.g. "optimize.lr-start").
"""

from __future__ import annotations

import argparse
import glob as globmod
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, reports, runio
from .errors import ConfigError, FeatvisError, NumericAbortError
from .facets import Facet, build_facets
from .model import ToyCNN
from .montage import GridSpec, save_grid
from .pipeline import OptimizationConfig, optimize

_BOOL = argparse.BooleanOptionalAction

# flag -> (type/action, default, help); None defaults mean "required"
_BUILD_FLAGS = {
    "model": (str, None, "model weights file (.fvm)"),
    "images": (str, None, "directory of source images"),
    "layer": (str, None, "target layer name, e.g. conv3"),
    "clusters": (int, 3, "number of facets C"),
    "neighbors": (int, 10, "members per facet N"),
    "top-k": (int, 8, "channels ranked into each facet"),
    "seed": (int, 0, "seed for embedding and clustering"),
    "perplexity": (float, 5.0, "t-SNE perplexity"),
    "tsne-iters": (int, 1000, "t-SNE gradient-descent iterations"),
    "pca-dim": (int, -1, "PCA dimension before t-SNE (-1 = auto)"),
    "single-member": (int, -1, "use only this member (0 = closest to center)"),
    "resize": (_BOOL, False, "rescale images to the first image's resolution"),
    "out": (str, None, "output directory"),
}

_OPT_FLAGS = {
    "facet": ("append", None, "facet file (.fvf); repeat for several"),
    "model": (str, None, "model weights file (.fvm)"),
    "top-k": (int, 0, "re-rank this many channels (0 = facet's stored list)"),
    "iters": (int, 500, "optimization iterations T"),
    "lr-start": (float, 0.5, "learning-rate schedule start"),
    "lr-end": (float, 0.05, "learning-rate schedule end"),
    "blur-sigma-start": (float, 0.3, "Gaussian blur sigma start"),
    "blur-sigma-end": (float, 0.1, "Gaussian blur sigma end"),
    "blur-every": (int, 4, "apply blur every this many iterations"),
    "denoise-weight-start": (float, 0.005, "TV denoise weight start"),
    "denoise-weight-end": (float, 0.001, "TV denoise weight end"),
    "denoise-every": (int, 20, "apply denoising every this many iterations"),
    "denoise-iters": (int, 10, "split-Bregman outer iterations"),
    "mask-sigma-start-frac": (float, 0.4, "gradient-mask sigma start, fraction of min(H,W)"),
    "mask-sigma-end-frac": (float, 0.25, "gradient-mask sigma end, fraction of min(H,W)"),
    "mask": (_BOOL, True, "center-bias the image gradient"),
    "lambda-start": (float, 1e-3, "previous-layer L1 weight start"),
    "lambda-end": (float, 1e-4, "previous-layer L1 weight end"),
    "momentum": (float, 0.0, "gradient-descent momentum"),
    "train-robust-params": (_BOOL, True, "train the robust-loss scale/shape"),
    "strict-paper-ad": (_BOOL, False, "use the '+1' variant of the general distance branch"),
    "seed": (int, 0, "run seed recorded in the config echo"),
    "checkpoint-every": (int, 50, "checkpoint image interval"),
    "jobs": (int, 1, "parallel facet optimizations"),
    "out": (str, None, "output directory"),
}

_GRID_FLAGS = {
    "inputs": (str, None, "glob of input images"),
    "columns": (int, 5, "grid columns"),
    "cell-size": (int, 0, "resize cells to this many pixels (0 = native)"),
    "labels": (_BOOL, False, "draw filename labels under cells"),
    "out": (str, None, "output PNG path"),
}


def _attr(flag: str) -> str:
    return flag.replace("-", "_")


def _add_flags(parser, flags):
    parser.add_argument("--config", type=str, default=None,
                        help="flat JSON config file; CLI flags override it")
    for flag, (kind, _default, help_text) in flags.items():
        if kind is _BOOL:
            parser.add_argument(f"--{flag}", action=_BOOL, default=None,
                                help=help_text)
        elif kind == "append":
            parser.add_argument(f"--{flag}", action="append", default=None,
                                help=help_text)
        else:
            parser.add_argument(f"--{flag}", type=kind, default=None,
                                help=help_text)


def _effective(args, command: str, flags: dict) -> dict:
    """Merge CLI values, config-file values and defaults, in that order."""
    file_cfg = {}
    if args.config:
        file_cfg = runio.read_json(args.config)
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
    merged = {}
    for flag, (_kind, default, _help) in flags.items():
        cli_value = getattr(args, _attr(flag))
        if cli_value is not None:
            merged[flag] = cli_value
        else:
            merged[flag] = file_cfg.get(f"{command}.{flag}", default)
        if merged[flag] is None:
            raise ConfigError(
                f"missing required --{flag} (or '{command}.{flag}' in a config file)"
            )
    return merged


def _config_echo(command: str, values: dict) -> dict:
    return {f"{command}.{flag}": v for flag, v in sorted(values.items())}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_init_model(args) -> int:
    model = ToyCNN(seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    print(f"wrote {out} (seed {args.seed}, layers: {', '.join(model.layer_names())})")
    return 0


def cmd_build_facets(args) -> int:
    started = runio.utc_now()
    v = _effective(args, "build-facets", _BUILD_FLAGS)
    model = ToyCNN.load(v["model"])
    min_count = v["clusters"] * v["neighbors"]
    paths, images, hashes, notes = runio.ingest_images(
        v["images"], min_count=min_count, resize=v["resize"])
    for note in notes:
        print(f"warning: {note}", file=sys.stderr)

    facets, rows = build_facets(
        model, images, v["layer"],
        n_clusters=v["clusters"], n_neighbors=v["neighbors"], k=v["top-k"],
        seed=v["seed"], perplexity=v["perplexity"],
        tsne_iterations=v["tsne-iters"],
        pca_dim=None if v["pca-dim"] < 0 else v["pca-dim"],
        single_member=None if v["single-member"] < 0 else v["single-member"],
    )

    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, facet in enumerate(facets):
        name = f"facet_{i:03d}.fvf"
        facet.save(out / name)
        outputs.append(name)
    runio.write_embeddings_csv(out / "embeddings.csv", rows)
    reports.save_embedding_scatter(
        out / "embeddings.png", rows,
        centers=[f.meta["center"] for f in facets])
    outputs += ["embeddings.csv", "embeddings.png"]

    config = _config_echo("build-facets", v)
    runio.write_json(out / "config.json", config)
    outputs.append("config.json")
    inputs = [{"path": str(Path(v["model"])), "sha256": runio.sha256_file(v["model"])}]
    inputs += [{"path": str(p), "sha256": h} for p, h in zip(paths, hashes)]
    runio.build_manifest(out, "build-facets", config, inputs, outputs,
                         started, notes=notes)
    print(f"built {len(facets)} facets from {len(images)} images -> {out}")
    return 0


def _run_one_optimization(model, facet_path: str, cfg: OptimizationConfig,
                          run_dir: Path, config_echo: dict, started: str,
                          model_path: str) -> None:
    facet = Facet.load(facet_path)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    echo = dict(config_echo)
    echo["optimize.image-hw"] = list(facet.init_image.shape[1:])
    runio.write_json(run_dir / "config.json", echo)
    try:
        trace = optimize(model, facet, cfg)
    except NumericAbortError as exc:
        # keep the directory for post-mortem inspection
        if getattr(exc, "trace", None) is not None:
            runio.write_loss_history(run_dir / "loss_history.csv", exc.trace.rows)
        raise
    outputs = ["config.json", "loss_history.csv", "loss_curves.png", "final.png"]
    runio.write_loss_history(run_dir / "loss_history.csv", trace.rows)
    reports.save_loss_curves(run_dir / "loss_curves.png", trace.rows)
    for t, img in trace.checkpoints:
        rel = f"checkpoints/iter_{t:06d}.png"
        runio.save_image_png(run_dir / rel, img)
        outputs.append(rel)
    runio.save_image_png(run_dir / "final.png", trace.final_image)
    inputs = [
        {"path": str(Path(model_path)), "sha256": runio.sha256_file(model_path)},
        {"path": str(Path(facet_path)), "sha256": runio.sha256_file(facet_path)},
    ]
    runio.build_manifest(run_dir, "optimize", echo, inputs, outputs, started)
    last = trace.rows[-1]
    print(f"{run_dir}: {cfg.iters} iters, final total {last.total:.5f}, "
          f"mdist {last.mdist:.5f}, score {last.dm:.5f}")


def cmd_optimize(args) -> int:
    started = runio.utc_now()
    v = _effective(args, "optimize", _OPT_FLAGS)
    facet_paths = v["facet"] if isinstance(v["facet"], list) else [v["facet"]]
    model = ToyCNN.load(v["model"])
    cfg = OptimizationConfig(
        iters=v["iters"], lr_start=v["lr-start"], lr_end=v["lr-end"],
        blur_sigma_start=v["blur-sigma-start"], blur_sigma_end=v["blur-sigma-end"],
        blur_every=v["blur-every"],
        denoise_weight_start=v["denoise-weight-start"],
        denoise_weight_end=v["denoise-weight-end"],
        denoise_every=v["denoise-every"], denoise_iters=v["denoise-iters"],
        mask_sigma_start_frac=v["mask-sigma-start-frac"],
        mask_sigma_end_frac=v["mask-sigma-end-frac"],
        mask_enabled=v["mask"],
        lambda_start=v["lambda-start"], lambda_end=v["lambda-end"],
        top_k=None if v["top-k"] < 1 else v["top-k"],
        momentum=v["momentum"],
        train_robust_params=v["train-robust-params"],
        strict_paper_ad=v["strict-paper-ad"],
        seed=v["seed"], checkpoint_every=v["checkpoint-every"],
    ).validate()
    config = _config_echo("optimize", {k: val for k, val in v.items()
                                       if k not in ("jobs",)})
    out = Path(v["out"])
    if len(facet_paths) == 1:
        jobs_dirs = [(facet_paths[0], out)]
    else:
        jobs_dirs = [(p, out / Path(p).stem) for p in facet_paths]

    jobs = runio.thread_cap(v["jobs"])
    if jobs == 1 or len(jobs_dirs) == 1:
        for facet_path, run_dir in jobs_dirs:
            _run_one_optimization(model, facet_path, cfg, run_dir, config,
                                  started, v["model"])
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_run_one_optimization, model, fp, cfg, rd, config,
                            started, v["model"])
                for fp, rd in jobs_dirs
            ]
            for fut in futures:
                fut.result()
    return 0


def cmd_render_grid(args) -> int:
    v = _effective(args, "render-grid", _GRID_FLAGS)
    paths = sorted(globmod.glob(v["inputs"]))
    if not paths:
        raise ConfigError(f"no files match --inputs {v['inputs']!r}")
    cells = []
    for p in paths:
        with Image.open(p) as im:
            cells.append(np.asarray(im.convert("RGB")))
    spec = GridSpec(
        columns=v["columns"],
        cell_size=None if v["cell-size"] < 1 else v["cell-size"],
        labels=v["labels"],
    )
    out = Path(v["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_grid(out, cells, spec, labels=[Path(p).stem for p in paths])
    print(f"wrote {out} ({len(cells)} cells, {spec.columns} columns)")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featvis",
        description="Class-agnostic CNN feature visualization via clustered "
                    "activation facets and dual-objective image synthesis.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="write a seeded toy model file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("build-facets",
                       help="cluster image activations into weighted facets")
    _add_flags(p, _BUILD_FLAGS)
    p.set_defaults(func=cmd_build_facets)

    p = sub.add_parser("optimize",
                       help="synthesize an image for a facet's target activation")
    _add_flags(p, _OPT_FLAGS)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("render-grid", help="tile images into one overview grid")
    _add_flags(p, _GRID_FLAGS)
    p.set_defaults(func=cmd_render_grid)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericAbortError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FeatvisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
