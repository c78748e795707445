"""Command-line entry point.

Exit codes: 0 success, 1 runtime error (missing file, bad checkpoint),
2 configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError
from .compression import ModulationSchedule
from .config import ConfigError, RunConfig, load_config
from .data import generate_toy_source_dataset
from .figures import edge_grid, interpolate, sample_grid, save_png, save_strip
from .generator import sample_latent
from .scs import EdgeDetectorError, make_detector, paired_images, scs_score
from .train import DivergenceError, adapt, load_compression, load_models, pretrain_source, set_single_thread

logger = logging.getLogger("rssa")


def _global_options(top: bool) -> argparse.ArgumentParser:
    # flags are accepted before or after the subcommand; the subcommand copy
    # must not reset values given before it
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=d(None), help="TOML run configuration")
    p.add_argument("--seed", type=int, default=d(None),
                   help="override the run seed (sampling seed for evaluation commands)")
    p.add_argument("--out-dir", type=Path, default=d(Path(".")), help="directory for outputs")
    p.add_argument("--device", default=d(None), help="torch device, e.g. cpu or cuda:0")
    p.add_argument("--set", dest="overrides" if top else "overrides_after", action="append", default=[],
                   metavar="KEY=VALUE",
                   help="override a config value, e.g. adapt.iterations=100 (repeatable)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_options(top=False)
    parser = argparse.ArgumentParser(prog="rssa", description="Few-shot generator adaption at toy scale.",
                                     parents=[_global_options(top=True)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-source-data", parents=[common], help="write a procedural image corpus")
    p.add_argument("--count", type=int, help="number of images (default: data.source_count)")
    p.add_argument("--style", choices=["none", "palette", "sketch"], default="none",
                   help="stylization applied to every render (targets use palette or sketch)")
    p.add_argument("--data-seed", type=int, help="corpus seed (default: data.source_seed)")

    p = sub.add_parser("pretrain", parents=[common], help="train the source generator")
    p.add_argument("--data", type=Path, required=True, help="source image directory")
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("adapt", parents=[common], help="adapt the source generator to a few target images")
    p.add_argument("--source", type=Path, required=True, help="source checkpoint")
    p.add_argument("--targets", type=Path, required=True, help="target image directory")
    p.add_argument("--mode", choices=["rssa", "baseline"])
    p.add_argument("--shots", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", action="store_true", help="continue from <out-dir>/adapted.ckpt if present")

    p = sub.add_parser("evaluate-scs", parents=[common], help="structural consistency score of an adapted model")
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--detector", help="sobel or external:<path to TorchScript model>")
    p.add_argument("--no-projection", action="store_true", help="sample raw latents even if the target has a subspace")
    p.add_argument("--grid", type=int, help="write a PNG of the first K samples (0 disables)")

    p = sub.add_parser("interpolate", parents=[common], help="latent interpolation strip")
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, action="append", default=[], help="adapted checkpoint (repeatable)")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--no-projection", action="store_true")

    p = sub.add_parser("sample-grid", parents=[common], help="grid of paired source/target samples")
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cols", type=int, default=4)
    p.add_argument("--no-projection", action="store_true")

    sub.add_parser("dump-config", parents=[common], help="print every effective configuration value")
    return parser


def _config(args) -> RunConfig:
    overrides = list(args.overrides) + list(getattr(args, "overrides_after", []))
    if args.device:
        overrides.append(f'device="{args.device}"')
    command_seeds = args.command in ("evaluate-scs", "interpolate", "sample-grid")
    if args.seed is not None and not command_seeds:
        overrides.append(f"seed={args.seed}")
    extra = {
        "mode": "adapt.mode={!r}",
        "shots": "adapt.shots={}",
        "samples": "scs.samples={}",
        "detector": "scs.detector={!r}",
        "grid": "scs.grid={}",
    }
    for name, template in extra.items():
        value = getattr(args, name, None)
        if value is not None:
            overrides.append(template.format(value).replace("'", '"'))
    if getattr(args, "iterations", None) is not None:
        section = "pretrain" if args.command == "pretrain" else "adapt"
        overrides.append(f"{section}.iterations={args.iterations}")
    return load_config(args.config, overrides)


def _projection(target_meta: dict, target_arrays: dict, enabled: bool):
    """Basis and schedule stored with an adapted checkpoint, when projection is on."""
    if not enabled:
        return None, None
    stored = load_compression(target_arrays, target_meta)
    if stored is None:
        return None, None
    schedule = target_meta.get("config", {}).get("adapt", {}).get("schedule")
    return stored[1], ModulationSchedule(tuple(schedule)) if schedule else None


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")


def run(args) -> int:
    cfg = _config(args)
    out = args.out_dir
    if args.command == "dump-config":
        text = cfg.effective().dumps()
        sys.stdout.write(text)
        return 0

    set_single_thread()
    if args.command == "gen-source-data":
        seed = cfg.data.source_seed if args.data_seed is None else args.data_seed
        count = cfg.data.source_count if args.count is None else args.count
        paths = generate_toy_source_dataset(out, count, seed, family=cfg.data.family, style=args.style,
                                            resolution=cfg.model.resolution)
        logger.info("wrote %d images to %s", len(paths), out)
    elif args.command == "pretrain":
        path = pretrain_source(cfg, args.data, out / "source.ckpt")
        logger.info("source checkpoint: %s", path)
    elif args.command == "adapt":
        result = adapt(cfg, args.source, args.targets, out, resume=args.resume)
        logger.info("adapted checkpoint: %s (%d iterations)", result.checkpoint, result.iteration)
    elif args.command == "evaluate-scs":
        src = load_models(args.source)
        tgt = load_models(args.target)
        detector = make_detector(cfg.scs.detector)
        seed = cfg.scs.seed if args.seed is None else args.seed
        basis, schedule = _projection(tgt.meta, tgt.arrays, cfg.scs.projection and not args.no_projection)
        report = scs_score(src.G.eval(), tgt.G.eval(), samples=cfg.scs.samples, seed=seed, detector=detector,
                           basis=basis, schedule=schedule)
        payload = {**report.to_dict(), "source": str(args.source), "target": str(args.target)}
        _write_json(out / "scs.json", payload)
        if cfg.scs.grid > 0:
            z = torch.randn(cfg.scs.samples, src.G.cfg.z_dim, generator=torch.Generator().manual_seed(seed))
            xs, xt = paired_images(src.G, tgt.G, z[: cfg.scs.grid], basis, schedule)
            save_png(edge_grid(xs, xt, detector), out / "scs_grid.png")
        print(json.dumps({k: v for k, v in payload.items() if k != "scores"}))
    elif args.command == "interpolate":
        src = load_models(args.source)
        seed = cfg.seed if args.seed is None else args.seed
        generators, basis, schedule = [src.G], None, None
        for path in args.target:
            tgt = load_models(path)
            generators.append(tgt.G)
            if basis is None:
                basis, schedule = _projection(tgt.meta, tgt.arrays, not args.no_projection)
        z = sample_latent(2, seed, src.G.cfg.z_dim)
        frames = interpolate(src.G, generators, z[0], z[1], args.steps, basis, schedule)
        save_strip(frames, out / "interpolation.png")
        _write_json(out / "interpolation.json", {"seed": seed, "steps": args.steps,
                                                  "rows": [str(args.source)] + [str(p) for p in args.target]})
    elif args.command == "sample-grid":
        src = load_models(args.source)
        tgt = load_models(args.target)
        seed = cfg.seed if args.seed is None else args.seed
        basis, schedule = _projection(tgt.meta, tgt.arrays, not args.no_projection)
        img = sample_grid(src.G, tgt.G, args.rows, args.cols, seed, basis, schedule)
        save_png(img, out / "grid.png")
        _write_json(out / "grid.json", {"seed": seed, "rows": args.rows, "cols": args.cols,
                                         "projection": basis is not None})
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (ConfigError, EdgeDetectorError) as exc:
        logger.error("configuration error: %s", exc)
        return 2
    except DivergenceError as exc:
        logger.error("numerical divergence: %s", exc)
        return 3
    except (CheckpointError, FileNotFoundError, ValueError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
