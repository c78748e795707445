"""End-to-end toy experiment: rssa versus plain fine-tuning.

Stages (each cached under the runs directory and skipped when its recorded
settings match):

1. procedural source corpus, held-out corpus and stylized target set
2. source pretraining
3. one inversion of the target images, shared by every rssa run
4. adaption in both modes for each seed
5. structural consistency score of every adapted model

Run with ``python -m rssa.experiment``. The runs directory defaults to
``./runs`` and can be moved with ``RSSA_RUNS_DIR``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .compression import InvertedCodeSet
from .config import RunConfig
from .data import generate_toy_source_dataset, load_image_dir
from .generator import parameter_hash
from .scs import scs_score
from .train import adapt, invert_targets, load_compression, load_models, pretrain_source, set_single_thread

logger = logging.getLogger(__name__)

RUNS_ENV = "RSSA_RUNS_DIR"


def runs_dir() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs")).resolve()


@dataclass(frozen=True)
class ExperimentPlan:
    seeds: tuple[int, ...] = (0, 1, 2)
    modes: tuple[str, ...] = ("rssa", "baseline")
    heldout_count: int = 500
    heldout_seed: int = 777
    scs_samples: int = 500
    scs_seed: int = 12345
    config: RunConfig = field(default_factory=RunConfig)


def _stage(path: Path, settings: dict, build) -> None:
    """Run ``build()`` unless ``path/stage.json`` records the same settings."""
    marker = path / "stage.json"
    settings = json.loads(json.dumps(settings))
    if marker.exists() and json.loads(marker.read_text()) == settings:
        return
    path.mkdir(parents=True, exist_ok=True)
    build()
    marker.write_text(json.dumps(settings, indent=2, sort_keys=True))


def prepare_data(root: Path, plan: ExperimentPlan) -> dict[str, Path]:
    d = plan.config.data
    res = plan.config.model.resolution
    dirs = {"source": root / "data" / "source", "heldout": root / "data" / "heldout", "targets": root / "data" / "targets"}
    jobs = {
        "source": dict(count=d.source_count, seed=d.source_seed, style="none"),
        "heldout": dict(count=plan.heldout_count, seed=plan.heldout_seed, style="none"),
        "targets": dict(count=d.target_count, seed=d.target_seed, style=d.target_style),
    }
    for name, job in jobs.items():
        settings = {**job, "family": d.family, "resolution": res}
        _stage(dirs[name], settings, lambda job=job, name=name: generate_toy_source_dataset(
            dirs[name], job["count"], job["seed"], family=d.family, style=job["style"], resolution=res))
    return dirs


def prepare_source(root: Path, plan: ExperimentPlan, data_dir: Path) -> Path:
    cfg = plan.config
    path = root / "source" / "source.ckpt"
    settings = {"seed": cfg.seed, "model": asdict(cfg.model), "pretrain": asdict(cfg.pretrain),
                "data": asdict(cfg.data)}
    _stage(path.parent, settings, lambda: pretrain_source(cfg, data_dir, path))
    return path


def prepare_inversion(root: Path, plan: ExperimentPlan, source: Path, targets: Path) -> InvertedCodeSet:
    cfg = plan.config
    path = root / "inversion" / "codes.ckpt"
    G_s = load_models(source).G.eval()
    a = cfg.adapt
    settings = {"source_hash": parameter_hash(G_s), "shots": a.shots, "steps": a.inversion_steps,
                "lr": a.inversion_lr, "mean_samples": a.inversion_mean_samples, "targets": str(targets)}

    def build() -> None:
        images = load_image_dir(targets, G_s.cfg.resolution, limit=a.shots).images
        codes = invert_targets(G_s, images, cfg)
        arrays = {"compression.codes": codes.codes, "compression.errors": codes.errors,
                  "compression.initial_errors": codes.initial_errors}
        save_checkpoint(path, arrays, {"history": codes.history})

    _stage(path.parent, settings, build)
    arrays, meta = load_checkpoint(path)
    t = lambda k: torch.from_numpy(arrays[k].copy())  # noqa: E731
    return InvertedCodeSet(codes=t("compression.codes"), errors=t("compression.errors"),
                           initial_errors=t("compression.initial_errors"), history=meta["history"])


def run_dir(root: Path, mode: str, seed: int) -> Path:
    return root / "adapt" / f"{mode}-seed{seed}"


def prepare_adaption(root: Path, plan: ExperimentPlan, source: Path, targets: Path, mode: str, seed: int,
                     codes: InvertedCodeSet | None) -> Path:
    cfg = replace(plan.config, seed=seed, adapt=replace(plan.config.adapt, mode=mode))
    out = run_dir(root, mode, seed)
    settings = {"source": str(source), "targets": str(targets), "config": cfg.effective().to_dict()}
    _stage(out, settings, lambda: adapt(cfg, source, targets, out, resume=True,
                                        codes=codes if cfg.adapt.uses_projection else None))
    return out / "adapted.ckpt"


def evaluate(plan: ExperimentPlan, source: Path, adapted: Path, projection: bool = True) -> dict:
    out = adapted.parent / ("scs.json" if projection else "scs_raw.json")
    settings = {"samples": plan.scs_samples, "seed": plan.scs_seed, "projection": projection,
                "stamp": adapted.stat().st_mtime_ns}
    if out.exists():
        cached = json.loads(out.read_text())
        if cached.get("settings") == settings:
            return cached
    G_s = load_models(source).G.eval()
    tgt = load_models(adapted)
    stored = load_compression(tgt.arrays, tgt.meta) if projection else None
    basis = stored[1] if stored else None
    report = scs_score(G_s, tgt.G.eval(), samples=plan.scs_samples, seed=plan.scs_seed, basis=basis,
                       schedule=plan.config.adapt.modulation(G_s.num_layers))
    result = {"settings": settings, "mean": report.mean, "projection": report.projection,
              "scores": report.scores}
    out.write_text(json.dumps(result))
    return result


def discriminator_accuracy(source: Path, heldout: Path, samples: int = 500, seed: int = 0) -> float:
    """Balanced real/fake accuracy of the source discriminator on held-out reals and fresh fakes."""
    m = load_models(source)
    G, D = m.G.eval(), m.D.eval()
    real = load_image_dir(heldout, G.cfg.resolution).images
    z = torch.randn(samples, G.cfg.z_dim, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        real_logit = D(real)[0]
        fake_logit = D(G(z))[0]
    return 0.5 * float((real_logit > 0).float().mean()) + 0.5 * float((fake_logit < 0).float().mean())


def run_experiment(root: Path | None = None, plan: ExperimentPlan | None = None) -> dict:
    root = root or runs_dir()
    plan = plan or ExperimentPlan()
    set_single_thread()
    start = time.time()
    dirs = prepare_data(root, plan)
    source = prepare_source(root, plan, dirs["source"])
    codes = None
    if "rssa" in plan.modes and plan.config.adapt.projection:
        codes = prepare_inversion(root, plan, source, dirs["targets"])
    runs: dict[str, dict[int, dict]] = {}
    for seed in plan.seeds:
        for mode in plan.modes:
            ckpt = prepare_adaption(root, plan, source, dirs["targets"], mode, seed, codes)
            result = {"scs": evaluate(plan, source, ckpt)["mean"], "checkpoint": str(ckpt)}
            if mode == "rssa":
                result["scs_raw"] = evaluate(plan, source, ckpt, projection=False)["mean"]
            runs.setdefault(mode, {})[seed] = result
            logger.info("%s seed %d: scs %.4f", mode, seed, result["scs"])
    summary = {
        "source": str(source),
        "discriminator_accuracy": discriminator_accuracy(source, dirs["heldout"]),
        "inversion_errors": codes.errors.tolist() if codes is not None else None,
        "runs": {mode: {str(s): r for s, r in by_seed.items()} for mode, by_seed in runs.items()},
        "seconds": time.time() - start,
    }
    (root / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="python -m rssa.experiment", description=__doc__.splitlines()[0])
    parser.add_argument("--runs-dir", type=Path, help=f"cache directory (default ${RUNS_ENV} or ./runs)")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    summary = run_experiment(args.runs_dir.resolve() if args.runs_dir else None)
    print(json.dumps({k: v for k, v in summary.items() if k != "runs"}, indent=2))
    for mode, by_seed in summary["runs"].items():
        print(mode, {s: round(r["scs"], 4) for s, r in by_seed.items()})
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
