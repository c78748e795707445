"""Source pretraining and few-shot adaption loops."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .adversarial import PathLengthRegularizer, discriminator_adv_loss, generator_adv_loss, r1_penalty
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_module,
    load_optimizer,
    module_arrays,
    optimizer_arrays,
    save_checkpoint,
)
from .compression import (
    InvertedCodeSet,
    LayerBasis,
    ProjectionCounter,
    SubspaceBasis,
    build_subspace,
    invert_images,
    project_stack,
)
from .config import RunConfig
from .data import load_image_dir
from .generator import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, frozen_copy, parameter_hash
from .scs import scs_score
from .structural import sample_disturbance, structural_loss

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


def _check(name: str, value: torch.Tensor, iteration: int) -> float:
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(v):
        raise DivergenceError(f"{name} became non-finite ({v}) at iteration {iteration}")
    return v


def set_single_thread() -> None:
    """Single-threaded kernels so runs are bit-reproducible."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _adam(params, lr: float, betas) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=tuple(float(b) for b in betas))


@dataclass
class SourceModels:
    G: Generator
    D: Discriminator
    meta: dict
    arrays: dict


def load_models(path: str | Path) -> SourceModels:
    """Generator and discriminator from any checkpoint written by this module."""
    arrays, meta = load_checkpoint(path)
    try:
        G = Generator(GeneratorConfig.from_dict(meta["generator"]))
        D = Discriminator(DiscriminatorConfig.from_dict(meta["discriminator"]))
    except KeyError as exc:
        raise CheckpointError(f"{path}: metadata lacks {exc}") from None
    load_module(G, arrays, "G")
    load_module(D, arrays, "D")
    return SourceModels(G=G, D=D, meta=meta, arrays=arrays)


def pretrain_source(cfg: RunConfig, data_dir: str | Path, out_path: str | Path,
                    iterations: int | None = None) -> Path:
    """Train a source generator/discriminator pair from scratch on an image folder.

    Writes ``out_path`` (checkpoint) and ``out_path`` with ``.jsonl`` suffix
    (loss log every ``log_every`` iterations).
    """
    p = cfg.pretrain
    iterations = p.iterations if iterations is None else iterations
    dataset = load_image_dir(data_dir, cfg.model.resolution)
    if len(dataset) < p.min_images:
        raise ValueError(f"source corpus has {len(dataset)} images, need at least {p.min_images}")
    device = torch.device(cfg.device)
    torch.manual_seed(cfg.seed)
    G = Generator(cfg.model.generator()).to(device)
    D = Discriminator(cfg.model.discriminator()).to(device)
    adv = p.adversarial()
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    opt_g = _adam(G.parameters(), p.g_lr, p.betas)
    opt_d = _adam(D.parameters(), p.d_lr, p.betas)
    pl = PathLengthRegularizer(decay=p.pl_decay)
    out_path = Path(out_path)
    log_path = out_path.with_suffix(".jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    z_dim = G.cfg.z_dim
    start = time.time()

    def save(i: int) -> None:
        arrays = {**module_arrays("G", G), **module_arrays("D", D)}
        meta = {
            "kind": "source",
            "generator": G.cfg.to_dict(),
            "discriminator": D.cfg.to_dict(),
            "seed": cfg.seed,
            "iteration": i,
            "corpus": str(data_dir),
            "corpus_size": len(dataset),
            "config": cfg.to_dict(),
        }
        save_checkpoint(out_path, arrays, meta)

    with open(log_path, "w") as log:
        for i in range(iterations):
            real = dataset.sample(p.batch_size, gen).to(device)
            z = torch.randn(p.batch_size, z_dim, generator=gen).to(device)
            with torch.no_grad():
                fake = G(z)
            loss_d = discriminator_adv_loss(D, real, fake, adv)
            r1 = torch.zeros(())
            if adv.r1_gamma > 0 and i % adv.r1_interval == 0:
                r1 = r1_penalty(D, real, adv.r1_gamma)
                loss_d = loss_d + r1 * adv.r1_interval
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()

            D.requires_grad_(False)
            z = torch.randn(p.batch_size, z_dim, generator=gen).to(device)
            loss_g = generator_adv_loss(D, G(z), adv)
            pl_pen = torch.zeros(())
            if adv.pl_weight > 0 and i % adv.pl_interval == 0:
                styles = G.map(z[: max(1, p.batch_size // 2)])
                pl_pen = pl(G, styles, generator=gen)
                loss_g = loss_g + pl_pen * adv.pl_weight * adv.pl_interval
            opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            opt_g.step()
            D.requires_grad_(True)

            vd = _check("discriminator loss", loss_d, i)
            vg = _check("generator loss", loss_g, i)
            if i % p.log_every == 0 or i == iterations - 1:
                rec = {"iter": i, "loss_d": vd, "loss_g": vg, "r1": float(r1.detach()), "pl": float(pl_pen.detach()),
                       "pl_mean": pl.mean, "wall": time.time() - start}
                log.write(json.dumps(rec) + "\n")
                log.flush()
                logger.info("pretrain %d/%d  D %.4f  G %.4f", i, iterations, vd, vg)
            if (i + 1) % p.checkpoint_every == 0 and i + 1 < iterations:
                save(i + 1)
    save(iterations)
    return out_path


def compression_arrays(codes: InvertedCodeSet, basis: SubspaceBasis) -> tuple[dict[str, torch.Tensor], dict]:
    arrays = {
        "compression.codes": codes.codes,
        "compression.errors": codes.errors,
        "compression.initial_errors": codes.initial_errors,
    }
    for l, layer in enumerate(basis.layers):
        arrays[f"compression.layer{l}.A"] = layer.A
        arrays[f"compression.layer{l}.solve"] = layer.solve
    return arrays, {"lam": [layer.lam for layer in basis.layers]}


def load_compression(arrays: dict[str, np.ndarray], meta: dict) -> tuple[InvertedCodeSet, SubspaceBasis] | None:
    """Inverted codes and bases stored under ``compression.``, or None if the checkpoint has none."""
    if "compression.codes" not in arrays:
        return None
    t = lambda k: torch.from_numpy(arrays[k].copy())  # noqa: E731
    codes = InvertedCodeSet(codes=t("compression.codes"), errors=t("compression.errors"),
                            initial_errors=t("compression.initial_errors"))
    lams = meta["compression"]["lam"]
    layers = tuple(
        LayerBasis(A=t(f"compression.layer{l}.A"), solve=t(f"compression.layer{l}.solve"), lam=float(lams[l]))
        for l in range(len(lams))
    )
    return codes, SubspaceBasis(layers)


def invert_targets(G_s: Generator, images: torch.Tensor, cfg: RunConfig) -> InvertedCodeSet:
    a = cfg.adapt
    logger.info("inverting %d target images (%d steps)", images.shape[0], a.inversion_steps)
    return invert_images(G_s, images, steps=a.inversion_steps, lr=a.inversion_lr,
                         mean_samples=a.inversion_mean_samples)


@dataclass
class AdaptResult:
    checkpoint: Path
    metrics: Path
    iteration: int
    finished: bool


def _truncate_metrics(path: Path, iteration: int) -> None:
    """Drop records at or after ``iteration`` so a resumed run appends a clean suffix."""
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line.strip() and json.loads(line)["iter"] < iteration]
    path.write_text("".join(line + "\n" for line in keep))


def adapt(
    cfg: RunConfig,
    source_checkpoint: str | Path,
    target_dir: str | Path,
    out_dir: str | Path,
    resume: bool = False,
    stop_after: int | None = None,
    codes: InvertedCodeSet | None = None,
) -> AdaptResult:
    """Adapt a copy of the source generator to the images in ``target_dir``.

    Writes ``adapted.ckpt`` and ``metrics.jsonl`` into ``out_dir``. With
    ``resume`` the run continues from ``adapted.ckpt`` if present.
    ``stop_after`` checkpoints and returns once that many iterations are
    done, which is how an interruption is simulated. Precomputed inverted
    ``codes`` skip the inversion preamble.
    """
    a = cfg.adapt
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "adapted.ckpt"
    metrics_path = out_dir / "metrics.jsonl"
    device = torch.device(cfg.device)
    total = a.effective_iterations
    batch = a.effective_batch_size

    src = load_models(source_checkpoint)
    G_s = frozen_copy(src.G).to(device)
    source_hash = parameter_hash(G_s)
    resolution = G_s.cfg.resolution
    target = load_image_dir(target_dir, resolution, limit=a.shots)
    if len(target) < a.shots:
        raise ValueError(f"{a.shots}-shot adaption needs {a.shots} images, found {len(target)} in {target_dir}")

    structural = a.structural(resolution)
    schedule = a.modulation(G_s.num_layers)
    adv = a.adversarial()

    G_t = Generator(G_s.cfg).to(device)
    G_t.load_state_dict(G_s.state_dict())
    G_t.mapping.requires_grad_(False)
    D = src.D.to(device)
    synthesis = [q for n, q in G_t.named_parameters() if not n.startswith("mapping.")]
    opt_g = _adam(synthesis, a.g_lr, a.betas)
    opt_d = _adam(D.parameters(), a.d_lr, a.betas)
    pl = PathLengthRegularizer(decay=a.pl_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    counter = ProjectionCounter()
    start = 0
    basis = None

    if resume and ckpt_path.exists():
        arrays, meta = load_checkpoint(ckpt_path)
        if meta.get("source_hash") != source_hash:
            raise CheckpointError(f"{ckpt_path} was adapted from a different source generator")
        load_module(G_t, arrays, "G")
        load_module(D, arrays, "D")
        load_optimizer(opt_g, arrays, meta["opt_g"], "opt_g")
        load_optimizer(opt_d, arrays, meta["opt_d"], "opt_d")
        gen.set_state(torch.from_numpy(arrays["rng.state"].copy()))
        pl.load_state_dict(meta["path_length"])
        counter.degenerate = int(meta["degenerate"])
        start = int(meta["iteration"])
        stored = load_compression(arrays, meta)
        if stored is not None:
            codes, basis = stored
        logger.info("resuming adaption at iteration %d", start)
    if a.uses_projection and basis is None:
        if codes is None:
            codes = invert_targets(G_s, target.images.to(device), cfg)
        basis = build_subspace(codes, a.lam)
    _truncate_metrics(metrics_path, start)

    def save(iteration: int) -> None:
        arrays = {**module_arrays("G", G_t), **module_arrays("D", D), "rng.state": gen.get_state()}
        g_arrays, g_meta = optimizer_arrays("opt_g", opt_g)
        d_arrays, d_meta = optimizer_arrays("opt_d", opt_d)
        arrays.update(g_arrays)
        arrays.update(d_arrays)
        meta = {
            "kind": "adapted",
            "generator": G_t.cfg.to_dict(),
            "discriminator": D.cfg.to_dict(),
            "seed": cfg.seed,
            "iteration": iteration,
            "iterations": total,
            "mode": a.mode,
            "config": cfg.effective().to_dict(),
            "source_checkpoint": str(source_checkpoint),
            "source_hash": source_hash,
            "targets": target.files,
            "opt_g": g_meta,
            "opt_d": d_meta,
            "path_length": pl.state_dict(),
            "degenerate": counter.degenerate,
        }
        if basis is not None:
            c_arrays, c_meta = compression_arrays(codes, basis)
            arrays.update(c_arrays)
            meta["compression"] = c_meta
        save_checkpoint(ckpt_path, arrays, meta)

    z_dim = G_s.cfg.z_dim
    neighbours = a.neighbours
    wall0 = time.time()
    with open(metrics_path, "a") as metrics:
        for i in range(start, total):
            if stop_after is not None and i >= stop_after:
                save(i)
                return AdaptResult(ckpt_path, metrics_path, i, finished=False)
            # latent batch: one disturbance group, or one group per independent anchor
            if a.batch_mode == "disturbance":
                z = torch.randn(1, z_dim, generator=gen)
                if neighbours > 0:
                    z = sample_disturbance(z[0], a.radius_ratio * float(z.norm()), neighbours, generator=gen)
                group, adv_idx = batch, torch.arange(batch)
            else:
                z = anchors = torch.randn(batch, z_dim, generator=gen)
                if neighbours > 0:
                    z = torch.cat([sample_disturbance(x, a.radius_ratio * float(x.norm()), neighbours, generator=gen)
                                   for x in anchors])
                group, adv_idx = neighbours + 1, torch.arange(batch) * (neighbours + 1)
            with torch.no_grad():
                styles = G_s.map(z.to(device)).cpu()
                if basis is not None:
                    styles = project_stack(styles, basis, schedule, counter)
            styles = styles.to(device)
            real = target.sample(batch, gen).to(device)

            with torch.no_grad():
                fake = G_t.synthesize(styles[adv_idx])[0]
            loss_d = discriminator_adv_loss(D, real, fake, adv)
            r1 = torch.zeros(())
            if adv.r1_gamma > 0 and i % adv.r1_interval == 0:
                r1 = r1_penalty(D, real, adv.r1_gamma)
                loss_d = loss_d + r1 * adv.r1_interval
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()

            D.requires_grad_(False)
            fake, feats_t = G_t.synthesize(styles)
            loss_adv = generator_adv_loss(D, fake[adv_idx], adv)
            loss_g = loss_adv
            scc = dcc = torch.zeros(())
            if a.uses_structure:
                with torch.no_grad():
                    _, feats_s = G_s.synthesize(styles)
                terms = structural_loss(feats_s, feats_t, structural, group_size=group)
                scc, dcc = terms.scc, terms.dcc
                loss_g = loss_g + terms.total
            pl_pen = torch.zeros(())
            if adv.pl_weight > 0 and i % adv.pl_interval == 0:
                pl_pen = pl(G_t, styles[adv_idx], generator=gen)
                loss_g = loss_g + pl_pen * adv.pl_weight * adv.pl_interval
            opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            opt_g.step()
            D.requires_grad_(True)

            rec = {
                "iter": i,
                "loss_g_adv": _check("generator loss", loss_adv, i),
                "loss_g": _check("generator total loss", loss_g, i),
                "loss_d": _check("discriminator loss", loss_d, i),
                "scc": _check("scc loss", scc, i),
                "dcc": _check("dcc loss", dcc, i),
                "r1": float(r1.detach()),
                "pl": float(pl_pen.detach()),
                "pl_mean": pl.mean,
                "degenerate": counter.degenerate,
            }
            if a.scs_every and (i + 1) % a.scs_every == 0:
                report = scs_score(G_s, G_t, samples=a.scs_samples, seed=cfg.scs.seed, basis=basis,
                                   schedule=schedule)
                rec["scs"] = report.mean
            rec["wall"] = time.time() - wall0
            metrics.write(json.dumps(rec) + "\n")
            metrics.flush()
            if (i + 1) % a.checkpoint_every == 0 and i + 1 < total:
                save(i + 1)
    save(total)
    if parameter_hash(G_s) != source_hash:
        raise RuntimeError("source generator parameters changed during adaption")
    return AdaptResult(ckpt_path, metrics_path, total, finished=True)
