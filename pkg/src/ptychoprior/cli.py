"""Command-line entry point: ``ptychoprior <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .core import Rng, read_field, write_field


def _simulate(args) -> int:
    from .sim import NoiseModel, make_phantom_dataset, make_probe, make_raster, save_stack, simulate

    M = args.probe_size or args.probe_diam
    phantom = make_phantom_dataset(1, args.n, Rng(args.seed))[0]
    probe = make_probe(M, args.probe_diam, args.defocus)
    stack = simulate(phantom, probe, make_raster(args.n, M, args.step), NoiseModel(args.sigma),
                     Rng(args.seed))
    save_stack(stack, probe, phantom, args.out)
    print(f"wrote {len(stack.frames)} frames (overlap {stack.pattern.overlap:.2f}) to {args.out}")
    return 0


def _epie(args) -> int:
    from .epie import EpieConfig, epie_reconstruct
    from .sim import load_stack

    stack, probe, _ = load_stack(args.data)
    cfg = EpieConfig(alpha=args.alpha, iterations=args.iters, seed=args.seed, init=args.init)
    write_field(args.out, epie_reconstruct(stack, probe, cfg))
    print(f"wrote {args.out}")
    return 0


def _train_gan(args) -> int:
    from .gan import GanTrainConfig, save_checkpoint, train_gan, training_set

    cfg = GanTrainConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                         dataset_size=args.dataset_size, image_size=args.n,
                         lr_g=args.lr, lr_d=args.lr)
    result = train_gan(training_set(cfg), cfg)
    save_checkpoint(args.out, result.G, result.D)
    print(f"wrote {args.out} after {len(result.log)} updates")
    return 0


_LOSS_NAMES = {"poisson": "poisson_nll", "l1": "l1_intensity"}
_DIRECTIONS = {"shallow": "shallow_first", "deep": "deep_first"}


def _reconstruct(args) -> int:
    from .recon import ReconConfig, reconstruct, save_result
    from .sim import load_stack

    stack, probe, _ = load_stack(args.data)
    rates = {k: v for k, v in (("latent_lr", args.latent_lr), ("weight_lr", args.weight_lr))
             if v is not None}
    cfg = ReconConfig(
        loss_kind=_LOSS_NAMES[args.loss], lambda1=args.lambda1, lambda2=args.lambda2,
        latent_steps=args.latent_steps, total_steps=args.total_steps,
        steps_per_stage=args.stage_len, direction=_DIRECTIONS[args.direction],
        seed=args.seed, workers=args.workers, **rates,
    )
    result = reconstruct(stack, probe, args.gan, cfg)
    save_result(result, args.out, cfg)
    print(f"best total loss {result.best_loss:.6g} at step {result.best_step}; wrote {args.out}")
    return 0


def _evaluate(args) -> int:
    from .epie import object_phase
    from .evaluate import SsimConfig, align_phase, ssim

    recon = read_field(args.recon)
    if np.iscomplexobj(recon):
        recon = object_phase(recon)
    truth = read_field(args.truth)
    score = ssim(align_phase(recon, truth), truth)
    text = f"# {SsimConfig().describe()}\nssim={score!r}\n"
    if args.out:
        Path(args.out).write_text(text)
    print(f"ssim={score:.6f}")
    return 0


def _sweep(args) -> int:
    from .evaluate import parse_sweep_spec, run_sweep

    spec = parse_sweep_spec(Path(args.spec).read_text())
    if args.workers is not None:
        spec.workers = args.workers
    needs_gan = any(m != "epie" for m in spec.methods)
    if needs_gan and not args.gan:
        print("error: --gan is required for the proposed methods", file=sys.stderr)
        return 2
    rows = run_sweep(spec, args.gan, args.out, timing=not args.no_timing)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} cells, {failed} failed; wrote {Path(args.out) / 'results.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptychoprior", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a diffraction stack from a random phantom")
    p.add_argument("--n", type=int, default=128, help="object size in pixels")
    p.add_argument("--probe-diam", type=int, default=32)
    p.add_argument("--probe-size", type=int, default=None, help="probe array size (default: diameter)")
    p.add_argument("--defocus", type=float, default=3.0, help="quadratic probe phase at the rim (rad)")
    p.add_argument("--step", type=int, default=16)
    p.add_argument("--sigma", type=float, default=0.0, help="relative noise at the peak pixel; 0 = none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_simulate)

    p = sub.add_parser("epie", help="ePIE baseline reconstruction")
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--init", choices=("flat", "random"), default="flat")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_epie)

    p = sub.add_parser("train-gan", help="train the generator/discriminator pair on phantoms")
    p.add_argument("--dataset-size", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_train_gan)

    p = sub.add_parser("reconstruct", help="generator-prior reconstruction")
    p.add_argument("--data", required=True)
    p.add_argument("--gan", required=True)
    p.add_argument("--loss", choices=sorted(_LOSS_NAMES), default="poisson")
    p.add_argument("--lambda1", type=float, default=0.0, help="TV weight")
    p.add_argument("--lambda2", type=float, default=0.0, help="discriminator weight")
    p.add_argument("--latent-lr", type=float, default=None)
    p.add_argument("--latent-steps", type=int, default=1000)
    p.add_argument("--weight-lr", type=float, default=None)
    p.add_argument("--total-steps", type=int, default=5600)
    p.add_argument("--stage-len", type=int, default=800)
    p.add_argument("--direction", choices=sorted(_DIRECTIONS), default="shallow")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_reconstruct)

    p = sub.add_parser("evaluate", help="SSIM of a phase (or complex object) against the truth")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_evaluate)

    p = sub.add_parser("sweep", help="run an overlap/noise/method sweep")
    p.add_argument("--spec", required=True)
    p.add_argument("--gan", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--no-timing", action="store_true", help="write wall_seconds=0 for bitwise reruns")
    p.set_defaults(func=_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
