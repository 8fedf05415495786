"""Command-line entry points: ``render``, ``fit`` and ``metrics``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, thread_count

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("nasg_guiding")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    d = RunConfig()
    p.add_argument("scene", help="scene YAML file (or a shipped scene name: box, furnace)")
    p.add_argument("-o", "--output", default="render", help="output prefix (writes .pfm/.png/.csv)")
    p.add_argument("--spp", type=int, default=d.spp)
    p.add_argument("--components", type=int, default=d.components, help="mixture components N")
    p.add_argument("--capacity", type=int, default=d.capacity, help="sample buffer size S")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="training batch size t")
    p.add_argument("--step-factor", type=int, default=d.step_factor, help="step factor nu")
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--kl-blend", type=float, default=d.kl_blend, help="loss blend e")
    p.add_argument("--blend-interval", type=int, default=d.blend_interval, help="M")
    p.add_argument("--blend-steps", type=int, default=d.blend_steps, help="B")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--threads", type=int, default=d.threads)
    p.add_argument("--no-guiding", dest="guiding", action="store_false")
    p.add_argument("--model", choices=("nasg", "vmf", "none"), default=d.model)
    p.add_argument("--reference", default=None, help="reference PFM for the MAPE column")
    p.add_argument("--checkpoints", default="", help="comma-separated spp counts to write images at")
    p.add_argument("--no-ramp", dest="ramp", action="store_false", help="equal frame weights")
    p.add_argument("--max-depth", type=int, default=d.max_depth)
    p.add_argument("--rr-depth", type=int, default=d.rr_depth)
    p.add_argument("--exposure", type=float, default=d.exposure)


def config_from_args(args) -> RunConfig:
    cps = tuple(int(x) for x in args.checkpoints.split(",") if x.strip()) if args.checkpoints else ()
    return RunConfig(
        scene=args.scene, output=args.output, spp=args.spp, components=args.components,
        capacity=args.capacity, batch_size=args.batch_size, step_factor=args.step_factor, lr=args.lr,
        kl_blend=args.kl_blend, blend_interval=args.blend_interval, blend_steps=args.blend_steps,
        seed=args.seed, threads=thread_count(args.threads), guiding=args.guiding, model=args.model,
        reference=args.reference, checkpoints=cps, ramp=args.ramp, max_depth=args.max_depth,
        rr_depth=args.rr_depth, exposure=args.exposure,
    )


def _resolve_scene(name: str) -> Path:
    from .tracer.scene import scene_dir

    p = Path(name)
    if p.exists():
        return p
    shipped = scene_dir() / f"{name}.yaml"
    if shipped.exists():
        return shipped
    raise FileNotFoundError(f"scene not found: {name}")


def write_image(prefix: str, image, exposure: float = 0.0) -> None:
    from .tracer.film import write_pfm, write_png

    write_pfm(f"{prefix}.pfm", image)
    write_png(f"{prefix}.png", image, exposure)


def run_render(config: RunConfig):
    from .tracer.film import read_pfm
    from .tracer.render import run_progressive
    from .tracer.scene import load_scene

    scene = load_scene(_resolve_scene(config.scene))
    reference = None
    if config.reference:
        if not Path(config.reference).exists():
            raise FileNotFoundError(f"reference not found: {config.reference}")
        reference = read_pfm(config.reference)
    out = config.output or "render"
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    result = run_progressive(
        scene, config, reference, train_log_path=f"{out}_train.csv" if config.guided else None,
        on_checkpoint=lambda n, img: write_image(f"{out}_{n:05d}spp", img, config.exposure),
    )
    if result.stats.nonfinite:
        log.warning("non-finite paths discarded: %d", result.stats.nonfinite)
    if not np.all(np.isfinite(result.image)):
        raise RuntimeError(f"non-finite film (discarded paths: {result.stats.nonfinite})")
    write_image(out, result.image, config.exposure)
    with open(f"{out}_convergence.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "mape", "b", "buffer_size", "seconds"])
        w.writerows(result.rows)
    if result.guider is not None:
        result.guider.params.save(f"{out}_net.bin", result.guider.model.n)
    Path(f"{out}_config.json").write_text(config.to_json())
    return result


def run_metrics(image_path: str, reference_path: str) -> float:
    from .tracer.film import mape, read_pfm

    return mape(read_pfm(image_path), read_pfm(reference_path))


def _cmd_render(args) -> int:
    config = config_from_args(args)
    result = run_render(config)
    last = result.rows[-1]
    print(f"rendered {config.spp} spp -> {config.output}.pfm  (mape={last[1]:.6g}, {last[4]:.1f}s)")
    return EXIT_OK


def _cmd_fit(args) -> int:
    from .fit import make_target, run_fit

    target = make_target(args.target)
    cps = tuple(int(x) for x in args.checkpoints.split(",") if x.strip())
    res = run_fit(target, nasg_components=args.nasg_components, vmf_components=args.vmf_components,
                  steps=args.steps, batch=args.batch, lr=args.lr, seed=args.seed, checkpoints=cps)
    report = {k: {"components": r.n_components, "params": r.n_params,
                  "kl": [[s, kl] for s, kl in r.history]} for k, r in res.items()}
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2))
    for k, r in res.items():
        for s, kl in r.history:
            print(f"{k:5s} N={r.n_components:2d} params={r.n_params:3d} step={s:6d} kl={kl:.6g}")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    print(f"{run_metrics(args.image, args.reference):.10g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="nasg-guide", description="Neural path guiding with anisotropic spherical Gaussians")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("render", help="progressive guided render")
    _add_config_flags(r)
    r.set_defaults(func=_cmd_render)

    f = sub.add_parser("fit", help="fit NASG and vMF mixtures to a target density, report KL")
    f.add_argument("target", help="band | vmf | nasg | path to a lat-long PFM")
    f.add_argument("--steps", type=int, default=2000)
    f.add_argument("--batch", type=int, default=256)
    f.add_argument("--lr", type=float, default=0.01)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--nasg-components", type=int, default=8)
    f.add_argument("--vmf-components", type=int, default=14)
    f.add_argument("--checkpoints", default="250,500,1000")
    f.add_argument("--json", default=None, help="also write the report as JSON")
    f.set_defaults(func=_cmd_fit)

    m = sub.add_parser("metrics", help="MAPE of an image against a reference")
    m.add_argument("image")
    m.add_argument("reference")
    m.set_defaults(func=_cmd_metrics)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
