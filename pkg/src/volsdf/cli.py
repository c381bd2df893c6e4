"""Command-line entry point: ``volsdf render|certify|ablate <scene>``."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .harness import ABLATION_COLUMNS, CERTIFY_COLUMNS, STRATEGIES, ablate, certify, write_rows
from .oracle import DEFAULT_RESOLUTION, MIN_RESOLUTION
from .render import render_image, write_diagnostics_csv, write_ppm
from .scenefile import SceneFile, SceneFileError, load_scene


def _u64(s):
    v = int(s)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _resolution(s):
    v = int(s)
    if v < MIN_RESOLUTION:
        raise argparse.ArgumentTypeError(f"must be >= {MIN_RESOLUTION}, got {v}")
    return v


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # shared by the top-level parser and every verb so flags work on either side
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=_u64, default=d(None), help="overrides the [sampler] seed")
    p.add_argument("--threads", type=_positive, default=d(1), help="worker processes")
    p.add_argument("--out-dir", type=Path, default=d(Path(".")), help="directory for all outputs")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volsdf", parents=[_global_flags(False)],
                                     description="Certified volume rendering of analytic SDF scenes.")
    sub = parser.add_subparsers(dest="command", required=True)
    flags = _global_flags(True)

    p = sub.add_parser("render", parents=[flags], help="render the scene's camera view to a PPM")
    p.add_argument("scene")

    p = sub.add_parser("certify", parents=[flags], help="check opacity bounds against the oracle on random rays")
    p.add_argument("scene")
    p.add_argument("--trials", type=_positive, required=True)
    p.add_argument("--oracle-res", type=_resolution, default=DEFAULT_RESOLUTION)

    p = sub.add_parser("ablate", parents=[flags], help="compare sampling strategies on random rays")
    p.add_argument("scene")
    p.add_argument("--rays", type=_positive, required=True)
    p.add_argument("--oracle-res", type=_resolution, default=DEFAULT_RESOLUTION)
    return parser


def _seed(args, cfg: SceneFile) -> int:
    return cfg.sampler.rng_seed if args.seed is None else args.seed


def cmd_render(args, cfg: SceneFile) -> int:
    if cfg.camera is None:
        print(f"{cfg.path}: missing section [camera] needed to render", file=sys.stderr)
        return 2
    cfg = cfg.with_seed(_seed(args, cfg))
    res = render_image(cfg.build_scene(), cfg.camera.build(), cfg.density, cfg.radiance.build(), cfg.sampler,
                       workers=args.threads, background=cfg.output.background, far=cfg.ray_far)
    stem = Path(cfg.path).stem
    image = args.out_dir / (cfg.output.image or f"{stem}.ppm")
    write_ppm(image, res.image)
    print(f"wrote {image}")
    if cfg.output.csv:
        path = args.out_dir / cfg.output.csv
        with open(path, "w", newline="") as fh:
            write_diagnostics_csv(fh, res)
        print(f"wrote {path}")
    return 0


def cmd_certify(args, cfg: SceneFile) -> int:
    rep = certify(cfg, args.trials, args.oracle_res, seed=_seed(args, cfg), threads=args.threads)
    path = args.out_dir / f"{Path(cfg.path).stem}_certify.csv"
    with open(path, "w", newline="") as fh:
        write_rows(fh, CERTIFY_COLUMNS, rep.rows)
    conv = sum(r["converged"] for r in rep.rows)
    print(f"rays: {len(rep.rows)}  checked: {rep.checked}  oracle failures: {rep.oracle_failures}"
          f"  converged to beta: {conv}  violations: {rep.violations}")
    print(f"wrote {path}")
    print("PASS" if rep.passed else "FAIL")
    return 0 if rep.passed else 1


def cmd_ablate(args, cfg: SceneFile) -> int:
    rep = ablate(cfg, args.rays, seed=_seed(args, cfg), threads=args.threads, oracle_resolution=args.oracle_res)
    path = args.out_dir / f"{Path(cfg.path).stem}_ablation.csv"
    with open(path, "w", newline="") as fh:
        write_rows(fh, ABLATION_COLUMNS, rep.rows)
    print(f"{'strategy':<22}{'median err':>12}{'median err (hits)':>19}{'wall s':>9}")
    for s in STRATEGIES:
        print(f"{s:<22}{rep.median_error(s):>12.3e}{rep.median_error(s, True):>19.3e}{rep.wall_time[s]:>9.2f}")
    print(f"wrote {path}")
    return 0


COMMANDS = {"render": cmd_render, "certify": cmd_certify, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_scene(args.scene)
    except (SceneFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out_dir, exist_ok=True)
    return COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
