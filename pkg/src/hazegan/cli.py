"""Command-line entry point: ``hazegan <subcommand> ...``.

Exit status: 0 on success, 1 on a runtime failure, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("hazegan")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- subcommands


def cmd_scenes(args) -> int:
    from .scenes import write_scene_corpus

    path = write_scene_corpus(args.out, args.count, (args.height, args.width), args.seed)
    print(f"wrote {args.count} scenes, corpus manifest {path}")
    return 0


def cmd_synth(args) -> int:
    from .dataset import synthesize_dataset

    if args.variants < 1:
        raise UsageError("--variants must be >= 1")
    res = synthesize_dataset(args.corpus, args.out, args.variants, args.seed, workers=args.workers)
    print(f"wrote {len(res.manifest)} pairs to {res.path} (skipped {len(res.skipped)} corpus items)")
    return 0


def cmd_train(args) -> int:
    from .config import RunConfig, resolve
    from .io import Manifest
    from .train import train_loop

    cfg, base = RunConfig.read(args.config)
    if args.out is not None:
        cfg.out_dir = args.out
    for key in ("warm_start", "feature_checkpoint"):
        if getattr(cfg, key):
            setattr(cfg, key, str(resolve(base, getattr(cfg, key))))
    train_m = Manifest.read(resolve(base, cfg.train_manifest))
    val_m = Manifest.read(resolve(base, cfg.val_manifest)) if cfg.val_manifest else None
    out_dir = resolve(base, cfg.out_dir)
    res = train_loop(cfg.train_config(), train_m, val_m, out_dir)
    print(f"{len(res.records)} log records in {res.log_path}")
    for p in res.checkpoints:
        print(f"checkpoint {p}")
    return 0


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise FileNotFoundError(f"no PNG files in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(f"input {path} does not exist")
    return [path]


def cmd_dehaze(args) -> int:
    from .io import ImageFormatError, load_image, save_image
    from .train import dehaze_array, load_generator

    G, _ = load_generator(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for src in _inputs(Path(args.input)):
        try:
            result = dehaze_array(G, load_image(src))
        except (ImageFormatError, OSError, ValueError) as exc:
            log.error("%s: %s", src, exc)
            failed += 1
            continue
        save_image(result, out / src.name)
        print(f"{src} -> {out / src.name}")
    return 1 if failed else 0


def analytic_dehazer(manifest):
    """Invert the haze model with each record's stored depth, k and beta."""
    from .io import load_depth
    from .physics import HazeParams, invert_haze, transmission_from_depth

    def dehaze(hazy: np.ndarray, rec) -> np.ndarray:
        if rec.depth_path is None or rec.k is None or rec.beta is None:
            raise ValueError("record lacks depth_path/k/beta needed for analytic inversion")
        params = HazeParams(rec.k, rec.beta)
        t = transmission_from_depth(load_depth(manifest.resolve(rec.depth_path)), params.beta)
        return np.clip(invert_haze(hazy, t, params.alpha), 0.0, 1.0)

    return dehaze


def cmd_eval(args) -> int:
    from .io import Manifest
    from .metrics import evaluate_dataset
    from .train import dehaze_array, load_generator

    manifest = Manifest.read(args.manifest)
    if args.analytic:
        dehazer = analytic_dehazer(manifest)
    else:
        G, _ = load_generator(args.checkpoint)
        dehazer = lambda hazy, rec: dehaze_array(G, hazy)  # noqa: E731
    report = evaluate_dataset(manifest, dehazer)
    print("\n".join(report.lines()))
    if args.json:
        Path(args.json).write_text(json.dumps({
            "count": report.count, "skipped": len(report.skipped),
            "mean_psnr": report.mean_psnr, "mean_ssim": report.mean_ssim,
            "identity_psnr": report.baseline_psnr, "identity_ssim": report.baseline_ssim,
        }, indent=2) + "\n")
    # exit status tracks I/O health only
    return 1 if report.skipped else 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS, run_suite

    ops = None
    if args.op:
        ops = []
        for name in args.op:
            family = [k for k in CHECKS if k == name or k.startswith(name + "_")]
            if not family:
                raise UsageError(f"unknown op {name!r}; choose from: {', '.join(CHECKS)}")
            ops += [k for k in family if k not in ops]
    results = run_suite(ops, seed=args.seed)
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.op:<26} max_rel_err={r.error:.3e} tol={r.tolerance:.0e} "
              f"({r.seconds:.2f}s)")
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hazegan", description="Single-image dehazing with a conditional GAN.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scenes", help="write a procedural clean+depth corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_scenes)

    s = sub.add_parser("synth", help="render hazy pairs from a clean+depth corpus")
    s.add_argument("--corpus", required=True, help="corpus manifest (clean_path + depth_path)")
    s.add_argument("--variants", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="run pretraining and adversarial training from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="override out_dir from the config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("dehaze", help="dehaze a PNG or a directory of PNGs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dehaze)

    s = sub.add_parser("eval", help="score a dehazer on a manifest (PSNR/SSIM)")
    s.add_argument("--manifest", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--analytic", action="store_true", help="invert the haze model with the true parameters")
    s.add_argument("--json", help="also write the summary as JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--op", action="append", help="op name or family (repeatable); default all")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    from .runtime import env_thread_count, thread_limit

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit(env_thread_count()):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hazegan: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"hazegan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
