"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Logs go to stderr;
machine-readable output (reports, match lists) goes to files or stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

log = logging.getLogger("posedesc")

THREADS_ENV = "POSEDESC_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    p.add_argument("--threads", type=int, default=None,
                   help=f"cap on BLAS threads (default: ${THREADS_ENV} or library default)")
    p.add_argument("--verbose", "-v", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="posedesc", description="Descriptor learning from relative camera poses.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="render a synthetic two-view dataset")
    _common(p)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--geometry", choices=["plane", "facade", "mixed"], default="mixed")
    p.add_argument("--difficulty", choices=["mixed", "easy", "moderate", "hard"], default="mixed")
    p.add_argument("--config", help="JSON file with SynthConfig fields")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a descriptor network")
    _common(p)
    p.add_argument("--config", help="JSON TrainConfig; flags override its keys")
    p.add_argument("--out", help="run directory")
    p.add_argument("--data", dest="dataset", help="training dataset directory")
    p.add_argument("--val-data", dest="val_dataset", help="held-out dataset directory (with oracle)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--queries", type=int)
    p.add_argument("--mode", choices=["pose_only", "supervised_l2", "triplet"])

    p = sub.add_parser("resume", help="continue training from a checkpoint")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", help="JSON TrainConfig (default: config.json next to the checkpoint)")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, help="total epochs after resuming")
    p.add_argument("--lr", type=float, help="must match the original run")
    p.add_argument("--data", dest="dataset")
    p.add_argument("--val-data", dest="val_dataset")

    p = sub.add_parser("match", help="match two images with a trained network")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--img1", required=True, help="PGM image")
    p.add_argument("--img2", required=True, help="PGM image")
    p.add_argument("--dense", action="store_true", help="dense grid matches instead of mutual-NN keypoints")
    p.add_argument("--grid-step", type=int, default=8)
    p.add_argument("--ratio", type=float, default=None, help="ratio-test threshold for sparse matches")
    p.add_argument("--out", help="match list file (default: stdout)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset with oracle")
    _common(p)
    p.add_argument("--ckpt", help="checkpoint (omit with --oracle or --random)")
    p.add_argument("--oracle", action="store_true", help="evaluate the true correspondences (upper bound)")
    p.add_argument("--random", action="store_true", help="evaluate random descriptors (chance level)")
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", type=int, default=0, help="evaluate only the first N pairs")
    p.add_argument("--grid-step", type=int, default=8)
    p.add_argument("--no-c2f", action="store_true")
    p.add_argument("--report", required=True, help="JSON report path (a CSV is written next to it)")
    p.add_argument("--dump-dir", help="write per-pair match lists here")

    p = sub.add_parser("ablate", help="train and compare the ablation variants")
    _common(p)
    p.add_argument("--config", required=True, help="base TrainConfig JSON")
    p.add_argument("--eval-data", required=True)
    p.add_argument("--pairs", type=int, default=0)
    p.add_argument("--variants", default="", help="comma-separated subset of variants")
    p.add_argument("--out", help="directory for per-variant runs")
    p.add_argument("--report", required=True, help="JSON table path (a CSV is written next to it)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--no-pipeline", action="store_true", help="skip the end-to-end loss checks")
    return parser


# --- commands ----------------------------------------------------------------------
def _cmd_gen_data(args) -> int:
    from . import synth

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = synth.SynthConfig(**base)
    cfg.count, cfg.image_size, cfg.geometry = args.count, args.size, args.geometry
    if args.seed is not None:
        cfg.seed = args.seed
    if args.difficulty != "mixed":
        cfg.difficulty_mix = {args.difficulty: 1.0}
    root = synth.generate_dataset(cfg, args.out)
    log.info("wrote %d pairs to %s", cfg.count, root)
    return 0


def _train_config(args, path=None):
    from . import trainer

    cfg = trainer.TrainConfig.load(path) if path else trainer.TrainConfig()
    for key in ("dataset", "val_dataset", "out", "epochs", "lr", "queries", "mode", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def _cmd_train(args) -> int:
    from . import trainer

    cfg = _train_config(args, args.config)
    if not cfg.dataset:
        raise UsageError("train: a dataset is required (--data or 'dataset' in the config)")
    result = trainer.train(cfg)
    log.info("final checkpoint %s", result.final_checkpoint)
    return 0


def _cmd_resume(args) -> int:
    from . import trainer

    config = args.config or str(Path(args.ckpt).parent / "config.json")
    cfg = _train_config(args, config)
    if args.out is None:
        cfg.out = str(Path(args.ckpt).parent)
    result = trainer.resume(args.ckpt, cfg)
    log.info("final checkpoint %s", result.final_checkpoint)
    return 0


def _cmd_match(args) -> int:
    from . import evaluation, geometry, synth, trainer

    net = trainer.load_network(args.ckpt)
    img1, img2 = synth.read_pgm(args.img1), synth.read_pgm(args.img2)
    m = evaluation.NetMatcher(net)
    if args.dense:
        pts = trainer.grid_points(img1.shape, args.grid_step)
        pair = synth.TrainingPair(img1, img2, None, None, None, "", 0.0, "", None, "cli")
        x1, x2 = pts, m.dense(pair, pts)
    else:
        pair = synth.TrainingPair(img1, img2, None, None, None, "", 0.0, "", None, "cli")
        x1, x2 = evaluation.sparse_matches(m, pair, args.ratio)
    if args.out:
        geometry.write_matches(args.out, x1, x2, header="x1 y1 x2 y2")
    else:
        for a, b in zip(x1, x2):
            sys.stdout.write(f"{a[0]:.6f} {a[1]:.6f} {b[0]:.6f} {b[1]:.6f}\n")
    log.info("%d matches", len(x1))
    return 0


def _load_eval_pairs(path, limit: int):
    from . import synth

    ds = synth.PairDataset(path)
    if not ds.has_oracle:
        raise RuntimeError(f"{path} has no oracle directory; evaluation needs it")
    n = len(ds) if not limit else min(limit, len(ds))
    return [ds.load(i, with_oracle=True) for i in range(n)]


def _cmd_eval(args) -> int:
    from . import evaluation, trainer

    chosen = sum([bool(args.ckpt), args.oracle, args.random])
    if chosen != 1:
        raise UsageError("eval: give exactly one of --ckpt, --oracle, --random")
    pairs = _load_eval_pairs(args.data, args.pairs)
    seed = args.seed or 0
    if args.oracle:
        m = evaluation.OracleMatcher()
    elif args.random:
        m = evaluation.RandomMatcher(seed)
    else:
        m = evaluation.NetMatcher(trainer.load_network(args.ckpt), c2f=not args.no_c2f)
    report = evaluation.evaluate(pairs, m, args.grid_step, seed, args.dump_dir)
    report.write_json(args.report)
    report.write_csv(Path(args.report).with_suffix(".csv"))
    log.info("PCK@5 %.3f  MMA@3 %.3f  (chance %.4f)", report.pck[report.pck_thresholds.index(5.0)],
             report.mma[2], report.chance["pck"][report.pck_thresholds.index(5.0)])
    return 0


def _cmd_ablate(args) -> int:
    from . import evaluation, trainer

    cfg = _train_config(args, args.config)
    if args.out:
        cfg.out = args.out
    pairs = _load_eval_pairs(args.eval_data, args.pairs)
    variants = [v for v in args.variants.split(",") if v] or None
    unknown = set(variants or []) - set(evaluation.ABLATION_VARIANTS)
    if unknown:
        raise UsageError(f"ablate: unknown variants {sorted(unknown)}")
    table = evaluation.run_ablation(cfg, pairs, variants)
    Path(args.report).write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    evaluation.write_ablation_table(table, Path(args.report).with_suffix(".csv"))
    return 0


def _cmd_gradcheck(args) -> int:
    from . import gradcheck

    results = gradcheck.run_all(args.instances, args.seed or 0, not args.no_pipeline, log=log.info)
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("gradient check failed for: %s", ", ".join(failed))
        return 2
    log.info("all %d gradient checks passed", len(results))
    return 0


COMMANDS = {"gen-data": _cmd_gen_data, "train": _cmd_train, "resume": _cmd_resume, "match": _cmd_match,
            "eval": _cmd_eval, "ablate": _cmd_ablate, "gradcheck": _cmd_gradcheck}


def _thread_count(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = _thread_count(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            log.exception("traceback")
        return 2


if __name__ == "__main__":
    sys.exit(main())
