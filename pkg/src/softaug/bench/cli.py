"""Command-line entry point: ``softaug {train,eval,compare,dump-aug,replay-spec}``.

Exit codes: 0 success, 2 configuration error, 3 runtime or numerical error.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps runs reproducible; must precede the numpy import
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import hashlib  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402

import numpy as np  # noqa: E402

from softaug.augment import KINDS, build_image_pool  # noqa: E402
from softaug.bench.compare import collect_reports, compare_methods, dump_augmentation_samples, replay_specs  # noqa: E402
from softaug.bench.config import config_keys, load_config  # noqa: E402
from softaug.bench.run import evaluate_generalization, run_training  # noqa: E402
from softaug.envsim import DISTRIBUTIONS, ConfigurationError, UsageError  # noqa: E402
from softaug.nets.autodiff import NumericalError  # noqa: E402
from softaug.sac import ContractViolation  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("softaug")

# keys with dedicated flags
_SPECIAL = {"seed", "out_dir"}


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_config_flags(p: argparse.ArgumentParser, keys=None) -> None:
    g = p.add_argument_group("config overrides (same keys as the config file)")
    for key in keys or config_keys():
        if key not in _SPECIAL:
            g.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", default=None)


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softaug", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one method/seed")
    p.add_argument("--config", required=True, help="key = value config file (may be empty)")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True, help="run directory")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a saved run on test variants")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--variants", type=_csv, default=list(DISTRIBUTIONS))
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seeds", type=_csv, default=["0"])
    p.add_argument("--csv", help="write per-seed cells to this CSV")

    p = sub.add_parser("compare", help="methods x variants table from run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--variants", type=_csv, default=None)
    p.add_argument("--csv", help="also write the table as CSV")

    env_keys = [k for k in config_keys() if k.startswith("env.")] + ["pool_size", "pool_dir", "overlay_alpha"]
    p = sub.add_parser("dump-aug", help="write PPM grids of augmented samples")
    p.add_argument("--out", required=True)
    p.add_argument("--kinds", type=_csv, default=["crop", "conv", "overlay"])
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    _add_config_flags(p, env_keys)

    p = sub.add_parser("replay-spec", help="re-apply recorded augmentation specs")
    p.add_argument("specs", help="specs.tsv written by dump-aug")
    p.add_argument("--check", default=None, help="directory with grids to verify against")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    _add_config_flags(p, env_keys)
    return parser


def _pool(cfg):
    source = "directory" if cfg.pool_dir else "procedural"
    return build_image_pool(source, cfg.pool_size, cfg.seed, image_size=cfg.env.render_size, directory=cfg.pool_dir)


def cmd_train(args) -> None:
    ov = _overrides(args)
    ov["seed"], ov["out_dir"] = str(args.seed), args.out
    cfg = load_config(args.config, ov).validate()
    report = run_training(cfg)
    for (variant, seed), mean in report.cells.items():
        print(f"{cfg.method}\t{variant}\tseed={seed}\t{mean:.3f}")


def cmd_eval(args) -> None:
    seeds = [int(s) for s in args.seeds]
    if args.episodes < 1:
        raise ConfigurationError("--episodes must be at least 1")
    report = evaluate_generalization(args.run, args.variants, args.episodes, seeds)
    for v in args.variants:
        mean, std = report.aggregate(v)
        print(f"{v}\t{mean:.3f}\t{std:.3f}")
    if args.csv:
        report.write_csv(args.csv)


def cmd_compare(args) -> None:
    print(compare_methods(collect_reports(args.runs), args.variants, args.csv), end="")


def _aug_setup(args):
    ov = _overrides(args)
    ov["seed"] = str(args.seed)
    cfg = load_config(args.config, ov)
    cfg = cfg.__class__(**{**cfg.__dict__, "env": cfg.env.resolved()})
    return cfg, _pool(cfg)


def cmd_dump_aug(args) -> None:
    bad = [k for k in args.kinds if k not in KINDS]
    if bad:
        raise ConfigurationError(f"unknown augmentation kind(s) {bad}; expected {list(KINDS)}")
    cfg, pool = _aug_setup(args)
    for path in dump_augmentation_samples(pool, args.kinds, args.n, args.out, cfg.env, args.seed, cfg.overlay_alpha):
        print(path)


def cmd_replay_spec(args) -> None:
    cfg, pool = _aug_setup(args)
    views = replay_specs(args.specs, pool, cfg.env, args.seed, args.check)
    for i, v in enumerate(views):
        digest = hashlib.sha256(np.ascontiguousarray(v, dtype="<f4").tobytes()).hexdigest()[:16]
        print(f"{i}\t{v.shape}\t{digest}")
    if args.check:
        print(f"verified {len(views)} views against {args.check}")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "dump-aug": cmd_dump_aug,
    "replay-spec": cmd_replay_spec,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, UsageError, ContractViolation, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
