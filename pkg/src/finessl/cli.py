"""Command-line entry point: dataset generation, training runs, comparisons.

Config files are flat ``key = value`` text with optional ``[section]`` headers
and ``#`` comments; keys are named after TrainConfig fields ("lambda" maps to
the lambda_ field). Every failure exits nonzero with a single machine-parsable
``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .embedstore import gen_blobs, longtail_counts, read_emb1, write_emb1
from .errors import ConfigError, FormatError
from .model import save_heads
from .numkit import RandomStream
from .trainer import RunReport, TrainConfig, TrainingDiverged, run_training

log = logging.getLogger("finessl")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line stderr contract
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_FIELD_TYPES = {f.name: f for f in fields(TrainConfig)}
_KEY_ALIASES = {"lambda": "lambda_"}


def _coerce(key: str, raw: str):
    field = _FIELD_TYPES[key]
    text = raw.strip()
    tname = str(field.type)
    if "bool" in tname:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean for {key}, got {raw!r}")
    if "Optional[int]" in tname:
        return None if text.lower() in ("", "none") else int(text)
    if "int" in tname:
        return int(text)
    if "float" in tname:
        return float(text)
    return text


def parse_config_file(path) -> TrainConfig:
    """Parse a flat key=value config; unknown keys are errors naming the key."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text or (text.startswith("[") and text.endswith("]")):
                continue
            if "=" not in text:
                raise ConfigError(f"line {lineno}: expected key = value, got {line.strip()!r}")
            key, raw = (part.strip() for part in text.split("=", 1))
            key = _KEY_ALIASES.get(key, key)
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                values[key] = _coerce(key, raw)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    config = TrainConfig(**values)
    config.validate()
    return config


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def _add_gen_parser(sub):
    gen = sub.add_parser("gen", help="generate synthetic embedding datasets")
    gsub = gen.add_subparsers(dest="kind", required=True)

    blobs = gsub.add_parser("blobs", help="balanced Gaussian blobs")
    blobs.add_argument("--classes", type=int, required=True)
    blobs.add_argument("--dim", type=int, required=True)
    blobs.add_argument("--labeled", type=int, required=True, help="labeled per class")
    blobs.add_argument("--unlabeled", type=int, required=True, help="unlabeled per class")
    blobs.add_argument("--sep", type=float, default=6.0)
    blobs.add_argument("--noise-sd", type=float, default=1.0)
    blobs.add_argument("--bias", type=str, default="",
                       help="comma-separated per-class noise multipliers")
    blobs.add_argument("--ood", type=int, default=0)
    blobs.add_argument("--seed", type=int, default=1)
    blobs.add_argument("--out", type=str, required=True)
    blobs.add_argument("--test-per-class", type=int, default=0)
    blobs.add_argument("--test-out", type=str, default="")

    lt = gsub.add_parser("longtail", help="long-tailed Gaussian blobs")
    lt.add_argument("--classes", type=int, required=True)
    lt.add_argument("--dim", type=int, required=True)
    lt.add_argument("--n1", type=int, required=True, help="labeled count of the head class")
    lt.add_argument("--m1", type=int, required=True, help="unlabeled count of the head class")
    lt.add_argument("--rho", type=float, required=True, help="imbalance ratio")
    lt.add_argument("--sep", type=float, default=6.0)
    lt.add_argument("--noise-sd", type=float, default=1.0)
    lt.add_argument("--seed", type=int, default=1)
    lt.add_argument("--out", type=str, required=True)
    lt.add_argument("--test-per-class", type=int, default=0)
    lt.add_argument("--test-out", type=str, default="")


def cmd_gen(args) -> int:
    try:
        if args.kind == "blobs":
            if args.labeled < 1:
                return _fail("SSL requires labeled samples (--labeled >= 1)", EXIT_USAGE)
            if args.unlabeled < 1:
                return _fail("SSL requires unlabeled samples (--unlabeled >= 1)", EXIT_USAGE)
            labeled = args.labeled
            unlabeled = args.unlabeled
        else:
            if args.n1 < 1 or args.m1 < 1:
                return _fail("longtail requires --n1 >= 1 and --m1 >= 1", EXIT_USAGE)
            labeled = longtail_counts(args.n1, args.classes, args.rho)
            unlabeled = longtail_counts(args.m1, args.classes, args.rho)
        bias = None
        if args.kind == "blobs" and args.bias:
            bias = [float(v) for v in args.bias.split(",")]
        n_ood = args.ood if args.kind == "blobs" else 0
        dataset = gen_blobs(
            args.classes, args.dim, labeled, unlabeled,
            class_sep=args.sep, noise_sd=args.noise_sd,
            rng=RandomStream(args.seed), bias_profile=bias, n_ood=n_ood,
        )
    except (ConfigError, ValueError) as exc:
        return _fail(str(exc), EXIT_USAGE)
    try:
        write_emb1(dataset, args.out)
        log.info("wrote %s (%d rows)", args.out, dataset.n)
        if args.test_per_class > 0:
            if not args.test_out:
                return _fail("--test-per-class requires --test-out", EXIT_USAGE)
            test = gen_blobs(
                args.classes, args.dim, args.test_per_class, 0,
                class_sep=args.sep, noise_sd=args.noise_sd,
                rng=RandomStream(args.seed), sample_key="test",
            )
            write_emb1(test, args.test_out)
            log.info("wrote %s (%d rows)", args.test_out, test.n)
    except OSError as exc:
        return _fail(f"I/O failure: {exc}", EXIT_IO)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _add_train_parser(sub):
    train = sub.add_parser("train", help="run training per seed and write reports")
    train.add_argument("--config", type=str, required=True)
    train.add_argument("--data", type=str, required=True)
    train.add_argument("--test", type=str, default="")
    train.add_argument("--seeds", type=str, default="", help="comma list; default: config seed")
    train.add_argument("--out", type=str, required=True)
    train.add_argument("--force", action="store_true")
    train.add_argument("--parallel", action="store_true")


def _run_one_seed(base: TrainConfig, seed: int, dataset, test, out_dir: Path):
    cfg = TrainConfig(**{**_config_kwargs(base), "seed": seed})
    report = run_training(dataset, cfg, test_dataset=test)
    seed_dir = out_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    report_path = seed_dir / "report.jsonl"
    ckpt_path = seed_dir / "heads.hds1"
    report.save(report_path)
    save_heads(report.heads, ckpt_path)
    return seed, report, report_path, ckpt_path


def _config_kwargs(cfg: TrainConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}


def cmd_train(args) -> int:
    try:
        config = parse_config_file(args.config)
    except FileNotFoundError:
        return _fail(f"config file not found: {args.config}", EXIT_USAGE)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_USAGE)

    try:
        dataset = read_emb1(args.data)
        test = read_emb1(args.test) if args.test else None
    except FileNotFoundError as exc:
        return _fail(f"dataset not found: {exc.filename}", EXIT_USAGE)
    except FormatError as exc:
        return _fail(f"bad dataset file: {exc}", EXIT_USAGE)

    seeds = [config.seed]
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            return _fail(f"bad --seeds list: {args.seeds!r}", EXIT_USAGE)
        if not seeds:
            return _fail("empty --seeds list", EXIT_USAGE)

    out_dir = Path(args.out)
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not args.force:
        return _fail(f"{manifest_path} exists; pass --force to overwrite", EXIT_USAGE)
    out_dir.mkdir(parents=True, exist_ok=True)

    results = {}
    try:
        if args.parallel and len(seeds) > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=len(seeds)) as pool:
                futures = [
                    pool.submit(_run_one_seed, config, seed, dataset, test, out_dir)
                    for seed in seeds
                ]
                for fut in futures:
                    seed, report, rpath, cpath = fut.result()
                    results[seed] = (report, rpath, cpath)
        else:
            for seed in seeds:
                seed, report, rpath, cpath = _run_one_seed(config, seed, dataset, test, out_dir)
                results[seed] = (report, rpath, cpath)
    except TrainingDiverged as exc:
        return _fail(f"non-finite loss at step {exc.step}", EXIT_DIVERGED)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_USAGE)

    manifest = {
        "engine_version": __version__,
        "config": config.snapshot(),
        "seeds": seeds,
        "data": str(args.data),
        "data_sha256": _sha256(args.data),
        "test": str(args.test) if args.test else None,
        "test_sha256": _sha256(args.test) if args.test else None,
        "reports": {str(s): str(results[s][1].relative_to(out_dir)) for s in seeds},
        "checkpoints": {str(s): str(results[s][2].relative_to(out_dir)) for s in seeds},
    }
    accs = [results[s][0].final_test_acc for s in seeds]
    if all(a is not None for a in accs):
        manifest["test_acc_per_seed"] = {str(s): results[s][0].final_test_acc for s in seeds}
        mean = float(np.mean(accs))
        std = float(np.std(accs))
        manifest["mean_test_acc"] = mean
        manifest["std_test_acc"] = std
        print(f"{config.strategy}: test accuracy {mean * 100:.2f} +- {std * 100:.2f} "
              f"over {len(seeds)} seed(s)")
    else:
        print(f"{config.strategy}: training complete ({len(seeds)} seed(s), no test split)")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def _add_compare_parser(sub):
    cmp_p = sub.add_parser("compare", help="tabulate runs from two or more manifests")
    cmp_p.add_argument("manifests", nargs="+")
    cmp_p.add_argument("--out", type=str, default="", help="CSV path (default stdout)")


def _final_record(report_path: Path) -> dict:
    last = None
    with open(report_path) as fh:
        for line in fh:
            if line.strip():
                last = json.loads(line)
    if last is None:
        raise ConfigError(f"empty report {report_path}")
    return last


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def cmd_compare(args) -> int:
    if len(args.manifests) < 2:
        return _fail("compare needs at least 2 manifests", EXIT_USAGE)
    rows = []
    checksums = set()
    try:
        for mpath in args.manifests:
            with open(mpath) as fh:
                manifest = json.load(fh)
            checksums.add(manifest.get("data_sha256"))
            base = Path(mpath).parent
            finals = [
                _final_record(base / rel) for rel in manifest["reports"].values()
            ]
            acc_m, acc_s = _mean_std([rec["test_acc"] for rec in finals])
            ent_m, ent_s = _mean_std([rec["pl_entropy"] for rec in finals])
            ece_m, ece_s = _mean_std([rec["ece"] for rec in finals])
            rows.append({
                "strategy": manifest["config"]["strategy"],
                "acc_mean": acc_m, "acc_std": acc_s,
                "pl_entropy_mean": ent_m, "pl_entropy_std": ent_s,
                "ece_mean": ece_m, "ece_std": ece_s,
            })
    except FileNotFoundError as exc:
        return _fail(f"missing file: {exc.filename}", EXIT_USAGE)
    except (KeyError, json.JSONDecodeError, ConfigError) as exc:
        return _fail(f"bad manifest: {exc}", EXIT_USAGE)
    if len(checksums) != 1:
        return _fail("manifests reference different datasets", EXIT_USAGE)

    header = ["strategy", "acc_mean", "acc_std", "pl_entropy_mean",
              "pl_entropy_std", "ece_mean", "ece_std"]

    def _fmt(value):
        return "" if value is None else f"{value:.6f}"

    out_fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out_fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row["strategy"]] + [_fmt(row[k]) for k in header[1:]])
    finally:
        if args.out:
            out_fh.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="finessl", description="SSL engine over frozen embeddings")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_parser(sub)
    _add_train_parser(sub)
    _add_compare_parser(sub)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    level = os.environ.get("FINESSL_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "gen":
        return cmd_gen(args)
    if args.command == "train":
        return cmd_train(args)
    return cmd_compare(args)


if __name__ == "__main__":
    sys.exit(main())
