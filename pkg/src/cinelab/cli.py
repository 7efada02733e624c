"""Command-line entry point: gen, train, eval and heatmap.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Set CINELAB_THREADS to cap the BLAS / OpenMP worker threads.
"""
from __future__ import annotations

import argparse
import gzip
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from cinelab import __version__

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
ENV_THREADS = "CINELAB_THREADS"
LOCK_NAME = ".lock"
MANIFEST_NAME = "manifest.json"

log = logging.getLogger("cinelab")


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 1."""


class RunFailure(Exception):
    """Missing inputs, corrupt files, or a failed computation; maps to exit code 2."""


# -- plumbing ------------------------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def load_json_config(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return obj


def _utc() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


@contextmanager
def run_lock(directory):
    """Exclusive lock file in ``directory``; a second writer fails instead of interleaving."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunFailure(f"{directory} is locked by another process (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(path, argv, config: dict, seeds: dict, started: str, artifacts) -> Path:
    manifest = {
        "command": list(argv),
        "config_hash": config_hash(config),
        "seeds": seeds,
        "started": started,
        "finished": _utc(),
        "artifacts": sorted(str(a) for a in artifacts),
        "version": __version__,
    }
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _apply_thread_cap() -> None:
    raw = os.environ.get(ENV_THREADS)
    if not raw:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{ENV_THREADS}={raw!r}: must be a positive integer") from None
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)


def _read_dataset(path):
    from cinelab.dataset import DatasetError, read_dataset

    try:
        return read_dataset(path)
    except DatasetError as exc:
        raise RunFailure(str(exc)) from None


def _load_run(run_dir):
    from cinelab.metrics import FoldAssignment
    from cinelab.supervision import TrainConfig

    run = Path(run_dir)
    for name in ("config.json", "folds.json"):
        if not (run / name).is_file():
            raise RunFailure(f"{run}: missing {name}; not a train run directory")
    try:
        config = TrainConfig.from_dict(json.loads((run / "config.json").read_text()))
    except (ValueError, TypeError) as exc:
        raise UsageError(f"{run / 'config.json'}: {exc}") from None
    folds = FoldAssignment.from_dict(json.loads((run / "folds.json").read_text()))
    return config, folds


def _load_fold_model(run_dir, fold: int):
    from cinelab.model import CheckpointError, load_checkpoint

    path = Path(run_dir) / f"fold_{fold}" / "checkpoint.segn"
    if not path.is_file():
        raise RunFailure(f"missing checkpoint for fold {fold}: {path}")
    try:
        return load_checkpoint(path)[0]
    except CheckpointError as exc:
        raise RunFailure(f"fold {fold}: {exc}") from None


# -- commands ------------------------------------------------------------------


def cmd_gen(args) -> int:
    from cinelab.dataset import write_dataset
    from cinelab.phantom import PhantomConfig, generate_dataset

    started = _utc()
    raw = load_json_config(args.config)
    try:
        cfg = PhantomConfig.from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    with run_lock(args.out) as out:
        records = []

        def tee():
            for loop, rec in generate_dataset(cfg):
                records.append(rec)
                yield loop, rec

        write_dataset(tee(), out)
        (out / "phantom.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        artifacts = ["cores.jsonl", "phantom.json"] + [r.path for r in records]
        write_manifest(out / MANIFEST_NAME, args.argv, cfg.to_dict(), {"phantom": cfg.seed}, started, artifacts)
    n_benign = sum(1 for r in records if not r.positive)
    n = len(records)
    print(f"wrote {n} cores from {cfg.n_patients} patients to {out}")
    print(f"benign {n_benign} ({100.0 * n_benign / n:.1f}%), cancer {n - n_benign} ({100.0 * (n - n_benign) / n:.1f}%)")
    return EXIT_OK


def cmd_train(args) -> int:
    from cinelab.metrics import MetricError, kfold_split
    from cinelab.model import save_checkpoint
    from cinelab.supervision import TrainConfig, TrainingError, train

    started = _utc()
    raw = load_json_config(args.config)
    try:
        cfg = TrainConfig.from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    dataset = _read_dataset(args.data)
    try:
        folds = kfold_split(dataset.patients, cfg.folds, cfg.seed)
    except MetricError as exc:
        raise UsageError(str(exc)) from None

    with run_lock(args.out) as out:
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "folds.json").write_text(json.dumps(folds.to_dict(), indent=2, sort_keys=True) + "\n")
        artifacts = ["config.json", "folds.json"]
        aug_log = None if args.no_augment_log else []
        for f in range(folds.k):
            fold_dir = out / f"fold_{f}"
            fold_dir.mkdir(exist_ok=True)
            try:
                net, history = train(dataset, folds, cfg, test_fold=f, aug_log=aug_log)
            except TrainingError as exc:
                raise RunFailure(str(exc)) from None
            ckpt = save_checkpoint(net, fold_dir / "checkpoint.segn",
                                   extra={"fold": f, "best_epoch": history.best_epoch})
            history.checkpoint = str(ckpt.relative_to(out))
            (fold_dir / "history.json").write_text(json.dumps(history.to_dict(), indent=2) + "\n")
            artifacts += [f"fold_{f}/checkpoint.segn", f"fold_{f}/history.json"]
            last = history.epochs[-1]
            print(f"fold {f}: {len(history.epochs)} epochs, final loss {last.train_loss:.5f}, "
                  f"best epoch {history.best_epoch}")
        if aug_log is not None:
            # mtime pinned so the archive bytes depend only on content
            with open(out / "augment_log.jsonl.gz", "wb") as raw, \
                    gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as fh:
                for entry in aug_log:
                    fh.write((canonical_json(entry) + "\n").encode())
            artifacts.append("augment_log.jsonl.gz")
        seeds = {"train": cfg.seed, "folds": cfg.seed, "augment": cfg.augment.seed}
        write_manifest(out / MANIFEST_NAME, args.argv, cfg.to_dict(), seeds, started, artifacts)
    return EXIT_OK


def cmd_eval(args) -> int:
    from cinelab.evaluation import evaluate_run, write_report

    started = _utc()
    config, folds = _load_run(args.run)
    models = [_load_fold_model(args.run, f) for f in range(folds.k)]
    dataset = _read_dataset(args.data)
    missing = set(folds.patient_fold) ^ set(dataset.patients)
    if missing:
        raise RunFailure(f"dataset patients do not match the run's fold assignment (differ: {sorted(missing)[:5]})")
    report = evaluate_run(models, dataset, folds, config.mode, config.fusion)
    out = Path(args.out) if args.out else Path(args.run) / "eval"
    with run_lock(out):
        paths = write_report(report, out)
        artifacts = [p.name for p in paths.values()]
        write_manifest(out / MANIFEST_NAME, args.argv, config.to_dict(), {"train": config.seed}, started, artifacts)
    sys.stdout.write(paths["table"].read_text())
    print(f"report written to {out}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    import numpy as np

    from cinelab.heatmap import write_heatmap
    from cinelab.model import core_score
    from cinelab.supervision import predict

    started = _utc()
    config, folds = _load_run(args.run)
    dataset = _read_dataset(args.data)
    try:
        rec = dataset.record(args.core)
    except KeyError:
        raise UsageError(f"unknown core id {args.core}") from None
    fold = folds.fold_of(rec.patient_id)
    net = _load_fold_model(args.run, fold)
    loop = dataset.load(rec.core_id)
    y_hat = predict(net, [loop], config.mode, config.fusion)[0]
    score = core_score(y_hat, loop.region)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    heat, ring = write_heatmap(out, y_hat, loop.region)
    write_manifest(out.with_name(out.stem + ".manifest.json"), args.argv,
                   {"run_config": config.to_dict(), "core_id": rec.core_id, "fold": fold},
                   {"train": config.seed}, started, [heat.name, ring.name])
    print(f"core {rec.core_id} fold {fold} core_score {score:.6f} involvement {rec.involvement:.6f} "
          f"max {float(np.max(y_hat)):.6f}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cinelab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"cinelab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic cineloop dataset")
    g.add_argument("--config", help="phantom config JSON (defaults when omitted)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one network per cross-validation fold")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", help="training config JSON (defaults when omitted)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--no-augment-log", action="store_true",
                   help="skip augment_log.jsonl.gz (every augmentation draw, one line per core and epoch)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score held-out cores and write the metrics report")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--run", required=True, help="run directory from `train`")
    e.add_argument("--out", help="report directory (default: <run>/eval)")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("heatmap", help="write a PGM prediction map for one core")
    h.add_argument("--data", required=True, help="dataset directory")
    h.add_argument("--run", required=True, help="run directory from `train`")
    h.add_argument("--core", required=True, type=int, help="core id")
    h.add_argument("--out", required=True, help="output .pgm path")
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors as 2
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    args.argv = ["cinelab"] + argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        _apply_thread_cap()
        return args.func(args)
    except UsageError as exc:
        print(f"cinelab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunFailure as exc:
        print(f"cinelab {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"cinelab {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
