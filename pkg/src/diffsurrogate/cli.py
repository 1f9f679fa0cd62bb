"""Command-line front end: gen, solve, train, eval, infer-matrix, report.

Exit status: 0 success, 1 validation/configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .dataset import build_dataset, load_dataset, nested_subsets, split_train_test
from .errors import NumericError, SurrogateError, ValidationError
from .evaluation import (REPORT_REGIONS, EvalReport, cross_evaluate, ensemble_stats,
                         evaluate_model, inference_matrix, size_scaling_curve)
from .lattice import rasterize_sources
from .solver import SolverSettings, residual_norm, solve_steady
from .trainer import train, write_history_csv

log = logging.getLogger("diffsurrogate")

COMMANDS = ("gen", "solve", "train", "eval", "infer-matrix", "report")


def write_pgm(path: Path, grid: np.ndarray) -> None:
    img = np.round(255 * np.clip(grid, 0.0, 1.0)).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_field_dump(path: str | Path, size: int) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(size, size)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out or "runs/default")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_dir(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.dataset_path) if cfg.dataset_path else out / "dataset"


def _load_split(cfg: RunConfig, out: Path):
    ds, manifest = load_dataset(_dataset_dir(cfg, out))
    if manifest.lattice != cfg.lattice:
        raise ValidationError(f"dataset lattice {manifest.lattice} != config lattice {cfg.lattice}")
    train_set, test_set = split_train_test(ds, manifest.split_fraction, manifest.seed)
    return train_set, test_set, manifest


def _subset(train_set, fraction, seed):
    if fraction >= 1.0:
        return train_set
    return nested_subsets(train_set, [fraction], seed)[0]


def cmd_gen(cfg: RunConfig, out: Path) -> dict:
    target = _dataset_dir(cfg, out)
    ds, manifest = build_dataset(cfg.manifest, target, workers=cfg.workers)
    return {"artifacts": [str(target / name) for name in sorted(manifest.checksums)] +
            [str(target / "manifest.json")],
            "metrics": {"samples": len(ds), "balanced": manifest.balanced}}


def cmd_solve(cfg: RunConfig, out: Path) -> dict:
    config = cfg.solve_config()
    settings = SolverSettings(tolerance=cfg.solve.get("tolerance", 1e-8),
                              max_iterations=cfg.solve.get("max_iterations", 20_000))
    field = solve_steady(config, cfg.lattice, settings)
    res = residual_norm(field, config, cfg.lattice)
    raw = out / "field.f32"
    raw.write_bytes(np.ascontiguousarray(field.values, dtype="<f4").tobytes())
    # float64 dump keeps the residual check exact
    (out / "field.f64").write_bytes(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    write_pgm(out / "field.pgm", field.values)
    write_pgm(out / "input.pgm", rasterize_sources(config, cfg.lattice).values)
    return {"artifacts": [str(raw), str(out / "field.f64"), str(out / "field.pgm"),
                          str(out / "input.pgm")],
            "metrics": {"residual": res, "max": float(field.values.max())}}


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    train_set, test_set, manifest = _load_split(cfg, out)
    train_set = _subset(train_set, cfg.train.subset_fraction, manifest.seed)
    result = train(cfg.train, train_set, test_set)
    save_checkpoint(out / "best.edck", result.best)
    save_checkpoint(out / "final.edck", result.final)
    write_history_csv(out / "history.csv", result.history)
    return {"artifacts": [str(out / "best.edck"), str(out / "final.edck"), str(out / "history.csv")],
            "metrics": {"best_epoch": result.best.epoch, "best_test_loss": result.best.test_loss,
                        "train_samples": len(train_set)}}


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    _, test_set, _ = _load_split(cfg, out)
    path = Path(cfg.eval.get("checkpoint", out / "best.edck"))
    ckpt = load_checkpoint(path, expect=cfg.train.net)
    transform = ckpt.extra.get("transform", cfg.train.loss.transform)
    report = evaluate_model(ckpt.net, test_set, transform)
    report.to_csv(out / "report.csv")
    return {"artifacts": [str(out / "report.csv")],
            "metrics": {"lattice_mae": report.n_averaged("lattice"), "rows": len(report.ns)}}


def cmd_infer_matrix(cfg: RunConfig, out: Path) -> dict:
    train_set, test_set, _ = _load_split(cfg, out)
    counts = cfg.eval.get("infer_counts") or sorted(train_set.counts())
    exclude = tuple(cfg.eval.get("exclude", ()))
    models = {}
    artifacts = []
    for p in counts:
        result = train(cfg.train, train_set.only(p), test_set.only(p))
        models[p] = result.best.net
        path = out / f"model_p{p:02d}.edck"
        save_checkpoint(path, result.best)
        artifacts.append(str(path))
    tests = {m: test_set.only(m) for m in counts}
    reports = cross_evaluate(models, tests, cfg.train.loss.transform)
    metrics = {}
    for region in REPORT_REGIONS:
        mat = inference_matrix(None, None, region, exclude, reports=reports)
        stem = out / f"infer_{region}"
        mat.to_csv(f"{stem}_raw.csv")
        mat.to_csv(f"{stem}_norm.csv", normalized=True)
        mat.to_pgm(f"{stem}_norm.pgm")
        artifacts += [f"{stem}_raw.csv", f"{stem}_norm.csv", f"{stem}_norm.pgm"]
        metrics[region] = {"best_train_count": mat.best_train_count(),
                           "row_average": {str(k): v for k, v in mat.row_average().items()}}
    return {"artifacts": artifacts, "metrics": metrics}


def cmd_report(cfg: RunConfig, out: Path) -> dict:
    artifacts, metrics = [], {}
    reports = cfg.eval.get("reports")
    if reports:
        loaded = {float(f): EvalReport.from_csv(p) for f, p in reports.items()}
        curves = size_scaling_curve(loaded)
        path = out / "scaling.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fraction", *REPORT_REGIONS])
            fr = curves["lattice"].fractions
            for i, f in enumerate(fr):
                w.writerow([repr(float(f)), *(repr(float(curves[r].mae[i])) for r in REPORT_REGIONS)])
        artifacts.append(str(path))
        metrics["scaling"] = {r: {"slope": c.slope, "r2": c.r2} for r, c in curves.items()}
    ensemble = cfg.eval.get("ensemble")
    if ensemble:
        stats = ensemble_stats([EvalReport.from_csv(p) for p in ensemble])
        for name, arr in (("mean", stats.mean), ("std", stats.std)):
            path = out / f"ensemble_{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["n", *stats.regions])
                for i, n in enumerate(stats.ns):
                    w.writerow([n, *(repr(float(v)) for v in arr[i])])
            artifacts.append(str(path))
    if not artifacts:
        raise ValidationError("report needs eval.reports and/or eval.ensemble")
    return {"artifacts": artifacts, "metrics": metrics}


HANDLERS = {"gen": cmd_gen, "solve": cmd_solve, "train": cmd_train, "eval": cmd_eval,
            "infer-matrix": cmd_infer_matrix, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffsurrogate", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="run configuration (JSON, schema v1)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.add_argument("--threads", type=int, default=1, help="worker/BLAS thread cap")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def dispatch(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.threads < 1:
            raise ValidationError("--threads must be >= 1")
        cfg.workers = args.threads
        out = _out_dir(cfg)
        started = time.time()
        with threadpool_limits(limits=args.threads):
            result = HANDLERS[args.command](cfg, out)
        summary = {"command": args.command, "config_sha256": cfg.digest, "seed": cfg.seed,
                   "threads": args.threads, "started": started, "finished": time.time(),
                   "config": cfg.raw, **result}
        (out / f"summary_{args.command}.json").write_text(
            json.dumps(summary, indent=2, default=str) + "\n", "utf-8")
    except NumericError as exc:
        print(f"diffsurrogate {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, FileNotFoundError) as exc:
        print(f"diffsurrogate {args.command}: {exc}", file=sys.stderr)
        return 1
    except SurrogateError as exc:
        print(f"diffsurrogate {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
