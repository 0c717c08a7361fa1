"""Command-line entry point: ``hccm <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.
"""
from __future__ import annotations

import argparse
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from .cache import FeatureMapCache, precompute
from .checks import full_gradcheck
from .config import RunConfig
from .data import ConfigError, ImageCatalog, gen_dataset, load_dataset, load_split, save_dataset
from .model import VARIANTS, HccmModel
from .serving import Predictor, RepresentationTable, export_table, make_server, replay
from .tensor import GRAD_TOLERANCE
from .train import TrainingAborted, auc, mean_logloss, train


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _emit(text: str, doc: dict) -> None:
    print(text)
    print(json.dumps(doc, indent=2, sort_keys=True))


def _table(rows, header) -> str:
    cols = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cols) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cols)


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg.with_seed(args.seed)
    for flag, section, key in (("variant", "train", "variant"), ("epochs", "train", "epochs"),
                               ("lr", "train", "lr"), ("batch_size", "train", "batch_size"),
                               ("precision", "model", "precision")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(getattr(cfg, section), key, value)
    return cfg.validate()


def _sources(args, model: HccmModel, catalog: ImageCatalog) -> dict:
    if model.variant == "DIN":
        return {}
    cache_path = getattr(args, "cache", None)
    if cache_path:
        return {"cache": FeatureMapCache.load(cache_path, model)}
    return {"catalog": catalog}


# ----------------------------------------------------------------------
def cmd_gen_data(args, cfg: RunConfig) -> int:
    train_s, test_s, catalog = gen_dataset(cfg.data)
    save_dataset(args.out, train_s, test_s, catalog)
    doc = {"train": len(train_s), "test": len(test_s), "images": len(catalog),
           "train_ctr": sum(s.label for s in train_s) / len(train_s)}
    _emit(_table([[k, v] for k, v in doc.items()], ["field", "value"]), doc)
    return 0


def cmd_precompute(args, cfg: RunConfig) -> int:
    catalog = ImageCatalog.load(Path(args.data) / "catalog.imgc")
    model = HccmModel(cfg.model, "DIN+FixedCNN", seed=cfg.train.seed)
    out = args.out or cfg.cache.path
    if not out:
        raise ConfigError("cache.path", "no output path given (--out or cache.path)")
    cache = precompute(catalog, model, out)
    doc = {"entries": len(cache), "extent": list(cache.extent), "checksum": f"{cache.checksum:016x}"}
    _emit(_table([[k, v] for k, v in doc.items()], ["field", "value"]), doc)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    train_s, test_s, catalog = load_dataset(args.data)
    model = HccmModel(cfg.model, cfg.train.variant, seed=cfg.train.seed)
    report = train(train_s, cfg.train, model, test_s, log=_log, **_sources(args, model, catalog))
    if args.out:
        model.save(args.out)
    doc = report.to_dict(with_trajectory=args.trajectory)
    if cfg.train.deterministic:
        doc.pop("wall_clock")
    _log(f"wall clock {report.wall_clock:.1f}s")
    _emit(report.to_text(timing=not cfg.train.deterministic), doc)
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    catalog = ImageCatalog.load(Path(args.data) / "catalog.imgc")
    split = load_split(Path(args.data) / f"{args.split}.jsonl")
    model = HccmModel.load(args.model, precision=cfg.model.precision)
    src = _sources(args, model, catalog)
    scores = model.predict(split, **src)
    doc = {"variant": model.variant, "split": args.split, "samples": len(split),
           "auc": auc(scores, [s.label for s in split]), "logloss": mean_logloss(model, split, **src)}
    _emit(_table([[k, v] for k, v in doc.items()], ["field", "value"]), doc)
    return 0


def cmd_export_table(args, cfg: RunConfig) -> int:
    catalog = ImageCatalog.load(Path(args.data) / "catalog.imgc")
    model = HccmModel.load(args.model, precision=cfg.model.precision)
    src = _sources(args, model, catalog)
    table = export_table(model, catalog, args.out, cache=src.get("cache"))
    doc = {"entries": len(table), "dv": table.dv, "model_checksum": f"{table.model_checksum:016x}",
           "table_checksum": table.checksum}
    _emit(_table([[k, v] for k, v in doc.items()], ["field", "value"]), doc)
    return 0


def cmd_serve(args, cfg: RunConfig) -> int:
    model = HccmModel.load(args.model, precision=cfg.model.precision)
    predictor = Predictor(model, RepresentationTable.load(args.table))
    if args.replay is not None:
        fh = sys.stdin if args.replay == "-" else open(args.replay)
        with fh:
            rejected = replay(predictor, fh, sys.stdout)
        return 1 if rejected else 0
    port = args.http if args.http is not None else cfg.serve.port
    server = make_server(predictor, cfg.serve.host, port)
    _log(f"serving on http://{cfg.serve.host}:{server.server_address[1]}/predict")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else 0
    res = full_gradcheck(args.variant or "HCCM", seed=seed)
    doc = {"variant": res.variant, "max_rel_error": res.max_rel_error, "parameters": res.n_parameters,
           "frozen_grad_zero": res.frozen_grad_zero, "tolerance": GRAD_TOLERANCE[np.dtype(np.float64)],
           "passed": res.passed}
    _emit(_table([[k, v] for k, v in doc.items()], ["field", "value"]), doc)
    return 0 if res.passed else 1


def run_ablation(cfg: RunConfig, runs: int = 1, variants=VARIANTS, log=None) -> dict:
    """Train every variant on the same data per run; seeds are ``seed + r``."""
    base_seed = cfg.train.seed
    per_run = []
    for r in range(runs):
        seed = base_seed + r
        cfg.data.seed = seed
        train_s, test_s, catalog = gen_dataset(cfg.data)
        cache = precompute(catalog, HccmModel(cfg.model, "DIN+FixedCNN", seed=seed))
        aucs = {}
        for v in variants:
            cfg.train.variant, cfg.train.seed = v, seed
            model = HccmModel(cfg.model, v, seed=seed)
            rep = train(train_s, cfg.train, model, test_s, cache=None if v == "DIN" else cache)
            aucs[v] = rep.test_auc
            if log:
                log(f"run {r} seed {seed} {v}: AUC {rep.test_auc:.4f} ({rep.wall_clock:.0f}s)")
        gain = {v: aucs[v] - aucs["DIN"] for v in variants if v != "DIN"} if "DIN" in aucs else {}
        per_run.append({"seed": seed, "auc": aucs, "auc_gain": gain})
    cfg.train.seed = base_seed
    median = {v: statistics.median(run["auc"][v] for run in per_run) for v in variants}
    base = median.get("DIN")
    rows = [{"variant": v, "auc": median[v], "auc_gain": None if base is None or v == "DIN" else median[v] - base}
            for v in variants]
    return {"runs": per_run, "median": rows}


def format_ablation(report: dict) -> str:
    rows = []
    for row in report["median"]:
        gain = "-" if row["auc_gain"] is None else f"{100 * row['auc_gain']:.2f}%"
        rows.append([row["variant"], f"{row['auc']:.4f}", gain])
    return _table(rows, ["Model", "AUC", "AUC gain"])


def cmd_ablation(args, cfg: RunConfig) -> int:
    report = run_ablation(cfg, args.runs, log=_log)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit(format_ablation(report), report)
    return 0


# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hccm", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides data.seed and train.seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("precompute", parents=[common], help="store fixed-CNN feature maps")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("train", parents=[common], help="train one variant")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--precision", choices=("float64", "float32"))
    p.add_argument("--cache")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--trajectory", action="store_true", help="include per-batch losses in the report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--cache")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-table", parents=[common], help="write the serving lookup table")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache")
    p.set_defaults(func=cmd_export_table)

    p = sub.add_parser("serve", parents=[common], help="answer prediction requests from a table")
    p.add_argument("--table", required=True)
    p.add_argument("--model", required=True)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--http", type=int, metavar="PORT")
    mode.add_argument("--replay", metavar="FILE", help="newline-delimited JSON requests, '-' for stdin")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    p.add_argument("--variant", choices=VARIANTS, default="HCCM")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablation", parents=[common], help="train all four variants and compare AUC")
    p.add_argument("--runs", type=int, default=1, help="number of seeds; the report shows medians")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"invalid config at {exc.path}: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"invalid config at {exc.path}: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        norms = ", ".join(f"{k}={v:.3g}" for k, v in exc.param_norms.items())
        print(f"training aborted: {exc}; parameter norms: {norms}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
