"""Command line entry point: ``gialab {run,roc,scan,overhead}``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 1 any
other library error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .detection import PRESETS, detect_handcrafted, preset
from .exceptions import ConfigError, GialabError, NumericError
from .harness import ExperimentConfig, build_world, measure_overhead, roc_sweep, run_experiment
from .nn import desk_model, load_checkpoint, local_train

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.preset is not None:
        changes["detector_config"] = args.preset
    if changes:
        try:
            cfg = replace(cfg, **changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    kept = []
    report = run_experiment(cfg, kept)
    _write_json(out / "report.json", report.to_dict())
    with open(out / "rounds.jsonl", "w") as fh:
        for r in kept:
            for line in r.log_lines:
                fh.write(line + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "valid", "tp", "fp", "tn", "fn", "tpr", "fpr", "final_accuracy"])
        for run in report.runs:
            c = run["counts"]
            w.writerow([run["seed"], run["valid"], c["tp"], c["fp"], c["tn"], c["fn"],
                        run["tpr"], run["fpr"], run["final_accuracy"]])
    print(json.dumps({"tpr_mean": report.tpr_mean, "fpr_mean": report.fpr_mean, "totals": report.totals}))
    return EXIT_OK


def cmd_roc(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    res = roc_sweep(cfg, args.n_configs)
    with open(out / "roc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "fpr", "tpr"])
        for name, (f, t) in zip(res.configs, res.points):
            w.writerow([name, repr(f), repr(t)])
    _write_json(out / "roc.json", {"auc": res.auc, "points": res.points, "configs": res.configs,
                                   "envelope_violations": res.envelope_violations})
    print(f"AUC {res.auc:.4f}")
    return EXIT_OK


def cmd_scan(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = preset(args.preset or "standard")
    scores, flag = detect_handcrafted(model, cfg)
    report = {
        "checkpoint": str(args.checkpoint),
        "config": cfg.name,
        "flag": flag,
        "offending_layers": [s.layer for s in scores if s.flag],
        "layers": [
            {"layer": s.layer, "D": s.D, "H": s.H, "R": s.R, "B_m": s.B_m, "B_s": s.B_s, "reasons": s.reasons}
            for s in scores
        ],
    }
    text = json.dumps(report, indent=2)
    if args.out:
        _write_json(_out_dir(args) / "scan.json", report)
    print(text)
    return EXIT_OK


def cmd_overhead(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    seed = cfg.seeds[0]
    _, aux, shards, _ = build_world(cfg, seed)
    theta0 = desk_model(cfg.dim, cfg.classes, cfg.head_width, seed=seed)
    model = local_train(theta0, aux, steps=100, batch_size=cfg.batch_size, lr=cfg.lr, seed=seed)
    with open(out / "overhead.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["detector", "samples", "mean_s", "std_s", "reps"])
        for size in args.sizes:
            data = aux.subset(range(min(size, len(aux))))
            timing = measure_overhead(model, data, theta0, cfg.thresholds(), args.reps)
            for name, t in timing.items():
                w.writerow([name, len(data), f"{t['mean']:.6e}", f"{t['std']:.6e}", t["reps"]])
    print((out / "overhead.csv").read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gialab", description="Federated GIA attack/detection testbed")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="results"):
        sp.add_argument("--config", help="JSON file with ExperimentConfig fields")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="detector threshold preset")

    sp = sub.add_parser("run", help="run an experiment")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("roc", help="threshold sweep and AUC")
    common(sp)
    sp.add_argument("--n-configs", type=int, default=30)
    sp.set_defaults(func=cmd_roc)

    sp = sub.add_parser("scan", help="static weight scan of a checkpoint")
    sp.add_argument("checkpoint", help="GIA1 checkpoint file")
    sp.add_argument("--out", default=None)
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.set_defaults(func=cmd_scan)

    sp = sub.add_parser("overhead", help="detector timing table")
    common(sp)
    sp.add_argument("--reps", type=int, default=10)
    sp.add_argument("--sizes", type=int, nargs="+", default=[64, 256, 800])
    sp.set_defaults(func=cmd_overhead)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GialabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
