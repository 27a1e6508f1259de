"""Command-line entry point.

Commands (all seeded and idempotent; identical config + seed yields
byte-identical output files):

  train-designs   optimise a batch design and save design/log/critic files
  make-baseline   generate a random or UCB design file
  estimate-eig    train a fresh critic against a design file, report the bound
  deploy-eval     full comparison: EIG + simulated deployment metrics per design
  report          merge deploy-eval outputs into one comparison CSV
  plot-designs    SVG scatter of a design file
  selftest        run the property suite

Exit codes: 0 success, 2 usage/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys

from . import baselines as bl
from . import reports, trainer
from .config import ConfigError, load_config
from .critic import SeparableCritic
from .deployment import DegeneratePosterior, calibration_series, run_deployment
from .rng import RngStream
from .selftest import run_selftest

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _add_common(p: argparse.ArgumentParser, workers: bool = False) -> None:
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    scale = p.add_mutually_exclusive_group()
    scale.add_argument("--desk", dest="scale", action="store_const", const="desk",
                       help="desk-scale budgets (default)")
    scale.add_argument("--paper", dest="scale", action="store_const", const="paper",
                       help="paper-scale budgets")
    p.set_defaults(scale="desk")
    if workers:
        p.add_argument("--workers", type=int, default=1,
                       help="worker processes for independent work items")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maxeig",
        description="Information-maximising batch designs for contextual optimisation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("train-designs", help="optimise designs and critic"))

    p = sub.add_parser("make-baseline", help="generate a baseline design file")
    _add_common(p)
    p.add_argument("--method", required=True,
                   help='"random", "random:SIGMA" or "ucb:LAMBDA"')

    p = sub.add_parser("estimate-eig", help="bound estimate for a fixed design file")
    _add_common(p)
    p.add_argument("--design", required=True, help="design file JSON")

    p = sub.add_parser("deploy-eval", help="EIG + deployment metrics per design file")
    _add_common(p, workers=True)
    p.add_argument("--designs", required=True, nargs="+", help="design file JSONs")
    p.add_argument("--calibration", action="store_true",
                   help="also write per-method posterior calibration CSVs")

    p = sub.add_parser("report", help="merge deploy-eval outputs into one CSV")
    p.add_argument("--run-dir", required=True, help="directory of *_metrics.json files")
    p.add_argument("--out", default=None, help="output CSV (default RUN_DIR/comparison.csv)")

    p = sub.add_parser("plot-designs", help="SVG scatter of a design file")
    p.add_argument("--design", required=True)
    p.add_argument("--out", required=True, help="output SVG path")

    sub.add_parser("selftest", help="run the property suite")
    return parser


def _root_stream(resolved) -> RngStream:
    return RngStream(resolved.seed, f"maxeig/{resolved.name}")


def _method_slug(method: str) -> str:
    return method.replace(":", "")


def cmd_train_designs(args) -> int:
    resolved = load_config(args.config, scale=args.scale, seed=args.seed)
    model = resolved.build_model()
    contexts = resolved.build_contexts()
    cfg = resolved.train_config()
    stream = _root_stream(resolved).split("train")

    preset = "discrete" if model.action_kind == "discrete" else "continuous"
    critic = SeparableCritic(preset, contexts.n_experiments, contexts.n_evaluations,
                             stream.split("critic_init"))
    if model.action_kind == "discrete":
        design = trainer.init_discrete_policy(model, contexts.n_experiments)
    else:
        design = trainer.init_continuous_design(model, contexts.n_experiments,
                                                stream.split("design_init"))

    design, critic, log = trainer.fit(model, contexts, design, critic, cfg,
                                      stream.split("fit"))

    os.makedirs(args.out, exist_ok=True)
    reports.save_design(os.path.join(args.out, "ours_design.json"),
                        design, "ours", resolved, contexts)
    log_payload = reports.header(resolved)
    log_payload["records"] = log.records
    reports.write_json(os.path.join(args.out, "ours_trainlog.json"), log_payload)
    critic_payload = reports.header(resolved)
    critic_payload["critic"] = critic.to_payload()
    reports.write_json(os.path.join(args.out, "ours_critic.json"), critic_payload)
    print(f"wrote ours_design.json, ours_trainlog.json, ours_critic.json to {args.out}")
    return EXIT_OK


def cmd_make_baseline(args) -> int:
    resolved = load_config(args.config, scale=args.scale, seed=args.seed)
    model = resolved.build_model()
    contexts = resolved.build_contexts()
    spec = bl.BaselineSpec.parse(
        args.method,
        n_prior_samples=resolved.baselines.get("ucb_prior_samples", 512),
        grid_size=resolved.baselines.get("ucb_grid", 201),
    )
    stream = _root_stream(resolved).split(f"baseline/{spec.label}")
    if spec.kind == "random":
        design = bl.random_designs(model, contexts.n_experiments, spec, stream)
    else:
        design = bl.ucb_designs(model, contexts.experimental, spec, stream)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{_method_slug(spec.label)}_design.json")
    reports.save_design(path, design, spec.label, resolved, contexts)
    print(f"wrote {path}")
    return EXIT_OK


def _estimate_eig_for_design(resolved, design_path):
    model = resolved.build_model()
    contexts = resolved.build_contexts()
    design, payload = reports.load_design(design_path)
    if payload["model_hash"] != resolved.model_hash:
        raise ConfigError(
            f"design file {design_path} was made under a different model config"
        )
    method = payload["method"]
    cfg = resolved.eig_config()
    stream = _root_stream(resolved).split(f"eig/{method}")
    estimate, critic = bl.eig_of_fixed_designs(model, contexts, design, cfg, stream)
    return method, design, estimate, critic


def cmd_estimate_eig(args) -> int:
    resolved = load_config(args.config, scale=args.scale, seed=args.seed)
    method, _, (mean, se), _ = _estimate_eig_for_design(resolved, args.design)
    payload = reports.header(resolved)
    payload.update({
        "method": method,
        "eig_mean": mean,
        "eig_se": se,
        "eval_batches": resolved.eig_config().eval_batches,
        "batch": resolved.eig_config().batch,
    })
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{_method_slug(method)}_eig.json")
    reports.write_json(path, payload)
    print(f"wrote {path} (bound {mean:.4f} +- {se:.4f})")
    return EXIT_OK


def _eig_task(packed):
    resolved, design_path = packed
    method, design, estimate, _ = _estimate_eig_for_design(resolved, design_path)
    return method, design, estimate


def cmd_deploy_eval(args) -> int:
    resolved = load_config(args.config, scale=args.scale, seed=args.seed)
    model = resolved.build_model()
    contexts = resolved.build_contexts()
    eval_cfg = resolved.eval_config()
    pool = None
    if args.workers > 1:
        pool = multiprocessing.get_context("fork").Pool(args.workers)
    try:
        tasks = [(resolved, path) for path in args.designs]
        if pool is not None and len(tasks) > 1:
            staged = pool.map(_eig_task, tasks)
        else:
            staged = [_eig_task(t) for t in tasks]

        rows = []
        for method, design, estimate in staged:
            stream = _root_stream(resolved).split(f"deploy/{method}")
            deployment = run_deployment(model, contexts, design, eval_cfg, stream,
                                        pool=pool)
            if deployment["n_failed"]:
                print(f"warning: {deployment['n_failed']} realisations failed "
                      f"posterior inference for {method}", file=sys.stderr)
            rows.append(reports.metrics_row(method, estimate, deployment, resolved.seed))
            if args.calibration:
                series = calibration_series(
                    model, contexts, design, eval_cfg,
                    _root_stream(resolved).split(f"calibration/{method}"),
                )
                reports.write_calibration_csv(
                    os.path.join(args.out, f"{_method_slug(method)}_calibration.csv"),
                    series,
                )
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    os.makedirs(args.out, exist_ok=True)
    reports.write_metrics(os.path.join(args.out, "metrics.csv"),
                          os.path.join(args.out, "metrics.json"), rows, resolved)
    print(f"wrote metrics.csv and metrics.json to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = args.run_dir
    paths = sorted(
        os.path.join(run_dir, name)
        for name in os.listdir(run_dir)
        if name.endswith("metrics.json")
    )
    if not paths:
        print(f"no *metrics.json files in {run_dir}", file=sys.stderr)
        return EXIT_USAGE
    rows, _ = reports.merge_metric_files(paths)
    out = args.out or os.path.join(run_dir, "comparison.csv")
    reports.atomic_write_text(out, reports.metrics_csv_text(rows))
    print(f"wrote {out} ({len(rows)} rows)")
    return EXIT_OK


def cmd_plot_designs(args) -> int:
    with open(args.design) as fh:
        payload = json.load(fh)
    reports.atomic_write_text(args.out, reports.design_scatter_svg(payload))
    print(f"wrote {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK

    try:
        if args.command == "train-designs":
            return cmd_train_designs(args)
        if args.command == "make-baseline":
            return cmd_make_baseline(args)
        if args.command == "estimate-eig":
            return cmd_estimate_eig(args)
        if args.command == "deploy-eval":
            return cmd_deploy_eval(args)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "plot-designs":
            return cmd_plot_designs(args)
        if args.command == "selftest":
            return EXIT_OK if run_selftest() else 1
    except (ConfigError, reports.MergeError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (trainer.TrainingDiverged, DegeneratePosterior) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
