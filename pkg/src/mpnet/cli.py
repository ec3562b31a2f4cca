"""Command-line front end: ``mpnet run | inspect | compare | export-weights | import-check``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import data, metrics, models, ntf, reporting, training
from .tensor import ShapeError
from .config import ConfigError, ExperimentConfig, load_config
from .weights import WeightsError, backbone_names, export_weights, import_weights

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("mpnet")


def load_experiment_dataset(cfg: ExperimentConfig) -> data.DatasetIndex:
    scale = cfg.arch_scale
    if cfg.is_builtin:
        ds = data.synthetic_dataset(cfg.dataset, cfg.n_samples, scale.input_side, scale.channels_in, cfg.seed)
    else:
        ds = data.load_dataset(cfg.resolve(cfg.dataset), scale.input_side, scale.channels_in)
    if cfg.classes is not None and list(cfg.classes) != ds.classes:
        raise data.DataError(f"dataset classes {ds.classes} differ from expected {cfg.classes}")
    return ds


def build_model(cfg: ExperimentConfig, class_count: int, seed: int):
    return models.build(cfg.model, cfg.arch_scale, class_count, seed,
                        bd_dropout=cfg.bd_dropout, head_dropout=cfg.head_dropout)


def _workers(cfg: ExperimentConfig) -> int:
    cap = data.default_workers()
    return min(cfg.workers, cap) if cfg.workers else cap


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def run_experiment(cfg: ExperimentConfig, out_dir, plots: bool = True, workers: int | None = None,
                   after_init=None, on_fold=None, verbose: bool = True) -> metrics.RunReport:
    """Cross-validate the configured model and write every run artifact to ``out_dir``.

    ``after_init(params)`` runs after any weight import on each fold's fresh
    store; ``on_fold(report, params)`` runs after each fold is evaluated.
    """
    ds = load_experiment_dataset(cfg)
    plan = data.stratified_kfold(ds, cfg.folds, cfg.seed)
    weights = cfg.resolve(cfg.weights_in)

    def init_hook(params):
        if weights is not None:
            import_weights(weights, params, cfg.weights_policy)
        if after_init is not None:
            after_init(params)

    def fold_hook(rep, params):
        if verbose:
            print(f"fold {rep.fold + 1}/{cfg.folds}: accuracy {rep.accuracy:.4f}", flush=True)
        if on_fold is not None:
            on_fold(rep, params)

    report = training.cross_validate(
        lambda seed: build_model(cfg, ds.class_count, seed), ds, plan, cfg.augment_config(),
        cfg.train_config(workers or _workers(cfg)), model_name=cfg.model, config_snapshot=cfg.snapshot(),
        after_init=init_hook, on_fold=fold_hook)
    report.dataset = cfg.dataset
    report.created_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    written = reporting.write_run(report, out_dir, plots=cfg.plots and plots)
    if verbose:
        agg = report.aggregate
        print("aggregate: " + ", ".join(f"{k} {'-' if v is None else format(v, '.4f')}" for k, v in agg.items()))
        for p in written:
            print(f"wrote {p}")
    return report


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(args.out) if args.out else cfg.resolve(cfg.output_dir)
    run_experiment(cfg, out_dir, plots=not args.no_plots)
    return 0


def _chain(shapes: dict, spec: models.GraphSpec) -> list[int]:
    chain = [spec.input_extents[0]]
    chain += [shapes[n.name][0] for n in spec.nodes if n.kind == "maxpool"]
    return chain


def cmd_inspect(args) -> int:
    cfg = _load_cfg(args)
    try:
        spec, params = build_model(cfg, _class_count(cfg), cfg.seed)
    except ShapeError as exc:
        raise ConfigError(f"input_side {cfg.arch_scale.input_side} is incompatible with the model: {exc}") from None
    params.apply_freeze_policy(cfg.freeze_policy)
    shapes = models.shape_audit(spec, spec.input_extents)
    print(f"model {spec.name}, input {'x'.join(map(str, spec.input_extents))}, "
          f"{spec.class_count} classes, freeze policy {cfg.freeze_policy}")
    print(models.summary_table(spec, params))
    print("spatial chain: " + " -> ".join(map(str, _chain(shapes, spec))))
    for name in ("fusion.concat", "main.gap", "head.dense"):
        if name in shapes:
            print(f"{name} width: {shapes[name][0]}")
    trainable = params.trainable()
    print(f"trainable tensors: {len(trainable)} "
          f"({sum(v.value.size for v in trainable.values())} values) of {len(params.vars)}")
    return 0


def _class_count(cfg: ExperimentConfig) -> int:
    if cfg.classes:
        return len(cfg.classes)
    if cfg.dataset == "synthetic-multi":
        return 4
    if cfg.is_builtin:
        return 2
    root = cfg.resolve(cfg.dataset)
    if root.is_dir():
        return max(2, sum(1 for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")))
    return len(data.load_dataset(root, 8, 1).classes)


def cmd_compare(args) -> int:
    sources = []
    if args.paper_mvgg19:
        sources.append(metrics.paper_reports("mvgg19"))
    sources += [[metrics.RunReport.load(p)] for p in args.reports]
    if args.paper_vgg19:
        sources.append(metrics.paper_reports("vgg19"))
    if len(sources) != 2:
        raise ConfigError(f"compare needs exactly two report sources, got {len(sources)}")
    a, b = sources
    comparison = metrics.compare_reports(a, b)
    print(comparison.table())
    print(json.dumps(comparison.to_dict(), indent=2, sort_keys=True))
    if args.out:
        for p in reporting.write_comparison(comparison, a, b, args.out, plots=not args.no_plots):
            print(f"wrote {p}")
    return 0


def cmd_export(args) -> int:
    cfg = _load_cfg(args)
    _, params = build_model(cfg, _class_count(cfg), cfg.seed)
    if cfg.weights_in:
        import_weights(cfg.resolve(cfg.weights_in), params, cfg.weights_policy)
    names = None
    if args.backbone_only:
        names = backbone_names(params)
    written = export_weights(params, args.out, names)
    print(f"wrote {len(written)} tensors to {args.out}")
    return 0


def cmd_import_check(args) -> int:
    cfg = _load_cfg(args)
    _, params = build_model(cfg, _class_count(cfg), cfg.seed)
    before = params.snapshot()
    policy = "strict" if args.strict else cfg.weights_policy
    names = set(import_weights(args.weights, params, policy))
    untouched = [k for k in before if k not in names]
    print(f"imported {len(names)} tensors ({policy}); {len(untouched)} model tensors left as initialized")
    for k in untouched:
        print(f"  untouched: {k}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    p = with_config(sub.add_parser("run", help="cross-validate a model and write reports"))
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_run)

    p = with_config(sub.add_parser("inspect", help="print the architecture and shape table"))
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("compare", help="per-dataset metric deltas between two result sets")
    p.add_argument("reports", nargs="*", help="report.json files")
    p.add_argument("--paper-mvgg19", action="store_true", help="use the published MVGG19 table")
    p.add_argument("--paper-vgg19", action="store_true", help="use the published VGG19 table")
    p.add_argument("--out", help="directory for compare.json/csv and SVG bars")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = with_config(sub.add_parser("export-weights", help="write model parameters to an NTF file"))
    p.add_argument("--out", required=True, help="NTF file to write")
    p.add_argument("--backbone-only", action="store_true")
    p.set_defaults(func=cmd_export)

    p = with_config(sub.add_parser("import-check", help="verify an NTF file loads into the configured model"))
    p.add_argument("--weights", required=True)
    p.add_argument("--strict", action="store_true", help="require the file to cover every tensor")
    p.set_defaults(func=cmd_import_check)
    return parser


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
    except training.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except training.FoldError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.cause, training.NumericError) else EXIT_DATA
    except (data.DataError, ntf.NTFError, WeightsError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
