"""Experiment runner: train, evaluate, sweep, and ablate from JSON configs.

All outputs are files under --out: config echoes, checkpoints, per-epoch
training logs, metric reports (JSON plus CSV rows), and a companion PNG
figure for every multi-point CSV. Exit codes: 0 success, 2 bad
configuration or input, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

from .config import (
    ExperimentConfig,
    build_datasets,
    load_config,
    with_overrides,
)
from .defenses import DEFENSES, load_ensemble, save_ensemble, train
from .errors import ConfigError, DataFormatError, DmlrobError, NumericError
from .evaluation import evaluate
from .figures import render_ablation, render_eval, render_sweep
from .rng import Rng

DEFAULT_SWEEP_VALUES = {
    "eps": [8 / 255, 16 / 255, 24 / 255, 32 / 255],
    "iters": [1, 5, 10, 20],
    "beta": [0.0, 0.25, 0.5, 0.75, 1.0],
    "n_models": [1, 2, 3, 4],
}
ABLATION_VARIANTS = ("naive_ensemble", "eat_no_split", "eat_split")


def _parse_value(text: str) -> float:
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _parse_values(text: str | None, axis: str):
    if text is None:
        return list(DEFAULT_SWEEP_VALUES[axis])
    vals = [_parse_value(v) for v in text.split(",") if v.strip()]
    if not vals:
        raise ConfigError("--values must name at least one value")
    if axis in ("iters", "n_models"):
        return [int(v) for v in vals]
    return vals


def _parse_seeds(text: str | None):
    if text is None:
        return [0, 1, 2, 3, 4]
    return [int(s) for s in text.split(",") if s.strip()]


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _recall_columns(ks):
    return [f"recall@{k}" for k in sorted(int(k) for k in ks)]


def _report_row(report, ks):
    row = {"mode": report.mode, "nmi": report.nmi, "f1": report.f1}
    for k in sorted(int(k) for k in ks):
        row[f"recall@{k}"] = report.recall_at[k]
    row["epsilon"] = report.attack["epsilon"] if report.attack else 0.0
    row["steps"] = report.attack["steps"] if report.attack else 0
    return row


def _write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _run_experiment(cfg: ExperimentConfig):
    """Train per cfg and return (ensemble, history, train_ds, test_ds)."""
    train_ds, test_ds = build_datasets(cfg)
    rng = Rng(cfg.seed)
    result = train(train_ds, cfg.train, rng.split("train"))
    return result, train_ds, test_ds


def _eval_reports(cfg: ExperimentConfig, ensemble, test_ds, attacked: bool):
    rng = Rng(cfg.seed)
    reports = {"clean": evaluate(ensemble, test_ds, None, cfg.evaluation.ks, rng.split("eval"))}
    if attacked:
        reports["attacked"] = evaluate(
            ensemble, test_ds, cfg.evaluation.attack, cfg.evaluation.ks, rng.split("eval")
        )
    return reports


def cmd_train(args) -> int:
    cfg = with_overrides(
        load_config(args.config),
        seed=args.seed, out_dir=args.out, defense=args.defense, n_models=args.models,
    )
    os.makedirs(cfg.out_dir, exist_ok=True)
    result, _, _ = _run_experiment(cfg)
    echo = cfg.to_dict()
    _write_json(os.path.join(cfg.out_dir, "config_echo.json"), echo)
    save_ensemble(
        result.ensemble,
        os.path.join(cfg.out_dir, "checkpoint"),
        extra={"seed": cfg.seed, "config": echo},
    )
    fields = ["epoch", "model", "lr", "loss", "loss_clean", "loss_adv"]
    rows = [{k: row.get(k, "") for k in fields} for row in result.history]
    _write_csv(os.path.join(cfg.out_dir, "training_log.csv"), fields, rows)
    print(f"trained {cfg.train.defense} -> {cfg.out_dir}/checkpoint")
    return 0


def cmd_eval(args) -> int:
    ensemble, manifest = load_ensemble(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
    else:
        from .config import config_from_dict

        cfg = config_from_dict(manifest["config"])
    cfg = with_overrides(
        cfg, seed=args.seed, out_dir=args.out, eps=args.eps, iters=args.iters
    )
    _, test_ds = build_datasets(cfg)
    if ensemble.models[0].input_dim != test_ds.x.shape[1]:
        raise ConfigError(
            f"checkpoint expects {ensemble.models[0].input_dim} features, "
            f"dataset has {test_ds.x.shape[1]}"
        )
    os.makedirs(cfg.out_dir, exist_ok=True)
    reports = _eval_reports(cfg, ensemble, test_ds, attacked=args.attacked)
    echo = cfg.to_dict()
    docs = {}
    for mode, report in reports.items():
        doc = report.to_dict()
        doc["seed"] = cfg.seed
        doc["config"] = echo
        docs[mode] = doc
        _write_json(os.path.join(cfg.out_dir, f"report_{mode}.json"), doc)
    fields = ["mode", "nmi", "f1", *_recall_columns(cfg.evaluation.ks), "epsilon", "steps", "seed"]
    rows = []
    for mode in sorted(reports):
        row = _report_row(reports[mode], cfg.evaluation.ks)
        row["seed"] = cfg.seed
        rows.append(row)
    _write_csv(os.path.join(cfg.out_dir, "metrics.csv"), fields, rows)
    if not args.no_figures:
        render_eval(docs, os.path.join(cfg.out_dir, "metrics.png"))
    for mode in sorted(reports):
        print(f"{mode}: nmi={reports[mode].nmi:.4f} f1={reports[mode].f1:.4f} "
              f"recall@1={reports[mode].recall_at[min(cfg.evaluation.ks)]:.4f}")
    return 0


def _sweep_point_rows(cfg: ExperimentConfig, axis: str, value, seed: int, ks):
    """Train/evaluate one sweep point; returns metric rows."""
    cfg = with_overrides(cfg, seed=seed)
    if axis == "eps":
        cfg = with_overrides(cfg, eps=value)
    elif axis == "iters":
        cfg = with_overrides(cfg, iters=value)
    elif axis == "beta":
        cfg = replace(cfg, train=replace(cfg.train, defense="eat", beta=float(value)))
    elif axis == "n_models":
        cfg = replace(cfg, train=replace(cfg.train, defense="eat", n_models=int(value)))
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    result, _, test_ds = _run_experiment(cfg)
    attacked_only = axis in ("eps", "iters")
    reports = _eval_reports(cfg, result.ensemble, test_ds, attacked=True)
    rows = []
    for mode, report in reports.items():
        if attacked_only and mode != "attacked":
            continue
        row = {"axis": axis, "value": value, "seed": seed}
        row.update(_report_row(report, ks))
        rows.append(row)
    return rows


def cmd_sweep(args) -> int:
    base = with_overrides(load_config(args.config), out_dir=args.out)
    values = _parse_values(args.values, args.axis)
    seeds = _parse_seeds(args.seeds)
    os.makedirs(base.out_dir, exist_ok=True)
    rows = []
    trained_cache = {}
    for seed in seeds:
        if args.axis in ("eps", "iters"):
            # one training per seed serves every attack setting on this axis
            cfg_seed = with_overrides(base, seed=seed)
            result, _, test_ds = _run_experiment(cfg_seed)
            trained_cache[seed] = (cfg_seed, result.ensemble, test_ds)
        for value in values:
            if args.axis in ("eps", "iters"):
                cfg_seed, ensemble, test_ds = trained_cache[seed]
                cfg_point = with_overrides(
                    cfg_seed,
                    eps=value if args.axis == "eps" else None,
                    iters=value if args.axis == "iters" else None,
                )
                report = evaluate(
                    ensemble, test_ds, cfg_point.evaluation.attack,
                    cfg_point.evaluation.ks, Rng(cfg_point.seed).split("eval"),
                )
                row = {"axis": args.axis, "value": value, "seed": seed}
                row.update(_report_row(report, cfg_point.evaluation.ks))
                rows.append(row)
            else:
                rows.extend(_sweep_point_rows(base, args.axis, value, seed, base.evaluation.ks))
    fields = ["axis", "value", "seed", "mode", "nmi", "f1",
              *_recall_columns(base.evaluation.ks), "epsilon", "steps"]
    csv_path = os.path.join(base.out_dir, f"sweep_{args.axis}.csv")
    _write_csv(csv_path, fields, rows)
    _write_json(
        os.path.join(base.out_dir, f"sweep_{args.axis}_config.json"),
        {"axis": args.axis, "values": values, "seeds": seeds, "base": base.to_dict()},
    )
    if not args.no_figures:
        render_sweep(rows, args.axis, os.path.join(base.out_dir, f"sweep_{args.axis}.png"))
    print(f"wrote {len(rows)} rows -> {csv_path}")
    return 0


def _ablation_config(base: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant == "naive_ensemble":
        train_cfg = replace(base.train, defense="naive_ensemble", eat_split=False)
    elif variant == "eat_no_split":
        train_cfg = replace(base.train, defense="eat", eat_split=False)
    elif variant == "eat_split":
        train_cfg = replace(base.train, defense="eat", eat_split=True)
    else:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    return replace(base, train=train_cfg)


def cmd_ablate(args) -> int:
    base = with_overrides(load_config(args.config), out_dir=args.out, n_models=args.models)
    seeds = _parse_seeds(args.seeds)
    os.makedirs(base.out_dir, exist_ok=True)
    rows = []
    variant_echoes = {}
    for variant in ABLATION_VARIANTS:
        variant_echoes[variant] = _ablation_config(base, variant).to_dict()
    for seed in seeds:
        for variant in ABLATION_VARIANTS:
            cfg = with_overrides(_ablation_config(base, variant), seed=seed)
            result, _, test_ds = _run_experiment(cfg)
            reports = _eval_reports(cfg, result.ensemble, test_ds, attacked=True)
            for mode in ("clean", "attacked"):
                row = {"variant": variant, "seed": seed, "mode": mode}
                row.update(_report_row(reports[mode], cfg.evaluation.ks))
                rows.append(row)
    fields = ["variant", "seed", "mode", "nmi", "f1",
              *_recall_columns(base.evaluation.ks), "epsilon", "steps"]
    csv_path = os.path.join(base.out_dir, "ablation.csv")
    _write_csv(csv_path, fields, rows)
    _write_json(
        os.path.join(base.out_dir, "ablation_config.json"),
        {"seeds": seeds, "variants": variant_echoes, "base": base.to_dict()},
    )
    if not args.no_figures:
        render_ablation(rows, os.path.join(base.out_dir, "ablation.png"))
    print(f"wrote {len(rows)} rows -> {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmlrob",
        description="Adversarial robustness experiments for deep metric learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")

    p_train = sub.add_parser("train", help="train a model or ensemble")
    common(p_train)
    p_train.add_argument("--defense", choices=DEFENSES, default=None)
    p_train.add_argument("--models", type=int, default=None, help="ensemble size override")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint, clean and attacked")
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p_eval.add_argument("--config", default=None, help="config JSON (defaults to the checkpoint echo)")
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out", default="eval_out")
    p_eval.add_argument("--attacked", action="store_true", help="also run the attacked evaluation")
    p_eval.add_argument("--eps", type=_parse_value, default=None, help="test attack budget (accepts a/b)")
    p_eval.add_argument("--iters", type=int, default=None, help="test attack iterations")
    p_eval.add_argument("--no-figures", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="sweep one axis over several seeds")
    common(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=sorted(DEFAULT_SWEEP_VALUES))
    p_sweep.add_argument("--values", default=None, help="comma-separated values (accepts a/b)")
    p_sweep.add_argument("--seeds", default=None, help="comma-separated seeds (default 0..4)")
    p_sweep.add_argument("--no-figures", action="store_true")
    p_sweep.set_defaults(func=cmd_sweep)

    p_abl = sub.add_parser("ablate", help="naive ensemble vs EAT without/with the data split")
    common(p_abl)
    p_abl.add_argument("--models", type=int, default=None, help="ensemble size override")
    p_abl.add_argument("--seeds", default=None, help="comma-separated seeds (default 0..4)")
    p_abl.add_argument("--no-figures", action="store_true")
    p_abl.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except DmlrobError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
