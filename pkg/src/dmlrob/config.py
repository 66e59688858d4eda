"""Experiment configuration: strict JSON parsing and full-echo serialization.

Unknown keys are rejected rather than ignored (a silently misspelled field
is the main reproducibility hazard), and every resolved value, defaults
included, is echoed into the run outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .attacks import AttackConfig
from .data import class_disjoint_split, gen_synthetic, load_csv
from .defenses import TrainConfig
from .errors import ConfigError
from .model import ModelSpec
from .rng import Rng


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    n_classes: int = 16
    per_class: int = 40
    dim: int = 20
    spread: float = 0.03
    train_fraction: float = 0.5
    train_path: str | None = None
    test_path: str | None = None


@dataclass(frozen=True)
class EvalSpec:
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=8 / 255, steps=10))
    ks: tuple = (1, 2, 4, 8)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/exp"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalSpec = field(default_factory=EvalSpec)

    def to_dict(self) -> dict:
        """Full echo: every resolved field, defaults included."""
        ds = self.dataset
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "dataset": {
                "kind": ds.kind,
                "n_classes": ds.n_classes,
                "per_class": ds.per_class,
                "dim": ds.dim,
                "spread": ds.spread,
                "train_fraction": ds.train_fraction,
                "train_path": ds.train_path,
                "test_path": ds.test_path,
            },
            "model": {
                "hidden": list(self.train.model.hidden),
                "embedding_dim": self.train.model.embedding_dim,
                "normalize": self.train.model.normalize,
            },
            "train": {
                "defense": self.train.defense,
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "lr": self.train.lr,
                "weight_decay": self.train.weight_decay,
                "lr_decay_factor": self.train.lr_decay_factor,
                "lr_decay_every": self.train.lr_decay_every,
                "beta": self.train.beta,
                "mixup_alpha": self.train.mixup_alpha,
                "mixup_mode": self.train.mixup_mode,
                "lambda_trades": self.train.lambda_trades,
                "n_models": self.train.n_models,
                "eat_split": self.train.eat_split,
                "loss": self.train.loss,
                "pal_scale": self.train.pal_scale,
                "pal_margin": self.train.pal_margin,
                "triplet_margin": self.train.triplet_margin,
                "attack": self.train.attack.to_dict(),
            },
            "eval": {
                "attack": self.evaluation.attack.to_dict(),
                "ks": list(self.evaluation.ks),
            },
        }


def _take(doc: dict, known: dict, where: str) -> dict:
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    out = dict(known)
    out.update(doc)
    return out


def _parse_attack(doc: dict, where: str, default: AttackConfig) -> AttackConfig:
    fields = _take(doc, default.to_dict(), where)
    return AttackConfig(**fields)


def config_from_dict(doc: dict) -> ExperimentConfig:
    base = ExperimentConfig()
    top = _take(doc, {"seed": base.seed, "out_dir": base.out_dir, "dataset": {}, "model": {}, "train": {}, "eval": {}}, "config")

    ds_default = DatasetSpec()
    ds_fields = _take(
        top["dataset"],
        {
            "kind": ds_default.kind,
            "n_classes": ds_default.n_classes,
            "per_class": ds_default.per_class,
            "dim": ds_default.dim,
            "spread": ds_default.spread,
            "train_fraction": ds_default.train_fraction,
            "train_path": ds_default.train_path,
            "test_path": ds_default.test_path,
        },
        "config.dataset",
    )
    if ds_fields["kind"] not in ("synthetic", "csv"):
        raise ConfigError(f"dataset.kind must be 'synthetic' or 'csv', got {ds_fields['kind']!r}")
    if ds_fields["kind"] == "csv" and not (ds_fields["train_path"] and ds_fields["test_path"]):
        raise ConfigError("csv datasets need both dataset.train_path and dataset.test_path")
    dataset = DatasetSpec(**ds_fields)

    model_default = ModelSpec()
    model_fields = _take(
        top["model"],
        {
            "hidden": list(model_default.hidden),
            "embedding_dim": model_default.embedding_dim,
            "normalize": model_default.normalize,
        },
        "config.model",
    )
    model = ModelSpec(
        hidden=tuple(int(h) for h in model_fields["hidden"]),
        embedding_dim=int(model_fields["embedding_dim"]),
        normalize=bool(model_fields["normalize"]),
    )

    train_default = TrainConfig()
    train_doc = dict(top["train"])
    train_attack = _parse_attack(train_doc.pop("attack", {}), "config.train.attack", train_default.attack)
    train_fields = _take(
        train_doc,
        {
            "defense": train_default.defense,
            "epochs": train_default.epochs,
            "batch_size": train_default.batch_size,
            "lr": train_default.lr,
            "weight_decay": train_default.weight_decay,
            "lr_decay_factor": train_default.lr_decay_factor,
            "lr_decay_every": train_default.lr_decay_every,
            "beta": train_default.beta,
            "mixup_alpha": train_default.mixup_alpha,
            "mixup_mode": train_default.mixup_mode,
            "lambda_trades": train_default.lambda_trades,
            "n_models": train_default.n_models,
            "eat_split": train_default.eat_split,
            "loss": train_default.loss,
            "pal_scale": train_default.pal_scale,
            "pal_margin": train_default.pal_margin,
            "triplet_margin": train_default.triplet_margin,
        },
        "config.train",
    )
    train = TrainConfig(model=model, attack=train_attack, **train_fields)

    eval_default = EvalSpec()
    eval_doc = dict(top["eval"])
    eval_attack = _parse_attack(eval_doc.pop("attack", {}), "config.eval.attack", eval_default.attack)
    eval_fields = _take(eval_doc, {"ks": list(eval_default.ks)}, "config.eval")
    ks = tuple(int(k) for k in eval_fields["ks"])
    if not ks or any(k < 1 for k in ks):
        raise ConfigError(f"eval.ks must be positive integers, got {list(ks)}")
    evaluation = EvalSpec(attack=eval_attack, ks=ks)

    return ExperimentConfig(
        seed=int(top["seed"]), out_dir=str(top["out_dir"]),
        dataset=dataset, train=train, evaluation=evaluation,
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(doc)


def build_datasets(cfg: ExperimentConfig):
    """Materialize the (train, test) pair an experiment runs on."""
    spec = cfg.dataset
    if spec.kind == "csv":
        return load_csv(spec.train_path, role="train"), load_csv(spec.test_path, role="test")
    rng = Rng(cfg.seed).split("data")
    full = gen_synthetic(spec.n_classes, spec.per_class, spec.dim, spec.spread, rng)
    return class_disjoint_split(full, spec.train_fraction, rng.split("class-split"))


def with_overrides(cfg: ExperimentConfig, *, seed=None, out_dir=None, defense=None,
                   n_models=None, eps=None, iters=None) -> ExperimentConfig:
    """Apply CLI flag overrides, returning a new config."""
    train = cfg.train
    if defense is not None:
        train = replace(train, defense=defense)
    if n_models is not None:
        train = replace(train, n_models=int(n_models))
    evaluation = cfg.evaluation
    if eps is not None or iters is not None:
        attack = evaluation.attack
        attack = replace(
            attack,
            epsilon=attack.epsilon if eps is None else float(eps),
            steps=attack.steps if iters is None else int(iters),
        )
        evaluation = replace(evaluation, attack=attack)
    return ExperimentConfig(
        seed=cfg.seed if seed is None else int(seed),
        out_dir=cfg.out_dir if out_dir is None else str(out_dir),
        dataset=cfg.dataset,
        train=train,
        evaluation=evaluation,
    )
