"""Training procedures: the plain metric baseline, adapted single-model
defenses (adversarial training, mix-up, interpolated adversarial training,
clean/adversarial trade-off regularization), the naive ensemble, and
ensemble adversarial training (EAT).

EAT trains N models, each on N-1 of N random parts of the training set,
and mixes the clean metric loss with a metric loss on examples generated
by the summed-gradient ensemble attack: total = beta * clean +
(1 - beta) * adversarial. Members update sequentially within an epoch;
attack gradients are always taken against the current state of every
member.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import json
import os

import numpy as np

from .attacks import AttackConfig, pgd_ensemble, pgd_single
from .errors import ConfigError, NumericError, ResampleBatch
from .losses import (
    SQEUCLIDEAN,
    ProxySet,
    TripletConfig,
    embed_divergence,
    init_proxies,
    pal_loss,
    triplet_loss,
)
from .model import ModelSpec, backward, forward, init_model, load_model, save_model
from .optim import LrSchedule, OptimizerState, adamw_step, lr_at
from .rng import Rng, sample_beta

SINGLE_MODEL_DEFENSES = ("none", "at", "mixup", "iat", "trades")
DEFENSES = SINGLE_MODEL_DEFENSES + ("naive_ensemble", "eat")

CONSISTENCY = "consistency"
RELABEL = "relabel"


@dataclass
class TrainConfig:
    defense: str = "eat"
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-2
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 50
    beta: float = 0.5            # weight of the clean metric term in the EAT mix
    mixup_alpha: float = 1.0     # Beta(alpha, alpha) parameter for mixing ratios
    mixup_mode: str = CONSISTENCY
    lambda_trades: float = 1.0
    n_models: int = 3
    eat_split: bool = True
    loss: str = "pal"            # "pal" | "triplet"
    pal_scale: float = 32.0
    pal_margin: float = 0.1
    triplet_margin: float = 0.5
    model: ModelSpec = field(default_factory=ModelSpec)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=16 / 255, steps=10))

    def __post_init__(self):
        if self.defense not in DEFENSES:
            raise ConfigError(f"unknown defense {self.defense!r}, expected one of {DEFENSES}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.n_models < 1:
            raise ConfigError(f"n_models must be >= 1, got {self.n_models}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss not in ("pal", "triplet"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.mixup_mode not in (CONSISTENCY, RELABEL):
            raise ConfigError(f"unknown mixup_mode {self.mixup_mode!r}")
        if not self.lambda_trades >= 0:
            raise ConfigError(f"lambda_trades must be >= 0, got {self.lambda_trades}")


@dataclass
class Ensemble:
    """Trained member models with their proxy sets and data-part bookkeeping."""

    models: list
    proxies: list               # ProxySet or None per member
    train_classes: np.ndarray
    assignments: list           # training indices used by each member
    parts: list | None = None   # the N disjoint parts when the split is on
    defense: str = "eat"

    def check_split_invariants(self, n_samples: int) -> None:
        if self.parts is None:
            for a in self.assignments:
                if len(a) != n_samples:
                    raise ConfigError("without a split every member must see the full set")
            return
        flat = np.sort(np.concatenate(self.parts))
        if not np.array_equal(flat, np.arange(n_samples)):
            raise ConfigError("parts must partition the training indices")
        sizes = [len(p) for p in self.parts]
        if max(sizes) - min(sizes) > 1:
            raise ConfigError(f"part sizes must differ by at most 1, got {sizes}")
        for i, (part, assigned) in enumerate(zip(self.parts, self.assignments)):
            if np.intersect1d(part, assigned).size:
                raise ConfigError(f"member {i} must not train on its own held-out part")
            if len(part) + len(assigned) != n_samples:
                raise ConfigError(f"member {i} assignment must cover the other parts exactly")


@dataclass
class TrainResult:
    ensemble: Ensemble
    history: list  # one dict per (epoch, member) with mean losses


def split_dataset(indices, n_parts: int, rng: Rng):
    """Randomly partition indices into n_parts chunks of near-equal size."""
    idx = np.asarray(indices)
    if idx.size == 0:
        raise ConfigError("cannot split an empty index list")
    if n_parts < 1:
        raise ConfigError(f"n_parts must be >= 1, got {n_parts}")
    if n_parts > idx.size:
        raise ConfigError(f"cannot split {idx.size} samples into {n_parts} parts")
    shuffled = idx[rng.permutation(idx.size)]
    base = idx.size // n_parts
    extra = idx.size % n_parts
    parts, start = [], 0
    for i in range(n_parts):
        size = base + (1 if i < extra else 0)
        parts.append(np.sort(shuffled[start : start + size]))
        start += size
    return parts


def class_balanced_batches(labels, batch_size: int, rng: Rng):
    """Index batches with >= 2 classes and >= 2 samples per chosen class."""
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ConfigError("batching needs at least 2 classes")
    n_cls = min(len(classes), max(2, batch_size // 4))
    per_cls = max(2, batch_size // n_cls)
    pools = [np.where(y == c)[0] for c in classes]
    n_batches = max(1, int(np.ceil(y.size / (n_cls * per_cls))))
    batches = []
    for _ in range(n_batches):
        chosen = rng.choice(len(classes), size=n_cls, replace=False)
        picks = []
        for ci in chosen:
            pool = pools[int(ci)]
            take = min(per_cls, pool.size)
            picks.append(pool[rng.choice(pool.size, size=take, replace=False)])
        batches.append(np.concatenate(picks))
    return batches


# ---------------------------------------------------------------------------
# per-batch losses


@dataclass
class BatchMaterials:
    """Everything a defense loss consumes besides the live parameters.

    Frozen here so that the loss is a pure function of the parameters:
    adversarial inputs, mixing ratios, and frozen embedding targets do not
    move when the parameters are perturbed (which is also what makes the
    finite-difference checks of the training gradients valid).
    """

    x: np.ndarray
    labels: np.ndarray
    x_adv: np.ndarray | None = None
    lam: float | None = None
    perm: np.ndarray | None = None
    mix_x: np.ndarray | None = None
    mix_adv_x: np.ndarray | None = None
    mix_target: np.ndarray | None = None
    mix_labels: np.ndarray | None = None
    ref_embed: np.ndarray | None = None


def _metric_term(model, proxy_set, x, y, cfg: TrainConfig):
    embeds, trace = forward(model, x)
    if cfg.loss == "pal":
        loss, d_embeds, d_prox = pal_loss(embeds, y, proxy_set)
    else:
        loss, d_embeds = triplet_loss(embeds, y, TripletConfig(cfg.triplet_margin))
        d_prox = None
    d_params, _ = backward(model, trace, d_embeds)
    return loss, d_params, d_prox


def _divergence_term(model, x, target, kind):
    embeds, trace = forward(model, x)
    loss, d_embeds = embed_divergence(embeds, target, kind)
    d_params, _ = backward(model, trace, d_embeds)
    return loss, d_params


def _accumulate(total: dict, grads: dict, weight: float) -> None:
    for key, g in grads.items():
        if key in total:
            total[key] += weight * g
        else:
            total[key] = weight * g


def _require_two_classes(y) -> None:
    if len(np.unique(y)) < 2:
        raise ResampleBatch("metric losses need at least 2 classes in the batch")


def prepare_batch(kind, model, proxy_set, x, y, cfg: TrainConfig, rng: Rng) -> BatchMaterials:
    """Stage the attack outputs and frozen targets a defense loss needs."""
    _require_two_classes(y)
    mats = BatchMaterials(x=np.asarray(x, dtype=float), labels=np.asarray(y, dtype=int))
    if kind == "none":
        return mats
    if kind == "at":
        mats.x_adv = pgd_single(model, mats.x, cfg.attack, rng.split("attack")).x_adv
        return mats
    if kind in ("mixup", "iat"):
        mats.lam = sample_beta(rng.split("lam"), cfg.mixup_alpha)
        mats.perm = rng.split("perm").permutation(len(mats.x))
        mats.mix_x = mats.lam * mats.x + (1.0 - mats.lam) * mats.x[mats.perm]
        embeds, _ = forward(model, mats.x)
        mats.mix_target = mats.lam * embeds + (1.0 - mats.lam) * embeds[mats.perm]
        mats.mix_labels = mats.labels if mats.lam >= 0.5 else mats.labels[mats.perm]
        if kind == "iat":
            adv = pgd_single(model, mats.x, cfg.attack, rng.split("attack")).x_adv
            mats.mix_adv_x = mats.lam * adv + (1.0 - mats.lam) * adv[mats.perm]
        return mats
    if kind == "trades":
        mats.ref_embed = forward(model, mats.x)[0]
        mats.x_adv = pgd_single(model, mats.x, cfg.attack, rng.split("attack")).x_adv
        return mats
    raise ConfigError(f"unknown defense kind {kind!r}")


def defense_loss_on(kind, model, proxy_set, mats: BatchMaterials, cfg: TrainConfig):
    """Loss and exact gradients of one defense on frozen batch materials.

    Returns (loss, d_params, d_proxies); d_proxies is None for the triplet
    loss. The materials (adversarial inputs, mixed targets) are constants.
    """
    d_params: dict = {}
    d_prox = None

    def add_metric(x, y, weight=1.0):
        nonlocal d_prox
        loss, g_params, g_prox = _metric_term(model, proxy_set, x, y, cfg)
        _accumulate(d_params, g_params, weight)
        if g_prox is not None:
            d_prox = weight * g_prox if d_prox is None else d_prox + weight * g_prox
        return weight * loss

    if kind == "none":
        return add_metric(mats.x, mats.labels), d_params, d_prox
    if kind == "at":
        return add_metric(mats.x_adv, mats.labels), d_params, d_prox
    if kind == "mixup":
        if cfg.mixup_mode == RELABEL:
            return add_metric(mats.mix_x, mats.mix_labels), d_params, d_prox
        loss = add_metric(mats.x, mats.labels)
        mix_loss, g = _divergence_term(model, mats.mix_x, mats.mix_target, SQEUCLIDEAN)
        _accumulate(d_params, g, 1.0)
        return loss + mix_loss, d_params, d_prox
    if kind == "iat":
        if cfg.mixup_mode == RELABEL:
            loss = add_metric(mats.mix_x, mats.mix_labels)
            loss += add_metric(mats.mix_adv_x, mats.mix_labels)
            return loss, d_params, d_prox
        loss = add_metric(mats.x, mats.labels)
        for mixed in (mats.mix_x, mats.mix_adv_x):
            part, g = _divergence_term(model, mixed, mats.mix_target, SQEUCLIDEAN)
            _accumulate(d_params, g, 1.0)
            loss += part
        return loss, d_params, d_prox
    if kind == "trades":
        loss = add_metric(mats.x, mats.labels)
        if cfg.lambda_trades != 0.0:
            reg, g = _divergence_term(model, mats.x_adv, mats.ref_embed, cfg.attack.divergence)
            _accumulate(d_params, g, cfg.lambda_trades)
            loss += cfg.lambda_trades * reg
        return loss, d_params, d_prox
    raise ConfigError(f"unknown defense kind {kind!r}")


def defense_loss(kind, x, y, models, proxy_set, cfg: TrainConfig, rng: Rng):
    """Training loss of one defense on a batch (materials prepared inside).

    For the ensemble defense `models` holds every member and the loss is
    evaluated for `models[0]`; single-model kinds take a one-element list.
    """
    if kind == "eat":
        loss, d_params, d_prox, _, _ = eat_batch_loss(models, 0, proxy_set, x, y, cfg, rng)
        return loss, d_params, d_prox
    return defense_loss_on(
        kind, models[0], proxy_set, prepare_batch(kind, models[0], proxy_set, x, y, cfg, rng), cfg
    )


def combine_mixed_losses(beta: float, clean: float, adversarial: float) -> float:
    """beta-weighted mix of the clean and adversarial loss terms."""
    return beta * clean + (1.0 - beta) * adversarial


def eat_batch_loss(models, member: int, proxy_set, x, y, cfg: TrainConfig, rng: Rng):
    """The EAT objective for one member on one batch.

    The clean term is the member's metric loss; the adversarial term is the
    member's metric loss on a batch perturbed by the summed-gradient attack
    against all current members. Terms with zero weight are skipped
    entirely so beta = 0 and beta = 1 degenerate bit-exactly.
    """
    _require_two_classes(y)
    beta = cfg.beta
    model = models[member]
    loss_clean = 0.0
    loss_adv = 0.0
    d_params: dict = {}
    d_prox = None

    def add(loss, g_params, g_prox, weight):
        nonlocal d_prox
        _accumulate(d_params, g_params, weight)
        if g_prox is not None:
            d_prox = weight * g_prox if d_prox is None else d_prox + weight * g_prox
        return loss

    if beta != 0.0:
        loss_clean = add(*(_metric_term(model, proxy_set, x, y, cfg)), weight=beta)
    if beta != 1.0:
        adv = pgd_ensemble(x, models, cfg.attack, rng.split("attack"))
        loss_adv = add(*(_metric_term(model, proxy_set, adv.x_adv, y, cfg)), weight=1.0 - beta)
    total = combine_mixed_losses(beta, loss_clean, loss_adv)
    return total, d_params, d_prox, loss_clean, loss_adv


# ---------------------------------------------------------------------------
# training loops


def train(train_ds, cfg: TrainConfig, rng: Rng) -> TrainResult:
    """Train an ensemble (size 1 for the single-model defenses)."""
    train_ds.validate()
    if len(train_ds.classes) < 2:
        raise ConfigError("training needs at least 2 classes")
    if cfg.defense == "naive_ensemble":
        members, histories = [], []
        single = replace(cfg, defense="none", n_models=1, eat_split=False)
        for i in range(cfg.n_models):
            res = _train_engine(train_ds, single, rng.split(f"member:{i}"), kind="none", n_models=1)
            members.append(res)
            for row in res.history:
                row = dict(row)
                row["model"] = i
                histories.append(row)
        n = len(train_ds.labels)
        ensemble = Ensemble(
            models=[r.ensemble.models[0] for r in members],
            proxies=[r.ensemble.proxies[0] for r in members],
            train_classes=train_ds.classes.copy(),
            assignments=[np.arange(n) for _ in members],
            parts=None,
            defense="naive_ensemble",
        )
        return TrainResult(ensemble=ensemble, history=histories)
    if cfg.defense == "eat":
        return _train_engine(train_ds, cfg, rng, kind="eat", n_models=cfg.n_models)
    return _train_engine(train_ds, cfg, rng, kind=cfg.defense, n_models=1)


def _train_engine(train_ds, cfg: TrainConfig, rng: Rng, kind: str, n_models: int) -> TrainResult:
    n = len(train_ds.labels)
    dim = train_ds.x.shape[1]
    if kind == "eat" and cfg.eat_split:
        parts = split_dataset(np.arange(n), n_models, rng.split("partition"))
        assignments = [
            np.sort(np.concatenate([parts[j] for j in range(n_models) if j != i]))
            for i in range(n_models)
        ]
    else:
        parts = None
        assignments = [np.arange(n) for _ in range(n_models)]

    models, proxies, opt_states = [], [], []
    for i in range(n_models):
        models.append(init_model(cfg.model.layer_sizes(dim), cfg.model.normalize, rng.split(f"init:{i}")))
        if cfg.loss == "pal":
            proxies.append(
                init_proxies(
                    train_ds.classes, cfg.model.embedding_dim, rng.split(f"proxies:{i}"),
                    scale=cfg.pal_scale, margin=cfg.pal_margin,
                )
            )
        else:
            proxies.append(None)
        opt_states.append(
            OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        )

    schedule = LrSchedule(cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every)
    history = []
    for ep in range(cfg.epochs):
        lr = lr_at(schedule, ep)
        for i in range(n_models):
            opt_states[i].lr = lr
            sub = assignments[i]
            batch_rng = rng.split(f"batches:model={i}:epoch={ep}")
            batches = class_balanced_batches(train_ds.labels[sub], cfg.batch_size, batch_rng)
            tot, tot_clean, tot_adv = [], [], []
            for b, rel in enumerate(batches):
                idx = sub[rel]
                x_b, y_b = train_ds.x[idx], train_ds.labels[idx]
                aux = rng.split(f"aux:model={i}:epoch={ep}:batch={b}")
                if kind == "eat":
                    loss, d_params, d_prox, l_clean, l_adv = eat_batch_loss(
                        models, i, proxies[i], x_b, y_b, cfg, aux
                    )
                    tot_clean.append(l_clean)
                    tot_adv.append(l_adv)
                else:
                    mats = prepare_batch(kind, models[i], proxies[i], x_b, y_b, cfg, aux)
                    loss, d_params, d_prox = defense_loss_on(kind, models[i], proxies[i], mats, cfg)
                if not np.isfinite(loss):
                    raise NumericError(
                        f"non-finite training loss at epoch {ep}, model {i}, batch {b}"
                    )
                params = models[i].params()
                grads = dict(d_params)
                if proxies[i] is not None:
                    params["proxies"] = proxies[i].proxies
                    grads["proxies"] = (
                        d_prox if d_prox is not None else np.zeros_like(proxies[i].proxies)
                    )
                adamw_step(params, grads, opt_states[i])
                tot.append(loss)
            row = {"epoch": ep, "model": i, "lr": lr, "loss": float(np.mean(tot))}
            if kind == "eat":
                row["loss_clean"] = float(np.mean(tot_clean))
                row["loss_adv"] = float(np.mean(tot_adv))
            history.append(row)

    ensemble = Ensemble(
        models=models,
        proxies=proxies,
        train_classes=train_ds.classes.copy(),
        assignments=assignments,
        parts=parts,
        defense=cfg.defense,
    )
    ensemble.check_split_invariants(n)
    return TrainResult(ensemble=ensemble, history=history)


# ---------------------------------------------------------------------------
# checkpoints


def save_ensemble(ensemble: Ensemble, dirpath, extra: dict | None = None) -> None:
    """Write a manifest plus one model file and one proxy file per member."""
    os.makedirs(dirpath, exist_ok=True)
    manifest = {
        "defense": ensemble.defense,
        "n_models": len(ensemble.models),
        "train_classes": [int(c) for c in ensemble.train_classes],
        "assignments": [a.tolist() for a in ensemble.assignments],
        "parts": None if ensemble.parts is None else [p.tolist() for p in ensemble.parts],
        "models": [],
        "proxies": [],
    }
    if extra:
        manifest.update(extra)
    for i, (model, prox) in enumerate(zip(ensemble.models, ensemble.proxies)):
        model_file = f"model_{i}.json"
        save_model(model, os.path.join(dirpath, model_file))
        manifest["models"].append(model_file)
        if prox is None:
            manifest["proxies"].append(None)
        else:
            prox_file = f"proxies_{i}.json"
            with open(os.path.join(dirpath, prox_file), "w") as fh:
                json.dump(
                    {
                        "class_ids": prox.class_ids.tolist(),
                        "scale": prox.scale,
                        "margin": prox.margin,
                        "proxies": prox.proxies.tolist(),
                    },
                    fh,
                    sort_keys=True,
                )
            manifest["proxies"].append(prox_file)
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def load_ensemble(dirpath) -> tuple:
    """Read a checkpoint directory; returns (ensemble, manifest)."""
    try:
        with open(os.path.join(dirpath, "manifest.json")) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint manifest not found in {dirpath}") from None
    models = [load_model(os.path.join(dirpath, name)) for name in manifest["models"]]
    proxies = []
    for name in manifest["proxies"]:
        if name is None:
            proxies.append(None)
            continue
        with open(os.path.join(dirpath, name)) as fh:
            doc = json.load(fh)
        proxies.append(
            ProxySet(
                proxies=np.array(doc["proxies"], dtype=float),
                class_ids=np.array(doc["class_ids"], dtype=int),
                scale=doc["scale"],
                margin=doc["margin"],
            )
        )
    ensemble = Ensemble(
        models=models,
        proxies=proxies,
        train_classes=np.array(manifest["train_classes"], dtype=int),
        assignments=[np.array(a, dtype=int) for a in manifest["assignments"]],
        parts=None
        if manifest["parts"] is None
        else [np.array(p, dtype=int) for p in manifest["parts"]],
        defense=manifest["defense"],
    )
    return ensemble, manifest
