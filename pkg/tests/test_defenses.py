import numpy as np
import pytest

from dmlrob.attacks import AttackConfig, pgd_ensemble
from dmlrob.config import ExperimentConfig, build_datasets
from dmlrob.defenses import (
    BatchMaterials,
    TrainConfig,
    class_balanced_batches,
    combine_mixed_losses,
    defense_loss,
    defense_loss_on,
    eat_batch_loss,
    load_ensemble,
    prepare_batch,
    save_ensemble,
    split_dataset,
    train,
)
from dmlrob.errors import ConfigError, ResampleBatch
from dmlrob.gradcheck import finite_diff_grad, max_rel_error
from dmlrob.losses import init_proxies
from dmlrob.model import ModelSpec, init_model
from dmlrob.rng import Rng


def _models_equal(a, b):
    return all(
        np.array_equal(la.weight, lb.weight) and np.array_equal(la.bias, lb.bias)
        for la, lb in zip(a.layers, b.layers)
    )


def _small_cfg(**kw):
    base = dict(
        defense="none",
        epochs=2,
        batch_size=8,
        model=ModelSpec(hidden=(16,), embedding_dim=4),
        attack=AttackConfig(epsilon=0.05, steps=3),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_data():
    cfg = ExperimentConfig(seed=21)
    cfg.dataset = type(cfg.dataset)(n_classes=6, per_class=6, dim=5, spread=0.03, train_fraction=0.5)
    return build_datasets(cfg)


# ---------------------------------------------------------------------- split


def test_split_single_part():
    parts = split_dataset(np.arange(7), 1, Rng(0))
    assert len(parts) == 1 and np.array_equal(parts[0], np.arange(7))


def test_split_even():
    parts = split_dataset(np.arange(9), 3, Rng(1))
    assert sorted(len(p) for p in parts) == [3, 3, 3]
    assert np.array_equal(np.sort(np.concatenate(parts)), np.arange(9))
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.intersect1d(parts[i], parts[j]).size == 0


def test_split_remainder():
    parts = split_dataset(np.arange(10), 3, Rng(2))
    assert sorted(len(p) for p in parts) == [3, 3, 4]


def test_split_too_many_parts():
    with pytest.raises(ConfigError):
        split_dataset(np.arange(2), 3, Rng(0))


def test_batches_class_balanced():
    labels = np.repeat(np.arange(4), 10)
    batches = class_balanced_batches(labels, 12, Rng(3))
    for batch in batches:
        batch_labels = labels[batch]
        classes, counts = np.unique(batch_labels, return_counts=True)
        assert len(classes) >= 2
        assert counts.min() >= 2


def test_batches_single_class_rejected():
    with pytest.raises(ConfigError):
        class_balanced_batches(np.zeros(10, dtype=int), 8, Rng(0))


# ------------------------------------------------------------- defense losses


def _setup_batch(seed=31):
    rng = Rng(seed)
    model = init_model([5, 12, 4], True, rng.split("model"))
    x = rng.split("x").uniform(0.1, 0.9, size=(8, 5))
    y = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    proxies = init_proxies(y, 4, rng.split("prox"))
    return model, proxies, x, y


def test_defense_none_equals_bare_metric_loss():
    model, proxies, x, y = _setup_batch()
    cfg = _small_cfg()
    from dmlrob.losses import pal_loss
    from dmlrob.model import forward

    loss, _, _ = defense_loss("none", x, y, [model], proxies, cfg, Rng(0))
    bare, _, _ = pal_loss(forward(model, x)[0], y, proxies)
    assert loss == bare


def test_trades_lambda_zero_equals_none():
    model, proxies, x, y = _setup_batch()
    cfg = _small_cfg(defense="trades", lambda_trades=0.0)
    a, ga, _ = defense_loss("trades", x, y, [model], proxies, cfg, Rng(1).split("aux"))
    b, gb, _ = defense_loss("none", x, y, [model], proxies, cfg, Rng(1).split("aux"))
    assert a == b
    assert all(np.array_equal(ga[k], gb[k]) for k in ga)


def test_at_zero_epsilon_equals_none():
    model, proxies, x, y = _setup_batch()
    cfg = _small_cfg(defense="at", attack=AttackConfig(epsilon=0.0, steps=5))
    a, ga, _ = defense_loss("at", x, y, [model], proxies, cfg, Rng(1).split("aux"))
    b, gb, _ = defense_loss("none", x, y, [model], proxies, cfg, Rng(1).split("aux"))
    assert a == b
    assert all(np.array_equal(ga[k], gb[k]) for k in ga)


def test_single_class_batch_signals_resample():
    model, proxies, x, _ = _setup_batch()
    cfg = _small_cfg()
    with pytest.raises(ResampleBatch):
        defense_loss("none", x, np.zeros(8, dtype=int), [model], proxies, cfg, Rng(0))


def test_eat_interpolation_symmetry():
    # the beta mix evaluated with swapped operands and swapped weight is identical
    for beta in (0.0, 0.125, 0.25, 0.5, 0.75, 1.0):
        a, b = 1.2345678, 0.8765432
        assert combine_mixed_losses(beta, a, b) == combine_mixed_losses(1.0 - beta, b, a)


def _param_grad_check(model, proxies, cfg, kind, mats, d_params, d_prox):
    def loss_of():
        return defense_loss_on(kind, model, proxies, mats, cfg)[0]

    for k, layer in enumerate(model.layers):
        for field in ("weight", "bias"):
            orig = getattr(layer, field)

            def f(p):
                setattr(layer, field, p)
                try:
                    return loss_of()
                finally:
                    setattr(layer, field, orig)

            num = finite_diff_grad(f, orig, h=1e-5)
            name = f"layer{k}.{field}"
            assert max_rel_error(d_params[name], num, floor=1e-7) <= 1e-4, (kind, name)
    if d_prox is not None:
        orig = proxies.proxies

        def fp(p):
            proxies.proxies = p
            try:
                return loss_of()
            finally:
                proxies.proxies = orig

        num = finite_diff_grad(fp, orig, h=1e-5)
        assert max_rel_error(d_prox, num, floor=1e-7) <= 1e-4, (kind, "proxies")


@pytest.mark.parametrize("kind", ["none", "at", "mixup", "iat", "trades"])
def test_defense_gradients_match_finite_differences(kind):
    model, proxies, x, y = _setup_batch(seed=40)
    cfg = _small_cfg(defense=kind if kind != "none" else "none")
    mats = prepare_batch(kind, model, proxies, x, y, cfg, Rng(77).split("aux"))
    _, d_params, d_prox = defense_loss_on(kind, model, proxies, mats, cfg)
    _param_grad_check(model, proxies, cfg, kind, mats, d_params, d_prox)


def test_mixup_relabel_mode_gradients():
    model, proxies, x, y = _setup_batch(seed=41)
    cfg = _small_cfg(defense="mixup", mixup_mode="relabel")
    mats = prepare_batch("mixup", model, proxies, x, y, cfg, Rng(78).split("aux"))
    _, d_params, d_prox = defense_loss_on("mixup", model, proxies, mats, cfg)
    _param_grad_check(model, proxies, cfg, "mixup", mats, d_params, d_prox)


def test_eat_combined_gradient_matches_finite_differences():
    model, proxies, x, y = _setup_batch(seed=42)
    cfg = _small_cfg(defense="eat", beta=0.5, n_models=1, eat_split=False)
    adv = pgd_ensemble(x, [model], cfg.attack).x_adv

    # frozen-materials version of the eat objective
    from dmlrob.losses import pal_loss
    from dmlrob.model import forward

    def eat_loss():
        clean, _, _ = pal_loss(forward(model, x)[0], y, proxies)
        advl, _, _ = pal_loss(forward(model, adv)[0], y, proxies)
        return combine_mixed_losses(cfg.beta, clean, advl)

    mats_clean = BatchMaterials(x=x, labels=y)
    mats_adv = BatchMaterials(x=adv, labels=y)
    _, g_clean, p_clean = defense_loss_on("none", model, proxies, mats_clean, cfg)
    _, g_adv, p_adv = defense_loss_on("none", model, proxies, mats_adv, cfg)
    for k, layer in enumerate(model.layers):
        for field in ("weight", "bias"):
            name = f"layer{k}.{field}"
            combined = cfg.beta * g_clean[name] + (1 - cfg.beta) * g_adv[name]
            orig = getattr(layer, field)

            def f(p):
                setattr(layer, field, p)
                try:
                    return eat_loss()
                finally:
                    setattr(layer, field, orig)

            num = finite_diff_grad(f, orig, h=1e-5)
            assert max_rel_error(combined, num, floor=1e-7) <= 1e-4, name


# ------------------------------------------------------------------- training


def test_train_deterministic(small_data):
    train_ds, _ = small_data
    cfg = _small_cfg(defense="none", epochs=3)
    a = train(train_ds, cfg, Rng(9).split("train"))
    b = train(train_ds, cfg, Rng(9).split("train"))
    assert _models_equal(a.ensemble.models[0], b.ensemble.models[0])
    assert np.array_equal(a.ensemble.proxies[0].proxies, b.ensemble.proxies[0].proxies)


def test_eat_split_invariants(small_data):
    train_ds, _ = small_data
    cfg = _small_cfg(defense="eat", n_models=3, eat_split=True, epochs=1)
    res = train(train_ds, cfg, Rng(10).split("train"))
    ens = res.ensemble
    n = len(train_ds.labels)
    ens.check_split_invariants(n)
    sizes = [len(p) for p in ens.parts]
    assert max(sizes) - min(sizes) <= 1
    for part, assigned in zip(ens.parts, ens.assignments):
        assert np.intersect1d(part, assigned).size == 0
        assert len(part) + len(assigned) == n


def test_eat_no_split_sees_full_set(small_data):
    train_ds, _ = small_data
    cfg = _small_cfg(defense="eat", n_models=2, eat_split=False, epochs=1)
    res = train(train_ds, cfg, Rng(11).split("train"))
    assert res.ensemble.parts is None
    for assigned in res.ensemble.assignments:
        assert len(assigned) == len(train_ds.labels)


def test_eat_beta_one_ignores_attack(small_data):
    # with zero adversarial weight the attack budget cannot matter
    train_ds, _ = small_data
    big = _small_cfg(defense="eat", beta=1.0, n_models=2, epochs=2,
                     attack=AttackConfig(epsilon=16 / 255, steps=5))
    none = _small_cfg(defense="eat", beta=1.0, n_models=2, epochs=2,
                      attack=AttackConfig(epsilon=0.0, steps=5))
    a = train(train_ds, big, Rng(12).split("train"))
    b = train(train_ds, none, Rng(12).split("train"))
    for ma, mb in zip(a.ensemble.models, b.ensemble.models):
        assert _models_equal(ma, mb)


def test_eat_single_model_beta_zero_is_adversarial_training(small_data):
    train_ds, _ = small_data
    eat = _small_cfg(defense="eat", beta=0.0, n_models=1, eat_split=False, epochs=2)
    at = _small_cfg(defense="at", epochs=2)
    a = train(train_ds, eat, Rng(13).split("train"))
    b = train(train_ds, at, Rng(13).split("train"))
    assert _models_equal(a.ensemble.models[0], b.ensemble.models[0])
    assert np.array_equal(a.ensemble.proxies[0].proxies, b.ensemble.proxies[0].proxies)


def test_eat_single_model_beta_one_is_baseline(small_data):
    train_ds, _ = small_data
    eat = _small_cfg(defense="eat", beta=1.0, n_models=1, eat_split=False, epochs=2)
    none = _small_cfg(defense="none", epochs=2)
    a = train(train_ds, eat, Rng(14).split("train"))
    b = train(train_ds, none, Rng(14).split("train"))
    assert _models_equal(a.ensemble.models[0], b.ensemble.models[0])


def test_naive_ensemble_members_independent(small_data):
    train_ds, _ = small_data
    cfg = _small_cfg(defense="naive_ensemble", n_models=3, epochs=1)
    res = train(train_ds, cfg, Rng(15).split("train"))
    assert len(res.ensemble.models) == 3
    assert not _models_equal(res.ensemble.models[0], res.ensemble.models[1])
    for assigned in res.ensemble.assignments:
        assert len(assigned) == len(train_ds.labels)


def test_training_loss_decreases(small_data):
    train_ds, _ = small_data
    cfg = _small_cfg(defense="none", epochs=50, batch_size=12)
    res = train(train_ds, cfg, Rng(16).split("train"))
    first = res.history[0]["loss"]
    last = res.history[-1]["loss"]
    assert np.isfinite(first) and np.isfinite(last)
    assert last < first


def test_triplet_loss_training_runs(small_data):
    train_ds, _ = small_data
    cfg = _small_cfg(defense="none", epochs=2, loss="triplet",
                     model=ModelSpec(hidden=(16,), embedding_dim=4, normalize=False))
    res = train(train_ds, cfg, Rng(17).split("train"))
    assert res.ensemble.proxies[0] is None
    assert np.isfinite(res.history[-1]["loss"])


def test_checkpoint_roundtrip(small_data, tmp_path):
    train_ds, _ = small_data
    cfg = _small_cfg(defense="eat", n_models=2, epochs=1)
    res = train(train_ds, cfg, Rng(18).split("train"))
    save_ensemble(res.ensemble, tmp_path / "ckpt", extra={"seed": 18})
    back, manifest = load_ensemble(tmp_path / "ckpt")
    assert manifest["seed"] == 18
    assert manifest["n_models"] == 2
    for ma, mb in zip(res.ensemble.models, back.models):
        assert _models_equal(ma, mb)
    for pa, pb in zip(res.ensemble.proxies, back.proxies):
        assert np.array_equal(pa.proxies, pb.proxies)
    assert np.array_equal(res.ensemble.train_classes, back.train_classes)
    for a, b in zip(res.ensemble.parts, back.parts):
        assert np.array_equal(a, b)
