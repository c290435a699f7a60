import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossexam import autodiff as ad
from crossexam.autodiff import Tensor
from crossexam.data import TriggerSpec
from crossexam.inversion import (TRACE_KEYS, InversionConfig, InversionDiverged, UnsupportedParadigm, bias_loss,
                                 invert_trigger, output_distribution_loss, regularization_loss, trigger_norm,
                                 uniformity_loss)

FAST = dict(epochs=4, num_probe_samples=60, pilot_epochs=2)


def softmax_oracle(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---- loss terms -------------------------------------------------------------------

def test_target_cross_entropy_limits():
    confident = np.full((4, 5), -30.0)
    confident[:, 2] = 30.0
    assert output_distribution_loss(Tensor(confident), "SL", 2).item() == pytest.approx(0.0, abs=1e-6)
    assert output_distribution_loss(Tensor(np.zeros((4, 5))), "SL", 2).item() == pytest.approx(math.log(5), abs=1e-6)


def test_ssl_term_is_zero_for_matching_embeddings():
    emb = np.random.default_rng(0).normal(size=(6, 8))
    assert output_distribution_loss(Tensor(emb), "SSL", reference=Tensor(emb)).item() == pytest.approx(0.0, abs=1e-6)
    far = output_distribution_loss(Tensor(emb), "SSL", reference=Tensor(-emb)).item()
    assert far == pytest.approx(2.0, abs=1e-6)


def test_unsupported_paradigm():
    with pytest.raises(UnsupportedParadigm):
        output_distribution_loss(Tensor(np.zeros((2, 3))), "AL")
    with pytest.raises(UnsupportedParadigm):
        InversionConfig(paradigm="AL")


def test_bias_loss_examples_and_oracle():
    confident = np.full((3, 5), -40.0)
    confident[np.arange(3), [0, 3, 4]] = 40.0
    assert bias_loss(Tensor(confident)).item() == pytest.approx(0.0, abs=1e-6)
    assert bias_loss(Tensor(np.zeros((3, 5)))).item() == pytest.approx(0.8, abs=1e-6)
    z = np.random.default_rng(1).normal(size=(7, 5))
    assert bias_loss(Tensor(z)).item() == pytest.approx(1 - softmax_oracle(z).max(axis=1).mean(), abs=1e-6)


def test_uniformity_loss_examples_and_oracle():
    # batch-mean uniform: every class predicted once with certainty
    eye = np.eye(5) * 60.0
    assert uniformity_loss(Tensor(eye)).item() == pytest.approx(-1.0, abs=1e-5)
    one = np.full((4, 5), -60.0)
    one[:, 1] = 60.0
    assert uniformity_loss(Tensor(one)).item() == pytest.approx(0.0, abs=1e-5)
    z = np.random.default_rng(2).normal(size=(9, 5))
    p = softmax_oracle(z).mean(axis=0)
    assert uniformity_loss(Tensor(z)).item() == pytest.approx(float(np.sum(p * np.log(p)) / np.log(5)), abs=1e-6)


def test_regularization_examples():
    zero = TriggerSpec(np.zeros((4, 4)), np.zeros((3, 4, 4)), "reversed")
    assert trigger_norm(zero) == 0.0
    mask = np.zeros((8, 8))
    mask[2:6, 2:6] = 1
    assert trigger_norm(TriggerSpec(mask, np.zeros((3, 8, 8)), "patch")) == 16.0
    rng = np.random.default_rng(3)
    m, p = rng.uniform(size=(6, 6)), rng.uniform(size=(3, 6, 6))
    assert regularization_loss(Tensor(m), Tensor(p), "L1").item() == pytest.approx(
        sum(abs(v) for v in m.ravel()) + sum(abs(v) for v in p.ravel()), rel=1e-5)
    assert regularization_loss(Tensor(m), Tensor(p), "L2").item() == pytest.approx(
        math.sqrt(sum(v * v for v in m.ravel())), rel=1e-5)
    with pytest.raises(ValueError):
        regularization_loss(Tensor(m), Tensor(p), "L0")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16), st.integers(2, 9))
def test_output_terms_stay_in_range(seed, k):
    z = Tensor(np.random.default_rng(seed).normal(scale=5, size=(6, k)))
    assert -1e-6 <= bias_loss(z).item() <= 1 - 1 / k + 1e-6
    assert -1 - 1e-6 <= uniformity_loss(z).item() <= 1e-6


# ---- configuration ------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError, match="at least one"):
        InversionConfig(weight_cka=0, weight_od=0)
    for bad in ({"weight_reg": -1}, {"reg_norm": "L3"}, {"metric": "rbf"}, {"epochs": 0},
                {"lr_decay": 1.5}, {"target_search": "grid"}, {"pilot_epochs": 0}):
        with pytest.raises(ValueError):
            InversionConfig(**bad)


def test_learning_rate_schedule():
    cfg = InversionConfig(epochs=9, lr=0.1, lr_decay=0.5)
    assert [cfg.lr_at(e) for e in (1, 3, 4, 6, 7, 9)] == pytest.approx([0.1, 0.1, 0.05, 0.05, 0.025, 0.025])
    assert InversionConfig(lr_decay=1.0).lr_at(200) == pytest.approx(0.1)


# ---- optimisation ------------------------------------------------------------------

def test_identical_models_give_zero_similarity_loss(small_models, small_bundle):
    m = small_models[0]
    res = invert_trigger(m, m, small_bundle.detection_clean, InversionConfig(target=0, **FAST))
    assert max(res.traces["loss_cos"]) == pytest.approx(0.0, abs=1e-5)
    assert res.final_similarity == pytest.approx(1.0, abs=1e-5)


def test_result_contract(small_models, small_bundle):
    res = invert_trigger(*small_models, small_bundle.detection_clean, InversionConfig(**FAST))
    assert res.trigger.mask.min() >= 0 and res.trigger.mask.max() <= 1
    assert res.trigger.pattern.min() >= 0 and res.trigger.pattern.max() <= 1
    assert set(res.traces) == set(TRACE_KEYS)
    assert all(len(v) == res.epochs_run for v in res.traces.values())
    assert res.traces["total"][res.best_epoch - 1] == min(res.traces["total"])
    assert min(res.traces["total"]) <= res.traces["total"][0]
    assert len(res.per_target) == 5 and 0 <= res.target < 5
    assert res.asr_at_target("a") == res.asr["a"][res.target]


def test_total_trace_is_the_weighted_sum(small_models, small_bundle):
    cfg = InversionConfig(target=1, weight_cka=0.7, weight_od=1.3, weight_reg=0.02, **FAST)
    tr = invert_trigger(*small_models, small_bundle.detection_clean, cfg).traces
    for e in range(cfg.epochs):
        expect = (0.7 * tr["loss_cos"][e] + 1.3 * (tr["loss_od"][e] + tr["loss_bias"][e] + tr["loss_uniformity"][e])
                  + 0.02 * tr["loss_reg"][e])
        assert tr["total"][e] == pytest.approx(expect, rel=1e-4)


def test_inversion_is_deterministic(small_models, small_bundle):
    cfg = InversionConfig(**FAST)
    r1 = invert_trigger(*small_models, small_bundle.detection_clean, cfg)
    r2 = invert_trigger(*small_models, small_bundle.detection_clean, cfg)
    assert r1.trigger.mask.tobytes() == r2.trigger.mask.tobytes()
    assert r1.trigger.pattern.tobytes() == r2.trigger.pattern.tobytes()
    assert r1.traces == r2.traces and r1.summary() == r2.summary()


def test_mismatched_models_rejected(small_models, small_bundle):
    from crossexam.nn import ModelSpec, init_params, Model
    spec = ModelSpec((3, 8, 8), [{"kind": "flatten", "probe": "layer4"}, {"kind": "dense", "out": 5}])
    other = Model(spec, init_params(spec, 0))
    with pytest.raises(ValueError, match="input shape"):
        invert_trigger(small_models[0], other, small_bundle.detection_clean, InversionConfig(**FAST))


def test_non_finite_loss_aborts_with_diagnostics(small_models, small_bundle, monkeypatch):
    import crossexam.inversion as inv
    real = inv.regularization_loss
    monkeypatch.setattr(inv, "regularization_loss", lambda m, p, n: ad.scale(real(m, p, n), np.inf))
    with pytest.raises(InversionDiverged) as err:
        invert_trigger(*small_models, small_bundle.detection_clean, InversionConfig(target=0, **FAST))
    assert err.value.epoch == 1 and "loss_reg" in str(err.value)


def test_heavier_regularisation_does_not_grow_the_mask(patch_setup, clean_models, bundle):
    ckpt = patch_setup[0]
    for seed in range(3):
        cfg = InversionConfig(seed=seed, target=1, epochs=30, num_probe_samples=300)
        light = invert_trigger(ckpt, clean_models[0], bundle.detection_clean, replace(cfg, weight_reg=0.01))
        heavy = invert_trigger(ckpt, clean_models[0], bundle.detection_clean, replace(cfg, weight_reg=0.1))
        assert heavy.trigger.mask.sum() <= light.trigger.mask.sum() + 1e-6, seed


def test_clean_pairs_keep_higher_similarity_than_mixed_pairs(bundle, clean_models, patch_setup):
    """Final CKA under the recovered trigger: clean/clean >= 0.6, clean/backdoored <= 0.45."""
    cfg = InversionConfig()
    clean_pair = invert_trigger(clean_models[0], clean_models[1], bundle.detection_clean, cfg)
    mixed_pair = invert_trigger(patch_setup[0], clean_models[0], bundle.detection_clean, cfg)
    assert clean_pair.final_similarity >= 0.6
    assert mixed_pair.final_similarity <= 0.45, f"mixed CKA {mixed_pair.final_similarity:.3f}"
