import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hccm import tensor as T
from hccm.cache import precompute
from hccm.checks import toy_model_config
from hccm.data import SyntheticConfig, gen_dataset
from hccm.model import VARIANTS, HccmModel
from hccm.tensor import Tensor
from hccm.train import (TrainConfig, TrainingAborted, UndefinedMetricError, auc, auc_pairwise, logloss,
                        mean_logloss, train)


# ---------------------------------------------------------------- logloss

def test_logloss_hand_values():
    assert logloss(Tensor([1 - 1e-12]), [1]).item() == pytest.approx(0.0, abs=1e-11)
    assert logloss(Tensor([0.5]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert logloss(Tensor([0.5]), [1]).item() == pytest.approx(0.693147, abs=1e-6)
    assert logloss(Tensor([0.9, 0.2]), [1, 0]).item() == pytest.approx(0.164252, abs=1e-6)
    assert logloss(Tensor([0.9, 0.2]), [1, 0]).item() == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-15)


def test_logloss_is_finite_at_the_boundary():
    loss = logloss(Tensor([0.0, 1.0]), [1, 0]).item()
    # 1 - 1e-12 is not exact in binary, so log(1 - p) sits ~1e-6 relative off
    assert loss == pytest.approx(-math.log(1e-12), rel=1e-5)


def test_logloss_gradient_matches_finite_differences():
    p = Tensor(np.array([0.3, 0.8, 0.55]), requires_grad=True)
    assert T.grad_check(lambda: logloss(p, [1, 0, 1]), [p]) <= 1e-6


# ---------------------------------------------------------------- auc

def test_auc_hand_cases():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.4] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert auc([0.8, 0.7, 0.6, 0.5], [1, 0, 1, 0]) == 0.75


def test_auc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


def test_rank_auc_equals_pairwise_oracle_exactly_with_ties():
    rng = np.random.default_rng(2024)
    for _ in range(60):
        n = int(rng.integers(2, 3000))
        scores = np.round(rng.normal(size=n), int(rng.integers(0, 3)))  # rounding injects ties
        labels = rng.random(n) < rng.uniform(0.05, 0.95)
        labels[0], labels[1] = True, False
        assert auc(scores, labels) == auc_pairwise(scores, labels)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-10**6, 10**6), min_size=2, max_size=60, unique=True),
       st.integers(0, 2**32 - 1))
def test_auc_complement_and_monotone_invariance(ints, seed):
    scores = np.array(ints) / 8.0
    labels = np.random.default_rng(seed).random(len(scores)) < 0.5
    labels[0], labels[1] = True, False
    a = auc(scores, labels)
    assert a + auc(-scores, labels) == pytest.approx(1.0, abs=1e-12)
    assert auc(np.exp(scores / 1e6) * 3 + 7, labels) == a


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def planted():
    cfg = SyntheticConfig(n_users=120, n_categories=4, images_per_category=6, image_size=(8, 8, 3),
                          impressions_per_user=12, behavior_max=3, behavior_min=1, seed=5)
    train_s, test_s, catalog = gen_dataset(cfg)
    return train_s, test_s, catalog


def toy_model(variant, seed=0, **kw):
    return HccmModel(toy_model_config(**kw), variant, seed=seed)


def sources_for(model, catalog):
    return {} if model.variant == "DIN" else {"cache": precompute(catalog, model)}


def test_zero_learning_rate_changes_nothing(planted):
    train_s, _, catalog = planted
    model = toy_model("HCCM")
    before = {n: t.data.copy() for n, t in model.params.items()}
    rep = train(train_s, TrainConfig(variant="HCCM", lr=0.0, epochs=2, batch_size=64), model,
                **sources_for(model, catalog))
    for n, t in model.params.items():
        np.testing.assert_array_equal(t.data, before[n])
    assert rep.epoch_losses == [rep.initial_loss] * 2


@pytest.mark.parametrize("variant", VARIANTS)
def test_one_epoch_lowers_training_loss(planted, variant):
    train_s, _, catalog = planted
    model = toy_model(variant)
    src = sources_for(model, catalog)
    rep = train(train_s, TrainConfig(variant=variant, epochs=1, batch_size=32, lr=3e-3), model, **src)
    assert rep.epoch_losses[0] < rep.initial_loss
    assert mean_logloss(model, train_s, **src) == rep.epoch_losses[0]


def test_training_is_bit_reproducible(planted):
    train_s, test_s, catalog = planted
    reports = []
    for _ in range(2):
        model = toy_model("HCCM", seed=3)
        reports.append(train(train_s, TrainConfig(variant="HCCM", epochs=2, batch_size=50, seed=3), model,
                             test_s, **sources_for(model, catalog)))
    a, b = reports
    assert a.checksum == b.checksum
    assert a.batch_losses == b.batch_losses and a.test_auc == b.test_auc


def test_frozen_parameters_are_untouched_by_training(planted):
    train_s, _, catalog = planted
    model = toy_model("DIN+FixedCNN")
    frozen = [p.data.copy() for p in model.frozen_params()]
    train(train_s, TrainConfig(variant="DIN+FixedCNN", epochs=1, lr=1e-2), model, **sources_for(model, catalog))
    for p, f in zip(model.frozen_params(), frozen):
        np.testing.assert_array_equal(p.data, f)


def test_non_finite_loss_aborts_with_diagnostics(planted):
    train_s, _, _ = planted
    model = toy_model("DIN")
    model.params["head.w0"].data[0, 0] = np.nan
    with pytest.raises(TrainingAborted) as exc:
        train(train_s, TrainConfig(variant="DIN", epochs=1), model, catalog=None)
    assert exc.value.batch_id == 0
    assert "head.w0" in exc.value.param_norms


def test_report_serializations(planted):
    train_s, test_s, catalog = planted
    model = toy_model("DIN")
    rep = train(train_s, TrainConfig(variant="DIN", epochs=1), model, test_s)
    doc = rep.to_dict()
    assert set(doc) == {"variant", "initial_loss", "epoch_losses", "test_auc", "wall_clock", "checksum",
                        "n_train", "n_test"}
    assert "wall clock" not in rep.to_text(timing=False)
    assert rep.checksum in rep.to_text()
