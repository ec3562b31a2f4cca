import math

import numpy as np
import pytest

from mpnet.autodiff import Variable
from mpnet.data import AugmentConfig, stratified_kfold, synthetic_dataset
from mpnet.metrics import aggregate
from mpnet.models import MINI, ParamStore, build_mvgg19
from mpnet.training import AdamState, TrainConfig, adam_step, cross_validate, train_model


def _store(value, grad):
    var = Variable(np.array(value, np.float32), trainable=True, name="p")
    var.grad = np.array(grad, np.float32)
    return ParamStore({"p": var}, {}, {"p": "head"})


class TestAdam:
    def test_defaults(self):
        st = AdamState()
        assert (st.lr, st.beta1, st.beta2, st.epsilon) == (0.001, 0.9, 0.999, 1e-8)

    def test_first_step_scalar(self):
        params = _store([1.0], [0.5])
        adam_step(params, AdamState.for_params(params))
        expected = 1.0 - 0.001 * 0.5 / (0.5 + 1e-8)
        assert params["p"].value[0] == pytest.approx(expected, abs=1e-7)

    def test_two_steps_against_scalar_simulation(self):
        params = _store([0.3], [1.0])
        st = AdamState.for_params(params)
        p, m, v = 0.3, 0.0, 0.0
        for t in (1, 2):
            adam_step(params, st)
            m = 0.9 * m + 0.1 * 1.0
            v = 0.999 * v + 0.001 * 1.0
            p -= 0.001 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert st.t == 2
        assert abs(params["p"].value[0] - p) <= 1e-7

    def test_zero_gradient(self):
        params = _store([1.0, -2.0], [0.0, 0.0])
        adam_step(params, AdamState.for_params(params))
        np.testing.assert_array_equal(params["p"].value, [1.0, -2.0])

    def test_zero_lr_only_moves_moments(self):
        params = _store([1.0, -2.0], [0.3, 0.1])
        st = AdamState.for_params(params, lr=0.0)
        adam_step(params, st)
        np.testing.assert_array_equal(params["p"].value, [1.0, -2.0])
        assert st.t == 1 and np.any(st.m["p"] != 0) and np.any(st.v["p"] != 0)

    def test_frozen_untouched_and_moments_only_for_trainable(self):
        params = _store([1.0], [0.5])
        frozen = Variable(np.array([4.0], np.float32), trainable=False, name="f")
        frozen.grad = np.array([9.0], np.float32)
        params.vars["f"], params.groups["f"] = frozen, "backbone"
        st = AdamState.for_params(params)
        assert list(st.m) == ["p"]
        adam_step(params, st)
        assert params["f"].value.tobytes() == np.array([4.0], np.float32).tobytes()

    def test_missing_moments(self):
        params = _store([1.0], [0.5])
        with pytest.raises(KeyError):
            adam_step(params, AdamState())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(inner_val_fraction=0.6)
    with pytest.raises(ValueError):
        TrainConfig(freeze_policy="some")


@pytest.fixture(scope="module")
def tiny():
    return synthetic_dataset("synthetic-stripes", n_samples=48, side=32, seed=3)


def _train(ds, seed=0, policy="backbone", epochs=2):
    spec, params = build_mvgg19(MINI, 2, seed=1)
    before = params.snapshot()
    cfg = TrainConfig(epochs=epochs, batch_size=8, freeze_policy=policy, master_seed=seed)
    curves = train_model(spec, params, np.arange(40), np.arange(40, 48), ds, AugmentConfig(master_seed=seed), cfg)
    return curves, before, params


def test_backbone_freeze_is_bit_exact(tiny):
    curves, before, params = _train(tiny)
    after = params.snapshot()
    for name, group in params.groups.items():
        same = before[name].tobytes() == after[name].tobytes()
        assert same == (group in ("backbone", "tap")), name
    assert len(curves.train_loss) == 2 and len(curves.val_acc) == 2


def test_same_seed_is_bit_identical(tiny):
    a, _, pa = _train(tiny, seed=5)
    b, _, pb = _train(tiny, seed=5)
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss
    assert all(pa.tensors()[k].tobytes() == pb.tensors()[k].tobytes() for k in pa.tensors())


def test_overlapping_split_rejected(tiny):
    spec, params = build_mvgg19(MINI, 2)
    with pytest.raises(ValueError):
        train_model(spec, params, np.arange(10), np.arange(5, 15), tiny, None, TrainConfig(epochs=1))


def test_cross_validate_reports(tiny):
    plan = stratified_kfold(tiny, 3, seed=0)
    cfg = TrainConfig(epochs=1, batch_size=16)
    report = cross_validate(lambda s: build_mvgg19(MINI, 2, seed=s), tiny, plan, AugmentConfig.disabled(),
                            cfg, model_name="mvgg19")
    assert [f.fold for f in report.folds] == [0, 1, 2]
    assert report.aggregate["accuracy"] == pytest.approx(np.mean([f.accuracy for f in report.folds]), abs=1e-9)
    assert report.aggregate == aggregate(report.folds)
    for f in report.folds:
        assert f.n_train + f.n_val + sum(sum(r) for r in f.confusion.counts) == len(tiny)
